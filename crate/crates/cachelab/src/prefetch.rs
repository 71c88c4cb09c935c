//! Readahead: on a cache miss the kernel speculatively fetches the whole
//! surrounding window, so a single access can pull in up to
//! `window_pages` neighbours. Anything that wants per-page residency to
//! carry information has to keep its pages at least one window apart.

use serde::{Deserialize, Serialize};

use crate::cache::{FileId, PageId, Simulation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadaheadConfig {
    pub window_pages: u32,
    pub enabled: bool,
}

impl Default for ReadaheadConfig {
    fn default() -> Self {
        ReadaheadConfig { window_pages: 32, enabled: true }
    }
}

/// The smallest index distance guaranteeing that an access to one page
/// never fetches the other.
pub fn min_safe_stride(cfg: &ReadaheadConfig) -> u32 {
    cfg.window_pages
}

/// Window-aligned page range fetched by a miss at `index`, clamped to the
/// file. Returned as `(start, end)` with `end` exclusive.
pub fn window_range(cfg: &ReadaheadConfig, num_pages: u32, index: u32) -> (u32, u32) {
    let w = cfg.window_pages.max(1);
    let start = (index / w) * w;
    let end = (start + w).min(num_pages);
    (start, end)
}

/// Fetch the readahead window around a miss. The missed page itself has
/// already entered the cache through the normal access path; its window
/// mates land on the inactive list unreferenced. Returns the pages
/// actually fetched (already-resident neighbours are left alone).
pub fn on_miss(sim: &mut Simulation, file: FileId, index: u32) -> Vec<PageId> {
    let cfg = sim.readahead;
    let num_pages = match sim.file(file) {
        Ok(f) => f.num_pages,
        Err(_) => return Vec::new(),
    };
    if index >= num_pages {
        return Vec::new();
    }
    let (start, end) = window_range(&cfg, num_pages, index);
    let mut fetched = Vec::new();
    for i in start..end {
        if i == index {
            continue;
        }
        let page = PageId::new(file, i);
        if sim.insert_prefetched(page) {
            fetched.push(page);
        }
    }
    fetched
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{Integrity, Regime};

    #[test]
    fn miss_fetches_aligned_window() {
        let mut s = Simulation::new(Regime::LinuxGlobal, 256, 1);
        let f = s.register_file("lib", 100, true);
        let p = s.spawn_process(Integrity::SameUser);
        s.map_file(p, f).unwrap();
        s.access_page(p, PageId::new(f, 5)).unwrap();
        for i in 0..32 {
            assert!(s.is_cached(PageId::new(f, i)), "page {i} missing from window");
        }
        assert!(!s.is_cached(PageId::new(f, 32)));
    }

    #[test]
    fn window_clamps_to_file_end() {
        let mut s = Simulation::new(Regime::LinuxGlobal, 256, 1);
        let f = s.register_file("tail", 40, true);
        let p = s.spawn_process(Integrity::SameUser);
        s.map_file(p, f).unwrap();
        s.access_page(p, PageId::new(f, 39)).unwrap();
        for i in 32..40 {
            assert!(s.is_cached(PageId::new(f, i)));
        }
        assert_eq!(s.cached_pages(), 8);
    }

    #[test]
    fn stride_spaced_accesses_stay_isolated() {
        let mut s = Simulation::new(Regime::LinuxGlobal, 4096, 1);
        let f = s.register_file("frame", 32 * 8, true);
        let p = s.spawn_process(Integrity::SameUser);
        s.map_file(p, f).unwrap();
        let stride = min_safe_stride(&s.readahead);
        s.access_page(p, PageId::new(f, 0)).unwrap();
        s.access_page(p, PageId::new(f, 2 * stride)).unwrap();
        assert!(!s.is_cached(PageId::new(f, stride)), "untouched slot was fetched");
        assert!(!s.is_cached(PageId::new(f, 3 * stride)));
    }

    #[test]
    fn disabled_readahead_fetches_nothing_extra() {
        let mut s = Simulation::new(Regime::LinuxGlobal, 256, 1);
        s.readahead.enabled = false;
        let f = s.register_file("lib", 100, true);
        let p = s.spawn_process(Integrity::SameUser);
        s.map_file(p, f).unwrap();
        s.access_page(p, PageId::new(f, 5)).unwrap();
        assert_eq!(s.cached_pages(), 1);
    }

    #[test]
    fn prefetched_pages_are_unreferenced_inactive() {
        let mut s = Simulation::new(Regime::LinuxGlobal, 256, 1);
        let f = s.register_file("lib", 64, true);
        let p = s.spawn_process(Integrity::SameUser);
        s.map_file(p, f).unwrap();
        s.access_page(p, PageId::new(f, 0)).unwrap();
        let e = s.entry(PageId::new(f, 7)).unwrap();
        assert_eq!(e.list, crate::cache::CacheList::Inactive);
        assert!(!e.referenced);
    }
}
