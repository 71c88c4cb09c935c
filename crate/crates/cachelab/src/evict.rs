//! Eviction engine: forcing a chosen page out of a cache the attacker
//! does not control.
//!
//! On the global-cache regime the engine works by pressure. A survey
//! splits the attacker-readable world into three sets: pages that are
//! already resident and must be kept hot so the system stays responsive
//! (set 1), uncached filler to stream through the cache (set 2), and
//! optionally a block of pinned pages that shrink the effective capacity
//! (set 3). The readahead window around every registered target is
//! guarded: those pages are re-referenced alongside set 1 so a prefetch
//! never resurrects the target. Filler is accessed in seeded-random order
//! and the engine polls the target between rounds, stopping at the first
//! non-resident answer.
//!
//! On the working-set regime eviction is surgical instead: a process
//! unlocks pages out of its own working set, and a quota-holding attacker
//! squeezes a victim's working set down to the floor to push a target out.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;

use crate::cache::{FileId, PageId, ProcId, SimError, Simulation, WS_FLOOR_PAGES};
use crate::prefetch;
use crate::probe;

const SURVEY_RNG_TAG: u64 = 0x5eed_5e72;
const BLOCKER_FILE_LABEL: &str = "pinned-blockers";
const MAX_ROUNDS: u32 = 64;

#[derive(Clone, Debug)]
pub enum EvictionError {
    Sim(SimError),
    UnregisteredTarget(PageId),
    NothingToSurvey,
}

impl fmt::Display for EvictionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvictionError::Sim(e) => write!(f, "{e}"),
            EvictionError::UnregisteredTarget(p) => {
                write!(f, "page {p} was not registered with the survey, no guard in effect")
            }
            EvictionError::NothingToSurvey => {
                write!(f, "survey needs at least one readable file")
            }
        }
    }
}

impl std::error::Error for EvictionError {}

impl From<SimError> for EvictionError {
    fn from(e: SimError) -> Self {
        EvictionError::Sim(e)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SurveyConfig {
    /// Pinned blocker pages to plant (0 disables set 3).
    pub set3_pages: usize,
    /// Cap on surveyed filler, for experiments on under-provisioned sets.
    pub set2_limit: Option<usize>,
}

/// The three eviction sets plus guard pages, produced by [`survey_cache`].
#[derive(Clone, Debug)]
pub struct EvictionSetBundle {
    /// Resident pages kept hot through every eviction round.
    pub set1: Vec<PageId>,
    /// Uncached filler in seeded-random access order.
    pub set2: Vec<PageId>,
    /// Pinned blocker pages occupying capacity.
    pub set3: Vec<PageId>,
    /// Readahead windows around the registered targets (targets excluded).
    pub guard: Vec<PageId>,
    pub targets: Vec<PageId>,
    target_set: HashSet<PageId>,
    cursor: usize,
}

impl EvictionSetBundle {
    pub fn is_target(&self, page: PageId) -> bool {
        self.target_set.contains(&page)
    }

    /// All four sets plus targets are pairwise disjoint.
    pub fn pairwise_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.set1
            .iter()
            .chain(&self.set2)
            .chain(&self.set3)
            .chain(&self.guard)
            .chain(&self.targets)
            .all(|p| seen.insert(*p))
    }
}

/// Outcome of one eviction attempt.
#[derive(Clone, Debug)]
pub struct EvictionReport {
    pub rounds: u32,
    /// Filler pages the engine accessed.
    pub pages_touched: usize,
    pub succeeded: bool,
    pub elapsed_ns: u64,
    /// Target residency observed after each round; on success the final
    /// entry is the first `false` seen.
    pub round_polls: Vec<bool>,
}

/// Probe the current cache through `attacker`'s eyes and build the
/// eviction sets over `files`. Every page of every target's readahead
/// window becomes a guard page. Surveying twice over an unchanged cache
/// yields identical bundles: the filler shuffle is keyed to the session
/// seed, not to call order.
pub fn survey_cache(
    sim: &mut Simulation,
    attacker: ProcId,
    files: &[FileId],
    targets: &[PageId],
    cfg: &SurveyConfig,
) -> Result<EvictionSetBundle, EvictionError> {
    if files.is_empty() {
        return Err(EvictionError::NothingToSurvey);
    }
    let mut guard_set: HashSet<PageId> = HashSet::new();
    let mut target_set: HashSet<PageId> = HashSet::new();
    for &t in targets {
        let num_pages = sim.file(t.file)?.num_pages;
        if t.index >= num_pages {
            return Err(SimError::PageOutOfRange { page: t, num_pages }.into());
        }
        target_set.insert(t);
        let (start, end) = prefetch::window_range(&sim.readahead, num_pages, t.index);
        for i in start..end {
            guard_set.insert(PageId::new(t.file, i));
        }
    }
    for t in &target_set {
        guard_set.remove(t);
    }

    let set3 = plant_blockers(sim, attacker, cfg.set3_pages)?;
    let set3_set: HashSet<PageId> = set3.iter().copied().collect();

    let mut set1 = Vec::new();
    let mut set2 = Vec::new();
    for &file in files {
        let f = sim.file(file)?;
        if !f.attacker_readable {
            return Err(SimError::NotReadable { proc: attacker, file }.into());
        }
        let num_pages = f.num_pages;
        let vec = probe::mincore(sim, attacker, file, 0, num_pages)?;
        for (i, resident) in vec.bits.iter().enumerate() {
            let page = PageId::new(file, i as u32);
            if guard_set.contains(&page) || target_set.contains(&page) || set3_set.contains(&page)
            {
                continue;
            }
            if *resident {
                set1.push(page);
            } else {
                set2.push(page);
            }
        }
    }
    let mut rng = sim.derive_rng(SURVEY_RNG_TAG);
    set2.shuffle(&mut rng);
    if let Some(limit) = cfg.set2_limit {
        set2.truncate(limit);
    }
    let mut guard: Vec<PageId> = guard_set.into_iter().collect();
    guard.sort();
    Ok(EvictionSetBundle {
        set1,
        set2,
        set3,
        guard,
        targets: targets.to_vec(),
        target_set,
        cursor: 0,
    })
}

/// Insert `count` pinned pages that occupy capacity but can never be
/// replacement victims. Reuses the blocker file across surveys so repeat
/// surveys see the same world.
fn plant_blockers(
    sim: &mut Simulation,
    attacker: ProcId,
    count: usize,
) -> Result<Vec<PageId>, SimError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let file = match sim.file_by_label(BLOCKER_FILE_LABEL) {
        Some(f) => f,
        None => {
            let f = sim.register_file(BLOCKER_FILE_LABEL, count as u32, false);
            sim.map_file(attacker, f)?;
            f
        }
    };
    let mut pages = Vec::with_capacity(count);
    for i in 0..count as u32 {
        let page = PageId::new(file, i);
        sim.insert_page(page, true);
        pages.push(page);
    }
    Ok(pages)
}

/// Push `target` out of the global cache by streaming filler through it.
///
/// The initial residency probe is a real (charged) query; if the target
/// is already gone the attempt succeeds immediately with zero filler
/// accesses. Otherwise one flat eviction cost is charged and the engine
/// runs pressure rounds, re-referencing set 1 and the guard each round
/// and polling the target in between, stopping at the first non-resident
/// poll. The filler budget starts at an eighth of capacity and doubles on
/// failure, capped at twice capacity.
pub fn evict_page_linux(
    sim: &mut Simulation,
    attacker: ProcId,
    target: PageId,
    bundle: &mut EvictionSetBundle,
) -> Result<EvictionReport, EvictionError> {
    if !bundle.is_target(target) {
        return Err(EvictionError::UnregisteredTarget(target));
    }
    let start = sim.clock();
    let initial = probe::mincore(sim, attacker, target.file, target.index, 1)?;
    if !initial.bits[0] {
        return Ok(EvictionReport {
            rounds: 0,
            pages_touched: 0,
            succeeded: true,
            elapsed_ns: sim.clock() - start,
            round_polls: vec![false],
        });
    }

    sim.charge(sim.costs.linux_evict_ns);
    let capacity = sim.capacity_pages();
    let mut budget = (capacity / 8).max(1);
    let mut touched = 0usize;
    let mut rounds = 0u32;
    let mut round_polls = Vec::new();
    let mut succeeded = false;

    while rounds < MAX_ROUNDS {
        rounds += 1;
        keep_hot(sim, attacker, &bundle.set1);
        keep_hot(sim, attacker, &bundle.guard);
        // Round-boundary aging: anything on the active list that was not
        // just re-referenced falls into the churn lane, so a target that
        // picked up a stray promotion is still reachable by pressure.
        sim.age_active_list();

        let mut accessed = 0usize;
        let mut consecutive_skips = 0usize;
        while accessed < budget && !bundle.set2.is_empty() {
            if consecutive_skips >= bundle.set2.len() {
                break; // a full lap found nothing uncached
            }
            let page = bundle.set2[bundle.cursor];
            bundle.cursor = (bundle.cursor + 1) % bundle.set2.len();
            if sim.is_cached(page) {
                consecutive_skips += 1;
                continue;
            }
            consecutive_skips = 0;
            sim.touch_page_nocost(attacker, page)?;
            accessed += 1;
            touched += 1;
        }

        let resident = sim.is_cached(target);
        round_polls.push(resident);
        if !resident {
            succeeded = true;
            break;
        }
        if accessed == 0 {
            break; // filler exhausted
        }
        budget = (budget * 2).min(2 * capacity);
    }

    Ok(EvictionReport {
        rounds,
        pages_touched: touched,
        succeeded,
        elapsed_ns: sim.clock() - start,
        round_polls,
    })
}

/// Re-reference every still-cached page twice: once to promote it if it
/// sits on the inactive list, once to set the referenced bit. This is the
/// model stand-in for the continuous accessor that keeps set 1 hot.
fn keep_hot(sim: &mut Simulation, attacker: ProcId, pages: &[PageId]) {
    for &p in pages {
        if sim.is_cached(p) {
            let _ = sim.touch_page_nocost(attacker, p);
            let _ = sim.touch_page_nocost(attacker, p);
        }
    }
}

/// Push `target` out of a working set. When `attacker == victim` this is
/// the surgical self-eviction path (the page leaves the attacker's own
/// working set but stays cached). Against another process the attacker
/// needs quota permission and squeezes the victim's working-set ceiling
/// to the floor, dropping least-recent pages, then restores the old
/// bounds.
pub fn evict_page_windows(
    sim: &mut Simulation,
    attacker: ProcId,
    victim: ProcId,
    target: PageId,
) -> Result<EvictionReport, EvictionError> {
    let start = sim.clock();
    let records = probe::query_working_set(sim, attacker, victim, &[target])?;
    if !records[0].in_working_set {
        return Ok(EvictionReport {
            rounds: 0,
            pages_touched: 0,
            succeeded: true,
            elapsed_ns: sim.clock() - start,
            round_polls: Vec::new(),
        });
    }

    if attacker == victim {
        sim.charge(sim.costs.windows_evict_ns);
        // First call unlocks a locked page, second removes it.
        if !sim.ws_remove(attacker, target) {
            sim.ws_remove(attacker, target);
        }
    } else {
        if !sim.quota_permitted(attacker, victim)? {
            return Err(SimError::PermissionDenied {
                op: "evict_page_windows",
                reason: "attacker lacks quota permission over victim",
            }
            .into());
        }
        sim.charge(sim.costs.windows_evict_ns);
        let (saved_min, saved_max) = {
            let v = sim.process(victim)?;
            (v.ws_min_pages, v.ws_max_pages)
        };
        sim.set_process_working_set_size(
            attacker,
            victim,
            saved_min.min(WS_FLOOR_PAGES),
            WS_FLOOR_PAGES,
        )?;
        if sim.process(victim)?.ws_contains(target) && !sim.process(victim)?.ws_locked(target) {
            sim.ws_remove(victim, target);
        }
        sim.set_process_working_set_size(attacker, victim, saved_min, saved_max)?;
    }

    let succeeded = !sim.process(victim)?.ws_contains(target);
    Ok(EvictionReport {
        rounds: 1,
        pages_touched: 0,
        succeeded,
        elapsed_ns: sim.clock() - start,
        round_polls: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{Integrity, Regime};

    /// A small world: a victim library plus corpus files the attacker can
    /// stream through the cache.
    fn world(capacity: usize) -> (Simulation, ProcId, ProcId, FileId, Vec<FileId>) {
        let mut s = Simulation::new(Regime::LinuxGlobal, capacity, 11);
        let lib = s.register_file("victim-lib", 64, true);
        let corpus: Vec<FileId> = (0..4)
            .map(|i| s.register_file(&format!("corpus-{i}"), 4 * capacity as u32, true))
            .collect();
        let attacker = s.spawn_process(Integrity::SameUser);
        let victim = s.spawn_process(Integrity::SameUser);
        s.map_file(victim, lib).unwrap();
        s.map_file(attacker, lib).unwrap();
        for &f in &corpus {
            s.map_file(attacker, f).unwrap();
        }
        (s, attacker, victim, lib, corpus)
    }

    #[test]
    fn pressure_evicts_target_and_spares_guard_and_set1() {
        let (mut s, attacker, victim, lib, corpus) = world(2048);
        // Warm some corpus so set1 is non-trivial, then let the victim
        // page in its library window.
        for i in 0..256 {
            s.touch_page_nocost(attacker, PageId::new(corpus[0], i * 32)).unwrap();
        }
        let target = PageId::new(lib, 14);
        s.touch_page_nocost(victim, target).unwrap(); // caches whole window
        let mut bundle = survey_cache(
            &mut s,
            attacker,
            &corpus,
            &[target],
            &SurveyConfig::default(),
        )
        .unwrap();
        assert!(bundle.pairwise_disjoint());
        assert!(!bundle.set1.is_empty());
        let report = evict_page_linux(&mut s, attacker, target, &mut bundle).unwrap();
        assert!(report.succeeded);
        assert!(!s.is_cached(target));
        for &g in &bundle.guard {
            if g.file == lib {
                assert!(s.is_cached(g), "guard page {g} was lost");
            }
        }
        let surviving = bundle.set1.iter().filter(|p| s.is_cached(**p)).count();
        assert!(
            surviving * 100 >= bundle.set1.len() * 95,
            "only {surviving}/{} of set1 survived",
            bundle.set1.len()
        );
    }

    #[test]
    fn survey_rejects_a_corpus_with_no_readable_files() {
        let (mut s, attacker, _, lib, _) = world(1024);
        let target = PageId::new(lib, 14);
        let err = survey_cache(&mut s, attacker, &[], &[target], &SurveyConfig::default())
            .unwrap_err();
        assert!(matches!(err, EvictionError::NothingToSurvey));

        let private = s.register_file("private-journal", 128, false);
        s.map_file(attacker, private).unwrap();
        let err = survey_cache(&mut s, attacker, &[private], &[target], &SurveyConfig::default())
            .unwrap_err();
        assert!(matches!(err, EvictionError::Sim(SimError::NotReadable { .. })));
    }

    #[test]
    fn uncached_target_succeeds_immediately() {
        let (mut s, attacker, _, lib, corpus) = world(1024);
        let target = PageId::new(lib, 10);
        let mut bundle =
            survey_cache(&mut s, attacker, &corpus, &[target], &SurveyConfig::default()).unwrap();
        let before = s.clock();
        let report = evict_page_linux(&mut s, attacker, target, &mut bundle).unwrap();
        assert!(report.succeeded);
        assert_eq!(report.pages_touched, 0);
        assert_eq!(report.rounds, 0);
        // Only the residency probe was charged.
        assert_eq!(s.clock() - before, s.costs.mincore_ns);
    }

    #[test]
    fn stop_early_polls_show_resident_until_final_round() {
        let (mut s, attacker, victim, lib, corpus) = world(2048);
        s.readahead.enabled = false; // small budgets, several rounds
        // An unsurveyed bystander file keeps the churn lane deep: its
        // pages sit ahead of the target and are not kept hot by set 1.
        let bystander = s.register_file("other-app", 1800, false);
        for i in 0..1800 {
            s.touch_page_nocost(victim, PageId::new(bystander, i)).unwrap();
        }
        let target = PageId::new(lib, 14);
        s.touch_page_nocost(victim, target).unwrap();
        let mut bundle =
            survey_cache(&mut s, attacker, &corpus, &[target], &SurveyConfig::default()).unwrap();
        let report = evict_page_linux(&mut s, attacker, target, &mut bundle).unwrap();
        assert!(report.succeeded);
        assert!(report.rounds >= 2, "want a multi-round run, got {}", report.rounds);
        let (last, rest) = report.round_polls.split_last().unwrap();
        assert!(!last);
        assert!(rest.iter().all(|r| *r), "target vanished before the final round");
    }

    #[test]
    fn exhausted_filler_reports_failure() {
        let (mut s, attacker, victim, lib, corpus) = world(2048);
        s.readahead.enabled = false; // filler cap must mean a page cap
        let target = PageId::new(lib, 14);
        s.touch_page_nocost(victim, target).unwrap();
        for i in 0..1900 {
            s.touch_page_nocost(attacker, PageId::new(corpus[0], i)).unwrap();
        }
        let cfg = SurveyConfig { set3_pages: 0, set2_limit: Some(20) };
        let mut bundle = survey_cache(&mut s, attacker, &corpus, &[target], &cfg).unwrap();
        let report = evict_page_linux(&mut s, attacker, target, &mut bundle).unwrap();
        assert!(!report.succeeded);
        assert!(s.is_cached(target));
    }

    #[test]
    fn unregistered_target_is_rejected() {
        let (mut s, attacker, _, lib, corpus) = world(512);
        let mut bundle =
            survey_cache(&mut s, attacker, &corpus, &[], &SurveyConfig::default()).unwrap();
        let err = evict_page_linux(&mut s, attacker, PageId::new(lib, 3), &mut bundle);
        assert!(matches!(err, Err(EvictionError::UnregisteredTarget(_))));
    }

    #[test]
    fn blockers_survive_eviction_and_shrink_capacity() {
        let (mut s, attacker, victim, lib, corpus) = world(1024);
        let target = PageId::new(lib, 14);
        s.touch_page_nocost(victim, target).unwrap();
        let cfg = SurveyConfig { set3_pages: 256, set2_limit: None };
        let mut bundle = survey_cache(&mut s, attacker, &corpus, &[target], &cfg).unwrap();
        assert_eq!(bundle.set3.len(), 256);
        let report = evict_page_linux(&mut s, attacker, target, &mut bundle).unwrap();
        assert!(report.succeeded);
        for &b in &bundle.set3 {
            assert!(s.is_cached(b), "blocker {b} was evicted");
        }
    }

    #[test]
    fn repeat_survey_is_identical_without_cache_changes() {
        let (mut s, attacker, victim, lib, corpus) = world(512);
        s.touch_page_nocost(victim, PageId::new(lib, 8)).unwrap();
        let a = survey_cache(&mut s, attacker, &corpus, &[], &SurveyConfig::default()).unwrap();
        let b = survey_cache(&mut s, attacker, &corpus, &[], &SurveyConfig::default()).unwrap();
        assert_eq!(a.set1, b.set1);
        assert_eq!(a.set2, b.set2);
    }

    #[test]
    fn windows_self_eviction_is_surgical() {
        let mut s = Simulation::new(Regime::WindowsWorkingSet, 1024, 5);
        let f = s.register_file("lib", 32, true);
        let p = s.spawn_process(Integrity::SameUser);
        s.map_file(p, f).unwrap();
        let a = PageId::new(f, 0);
        let b = PageId::new(f, 1);
        s.access_page(p, a).unwrap();
        s.access_page(p, b).unwrap();
        let report = evict_page_windows(&mut s, p, p, a).unwrap();
        assert!(report.succeeded);
        assert!(!s.process(p).unwrap().ws_contains(a));
        assert!(s.process(p).unwrap().ws_contains(b), "unrelated page was disturbed");
        assert!(s.is_cached(a), "page must stay in the global cache");
        assert_eq!(report.elapsed_ns, s.costs.qws_ns + s.costs.windows_evict_ns);
    }

    #[test]
    fn windows_quota_eviction_squeezes_victim() {
        let mut s = Simulation::new(Regime::WindowsWorkingSet, 4096, 5);
        s.readahead.enabled = false;
        let f = s.register_file("app", 400, false);
        let attacker = s.spawn_process(Integrity::SameUser);
        let victim = s.spawn_process(Integrity::SameUser);
        s.map_file(victim, f).unwrap();
        let target = PageId::new(f, 0);
        s.access_page(victim, target).unwrap();
        for i in 1..300 {
            s.access_page(victim, PageId::new(f, i)).unwrap();
        }
        let (min_before, max_before) = {
            let v = s.process(victim).unwrap();
            (v.ws_min_pages, v.ws_max_pages)
        };
        let report = evict_page_windows(&mut s, attacker, victim, target).unwrap();
        assert!(report.succeeded);
        assert!(!s.process(victim).unwrap().ws_contains(target));
        assert!(s.is_cached(target));
        let v = s.process(victim).unwrap();
        assert_eq!((v.ws_min_pages, v.ws_max_pages), (min_before, max_before));
    }

    #[test]
    fn windows_eviction_respects_integrity() {
        let mut s = Simulation::new(Regime::WindowsWorkingSet, 1024, 5);
        let f = s.register_file("svc", 32, false);
        let attacker = s.spawn_process(Integrity::SameUser);
        let victim = s.spawn_process(Integrity::Admin);
        s.map_file(victim, f).unwrap();
        let target = PageId::new(f, 0);
        s.access_page(victim, target).unwrap();
        let err = evict_page_windows(&mut s, attacker, victim, target);
        assert!(matches!(err, Err(EvictionError::Sim(SimError::PermissionDenied { .. }))));
    }
}
