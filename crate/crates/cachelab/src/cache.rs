//! Core page cache simulation.
//!
//! Models a single machine's page cache under one of two replacement
//! regimes:
//!
//! * `LinuxGlobal`: one global cache shared by all processes, organized
//!   as an inactive list and an active list with second-chance handling
//!   and a ghost list of recently evicted pages.
//! * `WindowsWorkingSet`: the same global cache plus per-process working
//!   sets with LRU trimming, a floor of [`WS_FLOOR_PAGES`] pages, and
//!   lockable entries.
//!
//! ## Timeline
//!
//! All activity shares one logical clock measured in nanoseconds.
//! Attacker-visible operations charge fixed costs from [`CostModel`];
//! victim activity is scripted through [`Simulation::schedule_touch`] and
//! fires while the clock advances. There is no host-time dependence
//! anywhere: identical scripts and seeds produce identical state.
//!
//! ## Lists
//!
//! List membership uses stamped entries so promotions and demotions are
//! O(1): a queue slot is live only while its stamp matches the page's
//! current stamp, and stale slots are discarded lazily when popped.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::prefetch::{self, ReadaheadConfig};
use crate::probe::ProbePolicy;

/// Bytes per page. Everything in the lab is sized in 4 KiB pages.
pub const PAGE_BYTES: u64 = 4096;

/// Default working-set ceiling for a fresh process (1.4 MB of pages).
pub const WS_DEFAULT_MAX_PAGES: usize = 345;

/// Default working-set minimum for a fresh process (100 KB of pages).
pub const WS_DEFAULT_MIN_PAGES: usize = 25;

/// Hard floor a working-set ceiling can be shrunk to (52 KB of pages).
pub const WS_FLOOR_PAGES: usize = 13;

/// Default global cache capacity in pages (256 MB).
pub const DEFAULT_CAPACITY_PAGES: usize = 65536;

/// Share counts observable through working-set queries saturate here.
pub const SHARE_COUNT_CAP: u8 = 7;

// ===========================================================================
// Identifiers and plain data
// ===========================================================================

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct FileId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct ProcId(pub u32);

/// A page of a named file: the unit every probe and eviction acts on.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PageId {
    pub file: FileId,
    pub index: u32,
}

impl PageId {
    pub fn new(file: FileId, index: u32) -> Self {
        PageId { file, index }
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file.0, self.index)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Regime {
    LinuxGlobal,
    WindowsWorkingSet,
}

impl Regime {
    pub fn is_windows(self) -> bool {
        matches!(self, Regime::WindowsWorkingSet)
    }
}

/// Privilege tier of a process. Ordering matters: probes and quota
/// operations against a target require the caller to sit at least as
/// high as the target.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Integrity {
    Low,
    SameUser,
    Admin,
}

/// Fixed per-operation costs charged to the logical clock.
///
/// These are configuration, not measurement: the simulation charges each
/// operation a flat price so throughput and latency figures are
/// comparable against real-system numbers without timing anything.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    /// One residency probe over a mapped range.
    pub mincore_ns: u64,
    /// One working-set query, regardless of how many pages it covers.
    pub qws_ns: u64,
    /// One successful cache-pressure eviction run.
    pub linux_evict_ns: u64,
    /// One working-set eviction step.
    pub windows_evict_ns: u64,
    /// One page access by an attacker-controlled process.
    pub access_ns: u64,
    /// One surgical working-set unlock/removal call.
    pub unlock_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            mincore_ns: 2_040,
            qws_ns: 466,
            linux_evict_ns: 149_000_000,
            windows_evict_ns: 4_480_000,
            access_ns: 1_500,
            unlock_ns: 1_000,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CacheList {
    Inactive,
    Active,
}

impl fmt::Display for CacheList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheList::Inactive => write!(f, "inactive"),
            CacheList::Active => write!(f, "active"),
        }
    }
}

/// Global cache bookkeeping for one resident page.
#[derive(Clone, Copy, Debug)]
pub struct CacheEntry {
    pub list: CacheList,
    pub referenced: bool,
    /// Entries that model pinned anonymous memory: they occupy capacity
    /// but are never replacement candidates.
    pub unevictable: bool,
    pub last_access: u64,
    stamp: u64,
}

pub struct FileObject {
    pub id: FileId,
    pub label: String,
    pub num_pages: u32,
    /// Whether an unprivileged attacker may open/map this file at all.
    pub attacker_readable: bool,
    pub mapped_by: HashSet<ProcId>,
}

#[derive(Clone, Copy, Debug)]
struct WsEntry {
    locked: bool,
    stamp: u64,
}

pub struct Process {
    pub id: ProcId,
    pub integrity: Integrity,
    pub ws_min_pages: usize,
    pub ws_max_pages: usize,
    /// Set when the process runs inside a no-IPC / no-network sandbox.
    /// The cache itself never consults this; it exists so tests can show
    /// that sandboxing has no effect on cache-borne channels.
    pub sandboxed: bool,
    mappings: HashSet<FileId>,
    ws: HashMap<PageId, WsEntry>,
    ws_order: VecDeque<(PageId, u64)>,
}

impl Process {
    pub fn maps(&self, file: FileId) -> bool {
        self.mappings.contains(&file)
    }

    pub fn ws_len(&self) -> usize {
        self.ws.len()
    }

    pub fn ws_contains(&self, page: PageId) -> bool {
        self.ws.contains_key(&page)
    }

    pub fn ws_locked(&self, page: PageId) -> bool {
        self.ws.get(&page).map(|e| e.locked).unwrap_or(false)
    }

    /// Working-set pages from least to most recently used.
    pub fn ws_pages_lru(&self) -> Vec<PageId> {
        self.ws_order
            .iter()
            .filter(|(p, stamp)| self.ws.get(p).map(|e| e.stamp) == Some(*stamp))
            .map(|(p, _)| *p)
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ScheduledTouch {
    time: u64,
    seq: u64,
    proc: ProcId,
    page: PageId,
}

// ===========================================================================
// Errors
// ===========================================================================

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimError {
    UnknownProcess(u32),
    UnknownFile(u32),
    PageOutOfRange { page: PageId, num_pages: u32 },
    NotMapped { proc: ProcId, file: FileId },
    NotReadable { proc: ProcId, file: FileId },
    PermissionDenied { op: &'static str, reason: &'static str },
    InvalidWsBounds { min: usize, max: usize },
    InvalidRange { first: u32, count: u32, num_pages: u32 },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::UnknownProcess(id) => write!(f, "unknown process {id}"),
            SimError::UnknownFile(id) => write!(f, "unknown file {id}"),
            SimError::PageOutOfRange { page, num_pages } => {
                write!(f, "page {page} out of range (file has {num_pages} pages)")
            }
            SimError::NotMapped { proc, file } => {
                write!(f, "process {} has not mapped file {}", proc.0, file.0)
            }
            SimError::NotReadable { proc, file } => {
                write!(f, "process {} cannot read file {}", proc.0, file.0)
            }
            SimError::PermissionDenied { op, reason } => {
                write!(f, "permission denied for {op}: {reason}")
            }
            SimError::InvalidWsBounds { min, max } => {
                write!(f, "invalid working-set bounds: min {min} > max {max}")
            }
            SimError::InvalidRange { first, count, num_pages } => {
                write!(
                    f,
                    "range [{first}, {first}+{count}) exceeds file of {num_pages} pages"
                )
            }
        }
    }
}

impl std::error::Error for SimError {}

// ===========================================================================
// Simulation
// ===========================================================================

pub struct Simulation {
    regime: Regime,
    capacity_pages: usize,
    seed: u64,
    files: Vec<FileObject>,
    procs: Vec<Process>,
    entries: HashMap<PageId, CacheEntry>,
    inactive: VecDeque<(PageId, u64)>,
    active: VecDeque<(PageId, u64)>,
    /// Eviction history, stamped like the lanes: `ghost_set` holds the
    /// live membership, the deque keeps order and may carry stale pairs
    /// that re-insertion left behind (compacted when they pile up).
    ghost: VecDeque<(PageId, u64)>,
    ghost_set: HashMap<PageId, u64>,
    /// How many working sets hold each page (windows regime).
    ws_counts: HashMap<PageId, u32>,
    clock: u64,
    stamp_counter: u64,
    event_seq: u64,
    events: VecDeque<ScheduledTouch>,
    /// Fire time of the most recent scripted touch per page, for
    /// detection-latency measurements.
    last_event_touch: HashMap<PageId, u64>,
    pub costs: CostModel,
    pub readahead: ReadaheadConfig,
    pub policy: ProbePolicy,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(regime: Regime, capacity_pages: usize, seed: u64) -> Self {
        assert!(capacity_pages > 0, "cache capacity must be positive");
        Simulation {
            regime,
            capacity_pages,
            seed,
            files: Vec::new(),
            procs: Vec::new(),
            entries: HashMap::new(),
            inactive: VecDeque::new(),
            active: VecDeque::new(),
            ghost: VecDeque::new(),
            ghost_set: HashMap::new(),
            ws_counts: HashMap::new(),
            clock: 0,
            stamp_counter: 0,
            event_seq: 0,
            events: VecDeque::new(),
            last_event_touch: HashMap::new(),
            costs: CostModel::default(),
            readahead: ReadaheadConfig::default(),
            policy: ProbePolicy::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn capacity_pages(&self) -> usize {
        self.capacity_pages
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn cached_pages(&self) -> usize {
        self.entries.len()
    }

    /// Session RNG. Draws advance shared state; use [`Simulation::derive_rng`]
    /// for streams that must be reproducible independent of draw order.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// A fresh RNG derived from the session seed and a purpose tag.
    pub fn derive_rng(&self, tag: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ tag)
    }

    // -- registration -------------------------------------------------------

    pub fn register_file(
        &mut self,
        label: &str,
        num_pages: u32,
        attacker_readable: bool,
    ) -> FileId {
        assert!(num_pages > 0, "files must have at least one page");
        let id = FileId(self.files.len() as u32);
        self.files.push(FileObject {
            id,
            label: label.to_string(),
            num_pages,
            attacker_readable,
            mapped_by: HashSet::new(),
        });
        id
    }

    pub fn spawn_process(&mut self, integrity: Integrity) -> ProcId {
        let id = ProcId(self.procs.len() as u32);
        self.procs.push(Process {
            id,
            integrity,
            ws_min_pages: WS_DEFAULT_MIN_PAGES,
            ws_max_pages: WS_DEFAULT_MAX_PAGES,
            sandboxed: false,
            mappings: HashSet::new(),
            ws: HashMap::new(),
            ws_order: VecDeque::new(),
        });
        id
    }

    pub fn set_sandboxed(&mut self, proc: ProcId, sandboxed: bool) {
        if let Some(p) = self.procs.get_mut(proc.0 as usize) {
            p.sandboxed = sandboxed;
        }
    }

    pub fn file(&self, id: FileId) -> Result<&FileObject, SimError> {
        self.files.get(id.0 as usize).ok_or(SimError::UnknownFile(id.0))
    }

    pub fn process(&self, id: ProcId) -> Result<&Process, SimError> {
        self.procs.get(id.0 as usize).ok_or(SimError::UnknownProcess(id.0))
    }

    pub fn files(&self) -> &[FileObject] {
        &self.files
    }

    pub fn file_by_label(&self, label: &str) -> Option<FileId> {
        self.files.iter().find(|f| f.label == label).map(|f| f.id)
    }

    pub fn map_file(&mut self, proc: ProcId, file: FileId) -> Result<(), SimError> {
        self.process(proc)?;
        self.file(file)?;
        self.procs[proc.0 as usize].mappings.insert(file);
        self.files[file.0 as usize].mapped_by.insert(proc);
        Ok(())
    }

    pub fn unmap_file(&mut self, proc: ProcId, file: FileId) -> Result<(), SimError> {
        self.process(proc)?;
        self.file(file)?;
        self.procs[proc.0 as usize].mappings.remove(&file);
        self.files[file.0 as usize].mapped_by.remove(&proc);
        Ok(())
    }

    fn validate_page(&self, page: PageId) -> Result<(), SimError> {
        let file = self.file(page.file)?;
        if page.index >= file.num_pages {
            return Err(SimError::PageOutOfRange { page, num_pages: file.num_pages });
        }
        Ok(())
    }

    // -- clock and scripted victims -----------------------------------------

    /// Advance the logical clock, firing any scripted touches that fall
    /// inside the advanced interval. Returns the new clock.
    pub fn advance_clock(&mut self, ns: u64) -> u64 {
        self.charge(ns);
        self.clock
    }

    pub(crate) fn charge(&mut self, ns: u64) {
        self.clock += ns;
        self.fire_due_events();
    }

    /// Schedule a victim touch of `page` by `proc` at absolute time `time`.
    pub fn schedule_touch(
        &mut self,
        time: u64,
        proc: ProcId,
        page: PageId,
    ) -> Result<(), SimError> {
        self.process(proc)?;
        self.validate_page(page)?;
        let seq = self.event_seq;
        self.event_seq += 1;
        let ev = ScheduledTouch { time, seq, proc, page };
        let pos = self
            .events
            .iter()
            .position(|e| (e.time, e.seq) > (time, seq))
            .unwrap_or(self.events.len());
        self.events.insert(pos, ev);
        Ok(())
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.events.front().map(|e| e.time)
    }

    pub fn pending_events(&self) -> usize {
        self.events.len()
    }

    /// When the last scripted touch of `page` fired.
    pub fn last_touch_time(&self, page: PageId) -> Option<u64> {
        self.last_event_touch.get(&page).copied()
    }

    fn fire_due_events(&mut self) {
        while let Some(ev) = self.events.front().copied() {
            if ev.time > self.clock {
                break;
            }
            self.events.pop_front();
            self.last_event_touch.insert(ev.page, ev.time);
            self.touch_validated(ev.proc, ev.page);
        }
    }

    /// Poll a predicate on a fixed cadence, fast-forwarding over gaps where
    /// no scripted activity can change the answer. Charges exactly what a
    /// tight polling loop would have charged. Returns the observing tick's
    /// clock, or `None` once `budget_ns` has been spent.
    pub fn poll_until<F>(&mut self, cadence_ns: u64, budget_ns: u64, pred: F) -> Option<u64>
    where
        F: Fn(&Simulation) -> bool,
    {
        assert!(cadence_ns > 0);
        let deadline = self.clock.saturating_add(budget_ns);
        loop {
            self.charge(cadence_ns);
            if pred(self) {
                return Some(self.clock);
            }
            if self.clock >= deadline {
                return None;
            }
            match self.next_event_time() {
                None => {
                    // Nothing scheduled: the predicate can never flip.
                    self.clock = deadline;
                    return None;
                }
                Some(te) if te > self.clock + cadence_ns => {
                    // Skip the polls that cannot observe anything new.
                    let ticks_until = (te - self.clock).div_ceil(cadence_ns);
                    let idle = (ticks_until - 1).min((deadline - self.clock) / cadence_ns);
                    self.clock += idle * cadence_ns;
                }
                Some(_) => {}
            }
        }
    }

    // -- core cache mechanics -----------------------------------------------

    fn next_stamp(&mut self) -> u64 {
        self.stamp_counter += 1;
        self.stamp_counter
    }

    pub fn is_cached(&self, page: PageId) -> bool {
        self.entries.contains_key(&page)
    }

    pub fn entry(&self, page: PageId) -> Option<&CacheEntry> {
        self.entries.get(&page)
    }

    pub fn in_ghost(&self, page: PageId) -> bool {
        self.ghost_set.contains_key(&page)
    }

    pub fn ghost_len(&self) -> usize {
        self.ghost_set.len()
    }

    /// Live ghost entries, oldest first. Stale deque pairs (left behind
    /// by re-insertions) are skipped by stamp mismatch.
    fn ghost_iter(&self) -> impl Iterator<Item = PageId> + '_ {
        self.ghost
            .iter()
            .filter(|(p, s)| self.ghost_set.get(p) == Some(s))
            .map(|(p, _)| *p)
    }

    /// Access a page as `proc`: the charged, attacker-visible entry point.
    pub fn access_page(&mut self, proc: ProcId, page: PageId) -> Result<(), SimError> {
        self.process(proc)?;
        self.validate_page(page)?;
        if !self.procs[proc.0 as usize].maps(page.file) {
            return Err(SimError::NotMapped { proc, file: page.file });
        }
        self.charge(self.costs.access_ns);
        self.touch_validated(proc, page);
        Ok(())
    }

    /// Access without charging the clock. Used for scripted victim activity
    /// and for engine-internal page streams whose price is charged flat.
    pub(crate) fn touch_page_nocost(&mut self, proc: ProcId, page: PageId) -> Result<(), SimError> {
        self.process(proc)?;
        self.validate_page(page)?;
        self.touch_validated(proc, page);
        Ok(())
    }

    fn touch_validated(&mut self, proc: ProcId, page: PageId) {
        let now = self.clock;
        if let Some(entry) = self.entries.get_mut(&page) {
            entry.last_access = now;
            if !entry.unevictable {
                match entry.list {
                    CacheList::Inactive => {
                        // Re-reference while inactive promotes to active.
                        let stamp = self.next_stamp();
                        let entry = self.entries.get_mut(&page).unwrap();
                        entry.list = CacheList::Active;
                        entry.referenced = false;
                        entry.stamp = stamp;
                        self.active.push_back((page, stamp));
                    }
                    CacheList::Active => {
                        entry.referenced = true;
                    }
                }
            }
        } else {
            let inserted = self.insert_page(page, false);
            if inserted && self.readahead.enabled {
                prefetch::on_miss(self, page.file, page.index);
            }
        }
        if self.regime.is_windows() && self.entries.contains_key(&page) {
            self.ws_insert(proc, page);
        }
    }

    /// Bring a page into the cache without any process attribution
    /// (readahead fetches, remote reads). New entries land on the inactive
    /// list unreferenced; a page re-accessed off the ghost list goes
    /// straight to the active list.
    pub(crate) fn insert_page(&mut self, page: PageId, unevictable: bool) -> bool {
        if self.entries.contains_key(&page) {
            return true;
        }
        while self.entries.len() >= self.capacity_pages {
            if self.evict_lru_candidate().is_none() {
                return false;
            }
        }
        let ghost_hit = self.ghost_set.remove(&page).is_some();
        let stamp = self.next_stamp();
        let list = if ghost_hit && !unevictable {
            CacheList::Active
        } else {
            CacheList::Inactive
        };
        self.entries.insert(
            page,
            CacheEntry {
                list,
                referenced: false,
                unevictable,
                last_access: self.clock,
                stamp,
            },
        );
        if !unevictable {
            match list {
                CacheList::Inactive => self.inactive.push_back((page, stamp)),
                CacheList::Active => self.active.push_back((page, stamp)),
            }
        }
        true
    }

    /// One aging sweep over the active list: unreferenced unheld pages
    /// are demoted onto the inactive tail, survivors keep their spot with
    /// the referenced bit cleared. The eviction engine runs this at round
    /// boundaries, right after its keep-alive pass, so pages that were
    /// just re-referenced never age out.
    pub(crate) fn age_active_list(&mut self) {
        let drained: Vec<(PageId, u64)> = self.active.drain(..).collect();
        for (page, stamp) in drained {
            let state = match self.entries.get(&page) {
                Some(e) if e.stamp == stamp && e.list == CacheList::Active => *e,
                _ => continue, // stale slot
            };
            let ws_held = self.ws_counts.get(&page).copied().unwrap_or(0) > 0;
            let new_stamp = self.next_stamp();
            let entry = self.entries.get_mut(&page).unwrap();
            entry.stamp = new_stamp;
            if ws_held || state.referenced {
                if !ws_held {
                    entry.referenced = false;
                }
                self.active.push_back((page, new_stamp));
            } else {
                entry.list = CacheList::Inactive;
                self.inactive.push_back((page, new_stamp));
            }
        }
    }

    /// Readahead entry point: insert a window mate on the inactive list.
    pub(crate) fn insert_prefetched(&mut self, page: PageId) -> bool {
        if self.entries.contains_key(&page) {
            return false;
        }
        // Prefetch is not an access; a ghosted page re-enters inactive.
        self.ghost_set.remove(&page);
        while self.entries.len() >= self.capacity_pages {
            if self.evict_lru_candidate().is_none() {
                return false;
            }
        }
        let stamp = self.next_stamp();
        self.entries.insert(
            page,
            CacheEntry {
                list: CacheList::Inactive,
                referenced: false,
                unevictable: false,
                last_access: self.clock,
                stamp,
            },
        );
        self.inactive.push_back((page, stamp));
        true
    }

    fn pop_valid_inactive(&mut self) -> Option<(PageId, CacheEntry)> {
        while let Some((page, stamp)) = self.inactive.pop_front() {
            match self.entries.get(&page) {
                Some(e) if e.stamp == stamp && e.list == CacheList::Inactive => {
                    return Some((page, *e));
                }
                _ => {} // stale slot
            }
        }
        None
    }

    /// Refill the (empty) inactive list by scanning the active list from
    /// its head. Referenced entries get their bit cleared and rotate to
    /// the tail, working-set-held entries rotate untouched, and the first
    /// unreferenced unheld page is demoted into the churn lane. Two full
    /// laps bound the scan: the first clears bits, the second demotes.
    fn refill_inactive_from_active(&mut self) {
        let mut scanned = 0;
        let cap = 2 * self.active.len() + 2;
        while scanned < cap {
            let (page, stamp) = match self.active.pop_front() {
                Some(v) => v,
                None => return,
            };
            scanned += 1;
            let state = match self.entries.get(&page) {
                Some(e) if e.stamp == stamp && e.list == CacheList::Active => *e,
                _ => continue, // stale slot
            };
            let ws_held = self.ws_counts.get(&page).copied().unwrap_or(0) > 0;
            let new_stamp = self.next_stamp();
            let entry = self.entries.get_mut(&page).unwrap();
            if ws_held || state.referenced {
                if !ws_held {
                    entry.referenced = false;
                }
                entry.stamp = new_stamp;
                self.active.push_back((page, new_stamp));
                continue;
            }
            entry.list = CacheList::Inactive;
            entry.stamp = new_stamp;
            self.inactive.push_back((page, new_stamp));
            return;
        }
    }

    /// Select and remove the replacement victim: the oldest unreferenced
    /// inactive page. Referenced pages get a second chance (cleared and
    /// requeued); pages held in any working set are skipped; the active
    /// list refills the inactive list when it runs empty. The victim is
    /// recorded on the ghost list. Returns `None` when nothing is evictable.
    pub fn evict_lru_candidate(&mut self) -> Option<PageId> {
        let mut attempts = 0usize;
        let max_attempts = 2 * self.entries.len() + 4;
        loop {
            let (page, entry) = match self.pop_valid_inactive() {
                Some(v) => Some(v),
                None => {
                    self.refill_inactive_from_active();
                    self.pop_valid_inactive()
                }
            }?;
            attempts += 1;
            if attempts > max_attempts {
                // Everything left is pinned; put the slot back and give up.
                let stamp = self.next_stamp();
                self.entries.get_mut(&page).unwrap().stamp = stamp;
                self.inactive.push_back((page, stamp));
                return None;
            }
            let ws_held = self.ws_counts.get(&page).copied().unwrap_or(0) > 0;
            if ws_held {
                // Working-set pages are hot by definition; rotate them
                // back to the active list so the churn lane drains.
                let stamp = self.next_stamp();
                let e = self.entries.get_mut(&page).unwrap();
                e.list = CacheList::Active;
                e.stamp = stamp;
                self.active.push_back((page, stamp));
                continue;
            }
            if entry.referenced {
                let stamp = self.next_stamp();
                let e = self.entries.get_mut(&page).unwrap();
                e.referenced = false;
                e.stamp = stamp;
                self.inactive.push_back((page, stamp));
                continue;
            }
            self.entries.remove(&page);
            self.push_ghost(page);
            return Some(page);
        }
    }

    fn push_ghost(&mut self, page: PageId) {
        if self.ghost_set.contains_key(&page) {
            return;
        }
        let stamp = self.next_stamp();
        self.ghost_set.insert(page, stamp);
        self.ghost.push_back((page, stamp));
        while self.ghost_set.len() > self.capacity_pages {
            match self.ghost.pop_front() {
                Some((old, s)) if self.ghost_set.get(&old) == Some(&s) => {
                    self.ghost_set.remove(&old);
                }
                Some(_) => continue, // stale pair
                None => break,
            }
        }
        if self.ghost.len() > 2 * self.ghost_set.len() + 64 {
            let live = &self.ghost_set;
            self.ghost.retain(|(p, s)| live.get(p) == Some(s));
        }
    }

    /// Drop a page from the global cache (and any working sets holding it).
    /// `to_ghost` records the page as recently evicted.
    pub(crate) fn remove_page(&mut self, page: PageId, to_ghost: bool) -> bool {
        if self.entries.remove(&page).is_none() {
            return false;
        }
        if self.ws_counts.get(&page).copied().unwrap_or(0) > 0 {
            for proc in 0..self.procs.len() {
                let p = &mut self.procs[proc];
                if p.ws.remove(&page).is_some() {
                    Self::dec_count(&mut self.ws_counts, page);
                }
            }
        }
        if to_ghost {
            self.push_ghost(page);
        }
        true
    }

    /// Discard every cached page of a file without ghost bookkeeping.
    /// This is a lab reset used when rebuilding a clean machine state
    /// between template trials, not an attacker-visible operation.
    pub fn flush_file(&mut self, file: FileId) -> Result<usize, SimError> {
        let num_pages = self.file(file)?.num_pages;
        let mut dropped = 0;
        for index in 0..num_pages {
            if self.remove_page(PageId::new(file, index), false) {
                dropped += 1;
            }
        }
        Ok(dropped)
    }

    /// Count of pages of `file` currently cached.
    pub fn resident_pages(&self, file: FileId) -> Result<u32, SimError> {
        let f = self.file(file)?;
        let mut n = 0;
        for index in 0..f.num_pages {
            if self.entries.contains_key(&PageId::new(file, index)) {
                n += 1;
            }
        }
        Ok(n)
    }

    // -- working sets ---------------------------------------------------------

    fn dec_count(counts: &mut HashMap<PageId, u32>, page: PageId) {
        if let Some(c) = counts.get_mut(&page) {
            *c -= 1;
            if *c == 0 {
                counts.remove(&page);
            }
        }
    }

    fn ws_insert(&mut self, proc: ProcId, page: PageId) {
        let stamp = self.next_stamp();
        let p = &mut self.procs[proc.0 as usize];
        if let Some(e) = p.ws.get_mut(&page) {
            e.stamp = stamp;
            p.ws_order.push_back((page, stamp));
            return;
        }
        if p.ws.len() >= p.ws_max_pages {
            // Trim the least recently used unlocked page; it stays cached.
            let victim = Self::pop_lru_unlocked(p);
            match victim {
                Some(v) => {
                    p.ws.remove(&v);
                    Self::dec_count(&mut self.ws_counts, v);
                }
                None => return, // every slot locked: the new page stays out
            }
        }
        let p = &mut self.procs[proc.0 as usize];
        p.ws.insert(page, WsEntry { locked: false, stamp });
        p.ws_order.push_back((page, stamp));
        *self.ws_counts.entry(page).or_insert(0) += 1;
    }

    fn pop_lru_unlocked(p: &mut Process) -> Option<PageId> {
        let mut requeued: Vec<(PageId, u64)> = Vec::new();
        let mut victim = None;
        while let Some((page, stamp)) = p.ws_order.pop_front() {
            match p.ws.get(&page) {
                Some(e) if e.stamp == stamp => {
                    if e.locked {
                        requeued.push((page, stamp));
                    } else {
                        victim = Some(page);
                        break;
                    }
                }
                _ => {} // stale
            }
        }
        for pair in requeued.into_iter().rev() {
            p.ws_order.push_front(pair);
        }
        victim
    }

    /// Remove a page from `proc`'s working set (it stays in the global
    /// cache). A locked page is unlocked instead of removed. Returns true
    /// when the page left the working set.
    pub(crate) fn ws_remove(&mut self, proc: ProcId, page: PageId) -> bool {
        let p = &mut self.procs[proc.0 as usize];
        match p.ws.get_mut(&page) {
            Some(e) if e.locked => {
                e.locked = false;
                false
            }
            Some(_) => {
                p.ws.remove(&page);
                Self::dec_count(&mut self.ws_counts, page);
                true
            }
            None => false,
        }
    }

    pub(crate) fn ws_lock(&mut self, proc: ProcId, page: PageId) -> bool {
        let p = &mut self.procs[proc.0 as usize];
        match p.ws.get_mut(&page) {
            Some(e) => {
                e.locked = true;
                true
            }
            None => false,
        }
    }

    /// Number of processes holding `page` in their working set, saturated
    /// at [`SHARE_COUNT_CAP`].
    pub fn share_count(&self, page: PageId) -> u8 {
        let n = self.ws_counts.get(&page).copied().unwrap_or(0);
        n.min(SHARE_COUNT_CAP as u32) as u8
    }

    /// Whether `caller` may adjust `target`'s working-set quota: itself
    /// always, otherwise any process at the same or a lower integrity tier.
    pub fn quota_permitted(&self, caller: ProcId, target: ProcId) -> Result<bool, SimError> {
        let c = self.process(caller)?;
        let t = self.process(target)?;
        Ok(caller == target || t.integrity <= c.integrity)
    }

    /// Adjust `target`'s working-set bounds. The ceiling clamps to the
    /// floor of [`WS_FLOOR_PAGES`] pages (and never below the number of
    /// locked pages); shrinking trims least-recent unlocked pages, which
    /// remain in the global cache.
    pub fn set_process_working_set_size(
        &mut self,
        caller: ProcId,
        target: ProcId,
        min_pages: usize,
        max_pages: usize,
    ) -> Result<(usize, usize), SimError> {
        if !self.quota_permitted(caller, target)? {
            return Err(SimError::PermissionDenied {
                op: "set_process_working_set_size",
                reason: "target runs at a higher integrity level",
            });
        }
        let locked = self.procs[target.0 as usize]
            .ws
            .values()
            .filter(|e| e.locked)
            .count();
        let max = max_pages.max(WS_FLOOR_PAGES).max(locked);
        if min_pages > max {
            return Err(SimError::InvalidWsBounds { min: min_pages, max: max_pages });
        }
        let min = min_pages;
        let p = &mut self.procs[target.0 as usize];
        p.ws_min_pages = min;
        p.ws_max_pages = max;
        while self.procs[target.0 as usize].ws.len() > max {
            let victim = Self::pop_lru_unlocked(&mut self.procs[target.0 as usize]);
            match victim {
                Some(v) => {
                    self.procs[target.0 as usize].ws.remove(&v);
                    Self::dec_count(&mut self.ws_counts, v);
                }
                None => break,
            }
        }
        Ok((min, max))
    }

    // -- snapshots -------------------------------------------------------------

    /// Line-oriented dump of the full machine state, stable across runs.
    pub fn dump(&self) -> String {
        self.render(true)
    }

    /// Hash of the machine state excluding the clock: two states with the
    /// same hash hold the same pages, lists, and working sets.
    pub fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.render(false).hash(&mut h);
        h.finish()
    }

    fn render(&self, with_clock: bool) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let regime = match self.regime {
            Regime::LinuxGlobal => "linux",
            Regime::WindowsWorkingSet => "windows",
        };
        if with_clock {
            let _ = writeln!(
                out,
                "sim regime={regime} capacity={} clock={}",
                self.capacity_pages, self.clock
            );
        } else {
            let _ = writeln!(out, "sim regime={regime} capacity={}", self.capacity_pages);
        }
        for f in &self.files {
            let mut mapped: Vec<u32> = f.mapped_by.iter().map(|p| p.0).collect();
            mapped.sort_unstable();
            let mapped = mapped
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(
                out,
                "file id={} label={} pages={} readable={} mapped={}",
                f.id.0, f.label, f.num_pages, f.attacker_readable, mapped
            );
        }
        let mut pages: Vec<&PageId> = self.entries.keys().collect();
        pages.sort();
        for page in pages {
            let e = &self.entries[page];
            let _ = writeln!(
                out,
                "page {} list={} ref={} pinned={} ws={}",
                page,
                e.list,
                e.referenced,
                e.unevictable,
                self.ws_counts.get(page).copied().unwrap_or(0)
            );
        }
        for g in self.ghost_iter() {
            let _ = writeln!(out, "ghost {g}");
        }
        for p in &self.procs {
            let _ = writeln!(
                out,
                "proc id={} integrity={:?} ws_min={} ws_max={} sandboxed={}",
                p.id.0, p.integrity, p.ws_min_pages, p.ws_max_pages, p.sandboxed
            );
            for page in p.ws_pages_lru() {
                let _ = writeln!(
                    out,
                    "ws proc={} page={} locked={}",
                    p.id.0,
                    page,
                    p.ws_locked(page)
                );
            }
        }
        out
    }

    /// Structural invariants every experiment must preserve. Returns a
    /// description of the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.entries.len() > self.capacity_pages {
            return Err(format!(
                "cache holds {} pages, capacity {}",
                self.entries.len(),
                self.capacity_pages
            ));
        }
        for g in self.ghost_iter() {
            if self.entries.contains_key(&g) {
                return Err(format!("ghost page {g} is still cached"));
            }
        }
        if self.ghost_set.len() > self.capacity_pages {
            return Err("ghost list over capacity".into());
        }
        for p in &self.procs {
            let effective_max =
                p.ws_max_pages.max(p.ws.values().filter(|e| e.locked).count());
            if p.ws.len() > effective_max {
                return Err(format!(
                    "proc {} working set {} over bound {}",
                    p.id.0,
                    p.ws.len(),
                    effective_max
                ));
            }
            for page in p.ws.keys() {
                if !self.entries.contains_key(page) {
                    return Err(format!(
                        "proc {} holds uncached page {page} in working set",
                        p.id.0
                    ));
                }
            }
        }
        let mut counts: HashMap<PageId, u32> = HashMap::new();
        for p in &self.procs {
            for page in p.ws.keys() {
                *counts.entry(*page).or_insert(0) += 1;
            }
        }
        if counts != self.ws_counts {
            return Err("share-count index out of sync with working sets".into());
        }
        for (page, e) in &self.entries {
            if e.last_access > self.clock {
                return Err(format!("page {page} accessed in the future"));
            }
        }
        Ok(())
    }
}

// ===========================================================================
// Tests
// ===========================================================================
