//! Applied attacks on top of the probing and eviction primitives:
//! template scanning for leaky pages, low-latency event triggers,
//! inter-keystroke timing, microtime-seeded password recovery, and a
//! page-boundary length oracle on string comparison.
//!
//! These drivers only use what a real unprivileged attacker has: mapped
//! read-only files, residency probes, and the regime's eviction path.
//! Victims are scripted touches on the shared clock.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{PageId, ProcId, Regime, SimError, Simulation};
use crate::evict::{evict_page_linux, evict_page_windows, EvictionError, EvictionSetBundle};
use crate::probe;

#[derive(Clone, Debug)]
pub enum AttackError {
    Sim(SimError),
    Evict(EvictionError),
    ZeroTrials,
    RearmFailed { page: PageId },
}

impl fmt::Display for AttackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackError::Sim(e) => write!(f, "{e}"),
            AttackError::Evict(e) => write!(f, "{e}"),
            AttackError::ZeroTrials => write!(f, "template scan needs at least one trial"),
            AttackError::RearmFailed { page } => {
                write!(f, "could not evict page {page} to re-arm the watch")
            }
        }
    }
}

impl std::error::Error for AttackError {}

impl From<SimError> for AttackError {
    fn from(e: SimError) -> Self {
        AttackError::Sim(e)
    }
}

impl From<EvictionError> for AttackError {
    fn from(e: EvictionError) -> Self {
        AttackError::Evict(e)
    }
}

// ===========================================================================
// Template scanning
// ===========================================================================

/// One page's association with a replayable victim event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTemplate {
    pub target: PageId,
    pub label: String,
    /// Fraction of trials in which the page became resident inside the
    /// event window.
    pub correlation: f64,
}

/// Replay `event` `trials` times from a cold cache and rank every page
/// of `files` by how often it shows up resident afterwards. Ties rank in
/// page order, so a noise page never outranks an always-loaded target.
pub fn template_scan(
    sim: &mut Simulation,
    attacker: ProcId,
    files: &[crate::cache::FileId],
    trials: u32,
    label: &str,
    mut event: impl FnMut(&mut Simulation, u32),
) -> Result<Vec<EventTemplate>, AttackError> {
    if trials == 0 {
        return Err(AttackError::ZeroTrials);
    }
    let mut hits: Vec<(PageId, u32)> = Vec::new();
    for &f in files {
        let num_pages = sim.file(f)?.num_pages;
        for index in 0..num_pages {
            hits.push((PageId::new(f, index), 0));
        }
    }
    for trial in 0..trials {
        for &f in files {
            sim.flush_file(f)?;
        }
        event(sim, trial);
        let mut cursor = 0;
        for &f in files {
            let num_pages = sim.file(f)?.num_pages;
            let residency = probe::mincore(sim, attacker, f, 0, num_pages)?;
            for resident in residency.bits {
                if resident {
                    hits[cursor].1 += 1;
                }
                cursor += 1;
            }
        }
    }
    let mut templates: Vec<EventTemplate> = hits
        .into_iter()
        .map(|(target, count)| EventTemplate {
            target,
            label: label.to_string(),
            correlation: count as f64 / trials as f64,
        })
        .collect();
    templates.sort_by(|a, b| {
        b.correlation
            .partial_cmp(&a.correlation)
            .expect("correlations are finite")
            .then_with(|| a.target.cmp(&b.target))
    });
    Ok(templates)
}

// ===========================================================================
// Event watching
// ===========================================================================

/// One observed firing of a watched template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detection {
    /// Clock at the observing poll tick.
    pub at_ns: u64,
    /// Poll tick minus the scripted touch that caused it.
    pub latency_ns: u64,
}

/// The probe cadence a tight polling loop sustains on this regime: one
/// residency query back to back.
pub fn probe_cadence_ns(sim: &Simulation) -> u64 {
    match sim.regime() {
        Regime::LinuxGlobal => sim.costs.mincore_ns,
        Regime::WindowsWorkingSet => sim.costs.qws_ns,
    }
}

/// The regime-appropriate hotness test: global residency where eviction
/// empties the cache, working-set share where eviction only strips ws
/// membership and the page may linger in the fallback.
pub fn page_hot(sim: &Simulation, page: PageId) -> bool {
    match sim.regime() {
        Regime::LinuxGlobal => sim.is_cached(page),
        Regime::WindowsWorkingSet => sim.share_count(page) >= 1,
    }
}

/// Poll the template page until it fires or `budget_ns` runs out. The
/// detection latency is bounded by one probe cost because the observing
/// tick lands at most one cadence after the touch.
///
/// The loop opens with one real probe call so a hardened probe policy
/// shuts the attack down with its permission error instead of letting
/// the polling run on modeled costs alone.
pub fn watch_event(
    sim: &mut Simulation,
    attacker: ProcId,
    template: &EventTemplate,
    budget_ns: u64,
) -> Result<Option<Detection>, AttackError> {
    let page = template.target;
    if probe::probe_resident(sim, attacker, page)? {
        let at_ns = sim.clock();
        let touched = sim.last_touch_time(page).unwrap_or(at_ns);
        return Ok(Some(Detection { at_ns, latency_ns: at_ns - touched }));
    }
    let cadence = probe_cadence_ns(sim);
    let Some(at_ns) = sim.poll_until(cadence, budget_ns, |s| page_hot(s, page)) else {
        return Ok(None);
    };
    let touched = sim.last_touch_time(page).unwrap_or(at_ns);
    Ok(Some(Detection { at_ns, latency_ns: at_ns - touched }))
}

/// How the watcher clears the template page between detections.
pub enum Rearm<'a> {
    /// Cache-pressure eviction with a surveyed filler bundle.
    Pressure(&'a mut EvictionSetBundle),
    /// Working-set quota eviction against the victim process.
    WorkingSet { victim: ProcId },
}

fn rearm_page(
    sim: &mut Simulation,
    attacker: ProcId,
    page: PageId,
    rearm: &mut Rearm<'_>,
) -> Result<(), AttackError> {
    let report = match rearm {
        Rearm::Pressure(bundle) => evict_page_linux(sim, attacker, page, bundle)?,
        Rearm::WorkingSet { victim } => evict_page_windows(sim, attacker, *victim, page)?,
    };
    if !report.succeeded {
        return Err(AttackError::RearmFailed { page });
    }
    Ok(())
}

// ===========================================================================
// Keystroke timing
// ===========================================================================

/// Channel output over one monitoring session: level samples (compressed
/// to transitions) and the rising-edge times taken as keystrokes.
#[derive(Clone, Debug, Default)]
pub struct KeystrokeTrace {
    pub samples: Vec<(u64, bool)>,
    pub detected_events: Vec<u64>,
    /// Poll-tick-minus-touch latency per detection.
    pub latencies_ns: Vec<u64>,
}

impl KeystrokeTrace {
    /// Rising edges of the sample train; `detected_events` must be a
    /// subset of these by construction.
    pub fn rising_edges(&self) -> Vec<u64> {
        let mut edges = Vec::new();
        let mut level = false;
        for &(t, v) in &self.samples {
            if v && !level {
                edges.push(t);
            }
            level = v;
        }
        edges
    }
}

/// Watch a keystroke-correlated page while `keypress_times` fire, and
/// evict after each detection to re-arm. A press that lands inside the
/// eviction window is absorbed by it and goes unreported, which is why
/// slow eviction merges close keystrokes.
pub fn keystroke_monitor(
    sim: &mut Simulation,
    attacker: ProcId,
    victim: ProcId,
    template: &EventTemplate,
    keypress_times: &[u64],
    rearm: &mut Rearm<'_>,
) -> Result<KeystrokeTrace, AttackError> {
    let page = template.target;
    probe::probe_resident(sim, attacker, page)?;
    for &t in keypress_times {
        sim.schedule_touch(t, victim, page)?;
    }
    let last = keypress_times.iter().copied().max().unwrap_or(0);
    let cadence = probe_cadence_ns(sim);
    let mut trace = KeystrokeTrace::default();
    trace.samples.push((sim.clock(), false));
    loop {
        let deadline = last + 100 * cadence;
        let budget = deadline.saturating_sub(sim.clock());
        if budget == 0 && !page_hot(sim, page) {
            break;
        }
        match sim.poll_until(cadence, budget.max(cadence), |s| page_hot(s, page)) {
            Some(at) => {
                let touched = sim.last_touch_time(page).unwrap_or(at);
                trace.samples.push((at, true));
                trace.detected_events.push(at);
                trace.latencies_ns.push(at - touched);
                rearm_page(sim, attacker, page, rearm)?;
                trace.samples.push((sim.clock(), false));
            }
            None => break,
        }
    }
    Ok(trace)
}

// ===========================================================================
// Microtime-seeded password recovery
// ===========================================================================

/// Everything the attacker can derive from one detection timestamp: the
/// window of microsecond seeds and the password each would generate.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub center_us: u64,
    pub radius_us: u64,
    pub candidates: Vec<String>,
}

impl CandidateSet {
    pub fn contains(&self, password: &str) -> bool {
        self.candidates.iter().any(|c| c == password)
    }
}

/// Stand-in for a password generator seeded from a microsecond
/// timestamp: same seed, same password, across runs and machines.
pub fn microtime_password(seed_us: u64, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let mut rng = ChaCha8Rng::seed_from_u64(seed_us);
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

/// Enumerate every password the generator could have produced inside the
/// detection window: one candidate per microsecond tick in
/// `[detection - uncertainty, detection + uncertainty)`, or exactly one
/// when the uncertainty is zero.
pub fn recover_prng_passwords(
    detection_time_us: u64,
    uncertainty_us: u64,
    generator: impl Fn(u64) -> String,
) -> CandidateSet {
    assert!(
        detection_time_us >= uncertainty_us,
        "detection window underflows the epoch"
    );
    let candidates = if uncertainty_us == 0 {
        vec![generator(detection_time_us)]
    } else {
        (detection_time_us - uncertainty_us..detection_time_us + uncertainty_us)
            .map(generator)
            .collect()
    };
    CandidateSet {
        center_us: detection_time_us,
        radius_us: uncertainty_us,
        candidates,
    }
}

// ===========================================================================
// Page-boundary length oracle
// ===========================================================================

/// Result of a length-oracle sweep: the recovered prefix and how many
/// comparator invocations it took.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleOutcome {
    pub recovered: String,
    pub queries: usize,
}

/// Recover `secret` byte by byte through a comparator that touches the
/// page after the attacker's guess buffer only when every byte before
/// the boundary matched. The attacker owns the buffer, so it clears the
/// probe page with `madvise` between queries; the victim's comparison is
/// the only thing that can bring it back.
pub fn length_oracle_attack(
    sim: &mut Simulation,
    victim: ProcId,
    attacker: ProcId,
    secret: &str,
    alphabet: &[char],
    max_len: usize,
) -> Result<OracleOutcome, AttackError> {
    let buffer = sim.register_file("guess-buffer", 2, false);
    sim.map_file(attacker, buffer)?;
    let probe_page = PageId::new(buffer, 1);
    let mut recovered = String::new();
    let mut queries = 0usize;
    for _ in 0..max_len {
        let mut advanced = false;
        for &symbol in alphabet {
            let guess = format!("{recovered}{symbol}");
            probe::madvise_dontneed(sim, attacker, probe_page)?;
            queries += 1;
            // Boundary comparison: the comparator crosses into the probe
            // page only if all bytes up to the boundary matched.
            if secret.starts_with(&guess) {
                sim.touch_page_nocost(victim, probe_page)?;
            }
            if probe::probe_resident(sim, attacker, probe_page)? {
                recovered.push(symbol);
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    Ok(OracleOutcome { recovered, queries })
}

// ===========================================================================
// Tests
// ===========================================================================
