//! Scenario configs and the experiment drivers behind the command-line
//! harness.
//!
//! A scenario is one TOML document: machine shape (regime, capacity,
//! costs, readahead, probe policy), a file registry, and exactly one
//! experiment block. Drivers build the simulation, run the experiment,
//! and return CSV artifacts plus a key/value summary. Same config, same
//! seed: byte-identical artifacts.
//!
//! ## CSV conventions
//! Every artifact starts with a versioned comment line
//! (`# cachelab csv v1 kind=...`), then a column header. Floats are
//! rendered at fixed precision so reruns diff clean.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::Deserialize;

use crate::attacks::{keystroke_monitor, length_oracle_attack, page_hot, EventTemplate, Rearm};
use crate::cache::{CostModel, FileId, Integrity, PageId, Regime, Simulation};
use crate::covert::{run_duplex_session, LocalChannel};
use crate::evict::{evict_page_linux, evict_page_windows, survey_cache, SurveyConfig};
use crate::prefetch::ReadaheadConfig;
use crate::probe::ProbePolicy;
use crate::remote::{hdd_profile, run_remote_session, ssd_profile, RemoteChannel, RemoteProfile};

pub const CSV_VERSION: &str = "cachelab csv v1";

// ===========================================================================
// Config schema
// ===========================================================================

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeName {
    LinuxGlobal,
    WindowsWorkingSet,
}

impl From<RegimeName> for Regime {
    fn from(r: RegimeName) -> Regime {
        match r {
            RegimeName::LinuxGlobal => Regime::LinuxGlobal,
            RegimeName::WindowsWorkingSet => Regime::WindowsWorkingSet,
        }
    }
}

/// Partial cost override: absent fields keep their defaults.
#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsBlock {
    pub mincore_ns: Option<u64>,
    pub qws_ns: Option<u64>,
    pub linux_evict_ns: Option<u64>,
    pub windows_evict_ns: Option<u64>,
    pub access_ns: Option<u64>,
    pub unlock_ns: Option<u64>,
}

impl CostsBlock {
    fn apply(&self, costs: &mut CostModel) {
        if let Some(v) = self.mincore_ns {
            costs.mincore_ns = v;
        }
        if let Some(v) = self.qws_ns {
            costs.qws_ns = v;
        }
        if let Some(v) = self.linux_evict_ns {
            costs.linux_evict_ns = v;
        }
        if let Some(v) = self.windows_evict_ns {
            costs.windows_evict_ns = v;
        }
        if let Some(v) = self.access_ns {
            costs.access_ns = v;
        }
        if let Some(v) = self.unlock_ns {
            costs.unlock_ns = v;
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBlock {
    pub label: String,
    pub pages: u32,
    #[serde(default = "default_true")]
    pub attacker_readable: bool,
}

fn default_true() -> bool {
    true
}

fn default_alphabet() -> String {
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_".to_string()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// Two colluding processes over the local page cache.
    CovertLocal {
        frame_files: Vec<String>,
        #[serde(default)]
        filler_files: Vec<String>,
        bits: usize,
        #[serde(default)]
        noise_rate: f64,
        #[serde(default)]
        share_levels: bool,
    },
    /// Residency of public files read over a network latency model.
    CovertRemote {
        profile: String,
        bits: usize,
        #[serde(default)]
        skip_evict: bool,
        #[serde(default)]
        noise_sigma_ms: Option<f64>,
    },
    /// Inter-keystroke timing against a scripted typist.
    Keystrokes {
        template_file: String,
        template_page: u32,
        presses: u32,
        interval_ms: u64,
        #[serde(default)]
        filler_files: Vec<String>,
    },
    /// Periodic-event precision/recall bench for the eviction engine.
    EvictionBench {
        victim_file: String,
        target_page: u32,
        #[serde(default)]
        filler_files: Vec<String>,
        trials: u32,
        period_ms: u64,
        #[serde(default)]
        set2_limit: Option<usize>,
        #[serde(default)]
        set3_pages: usize,
    },
    /// Page-boundary length oracle against a secret comparison.
    Oracle {
        secret: String,
        #[serde(default = "default_alphabet")]
        alphabet: String,
        max_len: usize,
    },
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::CovertLocal { .. } => "covert-local",
            Experiment::CovertRemote { .. } => "covert-remote",
            Experiment::Keystrokes { .. } => "keystrokes",
            Experiment::EvictionBench { .. } => "eviction-bench",
            Experiment::Oracle { .. } => "oracle",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub regime: RegimeName,
    pub seed: u64,
    pub capacity_pages: usize,
    #[serde(default)]
    pub costs: Option<CostsBlock>,
    #[serde(default)]
    pub readahead: Option<ReadaheadConfig>,
    #[serde(default)]
    pub probe_policy: Option<ProbePolicy>,
    #[serde(default)]
    pub files: Vec<FileBlock>,
    pub experiment: Experiment,
}

#[derive(Debug)]
pub enum ScenarioError {
    /// TOML syntax or schema problem; carries the parser's diagnostics
    /// including line/column.
    Parse(toml::de::Error),
    /// Structurally valid config with inconsistent content.
    Invalid(Vec<String>),
    /// The experiment itself failed while running.
    Run(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Parse(e) => write!(f, "config parse error: {e}"),
            ScenarioError::Invalid(diags) => {
                write!(f, "invalid scenario: {}", diags.join("; "))
            }
            ScenarioError::Run(msg) => write!(f, "experiment failed: {msg}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let sc: Scenario = toml::from_str(text).map_err(ScenarioError::Parse)?;
        let diags = sc.validate();
        if diags.is_empty() {
            Ok(sc)
        } else {
            Err(ScenarioError::Invalid(diags))
        }
    }

    /// Content checks beyond the schema: every referenced file declared,
    /// parameters in range, regime-specific requirements met.
    pub fn validate(&self) -> Vec<String> {
        let mut diags = Vec::new();
        if self.name.is_empty() {
            diags.push("name: must not be empty".to_string());
        }
        if self.capacity_pages == 0 {
            diags.push("capacity_pages: must be positive".to_string());
        }
        for (i, f) in self.files.iter().enumerate() {
            if f.pages == 0 {
                diags.push(format!("files[{i}] ({}): pages must be positive", f.label));
            }
            if self.files[..i].iter().any(|g| g.label == f.label) {
                diags.push(format!("files[{i}]: duplicate label {}", f.label));
            }
        }
        fn need_file(files: &[FileBlock], diags: &mut Vec<String>, field: &str, label: &String) {
            if !files.iter().any(|f| &f.label == label) {
                diags.push(format!("experiment.{field}: no such file {label:?}"));
            }
        }
        match &self.experiment {
            Experiment::CovertLocal { frame_files, filler_files, bits, noise_rate, share_levels } => {
                if frame_files.is_empty() {
                    diags.push("experiment.frame_files: must not be empty".to_string());
                }
                for l in frame_files {
                    need_file(&self.files, &mut diags, "frame_files", l);
                }
                for l in filler_files {
                    need_file(&self.files, &mut diags, "filler_files", l);
                }
                if *bits == 0 {
                    diags.push("experiment.bits: must be positive".to_string());
                }
                if !(0.0..1.0).contains(noise_rate) {
                    diags.push("experiment.noise_rate: must be in [0, 1)".to_string());
                }
                if self.regime == RegimeName::LinuxGlobal && filler_files.is_empty() {
                    diags.push(
                        "experiment.filler_files: linux-global covert channels need a filler corpus"
                            .to_string(),
                    );
                }
                if *share_levels && self.regime != RegimeName::WindowsWorkingSet {
                    diags.push(
                        "experiment.share_levels: only available on windows-working-set".to_string(),
                    );
                }
            }
            Experiment::CovertRemote { profile, bits, .. } => {
                if profile != "hdd" && profile != "ssd" {
                    diags.push(format!("experiment.profile: unknown profile {profile:?}"));
                }
                if *bits == 0 {
                    diags.push("experiment.bits: must be positive".to_string());
                }
            }
            Experiment::Keystrokes { template_file, filler_files, presses, .. } => {
                need_file(&self.files, &mut diags, "template_file", template_file);
                for l in filler_files {
                    need_file(&self.files, &mut diags, "filler_files", l);
                }
                if *presses == 0 {
                    diags.push("experiment.presses: must be positive".to_string());
                }
                if self.regime == RegimeName::LinuxGlobal && filler_files.is_empty() {
                    diags.push(
                        "experiment.filler_files: linux-global re-arming needs a filler corpus"
                            .to_string(),
                    );
                }
            }
            Experiment::EvictionBench { victim_file, filler_files, trials, .. } => {
                need_file(&self.files, &mut diags, "victim_file", victim_file);
                for l in filler_files {
                    need_file(&self.files, &mut diags, "filler_files", l);
                }
                if *trials == 0 {
                    diags.push("experiment.trials: must be positive".to_string());
                }
                if self.regime == RegimeName::LinuxGlobal && filler_files.is_empty() {
                    diags.push(
                        "experiment.filler_files: linux-global eviction needs a filler corpus"
                            .to_string(),
                    );
                }
            }
            Experiment::Oracle { alphabet, max_len, .. } => {
                if alphabet.is_empty() {
                    diags.push("experiment.alphabet: must not be empty".to_string());
                }
                if *max_len == 0 {
                    diags.push("experiment.max_len: must be positive".to_string());
                }
            }
        }
        diags
    }

    /// Instantiate the machine: regime, capacity, seed, overrides, files.
    pub fn build_simulation(&self) -> (Simulation, BTreeMap<String, FileId>) {
        let mut sim = Simulation::new(self.regime.into(), self.capacity_pages, self.seed);
        if let Some(costs) = &self.costs {
            costs.apply(&mut sim.costs);
        }
        if let Some(ra) = &self.readahead {
            sim.readahead = *ra;
        }
        if let Some(policy) = &self.probe_policy {
            sim.policy = *policy;
        }
        let mut by_label = BTreeMap::new();
        for f in &self.files {
            let id = sim.register_file(&f.label, f.pages, f.attacker_readable);
            by_label.insert(f.label.clone(), id);
        }
        (sim, by_label)
    }
}

// ===========================================================================
// Run output
// ===========================================================================

#[derive(Clone, Debug)]
pub struct Artifact {
    pub filename: String,
    pub content: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub name: String,
    /// False when a simulation invariant broke or a measured figure is
    /// out of its required range; the CLI turns this into a nonzero exit.
    pub ok: bool,
    pub summary: Vec<(String, String)>,
    pub artifacts: Vec<Artifact>,
}

impl RunOutput {
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.summary {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn csv_header(kind: &str, columns: &str) -> String {
    format!("# {CSV_VERSION} kind={kind}\n{columns}\n")
}

fn resolve(
    by_label: &BTreeMap<String, FileId>,
    labels: &[String],
) -> Result<Vec<FileId>, ScenarioError> {
    labels
        .iter()
        .map(|l| {
            by_label
                .get(l)
                .copied()
                .ok_or_else(|| ScenarioError::Run(format!("unresolved file label {l:?}")))
        })
        .collect()
}

/// Run the scenario's experiment and collect artifacts. Invariants are
/// re-checked on the final state; a violation flips `ok` instead of
/// panicking so the harness can report it.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let mut out = match &sc.experiment {
        Experiment::CovertLocal { .. } => run_covert_local(sc)?,
        Experiment::CovertRemote { .. } => run_covert_remote(sc)?,
        Experiment::Keystrokes { .. } => run_keystrokes(sc)?,
        Experiment::EvictionBench { .. } => run_eviction_bench(sc)?,
        Experiment::Oracle { .. } => run_oracle(sc)?,
    };
    out.name = sc.name.clone();
    Ok(out)
}

fn run_err(e: impl fmt::Display) -> ScenarioError {
    ScenarioError::Run(e.to_string())
}

fn finish(
    sim: &Simulation,
    mut summary: Vec<(String, String)>,
    artifacts: Vec<Artifact>,
    mut ok: bool,
) -> RunOutput {
    match sim.check_invariants() {
        Ok(()) => summary.push(("invariants".into(), "ok".into())),
        Err(msg) => {
            ok = false;
            summary.push(("invariants".into(), format!("violated: {msg}")));
        }
    }
    summary.push(("state_hash".into(), format!("{:016x}", sim.state_hash())));
    RunOutput { name: String::new(), ok, summary, artifacts }
}

// ===========================================================================
// Bundled scenarios
// ===========================================================================

/// Ready-to-run configs compiled into the library. The CLI lists and
/// loads these by name; their parameters mirror the measured defaults
/// so the reported figures land on the published anchors unedited.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("covert-local-linux", include_str!("../scenarios/covert-local-linux.toml")),
    ("covert-local-windows", include_str!("../scenarios/covert-local-windows.toml")),
    ("covert-remote-hdd", include_str!("../scenarios/covert-remote-hdd.toml")),
    ("covert-remote-ssd", include_str!("../scenarios/covert-remote-ssd.toml")),
    ("eviction-bench-linux", include_str!("../scenarios/eviction-bench-linux.toml")),
    ("eviction-bench-windows", include_str!("../scenarios/eviction-bench-windows.toml")),
    ("keystrokes-linux", include_str!("../scenarios/keystrokes-linux.toml")),
    ("keystrokes-windows", include_str!("../scenarios/keystrokes-windows.toml")),
    ("oracle-linux", include_str!("../scenarios/oracle-linux.toml")),
];

pub fn bundled_text(name: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

// ===========================================================================
// Experiment drivers
// ===========================================================================

fn run_covert_local(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let Experiment::CovertLocal { frame_files, filler_files, bits, noise_rate, share_levels } =
        &sc.experiment
    else {
        unreachable!("dispatched on kind");
    };
    let (mut sim, by_label) = sc.build_simulation();
    let frame = resolve(&by_label, frame_files)?;
    let filler = resolve(&by_label, filler_files)?;
    let mut channel = LocalChannel::setup(&mut sim, &frame, &filler).map_err(run_err)?;
    if *share_levels {
        channel.enable_share_levels(&mut sim).map_err(run_err)?;
    }
    if *noise_rate > 0.0 {
        channel.enable_noise(&mut sim, *noise_rate).map_err(run_err)?;
    }
    let mut rng = sim.derive_rng(0xc0de);
    let payload: Vec<bool> = (0..*bits).map(|_| rng.gen()).collect();
    let stats = run_duplex_session(&mut sim, &mut channel, &payload).map_err(run_err)?;
    let ber = stats.bit_errors as f64 / stats.bits_sent.max(1) as f64;

    let mut csv = csv_header(
        "covert-local",
        "bits_sent,bit_errors,ber,elapsed_ns,throughput_bytes_per_s",
    );
    csv.push_str(&format!(
        "{},{},{:.8},{},{:.3}\n",
        stats.bits_sent, stats.bit_errors, ber, stats.elapsed_ns, stats.throughput_bytes_per_s
    ));
    let summary = vec![
        ("experiment".into(), "covert-local".into()),
        ("bits".into(), stats.bits_sent.to_string()),
        ("bit_errors".into(), stats.bit_errors.to_string()),
        ("ber".into(), format!("{ber:.8}")),
        ("throughput_kb_per_s".into(), format!("{:.3}", stats.throughput_bytes_per_s / 1024.0)),
        ("elapsed_ms".into(), format!("{:.3}", stats.elapsed_ns as f64 / 1e6)),
        ("width_bits".into(), channel.frame.width_bits.to_string()),
    ];
    let artifacts = vec![Artifact { filename: "covert-local.csv".into(), content: csv }];
    Ok(finish(&sim, summary, artifacts, true))
}

fn run_covert_remote(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let Experiment::CovertRemote { profile, bits, skip_evict, noise_sigma_ms } = &sc.experiment
    else {
        unreachable!("dispatched on kind");
    };
    let (mut sim, _) = sc.build_simulation();
    let mut prof: RemoteProfile = match profile.as_str() {
        "hdd" => hdd_profile(),
        "ssd" => ssd_profile(),
        other => return Err(ScenarioError::Run(format!("unknown profile {other:?}"))),
    };
    if let Some(sigma) = noise_sigma_ms {
        prof.model.noise_sigma_ms = *sigma;
    }
    prof.model.seed ^= sc.seed;
    let mut channel = RemoteChannel::setup(&mut sim, &prof);
    channel.skip_evict = *skip_evict;
    let mut rng = sim.derive_rng(0xbead);
    let payload: Vec<bool> = (0..*bits).map(|_| rng.gen()).collect();
    let stats = run_remote_session(&mut sim, &mut channel, &payload).map_err(run_err)?;
    let ber = stats.bit_errors as f64 / stats.bits_sent.max(1) as f64;

    let mut csv = csv_header("remote-timing", "seq,truth,latency_ms,decoded");
    for s in &channel.samples {
        csv.push_str(&format!(
            "{},{},{:.6},{}\n",
            s.seq,
            s.truth_hit as u8,
            s.latency_ms,
            s.decoded as u8
        ));
    }
    let bit_rate = stats.bits_sent as f64 * 1e9 / stats.elapsed_ns.max(1) as f64;
    let summary = vec![
        ("experiment".into(), "covert-remote".into()),
        ("profile".into(), profile.clone()),
        ("bits".into(), stats.bits_sent.to_string()),
        ("bit_errors".into(), stats.bit_errors.to_string()),
        ("ber".into(), format!("{ber:.6}")),
        ("threshold_ms".into(), format!("{:.1}", channel.cfg.threshold_ms)),
        ("bit_rate_per_s".into(), format!("{bit_rate:.3}")),
    ];
    let artifacts = vec![Artifact { filename: "remote-timing.csv".into(), content: csv }];
    Ok(finish(&sim, summary, artifacts, true))
}

fn run_keystrokes(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let Experiment::Keystrokes { template_file, template_page, presses, interval_ms, filler_files } =
        &sc.experiment
    else {
        unreachable!("dispatched on kind");
    };
    let (mut sim, by_label) = sc.build_simulation();
    let lib = resolve(&by_label, std::slice::from_ref(template_file))?[0];
    let filler = resolve(&by_label, filler_files)?;
    let attacker = sim.spawn_process(Integrity::SameUser);
    let victim = sim.spawn_process(Integrity::SameUser);
    sim.map_file(attacker, lib).map_err(run_err)?;
    sim.map_file(victim, lib).map_err(run_err)?;
    let page = PageId::new(lib, *template_page);
    let template = EventTemplate { target: page, label: template_file.clone(), correlation: 1.0 };

    let mut bundle = if sim.regime() == Regime::LinuxGlobal {
        for &f in &filler {
            sim.map_file(attacker, f).map_err(run_err)?;
        }
        Some(
            survey_cache(&mut sim, attacker, &filler, &[page], &SurveyConfig::default())
                .map_err(run_err)?,
        )
    } else {
        None
    };
    let mut rearm = match bundle.as_mut() {
        Some(b) => Rearm::Pressure(b),
        None => Rearm::WorkingSet { victim },
    };

    let interval = interval_ms * 1_000_000;
    let t0 = sim.clock();
    let times: Vec<u64> = (0..*presses as u64).map(|i| t0 + (i + 1) * interval).collect();
    let trace = keystroke_monitor(&mut sim, attacker, victim, &template, &times, &mut rearm)
        .map_err(run_err)?;

    let mut matched = 0usize;
    let mut false_positives = 0usize;
    for (at, lat) in trace.detected_events.iter().zip(&trace.latencies_ns) {
        if times.contains(&(at - lat)) {
            matched += 1;
        } else {
            false_positives += 1;
        }
    }
    let avg_latency = if trace.latencies_ns.is_empty() {
        0.0
    } else {
        trace.latencies_ns.iter().sum::<u64>() as f64 / trace.latencies_ns.len() as f64
    };

    let mut csv = csv_header("keystroke-trace", "time_ns,value");
    for (t, v) in &trace.samples {
        csv.push_str(&format!("{},{}\n", t, *v as u8));
    }
    let summary = vec![
        ("experiment".into(), "keystrokes".into()),
        ("presses".into(), presses.to_string()),
        ("detections".into(), trace.detected_events.len().to_string()),
        ("matched".into(), matched.to_string()),
        ("missed".into(), (*presses as usize - matched).to_string()),
        ("false_positives".into(), false_positives.to_string()),
        ("avg_latency_ns".into(), format!("{avg_latency:.1}")),
    ];
    let artifacts = vec![Artifact { filename: "keystroke-trace.csv".into(), content: csv }];
    Ok(finish(&sim, summary, artifacts, true))
}

fn run_eviction_bench(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let Experiment::EvictionBench {
        victim_file,
        target_page,
        filler_files,
        trials,
        period_ms,
        set2_limit,
        set3_pages,
    } = &sc.experiment
    else {
        unreachable!("dispatched on kind");
    };
    let (mut sim, by_label) = sc.build_simulation();
    let lib = resolve(&by_label, std::slice::from_ref(victim_file))?[0];
    let filler = resolve(&by_label, filler_files)?;
    let attacker = sim.spawn_process(Integrity::SameUser);
    let victim = sim.spawn_process(Integrity::SameUser);
    sim.map_file(attacker, lib).map_err(run_err)?;
    sim.map_file(victim, lib).map_err(run_err)?;
    let target = PageId::new(lib, *target_page);

    let mut bundle = if sim.regime() == Regime::LinuxGlobal {
        for &f in &filler {
            sim.map_file(attacker, f).map_err(run_err)?;
        }
        let cfg = SurveyConfig { set3_pages: *set3_pages, set2_limit: *set2_limit };
        Some(survey_cache(&mut sim, attacker, &filler, &[target], &cfg).map_err(run_err)?)
    } else {
        None
    };

    let period = period_ms * 1_000_000;
    let t0 = sim.clock();
    for k in 0..*trials as u64 {
        sim.schedule_touch(t0 + (k + 1) * period, victim, target)
            .map_err(run_err)?;
    }

    let mut csv = csv_header(
        "eviction-bench",
        "round,event_time_ns,evict_ok,evict_rounds,evict_pages,detected,latency_ns",
    );
    let mut tp = 0u32;
    let mut fp = 0u32;
    let mut evict_ns_total = 0u64;
    let mut evictions = 0u32;
    let cadence = crate::attacks::probe_cadence_ns(&sim);
    for k in 0..*trials as u64 {
        let event_time = t0 + (k + 1) * period;
        let report = match bundle.as_mut() {
            Some(b) => evict_page_linux(&mut sim, attacker, target, b).map_err(run_err)?,
            None => evict_page_windows(&mut sim, attacker, victim, target).map_err(run_err)?,
        };
        if report.rounds > 0 {
            evict_ns_total += report.elapsed_ns;
            evictions += 1;
        }
        let mut detected = false;
        let mut latency = 0u64;
        if report.succeeded {
            let budget = (event_time + period).saturating_sub(sim.clock());
            if let Some(at) = sim.poll_until(cadence, budget.max(cadence), |s| page_hot(s, target))
            {
                let touched = sim.last_touch_time(target).unwrap_or(at);
                detected = true;
                latency = at - touched;
                if touched == event_time {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            k,
            event_time,
            report.succeeded as u8,
            report.rounds,
            report.pages_touched,
            detected as u8,
            latency
        ));
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (*trials).max(1) as f64;
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let avg_evict_ms = if evictions == 0 {
        0.0
    } else {
        evict_ns_total as f64 / evictions as f64 / 1e6
    };
    let summary = vec![
        ("experiment".into(), "eviction-bench".into()),
        ("trials".into(), trials.to_string()),
        ("true_positives".into(), tp.to_string()),
        ("false_positives".into(), fp.to_string()),
        ("precision".into(), format!("{precision:.4}")),
        ("recall".into(), format!("{recall:.4}")),
        ("f_score".into(), format!("{f_score:.4}")),
        ("avg_eviction_ms".into(), format!("{avg_evict_ms:.3}")),
    ];
    let artifacts = vec![Artifact { filename: "eviction-bench.csv".into(), content: csv }];
    Ok(finish(&sim, summary, artifacts, true))
}

fn run_oracle(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let Experiment::Oracle { secret, alphabet, max_len } = &sc.experiment else {
        unreachable!("dispatched on kind");
    };
    let (mut sim, _) = sc.build_simulation();
    let attacker = sim.spawn_process(Integrity::SameUser);
    let victim = sim.spawn_process(Integrity::SameUser);
    let alphabet: Vec<char> = alphabet.chars().collect();
    let out = length_oracle_attack(&mut sim, victim, attacker, secret, &alphabet, *max_len)
        .map_err(run_err)?;
    let success = out.recovered == secret[..secret.len().min(*max_len * 4)]
        && secret.starts_with(&out.recovered)
        && (out.recovered.len() == secret.chars().count() || out.recovered.chars().count() == *max_len);
    let bound = *max_len * alphabet.len();

    let mut csv = csv_header("oracle", "secret_len,recovered_len,queries,query_bound,success");
    csv.push_str(&format!(
        "{},{},{},{},{}\n",
        secret.chars().count(),
        out.recovered.chars().count(),
        out.queries,
        bound,
        success as u8
    ));
    let summary = vec![
        ("experiment".into(), "oracle".into()),
        ("secret_len".into(), secret.chars().count().to_string()),
        ("recovered".into(), out.recovered.clone()),
        ("queries".into(), out.queries.to_string()),
        ("query_bound".into(), bound.to_string()),
        ("success".into(), success.to_string()),
    ];
    let artifacts = vec![Artifact { filename: "oracle.csv".into(), content: csv }];
    Ok(finish(&sim, summary, artifacts, success))
}

// ===========================================================================
// Tests
// ===========================================================================
