//! Deterministic laboratory for page cache side channels.
//!
//! The crate models an OS page cache shared across processes, under two
//! replacement regimes: a global two-list design with second-chance
//! promotion (the unified-cache style) and per-process working sets with
//! a global fallback (the local-cache style). On top of the cache sit
//! residency probes, an eviction engine, covert channels (local and
//! remote), and a set of attack procedures: template scans, keystroke
//! monitors, PRNG state recovery, and a byte-by-byte length oracle.
//!
//! Everything is driven by a virtual clock. Operations charge fixed
//! costs, a seeded RNG provides all randomness, and identical seeds give
//! byte-identical runs.

pub mod attacks;
pub mod cache;
pub mod covert;
pub mod evict;
pub mod prefetch;
pub mod probe;
pub mod remote;
pub mod scenario;

pub use attacks::{
    keystroke_monitor, length_oracle_attack, microtime_password, page_hot, probe_cadence_ns,
    recover_prng_passwords, template_scan, watch_event, AttackError, CandidateSet, Detection,
    EventTemplate, KeystrokeTrace, OracleOutcome, Rearm,
};
pub use cache::{
    CacheList, CostModel, FileId, Integrity, PageId, ProcId, Regime, SimError, Simulation,
    DEFAULT_CAPACITY_PAGES, PAGE_BYTES, SHARE_COUNT_CAP, WS_DEFAULT_MAX_PAGES,
    WS_DEFAULT_MIN_PAGES, WS_FLOOR_PAGES,
};
pub use covert::{
    frame_capacity, run_duplex_session, ChannelError, ChannelEvent, ChannelEventKind,
    ChannelFrame, Encoding, LocalChannel, TransmissionStats,
};
pub use evict::{
    evict_page_linux, evict_page_windows, survey_cache, EvictionError, EvictionReport,
    EvictionSetBundle, SurveyConfig,
};
pub use prefetch::ReadaheadConfig;
pub use probe::{
    mincore, probe_resident, query_working_set, virtual_lock, virtual_unlock, ProbePolicy,
    ResidencyVector, UnlockOutcome, WorkingSetRecord,
};
pub use remote::{
    expected_latency_ms, hdd_profile, remote_fetch, run_remote_session, ssd_profile,
    FetchOutcome, LatencyModel, RemoteChannel, RemoteChannelConfig, RemoteError, RemoteProfile,
    TimingSample,
};
pub use scenario::{
    bundled_text, run_scenario, Artifact, CostsBlock, Experiment, FileBlock, RegimeName,
    RunOutput, Scenario, ScenarioError, BUNDLED_SCENARIOS,
};
