//! The acceptance scoreboard: fourteen numbered end-to-end checks, one per
//! headline behaviour the lab promises. Runs without the libtest harness so
//! every criterion prints exactly one `[PASS]`/`[FAIL]` line and a failure
//! never hides the criteria after it.
//!
//! Tolerances live in the constants right below; everything else is exact.

use std::collections::HashSet;
use std::panic::catch_unwind;
use std::time::Instant;

use cachelab::covert::SLOT_STRIDE_PAGES;
use cachelab::scenario::Scenario;
use cachelab::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ===========================================================================
// Pinned tolerances
// ===========================================================================

/// Criterion 4: fraction of keep-alive pages that must survive eviction.
const SET1_SURVIVAL_MIN: f64 = 0.95;
/// Criterion 6: background-noise touch rate per bit page per message.
const NOISE_RATE_PER_PAGE: f64 = 2e-4;
/// Criterion 6: worst acceptable bit error rate under that noise.
const NOISY_BER_MAX: f64 = 1e-3;
/// Criterion 7: calibrated linux covert throughput window, KB/s.
const LINUX_KBPS_MIN: f64 = 5.0;
const LINUX_KBPS_MAX: f64 = 10.0;
/// Criterion 7: windows covert must beat linux by at least this factor.
const WINDOWS_SPEEDUP_MIN: f64 = 10.0;
/// Criterion 8: bit error ceilings per disk profile.
const HDD_BER_MAX: f64 = 0.005;
const SSD_BER_MAX: f64 = 0.007;
/// Criterion 8: decision thresholds the latency clouds must straddle, ms.
const HDD_THRESHOLD_MS: f64 = 105.0;
const SSD_THRESHOLD_MS: f64 = 300.0;
/// Criterion 9: anchor latencies for the 25-page control file, ms, and the
/// allowed relative error on the sample means.
const HDD_HOT_MS: f64 = 8.4;
const HDD_COLD_MS: f64 = 14.2;
const MEAN_TOL: f64 = 0.05;

// ===========================================================================
// Driver
// ===========================================================================

type Criterion = (u32, &'static str, fn());

const CRITERIA: &[Criterion] = &[
    (1, "one covert bit per 32-page slot across file sizes", c01_frame_capacity),
    (2, "share counts saturate at seven sharers", c02_share_count_cap),
    (3, "working sets default to 345 pages, floor at 13, trim LRU-first", c03_working_set_bounds),
    (4, "pressure eviction clears the target, spares guard and keep-alive", c04_eviction_correctness),
    (5, "virtual unlock strips membership without evicting", c05_virtual_unlock_misfeature),
    (6, "covert frames round-trip 100k bits, clean and under noise", c06_covert_round_trip),
    (7, "bundled covert scenarios hit calibrated throughput", c07_throughput_consistency),
    (8, "remote channel decodes 4000-bit sessions on both disk profiles", c08_remote_channel),
    (9, "hot and cold fetch latencies match the disk anchors", c09_remote_latency_anchors),
    (10, "accessing one bit page never caches another", c10_prefetch_isolation),
    (11, "keystroke monitor catches every press, idle watch stays silent", c11_keystroke_detection),
    (12, "detection time collapses the PRNG password search", c12_prng_password_recovery),
    (13, "length oracle recovers random secrets inside the query budget", c13_length_oracle),
    (14, "hardened probe policies stop the attacks, not self-inspection", c14_countermeasures),
];

fn main() {
    let filter: Option<u32> = std::env::args()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .and_then(|a| a.parse().ok());
    let mut failures = 0usize;
    let mut ran = 0usize;
    for &(n, what, body) in CRITERIA {
        if filter.is_some_and(|f| f != n) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        match catch_unwind(body) {
            Ok(()) => {
                println!("[PASS] criterion {n:2}: {what} ({} ms)", started.elapsed().as_millis());
            }
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into());
                println!("[FAIL] criterion {n:2}: {what}\n        {msg}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} of {ran} criteria failed");
        std::process::exit(1);
    }
    println!("all {ran} criteria passed");
}

// ===========================================================================
// Shared helpers
// ===========================================================================

fn run_bundle(name: &str) -> RunOutput {
    let text = bundled_text(name).unwrap_or_else(|| panic!("no bundled scenario {name}"));
    let sc = Scenario::from_toml(text).unwrap();
    run_scenario(&sc).unwrap()
}

fn summary_get(out: &RunOutput, key: &str) -> String {
    out.summary_value(key)
        .unwrap_or_else(|| panic!("summary of {} lacks {key}", out.name))
        .to_string()
}

/// A permission denial can surface directly or wrapped in the eviction
/// layer, depending on which probe the channel hit first.
fn channel_permission_denied(e: &ChannelError) -> bool {
    matches!(
        e,
        ChannelError::Sim(SimError::PermissionDenied { .. })
            | ChannelError::Evict(EvictionError::Sim(SimError::PermissionDenied { .. }))
    )
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty());
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

// ===========================================================================
// Criteria
// ===========================================================================

fn c01_frame_capacity() {
    for k in 17..=30u32 {
        let bytes = 1u64 << k;
        let want = (bytes / (PAGE_BYTES * SLOT_STRIDE_PAGES)) as usize;
        assert_eq!(frame_capacity(bytes), want, "formula diverged at 2^{k} bytes");
    }
    assert_eq!(frame_capacity(13_107_200), 100);
    assert_eq!(frame_capacity(419_430_400), 3200);
}

fn c02_share_count_cap() {
    let mut s = Simulation::new(Regime::WindowsWorkingSet, 4096, 11);
    let f = s.register_file("shared-lib", 8, true);
    let procs: Vec<ProcId> = (0..12).map(|_| s.spawn_process(Integrity::SameUser)).collect();
    for &p in &procs {
        s.map_file(p, f).unwrap();
    }
    let page = PageId::new(f, 0);
    for (n, &p) in procs.iter().enumerate() {
        assert_eq!(
            s.share_count(page),
            (n as u8).min(SHARE_COUNT_CAP),
            "share count off after {n} sharers"
        );
        s.access_page(p, page).unwrap();
    }
    assert_eq!(s.share_count(page), SHARE_COUNT_CAP, "cap ignored at 12 sharers");
}

fn c03_working_set_bounds() {
    let mut s = Simulation::new(Regime::WindowsWorkingSet, 8192, 12);
    let f = s.register_file("app-data", 400, true);
    let p = s.spawn_process(Integrity::SameUser);
    let q = s.spawn_process(Integrity::SameUser);
    s.map_file(p, f).unwrap();
    s.map_file(q, f).unwrap();

    assert_eq!(WS_DEFAULT_MAX_PAGES, 345);
    assert_eq!(WS_FLOOR_PAGES, 13);
    assert_eq!(s.process(p).unwrap().ws_max_pages, WS_DEFAULT_MAX_PAGES);

    // Asking for a 5-page ceiling lands on the floor instead.
    let (_, eff) = s.set_process_working_set_size(q, q, 1, 5).unwrap();
    assert_eq!(eff, WS_FLOOR_PAGES);

    // Fill the default working set, pin five pages, shrink to the floor.
    for i in 0..WS_DEFAULT_MAX_PAGES as u32 {
        s.access_page(p, PageId::new(f, i)).unwrap();
    }
    assert_eq!(s.process(p).unwrap().ws_len(), WS_DEFAULT_MAX_PAGES);
    let locked: Vec<PageId> = (100..105).map(|i| PageId::new(f, i)).collect();
    for &pg in &locked {
        virtual_lock(&mut s, p, pg).unwrap();
    }
    let (_, eff) = s.set_process_working_set_size(p, p, 5, WS_FLOOR_PAGES).unwrap();
    assert_eq!(eff, WS_FLOOR_PAGES);

    // Survivors: the five pinned pages plus the eight most recently used
    // unlocked ones. Everything dropped was least-recent and unlocked.
    let survivors: HashSet<PageId> = s.process(p).unwrap().ws_pages_lru().into_iter().collect();
    let mut expect: HashSet<PageId> = locked.iter().copied().collect();
    for i in 337..345u32 {
        expect.insert(PageId::new(f, i));
    }
    assert_eq!(survivors, expect, "wrong pages survived the trim");
    for i in 0..WS_DEFAULT_MAX_PAGES as u32 {
        let pg = PageId::new(f, i);
        assert!(s.is_cached(pg), "page {i} left the cache on a working-set trim");
        if !survivors.contains(&pg) {
            assert!(!s.process(p).unwrap().ws_locked(pg), "a locked page was dropped");
        }
    }
}

fn c04_eviction_correctness() {
    const TRIALS: usize = 1000;
    let mut s = Simulation::new(Regime::LinuxGlobal, 2048, 13);
    let lib = s.register_file("victim-lib", 64, true);
    let corpus: Vec<FileId> =
        (0..4).map(|i| s.register_file(&format!("filler-{i}"), 2048, true)).collect();
    let attacker = s.spawn_process(Integrity::SameUser);
    let victim = s.spawn_process(Integrity::SameUser);
    s.map_file(attacker, lib).unwrap();
    s.map_file(victim, lib).unwrap();
    for &f in &corpus {
        s.map_file(attacker, f).unwrap();
    }

    // Warm part of the corpus so the survey finds a real keep-alive set,
    // and let the victim pull the target's readahead window in.
    for i in 0..256u32 {
        s.access_page(attacker, PageId::new(corpus[0], i)).unwrap();
    }
    let target = PageId::new(lib, 14);
    s.access_page(victim, target).unwrap();
    let mut bundle =
        survey_cache(&mut s, attacker, &corpus, &[target], &SurveyConfig::default()).unwrap();
    assert!(!bundle.set1.is_empty(), "survey saw no resident corpus pages");
    assert!(!bundle.guard.is_empty(), "no guard pages for the target window");

    let mut rng = s.derive_rng(0xc4);
    let mut set1_alive = 0usize;
    for round in 0..TRIALS {
        s.access_page(victim, target).unwrap();
        let bystander = PageId::new(lib, rng.gen_range(32..64));
        s.access_page(victim, bystander).unwrap();
        assert!(s.is_cached(target));

        let report = evict_page_linux(&mut s, attacker, target, &mut bundle).unwrap();
        assert!(report.succeeded, "round {round}: eviction gave up");
        assert!(!s.is_cached(target), "round {round}: target still resident");
        for &g in &bundle.guard {
            assert!(s.is_cached(g), "round {round}: guard page {g:?} went cold");
        }
        set1_alive += bundle.set1.iter().filter(|&&p| s.is_cached(p)).count();
    }
    let survival = set1_alive as f64 / (TRIALS * bundle.set1.len()) as f64;
    assert!(
        survival >= SET1_SURVIVAL_MIN,
        "keep-alive survival {survival:.4} below {SET1_SURVIVAL_MIN}"
    );

    // The periodic-event bench on the bundled config scores a clean 1.0.
    let out = run_bundle("eviction-bench-linux");
    assert!(out.ok, "bundled eviction bench flagged a failure");
    assert_eq!(summary_get(&out, "f_score"), "1.0000");
}

fn c05_virtual_unlock_misfeature() {
    const CALLS: usize = 1_000_000;
    let mut s = Simulation::new(Regime::WindowsWorkingSet, 4096, 14);
    let f = s.register_file("victim-pages", 2048, true);
    let p = s.spawn_process(Integrity::SameUser);
    s.map_file(p, f).unwrap();
    s.set_process_working_set_size(p, p, WS_DEFAULT_MIN_PAGES, 2048).unwrap();

    let mut rng = s.derive_rng(0xc5);
    for i in 0..CALLS {
        let page = PageId::new(f, rng.gen_range(0..2048));
        s.access_page(p, page).unwrap();
        let out = virtual_unlock(&mut s, p, page).unwrap();
        assert_eq!(out, UnlockOutcome::Removed, "call {i}: page was not dropped");
        assert!(!s.process(p).unwrap().ws_contains(page), "call {i}: still a member");
        assert!(s.is_cached(page), "call {i}: unlock touched global residency");
    }
}

fn c06_covert_round_trip() {
    const BITS: usize = 100_000;
    let payload: Vec<bool> = {
        let mut rng = ChaCha8Rng::seed_from_u64(0xacce55);
        (0..BITS).map(|_| rng.gen()).collect()
    };

    let quiet = covert_session(Regime::LinuxGlobal, &payload, None);
    assert_eq!(quiet.bit_errors, 0, "quiet linux run corrupted bits");
    let noisy = covert_session(Regime::LinuxGlobal, &payload, Some(NOISE_RATE_PER_PAGE));
    let ber = noisy.bit_errors as f64 / noisy.bits_sent as f64;
    assert!(ber < NOISY_BER_MAX, "linux BER {ber:.6} under noise");

    let quiet = covert_session(Regime::WindowsWorkingSet, &payload, None);
    assert_eq!(quiet.bit_errors, 0, "quiet windows run corrupted bits");
    let noisy = covert_session(Regime::WindowsWorkingSet, &payload, Some(NOISE_RATE_PER_PAGE));
    let ber = noisy.bit_errors as f64 / noisy.bits_sent as f64;
    assert!(ber < NOISY_BER_MAX, "windows BER {ber:.6} under noise");
}

/// A 1024-bit-wide channel in a 64k-page world; the linux side gets a
/// filler corpus for its eviction runs, the windows side needs none.
fn covert_session(regime: Regime, payload: &[bool], noise: Option<f64>) -> TransmissionStats {
    let mut s = Simulation::new(regime, 65_536, 15);
    let handshake_slots = if regime.is_windows() { 4 } else { 3 };
    let frame =
        s.register_file("frame", (1024 + handshake_slots) * SLOT_STRIDE_PAGES as u32, true);
    let fillers: Vec<FileId> = if regime.is_windows() {
        Vec::new()
    } else {
        (0..4).map(|i| s.register_file(&format!("filler-{i}"), 65_536, true)).collect()
    };
    let mut ch = LocalChannel::setup(&mut s, &[frame], &fillers).unwrap();
    assert_eq!(ch.frame.width_bits, 1024);
    if let Some(rate) = noise {
        ch.enable_noise(&mut s, rate).unwrap();
    }
    run_duplex_session(&mut s, &mut ch, payload).unwrap()
}

fn c07_throughput_consistency() {
    let linux = run_bundle("covert-local-linux");
    let windows = run_bundle("covert-local-windows");
    assert!(linux.ok, "linux covert scenario flagged a failure");
    assert!(windows.ok, "windows covert scenario flagged a failure");
    assert_eq!(summary_get(&linux, "bit_errors"), "0");
    assert_eq!(summary_get(&windows, "bit_errors"), "0");
    let l: f64 = summary_get(&linux, "throughput_kb_per_s").parse().unwrap();
    let w: f64 = summary_get(&windows, "throughput_kb_per_s").parse().unwrap();
    assert!(
        (LINUX_KBPS_MIN..=LINUX_KBPS_MAX).contains(&l),
        "linux covert ran at {l} KB/s, outside [{LINUX_KBPS_MIN}, {LINUX_KBPS_MAX}]"
    );
    assert!(
        w >= WINDOWS_SPEEDUP_MIN * l,
        "windows covert ran at {w} KB/s, under {WINDOWS_SPEEDUP_MIN}x linux ({l} KB/s)"
    );
}

fn c08_remote_channel() {
    const BITS: usize = 4000;
    for (name, prof, ber_max, threshold) in [
        ("hdd", hdd_profile(), HDD_BER_MAX, HDD_THRESHOLD_MS),
        ("ssd", ssd_profile(), SSD_BER_MAX, SSD_THRESHOLD_MS),
    ] {
        let mut s = Simulation::new(Regime::LinuxGlobal, 65_536, 17);
        let mut ch = RemoteChannel::setup(&mut s, &prof);
        let payload: Vec<bool> = {
            let mut rng = ChaCha8Rng::seed_from_u64(0xbead ^ name.len() as u64);
            (0..BITS).map(|_| rng.gen()).collect()
        };
        let stats = run_remote_session(&mut s, &mut ch, &payload).unwrap();
        let ber = stats.bit_errors as f64 / stats.bits_sent as f64;
        assert!(ber <= ber_max, "{name}: BER {ber:.6} over {ber_max}");

        // The measured hit/miss clouds must straddle the threshold with
        // three standard deviations of clearance on each side.
        let hits: Vec<f64> =
            ch.samples.iter().filter(|t| t.truth_hit).map(|t| t.latency_ms).collect();
        let misses: Vec<f64> =
            ch.samples.iter().filter(|t| !t.truth_hit).map(|t| t.latency_ms).collect();
        let (mh, sh) = mean_sd(&hits);
        let (mm, sm) = mean_sd(&misses);
        assert!(
            mh + 3.0 * sh < threshold,
            "{name}: hit cloud {mh:.2} +- {sh:.2} reaches threshold {threshold}"
        );
        assert!(
            mm - 3.0 * sm > threshold,
            "{name}: miss cloud {mm:.2} +- {sm:.2} reaches threshold {threshold}"
        );
    }
}

fn c09_remote_latency_anchors() {
    const ROUNDS: usize = 1000;
    let mut s = Simulation::new(Regime::LinuxGlobal, 4096, 18);
    let f = s.register_file("control", 25, true);
    let model = hdd_profile().model;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let (mut cold_sum, mut hot_sum) = (0.0f64, 0.0f64);
    for _ in 0..ROUNDS {
        s.flush_file(f).unwrap();
        let cold = remote_fetch(&mut s, f, &model, &mut rng).unwrap();
        assert_eq!(cold.missed_pages, 25);
        cold_sum += cold.latency_ms;
        let hot = remote_fetch(&mut s, f, &model, &mut rng).unwrap();
        assert_eq!(hot.missed_pages, 0);
        hot_sum += hot.latency_ms;
    }
    let cold_mean = cold_sum / ROUNDS as f64;
    let hot_mean = hot_sum / ROUNDS as f64;
    assert!(
        (cold_mean - HDD_COLD_MS).abs() <= MEAN_TOL * HDD_COLD_MS,
        "cold mean {cold_mean:.3} ms vs anchor {HDD_COLD_MS}"
    );
    assert!(
        (hot_mean - HDD_HOT_MS).abs() <= MEAN_TOL * HDD_HOT_MS,
        "hot mean {hot_mean:.3} ms vs anchor {HDD_HOT_MS}"
    );
}

fn c10_prefetch_isolation() {
    let mut s = Simulation::new(Regime::LinuxGlobal, 16_384, 19);
    let f = s.register_file("frame", (100 + 3) * SLOT_STRIDE_PAGES as u32, true);
    let p = s.spawn_process(Integrity::SameUser);
    s.map_file(p, f).unwrap();
    let frame = ChannelFrame::build(&s, &[f]).unwrap();
    assert_eq!(frame.width_bits, 100);
    for (i, &bit) in frame.bit_pages.iter().enumerate() {
        s.flush_file(f).unwrap();
        s.access_page(p, bit).unwrap();
        assert!(s.is_cached(bit));
        for (j, &other) in frame.bit_pages.iter().enumerate() {
            if i != j {
                assert!(!s.is_cached(other), "touching bit {i} cached bit {j}");
            }
        }
        for &h in frame.ready_pages.iter().chain(&frame.ack_pages) {
            assert!(!s.is_cached(h), "touching bit {i} woke a handshake page");
        }
    }
}

fn c11_keystroke_detection() {
    const PRESSES: u64 = 360;
    const INTERVAL_NS: u64 = 166_666_666; // six presses per second for a minute

    let (mut s, attacker, victim, template, mut bundle) = keystroke_fixture(21);
    let t0 = s.clock();
    let times: Vec<u64> = (1..=PRESSES).map(|k| t0 + k * INTERVAL_NS).collect();
    let mut rearm = Rearm::Pressure(&mut bundle);
    let trace =
        keystroke_monitor(&mut s, attacker, victim, &template, &times, &mut rearm).unwrap();

    assert_eq!(trace.detected_events.len(), PRESSES as usize, "missed keypresses");
    let wanted: HashSet<u64> = times.iter().copied().collect();
    let mut seen = HashSet::new();
    for (&at, &lat) in trace.detected_events.iter().zip(&trace.latencies_ns) {
        let press = at - lat;
        assert!(wanted.contains(&press), "detection at {at} ns matches no keypress");
        assert!(seen.insert(press), "keypress at {press} ns reported twice");
    }
    assert_eq!(seen.len(), PRESSES as usize);

    // A fresh, idle fixture watched for a logical hour reports nothing.
    let (mut s, attacker, _, template, _) = keystroke_fixture(22);
    let hit = watch_event(&mut s, attacker, &template, 3_600_000_000_000).unwrap();
    assert!(hit.is_none(), "idle watch produced a false positive");
}

fn keystroke_fixture(
    seed: u64,
) -> (Simulation, ProcId, ProcId, EventTemplate, EvictionSetBundle) {
    let mut s = Simulation::new(Regime::LinuxGlobal, 4096, seed);
    s.readahead = ReadaheadConfig { window_pages: 32, enabled: false };
    let lib = s.register_file("agent-lib", 64, true);
    let corpus: Vec<FileId> =
        (0..4).map(|i| s.register_file(&format!("corpus-{i}"), 16_384, true)).collect();
    let attacker = s.spawn_process(Integrity::SameUser);
    let victim = s.spawn_process(Integrity::SameUser);
    s.map_file(attacker, lib).unwrap();
    s.map_file(victim, lib).unwrap();
    for &f in &corpus {
        s.map_file(attacker, f).unwrap();
    }
    let page = PageId::new(lib, 14);
    let bundle =
        survey_cache(&mut s, attacker, &corpus, &[page], &SurveyConfig::default()).unwrap();
    let template = EventTemplate { target: page, label: "agent-lib".into(), correlation: 1.0 };
    (s, attacker, victim, template, bundle)
}

fn c12_prng_password_recovery() {
    let detection_us = 1_755_600_000_000u64;
    let truth = microtime_password(detection_us, 8);
    for (uncertainty, expect) in [(2000u64, 4000usize), (1500, 3000)] {
        let set =
            recover_prng_passwords(detection_us, uncertainty, |seed| microtime_password(seed, 8));
        assert_eq!(
            set.candidates.len(),
            expect,
            "wrong candidate count at +-{uncertainty} us"
        );
        assert!(set.contains(&truth), "true password missing at +-{uncertainty} us");
    }
}

fn c13_length_oracle() {
    const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_";
    const SECRETS: usize = 100;
    const MAX_LEN: usize = 32;
    let alphabet: Vec<char> = ALPHABET.chars().collect();
    assert_eq!(alphabet.len(), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ec1e7);
    for trial in 0..SECRETS {
        let len = rng.gen_range(1..=MAX_LEN);
        let secret: String =
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
        let mut s = Simulation::new(Regime::LinuxGlobal, 4096, 23 + trial as u64);
        let victim = s.spawn_process(Integrity::SameUser);
        let attacker = s.spawn_process(Integrity::SameUser);
        let out =
            length_oracle_attack(&mut s, victim, attacker, &secret, &alphabet, MAX_LEN).unwrap();
        assert_eq!(out.recovered, secret, "trial {trial}: wrong recovery");
        assert!(
            out.queries <= MAX_LEN * alphabet.len(),
            "trial {trial}: {} queries for a {len}-char secret",
            out.queries
        );
    }
}

fn c14_countermeasures() {
    // Linux: residency queries become a privileged operation. Every
    // cache-pressure attack dies at its first probe; an admin still sees
    // residency.
    let mut s = Simulation::new(Regime::LinuxGlobal, 4096, 24);
    s.policy.mincore_privileged = true;
    let lib = s.register_file("agent-lib", 64, true);
    let filler = s.register_file("filler", 16_384, true);
    let frame = s.register_file("frame", (64 + 3) * SLOT_STRIDE_PAGES as u32, true);
    let attacker = s.spawn_process(Integrity::SameUser);
    let victim = s.spawn_process(Integrity::SameUser);
    for f in [lib, filler, frame] {
        s.map_file(attacker, f).unwrap();
    }
    s.map_file(victim, lib).unwrap();
    let page = PageId::new(lib, 14);
    let template = EventTemplate { target: page, label: "agent-lib".into(), correlation: 1.0 };

    assert!(
        matches!(
            survey_cache(&mut s, attacker, &[filler], &[page], &SurveyConfig::default()),
            Err(EvictionError::Sim(SimError::PermissionDenied { .. }))
        ),
        "survey ran despite privileged residency queries"
    );
    assert!(
        matches!(
            watch_event(&mut s, attacker, &template, 1_000_000),
            Err(AttackError::Sim(SimError::PermissionDenied { .. }))
        ),
        "event watch ran despite privileged residency queries"
    );
    let denied = match LocalChannel::setup(&mut s, &[frame], &[filler]) {
        Err(e) => channel_permission_denied(&e),
        Ok(_) => false,
    };
    assert!(denied, "covert channel came up despite privileged residency queries");
    let admin = s.spawn_process(Integrity::Admin);
    s.map_file(admin, lib).unwrap();
    assert!(mincore(&mut s, admin, lib, 0, 8).is_ok(), "admin residency query was refused");

    // Windows: cross-process working-set queries need full query rights
    // and the records omit share counts. The covert read and the event
    // watch both fail; a self-query still answers, just without shares.
    let mut s = Simulation::new(Regime::WindowsWorkingSet, 65_536, 25);
    s.policy.qws_requires_full_info = true;
    s.policy.share_count_omitted = true;
    let frame = s.register_file("frame", (64 + 4) * SLOT_STRIDE_PAGES as u32, true);
    let bits = vec![true, false, true, true];
    let outcome = LocalChannel::setup(&mut s, &[frame], &[])
        .and_then(|mut ch| run_duplex_session(&mut s, &mut ch, &bits).map(|_| ()));
    let denied = match outcome {
        Err(e) => channel_permission_denied(&e),
        Ok(()) => false,
    };
    assert!(denied, "windows covert transfer survived the hardened probe policy");

    let lib = s.register_file("agent-lib", 64, true);
    let attacker = s.spawn_process(Integrity::SameUser);
    s.map_file(attacker, lib).unwrap();
    let page = PageId::new(lib, 3);
    let template = EventTemplate { target: page, label: "agent-lib".into(), correlation: 1.0 };
    assert!(
        matches!(
            watch_event(&mut s, attacker, &template, 1_000_000),
            Err(AttackError::Sim(SimError::PermissionDenied { .. }))
        ),
        "windows event watch survived the hardened probe policy"
    );
    s.access_page(attacker, page).unwrap();
    let recs = query_working_set(&mut s, attacker, attacker, &[page]).unwrap();
    assert!(recs[0].in_working_set, "self-query lost its own working set");
    assert_eq!(recs[0].share_count, None, "share counts leaked through the policy");
}
