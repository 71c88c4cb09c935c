//! Remote covert channel: residency of a public file, read over the
//! network, carries one bit per round.
//!
//! The sender and receiver share no machine state except a web host's
//! page cache. Each round the sender evicts the data and control files
//! with `posix_fadvise`, reads the data file locally to send a 1 (or
//! leaves it cold for a 0), and waits until most of the control file is
//! cached again. The receiver requests the data file over the network
//! and thresholds the response latency: a cached file comes back fast, a
//! cold file pays one disk batch per readahead window. It then requests
//! the control file, which both acknowledges the bit and re-arms the
//! sender's wait.
//!
//! Network latency is parametric (`LatencyModel`): a base round trip,
//! a per-batch disk penalty for missed pages, an optional per-page cost
//! for cached pages (transfer time dominates on fast disks), and
//! gaussian noise. The shipped profiles are calibrated so the classic
//! thresholds fall between the hit and miss latency distributions with
//! margin.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cache::{FileId, Integrity, ProcId, SimError, Simulation};
use crate::covert::TransmissionStats;
use crate::probe;

/// Parametric fetch-latency law for one network/disk pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyModel {
    pub base_rtt_ms: f64,
    pub per_disk_batch_ms: f64,
    /// Pages fetched per disk batch; matches the readahead window.
    pub batch_pages: u32,
    pub per_cached_page_us: f64,
    pub noise_sigma_ms: f64,
    pub seed: u64,
}

/// One channel instance: which files carry the signal and where the
/// hit/miss threshold sits.
#[derive(Clone, Copy, Debug)]
pub struct RemoteChannelConfig {
    pub data_file: FileId,
    pub control_file: FileId,
    pub threshold_ms: f64,
    /// Fraction of the control file that must be resident before the
    /// sender treats the bit as acknowledged.
    pub control_ready_fraction: f64,
}

/// One decoded bit with its measured data-file latency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingSample {
    pub seq: u32,
    /// Ground truth: the data file was resident when fetched.
    pub truth_hit: bool,
    pub latency_ms: f64,
    pub decoded: bool,
}

/// File geometry plus calibrated latency law for one disk class.
#[derive(Clone, Copy, Debug)]
pub struct RemoteProfile {
    pub model: LatencyModel,
    pub threshold_ms: f64,
    pub data_pages: u32,
    pub control_pages: u32,
}

/// Spinning-disk profile: one batch costs 5.8 ms, so a 25-page control
/// file comes back in 8.4 ms hot and 14.2 ms cold.
pub fn hdd_profile() -> RemoteProfile {
    RemoteProfile {
        model: LatencyModel {
            base_rtt_ms: 8.4,
            per_disk_batch_ms: 5.8,
            batch_pages: 32,
            per_cached_page_us: 0.0,
            noise_sigma_ms: 2.0,
            seed: 0x4dd_d15c,
        },
        threshold_ms: 105.0,
        data_pages: 2560,
        control_pages: 25,
    }
}

/// Flash profile: smaller batch penalty, so the data file grows and the
/// per-page transfer cost of cached reads stops being negligible.
pub fn ssd_profile() -> RemoteProfile {
    RemoteProfile {
        model: LatencyModel {
            base_rtt_ms: 5.0,
            per_disk_batch_ms: 1.6,
            batch_pages: 32,
            per_cached_page_us: 10.0,
            noise_sigma_ms: 3.0,
            seed: 0x55d_d15c,
        },
        threshold_ms: 300.0,
        data_pages: 7680,
        control_pages: 25,
    }
}

/// Noise-free part of the latency law. Exposed separately so the
/// monotonicity of the composition is testable without sampling.
pub fn expected_latency_ms(model: &LatencyModel, missed_pages: u32, cached_pages: u32) -> f64 {
    let batches = missed_pages.div_ceil(model.batch_pages.max(1));
    model.base_rtt_ms
        + batches as f64 * model.per_disk_batch_ms
        + cached_pages as f64 * model.per_cached_page_us / 1000.0
}

/// Fetch every page of `file` over the network: count hits and misses,
/// derive the latency, cache what was missing, charge the clock.
pub fn remote_fetch(
    sim: &mut Simulation,
    file: FileId,
    model: &LatencyModel,
    rng: &mut ChaCha8Rng,
) -> Result<FetchOutcome, SimError> {
    let num_pages = sim.file(file)?.num_pages;
    let mut missed = 0u32;
    for index in 0..num_pages {
        if !sim.is_cached(crate::cache::PageId::new(file, index)) {
            missed += 1;
        }
    }
    let cached = num_pages - missed;
    let mut latency_ms = expected_latency_ms(model, missed, cached);
    if model.noise_sigma_ms > 0.0 {
        let normal = Normal::new(0.0, model.noise_sigma_ms).expect("sigma is non-negative");
        latency_ms += normal.sample(rng);
    }
    latency_ms = latency_ms.max(0.0);
    for index in 0..num_pages {
        sim.insert_prefetched(crate::cache::PageId::new(file, index));
    }
    sim.advance_clock((latency_ms * 1e6) as u64);
    Ok(FetchOutcome { latency_ms, missed_pages: missed, cached_pages: cached })
}

/// What one `remote_fetch` saw and cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FetchOutcome {
    pub latency_ms: f64,
    pub missed_pages: u32,
    pub cached_pages: u32,
}

#[derive(Clone, Debug)]
pub enum RemoteError {
    Sim(SimError),
    FadviseRejected { file: FileId },
    ControlNeverReady { seq: u32, fraction: f64 },
}

impl std::fmt::Display for RemoteError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RemoteError::Sim(e) => write!(f, "{e}"),
            RemoteError::FadviseRejected { file } => {
                write!(f, "cannot evict file {}: still mapped", file.0)
            }
            RemoteError::ControlNeverReady { seq, fraction } => {
                write!(f, "control file stuck at {fraction:.2} readiness on bit {seq}")
            }
        }
    }
}

impl std::error::Error for RemoteError {}

impl From<SimError> for RemoteError {
    fn from(e: SimError) -> Self {
        RemoteError::Sim(e)
    }
}

/// Sender and receiver of the network channel, sharing one latency law.
pub struct RemoteChannel {
    pub cfg: RemoteChannelConfig,
    pub model: LatencyModel,
    pub sender: ProcId,
    pub samples: Vec<TimingSample>,
    /// When set, the sender skips the per-round eviction. The receiver's
    /// own fetches then keep the data file cached, so every round reads
    /// as a 1: reading the channel is destructive and re-eviction is
    /// load-bearing.
    pub skip_evict: bool,
    rng: ChaCha8Rng,
    seq: u32,
}

const CONTROL_POLL_CAP: u32 = 10_000;

impl RemoteChannel {
    /// Register the two public files and the sender process.
    pub fn setup(sim: &mut Simulation, profile: &RemoteProfile) -> RemoteChannel {
        let data_file = sim.register_file("remote-data", profile.data_pages, true);
        let control_file = sim.register_file("remote-control", profile.control_pages, true);
        let sender = sim.spawn_process(Integrity::SameUser);
        RemoteChannel {
            cfg: RemoteChannelConfig {
                data_file,
                control_file,
                threshold_ms: profile.threshold_ms,
                control_ready_fraction: 0.8,
            },
            model: profile.model,
            sender,
            samples: Vec::new(),
            skip_evict: false,
            rng: ChaCha8Rng::seed_from_u64(profile.model.seed),
            seq: 0,
        }
    }

    /// Resident fraction of the control file, measured the way the
    /// sender does it: map, `mincore`, unmap. The transient mapping is
    /// needed because residency queries require a mapping while the
    /// eviction path requires its absence.
    pub fn control_fraction(&self, sim: &mut Simulation) -> Result<f64, RemoteError> {
        let control = self.cfg.control_file;
        let num_pages = sim.file(control)?.num_pages;
        sim.map_file(self.sender, control)?;
        let residency = probe::mincore(sim, self.sender, control, 0, num_pages);
        sim.unmap_file(self.sender, control)?;
        Ok(residency?.resident_fraction())
    }

    /// Step 1 and 2: evict both files, then cache the data file when
    /// sending a 1. The local read is charged per page.
    pub fn sender_encode_bit(&mut self, sim: &mut Simulation, bit: bool) -> Result<(), RemoteError> {
        if !self.skip_evict {
            for file in [self.cfg.data_file, self.cfg.control_file] {
                if !probe::posix_fadvise_dontneed(sim, self.sender, file)? {
                    return Err(RemoteError::FadviseRejected { file });
                }
            }
        }
        if bit {
            let num_pages = sim.file(self.cfg.data_file)?.num_pages;
            for index in 0..num_pages {
                sim.touch_page_nocost(self.sender, crate::cache::PageId::new(self.cfg.data_file, index))?;
            }
            sim.advance_clock(num_pages as u64 * sim.costs.access_ns);
        }
        Ok(())
    }

    /// Step 4 and 5: fetch the data file, threshold its latency, then
    /// fetch the control file to acknowledge.
    pub fn receiver_decode_bit(&mut self, sim: &mut Simulation) -> Result<bool, RemoteError> {
        let data = remote_fetch(sim, self.cfg.data_file, &self.model, &mut self.rng)?;
        let decoded = data.latency_ms < self.cfg.threshold_ms;
        self.samples.push(TimingSample {
            seq: self.seq,
            truth_hit: data.missed_pages == 0,
            latency_ms: data.latency_ms,
            decoded,
        });
        remote_fetch(sim, self.cfg.control_file, &self.model, &mut self.rng)?;
        self.seq += 1;
        Ok(decoded)
    }

    /// Step 3: poll the control file until the acknowledged fraction is
    /// reached.
    pub fn sender_await_control(&mut self, sim: &mut Simulation) -> Result<(), RemoteError> {
        let mut last = 0.0;
        for _ in 0..CONTROL_POLL_CAP {
            last = self.control_fraction(sim)?;
            if last >= self.cfg.control_ready_fraction {
                return Ok(());
            }
        }
        Err(RemoteError::ControlNeverReady { seq: self.seq, fraction: last })
    }
}

/// Drive the full per-bit loop over `bits` and tally decode errors.
pub fn run_remote_session(
    sim: &mut Simulation,
    channel: &mut RemoteChannel,
    bits: &[bool],
) -> Result<TransmissionStats, RemoteError> {
    let start = sim.clock();
    let mut bit_errors = 0usize;
    for &bit in bits {
        channel.sender_encode_bit(sim, bit)?;
        let decoded = channel.receiver_decode_bit(sim)?;
        channel.sender_await_control(sim)?;
        if decoded != bit {
            bit_errors += 1;
        }
    }
    let elapsed_ns = sim.clock() - start;
    let throughput_bytes_per_s = if elapsed_ns == 0 {
        0.0
    } else {
        (bits.len() as f64 / 8.0) * 1e9 / elapsed_ns as f64
    };
    Ok(TransmissionStats {
        bits_sent: bits.len(),
        bit_errors,
        elapsed_ns,
        throughput_bytes_per_s,
    })
}

// ===========================================================================
// Tests
// ===========================================================================
