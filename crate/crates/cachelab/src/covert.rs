//! Local covert channel: two colluding processes talk through the
//! presence of shared read-only file pages in the cache.
//!
//! A frame is laid out over one or more files at readahead stride, so no
//! two signal pages share a prefetch window. The first slots carry the
//! handshake: two READY pages used alternately by the sender, plus one
//! ACK page (global regime) or two alternating ACK pages (working-set
//! regime). Every remaining slot carries one bit: the sender accesses the
//! page to transmit 1 and leaves it alone to transmit 0, and the receiver
//! reads the frame without touching it, via `mincore` on the global
//! regime or self working-set queries (share counts) on the working-set
//! regime.
//!
//! Between messages the sender clears its previous footprint: per-page
//! eviction through the eviction engine on the global regime, `VirtualUnlock`
//! on the working-set regime. On the working-set regime each side owns
//! its stale control pages, which is why the ACK needs two pages there:
//! the receiver unlocks its own used ACK one message before reusing it,
//! and the sender does the same for READY.
//!
//! ## Noise
//! An optional background process touches random frame pages between a
//! send and the matching receive, flipping 0-bits to 1 at the configured
//! per-page rate. On the working-set regime the noise process churns its
//! own small working set afterwards so touched pages fall back out.

use std::fmt;

use rand::Rng;

use crate::cache::{
    FileId, PageId, ProcId, Regime, SimError, Simulation, PAGE_BYTES, SHARE_COUNT_CAP,
};
use crate::evict::{evict_page_linux, survey_cache, EvictionError, EvictionSetBundle, SurveyConfig};
use crate::prefetch::min_safe_stride;
use crate::probe;

/// Pages per frame slot in the capacity formula.
pub const SLOT_STRIDE_PAGES: u64 = 32;

#[derive(Clone, Debug)]
pub enum ChannelError {
    Sim(SimError),
    Evict(EvictionError),
    FrameTooSmall { slots: usize, needed: usize },
    StrideViolation { a: PageId, b: PageId },
    NeedFillerCorpus,
    EvictionFailed { page: PageId },
    Timeout { waiting_for: &'static str, seq: u32 },
    WrongRegime { op: &'static str, regime: Regime },
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::Sim(e) => write!(f, "{e}"),
            ChannelError::Evict(e) => write!(f, "{e}"),
            ChannelError::FrameTooSmall { slots, needed } => {
                write!(f, "frame files provide {slots} slots, need at least {needed}")
            }
            ChannelError::StrideViolation { a, b } => {
                write!(f, "pages {a} and {b} share a readahead window")
            }
            ChannelError::NeedFillerCorpus => {
                write!(f, "global-regime channel needs a filler corpus for eviction")
            }
            ChannelError::EvictionFailed { page } => {
                write!(f, "could not clear page {page} between messages")
            }
            ChannelError::Timeout { waiting_for, seq } => {
                write!(f, "timed out waiting for {waiting_for} on message {seq}")
            }
            ChannelError::WrongRegime { op, regime } => {
                write!(f, "{op} is not available under the {regime:?} regime")
            }
        }
    }
}

impl std::error::Error for ChannelError {}

impl From<SimError> for ChannelError {
    fn from(e: SimError) -> Self {
        ChannelError::Sim(e)
    }
}

impl From<EvictionError> for ChannelError {
    fn from(e: EvictionError) -> Self {
        ChannelError::Evict(e)
    }
}

/// Maximum raw message width supported by a file of `file_bytes`, before
/// control slots are subtracted.
pub fn frame_capacity(file_bytes: u64) -> usize {
    (file_bytes / (PAGE_BYTES * SLOT_STRIDE_PAGES)) as usize
}

/// The page layout of one channel: handshake pages plus bit pages, all
/// stride-separated so readahead never couples two slots.
#[derive(Clone, Debug)]
pub struct ChannelFrame {
    pub ready_pages: [PageId; 2],
    pub ack_pages: Vec<PageId>,
    pub bit_pages: Vec<PageId>,
    pub width_bits: usize,
}

impl ChannelFrame {
    /// Carve slots out of `files` at readahead stride: handshake slots
    /// first, every remaining slot one bit.
    pub fn build(sim: &Simulation, files: &[FileId]) -> Result<ChannelFrame, ChannelError> {
        let stride = min_safe_stride(&sim.readahead).max(1);
        let mut slots = Vec::new();
        for &f in files {
            let num_pages = sim.file(f)?.num_pages;
            let mut i = 0;
            while i < num_pages {
                slots.push(PageId::new(f, i));
                i += stride;
            }
        }
        let n_acks = if sim.regime().is_windows() { 2 } else { 1 };
        let needed = 2 + n_acks + 1;
        if slots.len() < needed {
            return Err(ChannelError::FrameTooSmall { slots: slots.len(), needed });
        }
        let ready_pages = [slots[0], slots[1]];
        let ack_pages = slots[2..2 + n_acks].to_vec();
        let bit_pages = slots[2 + n_acks..].to_vec();
        let frame = ChannelFrame {
            ready_pages,
            ack_pages,
            width_bits: bit_pages.len(),
            bit_pages,
        };
        frame.check_stride(stride)?;
        Ok(frame)
    }

    pub fn pages(&self) -> impl Iterator<Item = PageId> + '_ {
        self.ready_pages
            .iter()
            .chain(&self.ack_pages)
            .chain(&self.bit_pages)
            .copied()
    }

    /// No two frame pages of one file may sit within one readahead
    /// window, and all pages must be distinct.
    pub fn check_stride(&self, stride: u32) -> Result<(), ChannelError> {
        let mut pages: Vec<PageId> = self.pages().collect();
        pages.sort();
        for w in pages.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == b || (a.file == b.file && b.index - a.index < stride) {
                return Err(ChannelError::StrideViolation { a, b });
            }
        }
        Ok(())
    }
}

/// Outcome of one channel session.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionStats {
    pub bits_sent: usize,
    pub bit_errors: usize,
    pub elapsed_ns: u64,
    pub throughput_bytes_per_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelEventKind {
    BitsWritten,
    ReadySet,
    ReadySeen,
    BitsRead,
    AckSet,
    AckSeen,
}

/// One handshake step, logged for event-order replay.
#[derive(Clone, Copy, Debug)]
pub struct ChannelEvent {
    pub clock: u64,
    pub kind: ChannelEventKind,
    pub seq: u32,
}

/// Per-page payload density: one bit of presence, or a full 3-bit share
/// count level driven by helper processes (working-set regime only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Presence,
    ShareLevels,
}

struct NoiseState {
    proc: ProcId,
    rate_per_page: f64,
    churn_file: FileId,
    churn_cursor: u32,
}

/// A sender/receiver pair wired to one frame.
pub struct LocalChannel {
    pub frame: ChannelFrame,
    pub sender: ProcId,
    pub receiver: ProcId,
    pub encoding: Encoding,
    pub events: Vec<ChannelEvent>,
    bundle: Option<EvictionSetBundle>,
    helpers: Vec<ProcId>,
    noise: Option<NoiseState>,
    seq: u32,
    prev_levels: Vec<u8>,
    poll_budget_ns: u64,
}

const NOISE_CHURN_PAGES: u32 = 16;
const WS_SLACK_PAGES: usize = 64;

impl LocalChannel {
    /// Spawn the two endpoints, map the frame, and prepare regime
    /// plumbing: an eviction bundle over `filler_files` on the global
    /// regime, a widened sender working set on the working-set regime.
    /// The receiver primes the handshake by accessing the initial ACK
    /// page so the sender's first wait completes.
    pub fn setup(
        sim: &mut Simulation,
        frame_files: &[FileId],
        filler_files: &[FileId],
    ) -> Result<LocalChannel, ChannelError> {
        let frame = ChannelFrame::build(sim, frame_files)?;
        let sender = sim.spawn_process(crate::cache::Integrity::SameUser);
        let receiver = sim.spawn_process(crate::cache::Integrity::SameUser);
        for &f in frame_files {
            sim.map_file(sender, f)?;
            sim.map_file(receiver, f)?;
        }
        let bundle = if sim.regime().is_windows() {
            let max = frame.width_bits + frame.ready_pages.len() + WS_SLACK_PAGES;
            let min = sim.process(sender)?.ws_min_pages.min(max);
            sim.set_process_working_set_size(sender, sender, min, max)?;
            None
        } else {
            if filler_files.is_empty() {
                return Err(ChannelError::NeedFillerCorpus);
            }
            for &f in filler_files {
                sim.map_file(sender, f)?;
            }
            let targets: Vec<PageId> = frame.pages().collect();
            Some(survey_cache(sim, sender, filler_files, &targets, &SurveyConfig::default())?)
        };
        // Prime: the ACK the first send waits on reads as already given.
        let prime = if sim.regime().is_windows() { frame.ack_pages[1] } else { frame.ack_pages[0] };
        sim.access_page(receiver, prime)?;
        let poll_budget_ns = 10 * sim.costs.linux_evict_ns;
        Ok(LocalChannel {
            frame,
            sender,
            receiver,
            encoding: Encoding::Presence,
            events: Vec::new(),
            bundle,
            helpers: Vec::new(),
            noise: None,
            seq: 0,
            prev_levels: Vec::new(),
            poll_budget_ns,
        })
    }

    /// Switch to 3-bits-per-page share-count encoding. Spawns the seven
    /// helper processes whose working sets drive each page's count.
    pub fn enable_share_levels(&mut self, sim: &mut Simulation) -> Result<(), ChannelError> {
        if !sim.regime().is_windows() {
            return Err(ChannelError::WrongRegime {
                op: "share-level encoding",
                regime: sim.regime(),
            });
        }
        let mut files: Vec<FileId> = self.frame.pages().map(|p| p.file).collect();
        files.sort();
        files.dedup();
        let max = self.frame.width_bits + WS_SLACK_PAGES;
        for _ in 0..SHARE_COUNT_CAP {
            let h = sim.spawn_process(crate::cache::Integrity::SameUser);
            for &f in &files {
                sim.map_file(h, f)?;
            }
            let min = sim.process(h)?.ws_min_pages.min(max);
            sim.set_process_working_set_size(h, h, min, max)?;
            self.helpers.push(h);
        }
        self.encoding = Encoding::ShareLevels;
        Ok(())
    }

    /// Attach a background accessor that touches each frame bit page with
    /// probability `rate_per_page` between a send and its receive. On the
    /// working-set regime the process is clamped to the floor quota so the
    /// pages it touches churn back out of its working set quickly.
    pub fn enable_noise(
        &mut self,
        sim: &mut Simulation,
        rate_per_page: f64,
    ) -> Result<(), ChannelError> {
        let churn_file = sim.register_file("noise-churn", NOISE_CHURN_PAGES, false);
        let proc = sim.spawn_process(crate::cache::Integrity::SameUser);
        if sim.regime().is_windows() {
            sim.set_process_working_set_size(
                proc,
                proc,
                crate::cache::WS_FLOOR_PAGES,
                crate::cache::WS_FLOOR_PAGES,
            )?;
        }
        self.noise = Some(NoiseState { proc, rate_per_page, churn_file, churn_cursor: 0 });
        Ok(())
    }

    /// Payload bits carried per message.
    pub fn bits_per_message(&self) -> usize {
        match self.encoding {
            Encoding::Presence => self.frame.width_bits,
            Encoding::ShareLevels => 3 * self.frame.width_bits,
        }
    }

    fn log(&mut self, clock: u64, kind: ChannelEventKind) {
        self.events.push(ChannelEvent { clock, kind, seq: self.seq });
    }

    fn page_live(&self, sim: &mut Simulation, who: ProcId, page: PageId) -> Result<bool, ChannelError> {
        if sim.regime().is_windows() {
            let rec = probe::query_working_set(sim, who, who, &[page])?;
            match rec[0].share_count {
                Some(n) => Ok(n >= 1),
                None => Err(SimError::PermissionDenied {
                    op: "covert poll",
                    reason: "share count omitted from records",
                }
                .into()),
            }
        } else {
            let v = probe::mincore(sim, who, page.file, page.index, 1)?;
            Ok(v.bits[0])
        }
    }

    fn wait_live(
        &self,
        sim: &mut Simulation,
        who: ProcId,
        page: PageId,
        what: &'static str,
    ) -> Result<(), ChannelError> {
        let deadline = sim.clock().saturating_add(self.poll_budget_ns);
        loop {
            if self.page_live(sim, who, page)? {
                return Ok(());
            }
            if sim.clock() >= deadline {
                return Err(ChannelError::Timeout { waiting_for: what, seq: self.seq });
            }
        }
    }

    /// Clear the previous message's footprint, write the payload pages,
    /// and raise READY. Waits for the previous ACK first.
    pub fn send_message(
        &mut self,
        sim: &mut Simulation,
        payload: &[bool],
    ) -> Result<(), ChannelError> {
        assert!(payload.len() <= self.bits_per_message());
        let k = self.seq;
        let windows = sim.regime().is_windows();

        // Previous message's ACK: page index (k-1) % 2 on the working-set
        // regime, the single ACK page otherwise. The setup primed it for
        // the first message.
        let prev_ack =
            if windows { self.frame.ack_pages[(k as usize + 1) % 2] } else { self.frame.ack_pages[0] };
        self.wait_live(sim, self.sender, prev_ack, "ack")?;
        self.log(sim.clock(), ChannelEventKind::AckSeen);

        // Clean up: the previous READY page, previously driven bit pages,
        // and (global regime) the ACK page itself, newest first.
        let prev_ready = self.frame.ready_pages[(k as usize + 1) % 2];
        let prev_pages: Vec<PageId> = self
            .prev_levels
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, lvl)| **lvl > 0)
            .map(|(i, _)| self.frame.bit_pages[i])
            .collect();
        if windows {
            for &p in std::iter::once(&prev_ready).chain(&prev_pages) {
                match self.encoding {
                    Encoding::Presence => {
                        probe::virtual_unlock(sim, self.sender, p)?;
                    }
                    Encoding::ShareLevels => {
                        if p == prev_ready {
                            probe::virtual_unlock(sim, self.sender, p)?;
                        } else {
                            let idx = self.frame.bit_pages.iter().position(|q| *q == p).unwrap();
                            let lvl = self.prev_levels[idx] as usize;
                            for h in 0..lvl {
                                probe::virtual_unlock(sim, self.helpers[h], p)?;
                            }
                        }
                    }
                }
            }
        } else {
            let bundle = self.bundle.as_mut().expect("global-regime channel has a bundle");
            for &p in std::iter::once(&self.frame.ack_pages[0])
                .chain(std::iter::once(&prev_ready))
                .chain(&prev_pages)
            {
                let report = evict_page_linux(sim, self.sender, p, bundle)?;
                if !report.succeeded {
                    return Err(ChannelError::EvictionFailed { page: p });
                }
            }
        }

        // Drive the payload pages.
        let width = self.frame.width_bits;
        let mut levels = vec![0u8; width];
        match self.encoding {
            Encoding::Presence => {
                for (i, bit) in payload.iter().enumerate() {
                    if *bit {
                        levels[i] = 1;
                        sim.access_page(self.sender, self.frame.bit_pages[i])?;
                    }
                }
            }
            Encoding::ShareLevels => {
                for (i, chunk) in payload.chunks(3).enumerate() {
                    let mut lvl = 0u8;
                    for (b, bit) in chunk.iter().enumerate() {
                        if *bit {
                            lvl |= 1 << b;
                        }
                    }
                    levels[i] = lvl;
                    for h in 0..lvl as usize {
                        sim.access_page(self.helpers[h], self.frame.bit_pages[i])?;
                    }
                }
            }
        }
        self.prev_levels = levels;
        self.log(sim.clock(), ChannelEventKind::BitsWritten);

        sim.access_page(self.sender, self.frame.ready_pages[k as usize % 2])?;
        self.log(sim.clock(), ChannelEventKind::ReadySet);
        Ok(())
    }

    /// Background accessor pass: runs between a send and its receive.
    /// On the working-set regime the pass first churns the process's own
    /// pages, so the previous pass's frame touches fall out of its
    /// working set while this pass's touches stay visible to the
    /// receiver. On the global regime the sender's next cleanup flood
    /// clears the strays instead.
    pub fn apply_noise(&mut self, sim: &mut Simulation) -> Result<(), ChannelError> {
        let Some(noise) = self.noise.as_mut() else { return Ok(()) };
        if sim.regime().is_windows() {
            for _ in 0..NOISE_CHURN_PAGES {
                let page = PageId::new(noise.churn_file, noise.churn_cursor % NOISE_CHURN_PAGES);
                noise.churn_cursor = noise.churn_cursor.wrapping_add(1);
                sim.touch_page_nocost(noise.proc, page)?;
            }
        }
        let mut touched = Vec::new();
        {
            let rate = noise.rate_per_page;
            let rng = sim.rng();
            for &p in &self.frame.bit_pages {
                if rng.gen_bool(rate) {
                    touched.push(p);
                }
            }
        }
        for p in &touched {
            sim.touch_page_nocost(noise.proc, *p)?;
        }
        Ok(())
    }

    /// Wait for READY, read the frame without touching it, raise ACK.
    pub fn receive_message(&mut self, sim: &mut Simulation) -> Result<Vec<bool>, ChannelError> {
        let k = self.seq;
        let windows = sim.regime().is_windows();
        let ready = self.frame.ready_pages[k as usize % 2];
        self.wait_live(sim, self.receiver, ready, "ready")?;
        self.log(sim.clock(), ChannelEventKind::ReadySeen);

        let mut bits = Vec::with_capacity(self.bits_per_message());
        if windows {
            let records =
                probe::query_working_set(sim, self.receiver, self.receiver, &self.frame.bit_pages)?;
            for rec in &records {
                let count = rec.share_count.ok_or(SimError::PermissionDenied {
                    op: "covert read",
                    reason: "share count omitted from records",
                })?;
                match self.encoding {
                    Encoding::Presence => bits.push(count >= 1),
                    Encoding::ShareLevels => {
                        for b in 0..3 {
                            bits.push(count & (1 << b) != 0);
                        }
                    }
                }
            }
        } else {
            let mut by_file: Vec<FileId> = self.frame.bit_pages.iter().map(|p| p.file).collect();
            by_file.dedup();
            let mut resident = std::collections::HashMap::new();
            for f in by_file {
                let num_pages = sim.file(f)?.num_pages;
                let v = probe::mincore(sim, self.receiver, f, 0, num_pages)?;
                resident.insert(f, v.bits);
            }
            for p in &self.frame.bit_pages {
                bits.push(resident[&p.file][p.index as usize]);
            }
        }
        self.log(sim.clock(), ChannelEventKind::BitsRead);

        let ack = if windows { self.frame.ack_pages[k as usize % 2] } else { self.frame.ack_pages[0] };
        sim.access_page(self.receiver, ack)?;
        self.log(sim.clock(), ChannelEventKind::AckSet);
        if windows {
            // Release the other ACK page (used two messages ago) so the
            // sender's wait after the next message starts from zero.
            probe::virtual_unlock(sim, self.receiver, self.frame.ack_pages[(k as usize + 1) % 2])?;
        }
        self.seq += 1;
        Ok(bits)
    }
}

/// Push `payload` through the channel message by message and tally
/// errors against what the receiver decodes.
pub fn run_duplex_session(
    sim: &mut Simulation,
    channel: &mut LocalChannel,
    payload: &[bool],
) -> Result<TransmissionStats, ChannelError> {
    let start = sim.clock();
    let chunk_bits = channel.bits_per_message();
    let mut bit_errors = 0usize;
    for chunk in payload.chunks(chunk_bits) {
        channel.send_message(sim, chunk)?;
        channel.apply_noise(sim)?;
        let decoded = channel.receive_message(sim)?;
        bit_errors += chunk
            .iter()
            .zip(decoded.iter())
            .filter(|(sent, got)| sent != got)
            .count();
    }
    let elapsed_ns = sim.clock() - start;
    let throughput_bytes_per_s = if elapsed_ns == 0 {
        0.0
    } else {
        (payload.len() as f64 / 8.0) * 1e9 / elapsed_ns as f64
    };
    Ok(TransmissionStats {
        bits_sent: payload.len(),
        bit_errors,
        elapsed_ns,
        throughput_bytes_per_s,
    })
}
