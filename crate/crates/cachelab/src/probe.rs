//! Attacker-visible probe surface: residency queries, working-set
//! queries, and the advice/unlock calls that let an unprivileged process
//! push pages out of caches it does not own.
//!
//! Every probe charges its fixed cost to the logical clock before any
//! permission check runs, so a blocked attacker still pays for the
//! attempt. None of the query calls mutate cache state: an observer that
//! only probes leaves the machine exactly as it found it.

use serde::{Deserialize, Serialize};

use crate::cache::{FileId, Integrity, PageId, ProcId, SimError, Simulation};

/// Countermeasure switches. All off by default, matching a stock kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePolicy {
    /// Residency queries require an admin-integrity caller.
    pub mincore_privileged: bool,
    /// Cross-process working-set queries require full-information access
    /// (admin integrity) instead of the default same-or-lower rule.
    pub qws_requires_full_info: bool,
    /// Working-set records come back without their share count.
    pub share_count_omitted: bool,
}

/// Result of one residency query over a contiguous page range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidencyVector {
    pub file: FileId,
    pub first: u32,
    pub bits: Vec<bool>,
}

impl ResidencyVector {
    pub fn resident_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn resident_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.resident_count() as f64 / self.bits.len() as f64
        }
    }
}

/// One page's answer from a working-set query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkingSetRecord {
    pub page: PageId,
    pub in_working_set: bool,
    /// Number of processes holding the page, saturated at 7. `None` when
    /// the policy omits it.
    pub share_count: Option<u8>,
    pub locked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnlockOutcome {
    /// The page left the caller's working set (it stays in the cache).
    Removed,
    /// The page was locked; one call only clears the lock.
    Unlocked,
    /// The page was not in the caller's working set.
    NotPresent,
}

fn can_read(sim: &Simulation, caller: ProcId, file: FileId) -> Result<bool, SimError> {
    let f = sim.file(file)?;
    let p = sim.process(caller)?;
    Ok(f.attacker_readable || f.mapped_by.contains(&caller) || p.integrity == Integrity::Admin)
}

/// Residency of `count` pages of `file` starting at `first`, as seen by
/// `caller`. Requires the caller to have the file mapped; with
/// `mincore_privileged` set, additionally an admin-integrity caller.
pub fn mincore(
    sim: &mut Simulation,
    caller: ProcId,
    file: FileId,
    first: u32,
    count: u32,
) -> Result<ResidencyVector, SimError> {
    let num_pages = sim.file(file)?.num_pages;
    sim.process(caller)?;
    if first.saturating_add(count) > num_pages {
        return Err(SimError::InvalidRange { first, count, num_pages });
    }
    sim.charge(sim.costs.mincore_ns);
    if sim.policy.mincore_privileged && sim.process(caller)?.integrity < Integrity::Admin {
        return Err(SimError::PermissionDenied {
            op: "mincore",
            reason: "residency queries are restricted to privileged processes",
        });
    }
    if !sim.process(caller)?.maps(file) {
        return Err(SimError::NotMapped { proc: caller, file });
    }
    let bits = (first..first + count)
        .map(|i| sim.is_cached(PageId::new(file, i)))
        .collect();
    Ok(ResidencyVector { file, first, bits })
}

/// Query working-set state of `pages` in process `target`. Self-queries
/// are always permitted; cross-process queries require the target to run
/// at the caller's integrity level or below, or full-information access
/// (admin) when the hardened policy is on.
pub fn query_working_set(
    sim: &mut Simulation,
    caller: ProcId,
    target: ProcId,
    pages: &[PageId],
) -> Result<Vec<WorkingSetRecord>, SimError> {
    sim.process(caller)?;
    sim.process(target)?;
    for &page in pages {
        let f = sim.file(page.file)?;
        if page.index >= f.num_pages {
            return Err(SimError::PageOutOfRange { page, num_pages: f.num_pages });
        }
    }
    sim.charge(sim.costs.qws_ns);
    if caller != target {
        let caller_tier = sim.process(caller)?.integrity;
        let target_tier = sim.process(target)?.integrity;
        let allowed = if sim.policy.qws_requires_full_info {
            caller_tier == Integrity::Admin && target_tier <= caller_tier
        } else {
            target_tier <= caller_tier
        };
        if !allowed {
            return Err(SimError::PermissionDenied {
                op: "query_working_set",
                reason: "caller lacks query permission over target",
            });
        }
    }
    let omit = sim.policy.share_count_omitted;
    let records = pages
        .iter()
        .map(|&page| {
            let t = sim.process(target).expect("validated above");
            WorkingSetRecord {
                page,
                in_working_set: t.ws_contains(page),
                share_count: if omit { None } else { Some(sim.share_count(page)) },
                locked: t.ws_locked(page),
            }
        })
        .collect();
    Ok(records)
}

/// Ask the kernel to drop every cached page of `file`. Honoured only when
/// no process has the file mapped; otherwise accepted as a no-op. Returns
/// whether the pages were actually dropped.
pub fn posix_fadvise_dontneed(
    sim: &mut Simulation,
    caller: ProcId,
    file: FileId,
) -> Result<bool, SimError> {
    sim.process(caller)?;
    let num_pages = sim.file(file)?.num_pages;
    if !can_read(sim, caller, file)? {
        return Err(SimError::NotReadable { proc: caller, file });
    }
    sim.charge(sim.costs.access_ns);
    if !sim.file(file)?.mapped_by.is_empty() {
        return Ok(false);
    }
    for index in 0..num_pages {
        sim.remove_page(PageId::new(file, index), true);
    }
    Ok(true)
}

/// Drop one page of a mapping the caller owns. Honoured only when the
/// caller is the sole mapper of the file. Idempotent: advising an
/// already-uncached page still counts as accepted.
pub fn madvise_dontneed(
    sim: &mut Simulation,
    caller: ProcId,
    page: PageId,
) -> Result<bool, SimError> {
    sim.process(caller)?;
    let f = sim.file(page.file)?;
    if page.index >= f.num_pages {
        return Err(SimError::PageOutOfRange { page, num_pages: f.num_pages });
    }
    if !sim.process(caller)?.maps(page.file) {
        return Err(SimError::NotMapped { proc: caller, file: page.file });
    }
    sim.charge(sim.costs.access_ns);
    let f = sim.file(page.file)?;
    let sole_mapper = f.mapped_by.len() == 1 && f.mapped_by.contains(&caller);
    if !sole_mapper {
        return Ok(false);
    }
    sim.remove_page(page, true);
    Ok(true)
}

/// Surgically drop `page` from the caller's own working set. The page
/// stays in the global cache. A locked page is merely unlocked.
pub fn virtual_unlock(
    sim: &mut Simulation,
    caller: ProcId,
    page: PageId,
) -> Result<UnlockOutcome, SimError> {
    sim.process(caller)?;
    let f = sim.file(page.file)?;
    if page.index >= f.num_pages {
        return Err(SimError::PageOutOfRange { page, num_pages: f.num_pages });
    }
    if !sim.process(caller)?.maps(page.file) {
        return Err(SimError::NotMapped { proc: caller, file: page.file });
    }
    sim.charge(sim.costs.unlock_ns);
    let was_locked = sim.process(caller)?.ws_locked(page);
    let in_ws = sim.process(caller)?.ws_contains(page);
    if !in_ws {
        return Ok(UnlockOutcome::NotPresent);
    }
    if was_locked {
        sim.ws_remove(caller, page);
        return Ok(UnlockOutcome::Unlocked);
    }
    sim.ws_remove(caller, page);
    Ok(UnlockOutcome::Removed)
}

/// Pin `page` in the caller's working set (accessing it first if needed)
/// so LRU trimming and quota shrinks skip it.
pub fn virtual_lock(
    sim: &mut Simulation,
    caller: ProcId,
    page: PageId,
) -> Result<bool, SimError> {
    sim.access_page(caller, page)?;
    Ok(sim.ws_lock(caller, page))
}

/// Regime-appropriate residency check used by the attack drivers: a
/// one-page residency query on the global-cache regime, a self working-set
/// query (share count at least one) on the working-set regime.
pub fn probe_resident(
    sim: &mut Simulation,
    attacker: ProcId,
    page: PageId,
) -> Result<bool, SimError> {
    if sim.regime().is_windows() {
        let records = query_working_set(sim, attacker, attacker, &[page])?;
        match records[0].share_count {
            Some(n) => Ok(n >= 1),
            None => Err(SimError::PermissionDenied {
                op: "query_working_set",
                reason: "share count omitted from records",
            }),
        }
    } else {
        let v = mincore(sim, attacker, page.file, page.index, 1)?;
        Ok(v.bits[0])
    }
}
