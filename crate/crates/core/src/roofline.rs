//! Two-segment roofline: converts kernel work and a device spec into time
//! estimates, boundedness, MFU/MBU, and the memory-to-compute crossover.

use crate::model::{down_projection_work, DeviceSpec, KernelWork, ModelConfig, WorkloadConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RooflineError {
    #[error("kernel work moves zero bytes")]
    ZeroBytes,
    #[error("efficiency must be in (0, 1]")]
    BadEfficiency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundedness {
    MemoryBound,
    ComputeBound,
    Balanced,
}

impl std::fmt::Display for Boundedness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Boundedness::MemoryBound => "memory",
            Boundedness::ComputeBound => "compute",
            Boundedness::Balanced => "balanced",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub time_s: f64,
    pub bound: Boundedness,
    pub achieved_flops: f64,
    pub achieved_bw: f64,
    pub oi: f64,
}

/// Separate ceilings for the two roofline segments. The memory ceiling
/// follows the empirical 90% bandwidth maximum; the compute ceiling is a
/// typical dense-GEMM figure and is a calibration knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub memory: f64,
    pub compute: f64,
}

impl Default for Efficiency {
    fn default() -> Self {
        Efficiency {
            memory: 0.90,
            compute: 0.80,
        }
    }
}

fn classify(oi: f64, ratio: f64) -> Boundedness {
    if oi < ratio {
        Boundedness::MemoryBound
    } else if oi > ratio {
        Boundedness::ComputeBound
    } else {
        Boundedness::Balanced
    }
}

/// time = max(flops/peak, bytes/bandwidth) / efficiency, with a single
/// efficiency scalar applied to whichever side wins.
pub fn estimate(
    work: &KernelWork,
    dev: &DeviceSpec,
    efficiency: f64,
) -> Result<KernelEstimate, RooflineError> {
    if work.bytes == 0 {
        return Err(RooflineError::ZeroBytes);
    }
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(RooflineError::BadEfficiency);
    }
    let compute_t = work.flops as f64 / dev.peak_flops;
    let memory_t = work.bytes as f64 / dev.mem_bandwidth;
    let time_s = compute_t.max(memory_t) / efficiency;
    Ok(finish(work, dev, time_s))
}

/// Roofline with per-segment ceilings:
/// time = max(flops/(peak*compute_eff), bytes/(bandwidth*memory_eff)).
/// This is the form the simulator and the MFU/MBU curves use.
pub fn estimate_with(
    work: &KernelWork,
    dev: &DeviceSpec,
    eff: Efficiency,
) -> Result<KernelEstimate, RooflineError> {
    if work.bytes == 0 {
        return Err(RooflineError::ZeroBytes);
    }
    let compute_t = work.flops as f64 / (dev.peak_flops * eff.compute);
    let memory_t = work.bytes as f64 / (dev.mem_bandwidth * eff.memory);
    Ok(finish(work, dev, compute_t.max(memory_t)))
}

fn finish(work: &KernelWork, dev: &DeviceSpec, time_s: f64) -> KernelEstimate {
    KernelEstimate {
        time_s,
        bound: classify(work.oi_f64(), dev.perf_per_bw()),
        achieved_flops: work.flops as f64 / time_s,
        achieved_bw: work.bytes as f64 / time_s,
        oi: work.oi_f64(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationPoint {
    pub batch: u64,
    pub mfu: f64,
    pub mbu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelSelector {
    LinearGemm { weights_only: bool },
    AttentionGemv,
}

/// MFU/MBU over a batch sweep for one kernel family, using the per-segment
/// ceilings. mfu*peak*time == flops and mbu*bandwidth*time == bytes hold by
/// construction.
pub fn mfu_mbu_curve(
    m: &ModelConfig,
    w: &WorkloadConfig,
    dev: &DeviceSpec,
    kernel: KernelSelector,
    batches: &[u64],
    eff: Efficiency,
) -> Result<Vec<UtilizationPoint>, RooflineError> {
    if batches.is_empty() {
        return Err(RooflineError::ZeroBytes);
    }
    let ctx = w.mean_context();
    batches
        .iter()
        .map(|&batch| {
            let work = match kernel {
                KernelSelector::LinearGemm { weights_only } => {
                    down_projection_work(m, batch, weights_only)
                }
                KernelSelector::AttentionGemv => crate::model::attention_step_work(m, batch, ctx),
            };
            let est = estimate_with(&work, dev, eff)?;
            Ok(UtilizationPoint {
                batch,
                mfu: est.achieved_flops / dev.peak_flops,
                mbu: est.achieved_bw / dev.mem_bandwidth,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Crossover {
    /// Smallest batch whose OI reaches the device ratio.
    Batch(u64),
    /// Activation bytes cap OI below the ratio for every batch size.
    Unreachable,
}

/// Exact comparison flops/bytes >= ratio without rounding the rational OI
/// through f64. The f64 ratio decomposes exactly as mantissa * 2^exp.
fn oi_reaches(flops: u64, bytes: u64, ratio: f64) -> bool {
    debug_assert!(ratio > 0.0 && ratio.is_finite());
    let bits = ratio.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, exp) = if exp_bits == 0 {
        (frac, -1074i64)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    // flops >= bytes * mant * 2^exp
    let lhs = flops as u128;
    let rhs = bytes as u128 * mant as u128;
    if exp >= 0 {
        match rhs.checked_shl(exp as u32) {
            Some(r) => lhs >= r,
            None => false,
        }
    } else {
        let shift = (-exp) as u32;
        if shift >= 128 {
            return flops > 0;
        }
        match lhs.checked_shl(shift) {
            Some(l) => l >= rhs,
            None => true,
        }
    }
}

/// Smallest batch at which the representative linear kernel (the FFN
/// down-projection) reaches the device's performance/bandwidth ratio.
/// Binary search over the monotone OI(batch) curve.
pub fn crossover_batch(m: &ModelConfig, dev: &DeviceSpec, weights_only: bool) -> Crossover {
    let ratio = dev.perf_per_bw();
    let reaches = |batch: u64| {
        let w = down_projection_work(m, batch, weights_only);
        oi_reaches(w.flops, w.bytes, ratio)
    };
    if !weights_only {
        // OI(b) -> 2*params/act_bytes_per_elem from below; unreachable when
        // the limit does not strictly exceed the ratio.
        let params = m.hidden_dim * m.ffn_dim;
        let act = (m.ffn_dim + m.hidden_dim) * m.bytes_per_param;
        if 2.0 * params as f64 / act as f64 <= ratio {
            return Crossover::Unreachable;
        }
    }
    let mut hi = 1u64;
    while !reaches(hi) {
        hi = hi.saturating_mul(2);
        if hi > 1 << 40 {
            return Crossover::Unreachable;
        }
    }
    let mut lo = 1u64; // invariant: lo is the smallest candidate still possible
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Crossover::Batch(lo)
}
