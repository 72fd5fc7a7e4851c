//! Functional emulator of the attention accelerator: per-head scaled
//! dot-product attention with GQA, half-precision I/O with single-precision
//! accumulation, a max-subtracted softmax unit, and the engine's memory
//! throughput model.

use crate::kvcache::{KvError, KvStore};
use crate::model::DeviceSpec;
use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest query group one K/V head can serve without degradation.
pub const MAX_GROUP_SIZE: u64 = 8;
/// Head-task capacity of a single bulk chunk.
pub const MAX_CHUNK_TASKS: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    #[error("sequence length must be at least 1")]
    SlotEmpty,
    #[error("group size {0} exceeds the GQA limit of {MAX_GROUP_SIZE}")]
    GroupTooLarge(u64),
    #[error("{what}: expected {want} values, got {got}")]
    DimensionMismatch {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("chunk holds {0} tasks, limit is {MAX_CHUNK_TASKS}")]
    ChunkTooLarge(usize),
    #[error("chunk tasks overlap on slot {slot} layer {layer} head {head}")]
    OverlappingTasks { slot: u64, layer: u64, head: u64 },
    #[error(transparent)]
    Store(#[from] KvError),
}

/// One head-group's work item: the queries of `group_size` query heads that
/// share a single K/V head, plus that token's new K/V rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTask {
    pub group_size: u64,
    pub head_dim: u64,
    /// Context length including the new token.
    pub seq_len: u64,
    /// g x d query values.
    pub q: Vec<f16>,
    pub kv_slot: u64,
    pub layer: u64,
    pub kv_head: u64,
    pub k_new: Vec<f16>,
    pub v_new: Vec<f16>,
}

/// Per-query-head softmax diagnostics kept in the accumulator precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnStats {
    pub max_score: Vec<f32>,
    pub denom: Vec<f32>,
    /// Sum of the normalized attention weights; 1 up to rounding.
    pub weight_sum: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput {
    /// g x d output values.
    pub out: Vec<f16>,
    pub stats: AttnStats,
}

fn validate(task: &HeadTask) -> Result<(), AttentionError> {
    if task.seq_len == 0 {
        return Err(AttentionError::SlotEmpty);
    }
    if task.group_size == 0 || task.group_size > MAX_GROUP_SIZE {
        return Err(AttentionError::GroupTooLarge(task.group_size));
    }
    let d = task.head_dim as usize;
    let want_q = task.group_size as usize * d;
    if task.q.len() != want_q {
        return Err(AttentionError::DimensionMismatch {
            what: "q",
            want: want_q,
            got: task.q.len(),
        });
    }
    if task.k_new.len() != d {
        return Err(AttentionError::DimensionMismatch {
            what: "k_new",
            want: d,
            got: task.k_new.len(),
        });
    }
    if task.v_new.len() != d {
        return Err(AttentionError::DimensionMismatch {
            what: "v_new",
            want: d,
            got: task.v_new.len(),
        });
    }
    Ok(())
}

/// Executes one head task against the store: appends the new K/V row at
/// the address computed from the slot base and sequence length, streams K
/// and V through the interleaved ports, and runs softmax(q.K^T/sqrt(d)).V
/// per query head. Inputs and outputs are half precision; dot products and
/// the softmax accumulate in single precision, rounding to nearest-even at
/// the output boundary.
pub fn attend(task: &HeadTask, store: &mut KvStore) -> Result<AttnOutput, AttentionError> {
    validate(task)?;
    let d = task.head_dim as usize;
    let g = task.group_size as usize;
    let len = task.seq_len;

    store.write_kv_row(
        task.kv_slot,
        task.layer,
        task.kv_head,
        len - 1,
        &task.k_new,
        &task.v_new,
    )?;
    store.note_tokens(task.kv_slot, len)?;

    let keys = store.read_k_head(task.kv_slot, task.layer, task.kv_head, len)?;
    let vals = store.read_v_head(task.kv_slot, task.layer, task.kv_head, len)?;

    let scale = 1.0f32 / (d as f32).sqrt();
    let mut out = vec![f16::ZERO; g * d];
    let mut stats = AttnStats {
        max_score: Vec::with_capacity(g),
        denom: Vec::with_capacity(g),
        weight_sum: Vec::with_capacity(g),
    };
    let mut logits = vec![0.0f32; len as usize];
    for head in 0..g {
        let q = &task.q[head * d..(head + 1) * d];
        let mut max_score = f32::NEG_INFINITY;
        for (t, logit) in logits.iter_mut().enumerate() {
            let krow = &keys[t * d..(t + 1) * d];
            let mut acc = 0.0f32;
            for i in 0..d {
                acc += q[i].to_f32() * krow[i].to_f32();
            }
            *logit = acc * scale;
            max_score = max_score.max(*logit);
        }
        let mut denom = 0.0f32;
        for logit in logits.iter_mut() {
            *logit = (*logit - max_score).exp();
            denom += *logit;
        }
        let mut acc = vec![0.0f32; d];
        let mut weight_sum = 0.0f32;
        for (t, &e) in logits.iter().enumerate() {
            let weight = e / denom;
            weight_sum += weight;
            let vrow = &vals[t * d..(t + 1) * d];
            for i in 0..d {
                acc[i] += weight * vrow[i].to_f32();
            }
        }
        for i in 0..d {
            out[head * d + i] = f16::from_f32(acc[i]);
        }
        stats.max_score.push(max_score);
        stats.denom.push(denom);
        stats.weight_sum.push(weight_sum);
    }
    Ok(AttnOutput { out, stats })
}

/// Executes up to 256 tasks delivered as one bulk chunk. Tasks must touch
/// disjoint (slot, layer, head) streams; outputs keep input order and each
/// equals an isolated [`attend`] call.
pub fn attend_chunk(
    tasks: &[HeadTask],
    store: &mut KvStore,
) -> Result<Vec<AttnOutput>, AttentionError> {
    if tasks.len() > MAX_CHUNK_TASKS {
        return Err(AttentionError::ChunkTooLarge(tasks.len()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in tasks {
        if !seen.insert((t.kv_slot, t.layer, t.kv_head)) {
            return Err(AttentionError::OverlappingTasks {
                slot: t.kv_slot,
                layer: t.layer,
                head: t.kv_head,
            });
        }
    }
    tasks.iter().map(|t| attend(t, store)).collect()
}

/// Memory-utilization curve of the engine: longer contiguous KV streams
/// keep more ports busy. util(1) equals the floor; the curve is calibrated
/// to pass through (ref_len, ref_util) and saturates at the ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemUtilCurve {
    pub floor: f64,
    pub ceiling: f64,
    pub ref_len: u64,
    pub ref_util: f64,
}

impl Default for MemUtilCurve {
    fn default() -> Self {
        MemUtilCurve {
            floor: 0.25,
            ceiling: 0.90,
            ref_len: 2048,
            ref_util: 0.73,
        }
    }
}

impl MemUtilCurve {
    fn half_len(&self) -> f64 {
        (self.ref_len - 1) as f64 * (self.ceiling - self.ref_util) / (self.ref_util - self.floor)
    }

    pub fn util(&self, seq_len: u64) -> f64 {
        let l = (seq_len.max(1) - 1) as f64;
        self.floor + (self.ceiling - self.floor) * l / (l + self.half_len())
    }
}

/// Shape of a batch of head tasks for the throughput model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub seq_len: u64,
    pub head_dim: u64,
    pub bytes_per_param: u64,
    /// Head tasks in flight (per K/V head, across batch and layers).
    pub num_tasks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineEstimate {
    pub bytes_read: u64,
    pub est_time_s: f64,
    pub mem_util: f64,
}

/// Time for the engine to stream the K and V of `num_tasks` head tasks at
/// the utilization the sequence length sustains.
pub fn engine_throughput_model(
    shape: &TaskShape,
    dev: &DeviceSpec,
    curve: &MemUtilCurve,
) -> EngineEstimate {
    let bytes_read = shape.num_tasks * 2 * shape.seq_len * shape.head_dim * shape.bytes_per_param;
    let mem_util = curve.util(shape.seq_len);
    EngineEstimate {
        bytes_read,
        est_time_s: bytes_read as f64 / (dev.mem_bandwidth * mem_util),
        mem_util,
    }
}

/// Straightforward double-precision scaled dot-product attention; the
/// reference the engine is checked against. Kept free of the engine's
/// store, blocking, and precision choices.
pub mod oracle {
    /// q: g x d, k/v: len x d, all row-major. Returns g x d.
    pub fn attention_f64(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        g: usize,
        d: usize,
        len: usize,
    ) -> Vec<f64> {
        assert_eq!(q.len(), g * d);
        assert_eq!(k.len(), len * d);
        assert_eq!(v.len(), len * d);
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0f64; g * d];
        for h in 0..g {
            let qh = &q[h * d..(h + 1) * d];
            let mut logits = Vec::with_capacity(len);
            for t in 0..len {
                let mut s = 0.0;
                for i in 0..d {
                    s += qh[i] * k[t * d + i];
                }
                logits.push(s * scale);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for t in 0..len {
                let w = exps[t] / denom;
                for i in 0..d {
                    out[h * d + i] += w * v[t * d + i];
                }
            }
        }
        out
    }
}
