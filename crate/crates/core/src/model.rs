//! Model, workload, and device descriptions plus exact FLOP/byte accounting
//! for the linear and attention kernels of one generation step.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("{0} must be positive")]
    ZeroField(&'static str),
    #[error("num_q_heads ({q}) must be a multiple of num_kv_heads ({kv})")]
    HeadGrouping { q: u64, kv: u64 },
    #[error("hidden_dim ({hidden}) != num_q_heads * head_dim ({product})")]
    HiddenDimMismatch { hidden: u64, product: u64 },
}

/// Decoder architecture dimensions. All element counts, not bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_q_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    /// Element width in bytes (2 for half precision).
    pub bytes_per_param: u64,
    /// Total parameter count used as the MFU denominator and for weight
    /// footprints. Not derivable from the linear dims alone (embeddings).
    pub total_params: u64,
    /// Vocabulary size; when set, the LM head GEMM is included in the
    /// per-step linear accounting. Off by default.
    #[serde(default)]
    pub lm_head_vocab: Option<u64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (v, name) in [
            (self.num_layers, "num_layers"),
            (self.hidden_dim, "hidden_dim"),
            (self.num_q_heads, "num_q_heads"),
            (self.num_kv_heads, "num_kv_heads"),
            (self.head_dim, "head_dim"),
            (self.ffn_dim, "ffn_dim"),
            (self.bytes_per_param, "bytes_per_param"),
            (self.total_params, "total_params"),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroField(name));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(ModelError::HeadGrouping {
                q: self.num_q_heads,
                kv: self.num_kv_heads,
            });
        }
        let product = self.num_q_heads * self.head_dim;
        if self.hidden_dim != product {
            return Err(ModelError::HiddenDimMismatch {
                hidden: self.hidden_dim,
                product,
            });
        }
        Ok(())
    }

    /// Query heads sharing one K/V head.
    pub fn group_size(&self) -> u64 {
        self.num_q_heads / self.num_kv_heads
    }

    /// Linear-layer parameter count for one decoder layer: Q and O
    /// projections at hidden^2, K and V scaled down by the GQA group, and
    /// the three FFN matrices.
    pub fn linear_params_per_layer(&self) -> u64 {
        let h = self.hidden_dim;
        let kv_proj = h * self.num_kv_heads * self.head_dim;
        2 * h * h + 2 * kv_proj + 3 * h * self.ffn_dim
    }

    /// Parameters streamed by the per-step linear GEMMs, all layers plus
    /// the LM head when configured.
    pub fn linear_params_total(&self) -> u64 {
        let mut p = self.num_layers * self.linear_params_per_layer();
        if let Some(vocab) = self.lm_head_vocab {
            p += self.hidden_dim * vocab;
        }
        p
    }

    pub fn weight_bytes(&self) -> u64 {
        self.total_params * self.bytes_per_param
    }
}

/// Fixed synthetic batch: every sequence shares input/output lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub batch_size: u64,
    pub input_len: u64,
    pub output_len: u64,
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (v, name) in [
            (self.batch_size, "batch_size"),
            (self.input_len, "input_len"),
            (self.output_len, "output_len"),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroField(name));
            }
        }
        Ok(())
    }

    /// Representative context length of the generation phase.
    pub fn mean_context(&self) -> u64 {
        self.input_len + self.output_len / 2
    }

    /// Context length after the full run.
    pub fn max_context(&self) -> u64 {
        self.input_len + self.output_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Gpu,
    Hpu,
}

/// One accelerator: bandwidth and capacity of its memory system, peak
/// compute, the link it hangs off, and its power envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub kind: DeviceKind,
    /// bytes/s
    pub mem_bandwidth: f64,
    /// bytes
    pub mem_capacity: u64,
    /// FLOP/s
    pub peak_flops: f64,
    /// bytes/s
    pub link_bandwidth: f64,
    /// seconds
    pub link_latency: f64,
    /// watts
    pub tdp: f64,
    /// Published performance-to-bandwidth ratio. Spec sheets round this;
    /// when present it is used for boundedness and crossover so reports
    /// match the published figure. Defaults to peak_flops/mem_bandwidth.
    #[serde(default)]
    pub perf_per_bw: Option<f64>,
    /// Fraction of TDP drawn above idle when fully busy.
    #[serde(default = "default_active_fraction")]
    pub active_fraction: f64,
    /// Transfers to this device must be staged through the host CPU
    /// instead of a direct peer link.
    #[serde(default)]
    pub host_routed: bool,
}

fn default_active_fraction() -> f64 {
    0.8
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        // NaNs fail the comparison and are rejected too.
        let positive = |x: f64| x > 0.0;
        if !positive(self.mem_bandwidth) {
            return Err(ModelError::ZeroField("mem_bandwidth"));
        }
        if self.mem_capacity == 0 {
            return Err(ModelError::ZeroField("mem_capacity"));
        }
        if !positive(self.peak_flops) {
            return Err(ModelError::ZeroField("peak_flops"));
        }
        if !positive(self.link_bandwidth) {
            return Err(ModelError::ZeroField("link_bandwidth"));
        }
        if !positive(self.tdp) {
            return Err(ModelError::ZeroField("tdp"));
        }
        Ok(())
    }

    /// Ratio at which the roofline turns over.
    pub fn perf_per_bw(&self) -> f64 {
        self.perf_per_bw
            .unwrap_or(self.peak_flops / self.mem_bandwidth)
    }

    pub fn derived_perf_per_bw(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelLabel {
    LinearGemm,
    AttentionGemv,
    Softmax,
    Other,
}

/// FLOPs and bytes moved for one kernel instance. Convention: one
/// multiply-add counts as 2 FLOPs, matching vendor peak-FLOPS figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelWork {
    pub flops: u64,
    pub bytes: u64,
    pub label: KernelLabel,
}

impl KernelWork {
    /// Operational intensity as an exact rational; reduce to f64 only at
    /// the reporting boundary.
    pub fn oi(&self) -> Ratio<u128> {
        Ratio::new(self.flops as u128, self.bytes as u128)
    }

    pub fn oi_f64(&self) -> f64 {
        self.flops as f64 / self.bytes as f64
    }

    pub fn add(&self, other: &KernelWork) -> KernelWork {
        KernelWork {
            flops: self.flops + other.flops,
            bytes: self.bytes + other.bytes,
            label: self.label,
        }
    }
}

/// Work of a single `out_features x in_features` GEMM at the given batch.
/// With `weights_only` the byte count covers the weight matrix alone, so
/// oi == batch exactly; otherwise per-element input/output activations are
/// added.
pub fn gemm_work(
    out_features: u64,
    in_features: u64,
    batch: u64,
    bytes_per_param: u64,
    weights_only: bool,
) -> KernelWork {
    let params = out_features * in_features;
    let flops = 2 * batch * params;
    let mut bytes = params * bytes_per_param;
    if !weights_only {
        bytes += batch * (in_features + out_features) * bytes_per_param;
    }
    KernelWork {
        flops,
        bytes,
        label: KernelLabel::LinearGemm,
    }
}

/// The representative linear kernel used for roofline sweeps: the FFN
/// down-projection (ffn_dim -> hidden_dim).
pub fn down_projection_work(m: &ModelConfig, batch: u64, weights_only: bool) -> KernelWork {
    gemm_work(
        m.hidden_dim,
        m.ffn_dim,
        batch,
        m.bytes_per_param,
        weights_only,
    )
}

/// All linear-layer work of one generation step: every layer's projections
/// and FFN, plus the LM head when configured.
pub fn linear_step_work(m: &ModelConfig, batch: u64, weights_only: bool) -> KernelWork {
    let params = m.linear_params_total();
    let flops = 2 * batch * params;
    let mut bytes = params * m.bytes_per_param;
    if !weights_only {
        bytes += batch * linear_activation_elems(m) * m.bytes_per_param;
    }
    KernelWork {
        flops,
        bytes,
        label: KernelLabel::LinearGemm,
    }
}

/// Input plus output elements of every linear GEMM, per batch element.
fn linear_activation_elems(m: &ModelConfig) -> u64 {
    let h = m.hidden_dim;
    let f = m.ffn_dim;
    let kv_out = m.num_kv_heads * m.head_dim;
    // Q: h->h, K: h->kv, V: h->kv, O: h->h, gate: h->f, up: h->f, down: f->h
    let per_layer = (2 * h) + (h + kv_out) + (h + kv_out) + (2 * h) + (h + f) + (h + f) + (f + h);
    let mut elems = m.num_layers * per_layer;
    if let Some(vocab) = m.lm_head_vocab {
        elems += m.hidden_dim + vocab;
    }
    elems
}

/// Decode-attention work for one step at the given context length: QK^T
/// and A*V for one new token per sequence, reading K and V once. Softmax is
/// tracked separately (see [`softmax_step_work`]).
pub fn attention_step_work(m: &ModelConfig, batch: u64, ctx_len: u64) -> KernelWork {
    let per_layer_flops = 4 * batch * m.num_q_heads * ctx_len * m.head_dim;
    let per_layer_bytes = 2 * batch * m.num_kv_heads * ctx_len * m.head_dim * m.bytes_per_param;
    KernelWork {
        flops: m.num_layers * per_layer_flops,
        bytes: m.num_layers * per_layer_bytes,
        label: KernelLabel::AttentionGemv,
    }
}

/// Softmax cost of one decode step, reported separately from the GEMV
/// accounting: ~5 ops per score (max scan, subtract, exp, sum, divide) and
/// one read plus one write of the score row.
pub fn softmax_step_work(m: &ModelConfig, batch: u64, ctx_len: u64) -> KernelWork {
    let scores = batch * m.num_q_heads * ctx_len * m.num_layers;
    KernelWork {
        flops: 5 * scores,
        bytes: 2 * scores * m.bytes_per_param,
        label: KernelLabel::Softmax,
    }
}

/// Bytes of K and V cached per generated token across all layers.
pub fn kv_bytes_per_token(m: &ModelConfig) -> u64 {
    2 * m.num_layers * m.num_kv_heads * m.head_dim * m.bytes_per_param
}
