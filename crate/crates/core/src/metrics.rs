//! Headline metrics over simulator output: MFU projection, power, and
//! normalized energy efficiency in tokens/s/W.

use crate::model::{
    attention_step_work, linear_step_work, DeviceSpec, ModelConfig, WorkloadConfig,
};
use crate::sim::{StepReport, Topology};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Accounting {
    /// Power counted as the draw above idle while busy.
    #[default]
    DeltaOverIdle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevicePower {
    /// Resource name as reported in `StepReport::per_device_busy`.
    pub resource: String,
    pub tdp: f64,
    pub active_fraction: f64,
    pub idle_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub devices: Vec<DevicePower>,
    pub accounting: Accounting,
}

impl EnergyModel {
    /// TDPs and active fractions straight from the topology's device specs.
    pub fn from_topology(topo: &Topology) -> Self {
        let mut devices = vec![DevicePower {
            resource: "GPU".into(),
            tdp: topo.gpu.tdp,
            active_fraction: topo.gpu.active_fraction,
            idle_power: 0.0,
        }];
        for (i, h) in topo.hpus.iter().enumerate() {
            devices.push(DevicePower {
                resource: format!("HPU{i}"),
                tdp: h.tdp,
                active_fraction: h.active_fraction,
                idle_power: 0.0,
            });
        }
        EnergyModel {
            devices,
            accounting: Accounting::DeltaOverIdle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub tokens_per_s: f64,
    pub watts: f64,
    pub tokens_per_s_per_watt: f64,
    /// (baseline label, this/baseline) when normalized.
    pub normalized_vs: Option<(String, f64)>,
}

/// Model FLOPS utilization of the GPU: linear FLOPs per step over step time
/// at peak rate. When the run kept attention on the GPU, those FLOPs (at
/// the mean context) join the numerator.
pub fn mfu_projection(
    report: &StepReport,
    m: &ModelConfig,
    w: &WorkloadConfig,
    dev_gpu: &DeviceSpec,
) -> f64 {
    let mut flops = linear_step_work(m, w.batch_size, true).flops as f64;
    if !report.offloaded {
        flops += attention_step_work(m, w.batch_size, w.mean_context()).flops as f64;
    }
    flops / (report.step_time_s * dev_gpu.peak_flops)
}

/// Busy-fraction-weighted power above idle, and throughput per watt.
pub fn energy_report(report: &StepReport, em: &EnergyModel) -> EfficiencyReport {
    let watts: f64 = em
        .devices
        .iter()
        .map(|d| {
            let busy = report
                .per_device_busy
                .iter()
                .find(|(name, _)| *name == d.resource)
                .map(|(_, b)| *b)
                .unwrap_or(0.0);
            d.tdp * d.active_fraction * busy
        })
        .sum();
    let eff = if watts > 0.0 {
        report.tokens_per_s / watts
    } else {
        0.0
    };
    EfficiencyReport {
        tokens_per_s: report.tokens_per_s,
        watts,
        tokens_per_s_per_watt: eff,
        normalized_vs: None,
    }
}

pub fn normalize(report: &mut EfficiencyReport, label: &str, baseline: &EfficiencyReport) {
    let ratio = if baseline.tokens_per_s_per_watt > 0.0 {
        report.tokens_per_s_per_watt / baseline.tokens_per_s_per_watt
    } else {
        f64::INFINITY
    };
    report.normalized_vs = Some((label.to_string(), ratio));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeviceKind;
    use crate::sim::{simulate, Breakdown, SimKnobs, SimPolicy, Topology};

    fn llama() -> ModelConfig {
        ModelConfig {
            name: "llama2-7b".into(),
            num_layers: 32,
            hidden_dim: 4096,
            num_q_heads: 32,
            num_kv_heads: 32,
            head_dim: 128,
            ffn_dim: 11008,
            bytes_per_param: 2,
            total_params: 6_740_000_000,
            lm_head_vocab: None,
        }
    }

    fn l40s() -> DeviceSpec {
        DeviceSpec {
            name: "l40s".into(),
            kind: DeviceKind::Gpu,
            mem_bandwidth: 864e9,
            mem_capacity: 48 * (1 << 30),
            peak_flops: 362.1e12,
            link_bandwidth: 16e9,
            link_latency: 5e-6,
            tdp: 350.0,
            perf_per_bw: Some(419.0),
            active_fraction: 0.8,
            host_routed: false,
        }
    }

    fn synthetic_report(tokens_per_s: f64, busy: &[(&str, f64)]) -> StepReport {
        StepReport {
            tokens_per_s,
            breakdown: Breakdown::default(),
            per_device_busy: busy.iter().map(|(n, b)| (n.to_string(), *b)).collect(),
            step_time_s: 1e-3,
            makespan_s: 1.0,
            generated_tokens: tokens_per_s as u64,
            batch_size: 16,
            offloaded: true,
        }
    }

    fn em(devs: &[(&str, f64, f64)]) -> EnergyModel {
        EnergyModel {
            devices: devs
                .iter()
                .map(|(n, tdp, af)| DevicePower {
                    resource: n.to_string(),
                    tdp: *tdp,
                    active_fraction: *af,
                    idle_power: 0.0,
                })
                .collect(),
            accounting: Accounting::DeltaOverIdle,
        }
    }

    #[test]
    fn normalizing_against_self_is_one() {
        let rep = synthetic_report(100.0, &[("GPU", 0.5)]);
        let model = em(&[("GPU", 350.0, 0.8)]);
        let base = energy_report(&rep, &model);
        let mut this = energy_report(&rep, &model);
        normalize(&mut this, "self", &base);
        assert_eq!(this.normalized_vs.unwrap().1, 1.0);
    }

    #[test]
    fn efficiency_independent_of_run_length() {
        // Twice the tokens in twice the time: same rates, same busy
        // fractions, identical efficiency.
        let r1 = synthetic_report(100.0, &[("GPU", 0.5), ("HPU0", 0.9)]);
        let mut r2 = r1.clone();
        r2.makespan_s *= 2.0;
        r2.generated_tokens *= 2;
        let model = em(&[("GPU", 350.0, 0.8), ("HPU0", 150.0, 0.1)]);
        let e1 = energy_report(&r1, &model);
        let e2 = energy_report(&r2, &model);
        assert_eq!(e1.tokens_per_s_per_watt, e2.tokens_per_s_per_watt);
    }

    #[test]
    fn idle_hpu_adds_no_watts() {
        let rep = synthetic_report(100.0, &[("GPU", 0.5), ("HPU0", 0.0)]);
        let with_idle = em(&[("GPU", 350.0, 0.8), ("HPU0", 150.0, 0.8)]);
        let without = em(&[("GPU", 350.0, 0.8)]);
        assert_eq!(
            energy_report(&rep, &with_idle).watts,
            energy_report(&rep, &without).watts
        );
    }

    #[test]
    fn zero_throughput_is_zero_efficiency() {
        let rep = synthetic_report(0.0, &[("GPU", 0.0)]);
        let model = em(&[("GPU", 350.0, 0.8)]);
        let e = energy_report(&rep, &model);
        assert_eq!(e.tokens_per_s_per_watt, 0.0);
    }

    #[test]
    fn report_ratio_identity() {
        let rep = synthetic_report(123.0, &[("GPU", 0.7)]);
        let model = em(&[("GPU", 350.0, 0.8)]);
        let e = energy_report(&rep, &model);
        assert!((e.tokens_per_s_per_watt - e.tokens_per_s / e.watts).abs() < 1e-12);
    }

    #[test]
    fn gpu_only_mfu_is_one_to_two_percent() {
        let m = llama();
        let w = WorkloadConfig {
            batch_size: 16,
            input_len: 1024,
            output_len: 1024,
        };
        let topo = Topology::gpu_only(l40s());
        let policy = SimPolicy {
            offload: false,
            num_subbatches: 1,
            ..SimPolicy::default()
        };
        let (_t, rep) = simulate(&m, &w, &topo, &policy, &SimKnobs::default()).unwrap();
        let mfu = mfu_projection(&rep, &m, &w, &topo.gpu);
        assert!((0.01..=0.02).contains(&mfu), "mfu = {mfu}");
    }

    #[test]
    fn infinite_bandwidth_mfu_equals_compute_ceiling() {
        let m = llama();
        let w = WorkloadConfig {
            batch_size: 8,
            input_len: 64,
            output_len: 4,
        };
        let mut dev = l40s();
        dev.mem_bandwidth = 1e30;
        dev.mem_capacity = u64::MAX;
        dev.perf_per_bw = None;
        let knobs = SimKnobs {
            host_step_overhead_s: 0.0,
            ..SimKnobs::default()
        };
        let topo = Topology::gpu_only(dev);
        let policy = SimPolicy {
            offload: false,
            num_subbatches: 1,
            ..SimPolicy::default()
        };
        let (_t, rep) = simulate(&m, &w, &topo, &policy, &knobs).unwrap();
        // Numerator uses the mean context; the run's attention cost varies
        // with the growing context, so allow rounding slack.
        let mfu = mfu_projection(&rep, &m, &w, &topo.gpu);
        assert!(
            (mfu - knobs.efficiency.compute).abs() < 1e-3,
            "mfu = {mfu} vs {}",
            knobs.efficiency.compute
        );
    }
}
