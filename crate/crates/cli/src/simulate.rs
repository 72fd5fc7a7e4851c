//! `hpusim simulate`: runs generation over a batch sweep, emitting per-run
//! timeline CSVs, report JSONs, and a normalized summary table.

use crate::output::{num, out_path, parse_batches, write_atomic};
use crate::EXIT_OOM;
use anyhow::{Context, Result};
use hpusim_core::config::{load_scenario, resolve_device, resolve_model, Scenario};
use hpusim_core::metrics::{energy_report, mfu_projection, EnergyModel};
use hpusim_core::sim::{balance_report, simulate, BalanceReport, SimError};
use hpusim_core::{Partition, SimKnobs, SimPolicy, StepReport, Timeline, Topology, WorkloadConfig};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Scenario TOML; flags below are ignored when set (except --batches,
    /// --out, --format).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "llama2-7b")]
    pub model: String,
    #[arg(long, default_value = "l40s")]
    pub gpu: String,
    /// HPU preset; omit for a GPU-only run.
    #[arg(long)]
    pub hpu: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub hpu_count: u64,
    /// Batch sweep: "16,32,64" or "1..64". Overrides the workload's batch.
    #[arg(long)]
    pub batches: Option<String>,
    /// Total-context sweep, comma separated; each value c runs with
    /// input c/2 and output c-c/2, overriding --input-len/--output-len.
    #[arg(long)]
    pub ctx_list: Option<String>,
    /// HPU-count sweep, comma separated; overrides --hpu-count.
    #[arg(long)]
    pub hpu_counts: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub input_len: u64,
    #[arg(long, default_value_t = 16)]
    pub output_len: u64,
    #[arg(long, default_value_t = 2)]
    pub subbatches: u64,
    #[arg(long, value_parser = ["batch", "head"], default_value = "batch")]
    pub partition: String,
    /// Keep attention on the GPU.
    #[arg(long)]
    pub no_offload: bool,
    /// GPU-only batch used as the normalization denominator.
    #[arg(long, default_value_t = 16)]
    pub baseline_batch: u64,
    #[arg(long, value_parser = ["csv", "json", "both"], default_value = "both")]
    pub format: String,
    #[arg(long, default_value = "out/simulate")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RunReport<'a> {
    schema_version: u32,
    model: &'a str,
    /// Parameter count behind the weight footprint and per-token FLOPs;
    /// surfaced because published counts for the same model family differ.
    total_params: u64,
    gpu: &'a str,
    hpus: usize,
    batch_size: u64,
    input_len: u64,
    output_len: u64,
    report: &'a StepReport,
    /// Per-step GPU-vs-HPU stage times; the knob the batch/context tuning
    /// turns is making these match.
    balance: BalanceReport,
    watts: f64,
    tokens_per_s_per_watt: f64,
    mfu: f64,
    normalized_tokens_per_s: Option<f64>,
    normalized_efficiency: Option<f64>,
}

fn timeline_csv(t: &Timeline) -> String {
    let mut csv = String::from("resource,kind,start_ns,end_ns,step,subbatch\n");
    for e in t.sorted_events() {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            e.resource, e.kind, e.start_ns, e.end_ns, e.step, e.subbatch
        )
        .unwrap();
    }
    csv
}

fn scenario_from_args(args: &Args) -> Result<Scenario> {
    if let Some(path) = &args.config {
        return load_scenario(path).context("loading scenario config");
    }
    let gpu = resolve_device(&args.gpu)?;
    let hpus = match &args.hpu {
        Some(name) => vec![resolve_device(name)?; args.hpu_count as usize],
        None => Vec::new(),
    };
    let offload = !args.no_offload && !hpus.is_empty();
    Ok(Scenario {
        model: resolve_model(&args.model)?,
        workload: WorkloadConfig {
            batch_size: 16,
            input_len: args.input_len,
            output_len: args.output_len,
        },
        gpu,
        hpus,
        policy: SimPolicy {
            num_subbatches: args.subbatches,
            partition: if args.partition == "head" {
                Partition::HeadParallel
            } else {
                Partition::BatchParallel
            },
            offload,
            ..SimPolicy::default()
        },
        knobs: SimKnobs::default(),
    })
}

/// One point of the (batch, ctx, hpu count) sweep grid.
struct SweepPoint {
    batch: u64,
    workload: WorkloadConfig,
    hpus: usize,
    suffix: String,
    label: String,
}

fn sweep_points(args: &Args, scenario: &Scenario) -> Result<Vec<SweepPoint>> {
    let batches = match &args.batches {
        Some(spec) => parse_batches(spec).context("--batches")?,
        None => vec![scenario.workload.batch_size],
    };
    let ctxs: Vec<Option<u64>> = match &args.ctx_list {
        Some(spec) => parse_batches(spec)
            .context("--ctx-list")?
            .into_iter()
            .map(Some)
            .collect(),
        None => vec![None],
    };
    let hpu_counts: Vec<Option<u64>> = match &args.hpu_counts {
        Some(spec) => {
            anyhow::ensure!(
                !scenario.hpus.is_empty(),
                "--hpu-counts needs an HPU preset (--hpu or the scenario's [hpu] table)"
            );
            parse_batches(spec)
                .context("--hpu-counts")?
                .into_iter()
                .map(Some)
                .collect()
        }
        None => vec![None],
    };

    let mut points = Vec::new();
    for &batch in &batches {
        for &ctx in &ctxs {
            for &count in &hpu_counts {
                let workload = match ctx {
                    Some(c) => {
                        anyhow::ensure!(c >= 2, "--ctx-list values need at least 2 tokens");
                        WorkloadConfig {
                            batch_size: batch,
                            input_len: c / 2,
                            output_len: c - c / 2,
                        }
                    }
                    None => WorkloadConfig {
                        batch_size: batch,
                        ..scenario.workload
                    },
                };
                let hpus = count.map(|c| c as usize).unwrap_or(scenario.hpus.len());
                let mut suffix = format!("b{batch}");
                let mut label = format!("batch {batch}");
                if let Some(c) = ctx {
                    suffix.push_str(&format!("_c{c}"));
                    label.push_str(&format!(" ctx {c}"));
                }
                if let Some(c) = count {
                    suffix.push_str(&format!("_h{c}"));
                    label.push_str(&format!(" hpus {c}"));
                }
                points.push(SweepPoint {
                    batch,
                    workload,
                    hpus,
                    suffix,
                    label,
                });
            }
        }
    }
    Ok(points)
}

pub fn run(args: &Args) -> Result<i32> {
    let scenario = scenario_from_args(args)?;
    let points = sweep_points(args, &scenario)?;

    // GPU-only denominators for the normalized columns, one per workload
    // shape in the sweep.
    let baseline_topo = Topology::gpu_only(scenario.gpu.clone());
    let baseline_policy = SimPolicy {
        offload: false,
        num_subbatches: 1,
        ..scenario.policy
    };
    let mut baselines: std::collections::BTreeMap<(u64, u64), (StepReport, f64)> =
        Default::default();
    for p in &points {
        let key = (p.workload.input_len, p.workload.output_len);
        if baselines.contains_key(&key) {
            continue;
        }
        let wl = WorkloadConfig {
            batch_size: args.baseline_batch,
            ..p.workload
        };
        if let Ok((_, rep)) = simulate(
            &scenario.model,
            &wl,
            &baseline_topo,
            &baseline_policy,
            &scenario.knobs,
        ) {
            let eff = energy_report(&rep, &EnergyModel::from_topology(&baseline_topo));
            baselines.insert(key, (rep, eff.tokens_per_s_per_watt));
        }
    }

    let mut summary = String::from(
        "batch,ctx,hpus,status,tokens_per_s,normalized,step_time_s,gpu_linear,hpu_attention,network,merge,idle,watts,tokens_per_s_per_watt,eff_normalized\n",
    );
    let mut any_oom = false;

    for point in &points {
        let mut hpus: Vec<_> = scenario.hpus.iter().take(point.hpus).cloned().collect();
        if let Some(first) = scenario.hpus.first() {
            hpus.resize(point.hpus, first.clone());
        }
        let topo = Topology::new(scenario.gpu.clone(), hpus, &scenario.knobs);
        let em = EnergyModel::from_topology(&topo);
        let ctx = point.workload.max_context();
        let baseline = baselines.get(&(point.workload.input_len, point.workload.output_len));
        match simulate(
            &scenario.model,
            &point.workload,
            &topo,
            &scenario.policy,
            &scenario.knobs,
        ) {
            Ok((timeline, report)) => {
                let mut eff = energy_report(&report, &em);
                let (norm_tps, norm_eff) = match baseline {
                    Some((base_rep, base_eff)) => {
                        let ratio = if *base_eff > 0.0 {
                            eff.tokens_per_s_per_watt / base_eff
                        } else {
                            f64::INFINITY
                        };
                        eff.normalized_vs =
                            Some((format!("gpu-only@{}", args.baseline_batch), ratio));
                        (
                            Some(report.tokens_per_s / base_rep.tokens_per_s),
                            Some(ratio),
                        )
                    }
                    None => (None, None),
                };
                let mfu = mfu_projection(&report, &scenario.model, &point.workload, &scenario.gpu);
                if args.format != "json" {
                    write_atomic(
                        &out_path(&args.out, &format!("timeline_{}.csv", point.suffix)),
                        timeline_csv(&timeline).as_bytes(),
                    )?;
                }
                if args.format != "csv" {
                    let run = RunReport {
                        schema_version: 1,
                        model: &scenario.model.name,
                        total_params: scenario.model.total_params,
                        gpu: &scenario.gpu.name,
                        hpus: point.hpus,
                        batch_size: point.batch,
                        input_len: point.workload.input_len,
                        output_len: point.workload.output_len,
                        report: &report,
                        balance: balance_report(
                            &scenario.model,
                            &point.workload,
                            &topo,
                            &scenario.policy,
                            &scenario.knobs,
                        ),
                        watts: eff.watts,
                        tokens_per_s_per_watt: eff.tokens_per_s_per_watt,
                        mfu,
                        normalized_tokens_per_s: norm_tps,
                        normalized_efficiency: norm_eff,
                    };
                    write_atomic(
                        &out_path(&args.out, &format!("report_{}.json", point.suffix)),
                        serde_json::to_string_pretty(&run)?.as_bytes(),
                    )?;
                }
                writeln!(
                    summary,
                    "{},{},{},ok,{},{},{},{},{},{},{},{},{},{},{}",
                    point.batch,
                    ctx,
                    point.hpus,
                    num(report.tokens_per_s),
                    norm_tps.map(num).unwrap_or_default(),
                    num(report.step_time_s),
                    num(report.breakdown.gpu_linear),
                    num(report.breakdown.hpu_attention),
                    num(report.breakdown.network),
                    num(report.breakdown.merge),
                    num(report.breakdown.idle),
                    num(eff.watts),
                    num(eff.tokens_per_s_per_watt),
                    norm_eff.map(num).unwrap_or_default(),
                )?;
                println!(
                    "{}: {:.1} tok/s{}  network {:.1}%  {:.1} W",
                    point.label,
                    report.tokens_per_s,
                    norm_tps
                        .map(|r| format!(" ({r:.2}x baseline)"))
                        .unwrap_or_default(),
                    report.breakdown.network * 100.0,
                    eff.watts
                );
            }
            Err(SimError::Oom { report, requested }) => {
                any_oom = true;
                writeln!(summary, "{requested},{ctx},{},oom,,,,,,,,,,,", point.hpus)?;
                println!(
                    "{}: OOM (max batch {}, weights {} + kv {} + reserve {} > capacity {})",
                    point.label,
                    report.max_batch,
                    report.weights_bytes,
                    report.kv_bytes,
                    report.activation_reserve,
                    report.device_capacity
                );
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_atomic(&out_path(&args.out, "summary.csv"), summary.as_bytes())?;
    Ok(if any_oom { EXIT_OOM } else { 0 })
}
