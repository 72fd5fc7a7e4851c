//! `hpusim capacity`: max-batch table per device and offload setting.

use crate::output::{out_path, write_atomic};
use crate::EXIT_OOM;
use anyhow::{Context, Result};
use hpusim_core::config::{resolve_device, resolve_model};
use hpusim_core::kvcache::{capacity_report, CapacityKnobs};
use hpusim_core::WorkloadConfig;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// GPU device preset.
    #[arg(long, default_value = "l40s")]
    pub device: String,
    /// Model preset.
    #[arg(long, default_value = "llama2-7b")]
    pub model: String,
    /// Total context per sequence (input plus output).
    #[arg(long, default_value_t = 2048)]
    pub ctx: u64,
    /// Fractions of each sequence's KV held off-GPU, comma separated.
    #[arg(long, default_value = "0")]
    pub offload_fractions: String,
    /// HPU preset backing the offloaded pool.
    #[arg(long)]
    pub hpu: Option<String>,
    /// Number of HPUs in the pool.
    #[arg(long, default_value_t = 0)]
    pub hpu_count: u64,
    /// Batch size whose fit is checked for the oom column.
    #[arg(long, default_value_t = 16)]
    pub batch: u64,
    /// Output directory.
    #[arg(long, default_value = "out/capacity")]
    pub out: PathBuf,
}

pub fn run(args: &Args) -> Result<i32> {
    let dev = resolve_device(&args.device)?;
    let model = resolve_model(&args.model)?;
    anyhow::ensure!(
        args.ctx >= 2,
        "--ctx must cover at least one input and one output token"
    );
    let workload = WorkloadConfig {
        batch_size: args.batch,
        input_len: args.ctx / 2,
        output_len: args.ctx - args.ctx / 2,
    };
    let pool = match &args.hpu {
        Some(name) => vec![resolve_device(name)?; args.hpu_count as usize],
        None => Vec::new(),
    };
    let fractions: Vec<f64> = args
        .offload_fractions
        .split(',')
        .map(|s| s.trim().parse::<f64>().context("bad offload fraction"))
        .collect::<Result<_>>()?;
    let knobs = CapacityKnobs::default();

    let mut csv = String::from(
        "device,ctx,offload_fraction,batch,max_batch,oom,weights_bytes,kv_bytes,activation_reserve,device_capacity\n",
    );
    let mut any_oom = false;
    for &frac in &fractions {
        anyhow::ensure!((0.0..=1.0).contains(&frac), "offload fraction out of range");
        let rep = capacity_report(&dev, &model, &workload, frac, &pool, &knobs);
        any_oom |= rep.oom;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            dev.name,
            args.ctx,
            frac,
            args.batch,
            rep.max_batch,
            rep.oom,
            rep.weights_bytes,
            rep.kv_bytes,
            rep.activation_reserve,
            rep.device_capacity
        )?;
        println!(
            "{} ctx {} offload {:.2}: max_batch {} (batch {} {})",
            dev.name,
            args.ctx,
            frac,
            rep.max_batch,
            args.batch,
            if rep.oom { "OOM" } else { "ok" }
        );
    }
    write_atomic(&out_path(&args.out, "capacity.csv"), csv.as_bytes())?;
    Ok(if any_oom { EXIT_OOM } else { 0 })
}
