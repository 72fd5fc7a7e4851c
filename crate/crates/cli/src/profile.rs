//! `hpusim profile`: roofline CSVs, OI tables, MFU/MBU curves, and the
//! crossover batch for a device/model pair.

use crate::output::{num, out_path, parse_batches, write_atomic};
use anyhow::{Context, Result};
use hpusim_core::config::{resolve_device, resolve_model};
use hpusim_core::model::{attention_step_work, down_projection_work, KernelWork};
use hpusim_core::roofline::{crossover_batch, estimate_with, Crossover, Efficiency};
use hpusim_core::{DeviceSpec, ModelConfig};
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Device preset name.
    #[arg(long, default_value = "a100-pcie")]
    pub device: String,
    /// Model preset name.
    #[arg(long, default_value = "llama2-7b")]
    pub model: String,
    /// Batch sweep: "1..512" or "1,2,4,8".
    #[arg(long, default_value = "1..512")]
    pub batches: String,
    /// Context length for the attention kernel rows.
    #[arg(long, default_value_t = 2048)]
    pub ctx: u64,
    /// Output directory.
    #[arg(long, default_value = "out/profile")]
    pub out: PathBuf,
}

struct KernelRow {
    batch: u64,
    work: KernelWork,
}

fn kernel_csv(rows: &[KernelRow], dev: &DeviceSpec, eff: Efficiency) -> Result<String> {
    let mut csv = String::from("batch,oi,time_s,bound,mfu,mbu\n");
    for row in rows {
        let est = estimate_with(&row.work, dev, eff)?;
        let mfu = est.achieved_flops / dev.peak_flops;
        let mbu = est.achieved_bw / dev.mem_bandwidth;
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.batch,
            num(est.oi),
            num(est.time_s),
            est.bound,
            num(mfu),
            num(mbu)
        )?;
    }
    Ok(csv)
}

pub fn run(args: &Args) -> Result<i32> {
    let dev = resolve_device(&args.device)?;
    let model: ModelConfig = resolve_model(&args.model)?;
    let batches = parse_batches(&args.batches).context("--batches")?;
    let eff = Efficiency::default();

    let mk = |f: &dyn Fn(u64) -> KernelWork| -> Vec<KernelRow> {
        batches
            .iter()
            .map(|&b| KernelRow {
                batch: b,
                work: f(b),
            })
            .collect()
    };
    let ideal = mk(&|b| down_projection_work(&model, b, true));
    let measured = mk(&|b| down_projection_work(&model, b, false));
    let gemv = mk(&|b| attention_step_work(&model, b, args.ctx));

    write_atomic(
        &out_path(&args.out, "gemm_ideal.csv"),
        kernel_csv(&ideal, &dev, eff)?.as_bytes(),
    )?;
    write_atomic(
        &out_path(&args.out, "gemm_measured.csv"),
        kernel_csv(&measured, &dev, eff)?.as_bytes(),
    )?;
    write_atomic(
        &out_path(&args.out, "gemv.csv"),
        kernel_csv(&gemv, &dev, eff)?.as_bytes(),
    )?;

    let fmt_crossover = |c: Crossover| match c {
        Crossover::Batch(b) => b.to_string(),
        Crossover::Unreachable => "unreachable".to_string(),
    };
    let cross_ideal = crossover_batch(&model, &dev, true);
    let cross_measured = crossover_batch(&model, &dev, false);
    let mut crossover = String::from("device,perf_per_bw,kernel,crossover_batch\n");
    writeln!(
        crossover,
        "{},{},gemm_ideal,{}",
        dev.name,
        num(dev.perf_per_bw()),
        fmt_crossover(cross_ideal)
    )?;
    writeln!(
        crossover,
        "{},{},gemm_measured,{}",
        dev.name,
        num(dev.perf_per_bw()),
        fmt_crossover(cross_measured)
    )?;
    write_atomic(&out_path(&args.out, "crossover.csv"), crossover.as_bytes())?;

    println!(
        "{}: perf_per_bw {:.1} (derived {:.1}); crossover weights-only {}, with activations {}",
        dev.name,
        dev.perf_per_bw(),
        dev.derived_perf_per_bw(),
        fmt_crossover(cross_ideal),
        fmt_crossover(cross_measured),
    );
    println!(
        "attention oi = {} (group size {})",
        num(attention_step_work(&model, 1, args.ctx).oi_f64()),
        model.group_size()
    );
    Ok(0)
}
