//! `hpusim attn-check`: engine-vs-oracle equivalence over randomized head
//! tasks, with a per-shape max-error table.

use crate::output::{num, out_path, write_atomic};
use crate::EXIT_TOLERANCE;
use anyhow::{Context, Result};
use half::f16;
use hpusim_core::attention::{attend, oracle, HeadTask, MAX_GROUP_SIZE};
use hpusim_core::kvcache::{KvLayout, KvStore};
use hpusim_core::ModelConfig;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

pub const MAX_ABS_TOLERANCE: f64 = 2e-3;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Randomized tasks to run.
    #[arg(long, default_value_t = 1000)]
    pub cases: u64,
    /// Head dimensions to sample from, comma separated.
    #[arg(long, default_value = "8,64,128")]
    pub dims: String,
    /// Longest sampled sequence.
    #[arg(long, default_value_t = 4096)]
    pub max_len: u64,
    /// Largest sampled query group.
    #[arg(long, default_value_t = MAX_GROUP_SIZE)]
    pub max_group: u64,
    /// Dump the first N cases as binary test vectors (q/k/v half-precision
    /// little-endian plus the oracle's expected output in f64).
    #[arg(long, default_value_t = 0)]
    pub dump: u64,
    /// Interleaved ports of the emulated KV store.
    #[arg(long, default_value_t = 8)]
    pub ports: u64,
    #[arg(long, default_value = "out/attn-check")]
    pub out: PathBuf,
}

fn dump_f16(path: &std::path::Path, vals: &[f16]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 2);
    for v in vals {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn dump_f64(path: &std::path::Path, vals: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn model_for(d: u64) -> ModelConfig {
    ModelConfig {
        name: format!("check-d{d}"),
        num_layers: 1,
        hidden_dim: d,
        num_q_heads: 1,
        num_kv_heads: 1,
        head_dim: d,
        ffn_dim: 4,
        bytes_per_param: 2,
        total_params: 1,
        lm_head_vocab: None,
    }
}

fn rand_f16s(rng: &mut ChaCha8Rng, n: usize) -> Vec<f16> {
    (0..n)
        .map(|_| f16::from_f32(rng.random_range(-1.0f32..1.0)))
        .collect()
}

struct ShapeStats {
    cases: u64,
    max_abs: f64,
}

pub fn run(args: &Args) -> Result<i32> {
    anyhow::ensure!(args.cases >= 1, "--cases must be at least 1");
    anyhow::ensure!(
        args.max_group >= 1 && args.max_group <= MAX_GROUP_SIZE,
        "--max-group {} exceeds the engine's GQA limit of {MAX_GROUP_SIZE}",
        args.max_group
    );
    let dims: Vec<u64> = args
        .dims
        .split(',')
        .map(|s| s.trim().parse::<u64>().context("bad dim"))
        .collect::<Result<_>>()?;
    anyhow::ensure!(
        !dims.is_empty() && dims.iter().all(|&d| d >= 1),
        "empty dims"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut stats: BTreeMap<u64, ShapeStats> = BTreeMap::new();
    let mut worst: f64 = 0.0;
    let mut exact_single_token = true;

    for case in 0..args.cases {
        let d = *dims.choose(&mut rng).unwrap();
        let g = rng.random_range(1..=args.max_group);
        // Log-uniform lengths: plenty of short tasks, some at the limit.
        let len_exp = rng.random_range(0.0..(args.max_len as f64).log2());
        let len = (2f64.powf(len_exp).round() as u64).clamp(1, args.max_len);

        let m = model_for(d);
        let region = (64 * args.ports) * (args.max_len * 128 * 4 / (64 * args.ports) + 1);
        let mut store = KvStore::new(
            KvLayout::new(args.ports, region)
                .map_err(|e| anyhow::anyhow!("bad port count: {e}"))?,
        );
        let slot = store
            .alloc_sequence(&m, len, 1)
            .context("check region too small")?;

        let history = len - 1;
        let mut k_hist = Vec::with_capacity(history as usize);
        let mut v_hist = Vec::with_capacity(history as usize);
        for _ in 0..history {
            let k = rand_f16s(&mut rng, d as usize);
            let v = rand_f16s(&mut rng, d as usize);
            store.append_token(slot, &k, &v).unwrap();
            k_hist.push(k);
            v_hist.push(v);
        }
        let task = HeadTask {
            group_size: g,
            head_dim: d,
            seq_len: len,
            q: rand_f16s(&mut rng, (g * d) as usize),
            kv_slot: slot,
            layer: 0,
            kv_head: 0,
            k_new: rand_f16s(&mut rng, d as usize),
            v_new: rand_f16s(&mut rng, d as usize),
        };
        let got = attend(&task, &mut store)
            .map_err(|e| anyhow::anyhow!("engine rejected case {case}: {e}"))?;

        let mut k64: Vec<f64> = k_hist.iter().flatten().map(|x| x.to_f64()).collect();
        let mut v64: Vec<f64> = v_hist.iter().flatten().map(|x| x.to_f64()).collect();
        k64.extend(task.k_new.iter().map(|x| x.to_f64()));
        v64.extend(task.v_new.iter().map(|x| x.to_f64()));
        let q64: Vec<f64> = task.q.iter().map(|x| x.to_f64()).collect();
        let want = oracle::attention_f64(&q64, &k64, &v64, g as usize, d as usize, len as usize);

        if case < args.dump {
            let vecs = args.out.join("vectors");
            let stem = format!("case{case:03}_g{g}_d{d}_l{len}");
            dump_f16(&vecs.join(format!("{stem}.q.bin")), &task.q)?;
            let k_all: Vec<f16> = k_hist
                .iter()
                .flatten()
                .chain(task.k_new.iter())
                .copied()
                .collect();
            let v_all: Vec<f16> = v_hist
                .iter()
                .flatten()
                .chain(task.v_new.iter())
                .copied()
                .collect();
            dump_f16(&vecs.join(format!("{stem}.k.bin")), &k_all)?;
            dump_f16(&vecs.join(format!("{stem}.v.bin")), &v_all)?;
            dump_f64(&vecs.join(format!("{stem}.expected.bin")), &want)?;
        }

        let mut case_max = 0.0f64;
        for (a, b) in got.out.iter().zip(&want) {
            case_max = case_max.max((a.to_f64() - b).abs());
        }
        if len == 1 {
            // Single-token attention must return v_new bit-exactly.
            for h in 0..g as usize {
                for i in 0..d as usize {
                    if got.out[h * d as usize + i].to_bits() != task.v_new[i].to_bits() {
                        exact_single_token = false;
                    }
                }
            }
        }
        worst = worst.max(case_max);
        let entry = stats.entry(d).or_insert(ShapeStats {
            cases: 0,
            max_abs: 0.0,
        });
        entry.cases += 1;
        entry.max_abs = entry.max_abs.max(case_max);
    }

    let mut csv = String::from("head_dim,cases,max_abs_err,tolerance,pass\n");
    for (d, s) in &stats {
        writeln!(
            csv,
            "{},{},{},{},{}",
            d,
            s.cases,
            num(s.max_abs),
            num(MAX_ABS_TOLERANCE),
            s.max_abs <= MAX_ABS_TOLERANCE
        )?;
    }
    write_atomic(&out_path(&args.out, "attn_check.csv"), csv.as_bytes())?;

    let pass = worst <= MAX_ABS_TOLERANCE && exact_single_token;
    println!(
        "attn-check: {} cases, max abs err {:.3e} (tolerance {:.0e}), single-token exact: {} -> {}",
        args.cases,
        worst,
        MAX_ABS_TOLERANCE,
        exact_single_token,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { EXIT_TOLERANCE })
}
