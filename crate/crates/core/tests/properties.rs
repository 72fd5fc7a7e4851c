//! Property tests for the model's structural invariants: exact OI identities,
//! interleaver bijection, store read-after-write, wire-format round-trips,
//! transfer-time monotonicity, crossover/ceil identity, and timeline
//! structure on randomized scenarios.

use half::f16;
use hpusim_core::kvcache::{interleave, KvLayout, KvStore};
use hpusim_core::model::{
    attention_step_work, linear_step_work, DeviceKind, DeviceSpec, ModelConfig, WorkloadConfig,
};
use hpusim_core::protocol::{
    decode_chunk, encode_chunk, transfer_time, Chunk, Descriptor, LinkModel,
};
use hpusim_core::roofline::{crossover_batch, Crossover};
use hpusim_core::sim::{partition_tasks, simulate, Partition, SimKnobs, SimPolicy, Topology};
use num_rational::Ratio;
use proptest::prelude::*;

fn arb_model() -> impl Strategy<Value = ModelConfig> {
    (
        1u64..=8,                                   // layers
        1u64..=8,                                   // kv heads
        1u64..=8,                                   // group
        prop::sample::select(vec![2u64, 4, 8, 16]), // head dim
        1u64..=64,                                  // ffn
    )
        .prop_map(|(layers, kv, g, d, ffn)| {
            let q = kv * g;
            ModelConfig {
                name: "prop".into(),
                num_layers: layers,
                hidden_dim: q * d,
                num_q_heads: q,
                num_kv_heads: kv,
                head_dim: d,
                ffn_dim: ffn,
                bytes_per_param: 2,
                total_params: layers * (q * d) * (q * d + ffn),
                lm_head_vocab: None,
            }
        })
}

fn arb_device() -> impl Strategy<Value = DeviceSpec> {
    (1e11f64..5e12, 1f64..1000.0).prop_map(|(bw, ratio)| DeviceSpec {
        name: "prop-dev".into(),
        kind: DeviceKind::Gpu,
        mem_bandwidth: bw,
        mem_capacity: 1 << 40,
        peak_flops: bw * ratio,
        link_bandwidth: 16e9,
        link_latency: 5e-6,
        tdp: 300.0,
        perf_per_bw: None,
        active_fraction: 0.8,
        host_routed: false,
    })
}

fn arb_descriptor() -> impl Strategy<Value = Descriptor> {
    (
        any::<u32>(),
        any::<u32>(),
        any::<u64>(),
        1u32..=4096,
        prop::sample::select(vec![8u16, 64, 128]),
        1u16..=8,
        any::<u16>(),
    )
        .prop_map(|(head_id, batch_id, addr, seq_len, d, g, seed)| {
            let n = |count: usize, salt: u16| -> Vec<f16> {
                (0..count)
                    .map(|i| {
                        f16::from_bits(
                            seed.wrapping_mul(2654435761u32 as u16)
                                .wrapping_add(salt)
                                .wrapping_add(i as u16),
                        )
                    })
                    .collect()
            };
            Descriptor {
                head_id,
                batch_id,
                kv_base_addr: addr,
                seq_len,
                head_dim: d,
                group_size: g,
                q: n(g as usize * d as usize, 1),
                k_new: n(d as usize, 2),
                v_new: n(d as usize, 3),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Weights-only linear OI equals the batch exactly, in rational arithmetic.
    #[test]
    fn linear_weights_only_oi_is_batch(m in arb_model(), batch in 1u64..=4096) {
        let w = linear_step_work(&m, batch, true);
        prop_assert_eq!(w.oi(), Ratio::new(batch as u128, 1u128));
    }

    /// Attention OI equals the query group size for every batch and context.
    #[test]
    fn attention_oi_is_group_size(m in arb_model(), batch in 1u64..=512, ctx in 1u64..=8192) {
        let w = attention_step_work(&m, batch, ctx);
        prop_assert_eq!(w.oi(), Ratio::new(m.group_size() as u128, 1u128));
    }

    /// Weights-only crossover is ceil(perf_per_bw) since OI == batch.
    #[test]
    fn crossover_is_ceil_of_ratio(m in arb_model(), dev in arb_device()) {
        let want = dev.perf_per_bw().ceil() as u64;
        prop_assert_eq!(crossover_batch(&m, &dev, true), Crossover::Batch(want));
    }

    /// The interleaver is a bijection region -> ports x offsets.
    #[test]
    fn interleave_bijection(ports in prop::sample::select(vec![1u64, 2, 4, 8]), blocks in 1u64..=64) {
        let region = 64 * ports * blocks;
        let layout = KvLayout::new(ports, region).unwrap();
        let per_port = region / ports;
        let mut seen = vec![false; region as usize];
        for addr in 0..region {
            let (port, offset) = interleave(addr, &layout).unwrap();
            prop_assert!(port < ports && offset < per_port);
            let flat = (port * per_port + offset) as usize;
            prop_assert!(!seen[flat]);
            seen[flat] = true;
        }
    }

    /// Read-after-write returns bit-identical payloads for any write order.
    #[test]
    fn store_read_after_write_any_order(order in Just(()).prop_perturb(|_, mut rng| {
        let mut idx: Vec<usize> = (0..24).collect();
        for i in (1..idx.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        idx
    }), seed in any::<u16>()) {
        let m = ModelConfig {
            name: "store".into(),
            num_layers: 2,
            hidden_dim: 12,
            num_q_heads: 3,
            num_kv_heads: 3,
            head_dim: 4,
            ffn_dim: 8,
            bytes_per_param: 2,
            total_params: 100,
            lm_head_vocab: None,
        };
        let mut store = KvStore::new(KvLayout::new(4, 1 << 14).unwrap());
        let a = store.alloc_sequence(&m, 2, m.num_kv_heads).unwrap();
        let b = store.alloc_sequence(&m, 2, m.num_kv_heads).unwrap();
        // 24 disjoint rows: (slot, layer, head, token)
        let coords: Vec<(u64, u64, u64, u64)> = [a, b]
            .iter()
            .flat_map(|&s| (0..2u64).flat_map(move |l| (0..3u64).flat_map(move |h| (0..2u64).map(move |t| (s, l, h, t)))))
            .collect();
        let row = |i: usize, which: u16| -> Vec<f16> {
            (0..4).map(|k| f16::from_bits(seed.wrapping_add((i as u16) * 31 + which * 7 + k))).collect()
        };
        for &i in &order {
            let (s, l, h, t) = coords[i];
            store.write_kv_row(s, l, h, t, &row(i, 0), &row(i, 1)).unwrap();
        }
        for (i, &(s, l, h, t)) in coords.iter().enumerate() {
            let k = store.read_k_head(s, l, h, t + 1).unwrap();
            let v = store.read_v_head(s, l, h, t + 1).unwrap();
            let kt = &k[(t * 4) as usize..(t * 4 + 4) as usize];
            let vt = &v[(t * 4) as usize..(t * 4 + 4) as usize];
            let wantk = row(i, 0);
            let wantv = row(i, 1);
            for j in 0..4 {
                prop_assert_eq!(kt[j].to_bits(), wantk[j].to_bits());
                prop_assert_eq!(vt[j].to_bits(), wantv[j].to_bits());
            }
        }
    }

    /// Encode/decode is a bijection on valid frames.
    #[test]
    fn chunk_roundtrip(descs in prop::collection::vec(arb_descriptor(), 1..=16)) {
        let chunk = Chunk::new(descs).unwrap();
        let bytes = encode_chunk(&chunk).unwrap();
        let back = decode_chunk(&bytes).unwrap();
        prop_assert_eq!(encode_chunk(&back).unwrap(), bytes);
    }

    /// transfer_time is monotone in bytes and messages.
    #[test]
    fn transfer_monotone(
        bw in 1e9f64..1e12,
        base in 0f64..1e-4,
        pmo in 0f64..1e-5,
        knee_kib in 64u64..=4096,
        b0 in 0u64..=(8 << 20),
        db in 0u64..=(1 << 20),
        msgs in 0u64..1000,
    ) {
        let link = LinkModel {
            bandwidth: bw,
            base_latency: base,
            per_message_overhead: pmo,
            small_transfer_knee: knee_kib * 1024,
        };
        prop_assert!(link.validate());
        prop_assert!(transfer_time(b0 + db, msgs, &link) >= transfer_time(b0, msgs, &link));
        prop_assert!(transfer_time(b0, msgs + 1, &link) >= transfer_time(b0, msgs, &link));
    }

    /// Every attention task lands on exactly one device, shares balanced.
    #[test]
    fn partition_covers_once(batch in 1u64..=128, kv in 1u64..=32, hpus in 1usize..=8) {
        for p in [Partition::BatchParallel, Partition::HeadParallel] {
            let shares = partition_tasks(batch, kv, p, hpus);
            prop_assert_eq!(shares.len(), hpus);
            match p {
                Partition::BatchParallel => {
                    prop_assert_eq!(shares.iter().map(|s| s.seqs).sum::<u64>(), batch);
                    let max = shares.iter().map(|s| s.seqs).max().unwrap();
                    let min = shares.iter().map(|s| s.seqs).min().unwrap();
                    prop_assert!(max - min <= 1);
                    prop_assert!(shares.iter().all(|s| s.kv_heads == kv));
                }
                Partition::HeadParallel => {
                    prop_assert_eq!(shares.iter().map(|s| s.kv_heads).sum::<u64>(), kv);
                    let max = shares.iter().map(|s| s.kv_heads).max().unwrap();
                    let min = shares.iter().map(|s| s.kv_heads).min().unwrap();
                    prop_assert!(max - min <= 1);
                    prop_assert!(shares.iter().all(|s| s.seqs == batch));
                }
            }
        }
    }

    /// Randomized scenarios: no resource overlap, causal order along the
    /// recorded chain, and bitwise-deterministic reruns.
    #[test]
    fn timeline_structure(
        batch in 1u64..=6,
        hpus in 0usize..=3,
        input in 4u64..=64,
        output in 1u64..=4,
        subbatches in 1u64..=3,
        head_parallel in any::<bool>(),
        offload in any::<bool>(),
    ) {
        let m = ModelConfig {
            name: "sim-prop".into(),
            num_layers: 2,
            hidden_dim: 64,
            num_q_heads: 8,
            num_kv_heads: 4,
            head_dim: 8,
            ffn_dim: 128,
            bytes_per_param: 2,
            total_params: 200_000,
            lm_head_vocab: None,
        };
        let w = WorkloadConfig { batch_size: batch, input_len: input, output_len: output };
        let gpu = DeviceSpec {
            name: "toy-gpu".into(),
            kind: DeviceKind::Gpu,
            mem_bandwidth: 1e11,
            mem_capacity: 1 << 40,
            peak_flops: 1e13,
            link_bandwidth: 1e10,
            link_latency: 1e-6,
            tdp: 100.0,
            perf_per_bw: None,
            active_fraction: 0.8,
            host_routed: false,
        };
        let hpu = DeviceSpec {
            name: "toy-hpu".into(),
            kind: DeviceKind::Hpu,
            mem_bandwidth: 5e10,
            mem_capacity: 1 << 40,
            peak_flops: 1e11,
            link_bandwidth: 1e10,
            link_latency: 1e-6,
            tdp: 50.0,
            perf_per_bw: None,
            active_fraction: 0.2,
            host_routed: true,
        };
        let knobs = SimKnobs::default();
        let topo = Topology::new(gpu, vec![hpu; hpus], &knobs);
        let policy = SimPolicy {
            num_subbatches: subbatches,
            partition: if head_parallel { Partition::HeadParallel } else { Partition::BatchParallel },
            offload: offload && hpus > 0,
            ..SimPolicy::default()
        };
        let (t1, r1) = simulate(&m, &w, &topo, &policy, &knobs).unwrap();
        let (t2, r2) = simulate(&m, &w, &topo, &policy, &knobs).unwrap();
        prop_assert_eq!(&t1, &t2);
        prop_assert_eq!(&r1, &r2);

        let mut by_res: std::collections::BTreeMap<_, Vec<(u64, u64)>> = Default::default();
        for e in &t1.events {
            by_res.entry(e.resource).or_default().push((e.start_ns, e.end_ns));
        }
        for spans in by_res.values_mut() {
            spans.sort();
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "resource overlap {:?}", w);
            }
        }
        for (i, p) in t1.pred.iter().enumerate() {
            if let Some(p) = p {
                prop_assert!(t1.events[*p].end_ns <= t1.events[i].start_ns);
            }
        }
        prop_assert!((r1.breakdown.sum() - 1.0).abs() < 1e-9);
    }
}
