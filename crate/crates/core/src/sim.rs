//! Deterministic simulator of end-to-end generation: GPU linear phases,
//! accelerator attention phases, link transfers (optionally staged through
//! the host), sub-batch pipelining, and multi-HPU head/batch partitioning.
//!
//! The event engine is a static two-stage round-robin pipeline over integer
//! nanoseconds: each event starts at the max of its causal dependency and
//! its resource's free time, so identical inputs always produce
//! bitwise-identical timelines.

use crate::attention::{engine_throughput_model, MemUtilCurve, TaskShape};
use crate::kvcache::{capacity_report, CapacityKnobs, CapacityReport};
use crate::model::{
    attention_step_work, kv_bytes_per_token, linear_step_work, DeviceSpec, KernelLabel, KernelWork,
    ModelConfig, WorkloadConfig,
};
use crate::protocol::{transfer_time, LinkModel, DESC_HEADER_BYTES, HEADER_BYTES, MAX_DESCRIPTORS};
use crate::roofline::{estimate_with, Efficiency};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("workload does not fit: max batch {}, requested {requested}", report.max_batch)]
    Oom {
        report: CapacityReport,
        requested: u64,
    },
    #[error("infeasible policy: {0}")]
    InfeasiblePolicy(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Calibration knobs shared by the cost models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimKnobs {
    pub efficiency: Efficiency,
    pub capacity: CapacityKnobs,
    pub mem_util: MemUtilCurve,
    /// Host orchestration time per generation step (kernel launches,
    /// sampling, synchronization). Serial for the unpipelined baseline,
    /// overlapped by the sub-batch pipeline.
    pub host_step_overhead_s: f64,
    pub link_per_message_overhead_s: f64,
    pub link_small_transfer_knee: u64,
}

impl Default for SimKnobs {
    fn default() -> Self {
        SimKnobs {
            efficiency: Efficiency::default(),
            capacity: CapacityKnobs::default(),
            mem_util: MemUtilCurve::default(),
            host_step_overhead_s: 1.5e-3,
            link_per_message_overhead_s: 2e-6,
            link_small_transfer_knee: 1 << 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub gpu: DeviceSpec,
    pub hpus: Vec<DeviceSpec>,
    pub links: Vec<LinkModel>,
    /// Staging hop through the host CPU, present when any HPU lacks a
    /// direct peer link.
    pub host_hop: Option<LinkModel>,
}

impl Topology {
    /// Builds links from each HPU's spec; adds the host hop at the GPU's
    /// own link rate when any HPU is host-routed.
    pub fn new(gpu: DeviceSpec, hpus: Vec<DeviceSpec>, knobs: &SimKnobs) -> Self {
        let mk = |bw: f64, lat: f64| LinkModel {
            bandwidth: bw,
            base_latency: lat,
            per_message_overhead: knobs.link_per_message_overhead_s,
            small_transfer_knee: knobs.link_small_transfer_knee,
        };
        let links = hpus
            .iter()
            .map(|h| mk(h.link_bandwidth, h.link_latency))
            .collect();
        let host_hop = hpus
            .iter()
            .any(|h| h.host_routed)
            .then(|| mk(gpu.link_bandwidth, gpu.link_latency));
        Topology {
            gpu,
            hpus,
            links,
            host_hop,
        }
    }

    pub fn gpu_only(gpu: DeviceSpec) -> Self {
        Topology {
            gpu,
            hpus: Vec::new(),
            links: Vec::new(),
            host_hop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    BatchParallel,
    HeadParallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    pub num_subbatches: u64,
    pub partition: Partition,
    /// Host-side cost per result vector gathered under head-parallel
    /// placement.
    pub merge_overhead_s: f64,
    pub offload: bool,
}

impl Default for SimPolicy {
    fn default() -> Self {
        SimPolicy {
            num_subbatches: 2,
            partition: Partition::BatchParallel,
            merge_overhead_s: 2e-8,
            offload: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    Gpu,
    Hpu(u32),
    Link(u32),
    HostHop,
    Host,
}

impl std::fmt::Display for Resource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resource::Gpu => write!(f, "GPU"),
            Resource::Hpu(i) => write!(f, "HPU{i}"),
            Resource::Link(i) => write!(f, "LINK{i}"),
            Resource::HostHop => write!(f, "HOSTHOP"),
            Resource::Host => write!(f, "HOST"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Linear,
    Attention,
    Xfer,
    Merge,
    Dispatch,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EventKind::Linear => "Linear",
            EventKind::Attention => "Attention",
            EventKind::Xfer => "Xfer",
            EventKind::Merge => "Merge",
            EventKind::Dispatch => "Dispatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub resource: Resource,
    pub kind: EventKind,
    pub start_ns: u64,
    pub end_ns: u64,
    /// 0 = prefill, 1.. = generation steps.
    pub step: u64,
    pub subbatch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Timeline {
    pub events: Vec<Event>,
    /// Binding predecessor of each event: the event whose completion set
    /// this one's start (dependency or same-resource occupancy).
    pub pred: Vec<Option<usize>>,
}

impl Timeline {
    pub fn makespan_ns(&self) -> u64 {
        self.events.iter().map(|e| e.end_ns).max().unwrap_or(0)
    }

    /// Events sorted for export: by start, then resource, then span.
    pub fn sorted_events(&self) -> Vec<Event> {
        let mut ev = self.events.clone();
        ev.sort_by_key(|e| (e.start_ns, e.resource, e.end_ns, e.step, e.subbatch, e.kind));
        ev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Breakdown {
    pub gpu_linear: f64,
    pub hpu_attention: f64,
    pub network: f64,
    pub merge: f64,
    pub idle: f64,
}

impl Breakdown {
    pub fn sum(&self) -> f64 {
        self.gpu_linear + self.hpu_attention + self.network + self.merge + self.idle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub tokens_per_s: f64,
    /// Critical-path shares over the whole run.
    pub breakdown: Breakdown,
    /// Busy fraction per resource over the makespan.
    pub per_device_busy: Vec<(String, f64)>,
    /// Mean generation-step period.
    pub step_time_s: f64,
    pub makespan_s: f64,
    pub generated_tokens: u64,
    pub batch_size: u64,
    pub offloaded: bool,
}

/// Per-HPU share of one sub-batch's attention workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HpuShare {
    pub seqs: u64,
    pub kv_heads: u64,
}

/// Splits `batch` sequences of `kv_heads` heads across HPUs. Batch-parallel
/// assigns contiguous sequence slices (head dimension intact); head-parallel
/// assigns head slices of every sequence. Balanced: shares differ by at
/// most one, remainder round-robin from HPU 0.
pub fn partition_tasks(
    batch: u64,
    kv_heads: u64,
    partition: Partition,
    num_hpus: usize,
) -> Vec<HpuShare> {
    let n = num_hpus as u64;
    let split = |total: u64| -> Vec<u64> {
        (0..n)
            .map(|i| total / n + if i < total % n { 1 } else { 0 })
            .collect()
    };
    match partition {
        Partition::BatchParallel => split(batch)
            .into_iter()
            .map(|seqs| HpuShare { seqs, kv_heads })
            .collect(),
        Partition::HeadParallel => split(kv_heads)
            .into_iter()
            .map(|heads| HpuShare {
                seqs: batch,
                kv_heads: heads,
            })
            .collect(),
    }
}

fn ns(seconds: f64) -> u64 {
    (seconds * 1e9).round() as u64
}

/// Attention-phase time on one HPU: KV streaming at the utilization the
/// sequence length sustains, floored by the engine's compute rate.
fn hpu_attention_time(
    m: &ModelConfig,
    share: HpuShare,
    ctx: u64,
    dev: &DeviceSpec,
    knobs: &SimKnobs,
) -> f64 {
    if share.seqs == 0 || share.kv_heads == 0 {
        return 0.0;
    }
    let shape = TaskShape {
        seq_len: ctx,
        head_dim: m.head_dim,
        bytes_per_param: m.bytes_per_param,
        num_tasks: share.seqs * share.kv_heads * m.num_layers,
    };
    let mem = engine_throughput_model(&shape, dev, &knobs.mem_util).est_time_s;
    let flops =
        (4 * share.seqs * m.group_size() * share.kv_heads * ctx * m.head_dim * m.num_layers) as f64;
    let compute = flops / (dev.peak_flops * knobs.efficiency.compute);
    mem.max(compute)
}

/// Wire bytes and message count of one sub-batch share's descriptors,
/// grouped into full chunks.
fn offload_payload(m: &ModelConfig, share: HpuShare) -> (u64, u64, u64) {
    let g = m.group_size();
    let n_desc = share.seqs * share.kv_heads * m.num_layers;
    let chunks = n_desc.div_ceil(MAX_DESCRIPTORS as u64).max(1);
    let overhead = chunks * (HEADER_BYTES + 4) as u64;
    let desc_bytes = DESC_HEADER_BYTES as u64 + (g + 2) * m.head_dim * m.bytes_per_param;
    let resp_bytes = 12 + g * m.head_dim * m.bytes_per_param;
    let out = n_desc * desc_bytes + overhead;
    let back = n_desc * resp_bytes + overhead;
    (out, back, chunks)
}

/// One node of the run's dependency graph plus its scheduled span.
struct Node {
    resource: Resource,
    kind: EventKind,
    dur_ns: u64,
    step: u64,
    subbatch: u64,
    deps: Vec<usize>,
}

/// Builds the static dependency graph, then executes it with each resource
/// serving its jobs in submission (ready-time) order, the FIFO contract of
/// the links and the hardware queues.
struct Engine {
    nodes: Vec<Node>,
}

type NodeId = usize;

impl Engine {
    fn new() -> Self {
        Engine { nodes: Vec::new() }
    }

    fn node(
        &mut self,
        resource: Resource,
        kind: EventKind,
        deps: &[NodeId],
        dur_ns: u64,
        step: u64,
        subbatch: u64,
    ) -> NodeId {
        self.nodes.push(Node {
            resource,
            kind,
            dur_ns,
            step,
            subbatch,
            deps: deps.to_vec(),
        });
        self.nodes.len() - 1
    }

    fn execute(self, num_hpus: usize) -> Timeline {
        let n = self.nodes.len();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            indeg[i] = node.deps.len();
            for &d in &node.deps {
                children[d].push(i);
            }
        }

        let mut sched = Sched::new(&self.nodes, num_hpus);
        let roots: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        for i in roots {
            sched.arrive(i);
        }
        while let Some((t, j)) = sched.next_completion() {
            for &c in &children[j] {
                if t > sched.ready_time[c] {
                    sched.ready_time[c] = t;
                    sched.binding_dep[c] = Some(j);
                }
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    sched.arrive(c);
                }
            }
            sched.serve_next(self.nodes[j].resource);
        }

        let events = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| Event {
                resource: node.resource,
                kind: node.kind,
                start_ns: sched.start[i],
                end_ns: sched.end[i],
                step: node.step,
                subbatch: node.subbatch,
            })
            .collect();
        Timeline {
            events,
            pred: sched.pred,
        }
    }
}

/// Per-resource FIFO scheduler over the node graph. Jobs are served in
/// ready-time order (ties by node id), matching submission-order delivery.
struct Sched<'a> {
    nodes: &'a [Node],
    num_hpus: usize,
    ready_time: Vec<u64>,
    binding_dep: Vec<Option<usize>>,
    start: Vec<u64>,
    end: Vec<u64>,
    pred: Vec<Option<usize>>,
    free_time: Vec<u64>,
    last_job: Vec<Option<usize>>,
    busy: Vec<bool>,
    waiting: Vec<std::collections::BTreeSet<(u64, usize)>>,
    completions: std::collections::BinaryHeap<std::cmp::Reverse<(u64, usize)>>,
}

impl<'a> Sched<'a> {
    fn new(nodes: &'a [Node], num_hpus: usize) -> Self {
        let n = nodes.len();
        let num_res = 3 + 2 * num_hpus;
        Sched {
            nodes,
            num_hpus,
            ready_time: vec![0; n],
            binding_dep: vec![None; n],
            start: vec![0; n],
            end: vec![0; n],
            pred: vec![None; n],
            free_time: vec![0; num_res],
            last_job: vec![None; num_res],
            busy: vec![false; num_res],
            waiting: vec![Default::default(); num_res],
            completions: Default::default(),
        }
    }

    fn res_index(&self, r: Resource) -> usize {
        match r {
            Resource::Gpu => 0,
            Resource::Host => 1,
            Resource::HostHop => 2,
            Resource::Hpu(i) => 3 + i as usize,
            Resource::Link(i) => 3 + self.num_hpus + i as usize,
        }
    }

    /// Node i has all dependencies met; run it now or queue it.
    fn arrive(&mut self, i: usize) {
        let r = self.res_index(self.nodes[i].resource);
        self.waiting[r].insert((self.ready_time[i], i));
        if !self.busy[r] {
            self.begin_next(r);
        }
    }

    fn begin_next(&mut self, r: usize) {
        let Some(&(rt, i)) = self.waiting[r].iter().next() else {
            return;
        };
        self.waiting[r].remove(&(rt, i));
        let s = rt.max(self.free_time[r]);
        self.pred[i] = if self.free_time[r] > rt {
            self.last_job[r]
        } else {
            self.binding_dep[i]
        };
        self.start[i] = s;
        self.end[i] = s + self.nodes[i].dur_ns;
        self.free_time[r] = self.end[i];
        self.last_job[r] = Some(i);
        self.busy[r] = true;
        self.completions.push(std::cmp::Reverse((self.end[i], i)));
    }

    fn next_completion(&mut self) -> Option<(u64, usize)> {
        let std::cmp::Reverse((t, j)) = self.completions.pop()?;
        let r = self.res_index(self.nodes[j].resource);
        self.busy[r] = false;
        Some((t, j))
    }

    fn serve_next(&mut self, r: Resource) {
        let r = self.res_index(r);
        if !self.busy[r] {
            self.begin_next(r);
        }
    }
}

/// Runs prefill then `output_len` generation steps and returns the full
/// event trace plus aggregated metrics.
pub fn simulate(
    m: &ModelConfig,
    w: &WorkloadConfig,
    topo: &Topology,
    policy: &SimPolicy,
    knobs: &SimKnobs,
) -> Result<(Timeline, StepReport), SimError> {
    m.validate()?;
    w.validate()?;
    if policy.num_subbatches == 0 {
        return Err(SimError::InfeasiblePolicy(
            "num_subbatches must be >= 1".into(),
        ));
    }
    if policy.offload && topo.hpus.is_empty() {
        return Err(SimError::InfeasiblePolicy(
            "offload requested but topology has no HPUs".into(),
        ));
    }
    let offload_fraction = if policy.offload { 1.0 } else { 0.0 };
    let report = capacity_report(
        &topo.gpu,
        m,
        w,
        offload_fraction,
        &topo.hpus,
        &knobs.capacity,
    );
    if report.oom {
        return Err(SimError::Oom {
            report,
            requested: w.batch_size,
        });
    }

    let eff = knobs.efficiency;
    let num_hpus = topo.hpus.len();
    let mut eng = Engine::new();

    // Sub-batch sizes: contiguous slices differing by at most one.
    let subs: Vec<u64> = (0..policy.num_subbatches)
        .map(|i| {
            w.batch_size / policy.num_subbatches
                + if i < w.batch_size % policy.num_subbatches {
                    1
                } else {
                    0
                }
        })
        .filter(|&s| s > 0)
        .collect();
    let n_subs = subs.len() as u64;

    // Per-step linear time for the whole batch; the weight stream is shared
    // by the staggered sub-batches, so each sub-batch event carries an
    // equal slice of it.
    let linear_total = estimate_with(&linear_step_work(m, w.batch_size, false), &topo.gpu, eff)
        .expect("linear work moves bytes")
        .time_s;
    let linear_slice_ns = ns(linear_total / n_subs as f64);
    let dispatch_ns = ns(knobs.host_step_overhead_s / n_subs as f64);

    // ---- Prefill: one GPU cost plus one bulk KV upload per sequence. ----
    let prefill_tokens = w.batch_size * w.input_len;
    let pf_linear = estimate_with(&linear_step_work(m, prefill_tokens, false), &topo.gpu, eff)
        .expect("linear work moves bytes")
        .time_s;
    let pf_attn_work = KernelWork {
        flops: 2
            * w.batch_size
            * m.num_q_heads
            * w.input_len
            * w.input_len
            * m.head_dim
            * m.num_layers,
        bytes: w.batch_size * w.input_len * kv_bytes_per_token(m),
        label: KernelLabel::AttentionGemv,
    };
    let pf_attn = estimate_with(&pf_attn_work, &topo.gpu, eff)
        .expect("attention work moves bytes")
        .time_s;

    let d0 = eng.node(Resource::Gpu, EventKind::Linear, &[], ns(pf_linear), 0, 0);
    let pf = eng.node(
        Resource::Gpu,
        EventKind::Attention,
        &[d0],
        ns(pf_attn),
        0,
        0,
    );
    let mut prefill_done = vec![pf];

    if policy.offload {
        // Upload each HPU's KV share, staged through the host when routed.
        let shares = partition_tasks(w.batch_size, m.num_kv_heads, policy.partition, num_hpus);
        let per_token = kv_bytes_per_token(m);
        for (i, share) in shares.iter().enumerate() {
            let bytes = share.seqs * w.input_len * per_token * share.kv_heads / m.num_kv_heads;
            if bytes == 0 {
                continue;
            }
            let mut dep = pf;
            if let Some(hop) = &topo.host_hop {
                dep = eng.node(
                    Resource::HostHop,
                    EventKind::Xfer,
                    &[dep],
                    ns(transfer_time(bytes, share.seqs, hop)),
                    0,
                    0,
                );
            }
            let done = eng.node(
                Resource::Link(i as u32),
                EventKind::Xfer,
                &[dep],
                ns(transfer_time(bytes, share.seqs, &topo.links[i])),
                0,
                0,
            );
            prefill_done.push(done);
        }
    }

    // ---- Generation ----
    // ready[j]: nodes gating sub-batch j's next linear phase.
    let mut ready: Vec<Vec<NodeId>> = vec![prefill_done; subs.len()];

    for step in 1..=w.output_len {
        let ctx = w.input_len + step;
        for (j, &sub_size) in subs.iter().enumerate() {
            let lin = eng.node(
                Resource::Gpu,
                EventKind::Linear,
                &ready[j],
                linear_slice_ns,
                step,
                j as u64,
            );
            let step_done: Vec<NodeId> = if policy.offload {
                let shares = partition_tasks(sub_size, m.num_kv_heads, policy.partition, num_hpus);
                // Outbound staging through the host hop, aggregated.
                let mut out_dep = lin;
                if let Some(hop) = &topo.host_hop {
                    let (total_out, _, total_chunks) = shares
                        .iter()
                        .map(|&s| offload_payload(m, s))
                        .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
                    out_dep = eng.node(
                        Resource::HostHop,
                        EventKind::Xfer,
                        &[lin],
                        ns(transfer_time(total_out, total_chunks, hop)),
                        step,
                        j as u64,
                    );
                }
                let mut returns = Vec::new();
                let mut total_back = (0u64, 0u64);
                for (i, &share) in shares.iter().enumerate() {
                    if share.seqs == 0 || share.kv_heads == 0 {
                        continue;
                    }
                    let (out_bytes, back_bytes, chunks) = offload_payload(m, share);
                    let x_out = eng.node(
                        Resource::Link(i as u32),
                        EventKind::Xfer,
                        &[out_dep],
                        ns(transfer_time(out_bytes, chunks, &topo.links[i])),
                        step,
                        j as u64,
                    );
                    let attn = eng.node(
                        Resource::Hpu(i as u32),
                        EventKind::Attention,
                        &[x_out],
                        ns(hpu_attention_time(m, share, ctx, &topo.hpus[i], knobs)),
                        step,
                        j as u64,
                    );
                    let x_back = eng.node(
                        Resource::Link(i as u32),
                        EventKind::Xfer,
                        &[attn],
                        ns(transfer_time(back_bytes, chunks, &topo.links[i])),
                        step,
                        j as u64,
                    );
                    total_back = (total_back.0 + back_bytes, total_back.1 + chunks);
                    returns.push(x_back);
                }
                let mut done = returns;
                if let Some(hop) = &topo.host_hop {
                    done = vec![eng.node(
                        Resource::HostHop,
                        EventKind::Xfer,
                        &done,
                        ns(transfer_time(total_back.0, total_back.1, hop)),
                        step,
                        j as u64,
                    )];
                }
                if policy.partition == Partition::HeadParallel {
                    let vectors = sub_size * m.num_q_heads * m.num_layers;
                    done = vec![eng.node(
                        Resource::Host,
                        EventKind::Merge,
                        &done,
                        ns(policy.merge_overhead_s * vectors as f64),
                        step,
                        j as u64,
                    )];
                }
                done
            } else {
                let attn_work = attention_step_work(m, sub_size, ctx);
                let attn_t = estimate_with(&attn_work, &topo.gpu, eff)
                    .expect("attention work moves bytes")
                    .time_s;
                vec![eng.node(
                    Resource::Gpu,
                    EventKind::Attention,
                    &[lin],
                    ns(attn_t),
                    step,
                    j as u64,
                )]
            };
            ready[j] = vec![eng.node(
                Resource::Host,
                EventKind::Dispatch,
                &step_done,
                dispatch_ns,
                step,
                j as u64,
            )];
        }
    }

    let timeline = eng.execute(num_hpus);
    // Generation begins once prefill and uploads have drained.
    let gen_start = timeline
        .events
        .iter()
        .filter(|e| e.step == 0)
        .map(|e| e.end_ns)
        .max()
        .unwrap_or(0);
    let report = summarize(&timeline, w, policy, gen_start);
    Ok((timeline, report))
}

fn summarize(
    timeline: &Timeline,
    w: &WorkloadConfig,
    policy: &SimPolicy,
    gen_start: u64,
) -> StepReport {
    let makespan = timeline.makespan_ns();
    let makespan_s = makespan as f64 / 1e9;
    let generated = w.batch_size * w.output_len;

    // Walk the critical path backwards from the last event; every span is
    // attributed to its kind, dispatch counting as orchestration idle.
    let mut breakdown = Breakdown::default();
    if let Some(mut cur) = timeline
        .events
        .iter()
        .enumerate()
        .max_by_key(|(i, e)| (e.end_ns, *i))
        .map(|(i, _)| i)
    {
        loop {
            let e = &timeline.events[cur];
            let dur = (e.end_ns - e.start_ns) as f64 / makespan as f64;
            match (e.kind, e.resource) {
                (EventKind::Linear, _) => breakdown.gpu_linear += dur,
                (EventKind::Attention, _) => breakdown.hpu_attention += dur,
                (EventKind::Xfer, _) => breakdown.network += dur,
                (EventKind::Merge, _) => breakdown.merge += dur,
                (EventKind::Dispatch, _) => breakdown.idle += dur,
            }
            match timeline.pred[cur] {
                Some(p) => {
                    // Any gap between binding predecessor and this start is
                    // true idling on the path.
                    let gap = timeline.events[cur].start_ns
                        - timeline.events[p].end_ns.min(timeline.events[cur].start_ns);
                    breakdown.idle += gap as f64 / makespan as f64;
                    cur = p;
                }
                None => {
                    breakdown.idle += e.start_ns as f64 / makespan as f64;
                    break;
                }
            }
        }
    }

    let mut busy: std::collections::BTreeMap<Resource, u64> = std::collections::BTreeMap::new();
    for e in &timeline.events {
        *busy.entry(e.resource).or_default() += e.end_ns - e.start_ns;
    }
    let per_device_busy = busy
        .into_iter()
        .map(|(r, b)| (r.to_string(), b as f64 / makespan as f64))
        .collect();

    StepReport {
        tokens_per_s: generated as f64 / makespan_s,
        breakdown,
        per_device_busy,
        step_time_s: (makespan - gen_start) as f64 / 1e9 / w.output_len as f64,
        makespan_s,
        generated_tokens: generated,
        batch_size: w.batch_size,
        offloaded: policy.offload,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub gpu_time_s: f64,
    pub hpu_time_s: f64,
    /// max/min of the two per-step stage times.
    pub imbalance: f64,
    pub bottleneck: String,
}

/// Per-step GPU linear time vs. the slowest HPU's attention time at the
/// workload's mean context length.
pub fn balance_report(
    m: &ModelConfig,
    w: &WorkloadConfig,
    topo: &Topology,
    policy: &SimPolicy,
    knobs: &SimKnobs,
) -> BalanceReport {
    let gpu_time_s = estimate_with(
        &linear_step_work(m, w.batch_size, false),
        &topo.gpu,
        knobs.efficiency,
    )
    .expect("linear work moves bytes")
    .time_s;
    let ctx = w.mean_context();
    let hpu_time_s = if policy.offload && !topo.hpus.is_empty() {
        // Sub-batches run back to back on each HPU; per-step time is the
        // whole batch's share.
        let shares = partition_tasks(
            w.batch_size,
            m.num_kv_heads,
            policy.partition,
            topo.hpus.len(),
        );
        shares
            .iter()
            .zip(&topo.hpus)
            .map(|(&s, d)| hpu_attention_time(m, s, ctx, d, knobs))
            .fold(0.0f64, f64::max)
    } else {
        estimate_with(
            &attention_step_work(m, w.batch_size, ctx),
            &topo.gpu,
            knobs.efficiency,
        )
        .expect("attention work moves bytes")
        .time_s
    };
    let (hi, lo) = if gpu_time_s >= hpu_time_s {
        (gpu_time_s, hpu_time_s)
    } else {
        (hpu_time_s, gpu_time_s)
    };
    BalanceReport {
        gpu_time_s,
        hpu_time_s,
        imbalance: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        bottleneck: if gpu_time_s >= hpu_time_s {
            "gpu".into()
        } else {
            "hpu".into()
        },
    }
}
