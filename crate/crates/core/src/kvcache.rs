//! Functional KV-cache store with the 64-byte multi-port interleaved
//! layout, contiguous per-sequence placement organized by head, capacity
//! accounting, and OoM detection.

use crate::model::{kv_bytes_per_token, DeviceKind, DeviceSpec, ModelConfig, WorkloadConfig};
use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INTERLEAVE_BLOCK: u64 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("address {addr} outside region of {size} bytes")]
    AddressOutOfRange { addr: u64, size: u64 },
    #[error("region size {size} not a multiple of block*ports ({granule})")]
    BadRegion { size: u64, granule: u64 },
    #[error("insufficient contiguous space for {wanted} bytes")]
    CapacityExceeded { wanted: u64 },
    #[error("slot is full ({max_tokens} tokens)")]
    SlotFull { max_tokens: u64 },
    #[error("unknown slot {0}")]
    UnknownSlot(u64),
    #[error("k/v row length {got} does not match expected {want}")]
    RowLength { got: usize, want: usize },
    #[error("token index {token} outside slot budget {max_tokens}")]
    TokenOutOfRange { token: u64, max_tokens: u64 },
    #[error("coordinates outside slot geometry")]
    BadCoordinates,
    #[error("image is {got} bytes, manifest region is {want}")]
    ImageSize { got: u64, want: u64 },
}

/// Interleaving geometry of one device's KV region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLayout {
    pub interleave_block: u64,
    pub num_ports: u64,
    pub region_base: u64,
    pub region_size: u64,
}

impl KvLayout {
    pub fn new(num_ports: u64, region_size: u64) -> Result<Self, KvError> {
        let granule = INTERLEAVE_BLOCK * num_ports.max(1);
        if num_ports == 0 || region_size == 0 || !region_size.is_multiple_of(granule) {
            return Err(KvError::BadRegion {
                size: region_size,
                granule,
            });
        }
        Ok(KvLayout {
            interleave_block: INTERLEAVE_BLOCK,
            num_ports,
            region_base: 0,
            region_size,
        })
    }

    /// Layout covering a device's memory, rounded down to the interleave
    /// granule, minus an optional spill reserve.
    pub fn for_device(
        dev: &DeviceSpec,
        num_ports: u64,
        spill_reserve: u64,
    ) -> Result<Self, KvError> {
        let granule = INTERLEAVE_BLOCK * num_ports.max(1);
        let usable = dev.mem_capacity.saturating_sub(spill_reserve);
        Self::new(num_ports, usable / granule * granule)
    }
}

/// Maps a flat region address to (port, in-port offset). Consecutive
/// 64-byte blocks rotate round-robin across ports; the mapping is a
/// bijection from the region onto ports x offsets.
pub fn interleave(addr: u64, layout: &KvLayout) -> Result<(u64, u64), KvError> {
    if addr >= layout.region_size {
        return Err(KvError::AddressOutOfRange {
            addr,
            size: layout.region_size,
        });
    }
    let blk = layout.interleave_block;
    let port = (addr / blk) % layout.num_ports;
    let offset = (addr / (blk * layout.num_ports)) * blk + addr % blk;
    Ok((port, offset))
}

/// One sequence's reservation: contiguous in the region, organized per
/// layer as all K heads then all V heads, each head a contiguous
/// [token][dim] stream of `head_stride` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSlot {
    pub seq_id: u64,
    pub kv_base_addr: u64,
    pub max_tokens: u64,
    pub cur_tokens: u64,
    pub head_stride: u64,
    pub num_layers: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_param: u64,
}

impl SequenceSlot {
    pub fn size_bytes(&self) -> u64 {
        self.num_layers * 2 * self.num_kv_heads * self.head_stride
    }

    fn layer_stride(&self) -> u64 {
        2 * self.num_kv_heads * self.head_stride
    }

    /// Base address of a head's K stream within the region.
    pub fn k_head_addr(&self, layer: u64, head: u64) -> Result<u64, KvError> {
        if layer >= self.num_layers || head >= self.num_kv_heads {
            return Err(KvError::BadCoordinates);
        }
        Ok(self.kv_base_addr + layer * self.layer_stride() + head * self.head_stride)
    }

    /// Base address of a head's V stream within the region.
    pub fn v_head_addr(&self, layer: u64, head: u64) -> Result<u64, KvError> {
        if layer >= self.num_layers || head >= self.num_kv_heads {
            return Err(KvError::BadCoordinates);
        }
        Ok(self.kv_base_addr
            + layer * self.layer_stride()
            + (self.num_kv_heads + head) * self.head_stride)
    }

    fn row_bytes(&self) -> u64 {
        self.head_dim * self.bytes_per_param
    }
}

/// Single-writer functional HBM image. All byte traffic goes through the
/// interleaver; banks grow lazily so large regions cost nothing until
/// written.
#[derive(Debug, Clone)]
pub struct KvStore {
    layout: KvLayout,
    banks: Vec<Vec<u8>>,
    slots: Vec<SequenceSlot>,
    /// Sorted (addr, size) free ranges.
    free: Vec<(u64, u64)>,
    next_seq_id: u64,
}

impl KvStore {
    pub fn new(layout: KvLayout) -> Self {
        KvStore {
            layout,
            banks: vec![Vec::new(); layout.num_ports as usize],
            slots: Vec::new(),
            free: vec![(0, layout.region_size)],
            next_seq_id: 0,
        }
    }

    pub fn layout(&self) -> &KvLayout {
        &self.layout
    }

    pub fn slot(&self, seq_id: u64) -> Result<&SequenceSlot, KvError> {
        self.slots
            .iter()
            .find(|s| s.seq_id == seq_id)
            .ok_or(KvError::UnknownSlot(seq_id))
    }

    fn slot_mut(&mut self, seq_id: u64) -> Result<&mut SequenceSlot, KvError> {
        self.slots
            .iter_mut()
            .find(|s| s.seq_id == seq_id)
            .ok_or(KvError::UnknownSlot(seq_id))
    }

    pub fn slots(&self) -> &[SequenceSlot] {
        &self.slots
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.iter().map(|&(_, len)| len).sum()
    }

    /// Reserve a contiguous slot for one sequence of up to
    /// `seq_len_budget` tokens, holding `kv_heads_local` of the model's KV
    /// heads (all of them on a single device; a slice under head-parallel
    /// placement).
    pub fn alloc_sequence(
        &mut self,
        m: &ModelConfig,
        seq_len_budget: u64,
        kv_heads_local: u64,
    ) -> Result<u64, KvError> {
        let head_stride = seq_len_budget * m.head_dim * m.bytes_per_param;
        let size = m.num_layers * 2 * kv_heads_local * head_stride;
        // first fit
        let pos = self
            .free
            .iter()
            .position(|&(_, len)| len >= size)
            .ok_or(KvError::CapacityExceeded { wanted: size })?;
        let (base, len) = self.free[pos];
        if len == size {
            self.free.remove(pos);
        } else {
            self.free[pos] = (base + size, len - size);
        }
        let seq_id = self.next_seq_id;
        self.next_seq_id += 1;
        self.slots.push(SequenceSlot {
            seq_id,
            kv_base_addr: base,
            max_tokens: seq_len_budget,
            cur_tokens: 0,
            head_stride,
            num_layers: m.num_layers,
            num_kv_heads: kv_heads_local,
            head_dim: m.head_dim,
            bytes_per_param: m.bytes_per_param,
        });
        Ok(seq_id)
    }

    pub fn free_sequence(&mut self, seq_id: u64) -> Result<(), KvError> {
        let idx = self
            .slots
            .iter()
            .position(|s| s.seq_id == seq_id)
            .ok_or(KvError::UnknownSlot(seq_id))?;
        let slot = self.slots.remove(idx);
        let range = (slot.kv_base_addr, slot.size_bytes());
        let at = self.free.partition_point(|&(a, _)| a < range.0);
        self.free.insert(at, range);
        // merge neighbours
        let mut i = at.saturating_sub(1);
        while i + 1 < self.free.len() {
            let (a0, l0) = self.free[i];
            let (a1, l1) = self.free[i + 1];
            if a0 + l0 == a1 {
                self.free[i] = (a0, l0 + l1);
                self.free.remove(i + 1);
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8]) -> Result<(), KvError> {
        for (i, &b) in data.iter().enumerate() {
            let (port, offset) = interleave(addr + i as u64, &self.layout)?;
            let bank = &mut self.banks[port as usize];
            let offset = offset as usize;
            if bank.len() <= offset {
                bank.resize(offset + 1, 0);
            }
            bank[offset] = b;
        }
        Ok(())
    }

    pub fn read_bytes(&self, addr: u64, out: &mut [u8]) -> Result<(), KvError> {
        for (i, o) in out.iter_mut().enumerate() {
            let (port, offset) = interleave(addr + i as u64, &self.layout)?;
            *o = self.banks[port as usize]
                .get(offset as usize)
                .copied()
                .unwrap_or(0);
        }
        Ok(())
    }

    /// Append one token's K/V rows for every (layer, head) held by the
    /// slot. `k` and `v` are laid out [layer][head][dim].
    pub fn append_token(&mut self, seq_id: u64, k: &[f16], v: &[f16]) -> Result<(), KvError> {
        let slot = *self.slot(seq_id)?;
        if slot.cur_tokens >= slot.max_tokens {
            return Err(KvError::SlotFull {
                max_tokens: slot.max_tokens,
            });
        }
        let want = (slot.num_layers * slot.num_kv_heads * slot.head_dim) as usize;
        if k.len() != want || v.len() != want {
            return Err(KvError::RowLength { got: k.len(), want });
        }
        let token = slot.cur_tokens;
        let d = slot.head_dim as usize;
        for layer in 0..slot.num_layers {
            for head in 0..slot.num_kv_heads {
                let row = ((layer * slot.num_kv_heads + head) as usize) * d;
                self.write_row(
                    &slot,
                    slot.k_head_addr(layer, head)?,
                    token,
                    &k[row..row + d],
                )?;
                self.write_row(
                    &slot,
                    slot.v_head_addr(layer, head)?,
                    token,
                    &v[row..row + d],
                )?;
            }
        }
        self.slot_mut(seq_id)?.cur_tokens += 1;
        Ok(())
    }

    /// Engine-side write of a single head's K/V row at an explicit token
    /// index, as addressed from a descriptor's base address and sequence
    /// length.
    pub fn write_kv_row(
        &mut self,
        seq_id: u64,
        layer: u64,
        head: u64,
        token: u64,
        k_row: &[f16],
        v_row: &[f16],
    ) -> Result<(), KvError> {
        let slot = *self.slot(seq_id)?;
        if token >= slot.max_tokens {
            return Err(KvError::TokenOutOfRange {
                token,
                max_tokens: slot.max_tokens,
            });
        }
        if k_row.len() != slot.head_dim as usize || v_row.len() != slot.head_dim as usize {
            return Err(KvError::RowLength {
                got: k_row.len(),
                want: slot.head_dim as usize,
            });
        }
        self.write_row(&slot, slot.k_head_addr(layer, head)?, token, k_row)?;
        self.write_row(&slot, slot.v_head_addr(layer, head)?, token, v_row)?;
        Ok(())
    }

    /// Record that the slot now holds at least `tokens` tokens.
    pub fn note_tokens(&mut self, seq_id: u64, tokens: u64) -> Result<(), KvError> {
        let slot = self.slot_mut(seq_id)?;
        if tokens > slot.max_tokens {
            return Err(KvError::TokenOutOfRange {
                token: tokens,
                max_tokens: slot.max_tokens,
            });
        }
        slot.cur_tokens = slot.cur_tokens.max(tokens);
        Ok(())
    }

    fn write_row(
        &mut self,
        slot: &SequenceSlot,
        head_base: u64,
        token: u64,
        row: &[f16],
    ) -> Result<(), KvError> {
        let addr = head_base + token * slot.row_bytes();
        let mut bytes = Vec::with_capacity(row.len() * 2);
        for x in row {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        self.write_bytes(addr, &bytes)
    }

    fn read_stream(&self, addr: u64, elems: usize) -> Result<Vec<f16>, KvError> {
        let mut bytes = vec![0u8; elems * 2];
        self.read_bytes(addr, &mut bytes)?;
        Ok(bytes
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect())
    }

    /// Contiguous K stream of one head: `len` tokens of `head_dim` values.
    pub fn read_k_head(
        &self,
        seq_id: u64,
        layer: u64,
        head: u64,
        len: u64,
    ) -> Result<Vec<f16>, KvError> {
        let slot = self.slot(seq_id)?;
        if len > slot.max_tokens {
            return Err(KvError::TokenOutOfRange {
                token: len,
                max_tokens: slot.max_tokens,
            });
        }
        self.read_stream(
            slot.k_head_addr(layer, head)?,
            (len * slot.head_dim) as usize,
        )
    }

    /// Contiguous V stream of one head.
    pub fn read_v_head(
        &self,
        seq_id: u64,
        layer: u64,
        head: u64,
        len: u64,
    ) -> Result<Vec<f16>, KvError> {
        let slot = self.slot(seq_id)?;
        if len > slot.max_tokens {
            return Err(KvError::TokenOutOfRange {
                token: len,
                max_tokens: slot.max_tokens,
            });
        }
        self.read_stream(
            slot.v_head_addr(layer, head)?,
            (len * slot.head_dim) as usize,
        )
    }

    /// Flat binary image of the region in address order plus a manifest
    /// (layout and slot table) for test fixtures. Sized by the region;
    /// meant for small stores.
    pub fn export_image(&self) -> Result<(StoreManifest, Vec<u8>), KvError> {
        let mut image = vec![0u8; self.layout.region_size as usize];
        self.read_bytes(0, &mut image)?;
        Ok((
            StoreManifest {
                layout: self.layout,
                slots: self.slots.clone(),
                next_seq_id: self.next_seq_id,
            },
            image,
        ))
    }

    /// Rebuilds a store from an exported manifest and image.
    pub fn import_image(manifest: &StoreManifest, image: &[u8]) -> Result<Self, KvError> {
        if image.len() as u64 != manifest.layout.region_size {
            return Err(KvError::ImageSize {
                got: image.len() as u64,
                want: manifest.layout.region_size,
            });
        }
        let mut store = KvStore::new(manifest.layout);
        store.write_bytes(0, image)?;
        // Free list = region minus the slot ranges.
        let mut ranges: Vec<(u64, u64)> = manifest
            .slots
            .iter()
            .map(|s| (s.kv_base_addr, s.size_bytes()))
            .collect();
        ranges.sort();
        let mut free = Vec::new();
        let mut cursor = 0u64;
        for &(base, size) in &ranges {
            if base < cursor || base + size > manifest.layout.region_size {
                return Err(KvError::BadCoordinates);
            }
            if base > cursor {
                free.push((cursor, base - cursor));
            }
            cursor = base + size;
        }
        if cursor < manifest.layout.region_size {
            free.push((cursor, manifest.layout.region_size - cursor));
        }
        store.free = free;
        store.slots = manifest.slots.clone();
        store.next_seq_id = manifest.next_seq_id;
        Ok(store)
    }
}

/// Layout plus slot table accompanying an exported store image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub layout: KvLayout,
    pub slots: Vec<SequenceSlot>,
    pub next_seq_id: u64,
}

/// Calibration knobs for the capacity model. The reserve covers framework
/// overhead plus per-sequence working buffers (prefill scratch, staging)
/// that follow wherever the attention runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityKnobs {
    /// Fraction of device capacity set aside unconditionally.
    pub reserve_frac: f64,
    /// Flat framework overhead in bytes.
    pub reserve_const: u64,
    /// Per-sequence working buffers as a multiple of that sequence's
    /// resident KV bytes.
    pub kv_overhead_factor: f64,
    /// Bytes reserved on each HPU for intermediate-result spill.
    pub hpu_spill_reserve: u64,
}

impl Default for CapacityKnobs {
    fn default() -> Self {
        CapacityKnobs {
            reserve_frac: 0.05,
            reserve_const: 1_500_000_000,
            kv_overhead_factor: 0.9,
            hpu_spill_reserve: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub device_capacity: u64,
    pub weights_bytes: u64,
    /// KV bytes resident on the GPU for the requested batch.
    pub kv_bytes: u64,
    /// Activation reserve for the requested batch.
    pub activation_reserve: u64,
    pub max_batch: u64,
    pub oom: bool,
}

/// Largest batch fitting weights + resident KV + activation reserve on the
/// GPU and, when offloading, the offloaded KV across the HPU pool.
/// `offload_fraction` is the fraction of each sequence's KV held off-GPU.
pub fn capacity_report(
    dev: &DeviceSpec,
    m: &ModelConfig,
    w: &WorkloadConfig,
    offload_fraction: f64,
    hpu_pool: &[DeviceSpec],
    knobs: &CapacityKnobs,
) -> CapacityReport {
    debug_assert!((0.0..=1.0).contains(&offload_fraction));
    let seq_kv = (w.max_context() * kv_bytes_per_token(m)) as f64;
    let resident_per_seq = (1.0 - offload_fraction) * seq_kv;
    let reserve_base = knobs.reserve_frac * dev.mem_capacity as f64 + knobs.reserve_const as f64;
    let reserve_per_seq = knobs.kv_overhead_factor * resident_per_seq;

    let weights = m.weight_bytes();
    let budget = dev.mem_capacity as f64 - weights as f64 - reserve_base;
    let per_seq_total = resident_per_seq + reserve_per_seq;
    let gpu_max = if budget <= 0.0 {
        0
    } else if per_seq_total <= 0.0 {
        u64::MAX
    } else {
        (budget / per_seq_total).floor() as u64
    };

    let pool_max = if offload_fraction > 0.0 {
        let off_per_seq = offload_fraction * seq_kv;
        hpu_pool
            .iter()
            .map(|h| {
                let usable = h.mem_capacity.saturating_sub(knobs.hpu_spill_reserve) as f64;
                (usable / off_per_seq).floor() as u64
            })
            .sum::<u64>()
    } else {
        u64::MAX
    };

    let max_batch = gpu_max.min(pool_max);
    let kv_bytes = (w.batch_size as f64 * resident_per_seq).round() as u64;
    let activation_reserve = (reserve_base + w.batch_size as f64 * reserve_per_seq).round() as u64;
    CapacityReport {
        device_capacity: dev.mem_capacity,
        weights_bytes: weights,
        kv_bytes,
        activation_reserve,
        max_batch,
        oom: w.batch_size > max_batch,
    }
}

/// Default port count per device: the target carries four stacks, the
/// prototype two; both are modeled with 8 ports (configurable).
pub const DEFAULT_NUM_PORTS: u64 = 8;

pub fn is_hpu(dev: &DeviceSpec) -> bool {
    dev.kind == DeviceKind::Hpu
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelConfig {
        ModelConfig {
            name: "small".into(),
            num_layers: 2,
            hidden_dim: 8,
            num_q_heads: 2,
            num_kv_heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            bytes_per_param: 2,
            total_params: 1000,
            lm_head_vocab: None,
        }
    }

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

    fn prototype() -> DeviceSpec {
        DeviceSpec {
            name: "hpu-prototype".into(),
            kind: DeviceKind::Hpu,
            mem_bandwidth: 460e9,
            mem_capacity: 16 * (1 << 30),
            peak_flops: 0.5e12,
            link_bandwidth: 16e9,
            link_latency: 5e-6,
            tdp: 150.0,
            perf_per_bw: Some(1.0),
            active_fraction: 0.10,
            host_routed: true,
        }
    }

    #[test]
    fn store_moves_between_threads() {
        fn assert_send<T: Send>() {}
        assert_send::<KvStore>();
        let m = small_model();
        let mut store = KvStore::new(KvLayout::new(2, 1 << 12).unwrap());
        store.alloc_sequence(&m, 2, m.num_kv_heads).unwrap();
        let handle = std::thread::spawn(move || store.slots().len());
        assert_eq!(handle.join().unwrap(), 1);
    }

    #[test]
    fn interleave_frozen_examples() {
        let layout = KvLayout::new(4, 4096).unwrap();
        assert_eq!(interleave(0, &layout).unwrap(), (0, 0));
        assert_eq!(interleave(64, &layout).unwrap(), (1, 0));
        assert_eq!(interleave(256, &layout).unwrap(), (0, 64));
        assert!(interleave(4096, &layout).is_err());
    }

    #[test]
    fn interleave_bijection_exhaustive_4k() {
        let layout = KvLayout::new(4, 4096).unwrap();
        let mut seen = vec![false; 4096];
        for addr in 0..4096u64 {
            let (port, offset) = interleave(addr, &layout).unwrap();
            assert!(offset < layout.region_size / layout.num_ports);
            let flat = (port * (layout.region_size / layout.num_ports) + offset) as usize;
            assert!(!seen[flat], "collision at addr {addr}");
            seen[flat] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn consecutive_blocks_hit_distinct_ports() {
        for ports in [2u64, 4, 8] {
            let layout = KvLayout::new(ports, 64 * ports * 16).unwrap();
            for blk in 0..(layout.region_size / 64 - 1) {
                let (p0, _) = interleave(blk * 64, &layout).unwrap();
                let (p1, _) = interleave((blk + 1) * 64, &layout).unwrap();
                assert_ne!(p0, p1);
                assert_eq!(p1, (p0 + 1) % ports);
            }
        }
    }

    #[test]
    fn append_then_read_is_bit_exact() {
        let m = small_model();
        let layout = KvLayout::new(4, 1 << 16).unwrap();
        let mut store = KvStore::new(layout);
        let id = store.alloc_sequence(&m, 8, m.num_kv_heads).unwrap();

        let n = (m.num_layers * m.num_kv_heads * m.head_dim) as usize;
        let k: Vec<f16> = (0..n)
            .map(|i| f16::from_f32(i as f32 * 0.25 - 3.0))
            .collect();
        let v: Vec<f16> = (0..n)
            .map(|i| f16::from_f32(1.0 - i as f32 * 0.125))
            .collect();
        store.append_token(id, &k, &v).unwrap();

        for layer in 0..m.num_layers {
            for head in 0..m.num_kv_heads {
                let kr = store.read_k_head(id, layer, head, 1).unwrap();
                let vr = store.read_v_head(id, layer, head, 1).unwrap();
                let base = ((layer * m.num_kv_heads + head) * m.head_dim) as usize;
                for i in 0..m.head_dim as usize {
                    assert_eq!(kr[i].to_bits(), k[base + i].to_bits());
                    assert_eq!(vr[i].to_bits(), v[base + i].to_bits());
                }
            }
        }
    }

    #[test]
    fn slot_full_at_budget() {
        let m = small_model();
        let mut store = KvStore::new(KvLayout::new(2, 1 << 16).unwrap());
        let id = store.alloc_sequence(&m, 3, m.num_kv_heads).unwrap();
        let n = (m.num_layers * m.num_kv_heads * m.head_dim) as usize;
        let row = vec![f16::from_f32(0.5); n];
        for _ in 0..3 {
            store.append_token(id, &row, &row).unwrap();
        }
        assert!(matches!(
            store.append_token(id, &row, &row),
            Err(KvError::SlotFull { .. })
        ));
    }

    #[test]
    fn sixteen_gib_device_holds_sixteen_2k_sequences() {
        let m = llama();
        let layout = KvLayout::for_device(&prototype(), 8, 0).unwrap();
        let mut store = KvStore::new(layout);
        for i in 0..16 {
            store
                .alloc_sequence(&m, 2048, m.num_kv_heads)
                .unwrap_or_else(|e| panic!("alloc {i} failed: {e}"));
        }
        assert!(matches!(
            store.alloc_sequence(&m, 2048, m.num_kv_heads),
            Err(KvError::CapacityExceeded { .. })
        ));
        assert_eq!(store.free_bytes(), 0);
    }

    #[test]
    fn slots_never_overlap_and_fit_region() {
        let m = small_model();
        let mut store = KvStore::new(KvLayout::new(4, 1 << 16).unwrap());
        let mut ids = Vec::new();
        for _ in 0..5 {
            ids.push(store.alloc_sequence(&m, 16, m.num_kv_heads).unwrap());
        }
        store.free_sequence(ids[2]).unwrap();
        ids.remove(2);
        ids.push(store.alloc_sequence(&m, 8, m.num_kv_heads).unwrap());

        let mut ranges: Vec<(u64, u64)> = store
            .slots()
            .iter()
            .map(|s| (s.kv_base_addr, s.kv_base_addr + s.size_bytes()))
            .collect();
        ranges.sort();
        for w in ranges.windows(2) {
            assert!(w[0].1 <= w[1].0, "slots overlap: {:?}", w);
        }
        let total: u64 = store.slots().iter().map(|s| s.size_bytes()).sum();
        assert!(total <= store.layout().region_size);
        assert_eq!(total + store.free_bytes(), store.layout().region_size);
    }

    #[test]
    fn capacity_l40s_limits_at_batch_16() {
        let m = llama();
        let k = CapacityKnobs::default();
        let w16 = WorkloadConfig {
            batch_size: 16,
            input_len: 1024,
            output_len: 1024,
        };
        let rep = capacity_report(&l40s(), &m, &w16, 0.0, &[], &k);
        assert_eq!(rep.max_batch, 16);
        assert!(!rep.oom);
        // Invariant: oom mirrors the byte accounting.
        assert_eq!(
            rep.oom,
            rep.weights_bytes + rep.kv_bytes + rep.activation_reserve > rep.device_capacity
        );

        let w32 = WorkloadConfig {
            batch_size: 32,
            ..w16
        };
        let rep = capacity_report(&l40s(), &m, &w32, 0.0, &[], &k);
        assert!(rep.oom);
        assert_eq!(
            rep.oom,
            rep.weights_bytes + rep.kv_bytes + rep.activation_reserve > rep.device_capacity
        );
    }

    #[test]
    fn full_offload_bounded_by_pool() {
        let m = llama();
        let k = CapacityKnobs::default();
        let w = WorkloadConfig {
            batch_size: 64,
            input_len: 1024,
            output_len: 1024,
        };
        let pool = vec![prototype(); 4];
        let rep = capacity_report(&l40s(), &m, &w, 1.0, &pool, &k);
        assert_eq!(rep.max_batch, 64);
        assert!(!rep.oom);
        assert_eq!(rep.kv_bytes, 0);

        let w65 = WorkloadConfig {
            batch_size: 65,
            ..w
        };
        assert!(capacity_report(&l40s(), &m, &w65, 1.0, &pool, &k).oom);
    }

    #[test]
    fn export_import_roundtrip() {
        let m = small_model();
        let mut store = KvStore::new(KvLayout::new(4, 1 << 14).unwrap());
        let a = store.alloc_sequence(&m, 4, m.num_kv_heads).unwrap();
        let b = store.alloc_sequence(&m, 2, m.num_kv_heads).unwrap();
        let n = (m.num_layers * m.num_kv_heads * m.head_dim) as usize;
        let row: Vec<f16> = (0..n)
            .map(|i| f16::from_f32(i as f32 * 0.5 - 4.0))
            .collect();
        store.append_token(a, &row, &row).unwrap();
        store.append_token(b, &row, &row).unwrap();
        store.free_sequence(a).unwrap();

        let (manifest, image) = store.export_image().unwrap();
        // The manifest itself serializes as a small text header.
        let text = toml::to_string(&manifest).unwrap();
        let back: StoreManifest = toml::from_str(&text).unwrap();
        let restored = KvStore::import_image(&back, &image).unwrap();

        assert_eq!(restored.slots(), store.slots());
        assert_eq!(restored.free_bytes(), store.free_bytes());
        let k1 = store.read_k_head(b, 1, 0, 1).unwrap();
        let k2 = restored.read_k_head(b, 1, 0, 1).unwrap();
        assert_eq!(
            k1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            k2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        // The restored allocator keeps working in the freed hole.
        let mut restored = restored;
        restored.alloc_sequence(&m, 4, m.num_kv_heads).unwrap();
    }

    #[test]
    fn tiny_context_gives_huge_bound_without_overflow() {
        let m = llama();
        let k = CapacityKnobs::default();
        let w = WorkloadConfig {
            batch_size: 1,
            input_len: 1,
            output_len: 1,
        };
        let rep = capacity_report(&l40s(), &m, &w, 0.0, &[], &k);
        assert!(rep.max_batch > 10_000, "max_batch = {}", rep.max_batch);
        assert!(!rep.oom);
    }
}
