//! Bounded sample memory with FIFO eviction that never drops the ground-truth slot.

use std::io::{Read, Write};

use crate::binio;
use crate::error::{ensure, Result};
use crate::numerics::{FeatureGrid, MaskGrid, TAPS};

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlot {
    pub feature: FeatureGrid,
    /// Binary label mask.
    pub mask: MaskGrid,
    pub frame_index: u64,
    pub insert_step: u64,
    pub is_ground_truth: bool,
}

impl MemorySlot {
    pub fn new(
        feature: FeatureGrid,
        mask: MaskGrid,
        frame_index: u64,
        insert_step: u64,
        is_ground_truth: bool,
    ) -> Result<Self> {
        ensure!(
            mask.matches_spatial(&feature),
            "mask does not match feature spatial size"
        );
        Ok(Self {
            feature,
            mask: mask.threshold(0.5),
            frame_index,
            insert_step,
            is_ground_truth,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_u64(w, self.frame_index)?;
        binio::write_u64(w, self.insert_step)?;
        binio::write_u8(w, self.is_ground_truth as u8)?;
        binio::write_f64s(w, self.feature.values())?;
        w.write_all(&binio::pack_bits(self.mask.bits().into_iter()))?;
        Ok(())
    }

    /// Reads one record; `Ok(None)` at a clean end of input.
    pub fn read_from(r: &mut impl Read, dims: (usize, usize, usize)) -> Result<Option<Self>> {
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            return Ok(None);
        }
        let rest: [u8; 7] = binio::read_array(r)?;
        let mut frame = [0u8; 8];
        frame[0] = first[0];
        frame[1..].copy_from_slice(&rest);
        let frame_index = u64::from_le_bytes(frame);
        let insert_step = binio::read_u64(r)?;
        let is_ground_truth = binio::read_u8(r)? != 0;
        let (c, h, w) = dims;
        let feature = FeatureGrid::new(c, h, w, binio::read_f64s(r, c * h * w)?)?;
        let mask = MaskGrid::from_bits(h, w, &binio::read_bits(r, h * w)?)?;
        Ok(Some(Self {
            feature,
            mask,
            frame_index,
            insert_step,
            is_ground_truth,
        }))
    }
}

/// Outcome of one insertion.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvictionReport {
    /// `(frame_index, insert_step)` of the evicted slot.
    pub evicted: Option<(u64, u64)>,
    /// False when the memory was full of protected slots and the new slot was dropped.
    pub stored: bool,
}

#[derive(Clone, Debug)]
pub struct SampleMemory {
    capacity: usize,
    update_interval: usize,
    slots: Vec<MemorySlot>,
    current_step: u64,
    peak: usize,
}

impl SampleMemory {
    pub const DEFAULT_CAPACITY: usize = 32;

    pub fn new(capacity: usize, update_interval: usize) -> Result<Self> {
        ensure!(capacity > 0, "memory capacity must be positive");
        ensure!(
            update_interval > 0,
            "memory update interval must be positive"
        );
        Ok(Self {
            capacity,
            update_interval,
            slots: Vec::with_capacity(capacity),
            current_step: 0,
            peak: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn update_interval(&self) -> usize {
        self.update_interval
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Largest slot count ever held.
    pub fn peak_len(&self) -> usize {
        self.peak
    }

    pub fn current_step(&self) -> u64 {
        self.current_step
    }

    /// Moves the clock used for ages forward (never backward).
    pub fn advance_to(&mut self, step: u64) {
        self.current_step = self.current_step.max(step);
    }

    pub fn ground_truth(&self) -> Option<&MemorySlot> {
        self.slots.iter().find(|s| s.is_ground_truth)
    }

    pub fn insert(&mut self, slot: MemorySlot) -> Result<EvictionReport> {
        if let Some(first) = self.slots.first() {
            ensure!(
                first.feature.dims() == slot.feature.dims(),
                "slot dims {:?} differ from memory dims {:?}",
                slot.feature.dims(),
                first.feature.dims()
            );
        }
        let has_gt = self.ground_truth().is_some();
        ensure!(
            !(slot.is_ground_truth && has_gt),
            "memory already holds a ground-truth slot"
        );
        ensure!(
            slot.is_ground_truth || has_gt,
            "the first slot must be the ground truth"
        );
        self.advance_to(slot.insert_step);

        let mut report = EvictionReport {
            evicted: None,
            stored: true,
        };
        if self.slots.len() == self.capacity {
            let oldest = self
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.is_ground_truth)
                .min_by_key(|(_, s)| s.insert_step)
                .map(|(i, _)| i);
            match oldest {
                Some(i) => {
                    let gone = self.slots.remove(i);
                    report.evicted = Some((gone.frame_index, gone.insert_step));
                }
                None => {
                    report.stored = false;
                    return Ok(report);
                }
            }
        }
        self.slots.push(slot);
        self.peak = self.peak.max(self.slots.len());
        Ok(report)
    }

    /// Temporal weights `d_n`, aligned with [`slots`](Self::slots).
    ///
    /// `d_n = base^(age)`; the ground-truth slot is raised to at least the
    /// mean raw weight; the result is normalized to sum to one.
    pub fn temporal_weights(&self, decay_base: f64) -> Result<Vec<f64>> {
        ensure!(
            !self.slots.is_empty(),
            "temporal weights of an empty memory"
        );
        ensure!(
            decay_base > 0.0 && decay_base <= 1.0,
            "decay base must lie in (0, 1]"
        );
        let mut raw: Vec<f64> = self
            .slots
            .iter()
            .map(|s| {
                let age = self.current_step.saturating_sub(s.insert_step);
                decay_base.powf(age as f64)
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        for (w, s) in raw.iter_mut().zip(&self.slots) {
            if s.is_ground_truth && *w < mean {
                *w = mean;
            }
        }
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|w| w / total).collect())
    }

    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        for s in &self.slots {
            s.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_dump(r: &mut impl Read, dims: (usize, usize, usize)) -> Result<Vec<MemorySlot>> {
        let mut out = Vec::new();
        while let Some(s) = MemorySlot::read_from(r, dims)? {
            out.push(s);
        }
        Ok(out)
    }
}

/// Bits needed to store one memory unit: the feature at `float_bits` per value plus a binary mask.
pub fn unit_size_bits(
    feature_dims: (u64, u64, u64),
    mask_dims: (u64, u64),
    float_bits: u64,
) -> u64 {
    let (c, h, w) = feature_dims;
    c * h * w * float_bits + mask_dims.0 * mask_dims.1
}

/// Bits needed to store one gate map: one bit per target-model parameter.
pub fn gate_unit_size_bits(c_out: u64, c_in: u64) -> u64 {
    c_out * c_in * TAPS as u64
}

/// How many gate maps fit in the space of one memory unit at canonical scale.
pub fn canonical_memory_ratio() -> f64 {
    unit_size_bits((512, 30, 52), (30, 52), 64) as f64 / gate_unit_size_bits(16, 512) as f64
}
