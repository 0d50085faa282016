//! Gradient-importance gating: importance accumulation, binarized gate maps,
//! the OR-combined overall gate, bounded gate memory and the soft MAS penalty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{ensure, Error, Result};
use crate::numerics::nearest_rank_index;

const GATE_MAGIC: &[u8; 4] = b"DGGM";
const GATE_VERSION: u32 = 1;
/// Distance kept from the clamp bounds so the strict comparison never ties with them.
const CLAMP_NUDGE: f64 = 1e-9;

/// Binary map over the target-model parameters; bit 1 means frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateMap {
    bits: Vec<bool>,
    created_step: u64,
}

impl GateMap {
    pub fn zeros(k: usize) -> Self {
        Self {
            bits: vec![false; k],
            created_step: 0,
        }
    }

    pub fn from_bits(bits: Vec<bool>, created_step: u64) -> Self {
        Self { bits, created_step }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn created_step(&self) -> u64 {
        self.created_step
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(GATE_MAGIC)?;
        binio::write_u32(w, GATE_VERSION)?;
        binio::write_u64(w, self.bits.len() as u64)?;
        w.write_all(&binio::pack_bits(self.bits.iter().copied()))?;
        binio::write_u64(w, self.created_step)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, GATE_MAGIC)?;
        let version = binio::read_u32(r)?;
        if version != GATE_VERSION {
            return Err(Error::Format(format!(
                "unsupported gate map version {version}"
            )));
        }
        let k = binio::read_u64(r)? as usize;
        let bits = binio::read_bits(r, k)?;
        let created_step = binio::read_u64(r)?;
        Ok(Self { bits, created_step })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub xi_lower: f64,
    pub xi_upper: f64,
    /// When set, keep at most this many maps and disable bound-driven dropping.
    pub fixed_capacity: Option<usize>,
    pub h_percentile: f64,
    pub h_clamp_lower: f64,
    pub h_clamp_upper: f64,
    /// Never drop the first stored map (the one from the ground-truth update).
    pub keep_initial: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            xi_lower: 0.07,
            xi_upper: 0.15,
            fixed_capacity: None,
            h_percentile: 99.5,
            h_clamp_lower: 0.1,
            h_clamp_upper: 0.55,
            keep_initial: true,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 <= self.xi_lower && self.xi_lower <= self.xi_upper && self.xi_upper <= 1.0,
            "gate ratios must satisfy 0 <= xi_lower <= xi_upper <= 1"
        );
        ensure!(
            self.fixed_capacity != Some(0),
            "fixed gate capacity must be positive"
        );
        ensure!(
            self.h_percentile > 0.0 && self.h_percentile < 100.0,
            "h_percentile must lie in (0, 100)"
        );
        ensure!(
            self.h_clamp_lower + 2.0 * CLAMP_NUDGE < self.h_clamp_upper,
            "h clamp interval is empty"
        );
        Ok(())
    }

    /// Lower popcount bound `ceil(ξ_l·K)`.
    pub fn eta_lower(&self, k: usize) -> usize {
        (self.xi_lower * k as f64).ceil() as usize
    }

    /// Upper popcount bound `floor(ξ_u·K)`.
    pub fn eta_upper(&self, k: usize) -> usize {
        (self.xi_upper * k as f64).floor() as usize
    }
}

/// Per-update gradient-magnitude sums `u` and the running MAS importance `ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceAccumulator {
    u: Vec<f64>,
    omega: Vec<f64>,
}

impl ImportanceAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            u: vec![0.0; k],
            omega: vec![0.0; k],
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// Clears `u` at the start of an update; `ω` keeps accumulating.
    pub fn begin_update(&mut self) {
        self.u.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `Σ_epochs |g|` to both `u` and `ω`.
    pub fn accumulate(&mut self, grad_trace: &[Vec<f64>]) -> Result<()> {
        let k = self.u.len();
        for g in grad_trace {
            ensure!(
                g.len() == k,
                "gradient has {} entries, expected {k}",
                g.len()
            );
        }
        for g in grad_trace {
            for ((u, o), v) in self.u.iter_mut().zip(self.omega.iter_mut()).zip(g) {
                *u += v.abs();
                *o += v.abs();
            }
        }
        Ok(())
    }
}

/// Threshold used by [`binarize`]: the `h_percentile` of the max-normalized
/// importances, snapped into the open clamp interval.
pub fn gate_threshold(normalized: &[f64], cfg: &GateConfig) -> f64 {
    let mut sorted = normalized.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = sorted[nearest_rank_index(sorted.len(), cfg.h_percentile)];
    h.clamp(
        cfg.h_clamp_lower + CLAMP_NUDGE,
        cfg.h_clamp_upper - CLAMP_NUDGE,
    )
}

/// Gate map of the parameters whose normalized importance exceeds the threshold.
pub fn binarize(u: &[f64], cfg: &GateConfig, created_step: u64) -> Result<GateMap> {
    ensure!(!u.is_empty(), "cannot binarize an empty importance vector");
    ensure!(
        u.iter().all(|v| v.is_finite() && *v >= 0.0),
        "importances must be finite and nonnegative"
    );
    let max = u.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::NoImportanceSignal);
    }
    let normalized: Vec<f64> = u.iter().map(|v| v / max).collect();
    let h = gate_threshold(&normalized, cfg);
    Ok(GateMap::from_bits(
        normalized.iter().map(|&v| v > h).collect(),
        created_step,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaintainReport {
    /// Creation steps of the maps removed by this call, oldest first.
    pub dropped: Vec<u64>,
    pub popcount: usize,
    pub maps: usize,
}

#[derive(Clone, Debug)]
pub struct GateMemory {
    k: usize,
    cfg: GateConfig,
    maps: Vec<GateMap>,
    /// Whether `maps[0]` is the protected initial map.
    holds_initial: bool,
}

impl GateMemory {
    pub fn new(k: usize, cfg: GateConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            k,
            cfg,
            maps: Vec::new(),
            holds_initial: false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> &GateConfig {
        &self.cfg
    }

    pub fn maps(&self) -> &[GateMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn eta_lower(&self) -> usize {
        self.cfg.eta_lower(self.k)
    }

    pub fn eta_upper(&self) -> usize {
        self.cfg.eta_upper(self.k)
    }

    /// Bitwise OR of all stored maps; all zeros when empty.
    pub fn overall_gate(&self) -> GateMap {
        let mut bits = vec![false; self.k];
        for m in &self.maps {
            for (b, &v) in bits.iter_mut().zip(m.bits()) {
                *b |= v;
            }
        }
        let step = self.maps.last().map_or(0, |m| m.created_step);
        GateMap::from_bits(bits, step)
    }

    fn oldest_droppable(&self) -> Option<usize> {
        let start = usize::from(self.holds_initial);
        (start < self.maps.len()).then_some(start)
    }

    /// Appends `new_map`, then drops oldest maps per the configured policy.
    pub fn maintain(&mut self, new_map: GateMap) -> Result<MaintainReport> {
        ensure!(
            new_map.len() == self.k,
            "gate map has {} bits, expected {}",
            new_map.len(),
            self.k
        );
        if self.maps.is_empty() && self.cfg.keep_initial {
            self.holds_initial = true;
        }
        self.maps.push(new_map);
        let mut dropped = Vec::new();
        match self.cfg.fixed_capacity {
            Some(p) => {
                while self.maps.len() > p {
                    let Some(i) = self.oldest_droppable() else {
                        break;
                    };
                    dropped.push(self.maps.remove(i).created_step);
                }
            }
            None => {
                let upper = self.eta_upper();
                let mut overall = self.overall_gate().popcount();
                while overall > upper && self.maps.len() > 1 {
                    let Some(i) = self.oldest_droppable() else {
                        break;
                    };
                    dropped.push(self.maps.remove(i).created_step);
                    overall = self.overall_gate().popcount();
                }
            }
        }
        Ok(MaintainReport {
            dropped,
            popcount: self.overall_gate().popcount(),
            maps: self.maps.len(),
        })
    }
}

/// `γ Σ_k ω_k (θ_k − θ_k^prev)²`.
pub fn mas_penalty(theta: &[f64], prev: &[f64], omega: &[f64], gamma: f64) -> f64 {
    gamma
        * theta
            .iter()
            .zip(prev)
            .zip(omega)
            .map(|((t, p), o)| o * (t - p) * (t - p))
            .sum::<f64>()
}

/// Gradient of [`mas_penalty`]: `2γ ω_k (θ_k − θ_k^prev)`.
pub fn mas_penalty_grad(theta: &[f64], prev: &[f64], omega: &[f64], gamma: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(prev)
        .zip(omega)
        .map(|((t, p), o)| gamma * 2.0 * o * (t - p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn map(bits: &str, step: u64) -> GateMap {
        GateMap::from_bits(bits.chars().map(|c| c == '1').collect(), step)
    }

    fn block_map(k: usize, range: std::ops::Range<usize>, step: u64) -> GateMap {
        let mut bits = vec![false; k];
        bits[range].iter_mut().for_each(|b| *b = true);
        GateMap::from_bits(bits, step)
    }

    #[test]
    fn accumulate_absolute_values() {
        let mut acc = ImportanceAccumulator::new(3);
        acc.accumulate(&[vec![0.0; 3]]).unwrap();
        assert_eq!(acc.u(), &[0.0; 3]);
        acc.accumulate(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(acc.u(), &[1.0, 2.0, 3.0]);
        assert_eq!(acc.omega(), &[1.0, 2.0, 3.0]);
        acc.begin_update();
        assert_eq!(acc.u(), &[0.0; 3]);
        assert_eq!(acc.omega(), &[1.0, 2.0, 3.0]);
        assert!(acc.accumulate(&[vec![1.0]]).is_err());
    }

    #[test]
    fn accumulate_matches_loop_oracle() {
        let mut rng = Rng::new(11);
        let trace: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..50).map(|_| rng.normal()).collect())
            .collect();
        let mut acc = ImportanceAccumulator::new(50);
        acc.accumulate(&trace).unwrap();
        for k in 0..50 {
            let mut want = 0.0;
            for g in &trace {
                want += g[k].abs();
            }
            assert_eq!(acc.u()[k], want);
        }
    }

    #[test]
    fn single_dominant_parameter() {
        let mut u = vec![1e-6; 100];
        u[17] = 1.0;
        let g = binarize(&u, &GateConfig::default(), 0).unwrap();
        assert_eq!(g.popcount(), 1);
        assert!(g.bits()[17]);
    }

    #[test]
    fn uniform_importance_sets_every_bit() {
        // Every normalized value is 1.0; the percentile 1.0 clamps to 0.55 - 1e-9.
        let g = binarize(&[0.3; 40], &GateConfig::default(), 0).unwrap();
        assert_eq!(g.popcount(), 40);
    }

    #[test]
    fn zero_importance_is_an_error() {
        assert!(matches!(
            binarize(&[0.0; 5], &GateConfig::default(), 0),
            Err(Error::NoImportanceSignal)
        ));
    }

    #[test]
    fn binarize_matches_scan_oracle() {
        let mut rng = Rng::new(12);
        let u: Vec<f64> = (0..1000).map(|_| rng.uniform().powi(8)).collect();
        let cfg = GateConfig::default();
        let g = binarize(&u, &cfg, 0).unwrap();
        let max = u.iter().copied().fold(0.0, f64::max);
        let mut norm: Vec<f64> = u.iter().map(|v| v / max).collect();
        let h = gate_threshold(&norm, &cfg);
        assert_eq!(g.popcount(), norm.iter().filter(|&&v| v > h).count());
        norm.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let raw = norm[994];
        assert_eq!(h, raw.clamp(0.1 + 1e-9, 0.55 - 1e-9));
    }

    #[test]
    fn overall_gate_cases() {
        let mem = GateMemory::new(4, GateConfig::default()).unwrap();
        assert_eq!(mem.overall_gate().popcount(), 0);
        let mut mem = GateMemory::new(
            4,
            GateConfig {
                xi_upper: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        mem.maintain(map("1000", 0)).unwrap();
        mem.maintain(map("0100", 1)).unwrap();
        assert_eq!(mem.overall_gate().bits(), map("1100", 0).bits());
    }

    #[test]
    fn overall_gate_matches_fold() {
        let mut rng = Rng::new(13);
        let cfg = GateConfig {
            xi_upper: 1.0,
            ..Default::default()
        };
        let mut mem = GateMemory::new(64, cfg).unwrap();
        let maps: Vec<GateMap> = (0..8)
            .map(|s| GateMap::from_bits((0..64).map(|_| rng.uniform() < 0.1).collect(), s))
            .collect();
        for m in &maps {
            mem.maintain(m.clone()).unwrap();
        }
        let mut want = [false; 64];
        for m in &maps {
            for k in 0..64 {
                want[k] = want[k] || m.bits()[k];
            }
        }
        assert_eq!(mem.overall_gate().bits(), &want[..]);
    }

    #[test]
    fn fixed_capacity_ring() {
        let cfg = GateConfig {
            fixed_capacity: Some(2),
            keep_initial: false,
            ..Default::default()
        };
        let mut mem = GateMemory::new(4, cfg).unwrap();
        for s in 0..3 {
            mem.maintain(map("1000", s)).unwrap();
        }
        let steps: Vec<u64> = mem.maps().iter().map(GateMap::created_step).collect();
        assert_eq!(steps, vec![1, 2]);

        let cfg = GateConfig {
            fixed_capacity: Some(2),
            ..Default::default()
        };
        let mut mem = GateMemory::new(4, cfg).unwrap();
        for s in 0..3 {
            mem.maintain(map("1000", s)).unwrap();
        }
        let steps: Vec<u64> = mem.maps().iter().map(GateMap::created_step).collect();
        assert_eq!(steps, vec![0, 2]);
    }

    #[test]
    fn canonical_bounds() {
        let cfg = GateConfig::default();
        assert_eq!(cfg.eta_upper(73_728), 11_059);
        assert_eq!(cfg.eta_lower(73_728), 5_161);
    }

    #[test]
    fn disjoint_thousand_bit_maps() {
        let k = 73_728;
        let mut mem = GateMemory::new(k, GateConfig::default()).unwrap();
        for step in 0..20u64 {
            let s = step as usize * 1000;
            let r = mem.maintain(block_map(k, s..s + 1000, step)).unwrap();
            if step < 11 {
                assert!(r.dropped.is_empty());
                assert_eq!(r.popcount, (step as usize + 1) * 1000);
            } else {
                assert_eq!(r.dropped.len(), 1);
                assert_eq!(r.popcount, 11_000);
            }
            assert_eq!(mem.maps()[0].created_step(), 0);
        }
    }

    #[test]
    fn oversized_new_map_is_dropped_after_initial() {
        let mut mem = GateMemory::new(10, GateConfig::default()).unwrap();
        mem.maintain(map("1000000000", 0)).unwrap();
        let r = mem.maintain(map("0111100000", 1)).unwrap();
        assert_eq!(r.dropped, vec![1]);
        assert_eq!(mem.len(), 1);
    }

    #[test]
    fn gate_file_roundtrip() {
        let g = map("1011000001", 42);
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DGGM");
        assert_eq!(buf[16], 0b0000_1101);
        assert_eq!(buf[17], 0b0000_0010);
        assert_eq!(buf.len(), 4 + 4 + 8 + 2 + 8);
        assert_eq!(GateMap::read_from(&mut buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn mas_penalty_zero_cases() {
        let t = [1.0, -2.0];
        assert_eq!(mas_penalty_grad(&t, &t, &[3.0, 4.0], 2.0), vec![0.0, 0.0]);
        assert_eq!(
            mas_penalty_grad(&t, &[0.0, 0.0], &[0.0, 0.0], 2.0),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn mas_penalty_grad_matches_finite_differences() {
        let mut rng = Rng::new(14);
        let mut t: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let p: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let o: Vec<f64> = (0..30).map(|_| rng.uniform()).collect();
        let g = mas_penalty_grad(&t, &p, &o, 0.7);
        let h = 1e-5;
        for k in 0..30 {
            let orig = t[k];
            t[k] = orig + h;
            let up = mas_penalty(&t, &p, &o, 0.7);
            t[k] = orig - h;
            let down = mas_penalty(&t, &p, &o, 0.7);
            t[k] = orig;
            assert!(((up - down) / (2.0 * h) - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn mas_saturation_grows_with_updates() {
        let mut rng = Rng::new(15);
        let k = 500;
        let mut acc = ImportanceAccumulator::new(k);
        acc.accumulate(&[(0..k).map(|_| rng.normal()).collect()])
            .unwrap();
        let mut sorted = acc.omega().to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[k / 2];
        let mut last = 0;
        for _ in 0..20 {
            acc.begin_update();
            acc.accumulate(&[(0..k).map(|_| rng.normal()).collect()])
                .unwrap();
            let above = acc.omega().iter().filter(|&&w| w > median).count();
            assert!(above >= last);
            last = above;
        }
        assert!(last > k * 9 / 10);
    }

    proptest! {
        #[test]
        fn dynamic_bound_holds(seed in any::<u64>(), density in 0.01f64..0.4, steps in 1usize..25) {
            let mut rng = Rng::new(seed);
            let k = 400;
            let mut mem = GateMemory::new(k, GateConfig::default()).unwrap();
            for s in 0..steps as u64 {
                let before = mem.overall_gate().popcount();
                let m = GateMap::from_bits((0..k).map(|_| rng.uniform() < density).collect(), s);
                let mut union = mem.overall_gate();
                union = GateMap::from_bits(union.bits().iter().zip(m.bits()).map(|(a, b)| *a || *b).collect(), s);
                prop_assert!(union.popcount() >= before);
                let r = mem.maintain(m).unwrap();
                if mem.len() >= 2 {
                    prop_assert!(r.popcount <= mem.eta_upper());
                }
            }
        }

        #[test]
        fn omega_is_monotone(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut acc = ImportanceAccumulator::new(20);
            let mut prev = acc.omega().to_vec();
            for _ in 0..5 {
                acc.begin_update();
                acc.accumulate(&[(0..20).map(|_| rng.normal()).collect()]).unwrap();
                for (a, b) in acc.omega().iter().zip(&prev) {
                    prop_assert!(a >= b);
                }
                prev = acc.omega().to_vec();
            }
        }
    }
}
