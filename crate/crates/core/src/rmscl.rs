//! Memory selection by sparse nonnegative reconstruction of the next frame's
//! pooled feature from the pooled features held in memory.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::memory::{MemorySlot, SampleMemory};
use crate::numerics::{channel_max_pool, FeatureGrid};
use crate::par::{self, Execution};
use crate::target_model::WeightedSample;

const RSS_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub grid_size: usize,
    /// Smallest grid value as a fraction of `λ_max`.
    pub grid_ratio: f64,
    /// Minimum ground-truth weight as a fraction of the largest selected weight.
    pub gt_floor_ratio: f64,
    pub execution: Execution,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_sweeps: 10_000,
            grid_size: 30,
            grid_ratio: 1e-4,
            gt_floor_ratio: 0.1,
            execution: Execution::Sequential,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tolerance > 0.0, "LASSO tolerance must be positive");
        ensure!(self.max_sweeps > 0, "LASSO max_sweeps must be positive");
        ensure!(self.grid_size > 0, "LASSO grid_size must be positive");
        ensure!(
            self.grid_ratio > 0.0 && self.grid_ratio <= 1.0,
            "LASSO grid_ratio must lie in (0, 1]"
        );
        ensure!(
            self.gt_floor_ratio >= 0.0,
            "gt_floor_ratio must be nonnegative"
        );
        Ok(())
    }
}

/// `min ½‖t − Dψ‖² + λ‖ψ‖₁  s.t. ψ ≥ 0`, with `D` stored column by column.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoProblem {
    pub columns: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub lambda: f64,
}

impl LassoProblem {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.columns.is_empty(), "LASSO dictionary has no columns");
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda must be finite and nonnegative"
        );
        let n = self.target.len();
        for c in &self.columns {
            ensure!(
                c.len() == n,
                "dictionary column has {} rows, target has {n}",
                c.len()
            );
            ensure!(
                c.iter().all(|v| v.is_finite()),
                "dictionary entries must be finite"
            );
        }
        ensure!(
            self.target.iter().all(|v| v.is_finite()),
            "target entries must be finite"
        );
        Ok(())
    }

    pub fn residual(&self, psi: &[f64]) -> Vec<f64> {
        let mut r = self.target.clone();
        for (c, &p) in self.columns.iter().zip(psi) {
            if p != 0.0 {
                for (ri, ci) in r.iter_mut().zip(c) {
                    *ri -= p * ci;
                }
            }
        }
        r
    }

    pub fn objective(&self, psi: &[f64]) -> f64 {
        let r = self.residual(psi);
        0.5 * dot(&r, &r) + self.lambda * psi.iter().sum::<f64>()
    }

    /// `D_jᵀ t` for every column.
    pub fn correlations(&self) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, &self.target)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoSolution {
    pub psi: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cyclic coordinate descent, optionally warm-started.
///
/// Works on the Gram matrix `DᵀD` and correlations `Dᵀt`, keeping the
/// residual correlations `Dᵀ(t − Dψ)` current after every coordinate move.
pub fn solve_nn_lasso(
    problem: &LassoProblem,
    warm_start: Option<&[f64]>,
    cfg: &LassoConfig,
) -> Result<LassoSolution> {
    problem.validate()?;
    let gram = Gram::new(&problem.columns, &problem.target);
    gram.solve(problem.lambda, warm_start, cfg)
}

/// Inner products needed by coordinate descent, shared across a λ path.
struct Gram {
    m: usize,
    /// Row-major `DᵀD`.
    g: Vec<f64>,
    dt: Vec<f64>,
}

impl Gram {
    fn new(columns: &[Vec<f64>], target: &[f64]) -> Self {
        let m = columns.len();
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = dot(&columns[i], &columns[j]);
                g[i * m + j] = v;
                g[j * m + i] = v;
            }
        }
        Self {
            m,
            g,
            dt: columns.iter().map(|c| dot(c, target)).collect(),
        }
    }

    fn solve(
        &self,
        lambda: f64,
        warm_start: Option<&[f64]>,
        cfg: &LassoConfig,
    ) -> Result<LassoSolution> {
        let m = self.m;
        let norm = |j: usize| self.g[j * m + j];
        let mut psi = match warm_start {
            Some(w) => {
                ensure!(
                    w.len() == m,
                    "warm start has {} entries, expected {m}",
                    w.len()
                );
                (0..m)
                    .map(|j| if norm(j) > 0.0 { w[j].max(0.0) } else { 0.0 })
                    .collect()
            }
            None => vec![0.0; m],
        };
        // c_j = D_jᵀ(t − Dψ)
        let mut c = self.dt.clone();
        for (k, &p) in psi.iter().enumerate() {
            if p != 0.0 {
                for (j, cj) in c.iter_mut().enumerate() {
                    *cj -= self.g[j * m + k] * p;
                }
            }
        }
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < cfg.max_sweeps {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for j in 0..m {
                let z = norm(j);
                if z == 0.0 {
                    continue;
                }
                let rho = c[j] + z * psi[j];
                let next = ((rho - lambda) / z).max(0.0);
                let delta = next - psi[j];
                if delta != 0.0 {
                    let row = &self.g[j * m..(j + 1) * m];
                    for (ck, gk) in c.iter_mut().zip(row) {
                        *ck -= delta * gk;
                    }
                    psi[j] = next;
                }
                max_change = max_change.max(delta.abs());
            }
            if max_change < cfg.tolerance {
                converged = true;
                break;
            }
        }
        Ok(LassoSolution {
            psi,
            sweeps,
            converged,
        })
    }
}

/// Descending log-spaced grid from `λ_max = max_j |D_jᵀ t|` to `λ_max·ratio`;
/// `[0]` when `λ_max` is zero.
pub fn lambda_grid(columns: &[Vec<f64>], target: &[f64], size: usize, ratio: f64) -> Vec<f64> {
    let lmax = columns
        .iter()
        .map(|c| dot(c, target).abs())
        .fold(0.0, f64::max);
    if lmax == 0.0 || size == 0 {
        return vec![0.0];
    }
    if size == 1 {
        return vec![lmax];
    }
    let (hi, lo) = (lmax.ln(), (lmax * ratio).ln());
    let mut grid: Vec<f64> = (0..size)
        .map(|i| (hi + (lo - hi) * i as f64 / (size - 1) as f64).exp())
        .collect();
    // exp(ln(x)) may round above or below x; the first point must shrink everything exactly.
    grid[0] = lmax;
    grid
}

/// `n·ln(max(RSS, 1e-300)/n) + 2k`.
pub fn aic(rss: f64, n: usize, k: usize) -> f64 {
    let n = n as f64;
    n * (rss.max(RSS_FLOOR) / n).ln() + 2.0 * k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub support: usize,
    pub l1_norm: f64,
    pub aic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AicSelection {
    pub lambda: f64,
    pub psi: Vec<f64>,
    pub aic: f64,
    pub path: Vec<PathPoint>,
}

/// Walks `grid` in the given order with warm starts and keeps the AIC minimizer;
/// ties go to the larger λ.
pub fn select_lambda_aic(
    columns: &[Vec<f64>],
    target: &[f64],
    grid: &[f64],
    cfg: &LassoConfig,
) -> Result<AicSelection> {
    ensure!(!grid.is_empty(), "empty lambda grid");
    let n = target.len();
    let mut problem = LassoProblem {
        columns: columns.to_vec(),
        target: target.to_vec(),
        lambda: grid[0],
    };
    problem.validate()?;
    let gram = Gram::new(columns, target);
    let mut warm: Option<Vec<f64>> = None;
    let mut best: Option<AicSelection> = None;
    let mut path = Vec::with_capacity(grid.len());
    for &lambda in grid {
        ensure!(
            lambda >= 0.0 && lambda.is_finite(),
            "lambda must be finite and nonnegative"
        );
        problem.lambda = lambda;
        let sol = gram.solve(lambda, warm.as_deref(), cfg)?;
        let r = problem.residual(&sol.psi);
        let support = sol.psi.iter().filter(|&&p| p > 0.0).count();
        let score = aic(dot(&r, &r), n, support);
        path.push(PathPoint {
            lambda,
            support,
            l1_norm: sol.psi.iter().sum(),
            aic: score,
        });
        let better = match &best {
            None => true,
            Some(b) => score < b.aic || (score == b.aic && lambda > b.lambda),
        };
        if better {
            best = Some(AicSelection {
                lambda,
                psi: sol.psi.clone(),
                aic: score,
                path: Vec::new(),
            });
        }
        warm = Some(sol.psi);
    }
    let mut best = best.expect("grid is nonempty");
    best.path = path;
    Ok(best)
}

/// Flattened single-channel max-pooled feature.
pub fn pooled(feature: &FeatureGrid) -> Vec<f64> {
    channel_max_pool(feature).into_values()
}

/// The reweighted subset of memory used for one update.
#[derive(Clone, Debug)]
pub struct WorkingMemory<'a> {
    pub entries: Vec<(&'a MemorySlot, f64)>,
    pub lambda: f64,
    /// True when every coefficient was zero and the full memory with temporal weights was used.
    pub fallback: bool,
    pub path: Vec<PathPoint>,
}

impl<'a> WorkingMemory<'a> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, w)| *w).collect()
    }

    pub fn frame_indices(&self) -> Vec<u64> {
        self.entries.iter().map(|(s, _)| s.frame_index).collect()
    }

    pub fn samples(&self) -> Vec<WeightedSample<'a>> {
        self.entries
            .iter()
            .map(|(s, w)| WeightedSample::new(&s.feature, &s.mask, *w))
            .collect()
    }
}

/// Selects and reweights memory slots by reconstructing the pooled `next_feature`.
pub fn build_working_memory<'a>(
    mem: &'a SampleMemory,
    next_feature: &FeatureGrid,
    cfg: &LassoConfig,
    decay_base: f64,
) -> Result<WorkingMemory<'a>> {
    ensure!(!mem.is_empty(), "working memory from an empty memory");
    let slots = mem.slots();
    ensure!(
        slots[0].feature.dims() == next_feature.dims(),
        "next feature dims {:?} differ from memory dims {:?}",
        next_feature.dims(),
        slots[0].feature.dims()
    );
    let columns = par::map(cfg.execution, slots, |s| pooled(&s.feature));
    let target = pooled(next_feature);
    let grid = lambda_grid(&columns, &target, cfg.grid_size, cfg.grid_ratio);
    let sel = select_lambda_aic(&columns, &target, &grid, cfg)?;

    let max_psi = sel.psi.iter().copied().fold(0.0, f64::max);
    if max_psi <= 0.0 {
        let d = mem.temporal_weights(decay_base)?;
        return Ok(WorkingMemory {
            entries: slots.iter().zip(d).collect(),
            lambda: sel.lambda,
            fallback: true,
            path: sel.path,
        });
    }
    let floor = cfg.gt_floor_ratio * max_psi;
    let entries = slots
        .iter()
        .zip(&sel.psi)
        .filter_map(|(s, &p)| {
            if s.is_ground_truth {
                Some((s, p.max(floor)))
            } else {
                (p > 0.0).then_some((s, p))
            }
        })
        .collect();
    Ok(WorkingMemory {
        entries,
        lambda: sel.lambda,
        fallback: false,
        path: sel.path,
    })
}
