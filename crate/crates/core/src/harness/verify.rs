//! Self-contained oracle checks: finite-difference gradients, LASSO optimality
//! against an independent solver, gate bounds and memory accounting.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::grcl::{mas_penalty, mas_penalty_grad, GateConfig};
use crate::memory::{canonical_memory_ratio, MemorySlot, SampleMemory};
use crate::numerics::{ConvWeights, FeatureGrid, MaskGrid, Rng};
use crate::rmscl::{build_working_memory, solve_nn_lasso, LassoConfig, LassoProblem};
use crate::target_model::{
    loss_and_grad, LossConfig, TargetModel, WeightedSample, CANONICAL_PARAM_COUNT,
};

/// Expected ratio of one memory unit to one gate map at canonical scale.
pub const MEMORY_RATIO: f64 = 693.35;
pub const MEMORY_RATIO_TOL: f64 = 0.01;
/// Relative tolerance for analytic against central-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// KKT residual and objective-gap tolerance for the LASSO solver.
pub const LASSO_TOL: f64 = 1e-6;

const FD_STEP: f64 = 1e-5;
/// Components below this fraction of the largest one are not significant.
const SIGNIFICANT: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Runs every oracle with its default trial count.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        memory_accounting(),
        gradient_oracle(50, seed),
        lasso_oracle(100, seed),
        gate_bounds(),
    ]
}

pub fn memory_accounting() -> Check {
    timed("memory-accounting", || {
        let r = canonical_memory_ratio();
        Ok((
            (r - MEMORY_RATIO).abs() <= MEMORY_RATIO_TOL,
            format!("ratio {r:.4}"),
        ))
    })
}

/// Canonical gate bounds: `η_l = ⌈0.07K⌉`, `η_u = ⌊0.15K⌋`.
pub fn gate_bounds() -> Check {
    timed("gate-bounds", || {
        let cfg = GateConfig::default();
        let k = CANONICAL_PARAM_COUNT;
        let (lo, hi) = (cfg.eta_lower(k), cfg.eta_upper(k));
        // Rounded to the nearest thousand these read 5000 and 11000.
        let ok = (lo, hi) == (5161, 11059)
            && (lo as f64 / 1000.0).round() == 5.0
            && (hi as f64 / 1000.0).round() == 11.0;
        Ok((ok, format!("K={k} eta_l={lo} eta_u={hi}")))
    })
}

/// Worst relative error over significant components; errors on small
/// components are measured against the largest magnitude instead.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let mag = a.abs().max(n.abs());
            if mag >= SIGNIFICANT * scale {
                (a - n).abs() / mag
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + FD_STEP;
            let up = f(&probe);
            probe[k] = orig - FD_STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_feature(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
    FeatureGrid::new(c, h, w, (0..c * h * w).map(|_| rng.normal()).collect()).expect("valid dims")
}

fn random_mask(rng: &mut Rng, h: usize, w: usize) -> MaskGrid {
    MaskGrid::binary(
        h,
        w,
        (0..h * w)
            .map(|_| f64::from(u8::from(rng.uniform() < 0.4)))
            .collect(),
    )
    .expect("valid dims")
}

fn with_params(model: &TargetModel, theta: &[f64]) -> TargetModel {
    let w = model.weights();
    TargetModel::from_weights(
        ConvWeights::new(w.c_out(), w.c_in(), theta.to_vec()).expect("same shape"),
    )
}

/// Tiny random instances (K ≤ 108) of the weighted loss, the MAS penalty and
/// the ψ-weighted working-memory loss.
pub fn gradient_oracle(trials: usize, seed: u64) -> Check {
    timed("gradient-oracle", || {
        let mut worst = [0.0f64; 3];
        for t in 0..trials {
            let mut rng = Rng::derive(seed, 101, t as u64);
            let (c_out, c_in) = (1 + rng.below(2), 1 + rng.below(6));
            let (h, w) = (3 + rng.below(4), 3 + rng.below(4));
            let k = c_out * c_in * 9;
            let model = TargetModel::from_weights(ConvWeights::new(
                c_out,
                c_in,
                (0..k).map(|_| 0.3 * rng.normal()).collect(),
            )?);
            let cfg = LossConfig {
                l2_lambda: rng.range(0.0, 0.1),
                ..Default::default()
            };

            // Temporally weighted memory batch.
            let n = 1 + rng.below(3);
            let feats: Vec<FeatureGrid> = (0..n)
                .map(|_| random_feature(&mut rng, c_in, h, w))
                .collect();
            let masks: Vec<MaskGrid> = (0..n).map(|_| random_mask(&mut rng, h, w)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.range(0.2, 1.5)).collect();
            let batch: Vec<WeightedSample> = (0..n)
                .map(|i| WeightedSample::new(&feats[i], &masks[i], weights[i]))
                .collect();
            let g = loss_and_grad(&model, &batch, &cfg)?;
            let fd = central_differences(model.params(), |th| {
                loss_and_grad(&with_params(&model, th), &batch, &cfg).map_or(f64::NAN, |r| r.loss)
            });
            worst[0] = worst[0].max(gradient_error(&g.grad, &fd));

            // MAS penalty.
            let prev: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let omega: Vec<f64> = (0..k).map(|_| rng.range(0.0, 2.0)).collect();
            let gamma = rng.range(0.1, 3.0);
            let theta = model.params();
            let fd = central_differences(theta, |th| mas_penalty(th, &prev, &omega, gamma));
            worst[1] = worst[1].max(gradient_error(
                &mas_penalty_grad(theta, &prev, &omega, gamma),
                &fd,
            ));

            // ψ-weighted loss on a LASSO-selected working memory.
            let mut mem = SampleMemory::new(8, 1)?;
            for (i, (f, m)) in feats.iter().zip(&masks).enumerate() {
                mem.insert(MemorySlot::new(
                    f.clone(),
                    m.clone(),
                    i as u64,
                    i as u64,
                    i == 0,
                )?)?;
            }
            let next =
                feats[rng.below(n)].axpby(1.0, &random_feature(&mut rng, c_in, h, w), 0.1)?;
            let wm = build_working_memory(&mem, &next, &LassoConfig::default(), 0.9)?;
            let batch = wm.samples();
            let g = loss_and_grad(&model, &batch, &cfg)?;
            let fd = central_differences(model.params(), |th| {
                loss_and_grad(&with_params(&model, th), &batch, &cfg).map_or(f64::NAN, |r| r.loss)
            });
            worst[2] = worst[2].max(gradient_error(&g.grad, &fd));
        }
        let ok = worst.iter().all(|&e| e <= GRAD_REL_TOL);
        Ok((
            ok,
            format!(
                "{trials} instances, worst rel. error loss {:.2e} mas {:.2e} working-memory {:.2e}",
                worst[0], worst[1], worst[2]
            ),
        ))
    })
}

/// Largest KKT violation of `psi` for the nonnegative LASSO.
pub fn kkt_violation(p: &LassoProblem, psi: &[f64]) -> f64 {
    let r = p.residual(psi);
    p.columns
        .iter()
        .zip(psi)
        .map(|(col, &v)| {
            let c: f64 = col.iter().zip(&r).map(|(a, b)| a * b).sum();
            if v > 0.0 {
                (c - p.lambda).abs()
            } else {
                (c - p.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Accelerated projected gradient (FISTA with restarts) on the Gram system,
/// an independent solver used only as an oracle.
pub fn projected_gradient_lasso(p: &LassoProblem, tolerance: f64, max_iter: usize) -> Vec<f64> {
    let m = p.columns.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = p
        .columns
        .iter()
        .map(|a| p.columns.iter().map(|b| dot(a, b)).collect())
        .collect();
    let dt: Vec<f64> = p.columns.iter().map(|c| dot(c, &p.target)).collect();
    // Largest eigenvalue by power iteration, padded for safety.
    let mut v = vec![1.0; m];
    let mut l = 0.0;
    for _ in 0..500 {
        let gv: Vec<f64> = gram.iter().map(|row| dot(row, &v)).collect();
        let norm = dot(&gv, &gv).sqrt();
        if norm == 0.0 {
            return vec![0.0; m];
        }
        l = norm / dot(&v, &v).sqrt();
        v = gv.iter().map(|x| x / norm).collect();
    }
    let step = 1.0 / (1.01 * l);
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|j| dot(&gram[j], x) - dt[j] + p.lambda)
            .collect()
    };
    let mut x = vec![0.0; m];
    let mut y = x.clone();
    let mut tk = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    for _ in 0..max_iter {
        let g = grad(&y);
        let next: Vec<f64> = y
            .iter()
            .zip(&g)
            .map(|(yi, gi)| (yi - step * gi).max(0.0))
            .collect();
        let obj = p.objective(&next);
        let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        if obj > prev_obj {
            // Restart momentum when the objective goes up.
            y = x.clone();
            tk = 1.0;
            continue;
        }
        let change = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        y = next
            .iter()
            .zip(&x)
            .map(|(n, o)| n + (tk - 1.0) / t_next * (n - o))
            .collect();
        x = next;
        tk = t_next;
        prev_obj = obj;
        if change < tolerance {
            break;
        }
    }
    x
}

pub fn random_lasso_problem(rng: &mut Rng, m: usize, n: usize, lambda: f64) -> LassoProblem {
    LassoProblem {
        columns: (0..m)
            .map(|_| (0..n).map(|_| rng.normal()).collect())
            .collect(),
        target: (0..n).map(|_| rng.normal()).collect(),
        lambda,
    }
}

/// Random problems with up to 16 columns of up to 32 entries.
pub fn lasso_oracle(trials: usize, seed: u64) -> Check {
    timed("lasso-oracle", || {
        let (mut worst_kkt, mut worst_gap) = (0.0f64, 0.0f64);
        let cfg = LassoConfig::default();
        for t in 0..trials {
            let mut rng = Rng::derive(seed, 102, t as u64);
            let (m, n) = (1 + rng.below(16), 2 + rng.below(31));
            let mut p = random_lasso_problem(&mut rng, m, n, 0.0);
            let lmax = p.correlations().iter().fold(0.0f64, |a, c| a.max(*c));
            p.lambda = rng.range(0.0, 1.0) * lmax.max(0.0);
            let sol = solve_nn_lasso(&p, None, &cfg)?;
            let oracle = projected_gradient_lasso(&p, 1e-13, 200_000);
            worst_kkt = worst_kkt.max(kkt_violation(&p, &sol.psi));
            worst_gap = worst_gap.max((p.objective(&sol.psi) - p.objective(&oracle)).abs());
        }
        let ok = worst_kkt <= LASSO_TOL && worst_gap <= LASSO_TOL;
        Ok((ok, format!("{trials} problems, worst KKT residual {worst_kkt:.2e}, worst objective gap {worst_gap:.2e}")))
    })
}
