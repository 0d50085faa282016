use serde::{Deserialize, Serialize};

use super::grid::FeatureGrid;
use crate::error::{ensure, Result};

pub const KERNEL_SIZE: usize = 3;
pub const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

/// A `C_out×C_in×3×3` weight tensor in canonical (out, in, row, column) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    c_out: usize,
    c_in: usize,
    data: Vec<f64>,
}

impl ConvWeights {
    pub fn new(c_out: usize, c_in: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            c_out > 0 && c_in > 0,
            "kernel channel counts must be positive"
        );
        ensure!(
            data.len() == c_out * c_in * TAPS,
            "kernel {c_out}x{c_in}x3x3 needs {} values, got {}",
            c_out * c_in * TAPS,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "kernel values must be finite"
        );
        Ok(Self { c_out, c_in, data })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            c_out,
            c_in,
            data: vec![0.0; c_out * c_in * TAPS],
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    /// Total parameter count `C_out·C_in·9`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * KERNEL_SIZE + ky) * KERNEL_SIZE + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.index(o, i, ky, kx)]
    }

    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f64) {
        let idx = self.index(o, i, ky, kx);
        self.data[idx] = v;
    }
}

/// Valid output range along one axis for kernel offset `k` (0..3) with padding 1.
#[inline]
fn span(k: usize, len: usize) -> (usize, usize) {
    // out[y] reads in[y + k - 1]
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo, hi)
}

/// 3×3 cross-correlation with zero padding 1 (output keeps `H×W`).
pub fn conv2d(input: &FeatureGrid, kernel: &ConvWeights) -> Result<FeatureGrid> {
    ensure!(
        kernel.c_in == input.channels(),
        "kernel expects {} input channels, feature has {}",
        kernel.c_in,
        input.channels()
    );
    let (h, w) = (input.height(), input.width());
    let mut out = vec![0.0; kernel.c_out * h * w];
    for o in 0..kernel.c_out {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        accumulate_plane(plane, input, kernel, o);
    }
    FeatureGrid::new(kernel.c_out, h, w, out)
}

/// Adds the response of output channel `o` into `plane` (length `H·W`).
pub(crate) fn accumulate_plane(
    plane: &mut [f64],
    input: &FeatureGrid,
    kernel: &ConvWeights,
    o: usize,
) {
    let (h, w) = (input.height(), input.width());
    for i in 0..kernel.c_in {
        let src = input.channel(i);
        for ky in 0..KERNEL_SIZE {
            let (y0, y1) = span(ky, h);
            for kx in 0..KERNEL_SIZE {
                let wt = kernel.get(o, i, ky, kx);
                if wt == 0.0 {
                    continue;
                }
                let (x0, x1) = span(kx, w);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let dst = &mut plane[y * w..(y + 1) * w];
                    let row = &src[sy * w..(sy + 1) * w];
                    for x in x0..x1 {
                        dst[x] += wt * row[x + kx - 1];
                    }
                }
            }
        }
    }
}

/// Correlates an `H×W` upstream signal with every shifted input channel:
/// `out[i·9 + ky·3 + kx] = Σ_p upstream[p] · input[i, p + (ky−1, kx−1)]`.
///
/// This is the weight gradient of a single output channel of [`conv2d`].
pub fn correlate_taps(input: &FeatureGrid, upstream: &[f64]) -> Vec<f64> {
    let (h, w) = (input.height(), input.width());
    debug_assert_eq!(upstream.len(), h * w);
    let mut out = vec![0.0; input.channels() * TAPS];
    for i in 0..input.channels() {
        let src = input.channel(i);
        for ky in 0..KERNEL_SIZE {
            let (y0, y1) = span(ky, h);
            for kx in 0..KERNEL_SIZE {
                let (x0, x1) = span(kx, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let up = &upstream[y * w..(y + 1) * w];
                    let row = &src[sy * w..(sy + 1) * w];
                    for x in x0..x1 {
                        acc += up[x] * row[x + kx - 1];
                    }
                }
                out[i * TAPS + ky * KERNEL_SIZE + kx] = acc;
            }
        }
    }
    out
}

/// Max over channels at each spatial position: `C×H×W → 1×H×W`.
pub fn channel_max_pool(input: &FeatureGrid) -> FeatureGrid {
    let mut pooled = input.channel(0).to_vec();
    for c in 1..input.channels() {
        for (p, &v) in pooled.iter_mut().zip(input.channel(c)) {
            if v > *p {
                *p = v;
            }
        }
    }
    FeatureGrid::new(1, input.height(), input.width(), pooled)
        .expect("pooling preserves finiteness and shape")
}
