//! Dense grids, 3×3 convolution, pooling, percentiles and seeded randomness.

mod conv;
mod grid;
mod rng;
mod stats;

pub use conv::{channel_max_pool, conv2d, correlate_taps, ConvWeights, KERNEL_SIZE, TAPS};
pub use grid::{FeatureGrid, MaskGrid, MaskKind};
pub use rng::Rng;
pub(crate) use stats::nearest_rank_index;
pub use stats::{mean, percentile, std_dev};

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let grid = |rng: &mut Rng| FeatureGrid::new(2, 4, 5, (0..40).map(|_| rng.normal()).collect()).unwrap();
            let x = grid(&mut rng);
            let z = grid(&mut rng);
            let k = ConvWeights::new(2, 2, (0..36).map(|_| rng.normal()).collect()).unwrap();
            let lhs = conv2d(&x.axpby(a, &z, b).unwrap(), &k).unwrap();
            let cx = conv2d(&x, &k).unwrap();
            let cz = conv2d(&z, &k).unwrap();
            let rhs = cx.axpby(a, &cz, b).unwrap();
            for (l, r) in lhs.values().iter().zip(rhs.values()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn pooled_value_is_a_channel_max(seed in any::<u64>(), c in 1usize..6) {
            let mut rng = Rng::new(seed);
            let x = FeatureGrid::new(c, 3, 4, (0..c * 12).map(|_| rng.normal()).collect()).unwrap();
            let p = channel_max_pool(&x);
            for y in 0..3 {
                for xx in 0..4 {
                    let v = p.at(0, y, xx);
                    prop_assert!((0..c).all(|ch| v >= x.at(ch, y, xx)));
                    prop_assert!((0..c).any(|ch| v == x.at(ch, y, xx)));
                }
            }
        }
    }
}
