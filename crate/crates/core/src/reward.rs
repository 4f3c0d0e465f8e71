//! Overlap-degree reward between a projected binary vessel map and a DSA image.
//!
//! With `fg` the mean DSA intensity under the vessel mask and `bg` the mean
//! intensity under the background mask, the reward is `-ln(fg / bg)`.
//! Contrast-filled vessels are dark in DSA, so a well aligned mask has a
//! low `fg`, a high `bg`, and a large positive reward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GrayImage;
use crate::scalar::{fixed_tree_sum, Scalar};

/// Relative floor applied to DSA intensities in the default variant.
pub const INTENSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardVariant {
    /// Clamp the DSA to `[floor * i_max, i_max]` and average under the masks.
    #[default]
    MaskByP,
    /// Only count pixels whose masked intensity is strictly positive.
    LiteralExclusion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardOptions<T> {
    pub variant: RewardVariant,
    /// Upper intensity bound; `None` uses the image's own maximum, which
    /// keeps the reward invariant to intensity scaling.
    pub i_max: Option<T>,
}

impl<T> Default for RewardOptions<T> {
    fn default() -> Self {
        RewardOptions {
            variant: RewardVariant::MaskByP,
            i_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardValue<T> {
    pub value: T,
    pub fg_mean: T,
    pub bg_mean: T,
}

/// Computes the overlap reward of binary map `p` against DSA image `f`.
pub fn overlap_reward<T: Scalar>(
    p: &GrayImage<T>,
    f: &GrayImage<T>,
    opts: &RewardOptions<T>,
) -> Result<RewardValue<T>> {
    if !p.same_dims(f) {
        return Err(Error::DimMismatch(format!(
            "binary map {:?} vs DSA {:?}",
            p.dims(),
            f.dims()
        )));
    }
    if let Some(v) = p.pixels().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument(format!("binary map holds non-binary value {v}")));
    }
    let n_fg = p.pixels().iter().filter(|&&v| v == T::one()).count();
    if n_fg == 0 {
        return Err(Error::NoForeground);
    }
    if n_fg == p.pixels().len() {
        return Err(Error::NoBackground);
    }

    let (sum_fg, cnt_fg, sum_bg, cnt_bg) = match opts.variant {
        RewardVariant::MaskByP => {
            let i_max = opts.i_max.unwrap_or_else(|| f.max_value());
            if !(i_max > T::zero()) {
                return Err(Error::DegenerateIntensity("DSA image is all zero".into()));
            }
            let lo = i_max * T::lit(INTENSITY_FLOOR);
            let clamp = |v: T| v.max(lo).min(i_max);
            let pairs = || p.pixels().iter().zip(f.pixels());
            let sum_fg = fixed_tree_sum(pairs().map(|(&m, &v)| if m == T::one() { clamp(v) } else { T::zero() }));
            let sum_bg = fixed_tree_sum(pairs().map(|(&m, &v)| if m == T::one() { T::zero() } else { clamp(v) }));
            (sum_fg, n_fg, sum_bg, p.pixels().len() - n_fg)
        }
        RewardVariant::LiteralExclusion => {
            let pairs = || p.pixels().iter().zip(f.pixels());
            let in_fg = |m: T, v: T| m == T::one() && v > T::zero();
            let in_bg = |m: T, v: T| m == T::zero() && v > T::zero();
            let sum_fg = fixed_tree_sum(pairs().map(|(&m, &v)| if in_fg(m, v) { v } else { T::zero() }));
            let sum_bg = fixed_tree_sum(pairs().map(|(&m, &v)| if in_bg(m, v) { v } else { T::zero() }));
            let cnt_fg = pairs().filter(|(&m, &v)| in_fg(m, v)).count();
            let cnt_bg = pairs().filter(|(&m, &v)| in_bg(m, v)).count();
            (sum_fg, cnt_fg, sum_bg, cnt_bg)
        }
    };
    if cnt_fg == 0 || cnt_bg == 0 {
        return Err(Error::DegenerateIntensity(format!(
            "no positive intensities under {} mask",
            if cnt_fg == 0 { "vessel" } else { "background" }
        )));
    }
    let fg_mean = sum_fg / T::from_usize_exact(cnt_fg);
    let bg_mean = sum_bg / T::from_usize_exact(cnt_bg);
    if !(fg_mean > T::zero() && bg_mean > T::zero()) {
        return Err(Error::DegenerateIntensity(format!("fg {fg_mean}, bg {bg_mean}")));
    }
    Ok(RewardValue {
        value: -(fg_mean / bg_mean).ln(),
        fg_mean,
        bg_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: usize, h: usize, px: Vec<f64>) -> GrayImage<f64> {
        GrayImage::new(w, h, 1.0, px).unwrap()
    }

    /// Direct double loop over rows and columns.
    fn naive(p: &GrayImage<f64>, f: &GrayImage<f64>) -> f64 {
        let i_max = f.pixels().iter().cloned().fold(0.0, f64::max);
        let (mut sf, mut nf, mut sb, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..p.height() {
            for x in 0..p.width() {
                let v = f.get(x, y).clamp(1e-6 * i_max, i_max);
                if p.get(x, y) == 1.0 {
                    sf += v;
                    nf += 1.0;
                } else {
                    sb += v;
                    nb += 1.0;
                }
            }
        }
        -((sf / nf) / (sb / nb)).ln()
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (GrayImage<f64>, GrayImage<f64>) {
        loop {
            let p: Vec<f64> = (0..n * n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
            let ones = p.iter().filter(|&&v| v == 1.0).count();
            if ones > 0 && ones < n * n {
                let f = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
                return (img(n, n, p), img(n, n, f));
            }
        }
    }

    #[test]
    fn two_by_two_example() {
        let p = img(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let f = img(2, 2, vec![0.1, 0.9, 0.9, 0.9]);
        let r = overlap_reward(&p, &f, &RewardOptions::default()).unwrap();
        assert!((r.fg_mean - 0.1).abs() < 1e-15);
        assert!((r.bg_mean - 0.9).abs() < 1e-15);
        assert!((r.value - 9f64.ln()).abs() < 1e-12);
        assert!((r.value - 2.1972).abs() < 1e-4);
    }

    #[test]
    fn uniform_image_gives_zero() {
        let p = img(3, 1, vec![1.0, 0.0, 1.0]);
        for c in [0.3, 1.0, 42.0] {
            let f = img(3, 1, vec![c; 3]);
            assert_eq!(overlap_reward(&p, &f, &RewardOptions::default()).unwrap().value, 0.0);
        }
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (p, f) = random_pair(&mut rng, 32);
            let got = overlap_reward(&p, &f, &RewardOptions::default()).unwrap().value;
            let want = naive(&p, &f);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-300), "{got} vs {want}");
        }
    }

    #[test]
    fn error_cases() {
        let f = img(2, 1, vec![0.5, 0.5]);
        let opts = RewardOptions::default();
        assert!(matches!(overlap_reward(&img(2, 1, vec![0.0, 0.0]), &f, &opts), Err(Error::NoForeground)));
        assert!(matches!(overlap_reward(&img(2, 1, vec![1.0, 1.0]), &f, &opts), Err(Error::NoBackground)));
        assert!(matches!(overlap_reward(&img(1, 2, vec![1.0, 0.0]), &f, &opts), Err(Error::DimMismatch(_))));
        assert!(matches!(overlap_reward(&img(2, 1, vec![0.5, 0.0]), &f, &opts), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            overlap_reward(&img(2, 1, vec![1.0, 0.0]), &img(2, 1, vec![0.0, 0.0]), &opts),
            Err(Error::DegenerateIntensity(_))
        ));
    }

    #[test]
    fn zero_vessel_pixels_differ_between_variants() {
        // A black vessel pixel is kept by the clamped variant and dropped by the literal one.
        let p = img(4, 1, vec![1.0, 1.0, 0.0, 0.0]);
        let f = img(4, 1, vec![0.0, 0.4, 0.8, 0.8]);
        let clamped = overlap_reward(&p, &f, &RewardOptions::default()).unwrap();
        let literal = overlap_reward(
            &p,
            &f,
            &RewardOptions {
                variant: RewardVariant::LiteralExclusion,
                i_max: None,
            },
        )
        .unwrap();
        assert!((literal.fg_mean - 0.4).abs() < 1e-15);
        assert!((clamped.fg_mean - (0.4 + 0.8e-6) / 2.0).abs() < 1e-15);
        assert!(clamped.value > literal.value);
    }

    #[test]
    fn exact_mask_beats_mixed_masks() {
        let (a, b) = (0.2, 0.9);
        let truth: Vec<f64> = (0..64).map(|i| ((i % 8) >= 2 && (i % 8) < 5) as u8 as f64).collect();
        let f = img(8, 8, truth.iter().map(|&m| if m == 1.0 { a } else { b }).collect());
        let best = overlap_reward(&img(8, 8, truth.clone()), &f, &RewardOptions::default()).unwrap();
        assert!((best.value - (b / a).ln()).abs() < 1e-12);
        let shifted: Vec<f64> = (0..64).map(|i| ((i % 8) >= 3 && (i % 8) < 6) as u8 as f64).collect();
        let worse = overlap_reward(&img(8, 8, shifted), &f, &RewardOptions::default()).unwrap();
        assert!(worse.value < best.value);
    }

    #[test]
    fn works_in_single_precision() {
        let p = GrayImage::<f32>::new(2, 2, 1.0, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let f = GrayImage::<f32>::new(2, 2, 1.0, vec![0.1, 0.9, 0.9, 0.9]).unwrap();
        let r = overlap_reward(&p, &f, &RewardOptions::default()).unwrap();
        assert!((r.value - 9f32.ln()).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn scale_invariant(seed in 0u64..10_000, c in 0.01f64..1000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, f) = random_pair(&mut rng, 12);
            let r0 = overlap_reward(&p, &f, &RewardOptions::default()).unwrap().value;
            let r1 = overlap_reward(&p, &f.map(|v| v * c).unwrap(), &RewardOptions::default()).unwrap().value;
            prop_assert!((r0 - r1).abs() < 1e-9);
        }

        #[test]
        fn inversion_flips_sign(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, f) = random_pair(&mut rng, 10);
            let opts = RewardOptions { variant: RewardVariant::MaskByP, i_max: Some(1.0) };
            let eps = 1e-6;
            let inv = f.map(|v| 1.0 + eps - v).unwrap();
            let inv_opts = RewardOptions { variant: RewardVariant::MaskByP, i_max: Some(1.0 + eps) };
            let r = overlap_reward(&p, &f, &opts).unwrap();
            let ri = overlap_reward(&p, &inv, &inv_opts).unwrap();
            let d = r.fg_mean - r.bg_mean;
            let di = ri.fg_mean - ri.bg_mean;
            prop_assume!(d.abs() > 1e-9);
            prop_assert!(d.signum() == -di.signum());
            prop_assert!(r.value.signum() == -ri.value.signum());
        }
    }
}
