//! Translation profiling for a fixed rotation.
//!
//! An in-plane pose translation moves the silhouette rigidly across the image
//! (up to rounding and clipping at the volume border), so one projection
//! scores every whole-pixel shift at once: the vessel sum under the shifted
//! mask comes from row prefix sums over the mask's runs.

use crate::geometry::{rotation_matrix, GrayImage};
use crate::reward::{RewardOptions, RewardVariant, INTENSITY_FLOOR};

pub(crate) struct ShiftScreen {
    width: usize,
    height: usize,
    /// Row prefix sums of the clamped DSA, `width + 1` entries per row.
    prefix: Vec<f64>,
    total: f64,
    /// Spacing of the first pass over shifts, pixels.
    stride: usize,
}

/// One screened translation: offset in pixels and the reward of the shifted mask.
pub(crate) type Peak = ([f64; 2], f64);

impl ShiftScreen {
    /// `None` for reward variants whose pixel selection depends on the mask
    /// in ways a prefix sum cannot express.
    pub(crate) fn new(dsa: &GrayImage<f64>, opts: &RewardOptions<f64>) -> Option<Self> {
        if opts.variant != RewardVariant::MaskByP {
            return None;
        }
        let i_max = opts.i_max.unwrap_or_else(|| dsa.max_value());
        if !(i_max > 0.0) {
            return None;
        }
        let lo = i_max * INTENSITY_FLOOR;
        let (w, h) = dsa.dims();
        let mut prefix = vec![0.0; h * (w + 1)];
        for y in 0..h {
            let row = &mut prefix[y * (w + 1)..(y + 1) * (w + 1)];
            for x in 0..w {
                row[x + 1] = row[x] + dsa.get(x, y).clamp(lo, i_max);
            }
        }
        let total = (0..h).map(|y| prefix[y * (w + 1) + w]).sum();
        Some(ShiftScreen {
            width: w,
            height: h,
            prefix,
            total,
            stride: 2,
        })
    }

    /// Best whole-pixel shifts of `mask`, rendered with rotation `(r_z, r_y)`
    /// at translation offset `origin` (pixels), whose offset stays within
    /// `half_px`. Peaks closer than `radius` pixels to a better one are dropped.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn peaks(
        &self,
        mask: &GrayImage<f64>,
        r_z: f64,
        r_y: f64,
        origin: [f64; 2],
        half_px: f64,
        k: usize,
        radius: f64,
    ) -> Vec<Peak> {
        let runs = runs(mask);
        if runs.is_empty() {
            return Vec::new();
        }
        // image shift = M * offset, the in-plane block of the rotation
        let r = rotation_matrix(r_z, r_y);
        let m = [[r[0][0], r[0][1]], [r[1][0], r[1][1]]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-9 {
            return Vec::new();
        }
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        // shift window: the bounds box around the initial pose, seen from `origin`
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for cx in [-half_px, half_px] {
            for cy in [-half_px, half_px] {
                let (ox, oy) = (cx - origin[0], cy - origin[1]);
                for a in 0..2 {
                    let d = m[a][0] * ox + m[a][1] * oy;
                    lo[a] = lo[a].min(d);
                    hi[a] = hi[a].max(d);
                }
            }
        }
        let lo = lo.map(|v| v.ceil() as i64);
        let hi = hi.map(|v| v.floor() as i64);
        let n_all = (self.width * self.height) as f64;
        let w = self.width as i64;
        let h = self.height as i64;

        let score = |dx: i64, dy: i64| -> Option<Peak> {
            let (fx, fy) = (dx as f64, dy as f64);
            let off = [
                origin[0] + inv[0][0] * fx + inv[0][1] * fy,
                origin[1] + inv[1][0] * fx + inv[1][1] * fy,
            ];
            if off[0].abs() > half_px + 1e-9 || off[1].abs() > half_px + 1e-9 {
                return None;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for &(y, x0, x1) in &runs {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let a = (x0 + dx).max(0);
                let b = (x1 + dx).min(w);
                if a < b {
                    let row = yy as usize * (self.width + 1);
                    sum += self.prefix[row + b as usize] - self.prefix[row + a as usize];
                    n += (b - a) as usize;
                }
            }
            if n == 0 || n as f64 == n_all || self.total - sum <= 0.0 {
                return None;
            }
            let fg = sum / n as f64;
            let bg = (self.total - sum) / (n_all - n as f64);
            Some((off, -(fg / bg).ln()))
        };

        // every other shift first, then the full neighbourhood of the best ones
        let stride = self.stride as i64;
        let mut coarse: Vec<([i64; 2], f64)> = Vec::new();
        for dy in (lo[1]..=hi[1]).filter(|d| d.rem_euclid(stride) == 0) {
            for dx in (lo[0]..=hi[0]).filter(|d| d.rem_euclid(stride) == 0) {
                if let Some((_, v)) = score(dx, dy) {
                    coarse.push(([dx, dy], v));
                }
            }
        }
        coarse.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut found: Vec<Peak> = Vec::new();
        let mut done = std::collections::HashSet::new();
        for (d, _) in coarse.iter().take(if stride == 1 { usize::MAX } else { 8 * k.min(coarse.len()).max(1) }) {
            for ey in -(stride - 1)..=(stride - 1) {
                for ex in -(stride - 1)..=(stride - 1) {
                    let q = [d[0] + ex, d[1] + ey];
                    if done.insert(q) {
                        if let Some(p) = score(q[0], q[1]) {
                            found.push(p);
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut out: Vec<Peak> = Vec::with_capacity(k.min(found.len()));
        for p in found {
            if out.len() == k {
                break;
            }
            let near = out
                .iter()
                .any(|q| (q.0[0] - p.0[0]).abs() <= radius && (q.0[1] - p.0[1]).abs() <= radius);
            if !near {
                out.push(p);
            }
        }
        out
    }
}

/// Horizontal runs `(y, x_start, x_end)` of mask pixels equal to one.
fn runs(mask: &GrayImage<f64>) -> Vec<(i64, i64, i64)> {
    let (w, h) = mask.dims();
    let mut out = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if mask.get(x, y) == 1.0 {
                let s = x;
                while x < w && mask.get(x, y) == 1.0 {
                    x += 1;
                }
                out.push((y as i64, s as i64, x as i64));
            } else {
                x += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::overlap_reward;

    fn shifted(mask: &GrayImage<f64>, dx: i64, dy: i64) -> GrayImage<f64> {
        let (w, h) = mask.dims();
        let mut out = GrayImage::filled(w, h, mask.spacing(), 0.0).unwrap();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                    out.set(x as usize, y as usize, mask.get(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    #[test]
    fn screened_reward_matches_shifted_mask() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (20, 16);
        let dsa = GrayImage::new(w, h, 1.0, (0..w * h).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
        let mut mask = GrayImage::filled(w, h, 1.0, 0.0).unwrap();
        for _ in 0..40 {
            mask.set(rng.random_range(0..w), rng.random_range(0..h), 1.0);
        }
        let opts = RewardOptions::default();
        let mut screen = ShiftScreen::new(&dsa, &opts).unwrap();
        screen.stride = 1;
        // zero rotation: image shift equals the pixel offset
        let origin = [2.0, -1.0];
        let peaks = screen.peaks(&mask, 0.0, 0.0, origin, 6.0, usize::MAX, -1.0);
        assert_eq!(peaks.len(), 13 * 13);
        for (off, v) in peaks {
            assert!(off[0].abs() <= 6.0 && off[1].abs() <= 6.0);
            let (dx, dy) = ((off[0] - origin[0]).round() as i64, (off[1] - origin[1]).round() as i64);
            let want = overlap_reward(&shifted(&mask, dx, dy), &dsa, &opts).unwrap().value;
            assert!((v - want).abs() < 1e-9 * want.abs().max(1.0), "shift {dx},{dy}: {v} vs {want}");
        }
    }

    #[test]
    fn peaks_respect_radius_and_literal_variant_is_unsupported() {
        let dsa = GrayImage::new(8, 8, 1.0, (0..64).map(|i| 0.1 + (i % 7) as f64 * 0.1).collect()).unwrap();
        let mut mask = GrayImage::filled(8, 8, 1.0, 0.0).unwrap();
        mask.set(3, 3, 1.0);
        let mut screen = ShiftScreen::new(&dsa, &RewardOptions::default()).unwrap();
        screen.stride = 1;
        let p = screen.peaks(&mask, 0.0, 0.0, [1.0, -1.0], 3.0, 5, 1.5);
        for (i, a) in p.iter().enumerate() {
            for b in &p[i + 1..] {
                assert!((a.0[0] - b.0[0]).abs() > 1.5 || (a.0[1] - b.0[1]).abs() > 1.5);
            }
            assert!(p.windows(2).all(|w| w[0].1 >= w[1].1));
        }
        let lit = RewardOptions {
            variant: RewardVariant::LiteralExclusion,
            i_max: None,
        };
        assert!(ShiftScreen::new(&dsa, &lit).is_none());
    }
}
