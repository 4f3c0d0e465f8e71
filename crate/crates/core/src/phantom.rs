//! Synthetic aorta phantoms with known ground-truth poses.
//!
//! A phantom is a tube swept along a Catmull-Rom spline through arch-shaped
//! control points, with three side branches rising from the apex. Rendering
//! projects it at a chosen pose and paints a DSA-like image: bright
//! background, dark contrast-filled lumen, noise and streaks.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::case::{PoseBounds, RegistrationCase};
use crate::error::{Error, Result};
use crate::geometry::{project_pose, BinaryVolume, GrayImage, ImageFrame, Pose};

/// Gaussian widening of the radius around a curve position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bulge {
    /// Curve position in `[0, 1]`.
    pub position: f64,
    pub amplitude_mm: f64,
    /// Standard deviation in curve-position units.
    pub width: f64,
}

/// A side vessel swept along its own spline with a linearly tapering radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Control points in voxel index coordinates; the first lies inside the parent lumen.
    pub control_points: Vec<[f64; 3]>,
    /// Radius at the first and last control point, mm.
    pub radius_mm: (f64, f64),
}

/// A thin flap that splits the lumen between two curve positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dissection {
    pub start: f64,
    pub end: f64,
    pub thickness_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing_mm: f64,
    /// Centerline control points in voxel index coordinates.
    pub control_points: Vec<[f64; 3]>,
    /// Radius at each control point, mm. Linearly interpolated in between.
    pub radius_mm: Vec<f64>,
    pub aneurysm: Option<Bulge>,
    pub dissection: Option<Dissection>,
    #[serde(default)]
    pub branches: Vec<Branch>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("phantom dims must be positive, got {:?}", self.dims)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!("phantom spacing must be positive, got {}", self.spacing_mm)));
        }
        if self.control_points.len() < 2 {
            return Err(Error::InvalidArgument("a centerline needs at least two control points".into()));
        }
        if self.radius_mm.len() != self.control_points.len() {
            return Err(Error::DimMismatch(format!(
                "{} radii for {} control points",
                self.radius_mm.len(),
                self.control_points.len()
            )));
        }
        if let Some(r) = self.radius_mm.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!("radii must be positive, got {r}")));
        }
        for p in &self.control_points {
            if !inside(p, self.dims) {
                return Err(Error::CenterlineOutOfVolume(*p));
            }
        }
        for b in &self.branches {
            if b.control_points.len() < 2 {
                return Err(Error::InvalidArgument("a branch needs at least two control points".into()));
            }
            if !(b.radius_mm.0 > 0.0 && b.radius_mm.1 > 0.0 && b.radius_mm.0.is_finite() && b.radius_mm.1.is_finite()) {
                return Err(Error::InvalidArgument(format!("branch radii must be positive, got {:?}", b.radius_mm)));
            }
            if let Some(p) = b.control_points.iter().find(|p| !inside(p, self.dims)) {
                return Err(Error::CenterlineOutOfVolume(*p));
            }
        }
        if let Some(b) = &self.aneurysm {
            if !(b.width > 0.0 && b.amplitude_mm >= 0.0) {
                return Err(Error::InvalidArgument("aneurysm needs width > 0 and amplitude >= 0".into()));
            }
        }
        if let Some(d) = &self.dissection {
            if !(d.thickness_mm > 0.0 && d.start <= d.end) {
                return Err(Error::InvalidArgument("dissection needs thickness > 0 and start <= end".into()));
            }
        }
        Ok(())
    }

    /// Samples an arch-shaped centerline (ascending limb, apex, descending limb)
    /// that also sweeps through depth, so out-of-plane rotation changes the silhouette.
    pub fn arch(seed: u64, cfg: &PhantomConfig) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        const SHAPE: [[f64; 3]; 7] = [
            [-0.30, 0.85, -0.85],
            [-0.40, 0.25, -0.80],
            [-0.32, -0.25, -0.50],
            [0.00, -0.45, 0.00],
            [0.30, -0.28, 0.50],
            [0.38, 0.25, 0.80],
            [0.34, 0.90, 0.80],
        ];
        let half = cfg.dims.map(|d| (d as f64 - 1.0) / 2.0);
        let control_points = SHAPE
            .iter()
            .map(|f| [0, 1, 2].map(|a| half[a] * (1.0 + f[a] + rng.random_range(-0.06..0.06))))
            .collect::<Vec<_>>();
        let root = rng.random_range(cfg.radius_mm.0..cfg.radius_mm.1);
        let taper = rng.random_range(0.7..0.85);
        let n = control_points.len();
        let radius_mm = (0..n)
            .map(|i| root * (1.0 + (taper - 1.0) * i as f64 / (n - 1) as f64))
            .collect();
        let aneurysm = rng.random_bool(cfg.aneurysm_probability).then(|| Bulge {
            position: rng.random_range(0.3..0.8),
            amplitude_mm: root * rng.random_range(0.4..0.9),
            width: rng.random_range(0.04..0.08),
        });
        let dissection = rng.random_bool(cfg.dissection_probability).then(|| {
            let start = rng.random_range(0.45..0.7);
            Dissection {
                start,
                end: start + rng.random_range(0.15..0.3),
                thickness_mm: cfg.spacing_mm,
            }
        });
        let arch = centerline(&control_points);
        let branches = [0.40, 0.50, 0.60]
            .iter()
            .map(|&u| {
                let start = arch[((u * (arch.len() - 1) as f64).round() as usize).min(arch.len() - 1)].0;
                let dx = half[0] * rng.random_range(-0.1..0.1);
                let dz = half[2] * rng.random_range(-0.25..0.25);
                let top = half[1] * (1.0 - 0.88);
                let mid = [start[0] + 0.5 * dx, 0.5 * (start[1] + top), start[2] + 0.5 * dz];
                let end = [start[0] + dx, top, start[2] + dz];
                let r0 = root * rng.random_range(0.35..0.5);
                Branch {
                    control_points: vec![start, mid, end],
                    radius_mm: (r0, 0.8 * r0),
                }
            })
            .collect();
        PhantomSpec {
            seed,
            branches,
            dims: cfg.dims,
            spacing_mm: cfg.spacing_mm,
            control_points,
            radius_mm,
            aneurysm,
            dissection,
        }
    }

    /// Radius in voxels at curve position `u` in `[0, 1]`.
    fn radius_vox(&self, u: f64) -> f64 {
        let n = self.radius_mm.len();
        let x = u.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (x.floor() as usize).min(n - 2);
        let t = x - i as f64;
        let mut r = self.radius_mm[i] * (1.0 - t) + self.radius_mm[i + 1] * t;
        if let Some(b) = &self.aneurysm {
            let z = (u - b.position) / b.width;
            r += b.amplitude_mm * (-0.5 * z * z).exp();
        }
        r / self.spacing_mm
    }
}

fn inside(p: &[f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64)
}

fn catmull_rom(p0: [f64; 3], p1: [f64; 3], p2: [f64; 3], p3: [f64; 3], t: f64) -> [f64; 3] {
    let t2 = t * t;
    let t3 = t2 * t;
    [0, 1, 2].map(|a| {
        0.5 * (2.0 * p1[a]
            + (p2[a] - p0[a]) * t
            + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
            + (3.0 * p1[a] - p0[a] - 3.0 * p2[a] + p3[a]) * t3)
    })
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Dense centerline samples `(point, curve position)`. End points are
/// duplicated, so a collinear, evenly spaced control polygon yields a straight line.
fn centerline(cp: &[[f64; 3]]) -> Vec<([f64; 3], f64)> {
    let n = cp.len();
    let mut out = Vec::new();
    for s in 0..n - 1 {
        let p0 = cp[s.saturating_sub(1)];
        let p1 = cp[s];
        let p2 = cp[s + 1];
        let p3 = cp[(s + 2).min(n - 1)];
        let chord = dot(sub(p2, p1), sub(p2, p1)).sqrt();
        let steps = ((chord * 4.0).ceil() as usize).max(1);
        for q in 0..steps {
            let t = q as f64 / steps as f64;
            out.push((catmull_rom(p0, p1, p2, p3, t), (s as f64 + t) / (n - 1) as f64));
        }
    }
    out.push((cp[n - 1], 1.0));
    out
}

/// Voxelizes the tube: every voxel within the interpolated radius of a
/// centerline segment is vessel. A dissection then clears a thin slab
/// containing the centerline and the depth axis.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<BinaryVolume<f64>> {
    spec.validate()?;
    let samples = centerline(&spec.control_points);
    if let Some((p, _)) = samples.iter().find(|(p, _)| !inside(p, spec.dims)) {
        return Err(Error::CenterlineOutOfVolume(*p));
    }
    let mut vol = BinaryVolume::zeros(spec.dims, [spec.spacing_mm; 3])?;
    let segs: Vec<_> = samples
        .windows(2)
        .map(|w| (w[0].0, w[1].0, spec.radius_vox(w[0].1), spec.radius_vox(w[1].1), w[0].1))
        .collect();

    for &(a, b, ra, rb, _) in &segs {
        visit_capsule(spec.dims, a, b, ra.max(rb), |x, t| {
            let q = [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k]));
            let r = ra + t * (rb - ra);
            let d = sub(x, q);
            if dot(d, d) <= r * r + 1e-9 {
                vol.set(x[0] as usize, x[1] as usize, x[2] as usize, true);
            }
        });
    }

    for br in &spec.branches {
        let samples = centerline(&br.control_points);
        if let Some((p, _)) = samples.iter().find(|(p, _)| !inside(p, spec.dims)) {
            return Err(Error::CenterlineOutOfVolume(*p));
        }
        let rad = |u: f64| (br.radius_mm.0 + u * (br.radius_mm.1 - br.radius_mm.0)) / spec.spacing_mm;
        for w in samples.windows(2) {
            let (a, b, ra, rb) = (w[0].0, w[1].0, rad(w[0].1), rad(w[1].1));
            visit_capsule(spec.dims, a, b, ra.max(rb), |x, t| {
                let q = [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k]));
                let r = ra + t * (rb - ra);
                let d = sub(x, q);
                if dot(d, d) <= r * r + 1e-9 {
                    vol.set(x[0] as usize, x[1] as usize, x[2] as usize, true);
                }
            });
        }
    }

    if let Some(dis) = &spec.dissection {
        let half = 0.5 * dis.thickness_mm / spec.spacing_mm;
        for &(a, b, ra, rb, u) in &segs {
            if u < dis.start || u > dis.end {
                continue;
            }
            let tan = sub(b, a);
            // normal of the plane spanned by the tangent and the depth axis
            let mut nrm = [tan[1], -tan[0], 0.0];
            let len = dot(nrm, nrm).sqrt();
            if len < 1e-12 {
                nrm = [1.0, 0.0, 0.0];
            } else {
                nrm = nrm.map(|c| c / len);
            }
            visit_capsule(spec.dims, a, b, ra.max(rb), |x, t| {
                let q = [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k]));
                let r = ra + t * (rb - ra);
                let d = sub(x, q);
                if dot(d, nrm).abs() <= half && dot(d, d) <= r * r + 1e-9 {
                    vol.set(x[0] as usize, x[1] as usize, x[2] as usize, false);
                }
            });
        }
    }
    Ok(vol)
}

/// Calls `f(voxel, t)` for every voxel in the bounding box of the capsule
/// around segment `a..b`, with `t` the clamped projection parameter.
fn visit_capsule(dims: [usize; 3], a: [f64; 3], b: [f64; 3], r: f64, mut f: impl FnMut([f64; 3], f64)) {
    let lo = [0, 1, 2].map(|k| (a[k].min(b[k]) - r).floor().max(0.0) as usize);
    let hi = [0, 1, 2].map(|k| ((a[k].max(b[k]) + r).ceil().max(0.0) as usize).min(dims[k] - 1));
    let ab = sub(b, a);
    let ll = dot(ab, ab);
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let x = [i as f64, j as f64, k as f64];
                let t = if ll > 0.0 { (dot(sub(x, a), ab) / ll).clamp(0.0, 1.0) } else { 0.0 };
                f(x, t);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub true_pose: Pose<f64>,
    pub width: usize,
    pub height: usize,
    /// Intensity of contrast-filled vessel pixels, `a`.
    pub vessel_intensity: f64,
    /// Background intensity, `b > a`.
    pub background_intensity: f64,
    pub noise_sigma: f64,
    /// Fraction of silhouette pixels reached by contrast, in `(0, 1]`.
    pub fill_fraction: f64,
    pub streaks: usize,
    pub seed: u64,
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.vessel_intensity, self.background_intensity);
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::InvalidArgument(format!("need 0 <= a < b <= 1, got a = {a}, b = {b}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.fill_fraction > 0.0 && self.fill_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fill fraction must be in (0, 1], got {}", self.fill_fraction)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("render size must be positive".into()));
        }
        if !self.true_pose.is_finite() {
            return Err(Error::InvalidArgument("true pose must be finite".into()));
        }
        Ok(())
    }
}

/// Renders a synthetic DSA of `v` seen at `r.true_pose`.
///
/// Contrast reaches a breadth-first prefix of the silhouette grown from one
/// of its two lower ends, which models partial filling along the vessel.
pub fn render_dsa(v: &BinaryVolume<f64>, r: &RenderSpec) -> Result<GrayImage<f64>> {
    r.validate()?;
    let frame = ImageFrame {
        width: r.width,
        height: r.height,
        spacing: v.spacing()[0],
    };
    let sil = project_pose(v, &r.true_pose, &frame)?;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let (w, h) = (r.width, r.height);
    let mut img = vec![r.background_intensity; w * h];

    let mask: Vec<bool> = sil.pixels().iter().map(|&p| p > 0.0).collect();
    let total = mask.iter().filter(|&&m| m).count();
    let n_fill = ((r.fill_fraction * total as f64).ceil() as usize).min(total);
    let from_right = rng.random_bool(0.5);
    for idx in fill_order(&mask, w, h, from_right).into_iter().take(n_fill) {
        img[idx] = r.vessel_intensity;
    }

    if r.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, r.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for px in img.iter_mut() {
            *px = (*px + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    for _ in 0..r.streaks {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let half_width = rng.random_range(0.5..2.0);
        let gain = rng.random_range(0.4..0.75);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = (x as f64 - cx) * s - (y as f64 - cy) * c;
                if !mask[i] && d.abs() <= half_width {
                    img[i] *= gain;
                }
            }
        }
    }
    GrayImage::new(w, h, frame.spacing, img)
}

/// Silhouette pixels in 8-connected breadth-first order from the lower-left
/// (or lower-right) end. Disconnected pieces follow in raster order.
fn fill_order(mask: &[bool], w: usize, h: usize, from_right: bool) -> Vec<usize> {
    let key = |i: usize| {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        if from_right {
            y + x
        } else {
            y - x
        }
    };
    let Some(start) = (0..mask.len()).filter(|&i| mask[i]).max_by_key(|&i| (key(i), std::cmp::Reverse(i))) else {
        return Vec::new();
    };
    let mut seen = vec![false; mask.len()];
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    let mut next_seed = 0;
    seen[start] = true;
    queue.push_back(start);
    loop {
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        while next_seed < mask.len() && !(mask[next_seed] && !seen[next_seed]) {
            next_seed += 1;
        }
        if next_seed == mask.len() {
            return order;
        }
        seen[next_seed] = true;
        queue.push_back(next_seed);
    }
}

/// Distributions for [`make_case_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub image_size: usize,
    /// Root radius range, mm.
    pub radius_mm: (f64, f64),
    pub aneurysm_probability: f64,
    pub dissection_probability: f64,
    pub vessel_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub fill_fraction: f64,
    pub streaks: usize,
    /// Range of the true rotation angles, deg.
    pub truth_rotation_deg: f64,
    /// Range of the true translation, px. Kept small so the vessel stays
    /// inside the volume grid at the true pose.
    pub truth_translation_px: f64,
    /// Initial pose offsets from the truth, px and deg.
    pub offset_translation_px: f64,
    pub offset_rotation_deg: f64,
    pub bounds: PoseBounds,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [96, 96, 96],
            spacing_mm: 0.9,
            image_size: 128,
            radius_mm: (3.0, 4.2),
            aneurysm_probability: 0.3,
            dissection_probability: 0.2,
            vessel_intensity: 0.2,
            background_intensity: 0.9,
            noise_sigma: 0.03,
            fill_fraction: 0.7,
            streaks: 2,
            truth_rotation_deg: 20.0,
            truth_translation_px: 4.0,
            offset_translation_px: 40.0,
            offset_rotation_deg: 10.0,
            bounds: PoseBounds::default(),
        }
    }
}

impl PhantomConfig {
    /// Noiseless, fully filled, artifact-free renders.
    pub fn clean() -> Self {
        PhantomConfig {
            noise_sigma: 0.0,
            fill_fraction: 1.0,
            streaks: 0,
            ..Self::default()
        }
    }
}

/// A case bundle plus the specs that produced it.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub case: RegistrationCase,
    pub spec: PhantomSpec,
    pub render: RenderSpec,
}

pub fn make_case(seed: u64) -> RegistrationCase {
    make_case_with(seed, &PhantomConfig::default())
        .expect("default phantom config is valid")
        .case
}

/// Samples a phantom and a render. The initial translation is zero and the
/// initial angles stand in for the gantry angles, so the initial pose is the
/// truth shifted by uniform offsets.
pub fn make_case_with(seed: u64, cfg: &PhantomConfig) -> Result<PhantomCase> {
    let spec = PhantomSpec::arch(seed, cfg);
    let volume = generate_phantom(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let s = cfg.spacing_mm;
    let ot = cfg.offset_translation_px;
    let or = cfg.offset_rotation_deg;
    let tr = cfg.truth_rotation_deg;
    let tt = cfg.truth_translation_px;
    let mut sym = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    let truth = Pose::new(sym(tt) * s, sym(tt) * s, sym(tr), sym(tr));
    let initial = Pose::new(
        truth.t_x + sym(ot) * s,
        truth.t_y + sym(ot) * s,
        truth.r_z + sym(or),
        truth.r_y + sym(or),
    );
    let render = RenderSpec {
        true_pose: truth,
        width: cfg.image_size,
        height: cfg.image_size,
        vessel_intensity: cfg.vessel_intensity,
        background_intensity: cfg.background_intensity,
        noise_sigma: cfg.noise_sigma,
        fill_fraction: cfg.fill_fraction,
        streaks: cfg.streaks,
        seed: rng.random(),
    };
    let dsa = render_dsa(&volume, &render)?;
    let mut case = RegistrationCase::new(format!("phantom-{seed:04}"), volume, dsa, initial)?;
    case.truth = Some(truth);
    case.bounds = cfg.bounds;
    Ok(PhantomCase { case, spec, render })
}
