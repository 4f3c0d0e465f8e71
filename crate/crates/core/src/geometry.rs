//! Rigid pose transforms of binary volumes, parallel projection and
//! nearest-neighbour resampling.
//!
//! Conventions used throughout the crate:
//!
//! * Volumes are indexed `(i, j, k)` along `(x, y, z)` and stored x-fastest.
//! * A pose translates the volume by `(t_x, t_y, 0)` mm and then rotates it
//!   about the grid centroid by `R = R_z(r_z) * R_y(r_y)` (the y rotation is
//!   applied first). Rotations are right-handed, angles in degrees.
//! * Resampling under a pose is an inverse mapping with nearest-neighbour
//!   rounding; samples outside the grid read as background.
//! * Projection is parallel along z. Vessels are stored as 1, so the vessel
//!   silhouette is the maximum along z. This is the same silhouette as a
//!   minimum along z of the inverted (vessel dark) encoding.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four-parameter rigid pose: in-plane translations in mm, rotations about
/// the z and y axes in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub t_x: T,
    pub t_y: T,
    pub r_z: T,
    pub r_y: T,
}

impl<T: Scalar> Pose<T> {
    /// Builds a pose, wrapping both angles into `(-180, 180]`.
    pub fn new(t_x: T, t_y: T, r_z: T, r_y: T) -> Self {
        Pose {
            t_x,
            t_y,
            r_z: normalize_angle(r_z),
            r_y: normalize_angle(r_y),
        }
    }

    pub fn identity() -> Self {
        Pose::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `[t_x, t_y, r_z, r_y]`
    pub fn to_array(&self) -> [T; 4] {
        [self.t_x, self.t_y, self.r_z, self.r_y]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Pose::new(a[0], a[1], a[2], a[3])
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose::new(
            U::lit(self.t_x.as_f64()),
            U::lit(self.t_y.as_f64()),
            U::lit(self.r_z.as_f64()),
            U::lit(self.r_y.as_f64()),
        )
    }
}

impl<T: Scalar> Default for Pose<T> {
    fn default() -> Self {
        Pose::identity()
    }
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn normalize_angle<T: Scalar>(deg: T) -> T {
    let full = T::lit(360.0);
    let half = T::lit(180.0);
    let mut a = deg % full;
    if a <= -half {
        a += full;
    } else if a > half {
        a -= full;
    }
    a
}

/// Signed difference `a - b` wrapped into `(-180, 180]`.
pub fn angle_diff<T: Scalar>(a: T, b: T) -> T {
    normalize_angle(a - b)
}

/// `R = R_z(r_z) * R_y(r_y)`, angles in degrees.
pub fn rotation_matrix<T: Scalar>(r_z: T, r_y: T) -> [[T; 3]; 3] {
    let (sz, cz) = r_z.to_radians().sin_cos();
    let (sy, cy) = r_y.to_radians().sin_cos();
    let o = T::zero();
    [
        [cz * cy, -sz, cz * sy],
        [sz * cy, cz, sz * sy],
        [-sy, o, cy],
    ]
}

/// A 3D grid of {0, 1} voxels, 1 marking vessel.
#[derive(Debug, Clone)]
pub struct BinaryVolume<T> {
    dims: [usize; 3],
    spacing: [T; 3],
    voxels: Vec<u8>,
    columns: OnceLock<ColumnIndex>,
}

impl<T: PartialEq> PartialEq for BinaryVolume<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.voxels == other.voxels
    }
}

/// Chessboard distance (in voxels, capped at 255) from each voxel to the
/// nearest vessel voxel, stored k-contiguous, plus the vessel bounding box.
/// Built on first use; lets rays skip empty space without missing a voxel.
#[derive(Debug, Clone)]
struct ColumnIndex {
    dist: Vec<u8>,
    bbox: Option<([usize; 3], [usize; 3])>,
}

impl ColumnIndex {
    fn build(dims: [usize; 3], voxels: &[u8]) -> Self {
        let [nx, ny, nz] = dims;
        // padded by one voxel on every side, layout (i, j, k) with k fastest
        let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
        let at = |i: usize, j: usize, k: usize| ((i + 1) * py + (j + 1)) * pz + k + 1;
        let mut pad = vec![255u8; px * py * pz];
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &v) in voxels.iter().enumerate() {
            if v == 0 {
                continue;
            }
            any = true;
            let c = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
            pad[at(c[0], c[1], c[2])] = 0;
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        if any {
            // two-pass chamfer over the 26-neighbourhood is exact for the chessboard metric;
            // each pass uses the 13 neighbours that precede a voxel in its scan order
            let mut offsets = Vec::with_capacity(13);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    for dk in -1i64..=1 {
                        let off = (di * py as i64 + dj) * pz as i64 + dk;
                        if off < 0 {
                            offsets.push((-off) as usize);
                        }
                    }
                }
            }
            let interior = |t: usize| {
                let k = t % pz;
                let j = (t / pz) % py;
                let i = t / (pz * py);
                k >= 1 && k <= nz && j >= 1 && j <= ny && i >= 1 && i <= nx
            };
            let first = at(0, 0, 0);
            let last = at(nx - 1, ny - 1, nz - 1);
            for t in first..=last {
                if pad[t] != 0 && interior(t) {
                    let m = offsets.iter().map(|&o| pad[t - o]).min().unwrap_or(255);
                    pad[t] = pad[t].min(m.saturating_add(1));
                }
            }
            for t in (first..=last).rev() {
                if pad[t] != 0 && interior(t) {
                    let m = offsets.iter().map(|&o| pad[t + o]).min().unwrap_or(255);
                    pad[t] = pad[t].min(m.saturating_add(1));
                }
            }
        }
        let mut dist = vec![0u8; nx * ny * nz];
        for i in 0..nx {
            for j in 0..ny {
                let src = at(i, j, 0);
                let dst = (i + nx * j) * nz;
                dist[dst..dst + nz].copy_from_slice(&pad[src..src + nz]);
            }
        }
        ColumnIndex {
            dist,
            bbox: any.then_some((lo, hi)),
        }
    }

    #[inline]
    fn dist(&self, dims: [usize; 3], [i, j, k]: [usize; 3]) -> u8 {
        self.dist[(i + dims[0] * j) * dims[2] + k]
    }
}

impl<T: Scalar> BinaryVolume<T> {
    pub fn new(dims: [usize; 3], spacing: [T; 3], voxels: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
        }
        check_spacing(&spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::DimMismatch(format!(
                "{} voxels supplied for dims {dims:?}",
                voxels.len()
            )));
        }
        if let Some((index, &value)) = voxels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinary { index, value });
        }
        Ok(BinaryVolume {
            dims,
            spacing,
            voxels,
            columns: OnceLock::new(),
        })
    }

    fn columns(&self) -> &ColumnIndex {
        self.columns.get_or_init(|| ColumnIndex::build(self.dims, &self.voxels))
    }

    pub fn zeros(dims: [usize; 3], spacing: [T; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [T; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<u8> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.voxels[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, vessel: bool) {
        let idx = self.index(i, j, k);
        self.voxels[idx] = vessel as u8;
        self.columns = OnceLock::new();
    }

    pub fn count_ones(&self) -> usize {
        self.voxels.iter().map(|&v| v as usize).sum()
    }

    /// Replaces the spacing, e.g. after a resample whose target spacing is known exactly.
    pub fn with_spacing(mut self, spacing: [T; 3]) -> Result<Self> {
        check_spacing(&spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Inclusive index bounds `(lo, hi)` of the vessel voxels, `None` when empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        self.columns().bbox
    }

    /// Geometric centre of the grid in index units.
    pub fn centroid(&self) -> [T; 3] {
        self.dims.map(|d| T::from_usize_exact(d - 1) * T::lit(0.5))
    }
}

fn check_spacing<T: Scalar>(spacing: &[T]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > T::zero()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")))
    }
}

/// A 2D scalar image with isotropic pixel spacing, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T> {
    width: usize,
    height: usize,
    spacing: T,
    pixels: Vec<T>,
}

/// Target geometry of a projected image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFrame<T> {
    pub width: usize,
    pub height: usize,
    pub spacing: T,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(width: usize, height: usize, spacing: T, pixels: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image dims must be positive, got {width}x{height}")));
        }
        check_spacing(&[spacing])?;
        if pixels.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "{} pixels supplied for {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite() || **p < T::zero()) {
            return Err(Error::InvalidArgument(format!("pixel values must be finite and >= 0, got {p}")));
        }
        Ok(GrayImage { width, height, spacing, pixels })
    }

    pub fn filled(width: usize, height: usize, spacing: T, value: T) -> Result<Self> {
        Self::new(width, height, spacing, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn spacing(&self) -> T {
        self.spacing
    }

    pub fn frame(&self) -> ImageFrame<T> {
        ImageFrame {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
        }
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.pixels[x + self.width * y]
    }

    /// Sets one pixel. Negative or non-finite values are clamped to zero.
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let v = if value.is_finite() && value > T::zero() { value } else { T::zero() };
        self.pixels[x + self.width * y] = v;
    }

    pub fn with_spacing(mut self, spacing: T) -> Result<Self> {
        check_spacing(&[spacing])?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn max_value(&self) -> T {
        self.pixels.iter().copied().fold(T::zero(), T::max)
    }

    pub fn same_dims(&self, other: &GrayImage<T>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Applies `f` to every pixel; the result is re-validated.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<GrayImage<T>> {
        GrayImage::new(
            self.width,
            self.height,
            self.spacing,
            self.pixels.iter().map(|&p| f(p)).collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> GrayImage<U> {
        GrayImage {
            width: self.width,
            height: self.height,
            spacing: U::lit(self.spacing.as_f64()),
            pixels: self.pixels.iter().map(|p| U::lit(p.as_f64())).collect(),
        }
    }
}

/// Inverse map from output voxel indices to continuous source indices.
struct InverseMap<T> {
    rt: [[T; 3]; 3],
    center: [T; 3],
    spacing: [T; 3],
    shift: [T; 3],
}

impl<T: Scalar> InverseMap<T> {
    fn new(v: &BinaryVolume<T>, pose: &Pose<T>) -> Self {
        let r = rotation_matrix(pose.r_z, pose.r_y);
        let mut rt = r;
        for (a, row) in rt.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = r[b][a];
            }
        }
        InverseMap {
            rt,
            center: v.centroid(),
            spacing: v.spacing(),
            shift: [pose.t_x, pose.t_y, T::zero()],
        }
    }

    /// `idx_src = c + (R^T ((idx_out - c) * s) - t) / s`, per axis.
    #[inline]
    fn source(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        let out = [i, j, k];
        let mut p = [T::zero(); 3];
        for a in 0..3 {
            p[a] = (T::from_usize_exact(out[a]) - self.center[a]) * self.spacing[a];
        }
        let mut src = [T::zero(); 3];
        for a in 0..3 {
            let q = self.rt[a][0] * p[0] + self.rt[a][1] * p[1] + self.rt[a][2] * p[2] - self.shift[a];
            src[a] = q / self.spacing[a] + self.center[a];
        }
        src
    }

    /// Source index along the z-column `(i, j, .)` as
    /// `base + i * di + j * dj + k * dk`, evaluated in f64. Only used to bound
    /// loops and to pick samples away from rounding ties.
    fn column_lines(&self) -> ColumnLines {
        let c = self.center.map(|v| v.as_f64());
        let s = self.spacing.map(|v| v.as_f64());
        let mut lines = ColumnLines {
            base: [0.0; 3],
            di: [0.0; 3],
            dj: [0.0; 3],
            dk: [0.0; 3],
        };
        for a in 0..3 {
            let rt = self.rt[a].map(|v| v.as_f64());
            let shift = self.shift[a].as_f64();
            lines.di[a] = rt[0] * s[0] / s[a];
            lines.dj[a] = rt[1] * s[1] / s[a];
            lines.dk[a] = rt[2] * s[2] / s[a];
            lines.base[a] = c[a] - (rt[0] * c[0] * s[0] + rt[1] * c[1] * s[1] + rt[2] * c[2] * s[2] + shift) / s[a];
        }
        lines
    }
}

struct ColumnLines {
    base: [f64; 3],
    di: [f64; 3],
    dj: [f64; 3],
    dk: [f64; 3],
}

#[inline]
fn sample_nearest<T: Scalar>(v: &BinaryVolume<T>, src: [T; 3]) -> u8 {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = src[a].round();
        if !(r >= T::zero()) || r >= T::from_usize_exact(v.dims[a]) {
            return 0;
        }
        idx[a] = r.to_usize().unwrap_or(usize::MAX);
    }
    v.get(idx[0], idx[1], idx[2])
}

/// Applies `pose` to the volume by inverse mapping with nearest-neighbour
/// rounding. The output keeps the input dims and spacing.
pub fn transform_volume<T: Scalar>(v: &BinaryVolume<T>, pose: &Pose<T>) -> BinaryVolume<T> {
    let map = InverseMap::new(v, pose);
    let [nx, ny, _] = v.dims;
    let voxels = (0..v.voxels.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            sample_nearest(v, map.source(i, j, k))
        })
        .collect();
    BinaryVolume {
        dims: v.dims,
        spacing: v.spacing,
        voxels,
        columns: OnceLock::new(),
    }
}

/// Parallel projection along z: pixel `(i, j)` is 1 iff any voxel of the
/// column `(i, j, .)` is 1. Image spacing is the volume's x spacing.
pub fn project<T: Scalar>(v: &BinaryVolume<T>) -> GrayImage<T> {
    let [nx, ny, nz] = v.dims;
    let plane = nx * ny;
    let mut hit = vec![0u8; plane];
    for slab in v.voxels.chunks_exact(plane).take(nz) {
        for (h, &s) in hit.iter_mut().zip(slab) {
            *h |= s;
        }
    }
    GrayImage {
        width: nx,
        height: ny,
        spacing: v.spacing[0],
        pixels: hit.into_iter().map(|h| if h != 0 { T::one() } else { T::zero() }).collect(),
    }
}

/// Integer offset placing a `(w, h)` image centred inside `frame`.
/// Odd size differences round towards the top-left.
pub fn center_offset<T>(w: usize, h: usize, frame: &ImageFrame<T>) -> (i64, i64) {
    (
        (frame.width as i64 - w as i64).div_euclid(2),
        (frame.height as i64 - h as i64).div_euclid(2),
    )
}

/// Embeds (or crops) `img` so its centre coincides with the frame centre.
/// Uncovered pixels are zero.
pub fn embed_centered<T: Scalar>(img: &GrayImage<T>, frame: &ImageFrame<T>) -> GrayImage<T> {
    let (ox, oy) = center_offset(img.width, img.height, frame);
    let mut out = vec![T::zero(); frame.width * frame.height];
    for v in 0..frame.height {
        let sy = v as i64 - oy;
        if sy < 0 || sy >= img.height as i64 {
            continue;
        }
        for u in 0..frame.width {
            let sx = u as i64 - ox;
            if sx >= 0 && sx < img.width as i64 {
                out[u + frame.width * v] = img.get(sx as usize, sy as usize);
            }
        }
    }
    GrayImage {
        width: frame.width,
        height: frame.height,
        spacing: frame.spacing,
        pixels: out,
    }
}

/// Nearest-neighbour resample to `target` dims, centre-aligned:
/// output index `o` reads input index `floor((o + 1/2) * d_in / d_out)`.
/// Spacing is rescaled by the dims ratio.
pub fn resample_nearest<T: Scalar>(v: &BinaryVolume<T>, target: [usize; 3]) -> Result<BinaryVolume<T>> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("resample target dims must be >= 1, got {target:?}")));
    }
    let lut: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let (din, dout) = (v.dims[a], target[a]);
            (0..dout).map(|o| ((2 * o + 1) * din / (2 * dout)).min(din - 1)).collect()
        })
        .collect();
    let mut voxels = Vec::with_capacity(target.iter().product());
    for &k in &lut[2] {
        for &j in &lut[1] {
            for &i in &lut[0] {
                voxels.push(v.get(i, j, k));
            }
        }
    }
    let mut spacing = v.spacing;
    for a in 0..3 {
        spacing[a] = spacing[a] * T::from_usize_exact(v.dims[a]) / T::from_usize_exact(target[a]);
    }
    BinaryVolume::new(target, spacing, voxels)
}

/// Nearest index from the per-column line, clamped into the grid, whether
/// it was inside, and whether any axis lies within `guard` of a rounding tie
/// (then only the exact formula may decide the sample).
#[inline]
fn linear_sample(offset: &[f64; 3], slope: &[f64; 3], k: usize, dims: [usize; 3], guard: f64) -> ([usize; 3], bool, bool) {
    let kf = k as f64;
    let mut idx = [0usize; 3];
    let mut inside = true;
    let mut tie = false;
    for a in 0..3 {
        // floor(s + 0.5) via truncation, which avoids a libm call
        let h = offset[a] + slope[a] * kf + 0.5;
        if h < 0.0 {
            tie |= h > -guard;
            inside = false;
            continue;
        }
        let r = h as usize;
        let frac = h - r as f64;
        tie |= frac < guard || frac > 1.0 - guard;
        if r >= dims[a] {
            inside = false;
            idx[a] = dims[a] - 1;
        } else {
            idx[a] = r;
        }
    }
    (idx, inside, tie)
}

/// Renders the vessel silhouette of `v` under `pose` into `frame`.
///
/// Pixel-identical to `embed_centered(&project(&transform_volume(v, pose)), frame)`,
/// but only the part of each z-column that can reach a vessel voxel is visited.
pub fn project_pose<T: Scalar>(v: &BinaryVolume<T>, pose: &Pose<T>, frame: &ImageFrame<T>) -> Result<GrayImage<T>> {
    let vs = v.spacing[0].as_f64();
    let fs = frame.spacing.as_f64();
    if (vs - fs).abs() > 1e-9 * vs.max(fs) {
        return Err(Error::SpacingMismatch { volume: vs, image: fs });
    }
    if frame.width == 0 || frame.height == 0 {
        return Err(Error::InvalidArgument("frame dims must be positive".into()));
    }
    let mut pixels = vec![T::zero(); frame.width * frame.height];
    let Some((lo, hi)) = v.bounding_box() else {
        return GrayImage::new(frame.width, frame.height, frame.spacing, pixels);
    };
    let [nx, ny, nz] = v.dims;
    let (ox, oy) = center_offset(nx, ny, frame);
    let map = InverseMap::new(v, pose);
    let cols = v.columns();
    let lo = lo.map(|x| x as f64 - 1.0);
    let hi = hi.map(|x| x as f64 + 1.0);
    let max_dim = nx.max(ny).max(nz) as f64;
    let guard = (T::epsilon().as_f64() * 512.0 * (max_dim + 1.0)).max(1e-9);

    let lines = map.column_lines();
    let slope = lines.dk;
    let inv_slope = slope.map(|s| if s.abs() < 1e-12 { 0.0 } else { 1.0 / s });
    // per step the source point moves at most `max_step` voxels along any axis
    let max_step = slope.iter().fold(1e-9f64, |m, s| m.max(s.abs()));
    // a rounded index moves by at most n * max_step + 1 after n steps and a tie
    // adds one more, while every voxel closer than d is empty: skip[d] samples
    // after one at distance d can be passed over
    let skip: Vec<usize> = (0..=255u32)
        .map(|d| if d >= 3 { ((d - 3) as f64 / max_step) as usize } else { 0 })
        .collect();
    let u_lo = ox.max(0) as usize;
    let u_hi = (ox + nx as i64).clamp(0, frame.width as i64) as usize;

    pixels.par_chunks_mut(frame.width).enumerate().for_each(|(row, out)| {
        let j = row as i64 - oy;
        if j < 0 || j >= ny as i64 || u_lo >= u_hi {
            return;
        }
        let j = j as usize;
        let row_base = [0, 1, 2].map(|a| lines.base[a] + j as f64 * lines.dj[a]);
        for (u, px) in out.iter_mut().enumerate().take(u_hi).skip(u_lo) {
            let i = (u as i64 - ox) as usize;
            let offset = [0, 1, 2].map(|a| row_base[a] + i as f64 * lines.di[a]);
            let mut kmin = 0.0f64;
            let mut kmax = (nz - 1) as f64;
            for a in 0..3 {
                if inv_slope[a] == 0.0 {
                    if offset[a] < lo[a] || offset[a] > hi[a] {
                        kmax = -1.0;
                    }
                } else {
                    let k0 = (lo[a] - offset[a]) * inv_slope[a];
                    let k1 = (hi[a] - offset[a]) * inv_slope[a];
                    kmin = kmin.max(k0.min(k1));
                    kmax = kmax.min(k0.max(k1));
                }
            }
            if kmax < kmin {
                continue;
            }
            let k_start = (kmin.floor() - 1.0).max(0.0) as usize;
            let k_end = ((kmax.ceil() + 1.0) as usize).min(nz - 1);
            let mut k = k_start;
            while k <= k_end {
                let (idx, inside, tie) = linear_sample(&offset, &slope, k, v.dims, guard);
                let d = cols.dist(v.dims, idx);
                let hit = if tie { sample_nearest(v, map.source(i, j, k)) != 0 } else { inside && d == 0 };
                if hit {
                    *px = T::one();
                    break;
                }
                k += 1 + skip[d as usize];
            }
        }
    });
    // only zeros and ones were written, and frame spacing was checked above
    Ok(GrayImage {
        width: frame.width,
        height: frame.height,
        spacing: frame.spacing,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn apply(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2])
    }

    fn random_volume(rng: &mut ChaCha8Rng, n: usize, density: f64) -> BinaryVolume<f64> {
        let vox = (0..n * n * n).map(|_| rng.random_bool(density) as u8).collect();
        BinaryVolume::new([n; 3], [1.0; 3], vox).unwrap()
    }

    #[test]
    fn rotation_examples() {
        let id = rotation_matrix(0.0f64, 0.0);
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let v = apply(&rotation_matrix(90.0, 0.0), [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
        let v = apply(&rotation_matrix(0.0, 90.0), [0.0, 0.0, 1.0]);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn rotation_is_rz_after_ry() {
        // y first: (1,0,0) -> R_y(90) -> (0,0,-1) -> R_z(90) -> (0,0,-1)
        let v = apply(&rotation_matrix(90.0, 90.0), [1.0, 0.0, 0.0]);
        assert!((v[2] + 1.0).abs() < 1e-12 && v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(180.0f64), 180.0);
        assert_eq!(normalize_angle(-180.0f64), 180.0);
        assert_eq!(normalize_angle(190.0f64), -170.0);
        assert_eq!(normalize_angle(-540.0f64), 180.0);
        assert_eq!(angle_diff(179.0f64, -179.0), -2.0);
        let p = Pose::new(0.0f64, 0.0, 370.0, -190.0);
        assert_eq!((p.r_z, p.r_y), (10.0, 170.0));
    }

    #[test]
    fn identity_pose_is_voxel_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, 9, 0.3);
        assert_eq!(transform_volume(&v, &Pose::identity()), v);
    }

    #[test]
    fn pure_translation_moves_voxel() {
        let sx = 0.7;
        let mut v = BinaryVolume::zeros([6, 5, 4], [sx, 0.9, 1.1]).unwrap();
        v.set(1, 1, 1, true);
        let out = transform_volume(&v, &Pose::new(2.0 * sx, 0.0, 0.0, 0.0));
        assert_eq!(out.count_ones(), 1);
        assert_eq!(out.get(3, 1, 1), 1);
    }

    /// Forward-maps every vessel voxel and rounds; for quarter turns of a
    /// cube this is a bijection and must agree with the inverse mapping.
    fn forward_rotate(v: &BinaryVolume<f64>, rz: f64, ry: f64) -> BinaryVolume<f64> {
        let [nx, ny, nz] = v.dims();
        let c = [(nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0, (nz - 1) as f64 / 2.0];
        let r = rotation_matrix(rz, ry);
        let mut out = BinaryVolume::zeros(v.dims(), v.spacing()).unwrap();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if v.get(i, j, k) == 0 {
                        continue;
                    }
                    let q = apply(&r, [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]]);
                    let o = [0, 1, 2].map(|a| (q[a] + c[a]).round() as i64);
                    if o.iter().zip(v.dims()).all(|(&x, d)| x >= 0 && (x as usize) < d) {
                        out.set(o[0] as usize, o[1] as usize, o[2] as usize, true);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn quarter_turns_match_forward_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (rz, ry) in [(90.0, 0.0), (0.0, 90.0), (-90.0, 0.0), (90.0, -90.0), (180.0, 0.0)] {
            for _ in 0..5 {
                let v = random_volume(&mut rng, 8, 0.25);
                let got = transform_volume(&v, &Pose::new(0.0, 0.0, rz, ry));
                assert_eq!(got, forward_rotate(&v, rz, ry), "rz={rz} ry={ry}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let v = BinaryVolume::<f64>::zeros([4, 3, 5], [0.5, 1.0, 1.0]).unwrap();
        let p = project(&v);
        assert_eq!(p.dims(), (4, 3));
        assert_eq!(p.spacing(), 0.5);
        assert!(p.pixels().iter().all(|&x| x == 0.0));
        for k in 0..5 {
            let mut v = v.clone();
            v.set(0, 0, k, true);
            let p = project(&v);
            assert_eq!(p.get(0, 0), 1.0);
            assert_eq!(p.pixels().iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn projection_matches_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let v = random_volume(&mut rng, 16, 0.02);
            let p = project(&v);
            for j in 0..16 {
                for i in 0..16 {
                    let mut any = false;
                    for k in 0..16 {
                        any |= v.get(i, j, k) == 1;
                    }
                    assert_eq!(p.get(i, j), if any { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn resample_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_volume(&mut rng, 5, 0.5);
        assert_eq!(resample_nearest(&v, [5, 5, 5]).unwrap(), v);

        let mut v = BinaryVolume::<f64>::zeros([2, 2, 2], [1.0; 3]).unwrap();
        v.set(0, 0, 0, true);
        let up = resample_nearest(&v, [4, 4, 4]).unwrap();
        assert_eq!(up.spacing(), [0.5; 3]);
        assert_eq!(up.count_ones(), 8);
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    assert_eq!(up.get(i, j, k), 1);
                }
            }
        }
        assert!(resample_nearest(&v, [0, 4, 4]).is_err());
    }

    #[test]
    fn resample_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_volume(&mut rng, 32, 0.3);
        let out = resample_nearest(&v, [48, 48, 48]).unwrap();
        for k in 0..48 {
            for j in 0..48 {
                for i in 0..48 {
                    let src = [i, j, k].map(|o| (((o as f64 + 0.5) * 32.0 / 48.0).floor() as usize).min(31));
                    assert_eq!(out.get(i, j, k), v.get(src[0], src[1], src[2]));
                }
            }
        }
    }

    #[test]
    fn project_pose_identity_and_translation() {
        let mut v = BinaryVolume::<f64>::zeros([20, 20, 10], [1.0; 3]).unwrap();
        for j in 6..14 {
            for i in 5..9 {
                v.set(i, j, 4, true);
            }
        }
        let frame = ImageFrame { width: 20, height: 20, spacing: 1.0 };
        let id = project_pose(&v, &Pose::identity(), &frame).unwrap();
        assert_eq!(id, project(&v));

        let shifted = project_pose(&v, &Pose::new(5.0, 0.0, 0.0, 0.0), &frame).unwrap();
        for j in 0..20 {
            for i in 0..15 {
                assert_eq!(shifted.get(i + 5, j), id.get(i, j));
            }
        }

        let bad = ImageFrame { width: 20, height: 20, spacing: 0.5 };
        assert!(matches!(project_pose(&v, &Pose::identity(), &bad), Err(Error::SpacingMismatch { .. })));
    }

    #[test]
    fn project_pose_matches_unfused_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 0..40 {
            let v = random_volume(&mut rng, 16, 0.03);
            let pose = Pose::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-180.0..180.0),
                rng.random_range(-180.0..180.0),
            );
            let frame = ImageFrame { width: 13 + n % 9, height: 21 - n % 7, spacing: 1.0 };
            let fused = project_pose(&v, &pose, &frame).unwrap();
            let unfused = embed_centered(&project(&transform_volume(&v, &pose)), &frame);
            assert_eq!(fused, unfused, "pose {pose:?}");
        }
    }

    fn sparse_blobs<T: Scalar>(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [T; 3]) -> BinaryVolume<T> {
        let mut v = BinaryVolume::zeros(dims, spacing).unwrap();
        for _ in 0..3 {
            let c = dims.map(|d| rng.random_range(0..d) as i64);
            let r = rng.random_range(1..4i64);
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let d = [i as i64 - c[0], j as i64 - c[1], k as i64 - c[2]];
                        if d.iter().map(|x| x * x).sum::<i64>() <= r * r {
                            v.set(i, j, k, true);
                        }
                    }
                }
            }
        }
        v
    }

    #[test]
    fn project_pose_matches_unfused_on_sparse_volumes() {
        // large empty regions exercise the distance skipping; half-voxel shifts
        // and right angles put many samples exactly on rounding ties
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let angles = [0.0, 90.0, -90.0, 180.0, 45.0];
        for n in 0..30 {
            let spacing = if n % 3 == 0 { [1.0, 0.7, 1.6] } else { [0.8; 3] };
            let v = sparse_blobs(&mut rng, [30, 26, 34], spacing);
            let pose = if n % 2 == 0 {
                Pose::new(
                    0.5 * rng.random_range(-6..6) as f64 * spacing[0],
                    0.5 * rng.random_range(-6..6) as f64 * spacing[1],
                    angles[rng.random_range(0..5)],
                    angles[rng.random_range(0..5)],
                )
            } else {
                Pose::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-180.0..180.0),
                    rng.random_range(-180.0..180.0),
                )
            };
            let frame = ImageFrame { width: 40, height: 37, spacing: spacing[0] };
            let fused = project_pose(&v, &pose, &frame).unwrap();
            let unfused = embed_centered(&project(&transform_volume(&v, &pose)), &frame);
            assert_eq!(fused, unfused, "case {n} pose {pose:?}");

            let v32 = BinaryVolume::new(v.dims(), spacing.map(|s| s as f32), v.voxels().to_vec()).unwrap();
            let p32 = pose.cast::<f32>();
            let f32frame = ImageFrame { width: 40, height: 37, spacing: spacing[0] as f32 };
            let fused = project_pose(&v32, &p32, &f32frame).unwrap();
            let unfused = embed_centered(&project(&transform_volume(&v32, &p32)), &f32frame);
            assert_eq!(fused, unfused, "f32 case {n} pose {p32:?}");
        }
    }

    #[test]
    fn set_invalidates_cached_index() {
        let mut v = BinaryVolume::<f64>::zeros([5, 5, 5], [1.0; 3]).unwrap();
        assert_eq!(v.bounding_box(), None);
        v.set(1, 2, 3, true);
        assert_eq!(v.bounding_box(), Some(([1, 2, 3], [1, 2, 3])));
        let frame = ImageFrame { width: 5, height: 5, spacing: 1.0 };
        let img = project_pose(&v, &Pose::identity(), &frame).unwrap();
        assert_eq!(img.get(1, 2), 1.0);
        v.set(1, 2, 3, false);
        let img = project_pose(&v, &Pose::identity(), &frame).unwrap();
        assert_eq!(img.get(1, 2), 0.0);
    }

    #[test]
    fn distance_index_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let v = sparse_blobs(&mut rng, [12, 9, 14], [1.0f64; 3]);
        let ones: Vec<[i64; 3]> = (0..v.voxels().len())
            .filter(|&i| v.voxels()[i] == 1)
            .map(|i| [(i % 12) as i64, ((i / 12) % 9) as i64, (i / 108) as i64])
            .collect();
        for k in 0..14 {
            for j in 0..9 {
                for i in 0..12 {
                    let want = ones
                        .iter()
                        .map(|q| (q[0] - i as i64).abs().max((q[1] - j as i64).abs()).max((q[2] - k as i64).abs()))
                        .min()
                        .unwrap()
                        .min(255) as u8;
                    assert_eq!(v.columns().dist(v.dims(), [i, j, k]), want);
                }
            }
        }
    }

    #[test]
    fn empty_volume_projects_empty() {
        let v = BinaryVolume::<f32>::zeros([8, 8, 8], [1.0; 3]).unwrap();
        let frame = ImageFrame { width: 10, height: 6, spacing: 1.0f32 };
        let img = project_pose(&v, &Pose::new(1.0, 2.0, 3.0, 4.0), &frame).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn rejects_non_binary() {
        assert!(matches!(
            BinaryVolume::<f64>::new([2, 1, 1], [1.0; 3], vec![0, 2]),
            Err(Error::NonBinary { index: 1, value: 2 })
        ));
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(rz in -720.0f64..720.0, ry in -720.0f64..720.0) {
            let r = rotation_matrix(rz, ry);
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn integral_translation_shifts_projection(seed in 0u64..1000, tx in -3i32..=3, ty in -3i32..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = 0.6;
            let vox = (0..12 * 12 * 6).map(|_| rng.random_bool(0.05) as u8).collect();
            let v = BinaryVolume::new([12, 12, 6], [s, s, 0.8], vox).unwrap();
            let pose = Pose::new(tx as f64 * s, ty as f64 * s, 0.0, 0.0);
            let moved = project(&transform_volume(&v, &pose));
            let base = project(&v);
            for j in 0..12i32 {
                for i in 0..12i32 {
                    let (si, sj) = (i - tx, j - ty);
                    if (0..12).contains(&si) && (0..12).contains(&sj) {
                        prop_assert_eq!(moved.get(i as usize, j as usize), base.get(si as usize, sj as usize));
                    }
                }
            }
        }

        #[test]
        fn projection_never_exceeds_voxel_count(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_volume(&mut rng, 7, 0.1);
            let ones = project(&v).pixels().iter().filter(|&&p| p == 1.0).count();
            prop_assert!(ones <= v.count_ones());
        }
    }
}
