//! Turns raw DSA frame stacks and segmentation volumes into spacing-matched
//! registration inputs.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{resample_nearest, BinaryVolume, GrayImage, Pose};
use crate::io::{self, Record};
use crate::scalar::Scalar;

/// Name of the acquisition sidecar inside a DSA directory.
pub const DSA_METADATA_FILE: &str = "meta.txt";

/// Default border threshold as a fraction of the image maximum.
pub const BORDER_THRESHOLD_FRACTION: f64 = 0.01;

/// A temporal stack of DSA frames with acquisition metadata.
#[derive(Debug, Clone)]
pub struct DsaSequence<T> {
    frames: Vec<GrayImage<T>>,
    pub pixel_spacing: T,
    pub magnification: T,
    /// `(rot_z_deg, rot_y_deg)`
    pub gantry: Option<(T, T)>,
}

impl<T: Scalar> DsaSequence<T> {
    pub fn new(frames: Vec<GrayImage<T>>, pixel_spacing: T, magnification: T, gantry: Option<(T, T)>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        if let Some(f) = frames.iter().find(|f| !f.same_dims(first)) {
            return Err(Error::DimMismatch(format!("frame {:?} vs {:?}", f.dims(), first.dims())));
        }
        if !(pixel_spacing > T::zero() && magnification > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "pixel spacing ({pixel_spacing}) and magnification ({magnification}) must be positive"
            )));
        }
        Ok(DsaSequence {
            frames,
            pixel_spacing,
            magnification,
            gantry,
        })
    }

    pub fn frames(&self) -> &[GrayImage<T>] {
        &self.frames
    }

    pub fn metadata(&self) -> DsaMetadata {
        DsaMetadata {
            pixel_spacing_mm: self.pixel_spacing.as_f64(),
            magnification: self.magnification.as_f64(),
            gantry: self.gantry.map(|(z, y)| (z.as_f64(), y.as_f64())),
        }
    }
}

/// Contents of the `key = value` acquisition sidecar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsaMetadata {
    pub pixel_spacing_mm: f64,
    pub magnification: f64,
    pub gantry: Option<(f64, f64)>,
}

impl DsaMetadata {
    pub fn from_record(r: &Record) -> Result<Self> {
        let gantry = match (r.get("rot_z_deg"), r.get("rot_y_deg")) {
            (Some(_), Some(_)) => Some((r.get_f64("rot_z_deg")?, r.get_f64("rot_y_deg")?)),
            _ => None,
        };
        Ok(DsaMetadata {
            pixel_spacing_mm: r.get_f64("pixel_spacing_mm")?,
            magnification: r.get_f64("magnification")?,
            gantry,
        })
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![
            ("pixel_spacing_mm", self.pixel_spacing_mm.to_string()),
            ("magnification", self.magnification.to_string()),
        ];
        if let Some((z, y)) = self.gantry {
            e.push(("rot_z_deg", z.to_string()));
            e.push(("rot_y_deg", y.to_string()));
        }
        e
    }
}

/// Per-pixel minimum over the frames.
pub fn dsa_min_ip<T: Scalar>(seq: &DsaSequence<T>) -> Result<GrayImage<T>> {
    min_ip_stream(seq.frames.iter().cloned().map(Ok))
}

/// Streaming minimum: holds one frame plus the running minimum.
pub fn min_ip_stream<T: Scalar>(frames: impl IntoIterator<Item = Result<GrayImage<T>>>) -> Result<GrayImage<T>> {
    let mut acc: Option<Vec<T>> = None;
    let mut shape = None;
    for frame in frames {
        let frame = frame?;
        match (&mut acc, shape) {
            (None, _) => {
                shape = Some((frame.width(), frame.height(), frame.spacing()));
                acc = Some(frame.into_pixels());
            }
            (Some(a), Some((w, h, _))) => {
                if frame.dims() != (w, h) {
                    return Err(Error::DimMismatch(format!("frame {:?} vs {:?}", frame.dims(), (w, h))));
                }
                for (m, &p) in a.iter_mut().zip(frame.pixels()) {
                    if p < *m {
                        *m = p;
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    let (Some(px), Some((w, h, s))) = (acc, shape) else {
        return Err(Error::EmptySequence);
    };
    GrayImage::new(w, h, s, px)
}

pub fn default_border_threshold<T: Scalar>(img: &GrayImage<T>) -> T {
    img.max_value() * T::lit(BORDER_THRESHOLD_FRACTION)
}

/// Sets every pixel `<= threshold` that is 4-connected to the image border
/// through such pixels to the image maximum. Dark interior structures that
/// do not touch the border are left alone.
pub fn whiten_border<T: Scalar>(img: &GrayImage<T>, threshold: T) -> GrayImage<T> {
    let (w, h) = img.dims();
    let fill = img.max_value();
    let dark = |x: usize, y: usize| img.get(x, y) <= threshold;
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let on_border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if on_border && dark(x, y) && !seen[x + w * y] {
                seen[x + w * y] = true;
                queue.push_back((x, y));
            }
        }
    }
    let mut out = img.clone();
    while let Some((x, y)) = queue.pop_front() {
        out.set(x, y, fill);
        let mut visit = |nx: usize, ny: usize| {
            if !seen[nx + w * ny] && dark(nx, ny) {
                seen[nx + w * ny] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    out
}

/// How the magnification factor enters the DSA pixel spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MagnificationConvention {
    /// `pixel_spacing * magnification`
    #[default]
    Multiply,
    /// `pixel_spacing / magnification`
    Divide,
}

impl MagnificationConvention {
    pub fn label(&self) -> &'static str {
        match self {
            MagnificationConvention::Multiply => "multiply",
            MagnificationConvention::Divide => "divide",
        }
    }
}

/// DSA pixel spacing, `pixel_spacing * magnification`.
pub fn dsa_spacing<T: Scalar>(pixel_spacing: T, magnification: T) -> Result<T> {
    dsa_spacing_with(pixel_spacing, magnification, MagnificationConvention::Multiply)
}

pub fn dsa_spacing_with<T: Scalar>(pixel_spacing: T, magnification: T, conv: MagnificationConvention) -> Result<T> {
    if !(pixel_spacing > T::zero() && magnification > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "pixel spacing ({pixel_spacing}) and magnification ({magnification}) must be positive"
        )));
    }
    Ok(match conv {
        MagnificationConvention::Multiply => pixel_spacing * magnification,
        MagnificationConvention::Divide => pixel_spacing / magnification,
    })
}

/// Per-axis `round(spacing * dims / s_dsa)`.
pub fn resample_target_dims<T: Scalar>(dims: [usize; 3], spacing: [T; 3], s_dsa: T) -> Result<[usize; 3]> {
    if !(s_dsa > T::zero()) {
        return Err(Error::InvalidArgument(format!("DSA spacing must be positive, got {s_dsa}")));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        let d = (spacing[a] * T::from_usize_exact(dims[a]) / s_dsa).round();
        out[a] = d.to_usize().unwrap_or(0);
    }
    if out.contains(&0) {
        return Err(Error::InvalidArgument(format!("resampled dims degenerate: {out:?}")));
    }
    Ok(out)
}

/// Resamples a segmentation so its voxels have the DSA pixel spacing.
pub fn resample_to_dsa<T: Scalar>(v: &BinaryVolume<T>, s_dsa: T) -> Result<BinaryVolume<T>> {
    let dims = resample_target_dims(v.dims(), v.spacing(), s_dsa)?;
    resample_nearest(v, dims)?.with_spacing([s_dsa; 3])
}

/// Initial pose from the acquisition angles; translations start at zero.
pub fn initial_pose<T: Scalar>(seq: &DsaSequence<T>) -> Result<Pose<T>> {
    initial_pose_from(&seq.gantry)
}

pub fn initial_pose_from<T: Scalar>(gantry: &Option<(T, T)>) -> Result<Pose<T>> {
    let (rz, ry) = gantry.ok_or_else(|| Error::MissingMetadata("rot_z_deg/rot_y_deg".into()))?;
    Ok(Pose::new(T::zero(), T::zero(), rz, ry))
}

/// Options for the full DSA preparation chain.
#[derive(Debug, Clone, Copy, Default)]
pub struct DsaPrepOptions {
    /// Border threshold; `None` uses 1% of the image maximum.
    pub border_threshold: Option<f64>,
    pub convention: MagnificationConvention,
}

/// Minimum projection over time, border whitening, then DSA spacing.
pub fn prepare_dsa(seq: &DsaSequence<f64>, opts: &DsaPrepOptions) -> Result<GrayImage<f64>> {
    let min = dsa_min_ip(seq)?;
    finish_dsa(min, seq.pixel_spacing, seq.magnification, opts)
}

fn finish_dsa(min: GrayImage<f64>, pixel_spacing: f64, magnification: f64, opts: &DsaPrepOptions) -> Result<GrayImage<f64>> {
    let thr = opts.border_threshold.unwrap_or_else(|| default_border_threshold(&min));
    let spacing = dsa_spacing_with(pixel_spacing, magnification, opts.convention)?;
    whiten_border(&min, thr).with_spacing(spacing)
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_dsa_metadata(dir: &Path) -> Result<DsaMetadata> {
    DsaMetadata::from_record(&io::read_record(&dir.join(DSA_METADATA_FILE))?)
}

/// Loads every `*.pgm` frame of `dir` (sorted by name) plus its sidecar.
pub fn load_dsa_sequence(dir: &Path) -> Result<DsaSequence<f64>> {
    let meta = read_dsa_metadata(dir)?;
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| io::read_image(p).and_then(|f| f.with_spacing(meta.pixel_spacing_mm)))
        .collect::<Result<Vec<_>>>()?;
    DsaSequence::new(frames, meta.pixel_spacing_mm, meta.magnification, meta.gantry)
}

/// Streams the frames of `dir` through the preparation chain.
pub fn prepare_dsa_dir(dir: &Path, opts: &DsaPrepOptions) -> Result<(GrayImage<f64>, DsaMetadata)> {
    let meta = read_dsa_metadata(dir)?;
    let min = min_ip_stream(frame_paths(dir)?.iter().map(|p| io::read_image(p)))?;
    let img = finish_dsa(min, meta.pixel_spacing_mm, meta.magnification, opts)?;
    Ok((img, meta))
}

/// Writes frames as `frame_000.pgm, ...` plus the sidecar.
pub fn write_dsa_sequence(dir: &Path, seq: &DsaSequence<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (n, f) in seq.frames().iter().enumerate() {
        let bytes = io::encode_pgm(f, io::BitDepth::Sixteen)?;
        io::atomic_write(&dir.join(format!("frame_{n:03}.pgm")), &bytes)?;
    }
    io::write_record(&dir.join(DSA_METADATA_FILE), &seq.metadata().entries())
}
