//! On-disk formats.
//!
//! * Volumes (`.bvol`): an ASCII header of four `\n`-terminated lines
//!   (`BVOL1`, `dims NX NY NZ`, `spacing SX SY SZ` in mm, `data`) followed by
//!   exactly `NX*NY*NZ` bytes, each 0 or 1, x varying fastest, then y, then z.
//!   Voxels are single bytes, so no byte order applies.
//! * Images: binary 8- or 16-bit PGM (16-bit samples big-endian, as PGM
//!   requires). Intensities are normalised to `[0, 1]` on load. Spacing lives
//!   in a sidecar `<image>.meta` holding `spacing_mm = <value>`.
//! * Records (metadata sidecars, pose records): `key = value` text lines;
//!   `#` starts a comment.
//!
//! Every writer goes through [`atomic_write`] (temp file + rename).

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ImageEncoder};

use crate::error::{Error, Result};
use crate::geometry::{BinaryVolume, GrayImage, Pose};

pub const VOLUME_MAGIC: &str = "BVOL1";

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_volume(v: &BinaryVolume<f64>) -> Vec<u8> {
    let [nx, ny, nz] = v.dims();
    let [sx, sy, sz] = v.spacing();
    let mut out = format!("{VOLUME_MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\ndata\n").into_bytes();
    out.extend_from_slice(v.voxels());
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<BinaryVolume<f64>> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut lines = Vec::with_capacity(4);
    let mut pos = 0;
    for _ in 0..4 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?;
        lines.push(line.trim().to_string());
        pos += end + 1;
    }
    if lines[0] != VOLUME_MAGIC {
        return Err(bad("missing BVOL1 magic"));
    }
    let fields = |line: &str, key: &str| -> Result<Vec<String>> {
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(bad(&format!("expected `{key}` line")));
        }
        let v: Vec<String> = it.map(str::to_string).collect();
        if v.len() != 3 {
            return Err(bad(&format!("`{key}` needs three values")));
        }
        Ok(v)
    };
    let dims = fields(&lines[1], "dims")?
        .iter()
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad dims")))
        .collect::<Result<Vec<_>>>()?;
    let spacing = fields(&lines[2], "spacing")?
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| bad("bad spacing")))
        .collect::<Result<Vec<_>>>()?;
    if lines[3] != "data" {
        return Err(bad("expected `data` line"));
    }
    let n: usize = dims.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != n {
        return Err(bad(&format!("expected {n} voxel bytes, found {}", payload.len())));
    }
    BinaryVolume::new([dims[0], dims[1], dims[2]], [spacing[0], spacing[1], spacing[2]], payload.to_vec())
}

pub fn write_volume(path: &Path, v: &BinaryVolume<f64>) -> Result<()> {
    atomic_write(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<BinaryVolume<f64>> {
    decode_volume(&read_bytes(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    Eight,
    #[default]
    Sixteen,
}

/// Sidecar path carrying the spacing of an image file.
pub fn image_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Encodes an image with values in `[0, 1]` (clamped) as binary PGM.
pub fn encode_pgm(img: &GrayImage<f64>, depth: BitDepth) -> Result<Vec<u8>> {
    let maxval: u32 = match depth {
        BitDepth::Eight => 255,
        BitDepth::Sixteen => 65535,
    };
    let mut buf = format!("P5\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    for &v in img.pixels() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u16;
        match depth {
            BitDepth::Eight => buf.push(q as u8),
            BitDepth::Sixteen => buf.extend_from_slice(&q.to_be_bytes()),
        }
    }
    Ok(buf)
}

/// Decodes a grayscale image, normalising intensities to `[0, 1]`.
pub fn decode_gray(bytes: &[u8], spacing: f64) -> Result<GrayImage<f64>> {
    let img = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| Error::InvalidArgument(e.to_string()))?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    GrayImage::new(w, h, spacing, pixels)
}

/// Writes the image and its spacing sidecar.
pub fn write_image(path: &Path, img: &GrayImage<f64>, depth: BitDepth) -> Result<()> {
    atomic_write(path, &encode_pgm(img, depth)?)?;
    write_record(&image_sidecar(path), &[("spacing_mm", img.spacing().to_string())])
}

/// Reads an image; spacing comes from the sidecar, or 1 mm when there is none.
pub fn read_image(path: &Path) -> Result<GrayImage<f64>> {
    let bytes = read_bytes(path)?;
    let sidecar = image_sidecar(path);
    let spacing = if sidecar.exists() {
        read_record(&sidecar)?.get_f64("spacing_mm")?
    } else {
        1.0
    };
    decode_gray(&bytes, spacing).map_err(|e| match e {
        Error::Codec(c) => Error::format(path, c.to_string()),
        other => other,
    })
}

/// Encodes three `[0, 1]` planes as an 8-bit RGB PNG.
pub fn encode_png_rgb(planes: &[GrayImage<f64>; 3]) -> Result<Vec<u8>> {
    let (w, h) = planes[0].dims();
    if planes.iter().any(|p| p.dims() != (w, h)) {
        return Err(Error::DimMismatch("RGB planes differ in size".into()));
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        for p in planes {
            rgb.push(to_u8(p.pixels()[i]));
        }
    }
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(buf)
}

/// Quantisation used for 8-bit outputs.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ordered `key = value` record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    pub path: PathBuf,
    pub entries: Vec<(String, String)>,
}

impl Record {
    pub fn parse(text: &str, path: &Path) -> Result<Record> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Record {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::format(&self.path, format!("missing key `{key}`")))?;
        v.parse()
            .ok()
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| Error::format(&self.path, format!("`{key}` is not a finite number: {v}")))
    }

    pub fn render(entries: &[(&str, String)]) -> String {
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn read_record(path: &Path) -> Result<Record> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Record::parse(&text, path)
}

pub fn write_record(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    atomic_write(path, Record::render(entries).as_bytes())
}

pub fn pose_entries(p: &Pose<f64>) -> Vec<(&'static str, String)> {
    vec![
        ("tx_mm", p.t_x.to_string()),
        ("ty_mm", p.t_y.to_string()),
        ("rz_deg", p.r_z.to_string()),
        ("ry_deg", p.r_y.to_string()),
    ]
}

pub fn pose_from_record(r: &Record) -> Result<Pose<f64>> {
    Ok(Pose::new(
        r.get_f64("tx_mm")?,
        r.get_f64("ty_mm")?,
        r.get_f64("rz_deg")?,
        r.get_f64("ry_deg")?,
    ))
}

/// Writes a pose record, with optional trailing fields such as the reward.
pub fn write_pose(path: &Path, p: &Pose<f64>, extra: &[(&str, String)]) -> Result<()> {
    let mut e = pose_entries(p);
    e.extend(extra.iter().cloned());
    write_record(path, &e)
}

pub fn read_pose(path: &Path) -> Result<Pose<f64>> {
    pose_from_record(&read_record(path)?)
}
