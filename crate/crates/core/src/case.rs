//! A registration case: volume, prepared DSA, initial pose, optional ground truth.
//!
//! On disk a case is a directory:
//!
//! ```text
//! volume.bvol        binary segmentation at DSA spacing
//! dsa.pgm            prepared DSA (+ dsa.pgm.meta with spacing_mm)
//! meta.txt           acquisition sidecar (pixel_spacing_mm, magnification, rot_z_deg, rot_y_deg)
//! initial.txt        optional initial pose record; overrides the gantry angles
//! truth.txt          optional ground-truth pose record
//! bounds.txt         optional search range (translation_px, rotation_deg)
//! annotations.jsonl  optional append-only manual annotations; the last one is the ground truth
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, normalize_angle, project_pose, BinaryVolume, GrayImage, ImageFrame, Pose};
use crate::io::{self, BitDepth};
use crate::preprocess::{self, DsaMetadata};
use crate::reward::{overlap_reward, RewardOptions, RewardValue};

pub const VOLUME_FILE: &str = "volume.bvol";
pub const DSA_FILE: &str = "dsa.pgm";
pub const TRUTH_FILE: &str = "truth.txt";
pub const INITIAL_FILE: &str = "initial.txt";
pub const BOUNDS_FILE: &str = "bounds.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Symmetric search range around the initial pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBounds {
    pub translation_px: f64,
    pub rotation_deg: f64,
}

impl Default for PoseBounds {
    fn default() -> Self {
        PoseBounds {
            translation_px: 100.0,
            rotation_deg: 30.0,
        }
    }
}

impl PoseBounds {
    /// Half-widths `[tx mm, ty mm, rz deg, ry deg]`.
    pub fn half_widths(&self, spacing: f64) -> [f64; 4] {
        let t = self.translation_px * spacing;
        [t, t, self.rotation_deg, self.rotation_deg]
    }

    /// Offset of `pose` from `center`, angles wrapped.
    pub fn offset(center: &Pose<f64>, pose: &Pose<f64>) -> [f64; 4] {
        [
            pose.t_x - center.t_x,
            pose.t_y - center.t_y,
            angle_diff(pose.r_z, center.r_z),
            angle_diff(pose.r_y, center.r_y),
        ]
    }

    pub fn contains(&self, center: &Pose<f64>, pose: &Pose<f64>, spacing: f64) -> bool {
        let tol = 1e-9;
        Self::offset(center, pose)
            .iter()
            .zip(self.half_widths(spacing))
            .all(|(d, h)| d.abs() <= h * (1.0 + tol) + tol)
    }

    pub fn clamp(&self, center: &Pose<f64>, pose: &Pose<f64>, spacing: f64) -> Pose<f64> {
        let d = Self::offset(center, pose);
        let h = self.half_widths(spacing);
        let c = [0, 1, 2, 3].map(|a| d[a].clamp(-h[a], h[a]));
        Pose::new(
            center.t_x + c[0],
            center.t_y + c[1],
            normalize_angle(center.r_z + c[2]),
            normalize_angle(center.r_y + c[3]),
        )
    }
}

/// One manual registration result, as stored in `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub case_id: String,
    pub pose: PoseRecord,
    pub reward: f64,
    pub annotator: String,
    pub timestamp_ms: u64,
}

/// Pose with the same field names as the text pose records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub tx_mm: f64,
    pub ty_mm: f64,
    pub rz_deg: f64,
    pub ry_deg: f64,
}

impl From<Pose<f64>> for PoseRecord {
    fn from(p: Pose<f64>) -> Self {
        PoseRecord {
            tx_mm: p.t_x,
            ty_mm: p.t_y,
            rz_deg: p.r_z,
            ry_deg: p.r_y,
        }
    }
}

impl From<PoseRecord> for Pose<f64> {
    fn from(p: PoseRecord) -> Self {
        Pose::new(p.tx_mm, p.ty_mm, p.rz_deg, p.ry_deg)
    }
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = dir.join(ANNOTATIONS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

/// Appends one record; the whole log is rewritten atomically.
pub fn append_annotation(dir: &Path, rec: &AnnotationRecord) -> Result<()> {
    let path = dir.join(ANNOTATIONS_FILE);
    let mut text = if path.exists() {
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
    } else {
        String::new()
    };
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&serde_json::to_string(rec).expect("annotation serializes"));
    text.push('\n');
    io::atomic_write(&path, text.as_bytes())
}

#[derive(Debug, Clone)]
pub struct RegistrationCase {
    pub id: String,
    pub volume: BinaryVolume<f64>,
    pub dsa: GrayImage<f64>,
    pub initial_pose: Pose<f64>,
    pub truth: Option<Pose<f64>>,
    pub bounds: PoseBounds,
    pub metadata: DsaMetadata,
}

impl RegistrationCase {
    pub fn new(id: impl Into<String>, volume: BinaryVolume<f64>, dsa: GrayImage<f64>, initial_pose: Pose<f64>) -> Result<Self> {
        let vs = volume.spacing()[0];
        if (vs - dsa.spacing()).abs() > 1e-9 * vs.max(dsa.spacing()) {
            return Err(Error::SpacingMismatch {
                volume: vs,
                image: dsa.spacing(),
            });
        }
        let metadata = DsaMetadata {
            pixel_spacing_mm: dsa.spacing(),
            magnification: 1.0,
            gantry: Some((initial_pose.r_z, initial_pose.r_y)),
        };
        Ok(RegistrationCase {
            id: id.into(),
            volume,
            dsa,
            initial_pose,
            truth: None,
            bounds: PoseBounds::default(),
            metadata,
        })
    }

    pub fn spacing(&self) -> f64 {
        self.dsa.spacing()
    }

    pub fn frame(&self) -> ImageFrame<f64> {
        self.dsa.frame()
    }

    pub fn silhouette(&self, pose: &Pose<f64>) -> Result<GrayImage<f64>> {
        project_pose(&self.volume, pose, &self.frame())
    }

    pub fn reward_at(&self, pose: &Pose<f64>, opts: &RewardOptions<f64>) -> Result<RewardValue<f64>> {
        overlap_reward(&self.silhouette(pose)?, &self.dsa, opts)
    }

    pub fn in_bounds(&self, pose: &Pose<f64>) -> bool {
        self.bounds.contains(&self.initial_pose, pose, self.spacing())
    }

    pub fn clamp_pose(&self, pose: &Pose<f64>) -> Pose<f64> {
        self.bounds.clamp(&self.initial_pose, pose, self.spacing())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_volume(&dir.join(VOLUME_FILE), &self.volume)?;
        io::write_image(&dir.join(DSA_FILE), &self.dsa, BitDepth::Sixteen)?;
        io::write_record(&dir.join(preprocess::DSA_METADATA_FILE), &self.metadata.entries())?;
        io::write_record(
            &dir.join(BOUNDS_FILE),
            &[
                ("translation_px", self.bounds.translation_px.to_string()),
                ("rotation_deg", self.bounds.rotation_deg.to_string()),
            ],
        )?;
        io::write_pose(&dir.join(INITIAL_FILE), &self.initial_pose, &[])?;
        if let Some(t) = &self.truth {
            io::write_pose(&dir.join(TRUTH_FILE), t, &[])?;
        }
        Ok(())
    }

    /// Loads a case directory. The initial pose comes from `initial.txt`, or
    /// else the acquisition sidecar; the latest annotation, when present,
    /// overrides `truth.txt`.
    pub fn load(dir: &Path) -> Result<Self> {
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into());
        let volume = io::read_volume(&dir.join(VOLUME_FILE))?;
        let dsa = io::read_image(&dir.join(DSA_FILE))?;
        let metadata = preprocess::read_dsa_metadata(dir)?;
        let initial_path = dir.join(INITIAL_FILE);
        let initial_pose = if initial_path.exists() {
            io::read_pose(&initial_path)?
        } else {
            preprocess::initial_pose_from(&metadata.gantry)?
        };
        let mut case = RegistrationCase::new(id, volume, dsa, initial_pose)?;
        case.metadata = metadata;
        let bounds_path = dir.join(BOUNDS_FILE);
        if bounds_path.exists() {
            let r = io::read_record(&bounds_path)?;
            case.bounds = PoseBounds {
                translation_px: r.get_f64("translation_px")?,
                rotation_deg: r.get_f64("rotation_deg")?,
            };
        }
        let truth_path = dir.join(TRUTH_FILE);
        if truth_path.exists() {
            case.truth = Some(io::read_pose(&truth_path)?);
        }
        if let Some(last) = read_annotations(dir)?.last() {
            case.truth = Some(last.pose.into());
        }
        Ok(case)
    }
}

/// Case directories directly below `root`, sorted by name.
pub fn list_case_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(VOLUME_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_clamp_and_contain() {
        let b = PoseBounds {
            translation_px: 10.0,
            rotation_deg: 5.0,
        };
        let c = Pose::new(1.0, 2.0, 178.0, 0.0);
        let p = Pose::new(100.0, -100.0, -170.0, -9.0);
        let q = b.clamp(&c, &p, 0.5);
        assert_eq!(q, Pose::new(6.0, -3.0, -177.0, -5.0));
        assert!(b.contains(&c, &q, 0.5));
        assert!(!b.contains(&c, &p, 0.5));
    }

    #[test]
    fn annotations_append_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_annotations(dir.path()).unwrap().is_empty());
        let mk = |tx: f64, t: u64| AnnotationRecord {
            case_id: "c".into(),
            pose: Pose::new(tx, 0.0, 1.0, 2.0).into(),
            reward: 0.5,
            annotator: "dr".into(),
            timestamp_ms: t,
        };
        append_annotation(dir.path(), &mk(1.0, 1)).unwrap();
        append_annotation(dir.path(), &mk(2.0, 2)).unwrap();
        let all = read_annotations(dir.path()).unwrap();
        assert_eq!(all, vec![mk(1.0, 1), mk(2.0, 2)]);
    }
}
