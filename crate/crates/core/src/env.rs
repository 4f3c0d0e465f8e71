//! Pose-adjustment environment: step-bounded actions, image observations and
//! the overlap reward per step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::case::{PoseBounds, RegistrationCase};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, GrayImage, Pose};
use crate::reward::{RewardOptions, RewardValue};
use crate::scalar::Scalar;

/// Largest change per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBounds {
    pub translation_px: f64,
    pub rotation_deg: f64,
}

impl Default for StepBounds {
    fn default() -> Self {
        StepBounds {
            translation_px: 5.0,
            rotation_deg: 0.5,
        }
    }
}

impl StepBounds {
    /// `[px, px, deg, deg]`
    pub fn as_array(&self) -> [f64; 4] {
        [self.translation_px, self.translation_px, self.rotation_deg, self.rotation_deg]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Silhouette and DSA as two planes.
    #[default]
    Concat,
    /// Silhouette tinted red over the grayscale DSA, three planes.
    Fuse,
}

impl ObservationMode {
    pub fn channels(self) -> usize {
        match self {
            ObservationMode::Concat => 2,
            ObservationMode::Fuse => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ObservationMode::Concat => "concat",
            ObservationMode::Fuse => "fuse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub step_bounds: StepBounds,
    /// Search range around the initial pose; `None` keeps the case's own.
    pub pose_bounds: Option<PoseBounds>,
    pub episode_len: usize,
    pub observation: ObservationMode,
    /// Side of the square planes handed to the policy.
    pub policy_resolution: usize,
    /// Reward emitted when the silhouette leaves the frame.
    pub reward_floor: f64,
    /// Tint opacity in fuse mode.
    pub fuse_alpha: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            step_bounds: StepBounds::default(),
            pose_bounds: None,
            episode_len: 200,
            observation: ObservationMode::Concat,
            policy_resolution: 128,
            reward_floor: -5.0,
            fuse_alpha: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let sb = self.step_bounds;
        if !(sb.translation_px > 0.0 && sb.rotation_deg > 0.0 && sb.translation_px.is_finite() && sb.rotation_deg.is_finite()) {
            return Err(Error::InvalidArgument(format!("step bounds must be positive, got {sb:?}")));
        }
        if let Some(b) = self.pose_bounds {
            if !(b.translation_px >= 0.0 && b.rotation_deg >= 0.0) {
                return Err(Error::InvalidArgument(format!("pose bounds must be non-negative, got {b:?}")));
            }
        }
        if self.episode_len == 0 || self.policy_resolution == 0 {
            return Err(Error::InvalidArgument("episode length and policy resolution must be positive".into()));
        }
        if !self.reward_floor.is_finite() || !(0.0..=1.0).contains(&self.fuse_alpha) {
            return Err(Error::InvalidArgument("reward floor must be finite and fuse alpha in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Continuous pose change: pixels for translation, degrees for rotation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub d_tx: f64,
    pub d_ty: f64,
    pub d_rz: f64,
    pub d_ry: f64,
}

impl Action {
    pub fn new(d_tx: f64, d_ty: f64, d_rz: f64, d_ry: f64) -> Self {
        Action { d_tx, d_ty, d_rz, d_ry }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Action::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.d_tx, self.d_ty, self.d_rz, self.d_ry]
    }

    pub fn clamped(&self, b: &StepBounds) -> Action {
        let h = b.as_array();
        let a = self.to_array();
        Action::from_array([0, 1, 2, 3].map(|i| a[i].clamp(-h[i], h[i])))
    }
}

/// Policy input: square planes, channel-major, plus the normalized pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mode: ObservationMode,
    pub size: usize,
    pub planes: Vec<f64>,
    /// Offsets from the initial pose divided by the pose bounds, in `[-1, 1]`.
    pub pose_vec: [f64; 4],
}

impl Observation {
    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.planes[c * n..(c + 1) * n]
    }
}

/// DSA scaled by its maximum into `[0, 1]`.
fn normalized_dsa<T: Scalar>(dsa: &GrayImage<T>) -> Result<GrayImage<T>> {
    let m = dsa.max_value();
    if m > T::zero() {
        dsa.map(|v| (v / m).max(T::zero()).min(T::one()))
    } else {
        dsa.map(|_| T::zero())
    }
}

fn check_dims<T: Scalar>(sil: &GrayImage<T>, dsa: &GrayImage<T>) -> Result<()> {
    if !sil.same_dims(dsa) {
        return Err(Error::DimMismatch(format!("silhouette {:?} vs DSA {:?}", sil.dims(), dsa.dims())));
    }
    Ok(())
}

/// Full-resolution concat planes `[silhouette, dsa]`, both in `[0, 1]`.
pub fn concat_planes<T: Scalar>(sil: &GrayImage<T>, dsa: &GrayImage<T>) -> Result<[GrayImage<T>; 2]> {
    check_dims(sil, dsa)?;
    Ok([sil.clone(), normalized_dsa(dsa)?])
}

/// Full-resolution fused RGB planes: `R = max(sil, dsa)`,
/// `G = B = dsa * (1 - alpha * sil)`.
pub fn fuse_planes<T: Scalar>(sil: &GrayImage<T>, dsa: &GrayImage<T>, alpha: T) -> Result<[GrayImage<T>; 3]> {
    check_dims(sil, dsa)?;
    let d = normalized_dsa(dsa)?;
    let (w, h) = d.dims();
    let r = sil.pixels().iter().zip(d.pixels()).map(|(&s, &g)| s.max(g)).collect();
    let gb: Vec<T> = sil
        .pixels()
        .iter()
        .zip(d.pixels())
        .map(|(&s, &g)| g * (T::one() - alpha * s))
        .collect();
    Ok([
        GrayImage::new(w, h, d.spacing(), r)?,
        GrayImage::new(w, h, d.spacing(), gb.clone())?,
        GrayImage::new(w, h, d.spacing(), gb)?,
    ])
}

/// Overlap weights of output cells over input cells along one axis.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let lo = a.floor() as usize;
            let hi = (b.ceil() as usize).min(n_in);
            (lo..hi)
                .filter_map(|i| {
                    let w = (b.min(i as f64 + 1.0) - a.max(i as f64)) / scale;
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resample to `out_w x out_h`.
pub fn area_downsample(img: &GrayImage<f64>, out_w: usize, out_h: usize) -> Result<GrayImage<f64>> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let (w, h) = img.dims();
    let wx = area_weights(w, out_w);
    let wy = area_weights(h, out_h);
    // rows first, then columns
    let mut tmp = vec![0.0; out_w * h];
    for y in 0..h {
        for (ox, ws) in wx.iter().enumerate() {
            tmp[y * out_w + ox] = ws.iter().map(|&(x, k)| k * img.get(x, y)).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (oy, ws) in wy.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = ws.iter().map(|&(y, k)| k * tmp[y * out_w + ox]).sum();
        }
    }
    let spacing = img.spacing() * w as f64 / out_w as f64;
    GrayImage::new(out_w, out_h, spacing, out)
}

/// Two-plane observation planes at `size x size`.
pub fn observe_concat(sil: &GrayImage<f64>, dsa: &GrayImage<f64>, size: usize) -> Result<Vec<f64>> {
    stack(&concat_planes(sil, dsa)?, size)
}

/// Three-plane fused observation planes at `size x size`.
pub fn observe_fuse(sil: &GrayImage<f64>, dsa: &GrayImage<f64>, alpha: f64, size: usize) -> Result<Vec<f64>> {
    stack(&fuse_planes(sil, dsa, alpha)?, size)
}

fn stack(planes: &[GrayImage<f64>], size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(planes.len() * size * size);
    for p in planes {
        let d = if p.dims() == (size, size) {
            p.clone()
        } else {
            area_downsample(p, size, size)?
        };
        out.extend(d.pixels().iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Outcome of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    /// The overlap reward, or the floor when the silhouette left the frame.
    pub reward: f64,
    pub value: Option<RewardValue<f64>>,
    pub done: bool,
}

/// What the policy network consumes: image planes and a small vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub planes: Vec<f64>,
    pub extra: Vec<f64>,
}

/// `(channels, side, extra)` of a [`PolicyInput`]; zero channels means no planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub size: usize,
    pub extra: usize,
}

/// Interface the trainer sees. Actions are raw deltas; the environment clamps.
pub trait Environment {
    fn action_bounds(&self) -> Vec<f64>;
    fn input_shape(&self) -> InputShape;
    fn reset(&mut self) -> Result<PolicyInput>;
    /// `(next input, reward, episode finished)`
    fn step(&mut self, action: &[f64]) -> Result<(PolicyInput, f64, bool)>;
    /// Highest reward seen so far, across episodes.
    fn best_reward(&self) -> Option<f64>;
}

impl From<Observation> for PolicyInput {
    fn from(o: Observation) -> Self {
        PolicyInput {
            planes: o.planes,
            extra: o.pose_vec.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationEnv {
    case: Arc<RegistrationCase>,
    cfg: EnvConfig,
    bounds: PoseBounds,
    reward_opts: RewardOptions<f64>,
    pose: Pose<f64>,
    best: Option<(Pose<f64>, RewardValue<f64>)>,
    step_count: usize,
    episode_count: usize,
    started: bool,
}

impl RegistrationEnv {
    pub fn new(case: Arc<RegistrationCase>, cfg: EnvConfig, reward_opts: RewardOptions<f64>) -> Result<Self> {
        cfg.validate()?;
        let bounds = cfg.pose_bounds.unwrap_or(case.bounds);
        let pose = case.initial_pose;
        Ok(RegistrationEnv {
            case,
            cfg,
            bounds,
            reward_opts,
            pose,
            best: None,
            step_count: 0,
            episode_count: 0,
            started: false,
        })
    }

    pub fn case(&self) -> &RegistrationCase {
        &self.case
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn pose(&self) -> Pose<f64> {
        self.pose
    }

    pub fn pose_bounds(&self) -> PoseBounds {
        self.bounds
    }

    /// Highest-reward pose seen since construction; resets keep it.
    pub fn best(&self) -> Option<(Pose<f64>, RewardValue<f64>)> {
        self.best
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn episode_count(&self) -> usize {
        self.episode_count
    }

    fn evaluate(&mut self) -> Result<(Observation, f64, Option<RewardValue<f64>>)> {
        let sil = self.case.silhouette(&self.pose)?;
        let value = match crate::reward::overlap_reward(&sil, &self.case.dsa, &self.reward_opts) {
            Ok(v) => Some(v),
            Err(Error::NoForeground | Error::NoBackground | Error::DegenerateIntensity(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(v) = value {
            if self.best.is_none_or(|(_, b)| v.value > b.value) {
                self.best = Some((self.pose, v));
            }
        }
        let size = self.cfg.policy_resolution;
        let planes = match self.cfg.observation {
            ObservationMode::Concat => observe_concat(&sil, &self.case.dsa, size)?,
            ObservationMode::Fuse => observe_fuse(&sil, &self.case.dsa, self.cfg.fuse_alpha, size)?,
        };
        let obs = Observation {
            mode: self.cfg.observation,
            size,
            planes,
            pose_vec: self.pose_vec(),
        };
        Ok((obs, value.map_or(self.cfg.reward_floor, |v| v.value), value))
    }

    fn pose_vec(&self) -> [f64; 4] {
        let h = self.bounds.half_widths(self.case.spacing());
        let d = PoseBounds::offset(&self.case.initial_pose, &self.pose);
        [0, 1, 2, 3].map(|a| if h[a] > 0.0 { (d[a] / h[a]).clamp(-1.0, 1.0) } else { 0.0 })
    }

    /// Back to the initial pose. The best pose survives.
    pub fn reset(&mut self) -> Result<Observation> {
        self.pose = self.case.initial_pose;
        self.step_count = 0;
        self.episode_count += 1;
        self.started = true;
        Ok(self.evaluate()?.0)
    }

    pub fn step(&mut self, action: &Action) -> Result<Step> {
        if !self.started {
            return Err(Error::InvalidArgument("step before reset".into()));
        }
        if self.step_count >= self.cfg.episode_len {
            return Err(Error::InvalidArgument("episode finished; reset first".into()));
        }
        if !action.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite action {action:?}")));
        }
        let a = action.clamped(&self.cfg.step_bounds);
        let s = self.case.spacing();
        let moved = Pose::new(
            self.pose.t_x + a.d_tx * s,
            self.pose.t_y + a.d_ty * s,
            normalize_angle(self.pose.r_z + a.d_rz),
            normalize_angle(self.pose.r_y + a.d_ry),
        );
        self.pose = self.bounds.clamp(&self.case.initial_pose, &moved, s);
        self.step_count += 1;
        let (observation, reward, value) = self.evaluate()?;
        Ok(Step {
            observation,
            reward,
            value,
            done: self.step_count == self.cfg.episode_len,
        })
    }
}

impl Environment for RegistrationEnv {
    fn action_bounds(&self) -> Vec<f64> {
        self.cfg.step_bounds.as_array().to_vec()
    }

    fn input_shape(&self) -> InputShape {
        InputShape {
            channels: self.cfg.observation.channels(),
            size: self.cfg.policy_resolution,
            extra: 4,
        }
    }

    fn reset(&mut self) -> Result<PolicyInput> {
        Ok(RegistrationEnv::reset(self)?.into())
    }

    fn step(&mut self, action: &[f64]) -> Result<(PolicyInput, f64, bool)> {
        if action.len() != 4 {
            return Err(Error::DimMismatch(format!("action has {} components, expected 4", action.len())));
        }
        let st = RegistrationEnv::step(self, &Action::new(action[0], action[1], action[2], action[3]))?;
        Ok((st.observation.into(), st.reward, st.done))
    }

    fn best_reward(&self) -> Option<f64> {
        self.best.map(|b| b.1.value)
    }
}
