//! Pose errors, summary statistics and the experiment runner.
//!
//! An experiment runs every (mode, algorithm, observation, network,
//! timesteps) combination on every case and seed, keeps the max-reward pose
//! of each run, and aggregates per row. Failed runs are recorded and skipped
//! by the statistics.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::nn::HeadKind;
use crate::agents::ppo::{network_for, pretrain, register_pretrained, train, TrainConfig};
use crate::agents::search::{cem_search, grid_oracle, random_search, CemConfig, GridConfig};
use crate::case::RegistrationCase;
use crate::env::{EnvConfig, Environment, ObservationMode, RegistrationEnv};
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose};
use crate::phantom::{make_case_with, PhantomConfig};
use crate::reward::RewardOptions;

/// Absolute per-parameter errors: translations in mm, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseError {
    pub e_tx: f64,
    pub e_ty: f64,
    pub e_rz: f64,
    pub e_ry: f64,
}

impl PoseError {
    pub fn summed(&self) -> f64 {
        self.e_tx + self.e_ty + self.e_rz + self.e_ry
    }

    /// Mean of the two translation errors, mm.
    pub fn translation(&self) -> f64 {
        0.5 * (self.e_tx + self.e_ty)
    }

    /// Mean of the two rotation errors, degrees.
    pub fn rotation(&self) -> f64 {
        0.5 * (self.e_rz + self.e_ry)
    }

    /// Translation errors in pixels.
    pub fn translation_px(&self, spacing: f64) -> [f64; 2] {
        [self.e_tx / spacing, self.e_ty / spacing]
    }

    /// Within `px` pixels and `deg` degrees on every parameter.
    pub fn within(&self, spacing: f64, px: f64, deg: f64) -> bool {
        let [x, y] = self.translation_px(spacing);
        x <= px && y <= px && self.e_rz <= deg && self.e_ry <= deg
    }
}

/// Per-parameter absolute error. Pose translations are already in mm, so
/// `spacing` (mm/px) only has to be valid here; see
/// [`PoseError::translation_px`] for pixel units.
pub fn pose_mae(est: &Pose<f64>, truth: &Pose<f64>, spacing: f64) -> Result<PoseError> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing}")));
    }
    Ok(PoseError {
        e_tx: (est.t_x - truth.t_x).abs(),
        e_ty: (est.t_y - truth.t_y).abs(),
        e_rz: angle_diff(est.r_z, truth.r_z).abs(),
        e_ry: angle_diff(est.r_y, truth.r_y).abs(),
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the mean rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, ties averaged.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("need at least two finite pairs".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("constant input has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ppo,
    Cem,
    Random,
    Grid,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Cem => "cem",
            Algorithm::Random => "random",
            Algorithm::Grid => "grid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Train on the evaluated case itself.
    Online,
    /// Train once on separate cases, then one deterministic episode per case.
    Pretrained,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Online => "online",
            Mode::Pretrained => "pretrained",
        }
    }
}

/// Sweep definition, read from TOML:
///
/// ```toml
/// seeds = [0, 1]
/// phantoms = 5              # evaluated cases, phantom seeds 0..phantoms
/// train_phantoms = 4        # pretraining cases, seeds after the evaluated ones
/// modes = ["online"]
/// algorithms = ["ppo", "cem", "random", "grid"]
/// observations = ["concat"]
/// networks = ["pcm"]
/// timesteps = [1000, 2000, 5000, 10000]
/// random_samples = 2000
///
/// [phantom]                 # phantom::PhantomConfig fields
/// noise_sigma = 0.03
/// [env]                     # env::EnvConfig fields
/// policy_resolution = 32
/// [train]                   # agents::TrainConfig fields; seed comes from `seeds`
/// rollout_len = 512
/// [cem]
/// [grid]
/// ```
///
/// Search baselines ignore the mode, observation, network and timestep axes
/// and appear once per case and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub phantoms: usize,
    pub train_phantoms: usize,
    pub modes: Vec<Mode>,
    pub algorithms: Vec<Algorithm>,
    pub observations: Vec<ObservationMode>,
    pub networks: Vec<HeadKind>,
    pub timesteps: Vec<usize>,
    pub random_samples: usize,
    pub phantom: PhantomConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub cem: CemConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            phantoms: 5,
            train_phantoms: 4,
            modes: vec![Mode::Online],
            algorithms: vec![Algorithm::Ppo, Algorithm::Cem, Algorithm::Random, Algorithm::Grid],
            observations: vec![ObservationMode::Concat],
            networks: vec![HeadKind::Pcm],
            timesteps: vec![10_000],
            random_samples: 2000,
            phantom: PhantomConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            cem: CemConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let uses_ppo = self.algorithms.contains(&Algorithm::Ppo);
        if self.seeds.is_empty() || self.algorithms.is_empty() {
            return Err(Error::InvalidArgument("seeds and algorithms must be non-empty".into()));
        }
        if uses_ppo
            && (self.modes.is_empty()
                || self.observations.is_empty()
                || self.networks.is_empty()
                || self.timesteps.is_empty()
                || self.timesteps.contains(&0))
        {
            return Err(Error::InvalidArgument("ppo needs modes, observations, networks and positive timesteps".into()));
        }
        if uses_ppo && self.modes.contains(&Mode::Pretrained) && self.train_phantoms == 0 {
            return Err(Error::InvalidArgument("pretrained mode needs train_phantoms > 0".into()));
        }
        self.env.validate()?;
        self.train.validate()
    }

    /// Evaluated and pretraining phantoms: seeds `0..phantoms`, then the next
    /// `train_phantoms` seeds.
    pub fn phantom_cases(&self) -> Result<(Vec<RegistrationCase>, Vec<RegistrationCase>)> {
        let n = self.phantoms as u64;
        let make = |s: u64| make_case_with(s, &self.phantom).map(|p| p.case);
        let eval = (0..n).into_par_iter().map(make).collect::<Result<Vec<_>>>()?;
        let train = (n..n + self.train_phantoms as u64).into_par_iter().map(make).collect::<Result<Vec<_>>>()?;
        Ok((eval, train))
    }
}

/// Identifies a report row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub mode: String,
    pub algorithm: String,
    pub observation: String,
    pub network: String,
    pub timesteps: usize,
}

/// One run on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub algorithm: String,
    pub observation: String,
    pub network: String,
    pub timesteps: usize,
    pub case_id: String,
    pub seed: u64,
    pub reward: Option<f64>,
    pub e_tx: Option<f64>,
    pub e_ty: Option<f64>,
    pub e_rz: Option<f64>,
    pub e_ry: Option<f64>,
    pub runtime_s: f64,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn key(&self) -> RowKey {
        RowKey {
            mode: self.mode.clone(),
            algorithm: self.algorithm.clone(),
            observation: self.observation.clone(),
            network: self.network.clone(),
            timesteps: self.timesteps,
        }
    }

    pub fn error(&self) -> Option<PoseError> {
        Some(PoseError {
            e_tx: self.e_tx?,
            e_ty: self.e_ty?,
            e_rz: self.e_rz?,
            e_ry: self.e_ry?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: RowKey,
    pub runs: usize,
    pub failures: usize,
    pub reward: Option<Stat>,
    pub e_tx: Option<Stat>,
    pub e_ty: Option<Stat>,
    pub e_rz: Option<Stat>,
    pub e_ry: Option<Stat>,
    /// Mean of the translation MAEs and of the rotation MAEs.
    pub translation: Option<f64>,
    pub rotation: Option<f64>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub records: Vec<RunRecord>,
}

/// Row statistics from raw records, rows sorted by key.
pub fn aggregate(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut keys: Vec<RowKey> = records.iter().map(RunRecord::key).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.key() == key).collect();
            let ok: Vec<&RunRecord> = rs.iter().copied().filter(|r| r.failure.is_none()).collect();
            let col = |f: &dyn Fn(&RunRecord) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                Stat::of(&v)
            };
            let e_tx = col(&|r| r.e_tx);
            let e_ty = col(&|r| r.e_ty);
            let e_rz = col(&|r| r.e_rz);
            let e_ry = col(&|r| r.e_ry);
            ReportRow {
                runs: rs.len(),
                failures: rs.len() - ok.len(),
                reward: col(&|r| r.reward),
                translation: e_tx.zip(e_ty).map(|(a, b)| 0.5 * (a.mean + b.mean)),
                rotation: e_rz.zip(e_ry).map(|(a, b)| 0.5 * (a.mean + b.mean)),
                e_tx,
                e_ty,
                e_rz,
                e_ry,
                runtime_s: rs.iter().map(|r| r.runtime_s).sum::<f64>() / rs.len() as f64,
                key,
            }
        })
        .collect()
}

fn search_key(alg: Algorithm) -> RowKey {
    RowKey {
        mode: "search".into(),
        algorithm: alg.label().into(),
        observation: "-".into(),
        network: "-".into(),
        timesteps: 0,
    }
}

fn record(key: RowKey, case: &RegistrationCase, seed: u64, outcome: Result<(Pose<f64>, f64)>, runtime_s: f64) -> RunRecord {
    let mut r = RunRecord {
        mode: key.mode,
        algorithm: key.algorithm,
        observation: key.observation,
        network: key.network,
        timesteps: key.timesteps,
        case_id: case.id.clone(),
        seed,
        reward: None,
        e_tx: None,
        e_ty: None,
        e_rz: None,
        e_ry: None,
        runtime_s,
        failure: None,
    };
    match outcome {
        Ok((pose, reward)) => {
            r.reward = Some(reward);
            if let Some(t) = case.truth {
                match pose_mae(&pose, &t, case.spacing()) {
                    Ok(e) => {
                        r.e_tx = Some(e.e_tx);
                        r.e_ty = Some(e.e_ty);
                        r.e_rz = Some(e.e_rz);
                        r.e_ry = Some(e.e_ry);
                    }
                    Err(e) => r.failure = Some(format!("{}: {e}", e.kind())),
                }
            }
        }
        Err(e) => r.failure = Some(format!("{}: {e}", e.kind())),
    }
    r
}

/// Runs the sweep. `train_cases` are only used by pretrained mode.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    cases: &[RegistrationCase],
    train_cases: &[RegistrationCase],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("experiment needs at least one case".into()));
    }
    let opts = RewardOptions::default();
    let cases: Vec<Arc<RegistrationCase>> = cases.iter().cloned().map(Arc::new).collect();
    let max_t = cfg.timesteps.iter().copied().max().unwrap_or(0);
    let mut records = Vec::new();

    for &alg in &cfg.algorithms {
        if alg == Algorithm::Ppo {
            continue;
        }
        let jobs: Vec<(usize, u64)> = (0..cases.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
        let mut out: Vec<RunRecord> = jobs
            .par_iter()
            .map(|&(c, seed)| {
                let case = &cases[c];
                let t0 = Instant::now();
                let res = match alg {
                    Algorithm::Cem => cem_search(case, &CemConfig { seed, ..cfg.cem }, &opts, None),
                    Algorithm::Random => random_search(case, cfg.random_samples, seed, &opts),
                    Algorithm::Grid => grid_oracle(case, &cfg.grid, &opts),
                    Algorithm::Ppo => unreachable!("handled below"),
                };
                let res = res.map(|r| (r.pose, r.reward.value));
                record(search_key(alg), case, seed, res, t0.elapsed().as_secs_f64())
            })
            .collect();
        records.append(&mut out);
    }

    if cfg.algorithms.contains(&Algorithm::Ppo) {
        for &mode in &cfg.modes {
            for &obs in &cfg.observations {
                for &head in &cfg.networks {
                    let env_cfg = EnvConfig {
                        observation: obs,
                        ..cfg.env
                    };
                    let key = |t: usize| RowKey {
                        mode: mode.label().into(),
                        algorithm: "ppo".into(),
                        observation: obs.label().into(),
                        network: head.label().into(),
                        timesteps: t,
                    };
                    match mode {
                        Mode::Online => {
                            // one run to the largest budget; smaller budgets read the
                            // running best at their checkpoint
                            let jobs: Vec<(usize, u64)> =
                                (0..cases.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
                            let out: Vec<Vec<RunRecord>> = jobs
                                .par_iter()
                                .map(|&(c, seed)| {
                                    online_records(cfg, &cases[c], &env_cfg, head, seed, max_t, &key)
                                })
                                .collect();
                            records.extend(out.into_iter().flatten());
                        }
                        Mode::Pretrained => {
                            for &t in &cfg.timesteps {
                                for &seed in &cfg.seeds {
                                    records.extend(pretrained_records(
                                        cfg, &cases, train_cases, &env_cfg, head, seed, t, key(t),
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ExperimentReport {
        rows: aggregate(&records),
        records,
    })
}

fn online_records(
    cfg: &ExperimentConfig,
    case: &Arc<RegistrationCase>,
    env_cfg: &EnvConfig,
    head: HeadKind,
    seed: u64,
    max_t: usize,
    key: &dyn Fn(usize) -> RowKey,
) -> Vec<RunRecord> {
    let tcfg = TrainConfig {
        total_timesteps: max_t,
        seed,
        ..cfg.train.clone()
    };
    let t0 = Instant::now();
    let res = online_checkpoints(case.clone(), env_cfg, &tcfg, head, &cfg.timesteps);
    let secs = t0.elapsed().as_secs_f64();
    match res {
        Ok(snaps) => cfg
            .timesteps
            .iter()
            .map(|&t| {
                let hit = snaps.iter().find(|s| s.0 == t).map(|s| (s.1, s.2));
                let out = hit.ok_or(Error::NoForeground);
                record(key(t), case, seed, out, secs * t as f64 / max_t as f64)
            })
            .collect(),
        Err(e) => cfg
            .timesteps
            .iter()
            .map(|&t| record(key(t), case, seed, Err(Error::InvalidArgument(e.to_string())), secs))
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn pretrained_records(
    cfg: &ExperimentConfig,
    cases: &[Arc<RegistrationCase>],
    train_cases: &[RegistrationCase],
    env_cfg: &EnvConfig,
    head: HeadKind,
    seed: u64,
    t: usize,
    key: RowKey,
) -> Vec<RunRecord> {
    let opts = RewardOptions::default();
    let tcfg = TrainConfig {
        total_timesteps: t,
        seed,
        ..cfg.train.clone()
    };
    let train_cases: Vec<Arc<RegistrationCase>> = train_cases.iter().cloned().map(Arc::new).collect();
    let trained = pretrain(&train_cases, env_cfg, &tcfg, head, opts).map(|(net, _)| net);
    cases
        .par_iter()
        .map(|case| {
            let t0 = Instant::now();
            let out = match &trained {
                Ok(net) => register_pretrained(case.clone(), net, env_cfg, opts).map(|r| (r.pose, r.reward.value)),
                Err(e) => Err(Error::InvalidArgument(format!("pretraining failed: {e}"))),
            };
            record(key.clone(), case, seed, out, t0.elapsed().as_secs_f64())
        })
        .collect()
}

/// Records the best pose when the step count reaches each checkpoint.
struct CheckpointedEnv {
    inner: RegistrationEnv,
    checkpoints: Vec<usize>,
    steps: usize,
    snapshots: Vec<(usize, Pose<f64>, f64)>,
}

impl CheckpointedEnv {
    fn new(inner: RegistrationEnv, checkpoints: Vec<usize>) -> Self {
        CheckpointedEnv {
            inner,
            checkpoints,
            steps: 0,
            snapshots: Vec::new(),
        }
    }
}

impl Environment for CheckpointedEnv {
    fn action_bounds(&self) -> Vec<f64> {
        self.inner.action_bounds()
    }

    fn input_shape(&self) -> crate::env::InputShape {
        Environment::input_shape(&self.inner)
    }

    fn reset(&mut self) -> Result<crate::env::PolicyInput> {
        Environment::reset(&mut self.inner)
    }

    fn step(&mut self, action: &[f64]) -> Result<(crate::env::PolicyInput, f64, bool)> {
        let out = Environment::step(&mut self.inner, action)?;
        self.steps += 1;
        if self.checkpoints.contains(&self.steps) {
            if let Some((p, v)) = self.inner.best() {
                self.snapshots.push((self.steps, p, v.value));
            }
        }
        Ok(out)
    }

    fn best_reward(&self) -> Option<f64> {
        self.inner.best_reward()
    }
}

/// Online registration of one case, returning the best pose after each
/// checkpoint (steps) in order.
pub fn online_checkpoints(
    case: Arc<RegistrationCase>,
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    head: HeadKind,
    checkpoints: &[usize],
) -> Result<Vec<(usize, Pose<f64>, f64)>> {
    let env = RegistrationEnv::new(case, *env_cfg, RewardOptions::default())?;
    let mut net = network_for::<f32>(env.input_shape(), 4, head, cfg.seed)?;
    let mut envs = [CheckpointedEnv::new(env, checkpoints.to_vec())];
    train(&mut envs, &mut net, cfg)?;
    Ok(envs[0].snapshots.clone())
}

pub fn write_records_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn pm(s: Option<Stat>, digits: usize) -> String {
    s.map_or("-".into(), |s| format!("{:.*}±{:.*}", digits, s.mean, digits, s.std))
}

/// Plain-text table, one line per row.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = [
        "mode", "algorithm", "obs", "net", "steps", "runs", "fail", "reward", "Tx(mm)", "Ty(mm)", "Rz(deg)", "Ry(deg)",
        "T(mm)", "R(deg)", "time(s)",
    ];
    let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        lines.push(vec![
            r.key.mode.clone(),
            r.key.algorithm.clone(),
            r.key.observation.clone(),
            r.key.network.clone(),
            if r.key.timesteps == 0 { "-".into() } else { r.key.timesteps.to_string() },
            r.runs.to_string(),
            r.failures.to_string(),
            pm(r.reward, 3),
            pm(r.e_tx, 1),
            pm(r.e_ty, 1),
            pm(r.e_rz, 1),
            pm(r.e_ry, 1),
            r.translation.map_or("-".into(), |v| format!("{v:.2}")),
            r.rotation.map_or("-".into(), |v| format!("{v:.2}")),
            format!("{:.1}", r.runtime_s),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_mae_examples() {
        let t = Pose::new(1.0, -2.0, 10.0, -5.0);
        assert_eq!(pose_mae(&t, &t, 0.5).unwrap(), PoseError::default());
        let e = Pose::new(2.0, 0.0, 13.0, -1.0);
        let m = pose_mae(&e, &t, 1.0).unwrap();
        assert_eq!((m.e_tx, m.e_ty, m.e_rz, m.e_ry), (1.0, 2.0, 3.0, 4.0));
        let m = pose_mae(&Pose::new(0.0, 0.0, 179.0, 0.0), &Pose::new(0.0, 0.0, -179.0, 0.0), 1.0).unwrap();
        assert!((m.e_rz - 2.0).abs() < 1e-12);
        assert!(pose_mae(&t, &t, 0.0).is_err());
        let m = pose_mae(&Pose::new(1.8, 0.0, 0.0, 0.0), &Pose::identity(), 0.9).unwrap();
        assert!((m.translation_px(0.9)[0] - 2.0).abs() < 1e-12);
        assert!(m.within(0.9, 2.0 + 1e-9, 0.0));
    }

    #[test]
    fn stats_are_population_std() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[9.0, 4.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        // ties take the mean rank
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 4]).is_err());
        assert!(spearman(&x, &x[..3]).is_err());
    }

    fn rec(alg: &str, case: &str, reward: f64, err: f64) -> RunRecord {
        let key = search_key(match alg {
            "cem" => Algorithm::Cem,
            _ => Algorithm::Random,
        });
        RunRecord {
            mode: key.mode,
            algorithm: key.algorithm,
            observation: key.observation,
            network: key.network,
            timesteps: key.timesteps,
            case_id: case.into(),
            seed: 0,
            reward: Some(reward),
            e_tx: Some(err),
            e_ty: Some(2.0 * err),
            e_rz: Some(err),
            e_ry: Some(0.5),
            runtime_s: 1.0,
            failure: None,
        }
    }

    #[test]
    fn aggregate_recomputes_from_records() {
        let mut records = vec![rec("cem", "a", 0.5, 1.0), rec("cem", "b", 0.7, 3.0), rec("random", "a", 0.1, 9.0)];
        let mut failed = rec("cem", "c", 0.0, 0.0);
        failed.reward = None;
        failed.failure = Some("NoForeground: x".into());
        records.push(failed);
        let rows = aggregate(&records);
        assert_eq!(rows.len(), 2);
        let cem = &rows[0];
        assert_eq!(cem.key.algorithm, "cem");
        assert_eq!((cem.runs, cem.failures), (3, 1));
        let r = cem.reward.unwrap();
        assert!((r.mean - 0.6).abs() < 1e-12 && (r.std - 0.1).abs() < 1e-12);
        assert!((cem.translation.unwrap() - 3.0).abs() < 1e-12);
        let single = &rows[1];
        assert_eq!(single.reward.unwrap(), Stat { mean: 0.1, std: 0.0 });

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        write_records_csv(&p, &records).unwrap();
        let back = read_records_csv(&p).unwrap();
        assert_eq!(aggregate(&back), rows);
        let table = render_table(&rows);
        assert!(table.lines().count() == 3 && table.contains("0.600±0.100"));
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let text = r#"
            seeds = [1, 2]
            phantoms = 2
            algorithms = ["cem", "grid"]
            [phantom]
            noise_sigma = 0.0
            [train]
            rollout_len = 256
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.train.rollout_len, 256);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.phantom.noise_sigma, 0.0);
        assert!(ExperimentConfig::from_toml("bogus = 1", Path::new("x.toml")).is_err());
        assert!(ExperimentConfig::from_toml("seeds = []", Path::new("x.toml")).is_err());
    }

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            dims: [40, 40, 32],
            image_size: 56,
            offset_translation_px: 6.0,
            offset_rotation_deg: 3.0,
            bounds: crate::case::PoseBounds {
                translation_px: 8.0,
                rotation_deg: 4.0,
            },
            ..PhantomConfig::clean()
        }
    }

    #[test]
    fn experiment_is_deterministic_and_checkpoints_are_monotone() {
        let cases: Vec<_> = (0..2).map(|s| make_case_with(s, &small_cfg()).unwrap().case).collect();
        let cfg = ExperimentConfig {
            algorithms: vec![Algorithm::Ppo, Algorithm::Random, Algorithm::Cem],
            timesteps: vec![64, 128],
            random_samples: 50,
            env: EnvConfig {
                policy_resolution: 8,
                episode_len: 32,
                ..EnvConfig::default()
            },
            train: TrainConfig {
                rollout_len: 64,
                batch_size: 32,
                epochs: 2,
                ..TrainConfig::default()
            },
            cem: CemConfig {
                population: 8,
                iters: 3,
                ..CemConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let a = run_experiment(&cfg, &cases, &[]).unwrap();
        let b = run_experiment(&cfg, &cases, &[]).unwrap();
        let strip = |r: &ExperimentReport| -> Vec<_> {
            r.records.iter().map(|x| (x.key(), x.case_id.clone(), x.reward, x.error())).collect()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.rows.len(), 4);
        for case in &cases {
            let at = |t: usize| {
                a.records
                    .iter()
                    .find(|r| r.case_id == case.id && r.algorithm == "ppo" && r.timesteps == t)
                    .unwrap()
                    .reward
                    .unwrap()
            };
            assert!(at(128) >= at(64));
        }
    }

    #[test]
    fn single_case_row_equals_its_record() {
        let case = make_case_with(3, &small_cfg()).unwrap().case;
        let cfg = ExperimentConfig {
            algorithms: vec![Algorithm::Random],
            random_samples: 30,
            ..ExperimentConfig::default()
        };
        let rep = run_experiment(&cfg, &[case], &[]).unwrap();
        let (row, rec) = (&rep.rows[0], &rep.records[0]);
        assert_eq!(row.reward.unwrap(), Stat { mean: rec.reward.unwrap(), std: 0.0 });
        assert_eq!(row.e_rz.unwrap().mean, rec.e_rz.unwrap());
    }

    #[test]
    fn reward_anticorrelates_with_error_across_runs() {
        // 50 random-search runs of varying effort on clean phantoms
        let cases: Vec<_> = (0..5).map(|s| make_case_with(s, &small_cfg()).unwrap().case).collect();
        let (mut rewards, mut errors) = (Vec::new(), Vec::new());
        for (i, case) in cases.iter().enumerate() {
            for k in 0..10u64 {
                let r = random_search(case, 1 + 3 * k as usize, 100 * i as u64 + k, &RewardOptions::default()).unwrap();
                let e = pose_mae(&r.pose, &case.truth.unwrap(), case.spacing()).unwrap();
                rewards.push(r.reward.value);
                errors.push(e.translation_px(case.spacing()).iter().sum::<f64>() + e.e_rz + e.e_ry);
            }
        }
        let rho = spearman(&rewards, &errors).unwrap();
        assert!(rho <= -0.7, "rho {rho}");
    }
}
