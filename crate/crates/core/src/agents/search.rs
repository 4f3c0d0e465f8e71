//! Derivative-free pose search: exhaustive coarse-to-fine grid, cross-entropy
//! method and uniform random search. All of them score poses with the exact
//! reward on the full-resolution case and report the best pose they visited.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::screen::ShiftScreen;
use crate::case::{PoseBounds, RegistrationCase};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Pose};
use crate::reward::{RewardOptions, RewardValue};

/// Best pose found by a search, with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub pose: Pose<f64>,
    pub reward: RewardValue<f64>,
    pub evaluations: usize,
    /// Best-so-far reward after each stage (grid level or CEM iteration).
    pub history: Vec<f64>,
}

/// Scores poses of one case. Poses whose silhouette has no foreground or no
/// background score `None` and never win.
pub struct Scorer<'a> {
    case: &'a RegistrationCase,
    opts: RewardOptions<f64>,
    evaluations: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(case: &'a RegistrationCase, opts: RewardOptions<f64>) -> Self {
        Scorer {
            case,
            opts,
            evaluations: 0,
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn score(&mut self, pose: &Pose<f64>) -> Result<Option<RewardValue<f64>>> {
        self.evaluations += 1;
        score_one(self.case, &self.opts, pose)
    }

    /// Scores in parallel; results come back in input order.
    pub fn score_all(&mut self, poses: &[Pose<f64>]) -> Result<Vec<Option<RewardValue<f64>>>> {
        self.evaluations += poses.len();
        poses
            .par_iter()
            .map(|p| score_one(self.case, &self.opts, p))
            .collect()
    }
}

fn score_one(case: &RegistrationCase, opts: &RewardOptions<f64>, pose: &Pose<f64>) -> Result<Option<RewardValue<f64>>> {
    match case.reward_at(pose, opts) {
        Ok(r) => Ok(Some(r)),
        Err(Error::NoForeground | Error::NoBackground | Error::DegenerateIntensity(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Offsets from the initial pose, `[tx px, ty px, rz deg, ry deg]`.
fn pose_at(case: &RegistrationCase, off: [f64; 4]) -> Pose<f64> {
    let s = case.spacing();
    let p0 = case.initial_pose;
    Pose::new(
        p0.t_x + off[0] * s,
        p0.t_y + off[1] * s,
        normalize_angle(p0.r_z + off[2]),
        normalize_angle(p0.r_y + off[3]),
    )
}

/// Upper limit on re-centring moves within one refinement level.
const MAX_MOVES_PER_LEVEL: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub coarse_step_px: f64,
    pub coarse_step_deg: f64,
    /// Each level hill-climbs over the 3^4 neighbourhoods of the beam poses
    /// until none improves, then the step halves.
    pub refine_levels: usize,
    /// Steps `(px, deg)` of the first refinement level; `None` means half the
    /// coarse steps.
    pub refine_start_step: Option<(f64, f64)>,
    /// Number of best poses kept and refined at the last levels.
    pub beam: usize,
    /// Distinct coarse cells kept after the exhaustive pass. The beam halves
    /// per level from here down to `beam`; while it is wider than
    /// `beam`, each level takes a single neighbourhood step.
    pub coarse_beam: usize,
    /// Rotation step of the translation screen; 0 disables it. For every
    /// rotation on this grid the whole-pixel image shifts are scored at once
    /// and the best distinct ones join the coarse pool.
    pub screen_step_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            coarse_step_px: 16.0,
            coarse_step_deg: 6.0,
            refine_levels: 5,
            refine_start_step: Some((2.0, 1.0)),
            beam: 4,
            coarse_beam: 32,
            screen_step_deg: 1.0,
        }
    }
}

impl GridConfig {
    /// Step sizes `(px, deg)` of the last level.
    pub fn final_resolution(&self) -> (f64, f64) {
        if self.refine_levels == 0 {
            return (self.coarse_step_px, self.coarse_step_deg);
        }
        let (px, deg) = self.first_refine_step();
        let f = 0.5f64.powi(self.refine_levels as i32 - 1);
        (px * f, deg * f)
    }

    fn first_refine_step(&self) -> (f64, f64) {
        self.refine_start_step
            .unwrap_or((0.5 * self.coarse_step_px, 0.5 * self.coarse_step_deg))
    }
}

/// Exhaustive search over a regular grid spanning the case's pose bounds,
/// then recursive refinement around the best cells. Deterministic.
pub fn grid_oracle(case: &RegistrationCase, cfg: &GridConfig, opts: &RewardOptions<f64>) -> Result<SearchResult> {
    let (st0, sr0) = cfg.first_refine_step();
    if !(cfg.coarse_step_px > 0.0 && cfg.coarse_step_deg > 0.0 && st0 > 0.0 && sr0 > 0.0) || cfg.beam == 0 {
        return Err(Error::InvalidArgument("grid steps must be positive and beam >= 1".into()));
    }
    let b = case.bounds;
    if !(b.translation_px.is_finite() && b.rotation_deg.is_finite()) {
        return Err(Error::InvalidArgument("grid search needs finite pose bounds".into()));
    }
    let mut scorer = Scorer::new(case, *opts);
    let axis = |half: f64, step: f64| {
        let m = (half / step + 1e-9).floor() as i64;
        (-m..=m).map(|i| i as f64 * step).collect::<Vec<_>>()
    };
    let ts = axis(b.translation_px, cfg.coarse_step_px);
    let rs = axis(b.rotation_deg, cfg.coarse_step_deg);
    let mut offsets = Vec::with_capacity(ts.len() * ts.len() * rs.len() * rs.len());
    for &tx in &ts {
        for &ty in &ts {
            for &rz in &rs {
                for &ry in &rs {
                    offsets.push([tx, ty, rz, ry]);
                }
            }
        }
    }

    let mut seen: HashSet<[u64; 4]> = offsets.iter().map(|o| o.map(f64::to_bits)).collect();
    let cell = [cfg.coarse_step_px, cfg.coarse_step_px, cfg.coarse_step_deg, cfg.coarse_step_deg];
    let mut width = cfg.coarse_beam.max(cfg.beam);
    let mut pool = score_offsets(case, &mut scorer, &offsets)?;
    let screened: Vec<_> = screen_offsets(case, cfg, opts, width)
        .into_iter()
        .filter(|o| seen.insert(o.map(f64::to_bits)))
        .collect();
    pool.extend(score_offsets(case, &mut scorer, &screened)?);
    let mut beam = distinct_top_k(&pool, width, cell);
    let mut history = vec![beam.first().map_or(f64::NEG_INFINITY, |(_, r)| r.value)];
    let (mut st, mut sr) = (2.0 * st0, 2.0 * sr0);
    for _ in 0..cfg.refine_levels {
        st *= 0.5;
        sr *= 0.5;
        if width > cfg.beam {
            width = (width / 2).max(cfg.beam);
            let mut cand = Vec::new();
            for (c, _) in &beam {
                for d in neighbourhood() {
                    let o = step_offset(c, d, st, sr, &b);
                    if seen.insert(o.map(f64::to_bits)) {
                        cand.push(o);
                    }
                }
            }
            let pool: Vec<_> = beam.iter().cloned().chain(score_offsets(case, &mut scorer, &cand)?).collect();
            beam = distinct_top_k(&pool, width, [st, st, sr, sr]);
            history.push(beam.first().map_or(f64::NEG_INFINITY, |(_, r)| r.value));
            continue;
        }
        // re-centre on the beam until no neighbour improves it, then halve again
        for _ in 0..MAX_MOVES_PER_LEVEL {
            let mut cand = Vec::new();
            for (c, _) in &beam {
                for d in neighbourhood() {
                    let o = step_offset(c, d, st, sr, &b);
                    if seen.insert(o.map(f64::to_bits)) {
                        cand.push(o);
                    }
                }
            }
            let scored = score_offsets(case, &mut scorer, &cand)?;
            let pool: Vec<_> = beam.iter().cloned().chain(scored).collect();
            let next = distinct_top_k(&pool, cfg.beam, [2.0 * st, 2.0 * st, 2.0 * sr, 2.0 * sr]);
            let moved = next.iter().map(|(o, _)| o).ne(beam.iter().map(|(o, _)| o));
            beam = next;
            if !moved {
                break;
            }
        }
        history.push(beam.first().map_or(f64::NEG_INFINITY, |(_, r)| r.value));
    }
    let Some((off, r)) = beam.first().cloned() else {
        return Err(Error::NoForeground);
    };
    Ok(SearchResult {
        pose: pose_at(case, off),
        reward: r,
        evaluations: scorer.evaluations(),
        history,
    })
}

/// Candidate offsets from the translation screen, best `k` distinct first.
fn screen_offsets(case: &RegistrationCase, cfg: &GridConfig, opts: &RewardOptions<f64>, k: usize) -> Vec<[f64; 4]> {
    const PEAKS_PER_ROTATION: usize = 4;
    let b = case.bounds;
    if !(cfg.screen_step_deg > 0.0) {
        return Vec::new();
    }
    let Some(screen) = ShiftScreen::new(&case.dsa, opts) else {
        return Vec::new();
    };
    let s = case.spacing();
    let m = (b.rotation_deg / cfg.screen_step_deg + 1e-9).floor() as i64;
    let rots: Vec<[f64; 2]> = (-m..=m)
        .flat_map(|i| (-m..=m).map(move |j| [i as f64 * cfg.screen_step_deg, j as f64 * cfg.screen_step_deg]))
        .collect();
    let mut found: Vec<([f64; 4], f64)> = rots
        .par_iter()
        .flat_map_iter(|r| {
            // render centred, where the volume border clips least
            let mut pose = pose_at(case, [0.0, 0.0, r[0], r[1]]);
            pose.t_x = 0.0;
            pose.t_y = 0.0;
            let origin = [-case.initial_pose.t_x / s, -case.initial_pose.t_y / s];
            let peaks = match case.silhouette(&pose) {
                Ok(mask) => screen.peaks(&mask, pose.r_z, pose.r_y, origin, b.translation_px, PEAKS_PER_ROTATION, 2.0),
                Err(_) => Vec::new(),
            };
            peaks.into_iter().map(move |(o, v)| ([o[0], o[1], r[0], r[1]], v))
        })
        .collect();
    // stable order for ties, independent of thread scheduling
    found.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.map(f64::to_bits).cmp(&b.0.map(f64::to_bits))));
    let cell = [2.0, 2.0, cfg.screen_step_deg, cfg.screen_step_deg];
    let mut out: Vec<[f64; 4]> = Vec::with_capacity(k);
    for (o, _) in found {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|q| (0..4).all(|a| (q[a] - o[a]).abs() <= cell[a] * 1.000001)) {
            out.push(o);
        }
    }
    out
}

fn step_offset(c: &[f64; 4], d: [f64; 4], st: f64, sr: f64, b: &PoseBounds) -> [f64; 4] {
    [
        (c[0] + d[0] * st).clamp(-b.translation_px, b.translation_px),
        (c[1] + d[1] * st).clamp(-b.translation_px, b.translation_px),
        (c[2] + d[2] * sr).clamp(-b.rotation_deg, b.rotation_deg),
        (c[3] + d[3] * sr).clamp(-b.rotation_deg, b.rotation_deg),
    ]
}

type Scored = ([f64; 4], RewardValue<f64>);

fn score_offsets(case: &RegistrationCase, scorer: &mut Scorer, offsets: &[[f64; 4]]) -> Result<Vec<Scored>> {
    let poses: Vec<_> = offsets.iter().map(|o| pose_at(case, *o)).collect();
    let scores = scorer.score_all(&poses)?;
    Ok(offsets
        .iter()
        .zip(scores)
        .filter_map(|(o, s)| s.map(|r| (*o, r)))
        .collect())
}

/// The `k` best entries, best first; earlier entries win ties.
fn top_k(pool: &[Scored], k: usize) -> Vec<Scored> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| pool[b].1.value.total_cmp(&pool[a].1.value).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| pool[i]).collect()
}

/// Like [`top_k`], but skips entries within one grid cell of an accepted one,
/// so the beam covers separate basins.
fn distinct_top_k(pool: &[Scored], k: usize, cell: [f64; 4]) -> Vec<Scored> {
    let mut out: Vec<Scored> = Vec::with_capacity(k);
    for cand in top_k(pool, pool.len()) {
        if out.len() == k {
            break;
        }
        let near = out
            .iter()
            .any(|(o, _)| (0..4).all(|a| (o[a] - cand.0[a]).abs() <= cell[a] * 1.000001));
        if !near {
            out.push(cand);
        }
    }
    out
}

/// Offsets of the 3^4 neighbourhood, centre excluded.
fn neighbourhood() -> impl Iterator<Item = [f64; 4]> {
    (0..81)
        .filter(|&n| n != 40)
        .map(|n| [n % 3, (n / 3) % 3, (n / 9) % 3, n / 27].map(|d| d as f64 - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub iters: usize,
    /// Initial standard deviation as a fraction of the pose bounds.
    pub init_std_frac: f64,
    /// Lower limit on the standard deviation, `(px, deg)`.
    pub min_std: (f64, f64),
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 64,
            elite_frac: 0.125,
            iters: 40,
            init_std_frac: 0.5,
            min_std: (0.25, 0.1),
            seed: 0,
        }
    }
}

/// Cross-entropy method over pose offsets. Starts from `mean` (default: the
/// initial pose) with diagonal Gaussian `std` in `[px, px, deg, deg]`.
pub fn cem_search(
    case: &RegistrationCase,
    cfg: &CemConfig,
    opts: &RewardOptions<f64>,
    start: Option<(Pose<f64>, [f64; 4])>,
) -> Result<SearchResult> {
    if cfg.population < 4 {
        return Err(Error::InvalidArgument(format!("population must be >= 4, got {}", cfg.population)));
    }
    if !(cfg.elite_frac > 0.0 && cfg.elite_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("elite fraction must be in (0, 1], got {}", cfg.elite_frac)));
    }
    let b = case.bounds;
    let half = [b.translation_px, b.translation_px, b.rotation_deg, b.rotation_deg];
    let s = case.spacing();
    let (mut mean, mut std, floor) = match start {
        Some((p, sd)) => {
            let d = crate::case::PoseBounds::offset(&case.initial_pose, &p);
            ([d[0] / s, d[1] / s, d[2], d[3]], sd, [0.0; 4])
        }
        None => (
            [0.0; 4],
            half.map(|h| h * cfg.init_std_frac),
            [cfg.min_std.0, cfg.min_std.0, cfg.min_std.1, cfg.min_std.1],
        ),
    };
    let clamp = |o: [f64; 4]| [0, 1, 2, 3].map(|a| o[a].clamp(-half[a], half[a]));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scorer = Scorer::new(case, *opts);
    let n_elite = ((cfg.population as f64 * cfg.elite_frac).ceil() as usize).clamp(1, cfg.population);

    let mut best: Option<Scored> = None;
    let mut history = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut offs = Vec::with_capacity(cfg.population);
        if it == 0 {
            offs.push(clamp(mean));
        }
        while offs.len() < cfg.population {
            let o = [0, 1, 2, 3].map(|a| {
                if std[a] > 0.0 {
                    mean[a] + std[a] * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng)
                } else {
                    mean[a]
                }
            });
            offs.push(clamp(o));
        }
        let scored = score_offsets(case, &mut scorer, &offs)?;
        let elites = top_k(&scored, n_elite);
        if let Some(top) = elites.first() {
            if best.is_none_or(|(_, r)| top.1.value > r.value) {
                best = Some(*top);
            }
        }
        if !elites.is_empty() {
            let n = elites.len() as f64;
            for a in 0..4 {
                let m = elites.iter().map(|(o, _)| o[a]).sum::<f64>() / n;
                let v = elites.iter().map(|(o, _)| (o[a] - m).powi(2)).sum::<f64>() / n;
                mean[a] = m;
                std[a] = v.sqrt().max(floor[a]);
            }
        }
        history.push(best.map_or(f64::NEG_INFINITY, |(_, r)| r.value));
    }
    let Some((off, reward)) = best else {
        return Err(Error::NoForeground);
    };
    Ok(SearchResult {
        pose: pose_at(case, off),
        reward,
        evaluations: scorer.evaluations(),
        history,
    })
}

/// Uniform sampling inside the pose bounds; the initial pose is scored first.
pub fn random_search(case: &RegistrationCase, samples: usize, seed: u64, opts: &RewardOptions<f64>) -> Result<SearchResult> {
    let b = case.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offs = vec![[0.0; 4]];
    let mut sym = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    while offs.len() < samples.max(1) {
        offs.push([
            sym(b.translation_px),
            sym(b.translation_px),
            sym(b.rotation_deg),
            sym(b.rotation_deg),
        ]);
    }
    let mut scorer = Scorer::new(case, *opts);
    let scored = score_offsets(case, &mut scorer, &offs)?;
    let Some(&(off, reward)) = top_k(&scored, 1).first() else {
        return Err(Error::NoForeground);
    };
    Ok(SearchResult {
        pose: pose_at(case, off),
        reward,
        evaluations: scorer.evaluations(),
        history: vec![reward.value],
    })
}
