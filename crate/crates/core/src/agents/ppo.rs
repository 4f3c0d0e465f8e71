//! Clipped-surrogate PPO over a tanh-squashed diagonal Gaussian policy.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nn::{Adam, Architecture, HeadKind, PolicyNetwork, Trace};
use crate::case::RegistrationCase;
use crate::env::{EnvConfig, Environment, InputShape, PolicyInput, RegistrationEnv};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::reward::{RewardOptions, RewardValue};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_timesteps: usize,
    /// Environment steps between updates, summed over environments.
    pub rollout_len: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    /// Global gradient-norm cap; zero disables it.
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    pub normalize_advantage: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 64,
            total_timesteps: 10_000,
            rollout_len: 2048,
            epochs: 10,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            init_log_std: 0.0,
            normalize_advantage: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.learning_rate, self.clip, self.gamma];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.batch_size == 0
            || self.rollout_len == 0
            || self.epochs == 0
            || !(0.0..=1.0).contains(&self.gamma)
            || !(0.0..=1.0).contains(&self.gae_lambda)
            || self.ent_coef < 0.0
            || self.vf_coef < 0.0
            || self.max_grad_norm < 0.0
            || !self.init_log_std.is_finite()
        {
            return Err(Error::InvalidArgument(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// Generalized advantage estimates. `values` carries one bootstrap value past
/// the last reward.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::DimMismatch(format!(
            "{} values for {} rewards, expected one more",
            values.len(),
            rewards.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Action in environment units: `bound * tanh(u)`.
pub fn squash(u: &[f64], bounds: &[f64]) -> Vec<f64> {
    u.iter().zip(bounds).map(|(&x, &b)| b * x.tanh()).collect()
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian log-density of the pre-squash sample.
pub fn gaussian_log_prob<T: Scalar>(u: &[T], mu: &[T], log_std: &[T]) -> T {
    u.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) / ls.exp();
            -T::lit(0.5) * z * z - ls - T::lit(HALF_LN_2PI)
        })
        .sum()
}

/// Log-density of the squashed action, with the change-of-variables term.
pub fn squashed_log_prob(u: &[f64], mu: &[f64], log_std: &[f64], bounds: &[f64]) -> f64 {
    let jac: f64 = u
        .iter()
        .zip(bounds)
        .map(|(&x, &b)| (b * (1.0 - x.tanh().powi(2)) + 1e-12).ln())
        .sum();
    gaussian_log_prob(u, mu, log_std) - jac
}

/// One stored transition, ready for the update.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// Image features when the extractor is frozen, raw planes otherwise.
    pub input: Vec<T>,
    pub extra: Vec<T>,
    pub u: Vec<T>,
    pub log_prob: T,
    pub advantage: T,
    pub ret: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl<T: Scalar> PolicyNetwork<T> {
    fn trace(&self, s: &Sample<T>) -> Result<Trace<T>> {
        if self.features_frozen() {
            self.forward_features(&s.input, &s.extra)
        } else {
            self.forward(&s.input, &s.extra)
        }
    }
}

/// Minibatch loss and its gradient over all parameters (frozen ones get zero).
pub fn ppo_loss_and_grad<T: Scalar>(
    net: &PolicyNetwork<T>,
    batch: &[&Sample<T>],
    cfg: &TrainConfig,
) -> Result<(T, LossStats, Vec<T>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let nf = T::from_usize_exact(n);
    let adv: Vec<T> = {
        let a: Vec<T> = batch.iter().map(|s| s.advantage).collect();
        if cfg.normalize_advantage && n > 1 {
            let mean = a.iter().copied().sum::<T>() / nf;
            let var = a.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::from_usize_exact(n - 1);
            let sd = var.sqrt() + T::lit(1e-8);
            a.iter().map(|&v| (v - mean) / sd).collect()
        } else {
            a
        }
    };
    let log_std = net.log_std().to_vec();
    let sigma2: Vec<T> = log_std.iter().map(|&l| (l + l).exp()).collect();
    let (lo, hi) = (T::one() - T::lit(cfg.clip), T::one() + T::lit(cfg.clip));
    let vf = T::lit(cfg.vf_coef);

    struct Part<T> {
        grad: Vec<T>,
        d_log_std: Vec<T>,
        policy: T,
        value: T,
        kl: T,
        clipped: usize,
    }
    let dim = net.action_dim();
    let chunk = |range: std::ops::Range<usize>| -> Result<Part<T>> {
        let mut p = Part {
            grad: vec![T::zero(); net.n_params()],
            d_log_std: vec![T::zero(); dim],
            policy: T::zero(),
            value: T::zero(),
            kl: T::zero(),
            clipped: 0,
        };
        for i in range {
            let s = batch[i];
            let t = net.trace(s)?;
            let lp = gaussian_log_prob(&s.u, &t.mu, &log_std);
            let log_ratio = lp - s.log_prob;
            let ratio = log_ratio.exp();
            let a = adv[i];
            let unclipped = ratio * a;
            let clipped = ratio.max(lo).min(hi) * a;
            p.policy -= unclipped.min(clipped);
            p.kl += (ratio - T::one()) - log_ratio;
            if (ratio - T::one()).abs() > T::lit(cfg.clip) {
                p.clipped += 1;
            }
            // d loss / d log_prob
            let dlp = if unclipped <= clipped { -a * ratio / nf } else { T::zero() };
            let mut d_mu = vec![T::zero(); dim];
            for d in 0..dim {
                let e = s.u[d] - t.mu[d];
                d_mu[d] = dlp * e / sigma2[d];
                p.d_log_std[d] += dlp * (e * e / sigma2[d] - T::one());
            }
            let err = t.value - s.ret;
            p.value += err * err;
            net.backward(&t, &d_mu, vf * T::lit(2.0) * err / nf, &mut p.grad);
        }
        Ok(p)
    };
    // fixed chunking keeps the summation order independent of the thread count
    const CHUNK: usize = 8;
    let ranges: Vec<_> = (0..n).step_by(CHUNK).map(|a| a..(a + CHUNK).min(n)).collect();
    let parts: Vec<Part<T>> = ranges.into_par_iter().map(chunk).collect::<Result<_>>()?;

    let mut grad = vec![T::zero(); net.n_params()];
    let (mut policy, mut value, mut kl, mut clipped) = (T::zero(), T::zero(), T::zero(), 0);
    let ls_at = net.log_std_index();
    for p in parts {
        for (g, v) in grad.iter_mut().zip(&p.grad) {
            *g += *v;
        }
        for d in 0..dim {
            grad[ls_at + d] += p.d_log_std[d];
        }
        policy += p.policy;
        value += p.value;
        kl += p.kl;
        clipped += p.clipped;
    }
    let policy = policy / nf;
    let value = value / nf;
    let entropy: T = log_std.iter().map(|&l| l + T::lit(0.5 + HALF_LN_2PI)).sum();
    let ent = T::lit(cfg.ent_coef);
    for d in 0..dim {
        grad[ls_at + d] -= ent;
    }
    let loss = policy + vf * value - ent * entropy;
    let stats = LossStats {
        policy_loss: policy.as_f64(),
        value_loss: value.as_f64(),
        entropy: entropy.as_f64(),
        approx_kl: (kl / nf).as_f64(),
        clip_fraction: clipped as f64 / n as f64,
    };
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("loss {loss}, {stats:?}, batch of {n}")));
    }
    Ok((loss, stats, grad))
}

/// Epochs of shuffled minibatch descent on one rollout. Returns the stats
/// averaged over minibatches.
pub fn ppo_update<T: Scalar>(
    net: &mut PolicyNetwork<T>,
    opt: &mut Adam<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossStats> {
    let range = net.trainable();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut total = LossStats::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = idx.iter().map(|&i| &samples[i]).collect();
            let (_, st, grad) = ppo_loss_and_grad(net, &batch, cfg)?;
            let mut g = grad[range.clone()].to_vec();
            if cfg.max_grad_norm > 0.0 {
                let norm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
                let cap = T::lit(cfg.max_grad_norm);
                if norm > cap {
                    let k = cap / (norm + T::lit(1e-6));
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
            opt.step(&mut net.params_mut()[range.clone()], &g);
            total.policy_loss += st.policy_loss;
            total.value_loss += st.value_loss;
            total.entropy += st.entropy;
            total.approx_kl += st.approx_kl;
            total.clip_fraction += st.clip_fraction;
            batches += 1;
        }
    }
    let k = batches.max(1) as f64;
    Ok(LossStats {
        policy_loss: total.policy_loss / k,
        value_loss: total.value_loss / k,
        entropy: total.entropy / k,
        approx_kl: total.approx_kl / k,
        clip_fraction: total.clip_fraction / k,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub timestep: usize,
    /// Mean per-step reward over the rollout.
    pub mean_reward: f64,
    /// Best reward seen by any environment so far.
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// Best reward after each environment step.
    pub best_trace: Vec<f64>,
    /// Mean reward of every finished episode, in completion order.
    pub episode_rewards: Vec<f64>,
    pub updates: Vec<LossStats>,
}

impl TrainReport {
    /// Best reward after `timestep` steps (1-based); `None` before the first.
    pub fn best_at(&self, timestep: usize) -> Option<f64> {
        if timestep == 0 {
            return None;
        }
        self.best_trace.get(timestep.min(self.best_trace.len()) - 1).copied()
    }
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Per-environment state during a rollout.
struct Lane<T> {
    input: PolicyInput,
    cached: Option<Vec<T>>,
    samples: Vec<Sample<T>>,
    values: Vec<T>,
    rewards: Vec<f64>,
    /// Index into `samples` where the running segment started.
    segment: usize,
    episode_sum: f64,
    episode_len: usize,
}

impl<T: Scalar> Lane<T> {
    /// Closes the running segment with a bootstrap value.
    fn close(&mut self, bootstrap: T, cfg: &TrainConfig) -> Result<()> {
        let r = &self.rewards[self.segment..];
        let mut v: Vec<f64> = self.values[self.segment..].iter().map(|x| x.as_f64()).collect();
        v.push(bootstrap.as_f64());
        let adv = gae(r, &v, cfg.gamma, cfg.gae_lambda)?;
        for (k, a) in adv.into_iter().enumerate() {
            let s = &mut self.samples[self.segment + k];
            s.advantage = T::lit(a);
            s.ret = T::lit(a + v[k]);
        }
        self.segment = self.samples.len();
        Ok(())
    }
}

fn check_shape<T: Scalar>(net: &PolicyNetwork<T>, shape: InputShape, bounds: &[f64]) -> Result<()> {
    let a = net.architecture();
    if a.channels != shape.channels
        || (shape.channels > 0 && a.resolution != shape.size)
        || a.extra != shape.extra
        || a.action_dim != bounds.len()
    {
        return Err(Error::DimMismatch(format!(
            "network {} does not fit input {shape:?} with {} actions",
            a.descriptor(),
            bounds.len()
        )));
    }
    Ok(())
}

/// Trains `net` on the environments, stepping them in lockstep. Rollouts hold
/// `rollout_len` steps summed over environments; the final one is cut short so
/// exactly `total_timesteps` steps are taken. Deterministic for a given seed.
pub fn train<T: Scalar, E: Environment + Send>(
    envs: &mut [E],
    net: &mut PolicyNetwork<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if envs.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one environment".into()));
    }
    let bounds = envs[0].action_bounds();
    for e in envs.iter() {
        check_shape(net, e.input_shape(), &e.action_bounds())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.set_log_std(T::lit(cfg.init_log_std));
    let mut opt = Adam::new(net.trainable().len(), T::lit(cfg.learning_rate));
    let k = envs.len();
    let frozen = net.features_frozen();

    let mut lanes: Vec<Lane<T>> = Vec::with_capacity(k);
    for e in envs.iter_mut() {
        lanes.push(Lane {
            input: e.reset()?,
            cached: None,
            samples: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
            segment: 0,
            episode_sum: 0.0,
            episode_len: 0,
        });
    }
    let mut report = TrainReport {
        curve: Vec::new(),
        best_trace: Vec::with_capacity(cfg.total_timesteps),
        episode_rewards: Vec::new(),
        updates: Vec::new(),
    };
    let mut t = 0usize;
    while t < cfg.total_timesteps {
        let steps = cfg.rollout_len.min(cfg.total_timesteps - t);
        let mut rollout_reward = 0.0;
        let mut taken = 0usize;
        while taken < steps {
            let active = k.min(steps - taken);
            // choose actions sequentially so the random stream is fixed
            let mut actions = Vec::with_capacity(active);
            for lane in lanes.iter_mut().take(active) {
                let extra = to_t::<T>(&lane.input.extra);
                let input = match (&lane.cached, frozen) {
                    (Some(f), true) => f.clone(),
                    (None, true) => net.features(&to_t(&lane.input.planes))?,
                    _ => to_t(&lane.input.planes),
                };
                let tr = if frozen {
                    net.forward_features(&input, &extra)?
                } else {
                    net.forward(&input, &extra)?
                };
                let u: Vec<T> = tr
                    .mu
                    .iter()
                    .zip(net.log_std())
                    .map(|(&m, &ls)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + ls.exp() * T::lit(z)
                    })
                    .collect();
                let lp = gaussian_log_prob(&u, &tr.mu, net.log_std());
                let uf: Vec<f64> = u.iter().map(|v| v.as_f64()).collect();
                actions.push(squash(&uf, &bounds));
                lane.samples.push(Sample {
                    input,
                    extra,
                    u,
                    log_prob: lp,
                    advantage: T::zero(),
                    ret: T::zero(),
                });
                lane.values.push(tr.value);
            }
            let results: Vec<Result<(PolicyInput, f64, bool)>> = if active > 1 {
                envs[..active]
                    .par_iter_mut()
                    .zip(actions.par_iter())
                    .map(|(e, a)| e.step(a))
                    .collect()
            } else {
                vec![envs[0].step(&actions[0])]
            };
            for (i, res) in results.into_iter().enumerate() {
                let (next, r, done) = res?;
                let lane = &mut lanes[i];
                lane.rewards.push(r);
                lane.episode_sum += r;
                lane.episode_len += 1;
                rollout_reward += r;
                lane.input = next;
                lane.cached = None;
                if done {
                    // time limit: bootstrap from the final observation
                    let v = value_of(net, lane)?;
                    lane.close(v, cfg)?;
                    report.episode_rewards.push(lane.episode_sum / lane.episode_len as f64);
                    lane.episode_sum = 0.0;
                    lane.episode_len = 0;
                    lane.input = envs[i].reset()?;
                    lane.cached = None;
                }
                let best = envs.iter().filter_map(|e| e.best_reward()).fold(f64::NEG_INFINITY, f64::max);
                report.best_trace.push(best);
            }
            taken += active;
        }
        let mut samples = Vec::with_capacity(steps);
        for lane in lanes.iter_mut() {
            if lane.segment < lane.samples.len() {
                let v = value_of(net, lane)?;
                lane.close(v, cfg)?;
            }
            samples.append(&mut lane.samples);
            lane.values.clear();
            lane.rewards.clear();
            lane.segment = 0;
        }
        let stats = ppo_update(net, &mut opt, &samples, cfg, &mut rng)?;
        report.updates.push(stats);
        t += steps;
        report.curve.push(CurvePoint {
            timestep: t,
            mean_reward: rollout_reward / steps as f64,
            best_reward: *report.best_trace.last().expect("at least one step"),
        });
    }
    Ok(report)
}

/// Critic value of the lane's current input, caching frozen features.
fn value_of<T: Scalar>(net: &PolicyNetwork<T>, lane: &mut Lane<T>) -> Result<T> {
    let extra = to_t::<T>(&lane.input.extra);
    if net.features_frozen() {
        let f = net.features(&to_t(&lane.input.planes))?;
        let v = net.forward_features(&f, &extra)?.value;
        lane.cached = Some(f);
        Ok(v)
    } else {
        Ok(net.forward(&to_t(&lane.input.planes), &extra)?.value)
    }
}

/// Deterministic action: the squashed mean.
pub fn act_deterministic<T: Scalar>(net: &PolicyNetwork<T>, input: &PolicyInput, bounds: &[f64]) -> Result<Vec<f64>> {
    let tr = net.forward(&to_t(&input.planes), &to_t(&input.extra))?;
    let mu: Vec<f64> = tr.mu.iter().map(|v| v.as_f64()).collect();
    Ok(squash(&mu, bounds))
}

/// Network matching an environment's inputs.
pub fn network_for<T: Scalar>(shape: InputShape, action_dim: usize, head: HeadKind, seed: u64) -> Result<PolicyNetwork<T>> {
    let mut arch = Architecture::standard(head, shape.channels, shape.size);
    arch.extra = shape.extra;
    arch.action_dim = action_dim;
    PolicyNetwork::new(arch, seed)
}

/// Outcome of a registration by a learned policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub pose: Pose<f64>,
    pub reward: RewardValue<f64>,
    pub steps: usize,
}

/// Trains a fresh network on the case alone and reports the best visited pose.
pub fn register_online(
    case: Arc<RegistrationCase>,
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    head: HeadKind,
    reward_opts: RewardOptions<f64>,
) -> Result<(Registration, TrainReport, PolicyNetwork<f32>)> {
    let env = RegistrationEnv::new(case, *env_cfg, reward_opts)?;
    let mut net = network_for::<f32>(env.input_shape(), 4, head, cfg.seed)?;
    let mut envs = [env];
    let report = train(&mut envs, &mut net, cfg)?;
    let (pose, reward) = envs[0]
        .best()
        .ok_or_else(|| Error::NoForeground)?;
    Ok((
        Registration {
            pose,
            reward,
            steps: report.best_trace.len(),
        },
        report,
        net,
    ))
}

/// Trains one network over several cases, one environment per case.
pub fn pretrain(
    cases: &[Arc<RegistrationCase>],
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    head: HeadKind,
    reward_opts: RewardOptions<f64>,
) -> Result<(PolicyNetwork<f32>, TrainReport)> {
    let mut envs = cases
        .iter()
        .map(|c| RegistrationEnv::new(c.clone(), *env_cfg, reward_opts))
        .collect::<Result<Vec<_>>>()?;
    let first = envs.first().ok_or_else(|| Error::InvalidArgument("no pretraining cases".into()))?;
    let mut net = network_for::<f32>(first.input_shape(), 4, head, cfg.seed)?;
    let report = train(&mut envs, &mut net, cfg)?;
    Ok((net, report))
}

/// One deterministic episode with a trained network; reports the best visited pose.
pub fn register_pretrained<T: Scalar>(
    case: Arc<RegistrationCase>,
    net: &PolicyNetwork<T>,
    env_cfg: &EnvConfig,
    reward_opts: RewardOptions<f64>,
) -> Result<Registration> {
    let mut env = RegistrationEnv::new(case, *env_cfg, reward_opts)?;
    let bounds = Environment::action_bounds(&env);
    check_shape(net, env.input_shape(), &bounds)?;
    let mut input = Environment::reset(&mut env)?;
    let mut steps = 0;
    loop {
        let a = act_deterministic(net, &input, &bounds)?;
        let (next, _, done) = Environment::step(&mut env, &a)?;
        steps += 1;
        input = next;
        if done {
            break;
        }
    }
    let (pose, reward) = env.best().ok_or(Error::NoForeground)?;
    Ok(Registration { pose, reward, steps })
}

const MAGIC: &[u8; 8] = b"VREGPOL\0";
const VERSION: u32 = 1;

/// Training settings echoed into a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointConfig {
    pub train: TrainConfig,
    pub env: EnvConfig,
}

/// Saved network: magic, version, JSON architecture, seed, JSON config echo,
/// then the parameters as little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub seed: u64,
    pub config: CheckpointConfig,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &PolicyNetwork<T>, seed: u64, config: CheckpointConfig) -> Self {
        Checkpoint {
            arch: net.architecture().clone(),
            seed,
            config,
            params: net.params().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn network<T: Scalar>(&self) -> Result<PolicyNetwork<T>> {
        PolicyNetwork::from_params(self.arch.clone(), self.params.iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let blob = |out: &mut Vec<u8>, b: &[u8]| {
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        };
        blob(&mut out, serde_json::to_string(&self.arch).expect("serializable").as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        blob(&mut out, serde_json::to_string(&self.config).expect("serializable").as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        let mut r = b;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (a, rest) = r.split_at(n);
            r = rest;
            Ok(a)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a policy checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let arch: Architecture = serde_json::from_slice(take(n)?).map_err(|e| bad(&format!("architecture: {e}")))?;
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let config: CheckpointConfig = serde_json::from_slice(take(n)?).map_err(|e| bad(&format!("config: {e}")))?;
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(n.checked_mul(4).ok_or_else(|| bad("parameter count overflow"))?)?;
        let params = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if !r.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        let ck = Checkpoint { arch, seed, config, params };
        ck.network::<f32>().map_err(|e| bad(&e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut b = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut b))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&b, path)
    }
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for p in curve {
        w.serialize(p).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// A point on a line that should move to a hidden target. The observation is
/// the signed error, the reward its negative magnitude.
#[derive(Debug, Clone)]
pub struct LineEnv {
    pub target: f64,
    pub start: f64,
    pub step_bound: f64,
    pub episode_len: usize,
    x: f64,
    steps: usize,
    best: Option<f64>,
}

impl LineEnv {
    pub fn new(start: f64, target: f64) -> Self {
        LineEnv {
            target,
            start,
            step_bound: 0.1,
            episode_len: 20,
            x: start,
            steps: 0,
            best: None,
        }
    }

    fn input(&self) -> PolicyInput {
        PolicyInput {
            planes: Vec::new(),
            extra: vec![self.x - self.target],
        }
    }
}

impl Environment for LineEnv {
    fn action_bounds(&self) -> Vec<f64> {
        vec![self.step_bound]
    }

    fn input_shape(&self) -> InputShape {
        InputShape {
            channels: 0,
            size: 0,
            extra: 1,
        }
    }

    fn reset(&mut self) -> Result<PolicyInput> {
        self.x = self.start;
        self.steps = 0;
        Ok(self.input())
    }

    fn step(&mut self, action: &[f64]) -> Result<(PolicyInput, f64, bool)> {
        let a = action.first().copied().unwrap_or(0.0).clamp(-self.step_bound, self.step_bound);
        self.x += a;
        self.steps += 1;
        let r = -(self.x - self.target).abs();
        self.best = Some(self.best.map_or(r, |b| b.max(r)));
        Ok((self.input(), r, self.steps >= self.episode_len))
    }

    fn best_reward(&self) -> Option<f64> {
        self.best
    }
}
