//! Actor-critic network with hand-written gradients.
//!
//! All parameters live in one flat vector. Convolutions come first so that the
//! frozen extractor of the PCM head is a prefix the optimizer skips.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Convolutional encoder trained with the heads.
    #[default]
    Cnn,
    /// Frozen random convolutional features, trainable perceptron on top.
    Pcm,
}

impl HeadKind {
    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Cnn => "cnn",
            HeadKind::Pcm => "pcm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub head: HeadKind,
    /// Image planes in; zero for vector-only inputs.
    pub channels: usize,
    pub resolution: usize,
    /// 3x3 stride-2 convolutions, ReLU after each.
    pub conv_channels: Vec<usize>,
    /// Length of the vector input appended to the image features.
    pub extra: usize,
    /// Tanh hidden layers, separately for actor and critic.
    pub hidden: Vec<usize>,
    pub action_dim: usize,
}

impl Architecture {
    pub fn standard(head: HeadKind, channels: usize, resolution: usize) -> Self {
        Architecture {
            head,
            channels,
            resolution,
            conv_channels: vec![32, 64, 64],
            extra: 4,
            hidden: vec![64, 64],
            action_dim: 4,
        }
    }

    /// Vector input only: an MLP actor-critic.
    pub fn mlp(extra: usize, hidden: Vec<usize>, action_dim: usize) -> Self {
        Architecture {
            head: HeadKind::Cnn,
            channels: 0,
            resolution: 0,
            conv_channels: Vec::new(),
            extra,
            hidden,
            action_dim,
        }
    }

    /// One-line description stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "head={} in={}x{}x{}+{} conv3x3s2=[{}] mlp=[{}] act={}",
            self.head.label(),
            self.channels,
            self.resolution,
            self.resolution,
            self.extra,
            list(&self.conv_channels),
            list(&self.hidden),
            self.action_dim
        )
    }

    fn has_conv(&self) -> bool {
        self.channels > 0 && !self.conv_channels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim == 0 {
            return Err(Error::InvalidArgument("action dimension must be positive".into()));
        }
        if self.channels > 0 && self.resolution == 0 {
            return Err(Error::InvalidArgument("image input needs a positive resolution".into()));
        }
        if self.conv_channels.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.head == HeadKind::Pcm && !self.has_conv() {
            return Err(Error::InvalidArgument("pcm head needs image input and convolutions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    inp: usize,
    out: usize,
    at: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.out * (self.inp + 1)
    }

    fn forward<T: Scalar>(&self, p: &[T], x: &[T]) -> Vec<T> {
        let w = &p[self.at..self.at + self.out * self.inp];
        let b = &p[self.at + self.out * self.inp..self.at + self.len()];
        (0..self.out)
            .map(|o| b[o] + w[o * self.inp..(o + 1) * self.inp].iter().zip(x).map(|(&a, &c)| a * c).sum::<T>())
            .collect()
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    fn backward<T: Scalar>(&self, p: &[T], x: &[T], dy: &[T], g: &mut [T], want_dx: bool) -> Vec<T> {
        let nw = self.out * self.inp;
        for o in 0..self.out {
            let d = dy[o];
            if d == T::zero() {
                continue;
            }
            let gw = &mut g[self.at + o * self.inp..self.at + (o + 1) * self.inp];
            for (gi, &xi) in gw.iter_mut().zip(x) {
                *gi += d * xi;
            }
            g[self.at + nw + o] += d;
        }
        if !want_dx {
            return Vec::new();
        }
        let w = &p[self.at..self.at + nw];
        let mut dx = vec![T::zero(); self.inp];
        for o in 0..self.out {
            let d = dy[o];
            for (dxi, &wi) in dx.iter_mut().zip(&w[o * self.inp..(o + 1) * self.inp]) {
                *dxi += d * wi;
            }
        }
        dx
    }
}

/// 3x3 kernel, stride 2, zero padding 1: side `s` becomes `ceil(s / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    in_s: usize,
    out_s: usize,
    at: usize,
}

impl Conv {
    fn len(&self) -> usize {
        self.out_c * (self.in_c * 9 + 1)
    }

    /// Input index feeding output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn tap(&self, o: usize, k: usize) -> Option<usize> {
        let i = (2 * o + k) as isize - 1;
        (i >= 0 && (i as usize) < self.in_s).then_some(i as usize)
    }

    /// Returns post-ReLU activations.
    fn forward<T: Scalar>(&self, p: &[T], x: &[T]) -> Vec<T> {
        let (is, os) = (self.in_s, self.out_s);
        let nw = self.out_c * self.in_c * 9;
        let mut y = vec![T::zero(); self.out_c * os * os];
        for oc in 0..self.out_c {
            let b = p[self.at + nw + oc];
            let plane = &mut y[oc * os * os..(oc + 1) * os * os];
            plane.iter_mut().for_each(|v| *v = b);
            for ic in 0..self.in_c {
                let src = &x[ic * is * is..(ic + 1) * is * is];
                let k = &p[self.at + (oc * self.in_c + ic) * 9..][..9];
                for oy in 0..os {
                    for ky in 0..3 {
                        let Some(iy) = self.tap(oy, ky) else { continue };
                        let row = &src[iy * is..(iy + 1) * is];
                        for ox in 0..os {
                            let mut acc = T::zero();
                            for kx in 0..3 {
                                if let Some(ix) = self.tap(ox, kx) {
                                    acc += k[ky * 3 + kx] * row[ix];
                                }
                            }
                            plane[oy * os + ox] += acc;
                        }
                    }
                }
            }
            plane.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        y
    }

    /// `y` is the forward output; `dy` the gradient w.r.t. it.
    fn backward<T: Scalar>(&self, p: &[T], x: &[T], y: &[T], dy: &[T], g: &mut [T], want_dx: bool) -> Vec<T> {
        let (is, os) = (self.in_s, self.out_s);
        let nw = self.out_c * self.in_c * 9;
        let mut dx = if want_dx { vec![T::zero(); self.in_c * is * is] } else { Vec::new() };
        for oc in 0..self.out_c {
            // through the ReLU
            let d: Vec<T> = (0..os * os)
                .map(|i| {
                    let j = oc * os * os + i;
                    if y[j] > T::zero() {
                        dy[j]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            g[self.at + nw + oc] += d.iter().copied().sum::<T>();
            for ic in 0..self.in_c {
                let src = &x[ic * is * is..(ic + 1) * is * is];
                let kat = self.at + (oc * self.in_c + ic) * 9;
                for oy in 0..os {
                    for ky in 0..3 {
                        let Some(iy) = self.tap(oy, ky) else { continue };
                        for ox in 0..os {
                            let dv = d[oy * os + ox];
                            if dv == T::zero() {
                                continue;
                            }
                            for kx in 0..3 {
                                if let Some(ix) = self.tap(ox, kx) {
                                    g[kat + ky * 3 + kx] += dv * src[iy * is + ix];
                                    if want_dx {
                                        dx[ic * is * is + iy * is + ix] += dv * p[kat + ky * 3 + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    convs: Vec<Conv>,
    feature_dim: usize,
    pi: Vec<Dense>,
    vf: Vec<Dense>,
    mu: Dense,
    value: Dense,
    log_std: usize,
    len: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let mut at = 0;
        let mut convs = Vec::new();
        let feature_dim;
        if a.has_conv() {
            let (mut c, mut s) = (a.channels, a.resolution);
            for &oc in &a.conv_channels {
                let cv = Conv {
                    in_c: c,
                    out_c: oc,
                    in_s: s,
                    out_s: s.div_ceil(2),
                    at,
                };
                at += cv.len();
                convs.push(cv);
                c = oc;
                s = s.div_ceil(2);
            }
            feature_dim = c * s * s;
        } else {
            feature_dim = a.channels * a.resolution * a.resolution;
        }
        let z = feature_dim + a.extra;
        let mlp = |at: &mut usize| {
            let mut layers = Vec::new();
            let mut inp = z;
            for &h in &a.hidden {
                let d = Dense { inp, out: h, at: *at };
                *at += d.len();
                layers.push(d);
                inp = h;
            }
            (layers, inp)
        };
        let (pi, pi_out) = mlp(&mut at);
        let (vf, vf_out) = mlp(&mut at);
        let mu = Dense {
            inp: pi_out,
            out: a.action_dim,
            at,
        };
        at += mu.len();
        let value = Dense { inp: vf_out, out: 1, at };
        at += value.len();
        let log_std = at;
        at += a.action_dim;
        Layout {
            convs,
            feature_dim,
            pi,
            vf,
            mu,
            value,
            log_std,
            len: at,
        }
    }

    fn conv_len(&self) -> usize {
        self.convs.iter().map(Conv::len).sum()
    }
}

/// Actor-critic over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork<T> {
    arch: Architecture,
    layout: Layout,
    params: Vec<T>,
}

/// Forward pass of one input, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input to each convolution, then the final feature map.
    conv_acts: Vec<Vec<T>>,
    z: Vec<T>,
    pi_acts: Vec<Vec<T>>,
    vf_acts: Vec<Vec<T>>,
    pub mu: Vec<T>,
    pub value: T,
}

impl<T: Scalar> PolicyNetwork<T> {
    /// Scaled Gaussian initialization; the action mean starts near zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.len];
        let mut fill = |at: usize, n: usize, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng| {
            let sd = gain / (fan_in.max(1) as f64).sqrt();
            for v in &mut params[at..at + n] {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::lit(z * sd);
            }
        };
        for c in &layout.convs {
            fill(c.at, c.out_c * c.in_c * 9, c.in_c * 9, 2f64.sqrt(), &mut rng);
        }
        for d in layout.pi.iter().chain(&layout.vf) {
            fill(d.at, d.out * d.inp, d.inp, 2f64.sqrt(), &mut rng);
        }
        fill(layout.mu.at, layout.mu.out * layout.mu.inp, layout.mu.inp, 0.01, &mut rng);
        fill(layout.value.at, layout.value.inp, layout.value.inp, 1.0, &mut rng);
        Ok(PolicyNetwork { arch, layout, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.len {
            return Err(Error::DimMismatch(format!(
                "{} parameters for an architecture of {}",
                params.len(),
                layout.len
            )));
        }
        Ok(PolicyNetwork { arch, layout, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn action_dim(&self) -> usize {
        self.arch.action_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.feature_dim
    }

    /// Parameters the optimizer may change. The PCM extractor is excluded.
    pub fn trainable(&self) -> std::ops::Range<usize> {
        match self.arch.head {
            HeadKind::Pcm => self.layout.conv_len()..self.layout.len,
            HeadKind::Cnn => 0..self.layout.len,
        }
    }

    /// Convolutional parameters.
    pub fn extractor(&self) -> &[T] {
        &self.params[..self.layout.conv_len()]
    }

    pub fn log_std(&self) -> &[T] {
        &self.params[self.layout.log_std..self.layout.log_std + self.arch.action_dim]
    }

    pub fn set_log_std(&mut self, v: T) {
        let at = self.layout.log_std;
        self.params[at..at + self.arch.action_dim].iter_mut().for_each(|p| *p = v);
    }

    /// Whether training needs image planes or can run on cached features.
    pub fn features_frozen(&self) -> bool {
        self.arch.head == HeadKind::Pcm
    }

    fn check_input(&self, planes: &[T], extra: &[T]) -> Result<()> {
        let n = self.arch.channels * self.arch.resolution * self.arch.resolution;
        if planes.len() != n || extra.len() != self.arch.extra {
            return Err(Error::DimMismatch(format!(
                "input {}+{} for a network expecting {n}+{}",
                planes.len(),
                extra.len(),
                self.arch.extra
            )));
        }
        Ok(())
    }

    fn conv_forward(&self, planes: &[T]) -> Vec<Vec<T>> {
        let mut acts = vec![planes.to_vec()];
        for c in &self.layout.convs {
            let y = c.forward(&self.params, acts.last().expect("input present"));
            acts.push(y);
        }
        acts
    }

    /// Image features: the extractor output, or the raw planes without one.
    pub fn features(&self, planes: &[T]) -> Result<Vec<T>> {
        self.check_input(planes, &vec![T::zero(); self.arch.extra])?;
        Ok(self.conv_forward(planes).pop().expect("input present"))
    }

    fn heads(&self, conv_acts: Vec<Vec<T>>, features: &[T], extra: &[T]) -> Trace<T> {
        let mut z = features.to_vec();
        z.extend_from_slice(extra);
        let mlp = |layers: &[Dense]| {
            let mut acts = vec![z.clone()];
            for d in layers {
                let h: Vec<T> = d.forward(&self.params, acts.last().expect("input")).into_iter().map(T::tanh).collect();
                acts.push(h);
            }
            acts
        };
        let pi_acts = mlp(&self.layout.pi);
        let vf_acts = mlp(&self.layout.vf);
        let mu = self.layout.mu.forward(&self.params, pi_acts.last().expect("input"));
        let value = self.layout.value.forward(&self.params, vf_acts.last().expect("input"))[0];
        Trace {
            conv_acts,
            z,
            pi_acts,
            vf_acts,
            mu,
            value,
        }
    }

    pub fn forward(&self, planes: &[T], extra: &[T]) -> Result<Trace<T>> {
        self.check_input(planes, extra)?;
        let acts = self.conv_forward(planes);
        let f = acts.last().expect("input present").clone();
        Ok(self.heads(acts, &f, extra))
    }

    /// Forward from precomputed features; the trace cannot backpropagate
    /// into the extractor.
    pub fn forward_features(&self, features: &[T], extra: &[T]) -> Result<Trace<T>> {
        if features.len() != self.layout.feature_dim || extra.len() != self.arch.extra {
            return Err(Error::DimMismatch(format!(
                "features {}+{} for a network expecting {}+{}",
                features.len(),
                extra.len(),
                self.layout.feature_dim,
                self.arch.extra
            )));
        }
        Ok(self.heads(Vec::new(), features, extra))
    }

    /// Accumulates into `g` the gradient of a loss whose partials are `d_mu`,
    /// `d_value` at this trace. `d_log_std` is handled by the caller.
    pub fn backward(&self, t: &Trace<T>, d_mu: &[T], d_value: T, g: &mut [T]) {
        let train_conv = !t.conv_acts.is_empty() && self.trainable().start == 0 && !self.layout.convs.is_empty();
        let mut dz = vec![T::zero(); t.z.len()];
        let mut branch = |layers: &[Dense], acts: &[Vec<T>], head: &Dense, d_out: &[T], g: &mut [T]| {
            let want_first = train_conv || !layers.is_empty();
            let mut d = head.backward(&self.params, acts.last().expect("input"), d_out, g, want_first);
            for (i, layer) in layers.iter().enumerate().rev() {
                // through the tanh
                for (dv, &h) in d.iter_mut().zip(&acts[i + 1]) {
                    *dv *= T::one() - h * h;
                }
                d = layer.backward(&self.params, &acts[i], &d, g, train_conv || i > 0);
            }
            if train_conv {
                for (a, b) in dz.iter_mut().zip(&d) {
                    *a += *b;
                }
            }
        };
        branch(&self.layout.pi, &t.pi_acts, &self.layout.mu, d_mu, g);
        branch(&self.layout.vf, &t.vf_acts, &self.layout.value, &[d_value], g);
        if !train_conv {
            return;
        }
        let mut d = dz[..self.layout.feature_dim].to_vec();
        for (i, c) in self.layout.convs.iter().enumerate().rev() {
            d = c.backward(&self.params, &t.conv_acts[i], &t.conv_acts[i + 1], &d, g, i > 0);
        }
    }

    pub fn log_std_index(&self) -> usize {
        self.layout.log_std
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNetwork<U> {
        PolicyNetwork {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, lr: T) -> Self {
        Adam {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-5),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    /// Descends along `grad`, which must match `params` in length.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
