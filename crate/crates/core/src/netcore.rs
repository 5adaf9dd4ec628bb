//! Dense ReLU feedforward network with exact reverse-mode gradients,
//! inverted-dropout masks and an Adam optimizer.
//!
//! Parameters live in one flat `Vec<f64>`: for each layer the weight matrix
//! (row-major, `fan_out × fan_in`) followed by its bias vector. Gradients and
//! Adam moments use the same layout, so optimizer updates are plain
//! element-wise loops.

use rand::distributions::{Bernoulli, Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmlError};

/// Added to the softplus output of a mean-and-sigma head so σ never reaches 0.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Identity output.
    Point,
    /// First half of the outputs is μ, second half is softplus(s) + [`SIGMA_FLOOR`].
    MeanAndSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

fn layout_for(sizes: &[usize]) -> (Vec<LayerLayout>, usize) {
    let mut off = 0;
    let layers = sizes
        .windows(2)
        .map(|w| {
            let l = LayerLayout {
                fan_in: w[0],
                fan_out: w[1],
                w_off: off,
                b_off: off + w[0] * w[1],
            };
            off = l.b_off + w[1];
            l
        })
        .collect();
    (layers, off)
}

fn validate_sizes(sizes: &[usize], head: HeadKind) -> Result<()> {
    if sizes.len() < 2 {
        return Err(SmlError::Config(format!(
            "layer_sizes needs at least input and output entries, got {sizes:?}"
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(SmlError::Config(format!("layer_sizes must be positive, got {sizes:?}")));
    }
    if head == HeadKind::MeanAndSigma && sizes[sizes.len() - 1] % 2 != 0 {
        return Err(SmlError::Config(format!(
            "mean_and_sigma head needs an even output width, got {sizes:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpRepr {
    layer_sizes: Vec<usize>,
    head: HeadKind,
    params: Vec<f64>,
}

/// Multi-layer perceptron: ReLU hidden layers, identity output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    head: HeadKind,
    params: Vec<f64>,
    layout: Vec<LayerLayout>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = SmlError;

    fn try_from(r: MlpRepr) -> Result<Self> {
        validate_sizes(&r.layer_sizes, r.head)?;
        let (layout, n) = layout_for(&r.layer_sizes);
        if r.params.len() != n {
            return Err(SmlError::Config(format!(
                "parameter count {} does not match layer_sizes {:?} ({n})",
                r.params.len(),
                r.layer_sizes
            )));
        }
        if r.params.iter().any(|p| !p.is_finite()) {
            return Err(SmlError::Config("non-finite parameter in network dump".into()));
        }
        Ok(Mlp {
            layer_sizes: r.layer_sizes,
            head: r.head,
            params: r.params,
            layout,
        })
    }
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr {
            layer_sizes: m.layer_sizes,
            head: m.head,
            params: m.params,
        }
    }
}

/// Builds a network with weights drawn from U(−1/√fan_in, 1/√fan_in) and zero biases.
pub fn mlp_init(layer_sizes: &[usize], head: HeadKind, seed: u64) -> Result<Mlp> {
    validate_sizes(layer_sizes, head)?;
    let (layout, n) = layout_for(layer_sizes);
    let mut params = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &layout {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut params[l.w_off..l.b_off] {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(Mlp {
        layer_sizes: layer_sizes.to_vec(),
        head,
        params,
        layout,
    })
}

/// Which hidden layers a dropout mask covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutScope {
    AllHidden,
    LastHidden,
}

/// Per-hidden-unit keep pattern. Kept units are scaled by `1 / keep_prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    /// One entry per hidden layer; `None` for layers outside the scope.
    keep: Vec<Option<Vec<bool>>>,
    keep_prob: f64,
    scope: DropoutScope,
}

impl DropoutMask {
    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn scale(&self) -> f64 {
        1.0 / self.keep_prob
    }

    pub fn scope(&self) -> DropoutScope {
        self.scope
    }

    /// Keep flags of hidden layer `h` (0-based), if it is masked.
    pub fn layer(&self, h: usize) -> Option<&[bool]> {
        self.keep.get(h).and_then(|k| k.as_deref())
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().flatten().flatten().filter(|&&k| k).count()
    }

    pub fn unit_count(&self) -> usize {
        self.keep.iter().flatten().map(Vec::len).sum()
    }
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    layer_sizes: Vec<usize>,
    input: Vec<f64>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation (after ReLU and mask) per hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Mask multipliers (0 or 1/keep_prob) per hidden layer, empty when unmasked.
    mult: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activations of layer `l` (hidden layers first, then the output layer).
    pub fn pre_activation(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    /// Post-activation values of hidden layer `h`.
    pub fn hidden(&self, h: usize) -> &[f64] {
        &self.hidden[h]
    }
}

/// Flat gradient vector with the same layout as [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width of the raw output layer (2m for a mean-and-sigma head).
    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn hidden_layer_count(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Weight matrix of layer `l`, row-major `fan_out × fan_in`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let ly = self.layout[l];
        &self.params[ly.w_off..ly.b_off]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let ly = self.layout[l];
        &mut self.params[ly.w_off..ly.b_off]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let ly = self.layout[l];
        &self.params[ly.b_off..ly.b_off + ly.fan_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let ly = self.layout[l];
        &mut self.params[ly.b_off..ly.b_off + ly.fan_out]
    }

    /// Samples a dropout mask; each in-scope hidden unit is kept with probability `keep_prob`.
    pub fn sample_mask<R: Rng + ?Sized>(
        &self,
        keep_prob: f64,
        scope: DropoutScope,
        rng: &mut R,
    ) -> Result<DropoutMask> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(SmlError::arg(format!("keep_prob must lie in (0, 1], got {keep_prob}")));
        }
        let bern = Bernoulli::new(keep_prob).expect("checked range");
        let hidden = self.hidden_layer_count();
        let keep = (0..hidden)
            .map(|h| {
                let in_scope = match scope {
                    DropoutScope::AllHidden => true,
                    DropoutScope::LastHidden => h + 1 == hidden,
                };
                in_scope.then(|| {
                    (0..self.layer_sizes[h + 1])
                        .map(|_| bern.sample(rng))
                        .collect()
                })
            })
            .collect();
        Ok(DropoutMask {
            keep,
            keep_prob,
            scope,
        })
    }

    /// Redraws every in-scope flag of `mask` in place, consuming the RNG
    /// exactly as [`Mlp::sample_mask`] would.
    pub fn resample_mask<R: Rng + ?Sized>(&self, mask: &mut DropoutMask, rng: &mut R) -> Result<()> {
        self.check_mask(mask)?;
        let bern = Bernoulli::new(mask.keep_prob).expect("validated at construction");
        for flags in mask.keep.iter_mut().flatten() {
            for f in flags.iter_mut() {
                *f = bern.sample(rng);
            }
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        if mask.keep.len() != self.hidden_layer_count() {
            return Err(SmlError::arg("dropout mask layer count does not match network"));
        }
        for (h, k) in mask.keep.iter().enumerate() {
            if let Some(k) = k {
                if k.len() != self.layer_sizes[h + 1] {
                    return Err(SmlError::arg(format!(
                        "dropout mask width {} does not match hidden layer {h} width {}",
                        k.len(),
                        self.layer_sizes[h + 1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward pass returning the (head-transformed) output and its cache.
    pub fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<(Vec<f64>, ForwardCache)> {
        let mut cache = ForwardCache::default();
        self.forward_into(x, mask, &mut cache)?;
        Ok((cache.output.clone(), cache))
    }

    /// Forward pass reusing the buffers of `cache`.
    pub fn forward_into(
        &self,
        x: &[f64],
        mask: Option<&DropoutMask>,
        cache: &mut ForwardCache,
    ) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(SmlError::arg(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let n_layers = self.layout.len();
        let hidden = n_layers - 1;
        if cache.layer_sizes != self.layer_sizes {
            cache.layer_sizes = self.layer_sizes.clone();
            cache.pre = self.layout.iter().map(|l| vec![0.0; l.fan_out]).collect();
            cache.hidden = self.layout[..hidden].iter().map(|l| vec![0.0; l.fan_out]).collect();
            cache.mult = vec![Vec::new(); hidden];
            cache.output = vec![0.0; self.output_dim()];
        }
        cache.input.clear();
        cache.input.extend_from_slice(x);

        for (li, ly) in self.layout.iter().enumerate() {
            let w = &self.params[ly.w_off..ly.b_off];
            let b = &self.params[ly.b_off..ly.b_off + ly.fan_out];
            let (prev_hidden, rest) = cache.hidden.split_at_mut(li.min(hidden));
            let input: &[f64] = if li == 0 { &cache.input } else { &prev_hidden[li - 1] };
            let pre = &mut cache.pre[li];
            for (o, z) in pre.iter_mut().enumerate() {
                *z = dot(&w[o * ly.fan_in..(o + 1) * ly.fan_in], input) + b[o];
            }
            if li < hidden {
                let act = &mut rest[0];
                let mult = &mut cache.mult[li];
                mult.clear();
                let keep = mask.and_then(|m| m.layer(li).map(|k| (k, m.scale())));
                match keep {
                    Some((flags, scale)) => {
                        mult.extend(flags.iter().map(|&k| if k { scale } else { 0.0 }));
                        for ((a, &z), &m) in act.iter_mut().zip(pre.iter()).zip(mult.iter()) {
                            *a = z.max(0.0) * m;
                        }
                    }
                    None => {
                        for (a, &z) in act.iter_mut().zip(pre.iter()) {
                            *a = z.max(0.0);
                        }
                    }
                }
            }
        }
        let raw = &cache.pre[n_layers - 1];
        match self.head {
            HeadKind::Point => cache.output.copy_from_slice(raw),
            HeadKind::MeanAndSigma => {
                let m = raw.len() / 2;
                cache.output[..m].copy_from_slice(&raw[..m]);
                for (o, &s) in cache.output[m..].iter_mut().zip(&raw[m..]) {
                    *o = softplus(s) + SIGMA_FLOOR;
                }
            }
        }
        Ok(())
    }

    /// Gradient of a scalar loss whose derivative w.r.t. the forward output is `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Gradients> {
        let mut g = Gradients::zeros(self.param_count());
        self.backward_accumulate(cache, output_grad, &mut g)?;
        Ok(g)
    }

    /// Like [`Mlp::backward`] but adds into an existing gradient buffer.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if cache.layer_sizes != self.layer_sizes || cache.input.len() != self.input_dim() {
            return Err(SmlError::Internal("forward cache does not belong to this network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(SmlError::arg(format!(
                "output gradient has length {}, expected {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if grads.0.len() != self.param_count() {
            return Err(SmlError::arg("gradient buffer does not match parameter count"));
        }
        let n_layers = self.layout.len();
        let mut delta: Vec<f64> = output_grad.to_vec();
        if self.head == HeadKind::MeanAndSigma {
            let m = delta.len() / 2;
            for (d, &s) in delta[m..].iter_mut().zip(&cache.pre[n_layers - 1][m..]) {
                *d *= sigmoid(s);
            }
        }
        let mut next = Vec::new();
        for li in (0..n_layers).rev() {
            let ly = self.layout[li];
            let input: &[f64] = if li == 0 { &cache.input } else { &cache.hidden[li - 1] };
            {
                let (gw, gb) = grads.0[ly.w_off..ly.b_off + ly.fan_out].split_at_mut(ly.fan_in * ly.fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &a) in gw[o * ly.fan_in..(o + 1) * ly.fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let w = &self.params[ly.w_off..ly.b_off];
            next.clear();
            next.resize(ly.fan_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, &wv) in next.iter_mut().zip(&w[o * ly.fan_in..(o + 1) * ly.fan_in]) {
                    *n += d * wv;
                }
            }
            let pre = &cache.pre[li - 1];
            let mult = &cache.mult[li - 1];
            if mult.is_empty() {
                for (n, &z) in next.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
            } else {
                for ((n, &z), &m) in next.iter_mut().zip(pre).zip(mult) {
                    *n = if z > 0.0 { *n * m } else { 0.0 };
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        Ok(())
    }
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip)]
    scratch: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        AdamState {
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            scratch: Vec::new(),
        }
    }

    /// Applies one update. On non-finite gradients or updates the parameters
    /// and moments are left untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(SmlError::arg(format!(
                "adam shapes disagree: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        let step = self.step_count + 1;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(SmlError::TrainingDiverged {
                stage: "optimizer step",
                index: step,
                detail: format!("gradient {i} is {}", grads[i]),
            });
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(step as f64);
        let c2 = 1.0 - b2.powf(step as f64);
        self.scratch.clear();
        self.scratch.reserve(3 * params.len());
        let mut ok = true;
        for ((&p, &g), (&m, &v)) in params
            .iter()
            .zip(grads)
            .zip(self.first_moment.iter().zip(&self.second_moment))
        {
            let m = b1 * m + (1.0 - b1) * g;
            let v = b2 * v + (1.0 - b2) * g * g;
            let p = p - self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
            ok &= p.is_finite() && v.is_finite();
            self.scratch.extend_from_slice(&[p, m, v]);
        }
        if !ok {
            return Err(SmlError::TrainingDiverged {
                stage: "optimizer step",
                index: step,
                detail: "update produced a non-finite parameter".into(),
            });
        }
        for (i, c) in self.scratch.chunks_exact(3).enumerate() {
            params[i] = c[0];
            self.first_moment[i] = c[1];
            self.second_moment[i] = c[2];
        }
        self.step_count = step;
        Ok(())
    }
}
