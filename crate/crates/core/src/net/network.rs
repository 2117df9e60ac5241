use rand::Rng;

use super::linear::{Linear, LinearGrad};
use crate::error::{BnError, Result};
use crate::norm::{AffineBank, AffineGrad, BatchCtx, BnCache, BnLayer, BnMode};
use crate::stats::{EmaInit, EmaState};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Bn(BnLayer),
    Affine(AffineBank),
    Relu,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Bn(_) => "batch_norm",
            Layer::Affine(_) => "affine",
            Layer::Relu => "relu",
        }
    }
}

/// Shape of a multilayer perceptron: `Linear -> [Bn -> Affine] -> Relu` per
/// hidden layer, then a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub batch_norm: bool,
    pub momentum: f64,
    pub eps: f64,
    pub ema_init: EmaInit,
    /// Number of affine slots after each BN; 1 means shared across domains.
    pub affine_slots: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, classes: usize) -> Self {
        MlpSpec {
            input,
            hidden,
            classes,
            batch_norm: true,
            momentum: 0.9,
            eps: crate::norm::DEFAULT_EPS,
            ema_init: EmaInit::Standard,
            affine_slots: 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    Input(Tensor4),
    Bn(BnCache),
    /// ReLU output; the mask is `out > 0`.
    Relu(Tensor4),
}

/// Activations kept by [`Network::forward`] for the matching backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    ctx: BatchCtx,
    saved: Vec<Saved>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Linear(LinearGrad),
    Affine(AffineGrad),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ParamGrad>,
    pub input: Tensor4,
}

impl Gradients {
    /// Parameter gradients in [`Network::params`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                ParamGrad::Linear(l) => {
                    out.extend_from_slice(&l.weight);
                    out.extend_from_slice(&l.bias);
                }
                ParamGrad::Affine(a) => {
                    for (gm, bt) in a.gamma.iter().zip(&a.beta) {
                        out.extend_from_slice(gm);
                        out.extend_from_slice(bt);
                    }
                }
                ParamGrad::None => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
    generation: u64,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            let bad = |what: String| Err(BnError::ShapeMismatch(format!("layer {i}: {what}")));
            match layer {
                Layer::Linear(l) => {
                    if l.in_dim != dim {
                        return bad(format!("linear expects {} inputs, previous layer emits {dim}", l.in_dim));
                    }
                    dim = l.out_dim;
                }
                Layer::Bn(b) => {
                    if b.channels() != dim {
                        return bad(format!("batch norm has {} channels, input has {dim}", b.channels()));
                    }
                    if !matches!(layers.get(i + 1), Some(Layer::Affine(_))) {
                        return bad("batch norm must be followed by an affine layer".into());
                    }
                }
                Layer::Affine(a) => {
                    if a.channels() != dim {
                        return bad(format!("affine has {} channels, input has {dim}", a.channels()));
                    }
                }
                Layer::Relu => {}
            }
        }
        Ok(Network { input_dim, layers, generation: 0 })
    }

    pub fn mlp<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = spec.input;
        for &h in &spec.hidden {
            layers.push(Layer::Linear(Linear::init(prev, h, rng)));
            if spec.batch_norm {
                let ema = EmaState::with_init(h, spec.momentum, spec.ema_init)?;
                layers.push(Layer::Bn(BnLayer::with_ema(ema, spec.eps)?));
                layers.push(Layer::Affine(if spec.affine_slots > 1 {
                    AffineBank::per_domain(h, spec.affine_slots)
                } else {
                    AffineBank::shared(h)
                }));
            }
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Linear(Linear::init(prev, spec.classes, rng)));
        Network::new(spec.input, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Bn(b) => Some(b),
            _ => None,
        })
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Bn(b) => Some(b),
            _ => None,
        })
    }

    pub fn bn_count(&self) -> usize {
        self.bn_layers().count()
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_layers_mut().for_each(|b| b.set_mode(mode));
    }

    pub fn forward(&mut self, x: &Tensor4, ctx: &BatchCtx) -> Result<(Tensor4, ForwardCache)> {
        let mut saved = Vec::with_capacity(self.layers.len());
        let out = self.run(x, ctx, self.layers.len(), Some(&mut saved))?;
        self.generation += 1;
        Ok((out, ForwardCache { generation: self.generation, ctx: ctx.clone(), saved }))
    }

    /// Output of the network without keeping a cache.
    pub fn infer(&mut self, x: &Tensor4, ctx: &BatchCtx) -> Result<Tensor4> {
        let out = self.run(x, ctx, self.layers.len(), None)?;
        self.generation += 1;
        Ok(out)
    }

    /// The input of the `j`-th BN layer (0-based).
    pub fn forward_to_bn(&mut self, x: &Tensor4, ctx: &BatchCtx, j: usize) -> Result<Tensor4> {
        let idx = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Bn(_)))
            .nth(j)
            .map(|(i, _)| i)
            .ok_or_else(|| BnError::InvalidParams(format!("network has no batch norm layer {j}")))?;
        let out = self.run(x, ctx, idx, None)?;
        self.generation += 1;
        Ok(out)
    }

    fn run(&mut self, x: &Tensor4, ctx: &BatchCtx, upto: usize, mut saved: Option<&mut Vec<Saved>>) -> Result<Tensor4> {
        let s = x.shape();
        if s.c != self.input_dim || s.h != 1 || s.w != 1 {
            return Err(BnError::ShapeMismatch(format!(
                "network expects (n, {}, 1, 1), got {s}",
                self.input_dim
            )));
        }
        let mut h = x.clone();
        for layer in &mut self.layers[..upto] {
            let (next, keep) = match layer {
                Layer::Linear(l) => (l.forward(&h)?, Saved::Input(h)),
                Layer::Affine(a) => (a.forward(&h, ctx)?, Saved::Input(h)),
                Layer::Bn(b) => {
                    let (y, cache) = b.forward(&h, ctx)?;
                    (y, Saved::Bn(cache))
                }
                Layer::Relu => {
                    let y = h.map(|v| v.max(0.0));
                    (y.clone(), Saved::Relu(y))
                }
            };
            if let Some(s) = saved.as_deref_mut() {
                s.push(keep);
            }
            h = next;
        }
        Ok(h)
    }

    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor4) -> Result<Gradients> {
        self.backward_impl(cache, dlogits, false)
    }

    /// Backward with the BN input gradient negated, for mutation tests of the checker.
    pub(crate) fn backward_impl(&self, cache: &ForwardCache, dlogits: &Tensor4, flip_bn: bool) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(BnError::StaleCache);
        }
        let mut g = dlogits.clone();
        let mut grads = vec![ParamGrad::None; self.layers.len()];
        for (i, (layer, saved)) in self.layers.iter().zip(&cache.saved).enumerate().rev() {
            g = match (layer, saved) {
                (Layer::Linear(l), Saved::Input(x)) => {
                    let (dx, pg) = l.backward(x, &g)?;
                    grads[i] = ParamGrad::Linear(pg);
                    dx
                }
                (Layer::Affine(a), Saved::Input(x)) => {
                    let (dx, pg) = a.backward(x, &g, &cache.ctx)?;
                    grads[i] = ParamGrad::Affine(pg);
                    dx
                }
                (Layer::Bn(b), Saved::Bn(c)) => {
                    let dx = b.backward(c, &g)?;
                    if flip_bn {
                        dx.map(|v| -v)
                    } else {
                        dx
                    }
                }
                (Layer::Relu, Saved::Relu(y)) => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dx
                }
                _ => return Err(BnError::StaleCache),
            };
        }
        Ok(Gradients { layers: grads, input: g })
    }

    /// Forward, loss, and backward on one batch. Reference samples of the
    /// context are excluded from the loss.
    pub fn loss_and_grad(&mut self, x: &Tensor4, labels: &[usize], ctx: &BatchCtx) -> Result<(f64, Gradients)> {
        let (logits, cache) = self.forward(x, ctx)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, ctx.reference.as_deref())?;
        Ok((loss, self.backward(&cache, &dlogits)?))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Linear(l) => l.weight.len() + l.bias.len(),
                Layer::Affine(a) => a.slots().len() * 2 * a.channels(),
                _ => 0,
            })
            .sum()
    }

    /// Trainable parameters: linear weight then bias, affine gamma then beta per slot.
    pub fn params(&self) -> Vec<f64> {
        self.named_params().into_iter().flat_map(|(_, v)| v).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(BnError::SizeMismatch(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    take(&mut l.weight);
                    take(&mut l.bias);
                }
                Layer::Affine(a) => {
                    for s in a.slots_mut() {
                        take(&mut s.gamma);
                        take(&mut s.beta);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Parameter arrays keyed `fc{k}.weight`, `fc{k}.bias`, `affine{k}.gamma`,
    /// `affine{k}.beta` (with a `.d{slot}` infix for per-domain banks).
    pub fn named_params(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let (mut fc, mut aff) = (0, 0);
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push((format!("fc{fc}.weight"), l.weight.clone()));
                    out.push((format!("fc{fc}.bias"), l.bias.clone()));
                    fc += 1;
                }
                Layer::Affine(a) => {
                    for (s, slot) in a.slots().iter().enumerate() {
                        let infix = if a.is_per_domain() { format!(".d{s}") } else { String::new() };
                        out.push((format!("affine{aff}{infix}.gamma"), slot.gamma.clone()));
                        out.push((format!("affine{aff}{infix}.beta"), slot.beta.clone()));
                    }
                    aff += 1;
                }
                _ => {}
            }
        }
        out
    }
}

/// Mean softmax cross-entropy over samples not flagged in `exclude`, and its
/// gradient w.r.t. the logits (zero rows for excluded samples).
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize], exclude: Option<&[bool]>) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    if labels.len() != s.n || exclude.is_some_and(|e| e.len() != s.n) {
        return Err(BnError::SizeMismatch(format!("{} logits rows, {} labels", s.n, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(BnError::InvalidParams(format!("label {bad} out of range for {} classes", s.c)));
    }
    let skip = |i: usize| exclude.is_some_and(|e| e[i]);
    let used = (0..s.n).filter(|&i| !skip(i)).count();
    if used == 0 {
        return Err(BnError::EmptyBatch);
    }
    let mut grad = Tensor4::zeros(Shape4::flat(s.n, s.c));
    let mut loss = 0.0;
    for i in 0..s.n {
        if skip(i) {
            continue;
        }
        let row = logits.sample(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[labels[i]];
        let g = grad.sample_mut(i);
        for (k, v) in row.iter().enumerate() {
            g[k] = ((v - max).exp() / z - f64::from(k == labels[i])) / used as f64;
        }
    }
    Ok((loss / used as f64, grad))
}

/// Fraction of rows whose arg-max differs from the label.
pub fn error_rate(logits: &Tensor4, labels: &[usize]) -> f64 {
    let n = logits.n();
    if n == 0 {
        return 0.0;
    }
    let wrong = (0..n)
        .filter(|&i| {
            let row = logits.sample(i);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best != labels[i]
        })
        .count();
    wrong as f64 / n as f64
}
