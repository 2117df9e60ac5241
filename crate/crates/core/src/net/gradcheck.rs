//! Central finite-difference checks of every layer's backward pass.
//!
//! Relative error of an analytic gradient `a` against a numeric one `n` is
//! `|a - n| / max(|a| + |n|, 1e-4)` in the Euclidean norm, taken per
//! parameter array and per input tensor; the report keeps the maximum per
//! layer type. The floor keeps arrays whose true gradient is zero (a bias
//! feeding straight into BN) from dividing round-off noise by itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::linear::Linear;
use super::network::{softmax_cross_entropy, Layer, MlpSpec, Network};
use crate::error::Result;
use crate::norm::{AffineBank, AffineLayer, BatchCtx, BnLayer, BnMode, Cohorts};
use crate::tensor::{ChannelStats, Shape4, Tensor4};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Deliberate corruption used to confirm the checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    None,
    /// Negate the input gradient of every BN layer.
    FlipBnSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(layer type, max relative error)`, one entry per type.
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.1 < TOLERANCE)
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let num = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let den = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    num / den.max(1e-4)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: Shape4, data: &[f64]) -> Tensor4 {
    Tensor4::new(shape, data.to_vec()).expect("same shape")
}

fn check_bn(layer: &BnLayer, x: &Tensor4, ctx: &BatchCtx, dy: &Tensor4, fault: GradFault) -> Result<f64> {
    let mut bn = layer.clone();
    let (_, cache) = bn.forward(x, ctx)?;
    let mut dx = bn.backward(&cache, dy)?;
    if fault == GradFault::FlipBnSign {
        dx = dx.map(|v| -v);
    }
    let numeric = numeric_gradient(x.data(), |d| {
        let mut l = layer.clone();
        let (y, _) = l.forward(&with_data(x.shape(), d), ctx).expect("forward");
        dot(&y, dy)
    });
    Ok(relative_error(dx.data(), &numeric))
}

fn check_network(net: &Network, x: &Tensor4, labels: &[usize], ctx: &BatchCtx, fault: GradFault) -> Result<f64> {
    let mut probe = net.clone();
    let (logits, cache) = probe.forward(x, ctx)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, labels, None)?;
    let grads = probe.backward_impl(&cache, &dlogits, fault == GradFault::FlipBnSign)?;
    let loss_at = |n: &mut Network, x: &Tensor4| -> f64 {
        let (logits, _) = n.forward(x, ctx).expect("forward");
        softmax_cross_entropy(&logits, labels, None).expect("loss").0
    };
    let params = net.params();
    let numeric_p = numeric_gradient(&params, |p| {
        let mut n = net.clone();
        n.set_params(p).expect("same length");
        loss_at(&mut n, x)
    });
    let numeric_x = numeric_gradient(x.data(), |d| loss_at(&mut net.clone(), &with_data(x.shape(), d)));
    // per parameter array, then the input
    let analytic_p = grads.flat();
    let mut worst = relative_error(grads.input.data(), &numeric_x);
    let mut offset = 0;
    for (_, arr) in net.named_params() {
        let r = offset..offset + arr.len();
        worst = worst.max(relative_error(&analytic_p[r.clone()], &numeric_p[r]));
        offset += arr.len();
    }
    Ok(worst)
}

/// Runs every check. Instances are drawn from `seed`.
pub fn run_gradcheck(seed: u64, fault: GradFault) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    // linear
    let lin = Linear::init(4, 3, &mut rng);
    let x = Tensor4::randn(Shape4::flat(5, 4), &mut rng);
    let dy = Tensor4::randn(Shape4::flat(5, 3), &mut rng);
    let (dx, g) = lin.backward(&x, &dy)?;
    let nx = numeric_gradient(x.data(), |d| dot(&lin.forward(&with_data(x.shape(), d)).unwrap(), &dy));
    let nw = numeric_gradient(&lin.weight, |w| {
        let l = Linear { weight: w.to_vec(), ..lin.clone() };
        dot(&l.forward(&x).unwrap(), &dy)
    });
    let nb = numeric_gradient(&lin.bias, |b| {
        let l = Linear { bias: b.to_vec(), ..lin.clone() };
        dot(&l.forward(&x).unwrap(), &dy)
    });
    let e = relative_error(dx.data(), &nx)
        .max(relative_error(&g.weight, &nw))
        .max(relative_error(&g.bias, &nb));
    entries.push(("linear".to_string(), e));

    // batch norm, batch statistics over two cohorts
    let x = Tensor4::randn(Shape4::new(6, 3, 2, 1), &mut rng);
    let dy = Tensor4::randn(x.shape(), &mut rng);
    let bn = BnLayer::new(3, 0.9)?;
    let ctx = BatchCtx::with_cohorts(Cohorts::contiguous(&[2, 4]));
    entries.push(("batch_norm[train_mini_batch]".to_string(), check_bn(&bn, &x, &ctx, &dy, fault)?));

    // batch norm, frozen statistics
    let mut frozen = bn.clone();
    frozen.set_frozen(Some(ChannelStats::new(vec![0.2, -0.4, 1.0], vec![0.5, 2.0, 1.3], 10)?))?;
    frozen.set_mode(BnMode::Frozen);
    entries.push(("batch_norm[frozen]".to_string(), check_bn(&frozen, &x, &BatchCtx::single(6), &dy, fault)?));

    // virtual reference samples: statistics include them, gradients skip them
    let reference = vec![false, false, false, false, true, true];
    let vctx = BatchCtx::single(6).reference(reference.clone());
    let mut masked = dy.clone();
    for (i, &r) in reference.iter().enumerate() {
        if r {
            masked.sample_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut vbn = bn.clone();
    let (_, cache) = vbn.forward(&x, &vctx)?;
    let mut dx = vbn.backward(&cache, &dy)?;
    if fault == GradFault::FlipBnSign {
        dx = dx.map(|v| -v);
    }
    let refs_zero = (0..6).filter(|&i| reference[i]).all(|i| dx.sample(i).iter().all(|&v| v == 0.0));
    let main: Vec<usize> = (0..6).filter(|&i| !reference[i]).collect();
    let per = x.shape().sample_len();
    let main_vals: Vec<f64> = main.iter().flat_map(|&i| x.sample(i).to_vec()).collect();
    let numeric = numeric_gradient(&main_vals, |d| {
        let mut probe = x.clone();
        for (k, &i) in main.iter().enumerate() {
            probe.sample_mut(i).copy_from_slice(&d[k * per..(k + 1) * per]);
        }
        let mut l = bn.clone();
        let (y, _) = l.forward(&probe, &vctx).unwrap();
        dot(&y, &masked)
    });
    let analytic: Vec<f64> = main.iter().flat_map(|&i| dx.sample(i).to_vec()).collect();
    let e = relative_error(&analytic, &numeric);
    entries.push(("batch_norm[virtual_reference]".to_string(), if refs_zero { e } else { f64::INFINITY }));

    // affine, per-domain bank
    let bank = AffineBank::from_slots(vec![
        AffineLayer::new(vec![1.5, -0.3, 0.8], vec![0.1, 0.0, -0.2])?,
        AffineLayer::new(vec![0.7, 2.0, -1.1], vec![0.3, -0.5, 0.4])?,
    ])?;
    let actx = BatchCtx::single(6).domains(vec![0, 1, 1, 0, 1, 0]);
    let (dx, g) = bank.backward(&x, &dy, &actx)?;
    let nx = numeric_gradient(x.data(), |d| dot(&bank.forward(&with_data(x.shape(), d), &actx).unwrap(), &dy));
    let mut e = relative_error(dx.data(), &nx);
    for s in 0..2 {
        let slot = bank.slots()[s].clone();
        let with_slot = |a: AffineLayer| {
            let mut slots = bank.slots().to_vec();
            slots[s] = a;
            dot(&AffineBank::from_slots(slots).unwrap().forward(&x, &actx).unwrap(), &dy)
        };
        let ng = numeric_gradient(&slot.gamma, |gm| with_slot(AffineLayer { gamma: gm.to_vec(), ..slot.clone() }));
        let nbt = numeric_gradient(&slot.beta, |bt| with_slot(AffineLayer { beta: bt.to_vec(), ..slot.clone() }));
        e = e.max(relative_error(&g.gamma[s], &ng)).max(relative_error(&g.beta[s], &nbt));
    }
    entries.push(("affine".to_string(), e));

    // relu, inside a tiny network so it goes through the shared backward path
    let relu_net = Network::new(4, vec![Layer::Linear(Linear::init(4, 3, &mut rng)), Layer::Relu])?;
    let xr = Tensor4::randn(Shape4::flat(5, 4), &mut rng);
    let dyr = Tensor4::randn(Shape4::flat(5, 3), &mut rng);
    let mut probe = relu_net.clone();
    let (_, cache) = probe.forward(&xr, &BatchCtx::single(5))?;
    let grads = probe.backward(&cache, &dyr)?;
    let nx = numeric_gradient(xr.data(), |d| {
        dot(&relu_net.clone().infer(&with_data(xr.shape(), d), &BatchCtx::single(5)).unwrap(), &dyr)
    });
    entries.push(("relu".to_string(), relative_error(grads.input.data(), &nx)));

    // the composed (6 samples, 4 -> 5 -> 3) network in both BN regimes
    let net = Network::mlp(&MlpSpec::new(4, vec![5], 3), &mut rng)?;
    let x = Tensor4::randn(Shape4::flat(6, 4), &mut rng);
    let labels = [0, 1, 2, 1, 0, 2];
    entries.push((
        "network[train_mini_batch]".to_string(),
        check_network(&net, &x, &labels, &BatchCtx::single(6), fault)?,
    ));
    let mut frozen_net = net.clone();
    frozen_net.infer(&x, &BatchCtx::single(6))?;
    frozen_net.bn_layers_mut().for_each(BnLayer::freeze);
    entries.push((
        "network[frozen]".to_string(),
        check_network(&frozen_net, &x, &labels, &BatchCtx::single(6), fault)?,
    ));

    Ok(GradCheckReport { entries })
}
