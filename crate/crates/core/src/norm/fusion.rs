//! Folding a frozen normalization and its affine layer into the preceding
//! linear layer, and the one-parameter example of why the folded model
//! trains differently.

use super::affine::AffineLayer;
use crate::error::{BnError, Result};
use crate::net::Linear;
use crate::tensor::ChannelStats;

/// Returns a linear layer computing `affine(normalize(linear(x), stats, eps))`.
pub fn fuse_frozen(stats: &ChannelStats, eps: f64, affine: &AffineLayer, linear: &Linear) -> Result<Linear> {
    let c = linear.out_dim;
    if stats.channels() != c || affine.channels() != c {
        return Err(BnError::ShapeMismatch(format!(
            "linear emits {c} channels, stats have {}, affine has {}",
            stats.channels(),
            affine.channels()
        )));
    }
    let mut weight = linear.weight.clone();
    let mut bias = vec![0.0; c];
    for o in 0..c {
        let scale = affine.gamma[o] / (stats.var[o] + eps).sqrt();
        for w in &mut weight[o * linear.in_dim..(o + 1) * linear.in_dim] {
            *w *= scale;
        }
        bias[o] = scale * (linear.bias[o] - stats.mean[o]) + affine.beta[o];
    }
    Linear::new(linear.in_dim, c, weight, bias)
}

/// Gradient descent on `J = (scale * x)^2` two ways.
///
/// The unfused run optimizes `x` with `scale` held fixed. The fused run
/// optimizes `u = scale * x` on `J = u^2`, starting from `scale * x0`; its
/// trajectory is reported mapped back to `x = u / scale`.
pub fn fusion_finetune_demo(scale: f64, x0: f64, step: f64, iters: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0 == 0.0 || !x0.is_finite() {
        return Err(BnError::InvalidParams("x0 must be finite and nonzero".into()));
    }
    if scale == 0.0 || !scale.is_finite() || !step.is_finite() {
        return Err(BnError::InvalidParams("scale must be finite and nonzero, step finite".into()));
    }
    let mut unfused = Vec::with_capacity(iters + 1);
    let mut x = x0;
    unfused.push(x);
    for _ in 0..iters {
        x -= step * 2.0 * scale * scale * x;
        unfused.push(x);
    }
    let mut fused = Vec::with_capacity(iters + 1);
    let mut u = scale * x0;
    fused.push(u / scale);
    for _ in 0..iters {
        u -= step * 2.0 * u;
        fused.push(u / scale);
    }
    Ok((unfused, fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{BnLayer, BnMode};
    use crate::tensor::{Shape4, Tensor4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_fusion_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::init(3, 2, &mut rng);
        let fused = fuse_frozen(&ChannelStats::standard(2), 0.0, &AffineLayer::identity(2), &lin).unwrap();
        assert_eq!(fused, lin);
    }

    #[test]
    fn fused_layer_is_functionally_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lin = Linear::init(5, 4, &mut rng);
        let stats = ChannelStats::new(vec![0.3, -1.0, 2.0, 0.0], vec![0.5, 2.0, 0.1, 1.5], 10).unwrap();
        let aff = AffineLayer::new(vec![1.5, -0.5, 2.0, 0.7], vec![0.1, 0.2, -0.3, 1.0]).unwrap();
        let mut bn = BnLayer::new(4, 0.9).unwrap();
        bn.set_frozen(Some(stats.clone())).unwrap();
        bn.set_mode(BnMode::Frozen);
        let fused = fuse_frozen(&stats, bn.eps, &aff, &lin).unwrap();
        let x = Tensor4::randn(Shape4::flat(100, 5), &mut rng);
        let (normed, _) = bn.forward_simple(&lin.forward(&x).unwrap()).unwrap();
        let reference = aff.forward(&normed).unwrap();
        let out = fused.forward(&x).unwrap();
        assert!(out.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn gamma_scales_fused_weights() {
        let lin = Linear::new(1, 1, vec![3.0], vec![1.0]).unwrap();
        let stats = ChannelStats::new(vec![0.5], vec![4.0], 1).unwrap();
        let one = fuse_frozen(&stats, 0.0, &AffineLayer::new(vec![1.0], vec![0.0]).unwrap(), &lin).unwrap();
        let two = fuse_frozen(&stats, 0.0, &AffineLayer::new(vec![2.0], vec![0.0]).unwrap(), &lin).unwrap();
        assert_eq!(two.weight[0], 2.0 * one.weight[0]);
        assert_eq!(two.bias[0], 2.0 * one.bias[0]);
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let lin = Linear::zeros(2, 3);
        assert!(fuse_frozen(&ChannelStats::standard(2), 0.0, &AffineLayer::identity(3), &lin).is_err());
    }

    #[test]
    fn demo_trajectories() {
        let (unfused, fused) = fusion_finetune_demo(0.5, 3.0, 1.0, 20).unwrap();
        for t in 0..=20 {
            assert_eq!(unfused[t], 3.0 * 0.5f64.powi(t as i32));
            assert_eq!(fused[t], if t % 2 == 0 { 3.0 } else { -3.0 });
        }
        let (a, b) = fusion_finetune_demo(1.0, -2.0, 0.37, 15).unwrap();
        assert_eq!(a, b);
        assert!(fusion_finetune_demo(0.5, 0.0, 1.0, 3).is_err());
        assert!(fusion_finetune_demo(0.0, 1.0, 1.0, 3).is_err());
    }
}
