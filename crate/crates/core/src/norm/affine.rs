use serde::{Deserialize, Serialize};

use super::layer::BatchCtx;
use crate::error::{BnError, Result};
use crate::tensor::{self, Tensor4};

/// Per-channel `gamma * x + beta`, trained by gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineLayer {
    pub fn identity(channels: usize) -> Self {
        AffineLayer { gamma: vec![1.0; channels], beta: vec![0.0; channels] }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(BnError::ShapeMismatch(format!(
                "gamma has {} channels, beta has {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(AffineLayer { gamma, beta })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        tensor::affine(x, &self.gamma, &self.beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

/// One affine layer shared by every domain, or one per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBank {
    slots: Vec<AffineLayer>,
}

impl AffineBank {
    pub fn shared(channels: usize) -> Self {
        AffineBank { slots: vec![AffineLayer::identity(channels)] }
    }

    pub fn per_domain(channels: usize, domains: usize) -> Self {
        AffineBank { slots: vec![AffineLayer::identity(channels); domains.max(1)] }
    }

    pub fn from_slots(slots: Vec<AffineLayer>) -> Result<Self> {
        let c = slots.first().ok_or_else(|| BnError::InvalidPolicy("no affine slots".into()))?.channels();
        if slots.iter().any(|s| s.channels() != c) {
            return Err(BnError::ShapeMismatch("affine slots disagree on channel count".into()));
        }
        Ok(AffineBank { slots })
    }

    pub fn slots(&self) -> &[AffineLayer] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.slots
    }

    pub fn is_per_domain(&self) -> bool {
        self.slots.len() > 1
    }

    pub fn channels(&self) -> usize {
        self.slots[0].channels()
    }

    fn slot_of(&self, ctx: &BatchCtx, i: usize) -> Result<usize> {
        if !self.is_per_domain() {
            return Ok(0);
        }
        let d = ctx.domains.as_ref().ok_or(BnError::MissingDomainId)?[i];
        if d >= self.slots.len() {
            return Err(BnError::InvalidPolicy(format!("domain {d} has no affine slot")));
        }
        Ok(d)
    }

    pub fn forward(&self, x: &Tensor4, ctx: &BatchCtx) -> Result<Tensor4> {
        if x.c() != self.channels() {
            return Err(BnError::ShapeMismatch(format!(
                "affine has {} channels, input has {}",
                self.channels(),
                x.c()
            )));
        }
        if !self.is_per_domain() {
            return self.slots[0].forward(x);
        }
        let mut y = x.clone();
        for n in 0..x.n() {
            let a = &self.slots[self.slot_of(ctx, n)?];
            for c in 0..x.c() {
                for v in y.plane_mut(n, c) {
                    *v = a.gamma[c] * *v + a.beta[c];
                }
            }
        }
        Ok(y)
    }

    /// Returns `(dx, parameter gradients)` given the forward input.
    pub fn backward(&self, x: &Tensor4, dy: &Tensor4, ctx: &BatchCtx) -> Result<(Tensor4, AffineGrad)> {
        let c = self.channels();
        let mut grad = AffineGrad {
            gamma: vec![vec![0.0; c]; self.slots.len()],
            beta: vec![vec![0.0; c]; self.slots.len()],
        };
        let mut dx = Tensor4::zeros(x.shape());
        for n in 0..x.n() {
            let k = self.slot_of(ctx, n)?;
            let a = &self.slots[k];
            for ch in 0..c {
                let (mut gg, mut gb) = (0.0, 0.0);
                let src = x.plane(n, ch);
                let g = dy.plane(n, ch);
                for ((o, gv), xv) in dx.plane_mut(n, ch).iter_mut().zip(g).zip(src) {
                    *o = a.gamma[ch] * gv;
                    gg += gv * xv;
                    gb += gv;
                }
                grad.gamma[k][ch] += gg;
                grad.beta[k][ch] += gb;
            }
        }
        Ok((dx, grad))
    }
}
