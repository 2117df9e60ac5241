use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BnError, Result};
use crate::tensor::{Shape4, Tensor4};

/// Fully connected layer on flat (h = w = 1) activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(BnError::ShapeMismatch(format!(
                "linear {in_dim}->{out_dim} needs {} weights and {out_dim} biases",
                in_dim * out_dim
            )));
        }
        Ok(Linear { in_dim, out_dim, weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform in `[-a, a]` with `a = 1 / sqrt(in_dim)`, for weights and biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-a..=a);
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Linear { in_dim, out_dim, weight, bias }
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let s = x.shape();
        if s.h != 1 || s.w != 1 || s.c != self.in_dim {
            return Err(BnError::ShapeMismatch(format!(
                "linear expects (n, {}, 1, 1), got {s}",
                self.in_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.n() * self.out_dim);
        for n in 0..x.n() {
            let xi = x.sample(n);
            for o in 0..self.out_dim {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let dot: f64 = row.iter().zip(xi).map(|(w, v)| w * v).sum();
                out.push(dot + self.bias[o]);
            }
        }
        Tensor4::new(Shape4::flat(x.n(), self.out_dim), out)
    }

    /// Returns `(dx, parameter gradients)` given the forward input.
    pub fn backward(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, LinearGrad)> {
        self.check_input(x)?;
        if dy.shape() != Shape4::flat(x.n(), self.out_dim) {
            return Err(BnError::ShapeMismatch(format!("unexpected gradient shape {}", dy.shape())));
        }
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_dim];
        let mut dx = Tensor4::zeros(x.shape());
        for n in 0..x.n() {
            let xi = x.sample(n);
            let gi = dy.sample(n);
            let dxi = dx.sample_mut(n);
            for (o, &g) in gi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
                for k in 0..self.in_dim {
                    drow[k] += g * xi[k];
                    dxi[k] += g * row[k];
                }
            }
        }
        Ok((dx, LinearGrad { weight: dw, bias: db }))
    }
}
