//! Dense (N, C, H, W) tensors and the per-channel reductions built on them.
//!
//! Every reduction walks samples in order, then spatial positions in
//! row-major order, accumulating into a plain `f64`. Repeated calls on the
//! same data are bit-identical.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Shape of a batch of flat feature vectors (h = w = 1).
    pub const fn flat(n: usize, c: usize) -> Self {
        Shape4 { n, c, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_n(&self, n: usize) -> Self {
        Shape4 { n, ..*self }
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    shape: Shape4,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(BnError::ShapeMismatch(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor input");
        Ok(Tensor4 { data, shape })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { data: vec![0.0; shape.len()], shape }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Tensor4 { data: vec![value; shape.len()], shape }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { data, shape }
    }

    /// Standard-normal fill.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor4 { data, shape }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape.n
    }

    pub fn c(&self) -> usize {
        self.shape.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// All values of sample `n`, channel-major.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Contiguous run of spatial values for one (sample, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let s = self.shape.spatial();
        let start = (n * self.shape.c + c) * s;
        &self.data[start..start + s]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.shape.spatial();
        let start = (n * self.shape.c + c) * s;
        &mut self.data[start..start + s]
    }

    /// Gathers the listed samples, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let len = self.shape.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 { data, shape: self.shape.with_n(indices.len()) }
    }

    /// Writes the samples of `src` into positions `indices` of `self`.
    pub fn scatter(&mut self, indices: &[usize], src: &Tensor4) {
        debug_assert_eq!(indices.len(), src.n());
        for (k, &i) in indices.iter().enumerate() {
            self.sample_mut(i).copy_from_slice(src.sample(k));
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { data: self.data.iter().map(|&v| f(v)).collect(), shape: self.shape }
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-channel mean and biased (divide-by-count) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, count: usize) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(BnError::ShapeMismatch(format!(
                "mean has {} channels, var has {}",
                mean.len(),
                var.len()
            )));
        }
        if count == 0 {
            return Err(BnError::InvalidParams("statistics count must be at least 1".into()));
        }
        if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
            return Err(BnError::InvalidParams(format!("negative or NaN variance {v}")));
        }
        Ok(ChannelStats { mean, var, count })
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], var: vec![1.0; channels], count: 1 }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Count-weighted moments of the union of the elements each part summarizes.
    pub fn pooled(parts: &[ChannelStats]) -> Result<ChannelStats> {
        let first = parts.first().ok_or(BnError::EmptyLog)?;
        let channels = first.channels();
        if let Some(p) = parts.iter().find(|p| p.channels() != channels) {
            return Err(BnError::ShapeMismatch(format!(
                "pooling {} channel stats with {}",
                p.channels(),
                channels
            )));
        }
        let total: usize = parts.iter().map(|p| p.count).sum();
        let total_f = total as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let m = parts.iter().map(|p| p.count as f64 * p.mean[c]).sum::<f64>() / total_f;
            // sum of within-part and between-part squared deviations
            let v = parts
                .iter()
                .map(|p| {
                    let d = p.mean[c] - m;
                    p.count as f64 * (p.var[c] + d * d)
                })
                .sum::<f64>()
                / total_f;
            mean[c] = m;
            var[c] = v;
        }
        Ok(ChannelStats { mean, var, count: total })
    }

    pub fn max_abs_diff(&self, other: &ChannelStats) -> f64 {
        self.mean
            .iter()
            .zip(&other.mean)
            .chain(self.var.iter().zip(&other.var))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-channel mean and biased variance over every (n, h, w) position.
pub fn channel_moments(x: &Tensor4) -> Result<ChannelStats> {
    let s = x.shape();
    if s.n == 0 {
        return Err(BnError::EmptyBatch);
    }
    if s.spatial() == 0 {
        return Err(BnError::ShapeMismatch(format!("no spatial positions in {s}")));
    }
    let count = s.n * s.spatial();
    let inv = 1.0 / count as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                sum += v;
            }
        }
        let m = sum * inv;
        let mut sq = 0.0;
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq * inv;
    }
    Ok(ChannelStats { mean, var, count })
}

fn check_channels(x: &Tensor4, len: usize, what: &str) -> Result<()> {
    if x.c() != len {
        return Err(BnError::ShapeMismatch(format!(
            "{what} has {len} channels, tensor has {}",
            x.c()
        )));
    }
    Ok(())
}

/// `(x - mean[c]) / sqrt(var[c] + eps)`.
pub fn normalize(x: &Tensor4, stats: &ChannelStats, eps: f64) -> Result<Tensor4> {
    check_channels(x, stats.channels(), "stats")?;
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(BnError::InvalidParams(format!("eps must be finite and >= 0, got {eps}")));
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    let s = x.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, k) = (stats.mean[c], inv_std[c]);
            for v in out.plane_mut(n, c) {
                *v = (*v - m) * k;
            }
        }
    }
    Ok(out)
}

/// `gamma[c] * x + beta[c]`.
pub fn affine(x: &Tensor4, gamma: &[f64], beta: &[f64]) -> Result<Tensor4> {
    check_channels(x, gamma.len(), "gamma")?;
    check_channels(x, beta.len(), "beta")?;
    let mut out = x.clone();
    let s = x.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma[c], beta[c]);
            for v in out.plane_mut(n, c) {
                *v = g * *v + b;
            }
        }
    }
    Ok(out)
}

/// Concatenates along the batch dimension.
pub fn concat_batch(parts: &[Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| BnError::ShapeMismatch("nothing to concatenate".into()))?;
    let base = first.shape();
    let mut n = 0;
    for p in parts {
        let s = p.shape();
        if (s.c, s.h, s.w) != (base.c, base.h, base.w) {
            return Err(BnError::ShapeMismatch(format!("cannot concatenate {s} onto {base}")));
        }
        n += s.n;
    }
    let mut data = Vec::with_capacity(n * base.sample_len());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor4 { data, shape: base.with_n(n) })
}

/// Inverse of [`concat_batch`]: cuts `x` into consecutive pieces of `sizes` samples.
pub fn split_batch(x: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>> {
    let total: usize = sizes.iter().sum();
    if total != x.n() {
        return Err(BnError::SizeMismatch(format!(
            "sizes sum to {total}, batch has {} samples",
            x.n()
        )));
    }
    let len = x.shape().sample_len();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &k in sizes {
        out.push(Tensor4 {
            data: x.data()[start * len..(start + k) * len].to_vec(),
            shape: x.shape().with_n(k),
        });
        start += k;
    }
    Ok(out)
}

/// Records the original shapes of parts merged by [`flatten_spatial_concat`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialRouting {
    shapes: Vec<Shape4>,
}

impl SpatialRouting {
    pub fn shapes(&self) -> &[Shape4] {
        &self.shapes
    }

    /// Cuts a flattened tensor back into the original part shapes.
    pub fn restore(&self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        let total: usize = self.shapes.iter().map(Shape4::spatial).sum();
        let first = self.shapes[0];
        let expected = Shape4::new(first.n, first.c, total, 1);
        if x.shape() != expected {
            return Err(BnError::ShapeMismatch(format!(
                "expected flattened shape {expected}, got {}",
                x.shape()
            )));
        }
        let mut parts: Vec<Tensor4> = self.shapes.iter().map(|s| Tensor4::zeros(*s)).collect();
        for n in 0..first.n {
            for c in 0..first.c {
                let src = x.plane(n, c);
                let mut offset = 0;
                for part in parts.iter_mut() {
                    let k = part.shape().spatial();
                    part.plane_mut(n, c).copy_from_slice(&src[offset..offset + k]);
                    offset += k;
                }
            }
        }
        Ok(parts)
    }
}

/// Flattens each part's spatial grid and concatenates them along the
/// spatial axis, so one set of channel moments covers every element of
/// every part. Parts must agree on `n` and `c`.
pub fn flatten_spatial_concat(parts: &[Tensor4]) -> Result<(Tensor4, SpatialRouting)> {
    let first = parts
        .first()
        .ok_or_else(|| BnError::ShapeMismatch("nothing to concatenate".into()))?
        .shape();
    if let Some(p) = parts.iter().find(|p| p.n() != first.n || p.c() != first.c) {
        return Err(BnError::ShapeMismatch(format!(
            "part {} does not share (n, c) with {first}",
            p.shape()
        )));
    }
    let total: usize = parts.iter().map(|p| p.shape().spatial()).sum();
    let shape = Shape4::new(first.n, first.c, total, 1);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..first.n {
        for c in 0..first.c {
            for p in parts {
                data.extend_from_slice(p.plane(n, c));
            }
        }
    }
    let routing = SpatialRouting { shapes: parts.iter().map(Tensor4::shape).collect() };
    Ok((Tensor4 { data, shape }, routing))
}
