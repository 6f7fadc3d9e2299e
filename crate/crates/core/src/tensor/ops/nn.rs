use std::str::FromStr;

use super::super::{strides, Real, Tape, Tensor, Var};
use super::linalg::column_sums;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with the Gaussian CDF.
    Gelu,
    Tanh,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Unknown { what: "activation", name: other.to_string() }),
        }
    }
}

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Activation {
    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Gelu => S::lit(x.f64() * gaussian_cdf(x.f64())),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => S::one() / (S::one() + (-x).exp()),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative<S: Real>(self, x: S, y: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Gelu => {
                let xf = x.f64();
                S::lit(gaussian_cdf(xf) + xf * gaussian_pdf(xf))
            }
            Activation::Tanh => S::one() - y * y,
            Activation::Sigmoid => y * (S::one() - y),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// Per-channel statistics of one batch-norm training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<S> {
    pub mean: Vec<S>,
    /// Biased variance (used for normalization).
    pub var: Vec<S>,
    /// Unbiased variance (tracked in running statistics).
    pub var_unbiased: Vec<S>,
}

impl<S: Real> Tape<S> {
    pub fn activation(&mut self, x: &Var<S>, kind: Activation) -> Result<Var<S>> {
        let out = x.value().map(|v| kind.apply(v));
        let (xv, yv) = (x.value_rc(), out.clone());
        self.record(kind.name(), &[x], out, move |g, _| {
            let d = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                    .collect(),
            );
            vec![Some(d)]
        })
    }

    pub fn gelu(&mut self, x: &Var<S>) -> Result<Var<S>> {
        self.activation(x, Activation::Gelu)
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: &Var<S>, axis: usize) -> Result<Var<S>> {
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let n = shape[axis];
        let stride = strides(&shape)[axis];
        let outer: usize = shape[..axis].iter().product();
        let lanes = |f: &mut dyn FnMut(usize)| {
            for o in 0..outer {
                for i in 0..stride {
                    f(o * n * stride + i);
                }
            }
        };
        let mut out = x.value().clone();
        {
            let y = out.data_mut();
            lanes(&mut |base| {
                let mut m = S::neg_infinity();
                for j in 0..n {
                    m = m.max(y[base + j * stride]);
                }
                let mut total = S::zero();
                for j in 0..n {
                    let e = (y[base + j * stride] - m).exp();
                    y[base + j * stride] = e;
                    total += e;
                }
                for j in 0..n {
                    y[base + j * stride] /= total;
                }
            });
        }
        let yv = out.clone();
        self.record("softmax", &[x], out, move |g, _| {
            let mut d = Tensor::zeros(g.shape().to_vec());
            let (dd, gd, yd) = (d.data_mut(), g.data(), yv.data());
            for o in 0..outer {
                for i in 0..stride {
                    let base = o * n * stride + i;
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot += gd[base + j * stride] * yd[base + j * stride];
                    }
                    for j in 0..n {
                        let k = base + j * stride;
                        dd[k] = yd[k] * (gd[k] - dot);
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: &Var<S>, gamma: &Var<S>, beta: &Var<S>, eps: S) -> Result<Var<S>> {
        let c = *x.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layer_norm", format!("affine {:?}/{:?} vs {c} channels", gamma.shape(), beta.shape())));
        }
        let rows = x.value().numel() / c;
        let inv_c = S::one() / S::lit(c as f64);
        let mut xhat = vec![S::zero(); rows * c];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<S> = xhat.iter().enumerate().map(|(i, &h)| h * gd[i % c] + bd[i % c]).collect();
        let gv = gamma.value_rc();
        let shape = x.shape().to_vec();
        self.record("layer_norm", &[x, gamma, beta], Tensor::from_parts(shape.clone(), out), move |g, needs| {
            let gdat = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); rows * c];
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let (gr, hr) = (&gdat[span.clone()], &xhat[span.clone()]);
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh *= inv_c;
                    mean_dh_h *= inv_c;
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        dx[r * c + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let dgamma = needs[1].then(|| column_sums(&zip_products(gdat, &xhat), c));
            let dbeta = needs[2].then(|| column_sums(gdat, c));
            vec![dx, dgamma, dbeta]
        })
    }

    /// Batch normalization in training mode: statistics over every axis but
    /// the last (channel) one.
    pub fn batch_norm_train(
        &mut self,
        x: &Var<S>,
        gamma: &Var<S>,
        beta: &Var<S>,
        eps: S,
    ) -> Result<(Var<S>, BatchNormStats<S>)> {
        let c = *x.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("affine {:?}/{:?} vs {c} channels", gamma.shape(), beta.shape())));
        }
        let rows = x.value().numel() / c;
        let inv_n = S::one() / S::lit(rows as f64);
        let mean: Vec<S> = column_sums(x.data(), c).data().iter().map(|&s| s * inv_n).collect();
        let mut sq = vec![S::zero(); c];
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                sq[j] += d * d;
            }
        }
        let var: Vec<S> = sq.iter().map(|&s| s * inv_n).collect();
        let var_unbiased: Vec<S> = if rows > 1 {
            sq.iter().map(|&s| s / S::lit((rows - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<S> = x.data().iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c]).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<S> = xhat.iter().enumerate().map(|(i, &h)| h * gd[i % c] + bd[i % c]).collect();
        let gv = gamma.value_rc();
        let shape = x.shape().to_vec();
        let y = self.record("batch_norm", &[x, gamma, beta], Tensor::from_parts(shape.clone(), out), move |g, needs| {
            let gdat = g.data();
            let dx = needs[0].then(|| {
                let mut mean_dh = vec![S::zero(); c];
                let mut mean_dh_h = vec![S::zero(); c];
                for (i, (&gi, &h)) in gdat.iter().zip(&xhat).enumerate() {
                    let dh = gi * gv.data()[i % c];
                    mean_dh[i % c] += dh;
                    mean_dh_h[i % c] += dh * h;
                }
                let d: Vec<S> = gdat
                    .iter()
                    .zip(&xhat)
                    .enumerate()
                    .map(|(i, (&gi, &h))| {
                        let j = i % c;
                        let dh = gi * gv.data()[j];
                        inv_std[j] * (dh - mean_dh[j] * inv_n - h * mean_dh_h[j] * inv_n)
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), d)
            });
            let dgamma = needs[1].then(|| column_sums(&zip_products(gdat, &xhat), c));
            let dbeta = needs[2].then(|| column_sums(gdat, c));
            vec![dx, dgamma, dbeta]
        })?;
        Ok((y, BatchNormStats { mean, var, var_unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: &Var<S>,
        gamma: &Var<S>,
        beta: &Var<S>,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var<S>> {
        let c = *x.shape().last().unwrap();
        if gamma.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("statistics do not match {c} channels")));
        }
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<S> = x.data().iter().enumerate().map(|(i, &v)| (v - running_mean[i % c]) * inv_std[i % c]).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<S> = xhat.iter().enumerate().map(|(i, &h)| h * gd[i % c] + bd[i % c]).collect();
        let gv = gamma.value_rc();
        let shape = x.shape().to_vec();
        self.record("batch_norm", &[x, gamma, beta], Tensor::from_parts(shape.clone(), out), move |g, needs| {
            let gdat = g.data();
            let dx = needs[0].then(|| {
                Tensor::from_parts(
                    shape.clone(),
                    gdat.iter().enumerate().map(|(i, &gi)| gi * gv.data()[i % c] * inv_std[i % c]).collect(),
                )
            });
            let dgamma = needs[1].then(|| column_sums(&zip_products(gdat, &xhat), c));
            let dbeta = needs[2].then(|| column_sums(gdat, c));
            vec![dx, dgamma, dbeta]
        })
    }
}

fn zip_products<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}
