//! Complex-valued primitives on tensors whose last axis holds `(re, im)`.

use super::super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitudes below this map to exactly zero in magnitude-power ops.
pub const MAGNITUDE_EPS: f64 = 1e-12;

fn complex_pairs<S: Real>(op: &'static str, v: &Var<S>) -> Result<usize> {
    if v.shape().last() != Some(&2) {
        return Err(Error::shape(op, format!("last axis must be (re, im), got {:?}", v.shape())));
    }
    Ok(v.value().numel() / 2)
}

impl<S: Real> Tape<S> {
    /// Elementwise complex product.
    pub fn complex_mul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        complex_pairs("complex_mul", a)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("complex_mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut out = Tensor::zeros(a.shape().to_vec());
        for ((o, x), y) in out.data_mut().chunks_exact_mut(2).zip(a.data().chunks_exact(2)).zip(b.data().chunks_exact(2)) {
            o[0] = x[0] * y[0] - x[1] * y[1];
            o[1] = x[0] * y[1] + x[1] * y[0];
        }
        let (av, bv) = (a.value_rc(), b.value_rc());
        // d(xy)/dx applied to g is g·conj(y)
        let conj_mul = |g: &Tensor<S>, y: &Tensor<S>| {
            let mut d = Tensor::zeros(g.shape().to_vec());
            for ((o, g), y) in d.data_mut().chunks_exact_mut(2).zip(g.data().chunks_exact(2)).zip(y.data().chunks_exact(2)) {
                o[0] = g[0] * y[0] + g[1] * y[1];
                o[1] = -g[0] * y[1] + g[1] * y[0];
            }
            d
        };
        self.record("complex_mul", &[a, b], out, move |g, needs| {
            vec![needs[0].then(|| conj_mul(g, &bv)), needs[1].then(|| conj_mul(g, &av))]
        })
    }

    /// Magnitude power compression with phase preserved: `z -> |z|^p · z/|z|`.
    pub fn complex_compress(&mut self, z: &Var<S>, p: S) -> Result<Var<S>> {
        complex_pairs("complex_compress", z)?;
        let eps = S::lit(MAGNITUDE_EPS);
        let mut out = Tensor::zeros(z.shape().to_vec());
        for (o, v) in out.data_mut().chunks_exact_mut(2).zip(z.data().chunks_exact(2)) {
            let r = v[0].hypot(v[1]);
            if r >= eps {
                let k = r.powf(p - S::one());
                o[0] = k * v[0];
                o[1] = k * v[1];
            }
        }
        let zv = z.value_rc();
        self.record("complex_compress", &[z], out, move |g, _| {
            let mut d = Tensor::zeros(g.shape().to_vec());
            for ((o, g), v) in d.data_mut().chunks_exact_mut(2).zip(g.data().chunks_exact(2)).zip(zv.data().chunks_exact(2)) {
                let r = v[0].hypot(v[1]);
                if r < eps {
                    continue;
                }
                // J = r^(p-1) I + (p-1) r^(p-3) z zᵀ (symmetric)
                let a = r.powf(p - S::one());
                let b = (p - S::one()) * r.powf(p - S::lit(3.0)) * (v[0] * g[0] + v[1] * g[1]);
                o[0] = a * g[0] + b * v[0];
                o[1] = a * g[1] + b * v[1];
            }
            vec![Some(d)]
        })
    }

    /// Compressed magnitude `|z|^p`; drops the trailing `(re, im)` axis.
    pub fn complex_abs_pow(&mut self, z: &Var<S>, p: S) -> Result<Var<S>> {
        complex_pairs("complex_abs_pow", z)?;
        let eps = S::lit(MAGNITUDE_EPS);
        let shape = z.shape()[..z.shape().len() - 1].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        let data = z
            .data()
            .chunks_exact(2)
            .map(|v| {
                let r = v[0].hypot(v[1]);
                if r < eps {
                    S::zero()
                } else {
                    r.powf(p)
                }
            })
            .collect();
        let zv = z.value_rc();
        let z_shape = z.shape().to_vec();
        self.record("complex_abs_pow", &[z], Tensor::from_parts(shape, data), move |g, _| {
            let mut d = Tensor::zeros(z_shape.clone());
            for ((o, &g), v) in d.data_mut().chunks_exact_mut(2).zip(g.data()).zip(zv.data().chunks_exact(2)) {
                let r = v[0].hypot(v[1]);
                if r < eps {
                    continue;
                }
                let k = g * p * r.powf(p - S::lit(2.0));
                o[0] = k * v[0];
                o[1] = k * v[1];
            }
            vec![Some(d)]
        })
    }

    /// Bounds the modulus with tanh while keeping the phase:
    /// `z -> tanh(|z|) · z/|z|`, so every output has modulus below one.
    pub fn complex_tanh_amplitude(&mut self, z: &Var<S>) -> Result<Var<S>> {
        complex_pairs("complex_tanh_amplitude", z)?;
        let mut out = Tensor::zeros(z.shape().to_vec());
        for (o, v) in out.data_mut().chunks_exact_mut(2).zip(z.data().chunks_exact(2)) {
            let (gain, _) = tanh_gain(v[0].hypot(v[1]));
            o[0] = gain * v[0];
            o[1] = gain * v[1];
        }
        let zv = z.value_rc();
        self.record("complex_tanh_amplitude", &[z], out, move |g, _| {
            let mut d = Tensor::zeros(g.shape().to_vec());
            for ((o, g), v) in d.data_mut().chunks_exact_mut(2).zip(g.data().chunks_exact(2)).zip(zv.data().chunks_exact(2)) {
                let (gain, slope) = tanh_gain(v[0].hypot(v[1]));
                let b = slope * (v[0] * g[0] + v[1] * g[1]);
                o[0] = gain * g[0] + b * v[0];
                o[1] = gain * g[1] + b * v[1];
            }
            vec![Some(d)]
        })
    }
}

/// Returns `(tanh(r)/r, d/dr[tanh(r)/r] / r)`, with series near zero.
fn tanh_gain<S: Real>(r: S) -> (S, S) {
    if r < S::lit(1e-4) {
        let r2 = r * r;
        (S::one() - r2 / S::lit(3.0), S::lit(-2.0 / 3.0) + S::lit(8.0 / 15.0) * r2)
    } else {
        let t = r.tanh();
        let sech2 = S::one() - t * t;
        (t / r, (sech2 * r - t) / (r * r * r))
    }
}
