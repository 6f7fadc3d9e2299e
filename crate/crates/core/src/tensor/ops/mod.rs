//! Differentiable primitives, implemented as methods on [`Tape`].

mod complex;
mod conv;
mod linalg;
mod nn;

use std::rc::Rc;

use super::{strides, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use conv::ConvSpec;
pub use complex::MAGNITUDE_EPS;
pub use nn::{Activation, BatchNormStats};

fn same_shape<S: Real>(op: &'static str, a: &Var<S>, b: &Var<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Gathers `data` (of `shape`) into the axis order `perm`.
pub(crate) fn permute_data<S: Copy>(data: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| data[base + i * inner_stride]));
        }
        // odometer over the outer output axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<S: Real> Tape<S> {
    pub fn add(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("add", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        self.record("add", &[a, b], out, |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("sub", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        self.record("sub", &[a, b], out, |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("mul", a, b)?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.value_rc(), b.value_rc());
        self.record("mul", &[a, b], out, move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &bv, |g, y| g * y)),
                needs[1].then(|| zip_map(g, &av, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: &Var<S>, c: S) -> Result<Var<S>> {
        let out = a.value().map(|v| v * c);
        self.record("scale", &[a], out, move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&mut self, a: &Var<S>, c: S) -> Result<Var<S>> {
        let out = a.value().map(|v| v + c);
        self.record("add_scalar", &[a], out, |g, _| vec![Some(g.clone())])
    }

    pub fn square(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let out = a.value().map(|v| v * v);
        let av = a.value_rc();
        self.record("square", &[a], out, move |g, _| {
            vec![Some(zip_map(g, &av, |g, x| S::lit(2.0) * g * x))]
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let out = Tensor::scalar(a.value().sum());
        let shape = a.shape().to_vec();
        self.record("sum", &[a], out, move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    pub fn mean(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let n = S::lit(a.value().numel() as f64);
        let out = Tensor::scalar(a.value().sum() / n);
        let shape = a.shape().to_vec();
        self.record("mean", &[a], out, move |g, _| vec![Some(Tensor::full(shape.clone(), g.item() / n))])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        same_shape("mse", a, b)?;
        let diff = zip_map(a.value(), b.value(), |x, y| x - y);
        let n = S::lit(diff.numel() as f64);
        let out = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<S>() / n);
        self.record("mse", &[a, b], out, move |g, needs| {
            let k = S::lit(2.0) * g.item() / n;
            vec![
                needs[0].then(|| diff.map(|d| d * k)),
                needs[1].then(|| diff.map(|d| -d * k)),
            ]
        })
    }

    pub fn reshape(&mut self, a: &Var<S>, shape: &[usize]) -> Result<Var<S>> {
        let out = a.value().clone().reshaped(shape.to_vec())?;
        let orig = a.shape().to_vec();
        self.record("reshape", &[a], out, move |g, _| {
            vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: &Var<S>, perm: &[usize]) -> Result<Var<S>> {
        let rank = a.value().rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
        let out = Tensor::from_parts(out_shape.clone(), permute_data(a.data(), a.shape(), perm));
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.record("permute", &[a], out, move |g, _| {
            let orig: Vec<usize> = inverse.iter().map(|&i| out_shape[i]).collect();
            vec![Some(Tensor::from_parts(orig, permute_data(g.data(), g.shape(), &inverse)))]
        })
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", format!("{sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = a.value().numel() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (shape_a, shape_b) = (sa.to_vec(), sb.to_vec());
        self.record("concat_last", &[a, b], Tensor::from_parts(shape, data), move |g, needs| {
            let split = |off: usize, width: usize, shape: &Vec<usize>| {
                let mut d = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    let start = r * (ca + cb) + off;
                    d.extend_from_slice(&g.data()[start..start + width]);
                }
                Tensor::from_parts(shape.clone(), d)
            };
            vec![needs[0].then(|| split(0, ca, &shape_a)), needs[1].then(|| split(ca, cb, &shape_b))]
        })
    }

    /// Broadcasts size-1 axes of `a` up to `shape` (same rank).
    pub fn expand(&mut self, a: &Var<S>, shape: &[usize]) -> Result<Var<S>> {
        let src = a.shape().to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape("expand", format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let src_strides: Vec<usize> = strides(&src)
            .into_iter()
            .zip(&src)
            .map(|(st, &s)| if s == 1 { 0 } else { st })
            .collect();
        let out_shape = shape.to_vec();
        let map = broadcast_index(&out_shape, &src_strides);
        let out = Tensor::from_parts(out_shape, map.iter().map(|&i| a.data()[i]).collect());
        let n_src = a.value().numel();
        self.record("expand", &[a], out, move |g, _| {
            let mut acc = vec![S::zero(); n_src];
            for (&i, &v) in map.iter().zip(g.data()) {
                acc[i] += v;
            }
            vec![Some(Tensor::from_parts(src.clone(), acc))]
        })
    }

    /// Mean over the middle axis of an `[A, B, C]` tensor, giving `[A, C]`.
    pub fn mean_middle(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let &[na, nb, nc] = a.shape() else {
            return Err(Error::shape("mean_middle", format!("expected rank 3, got {:?}", a.shape())));
        };
        let inv = S::one() / S::lit(nb as f64);
        let mut out = vec![S::zero(); na * nc];
        for i in 0..na {
            for j in 0..nb {
                let row = &a.data()[(i * nb + j) * nc..(i * nb + j + 1) * nc];
                for (o, &v) in out[i * nc..(i + 1) * nc].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.record("mean_middle", &[a], Tensor::from_parts(vec![na, nc], out), move |g, _| {
            let mut d = Vec::with_capacity(na * nb * nc);
            for i in 0..na {
                for _ in 0..nb {
                    d.extend(g.data()[i * nc..(i + 1) * nc].iter().map(|&v| v * inv));
                }
            }
            vec![Some(Tensor::from_parts(vec![na, nb, nc], d))]
        })
    }
}

/// Source offset for each output position of a broadcast.
fn broadcast_index(out_shape: &[usize], src_strides: &[usize]) -> Rc<Vec<usize>> {
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Rc::new(map)
}
