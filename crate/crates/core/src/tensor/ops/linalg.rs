use super::super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<S: Real> Tape<S> {
    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul", format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {:?} · {:?}", a.shape(), b.shape())));
        }
        let mut out = Tensor::zeros([m, n]);
        S::gemm(m, k, n, S::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, S::zero(), out.data_mut(), n as isize, 1);
        let (av, bv) = (a.value_rc(), b.value_rc());
        self.record("matmul", &[a, b], out, move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = Tensor::zeros([m, k]);
                S::gemm(m, n, k, S::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize, S::zero(), d.data_mut(), k as isize, 1);
                d
            });
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros([k, n]);
                S::gemm(k, m, n, S::one(), av.data(), 1, k as isize, g.data(), n as isize, 1, S::zero(), d.data_mut(), n as isize, 1);
                d
            });
            vec![da, db]
        })
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: &Var<S>, w: &Var<S>, b: Option<&Var<S>>) -> Result<Var<S>> {
        let &[n_in, n_out] = w.shape() else {
            return Err(Error::shape("linear", format!("weight must be a matrix, got {:?}", w.shape())));
        };
        if x.shape().last() != Some(&n_in) {
            return Err(Error::shape("linear", format!("input {:?} does not end in {n_in}", x.shape())));
        }
        if let Some(b) = b {
            if b.shape() != [n_out] {
                return Err(Error::shape("linear", format!("bias {:?} vs {n_out} outputs", b.shape())));
            }
        }
        let rows = x.value().numel() / n_in;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = n_out;
        let mut out = match b {
            Some(b) => Tensor::from_fn(out_shape.clone(), |i| b.data()[i % n_out]),
            None => Tensor::zeros(out_shape.clone()),
        };
        let beta = if b.is_some() { S::one() } else { S::zero() };
        S::gemm(rows, n_in, n_out, S::one(), x.data(), n_in as isize, 1, w.data(), n_out as isize, 1, beta, out.data_mut(), n_out as isize, 1);
        self.count_layer_macs((rows * n_in * n_out) as u64);
        let (xv, wv) = (x.value_rc(), w.value_rc());
        let x_shape = x.shape().to_vec();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("linear", &inputs, out, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut d = Tensor::zeros(x_shape.clone());
                S::gemm(rows, n_out, n_in, S::one(), g.data(), n_out as isize, 1, wv.data(), 1, n_out as isize, S::zero(), d.data_mut(), n_in as isize, 1);
                d
            });
            let dw = needs[1].then(|| {
                let mut d = Tensor::zeros([n_in, n_out]);
                S::gemm(n_in, rows, n_out, S::one(), xv.data(), 1, n_in as isize, g.data(), n_out as isize, 1, S::zero(), d.data_mut(), n_out as isize, 1);
                d
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| column_sums(g.data(), n_out)));
            }
            grads
        })
    }

    /// Batched product over a leading group axis.
    ///
    /// `a` is `[G, m, k]`; `b` is `[G, k, n]`, or `[G, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: &Var<S>, b: &Var<S>, trans_b: bool) -> Result<Var<S>> {
        let (&[ga, m, k], &[gb, b1, b2]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("bmm", format!("expected rank-3 operands, got {:?} and {:?}", a.shape(), b.shape())));
        };
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ga != gb || k != kb {
            return Err(Error::shape("bmm", format!("{:?} · {:?} (trans_b={trans_b})", a.shape(), b.shape())));
        }
        let groups = ga;
        // strides of the logical k×n view of b
        let (rsb, csb) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
        let mut out = Tensor::zeros([groups, m, n]);
        for gi in 0..groups {
            S::gemm(
                m, k, n, S::one(),
                &a.data()[gi * m * k..], k as isize, 1,
                &b.data()[gi * k * n..], rsb, csb,
                S::zero(), &mut out.data_mut()[gi * m * n..], n as isize, 1,
            );
        }
        self.count_attention_macs((groups * m * k * n) as u64);
        let (av, bv) = (a.value_rc(), b.value_rc());
        let b_shape = b.shape().to_vec();
        self.record("bmm", &[a, b], out, move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = Tensor::zeros([groups, m, k]);
                for gi in 0..groups {
                    // dA = dC · Bᵀ where B is the k×n view
                    S::gemm(
                        m, n, k, S::one(),
                        &g.data()[gi * m * n..], n as isize, 1,
                        &bv.data()[gi * k * n..], csb, rsb,
                        S::zero(), &mut d.data_mut()[gi * m * k..], k as isize, 1,
                    );
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros(b_shape.clone());
                for gi in 0..groups {
                    // dB (k×n view) = Aᵀ · dC, written through the same strides as b
                    S::gemm(
                        k, m, n, S::one(),
                        &av.data()[gi * m * k..], 1, k as isize,
                        &g.data()[gi * m * n..], n as isize, 1,
                        S::zero(), &mut d.data_mut()[gi * k * n..], rsb, csb,
                    );
                }
                d
            });
            vec![da, db]
        })
    }
}

pub(crate) fn column_sums<S: Real>(data: &[S], cols: usize) -> Tensor<S> {
    let mut acc = vec![S::zero(); cols];
    for row in data.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::from_parts(vec![cols], acc)
}
