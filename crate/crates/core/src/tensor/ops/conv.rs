//! 2-D convolutions on channel-last `[B, H, W, C]` tensors with zero padding.

use super::super::{Real, Tape, Tensor, Var};
use super::linalg::column_sums;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Stride 1 with the padding that preserves spatial extents; odd kernels only.
    pub fn same(kh: usize, kw: usize) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("same padding needs odd kernels, got {kh}×{kw}")));
        }
        Ok(ConvSpec { stride: (1, 1), padding: (kh / 2, kw / 2) })
    }

    fn out_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.padding;
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} does not fit {h}×{w} with {:?}", self)));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    /// Input offset feeding output `(b, oy, ox)` at tap `(i, j)`, if inside the image.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, i: usize, j: usize) -> Option<usize> {
        let y = (oy * self.spec.stride.0 + i) as isize - self.spec.padding.0 as isize;
        let x = (ox * self.spec.stride.1 + j) as isize - self.spec.padding.1 as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            return None;
        }
        Some(((b * self.h + y as usize) * self.w + x as usize) * self.cin)
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn im2col<S: Real>(&self, x: &[S]) -> Vec<S> {
        let patch = self.patch();
        let mut cols = vec![S::zero(); self.rows() * patch];
        let mut r = 0;
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &mut cols[r * patch..(r + 1) * patch];
                    for i in 0..self.kh {
                        for j in 0..self.kw {
                            if let Some(src) = self.source(b, oy, ox, i, j) {
                                let dst = (i * self.kw + j) * self.cin;
                                row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        cols
    }

    fn col2im<S: Real>(&self, cols: &[S]) -> Vec<S> {
        let patch = self.patch();
        let mut x = vec![S::zero(); self.batch * self.h * self.w * self.cin];
        let mut r = 0;
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &cols[r * patch..(r + 1) * patch];
                    for i in 0..self.kh {
                        for j in 0..self.kw {
                            if let Some(dst) = self.source(b, oy, ox, i, j) {
                                let src = (i * self.kw + j) * self.cin;
                                for (d, &v) in x[dst..dst + self.cin].iter_mut().zip(&row[src..src + self.cin]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        x
    }
}

impl<S: Real> Tape<S> {
    /// Dense convolution: `x [B,H,W,Cin]`, `w [kh,kw,Cin,Cout]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: &Var<S>, w: &Var<S>, b: Option<&Var<S>>, spec: ConvSpec) -> Result<Var<S>> {
        let (&[batch, h, wd, cin], &[kh, kw, wcin, cout]) = (x.shape(), w.shape()) else {
            return Err(Error::shape("conv2d", format!("expected [B,H,W,C] and [kh,kw,Cin,Cout], got {:?} and {:?}", x.shape(), w.shape())));
        };
        if cin != wcin || b.is_some_and(|b| b.shape() != [cout]) {
            return Err(Error::shape("conv2d", format!("input {:?} incompatible with kernel {:?}", x.shape(), w.shape())));
        }
        let (ho, wo) = spec.out_extent(h, wd, kh, kw)?;
        let geo = Geometry { batch, h, w: wd, cin, kh, kw, ho, wo, spec };
        let cols = geo.im2col(x.data());
        let (rows, patch) = (geo.rows(), geo.patch());
        let mut out = match b {
            Some(b) => Tensor::from_fn([batch, ho, wo, cout], |i| b.data()[i % cout]),
            None => Tensor::zeros([batch, ho, wo, cout]),
        };
        let beta = if b.is_some() { S::one() } else { S::zero() };
        S::gemm(rows, patch, cout, S::one(), &cols, patch as isize, 1, w.data(), cout as isize, 1, beta, out.data_mut(), cout as isize, 1);
        self.count_layer_macs((rows * patch * cout) as u64);
        let wv = w.value_rc();
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv2d", &inputs, out, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dcols = vec![S::zero(); rows * patch];
                S::gemm(rows, cout, patch, S::one(), g.data(), cout as isize, 1, wv.data(), 1, cout as isize, S::zero(), &mut dcols, patch as isize, 1);
                Tensor::from_parts(x_shape.clone(), geo.col2im(&dcols))
            });
            let dw = needs[1].then(|| {
                let mut d = Tensor::zeros(w_shape.clone());
                S::gemm(patch, rows, cout, S::one(), &cols, 1, patch as isize, g.data(), cout as isize, 1, S::zero(), d.data_mut(), cout as isize, 1);
                d
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| column_sums(g.data(), cout)));
            }
            grads
        })
    }

    /// Per-channel `kh×kw` convolution with same padding: `x [B,H,W,C]`,
    /// `w [kh,kw,C]`, `b [C]`. Even kernels are rejected.
    pub fn depthwise_conv2d(&mut self, x: &Var<S>, w: &Var<S>, b: Option<&Var<S>>) -> Result<Var<S>> {
        let (&[batch, h, wd, c], &[kh, kw, wc]) = (x.shape(), w.shape()) else {
            return Err(Error::shape("depthwise_conv2d", format!("expected [B,H,W,C] and [kh,kw,C], got {:?} and {:?}", x.shape(), w.shape())));
        };
        if c != wc || b.is_some_and(|b| b.shape() != [c]) {
            return Err(Error::shape("depthwise_conv2d", format!("input {:?} incompatible with kernel {:?}", x.shape(), w.shape())));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("depthwise_conv2d", format!("even kernel {kh}×{kw} has no centred same padding")));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        // Visits every (output offset, input offset, tap offset) triple with a valid source.
        let taps = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for bi in 0..batch {
                for y in 0..h {
                    for xpos in 0..wd {
                        let o = ((bi * h + y) * wd + xpos) * c;
                        for i in 0..kh {
                            let sy = y as isize + i as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let sx = xpos as isize + j as isize - pw as isize;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let s = ((bi * h + sy as usize) * wd + sx as usize) * c;
                                f(o, s, (i * kw + j) * c);
                            }
                        }
                    }
                }
            }
        };
        let mut out = match b {
            Some(b) => Tensor::from_fn([batch, h, wd, c], |i| b.data()[i % c]),
            None => Tensor::zeros([batch, h, wd, c]),
        };
        {
            let (od, xd, wdat) = (out.data_mut(), x.data(), w.data());
            taps(&mut |o, s, t| {
                for ((acc, &xv), &wv) in od[o..o + c].iter_mut().zip(&xd[s..s + c]).zip(&wdat[t..t + c]) {
                    *acc += xv * wv;
                }
            });
        }
        self.count_layer_macs((batch * h * wd * kh * kw * c) as u64);
        let (xv, wv) = (x.value_rc(), w.value_rc());
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("depthwise_conv2d", &inputs, out, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); xv.numel()];
                taps(&mut |o, s, t| {
                    for ((d, &gv), &k) in dx[s..s + c].iter_mut().zip(&gd[o..o + c]).zip(&wv.data()[t..t + c]) {
                        *d += gv * k;
                    }
                });
                Tensor::from_parts(x_shape.clone(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![S::zero(); kh * kw * c];
                taps(&mut |o, s, t| {
                    for ((d, &gv), &xval) in dw[t..t + c].iter_mut().zip(&gd[o..o + c]).zip(&xv.data()[s..s + c]) {
                        *d += gv * xval;
                    }
                });
                Tensor::from_parts(w_shape.clone(), dw)
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| column_sums(gd, c)));
            }
            grads
        })
    }

    /// Depthwise `K×K` convolution followed by a pointwise (1×1) projection.
    pub fn depthwise_separable_conv2d(
        &mut self,
        x: &Var<S>,
        depthwise: (&Var<S>, Option<&Var<S>>),
        pointwise: (&Var<S>, Option<&Var<S>>),
    ) -> Result<Var<S>> {
        let d = self.depthwise_conv2d(x, depthwise.0, depthwise.1)?;
        self.linear(&d, pointwise.0, pointwise.1)
    }
}
