//! Building blocks shared by the encoder, trident blocks and decoder.

use super::capture::{AttentionCapture, AttentionRecord, AttnSite};
use super::params::{BatchNorm, Bound, BnUpdate, Init, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running-stat updates are collected.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// State threaded through one forward pass.
pub struct Ctx<'a, S: Real> {
    pub tape: &'a mut Tape<S>,
    pub params: &'a Bound<S>,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
    pub capture: Option<AttentionCapture>,
}

impl<'a, S: Real> Ctx<'a, S> {
    pub fn new(tape: &'a mut Tape<S>, params: &'a Bound<S>, mode: Mode) -> Self {
        Ctx { tape, params, mode, bn_updates: Vec::new(), capture: None }
    }

    pub fn p(&self, id: ParamId) -> &'a Var<S> {
        self.params.var(id)
    }
}

impl Linear {
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.tape.linear(x, w, Some(b))
    }
}

impl LayerNorm {
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, S::lit(LN_EPS))
    }

    /// `LN(x + branch)`.
    pub fn residual<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>, branch: &Var<S>) -> Result<Var<S>> {
        let sum = ctx.tape.add(x, branch)?;
        self.forward(ctx, &sum)
    }
}

impl BatchNorm {
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, S::lit(BN_EPS))?;
                ctx.bn_updates.push(BnUpdate::new(self, &stats));
                Ok(y)
            }
            Mode::Eval => {
                if ctx.p(self.tracked).data()[0] <= S::zero() {
                    return Err(Error::NoRunningStats);
                }
                let (m, v) = (ctx.p(self.running_mean).data(), ctx.p(self.running_var).data());
                ctx.tape.batch_norm_infer(x, g, b, m, v, S::lit(BN_EPS))
            }
        }
    }
}

/// Depthwise `K×K` conv, then two pointwise layers through a hidden width,
/// each followed by GELU; residual and post layer norm.
#[derive(Clone, Debug)]
pub struct ConvFfn {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub pw1: Linear,
    pub pw2: Linear,
    pub ln: LayerNorm,
}

impl ConvFfn {
    pub fn build(b: &mut ParamBuilder, name: &str, c: usize, hidden: usize, k: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(ConvFfn {
                dw_w: b.param("dw.w", &[k, k, c], Init::KaimingUniform(k * k))?,
                dw_b: b.param("dw.b", &[c], Init::Zeros)?,
                pw1: b.linear("pw1", c, hidden)?,
                pw2: b.linear("pw2", hidden, c)?,
                ln: b.layer_norm("ln", c)?,
            })
        })
    }

    /// `x` is `[B, T, F, C]`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let (w, b) = (ctx.p(self.dw_w), ctx.p(self.dw_b));
        let h = ctx.tape.depthwise_conv2d(x, w, Some(b))?;
        let h = ctx.tape.gelu(&h)?;
        let h = self.pw1.forward(ctx, &h)?;
        let h = ctx.tape.gelu(&h)?;
        let h = self.pw2.forward(ctx, &h)?;
        let h = ctx.tape.gelu(&h)?;
        self.ln.residual(ctx, x, &h)
    }
}

/// Channel-wise two-layer perceptron with residual and post layer norm.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
    pub ln: LayerNorm,
}

impl Ffn {
    pub fn build(b: &mut ParamBuilder, name: &str, c: usize, hidden: usize) -> Result<Self> {
        b.scope(name, |b| Ok(Ffn { l1: b.linear("l1", c, hidden)?, l2: b.linear("l2", hidden, c)?, ln: b.layer_norm("ln", c)? }))
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.tape.gelu(&h)?;
        let h = self.l2.forward(ctx, &h)?;
        self.ln.residual(ctx, x, &h)
    }
}

/// Mixing across the token axis of `[B, M, A, C]` through a hidden width of `2M`,
/// shared over every `(a, c)`; residual and post layer norm over channels.
#[derive(Clone, Debug)]
pub struct TokenMix {
    pub l1: Linear,
    pub l2: Linear,
    pub ln: LayerNorm,
}

impl TokenMix {
    pub fn build(b: &mut ParamBuilder, name: &str, tokens: usize, c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(TokenMix {
                l1: b.linear("l1", tokens, 2 * tokens)?,
                l2: b.linear("l2", 2 * tokens, tokens)?,
                ln: b.layer_norm("ln", c)?,
            })
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let h = ctx.tape.permute(x, &[0, 2, 3, 1])?;
        let h = self.l1.forward(ctx, &h)?;
        let h = ctx.tape.gelu(&h)?;
        let h = self.l2.forward(ctx, &h)?;
        let h = ctx.tape.permute(&h, &[0, 3, 1, 2])?;
        self.ln.residual(ctx, x, &h)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl Attention {
    /// Queries come from `q_dim` features, keys and values from `kv_dim`.
    pub fn build(b: &mut ParamBuilder, name: &str, q_dim: usize, kv_dim: usize, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {c} channels in `{name}`")));
        }
        b.scope(name, |b| {
            Ok(Attention {
                q: b.linear("q", q_dim, c)?,
                k: b.linear("k", kv_dim, c)?,
                v: b.linear("v", kv_dim, c)?,
                o: b.linear("o", c, c)?,
                heads,
                channels: c,
            })
        })
    }

    fn split_heads<S: Real>(&self, tape: &mut Tape<S>, x: &Var<S>) -> Result<Var<S>> {
        let &[g, n, c] = x.shape() else { unreachable!("projection output is rank 3") };
        if self.heads == 1 {
            return Ok(x.clone());
        }
        let d = c / self.heads;
        let x = tape.reshape(x, &[g, n, self.heads, d])?;
        let x = tape.permute(&x, &[0, 2, 1, 3])?;
        tape.reshape(&x, &[g * self.heads, n, d])
    }

    /// `q_in` is `[G, Nq, q_dim]`, `kv_in` is `[G, Nk, kv_dim]`; returns `[G, Nq, C]`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, q_in: &Var<S>, kv_in: &Var<S>, site: AttnSite) -> Result<Var<S>> {
        let (&[g, nq, _], &[g2, nk, _]) = (q_in.shape(), kv_in.shape()) else {
            return Err(Error::shape("attention", format!("expected rank-3 inputs, got {:?} and {:?}", q_in.shape(), kv_in.shape())));
        };
        if g != g2 {
            return Err(Error::shape("attention", format!("{g} query groups vs {g2} key groups")));
        }
        let (h, c) = (self.heads, self.channels);
        let d = c / h;
        let q = self.q.forward(ctx, q_in)?;
        let k = self.k.forward(ctx, kv_in)?;
        let v = self.v.forward(ctx, kv_in)?;
        let q = self.split_heads(ctx.tape, &q)?;
        let k = self.split_heads(ctx.tape, &k)?;
        let v = self.split_heads(ctx.tape, &v)?;
        let scores = ctx.tape.bmm(&q, &k, true)?;
        let scores = ctx.tape.scale(&scores, S::one() / S::lit(d as f64).sqrt())?;
        let attn = ctx.tape.softmax(&scores, 2)?;
        if let Some(cap) = ctx.capture.as_mut() {
            cap.records.push(AttentionRecord {
                site,
                groups: g,
                heads: h,
                queries: nq,
                keys: nk,
                weights: attn.data().iter().map(|v| v.f64() as f32).collect(),
            });
        }
        let out = ctx.tape.bmm(&attn, &v, false)?;
        let out = if h == 1 {
            out
        } else {
            let out = ctx.tape.reshape(&out, &[g, h, nq, d])?;
            let out = ctx.tape.permute(&out, &[0, 2, 1, 3])?;
            ctx.tape.reshape(&out, &[g, nq, c])?
        };
        self.o.forward(ctx, &out)
    }
}
