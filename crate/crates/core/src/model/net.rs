//! Encoder, trident blocks, decoder and the end-to-end forward pass.

use std::rc::Rc;

use super::capture::{AttentionCapture, AttnKind, AttnSite, BranchKind};
use super::config::{ModelConfig, OutCaOrder};
use super::layers::{Attention, ConvFfn, Ctx, Ffn, Mode, TokenMix};
use super::params::{BatchNorm, BnUpdate, Init, LayerNorm, Linear, ParamBuilder, ParamId, ParameterStore, INIT_STD};
use super::posenc::posenc_2d;
use crate::error::{Error, Result};
use crate::signal::{ComplexSpectrogram, StftPlan, Waveform};
use crate::tensor::{ConvSpec, Real, Tape, Tensor, Var};

/// Two conv blocks, `1×7` then `7×1`, each with batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv1_w: ParamId,
    conv1_b: ParamId,
    bn1: BatchNorm,
    conv2_w: ParamId,
    conv2_b: ParamId,
    bn2: BatchNorm,
}

impl Encoder {
    fn build(b: &mut ParamBuilder, c: usize) -> Result<Self> {
        b.scope("encoder", |b| {
            Ok(Encoder {
                conv1_w: b.param("conv1.w", &[1, 7, 2, c], Init::KaimingUniform(7 * 2))?,
                conv1_b: b.param("conv1.b", &[c], Init::Zeros)?,
                bn1: b.batch_norm("bn1", c)?,
                conv2_w: b.param("conv2.w", &[7, 1, c, c], Init::KaimingUniform(7 * c))?,
                conv2_b: b.param("conv2.b", &[c], Init::Zeros)?,
                bn2: b.batch_norm("bn2", c)?,
            })
        })
    }

    /// `[B, T, F, 2]` compressed real/imag planes to `[B, T, F, C]`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let spec1 = ConvSpec { stride: (1, 1), padding: (0, 3) };
        let spec2 = ConvSpec { stride: (1, 1), padding: (3, 0) };
        let (w, b) = (ctx.p(self.conv1_w), ctx.p(self.conv1_b));
        let h = ctx.tape.conv2d(x, w, Some(b), spec1)?;
        let h = self.bn1.forward(ctx, &h)?;
        let h = ctx.tape.activation(&h, crate::tensor::Activation::Relu)?;
        let (w, b) = (ctx.p(self.conv2_w), ctx.p(self.conv2_b));
        let h = ctx.tape.conv2d(&h, w, Some(b), spec2)?;
        let h = self.bn2.forward(ctx, &h)?;
        ctx.tape.activation(&h, crate::tensor::Activation::Relu)
    }
}

/// One companion branch.
///
/// The branch works on a view of the main feature `[B, A, N, ·]` where `A` is
/// the axis kept at full resolution and `N` the axis summarized by tokens: the
/// time branch sees main transposed (`A = F`, `N = T`), the frequency branch
/// sees it as is (`A = T`, `N = F`). Its own state is `[B, M, A, C]`.
#[derive(Clone, Debug)]
pub struct Branch {
    kind: BranchKind,
    in_ca: Attention,
    in_ln: LayerNorm,
    ffn: [Ffn; 3],
    mix: TokenMix,
    sa: Attention,
    sa_ln: LayerNorm,
    out_ca: Attention,
    out_ln: LayerNorm,
}

impl Branch {
    fn build(b: &mut ParamBuilder, cfg: &ModelConfig, kind: BranchKind) -> Result<Self> {
        let (c, p, h) = (cfg.channels, cfg.posenc_channels, cfg.ffn_hidden);
        let (tokens, sa_heads) = match kind {
            BranchKind::Time => (cfg.tokens_t, cfg.heads.f_sa),
            BranchKind::Freq => (cfg.tokens_f, cfg.heads.t_sa),
        };
        b.scope(kind.label(), |b| {
            Ok(Branch {
                kind,
                in_ca: Attention::build(b, "in_ca", c, c + p, c, cfg.heads.in_ca)?,
                in_ln: b.layer_norm("in_ca.ln", c)?,
                ffn: [Ffn::build(b, "ffn0", c, h)?, Ffn::build(b, "ffn1", c, h)?, Ffn::build(b, "ffn2", c, h)?],
                mix: TokenMix::build(b, "mix", tokens, c)?,
                sa: Attention::build(b, "sa", c, c, c, sa_heads)?,
                sa_ln: b.layer_norm("sa.ln", c)?,
                out_ca: Attention::build(b, "out_ca", c + p, c, c, cfg.heads.out_ca)?,
                out_ln: b.layer_norm("out_ca.ln", c)?,
            })
        })
    }

    fn view<S: Real>(&self, tape: &mut Tape<S>, main: &Var<S>) -> Result<Var<S>> {
        match self.kind {
            BranchKind::Time => tape.permute(main, &[0, 2, 1, 3]),
            BranchKind::Freq => Ok(main.clone()),
        }
    }

    fn site(&self, block: usize, kind: AttnKind) -> AttnSite {
        AttnSite { block, branch: self.kind, kind }
    }

    /// Updates the branch state `x [B, M, A, C]` from `main_pe [B, T, F, C+P]`.
    fn update<S: Real>(&self, ctx: &mut Ctx<S>, block: usize, main_pe: &Var<S>, x: &Var<S>) -> Result<Var<S>> {
        let &[b, m, a, c] = x.shape() else { unreachable!("branch state is rank 4") };
        let view = self.view(ctx.tape, main_pe)?;
        let &[_, _, n, cp] = view.shape() else { unreachable!() };
        let kv = ctx.tape.reshape(&view, &[b * a, n, cp])?;
        let q = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        let q = ctx.tape.reshape(&q, &[b * a, m, c])?;
        let agg = self.in_ca.forward(ctx, &q, &kv, self.site(block, AttnKind::InCa))?;
        let agg = ctx.tape.reshape(&agg, &[b, a, m, c])?;
        let agg = ctx.tape.permute(&agg, &[0, 2, 1, 3])?;
        let x = self.in_ln.residual(ctx, x, &agg)?;
        let x = self.ffn[0].forward(ctx, &x)?;
        let x = self.mix.forward(ctx, &x)?;
        let x = self.ffn[1].forward(ctx, &x)?;
        let seq = ctx.tape.reshape(&x, &[b * m, a, c])?;
        let sa = self.sa.forward(ctx, &seq, &seq, self.site(block, AttnKind::SelfAttn))?;
        let sa = ctx.tape.reshape(&sa, &[b, m, a, c])?;
        let x = self.sa_ln.residual(ctx, &x, &sa)?;
        self.ffn[2].forward(ctx, &x)
    }

    /// Broadcasts the branch state `x [B, M, A, C]` back into `main [B, T, F, C]`.
    fn inject<S: Real>(&self, ctx: &mut Ctx<S>, block: usize, main: &Var<S>, pe: &Var<S>, x: &Var<S>) -> Result<Var<S>> {
        let &[b, m, a, c] = x.shape() else { unreachable!("branch state is rank 4") };
        let main_pe = ctx.tape.concat_last(main, pe)?;
        let view = self.view(ctx.tape, &main_pe)?;
        let &[_, _, n, cp] = view.shape() else { unreachable!() };
        let q = ctx.tape.reshape(&view, &[b * a, n, cp])?;
        let kv = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        let kv = ctx.tape.reshape(&kv, &[b * a, m, c])?;
        let out = self.out_ca.forward(ctx, &q, &kv, self.site(block, AttnKind::OutCa))?;
        let out = ctx.tape.reshape(&out, &[b, a, n, c])?;
        let out = self.view(ctx.tape, &out)?;
        self.out_ln.residual(ctx, main, &out)
    }
}

/// Feature streams carried between trident blocks.
#[derive(Clone, Debug)]
pub struct BranchState<S: Real> {
    /// `[B, T, F, C]`.
    pub main: Var<S>,
    /// `[B, M_T, F, C]`.
    pub t_global: Option<Var<S>>,
    /// `[B, M_F, T, C]`.
    pub f_global: Option<Var<S>>,
}

#[derive(Clone, Debug)]
pub struct TridentBlock {
    index: usize,
    conv_ffn: ConvFfn,
    t: Option<Branch>,
    f: Option<Branch>,
    order: OutCaOrder,
}

impl TridentBlock {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig, index: usize) -> Result<Self> {
        b.scope(format!("blocks.{index}"), |b| {
            Ok(TridentBlock {
                index,
                conv_ffn: ConvFfn::build(b, "main", cfg.channels, cfg.ffn_hidden, cfg.kernel)?,
                t: (cfg.tokens_t > 0).then(|| Branch::build(b, cfg, BranchKind::Time)).transpose()?,
                f: (cfg.tokens_f > 0).then(|| Branch::build(b, cfg, BranchKind::Freq)).transpose()?,
                order: cfg.out_ca_order,
            })
        })
    }

    /// `pe` is the positional code broadcast to `[B, T, F, P]`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, state: BranchState<S>, pe: &Var<S>) -> Result<BranchState<S>> {
        let BranchState { main, t_global, f_global } = state;
        let main_pe = match (&self.t, &self.f) {
            (None, None) => None,
            _ => Some(ctx.tape.concat_last(&main, pe)?),
        };
        let step = |branch: &Option<Branch>, x: Option<Var<S>>, ctx: &mut Ctx<S>| -> Result<Option<Var<S>>> {
            match (branch, x) {
                (Some(br), Some(x)) => Ok(Some(br.update(ctx, self.index, main_pe.as_ref().unwrap(), &x)?)),
                (None, None) => Ok(None),
                _ => Err(Error::Config("branch state does not match block layout".into())),
            }
        };
        let t_global = step(&self.t, t_global, ctx)?;
        let f_global = step(&self.f, f_global, ctx)?;
        let mut main = self.conv_ffn.forward(ctx, &main)?;
        let injections = match self.order {
            OutCaOrder::TimeFirst => [(&self.t, &t_global), (&self.f, &f_global)],
            OutCaOrder::FreqFirst => [(&self.f, &f_global), (&self.t, &t_global)],
        };
        for (branch, x) in injections {
            if let (Some(br), Some(x)) = (branch, x) {
                main = br.inject(ctx, self.index, &main, pe, x)?;
            }
        }
        Ok(BranchState { main, t_global, f_global })
    }
}

/// Gated `1×1` conv, `L_d` Conv-FFNs, then a linear map to complex values
/// with tanh-bounded modulus.
#[derive(Clone, Debug)]
pub struct Decoder {
    gate_a: Linear,
    gate_b: Linear,
    blocks: Vec<ConvFfn>,
    head: Linear,
}

impl Decoder {
    fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        b.scope("decoder", |b| {
            Ok(Decoder {
                gate_a: b.linear("gate_a", c, c)?,
                gate_b: b.linear("gate_b", c, c)?,
                blocks: (0..cfg.decoder_blocks)
                    .map(|i| ConvFfn::build(b, &format!("ffn{i}"), c, cfg.ffn_hidden, cfg.kernel))
                    .collect::<Result<_>>()?,
                head: b.linear("head", c, 2)?,
            })
        })
    }

    /// `[B, T, F, C]` to a complex mask `[B, T, F, 2]` with modulus below one.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: &Var<S>) -> Result<Var<S>> {
        let a = self.gate_a.forward(ctx, x)?;
        let g = self.gate_b.forward(ctx, x)?;
        let g = ctx.tape.activation(&g, crate::tensor::Activation::Sigmoid)?;
        let mut h = ctx.tape.mul(&a, &g)?;
        for block in &self.blocks {
            h = block.forward(ctx, &h)?;
        }
        let z = self.head.forward(ctx, &h)?;
        ctx.tape.complex_tanh_amplitude(&z)
    }
}

/// The full network: structure plus the ids of its parameters.
#[derive(Clone, Debug)]
pub struct TridentNet {
    cfg: ModelConfig,
    encoder: Encoder,
    tokens_t: Option<ParamId>,
    tokens_f: Option<ParamId>,
    blocks: Vec<TridentBlock>,
    decoder: Decoder,
}

/// Tensors produced by one batched forward pass.
pub struct ForwardOutput<S: Real> {
    /// Enhanced waveforms `[B, N]`.
    pub enhanced: Var<S>,
    /// Enhanced spectrogram `Ŝ`, `[B, T, F, 2]`.
    pub spec: Var<S>,
    /// Complex ratio mask `[B, T, F, 2]`.
    pub mask: Var<S>,
    /// Uncompressed noisy spectrogram `[B, T, F, 2]`.
    pub noisy_spec: Tensor<S>,
    pub bn_updates: Vec<BnUpdate>,
    pub capture: Option<AttentionCapture>,
}

impl TridentNet {
    /// Registers all parameters of `cfg` into `store` with seeded initialization.
    pub fn build(cfg: &ModelConfig, store: &mut ParameterStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(store, seed);
        let c = cfg.channels;
        let encoder = Encoder::build(&mut b, c)?;
        let tokens_t = (cfg.tokens_t > 0 && cfg.blocks > 0)
            .then(|| b.param("tokens.t", &[cfg.tokens_t, 1, c], Init::Normal(INIT_STD)))
            .transpose()?;
        let tokens_f = (cfg.tokens_f > 0 && cfg.blocks > 0)
            .then(|| b.param("tokens.f", &[cfg.tokens_f, 1, c], Init::Normal(INIT_STD)))
            .transpose()?;
        let blocks = (0..cfg.blocks).map(|i| TridentBlock::build(&mut b, cfg, i)).collect::<Result<_>>()?;
        let decoder = Decoder::build(&mut b, cfg)?;
        Ok(TridentNet { cfg: *cfg, encoder, tokens_t, tokens_f, blocks, decoder })
    }

    /// A fresh network with its parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let net = Self::build(cfg, &mut store, seed)?;
        Ok((net, store))
    }

    /// Structure of `cfg` checked against existing parameters, e.g. from a checkpoint.
    pub fn for_store(cfg: &ModelConfig, store: &ParameterStore) -> Result<Self> {
        let (net, fresh) = Self::init(cfg, 0)?;
        fresh.check_layout(store)?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[TridentBlock] {
        &self.blocks
    }

    /// Initial branch states from the token banks, repeated along the kept axis.
    pub fn initial_state<S: Real>(&self, ctx: &mut Ctx<S>, main: Var<S>) -> Result<BranchState<S>> {
        let &[b, t, f, c] = main.shape() else {
            return Err(Error::shape("initial_state", format!("main must be [B,T,F,C], got {:?}", main.shape())));
        };
        let mut tokens = |id: Option<ParamId>, m: usize, a: usize| -> Result<Option<Var<S>>> {
            let Some(id) = id else { return Ok(None) };
            let g = ctx.tape.reshape(ctx.p(id), &[1, m, 1, c])?;
            Ok(Some(ctx.tape.expand(&g, &[b, m, a, c])?))
        };
        let t_global = tokens(self.tokens_t, self.cfg.tokens_t, f)?;
        let f_global = tokens(self.tokens_f, self.cfg.tokens_f, t)?;
        Ok(BranchState { main, t_global, f_global })
    }

    /// Batched forward from equal-length noisy waveforms.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, noisy: &[&[f32]]) -> Result<ForwardOutput<S>> {
        let len = match noisy.first() {
            Some(w) if noisy.iter().all(|x| x.len() == w.len()) => w.len(),
            Some(_) => return Err(Error::Signal("batch waveforms differ in length".into())),
            None => return Err(Error::Signal("empty batch".into())),
        };
        let plan = Rc::new(StftPlan::<S>::new(self.cfg.stft)?);
        let (frames, bins) = (self.cfg.stft.frames(len), self.cfg.stft.bins());
        let batch = noisy.len();
        let mut spec = Vec::with_capacity(batch * frames * bins * 2);
        for w in noisy {
            let x: Vec<S> = w.iter().map(|&v| S::lit(v as f64)).collect();
            spec.extend(plan.analyze(&x)?.into_data());
        }
        let noisy_spec = Tensor::new([batch, frames, bins, 2], spec)?;
        let x = ctx.tape.constant(noisy_spec.clone());
        let xc = ctx.tape.complex_compress(&x, S::lit(self.cfg.input_power))?;
        let main = self.encoder.forward(ctx, &xc)?;
        let mut state = self.initial_state(ctx, main)?;
        if ctx.capture.is_some() {
            ctx.capture = Some(AttentionCapture::new(batch, frames, bins));
        }
        let pe = if self.cfg.has_branches() {
            let p = self.cfg.posenc_channels;
            let pe = posenc_2d(frames, bins, p)?.cast::<S>().reshaped([1, frames, bins, p])?;
            let pe = ctx.tape.constant(pe);
            ctx.tape.expand(&pe, &[batch, frames, bins, p])?
        } else {
            ctx.tape.constant(Tensor::zeros([batch, frames, bins, 0]))
        };
        for block in &self.blocks {
            state = block.forward(ctx, state, &pe)?;
        }
        let mask = self.decoder.forward(ctx, &state.main)?;
        let enhanced_spec = ctx.tape.complex_mul(&mask, &x)?;
        let enhanced = ctx.tape.istft(&plan, &enhanced_spec, len)?;
        Ok(ForwardOutput {
            enhanced,
            spec: enhanced_spec,
            mask,
            noisy_spec,
            bn_updates: std::mem::take(&mut ctx.bn_updates),
            capture: ctx.capture.take(),
        })
    }
}

/// Result of [`model_forward`] on one waveform.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub enhanced: Waveform,
    pub spec: ComplexSpectrogram,
    /// `[T, F, 2]`.
    pub mask: Tensor<f32>,
    pub attention: Option<AttentionCapture>,
}

/// Enhances one waveform without recording gradients.
///
/// `mode` selects batch-norm statistics; [`Mode::Eval`] needs a trained store.
pub fn model_forward(noisy: &Waveform, cfg: &ModelConfig, store: &ParameterStore, mode: Mode, capture: bool) -> Result<ModelOutput> {
    let net = TridentNet::for_store(cfg, store)?;
    let mut tape = Tape::<f32>::no_grad();
    let bound = store.bind(&mut tape, false);
    let mut ctx = Ctx::new(&mut tape, &bound, mode);
    if capture {
        ctx.capture = Some(AttentionCapture::new(1, 0, 0));
    }
    let out = net.forward(&mut ctx, &[noisy.samples()])?;
    let (t, f) = (out.mask.shape()[1], out.mask.shape()[2]);
    let mask = out.mask.value().clone().reshaped([t, f, 2])?;
    let spec = ComplexSpectrogram::from_tensor(&out.spec.value().clone().reshaped([t, f, 2])?, cfg.stft)?;
    Ok(ModelOutput {
        enhanced: Waveform::from_samples(out.enhanced.data().to_vec())?,
        spec,
        mask,
        attention: out.capture,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::cost::cost_breakdown;
    use crate::model::params::ParamKind;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            kernel: 3,
            tokens_t: 3,
            tokens_f: 3,
            blocks: 1,
            decoder_blocks: 1,
            heads: crate::model::Heads::uniform(2),
            ffn_hidden: 12,
            posenc_channels: 8,
            ..ModelConfig::tiny()
        }
    }

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.3..0.3)).collect()
    }

    #[test]
    fn analytic_param_count_matches_built_store() {
        for cfg in [toy_cfg(), ModelConfig::tiny(), ModelConfig::small(), ModelConfig::g1(), ModelConfig { blocks: 0, decoder_blocks: 0, ..ModelConfig::tiny() }] {
            let (_, store) = TridentNet::init(&cfg, 1).unwrap();
            let learnable: usize = store.iter().filter(|(_, _, e)| e.kind == ParamKind::Learnable).map(|(_, _, e)| e.tensor.numel()).sum();
            assert_eq!(crate::model::count_params(&cfg), learnable as u64, "{cfg:?}");
        }
    }

    #[test]
    fn analytic_macs_match_tape_counters() {
        for cfg in [toy_cfg(), ModelConfig::g1_like_tiny()] {
            let (net, store) = TridentNet::init(&cfg, 2).unwrap();
            let len = 1600;
            let mut tape = Tape::<f32>::no_grad();
            let bound = store.bind(&mut tape, false);
            let mut ctx = Ctx::new(&mut tape, &bound, Mode::Train);
            let w1 = noise(len, 1);
            let w2 = noise(len, 2);
            net.forward(&mut ctx, &[&w1, &w2]).unwrap();
            let k = cost_breakdown(&cfg, cfg.stft.frames(len), cfg.stft.bins());
            let stats = tape.stats();
            assert_eq!(stats.layer_macs, 2 * k.layer_macs);
            assert_eq!(stats.attention_macs, 2 * k.attention_macs);
        }
    }

    #[test]
    fn output_keeps_length_and_is_deterministic() {
        let cfg = toy_cfg();
        let (_, store) = TridentNet::init(&cfg, 3).unwrap();
        let w = Waveform::from_samples(noise(1234, 5)).unwrap();
        let a = model_forward(&w, &cfg, &store, Mode::Train, false).unwrap();
        let b = model_forward(&w, &cfg, &store, Mode::Train, false).unwrap();
        assert_eq!(a.enhanced.len(), 1234);
        assert_eq!(a.enhanced.samples(), b.enhanced.samples());
        assert!(a.mask.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_without_running_stats_fails() {
        let cfg = toy_cfg();
        let (_, store) = TridentNet::init(&cfg, 3).unwrap();
        let w = Waveform::from_samples(noise(800, 5)).unwrap();
        assert!(matches!(model_forward(&w, &cfg, &store, Mode::Eval, false), Err(Error::NoRunningStats)));
    }

    #[test]
    fn mask_is_bounded_and_attention_rows_normalized() {
        let cfg = toy_cfg();
        let (_, store) = TridentNet::init(&cfg, 4).unwrap();
        let w = Waveform::from_samples(noise(1600, 6)).unwrap();
        let out = model_forward(&w, &cfg, &store, Mode::Train, true).unwrap();
        for z in out.mask.data().chunks(2) {
            assert!(z[0].hypot(z[1]) <= 1.0 + 1e-6);
        }
        let cap = out.attention.unwrap();
        // per block and branch: in-CA, SA, out-CA
        assert_eq!(cap.records.len(), 6);
        assert!(cap.max_row_error() < 1e-5);
        let maps = cap.in_ca_maps(0).unwrap();
        assert_eq!(maps.len(), 6);
        assert!(maps.iter().all(|m| m.frames == 11 && m.bins == 163));
    }

    #[test]
    fn branchless_config_runs_main_stack_only() {
        let cfg = ModelConfig::g1_like_tiny();
        let (net, store) = TridentNet::init(&cfg, 5).unwrap();
        assert!(store.iter().all(|(_, name, _)| !name.contains(".t.") && !name.contains(".f.") && !name.starts_with("tokens")));
        assert_eq!(net.blocks().len(), 2);
        let w = Waveform::from_samples(noise(1000, 7)).unwrap();
        let out = model_forward(&w, &cfg, &store, Mode::Train, true).unwrap();
        assert_eq!(out.enhanced.len(), 1000);
        assert!(out.attention.unwrap().records.is_empty());
    }

    /// Builds one block, copies the time-branch weights into the frequency
    /// branch and checks that transposing the main input swaps the branches.
    fn duality_at(seed: u64) -> f64 {
        let cfg = toy_cfg();
        let mut store = ParameterStore::new();
        let block = {
            let mut b = ParamBuilder::new(&mut store, seed);
            TridentBlock::build(&mut b, &cfg, 0).unwrap()
        };
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).filter(|n| n.starts_with("blocks.0.t.")).collect();
        for name in names {
            let src = store.by_name(&name).unwrap().clone();
            let dst = store.id(&name.replace("blocks.0.t.", "blocks.0.f.")).unwrap();
            *store.get_mut(dst) = src;
        }
        let (b, t, f, c, m, p) = (2, 5, 4, cfg.channels, cfg.tokens_t, cfg.posenc_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let main = random(&[b, t, f, c], &mut rng);
        let tg = random(&[b, m, f, c], &mut rng);
        let fg = random(&[b, m, t, c], &mut rng);
        let pe = random(&[b, t, f, p], &mut rng);

        let mut tape = Tape::<f64>::no_grad();
        let bound = store.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, Mode::Train);
        let run = |ctx: &mut Ctx<f64>, main: Tensor<f64>, tg: Tensor<f64>, fg: Tensor<f64>, pe: Tensor<f64>| {
            let state = BranchState {
                main: ctx.tape.constant(main),
                t_global: Some(ctx.tape.constant(tg)),
                f_global: Some(ctx.tape.constant(fg)),
            };
            let pe = ctx.tape.constant(pe);
            block.forward(ctx, state, &pe).unwrap()
        };
        let transpose = |ctx: &mut Ctx<f64>, x: Tensor<f64>| {
            let v = ctx.tape.constant(x);
            ctx.tape.permute(&v, &[0, 2, 1, 3]).unwrap().value().clone()
        };
        let direct = run(&mut ctx, main.clone(), tg.clone(), fg.clone(), pe.clone());
        let (main_t, pe_t) = (transpose(&mut ctx, main), transpose(&mut ctx, pe));
        let swapped = run(&mut ctx, main_t, fg, tg, pe_t);
        let diff = |a: &Var<f64>, b: &Var<f64>| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let d1 = diff(direct.t_global.as_ref().unwrap(), swapped.f_global.as_ref().unwrap());
        let d2 = diff(direct.f_global.as_ref().unwrap(), swapped.t_global.as_ref().unwrap());
        d1.max(d2)
    }

    #[test]
    fn transposing_main_swaps_branch_outputs() {
        for seed in [11, 22, 33] {
            let err = duality_at(seed);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = toy_cfg();
        let (net, store) = TridentNet::init(&cfg, 9).unwrap();
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape, true);
        let mut ctx = Ctx::new(&mut tape, &bound, Mode::Train);
        let (w1, w2) = (noise(1600, 1), noise(1600, 2));
        let out = net.forward(&mut ctx, &[&w1, &w2]).unwrap();
        let target = tape.constant(Tensor::from_fn([2, 1600], |i| (i as f64 * 0.01).sin() * 0.1));
        let loss = tape.mse(&out.enhanced, &target).unwrap();
        tape.backward(&loss).unwrap();
        for (id, name, e) in store.iter() {
            if e.kind == ParamKind::Learnable {
                let g = tape.grad_or_zeros(bound.var(id));
                assert!(g.norm() > 0.0, "no gradient reaches {name}");
            }
        }
    }
}
