use crate::error::{Error, Result};
use crate::model::{Ctx, Init, ParamBuilder, ParamId, ParameterStore};
use crate::model::params::{LayerNorm, Linear};
use crate::tensor::{Activation, ConvSpec, Real, Var};

/// Output channels of the four strided conv blocks.
pub const DISC_CHANNELS: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    ln: LayerNorm,
}

/// Scores how close a test spectrogram is to a reference, in `(0, 1)`.
///
/// Input is the pair of compressed magnitudes stacked as two channels; four
/// `3×3` stride-2 conv blocks with layer norm and GELU, global average
/// pooling, then two linear layers and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    blocks: Vec<ConvBlock>,
    fc1: Linear,
    fc2: Linear,
    power: f64,
}

impl Discriminator {
    pub fn build(store: &mut ParameterStore, seed: u64, power: f64) -> Result<Self> {
        let mut b = ParamBuilder::new(store, seed);
        let mut cin = 2;
        let mut blocks = Vec::new();
        for (i, &cout) in DISC_CHANNELS.iter().enumerate() {
            blocks.push(b.scope(format!("conv{i}"), |b| {
                Ok(ConvBlock {
                    w: b.param("w", &[3, 3, cin, cout], Init::KaimingUniform(9 * cin))?,
                    b: b.param("b", &[cout], Init::Zeros)?,
                    ln: b.layer_norm("ln", cout)?,
                })
            })?);
            cin = cout;
        }
        let fc1 = b.linear("fc1", cin, 32)?;
        let fc2 = b.linear("fc2", 32, 1)?;
        Ok(Discriminator { blocks, fc1, fc2, power })
    }

    pub fn init(seed: u64, power: f64) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let d = Self::build(&mut store, seed, power)?;
        Ok((d, store))
    }

    /// `reference` and `test` are complex spectrograms `[B, T, F, 2]`; returns `[B, 1]`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, reference: &Var<S>, test: &Var<S>) -> Result<Var<S>> {
        if reference.shape() != test.shape() || reference.shape().len() != 4 {
            return Err(Error::shape("discriminator", format!("{:?} vs {:?}", reference.shape(), test.shape())));
        }
        let &[b, t, f, _] = reference.shape() else { unreachable!() };
        let p = S::lit(self.power);
        let r = ctx.tape.complex_abs_pow(reference, p)?;
        let r = ctx.tape.reshape(&r, &[b, t, f, 1])?;
        let e = ctx.tape.complex_abs_pow(test, p)?;
        let e = ctx.tape.reshape(&e, &[b, t, f, 1])?;
        let mut h = ctx.tape.concat_last(&r, &e)?;
        let spec = ConvSpec { stride: (2, 2), padding: (1, 1) };
        for block in &self.blocks {
            let (w, bias) = (ctx.p(block.w), ctx.p(block.b));
            h = ctx.tape.conv2d(&h, w, Some(bias), spec)?;
            h = block.ln.forward(ctx, &h)?;
            h = ctx.tape.gelu(&h)?;
        }
        let &[_, ht, hf, c] = h.shape() else { unreachable!() };
        let h = ctx.tape.reshape(&h, &[b, ht * hf, c])?;
        let h = ctx.tape.mean_middle(&h)?;
        let h = self.fc1.forward(ctx, &h)?;
        let h = ctx.tape.gelu(&h)?;
        let h = self.fc2.forward(ctx, &h)?;
        ctx.tape.activation(&h, Activation::Sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Mode;
    use crate::tensor::{Tape, Tensor};

    fn random_spec(b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, 9, 13, 2], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn scores_lie_in_open_unit_interval_and_follow_batch_order() {
        let (d, store) = Discriminator::init(3, 0.3).unwrap();
        let mut tape = Tape::<f64>::no_grad();
        let bound = store.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, Mode::Train);
        let (a, b) = (random_spec(3, 1), random_spec(3, 2));
        let ra = ctx.tape.constant(a.clone());
        let rb = ctx.tape.constant(b.clone());
        let out = d.forward(&mut ctx, &ra, &rb).unwrap();
        assert_eq!(out.shape(), [3, 1]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let swap = |t: &Tensor<f64>| {
            let n = t.numel() / 3;
            let d = t.data();
            Tensor::new(t.shape().to_vec(), [&d[2 * n..], &d[n..2 * n], &d[..n]].concat()).unwrap()
        };
        let sa = ctx.tape.constant(swap(&a));
        let sb = ctx.tape.constant(swap(&b));
        let swapped = d.forward(&mut ctx, &sa, &sb).unwrap();
        assert_eq!(swapped.data(), [out.data()[2], out.data()[1], out.data()[0]]);
    }
}
