use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::si_snr_slices;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Compression power and adversarial weight of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub p: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { p: 0.3, lambda: 0.005 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("compression power {} outside (0, 1]", self.p)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("GAN weight {} must be a finite nonnegative number", self.lambda)));
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_a: f64,
    pub l_p: f64,
    pub l_w: f64,
    pub l_gan: f64,
    /// `(l_a + l_p + l_w) / 3 + λ · l_gan`.
    pub total: f64,
    pub l_d: Option<f64>,
}

/// Differentiable total plus the individual terms.
pub struct GeneratorLoss<S: Real> {
    pub total: Var<S>,
    pub report: LossReport,
}

/// Magnitude, compressed-spectrum, waveform and adversarial terms.
///
/// Spectrograms are `[.., 2]` complex planes, waveforms any matching shape and
/// `d_est` the discriminator scores `D(S, Ŝ)`.
pub fn generator_losses<S: Real>(
    tape: &mut Tape<S>,
    est_spec: &Var<S>,
    clean_spec: &Var<S>,
    est_wave: &Var<S>,
    clean_wave: &Var<S>,
    d_est: &Var<S>,
    weights: LossWeights,
) -> Result<GeneratorLoss<S>> {
    weights.validate()?;
    if est_spec.shape() != clean_spec.shape() {
        return Err(Error::shape("generator_losses", format!("spectra {:?} vs {:?}", est_spec.shape(), clean_spec.shape())));
    }
    if est_wave.shape() != clean_wave.shape() {
        return Err(Error::shape("generator_losses", format!("waveforms {:?} vs {:?}", est_wave.shape(), clean_wave.shape())));
    }
    let p = S::lit(weights.p);
    let (ea, ca) = (tape.complex_abs_pow(est_spec, p)?, tape.complex_abs_pow(clean_spec, p)?);
    let l_a = tape.mse(&ea, &ca)?;
    let (ec, cc) = (tape.complex_compress(est_spec, p)?, tape.complex_compress(clean_spec, p)?);
    let l_p = tape.mse(&ec, &cc)?;
    let l_w = tape.mse(est_wave, clean_wave)?;
    let miss = tape.scale(d_est, -S::one())?;
    let miss = tape.add_scalar(&miss, S::one())?;
    let miss = tape.square(&miss)?;
    let l_gan = tape.mean(&miss)?;

    let recon = tape.add(&l_a, &l_p)?;
    let recon = tape.add(&recon, &l_w)?;
    let recon = tape.scale(&recon, S::one() / S::lit(3.0))?;
    let adv = tape.scale(&l_gan, S::lit(weights.lambda))?;
    let total = tape.add(&recon, &adv)?;
    let report = LossReport {
        l_a: l_a.value().item().f64(),
        l_p: l_p.value().item().f64(),
        l_w: l_w.value().item().f64(),
        l_gan: l_gan.value().item().f64(),
        total: total.value().item().f64(),
        l_d: None,
    };
    Ok(GeneratorLoss { total, report })
}

/// `mean_b[(1 - D(S, S))² + (Q - D(S, Ŝ))²]` with `q` treated as a constant.
pub fn discriminator_loss<S: Real>(tape: &mut Tape<S>, d_clean: &Var<S>, d_est: &Var<S>, q: &[f64]) -> Result<Var<S>> {
    if d_clean.shape() != d_est.shape() || d_est.value().numel() != q.len() {
        return Err(Error::shape(
            "discriminator_loss",
            format!("scores {:?} / {:?} with {} targets", d_clean.shape(), d_est.shape(), q.len()),
        ));
    }
    let miss = tape.scale(d_clean, -S::one())?;
    let miss = tape.add_scalar(&miss, S::one())?;
    let real = tape.square(&miss)?;
    let target = tape.constant(Tensor::new(d_est.shape().to_vec(), q.iter().map(|&v| S::lit(v)).collect())?);
    let fake = tape.sub(&target, d_est)?;
    let fake = tape.square(&fake)?;
    let both = tape.add(&real, &fake)?;
    tape.mean(&both)
}

/// Quality target in `[0, 1]` from SI-SNR: `clamp((si_snr + 10) / 40, 0, 1)`.
pub fn quality_proxy(est: &[f32], reference: &[f32]) -> Result<f64> {
    Ok(((si_snr_slices(est, reference)? + 10.0) / 40.0).clamp(0.0, 1.0))
}
