//! Short-time Fourier analysis and overlap-add synthesis with fixed framing.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Framing parameters. Defaults: 20 ms periodic Hann, 10 ms hop, 324-point DFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { frame_len: 320, hop: 160, fft_size: 324 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for a signal of `len` samples: `ceil(len / hop) + 1`.
    ///
    /// Frame `t` is centred on sample `t · hop`, so the last frame is centred
    /// at or past the end and every kept sample lies under two windows.
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.frame_len == 0 || self.hop > self.frame_len {
            return Err(Error::Config(format!("hop {} must be in 1..=frame_len {}", self.hop, self.frame_len)));
        }
        if self.fft_size < self.frame_len || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size {} must be even and at least frame_len {}",
                self.fft_size, self.frame_len
            )));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        self.frame_len / 2
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Precomputed window and DFT bases for one framing.
///
/// The window is zero-padded at its end to `fft_size`, so only the first
/// `frame_len` samples of each frame contribute and the bases are
/// `frame_len × bins`.
pub struct StftPlan<S: Real> {
    cfg: StftConfig,
    window: Vec<S>,
    /// Analysis bases, `[frame_len, bins]`: `cos(2πkn/N)` and `-sin(2πkn/N)`.
    ana_cos: Vec<S>,
    ana_sin: Vec<S>,
    /// Synthesis bases, `[bins, frame_len]`, one-sided inverse with the `1/N` factor.
    syn_cos: Vec<S>,
    syn_sin: Vec<S>,
}

impl<S: Real> StftPlan<S> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, len, bins) = (cfg.fft_size, cfg.frame_len, cfg.bins());
        let window = hann_periodic(len).into_iter().map(S::lit).collect();
        let mut ana_cos = vec![S::zero(); len * bins];
        let mut ana_sin = vec![S::zero(); len * bins];
        let mut syn_cos = vec![S::zero(); bins * len];
        let mut syn_sin = vec![S::zero(); bins * len];
        for t in 0..len {
            for k in 0..bins {
                // reduce k·t mod N before the trig call to keep the argument small
                let phase = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                let (s, c) = phase.sin_cos();
                ana_cos[t * bins + k] = S::lit(c);
                ana_sin[t * bins + k] = S::lit(-s);
                let weight = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
                syn_cos[k * len + t] = S::lit(weight * c);
                syn_sin[k * len + t] = S::lit(-weight * s);
            }
        }
        Ok(StftPlan { cfg, window, ana_cos, ana_sin, syn_cos, syn_sin })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window(&self) -> &[S] {
        &self.window
    }

    /// Analyzes one signal into `[frames, bins, 2]`.
    pub fn analyze(&self, x: &[S]) -> Result<Tensor<S>> {
        let StftConfig { frame_len, hop, .. } = self.cfg;
        if x.len() < frame_len {
            return Err(Error::Signal(format!("signal of {} samples is shorter than one frame ({frame_len})", x.len())));
        }
        let pad = self.cfg.pad();
        let frames = self.cfg.frames(x.len());
        let bins = self.cfg.bins();
        let padded_len = (frames - 1) * hop + frame_len;
        let mut padded = vec![S::zero(); padded_len.max(pad + x.len())];
        for (i, p) in padded.iter_mut().enumerate() {
            *p = if i < pad {
                x[pad - i]
            } else if i < pad + x.len() {
                x[i - pad]
            } else if i - pad - x.len() + 2 <= x.len() {
                x[x.len() - 2 - (i - pad - x.len())]
            } else {
                S::zero()
            };
        }
        let mut framed = vec![S::zero(); frames * frame_len];
        for (t, row) in framed.chunks_exact_mut(frame_len).enumerate() {
            for ((r, &v), &w) in row.iter_mut().zip(&padded[t * hop..]).zip(&self.window) {
                *r = v * w;
            }
        }
        let mut re = vec![S::zero(); frames * bins];
        let mut im = vec![S::zero(); frames * bins];
        let b = bins as isize;
        S::gemm(frames, frame_len, bins, S::one(), &framed, frame_len as isize, 1, &self.ana_cos, b, 1, S::zero(), &mut re, b, 1);
        S::gemm(frames, frame_len, bins, S::one(), &framed, frame_len as isize, 1, &self.ana_sin, b, 1, S::zero(), &mut im, b, 1);
        Ok(interleave(frames, bins, &re, &im))
    }

    /// Overlap-add denominator: squared windows summed over frames, over the padded axis.
    fn window_power(&self, frames: usize) -> Vec<S> {
        let StftConfig { frame_len, hop, .. } = self.cfg;
        let mut acc = vec![S::zero(); (frames - 1) * hop + frame_len];
        for t in 0..frames {
            for (a, &w) in acc[t * hop..].iter_mut().zip(&self.window) {
                *a += w * w;
            }
        }
        acc
    }

    fn check_spec(&self, spec: &[usize]) -> Result<usize> {
        match *spec {
            [frames, bins, 2] if bins == self.cfg.bins() && frames > 0 => Ok(frames),
            _ => Err(Error::Signal(format!(
                "spectrogram {spec:?} does not match framing with {} bins",
                self.cfg.bins()
            ))),
        }
    }

    /// Inverse of [`StftPlan::analyze`] for a `[frames, bins, 2]` spectrogram,
    /// trimmed to `len` samples.
    pub fn synthesize(&self, spec: &Tensor<S>, len: usize) -> Result<Vec<S>> {
        let frames = self.check_spec(spec.shape())?;
        let StftConfig { frame_len, hop, .. } = self.cfg;
        let pad = self.cfg.pad();
        let norm = self.window_power(frames);
        if pad + len > norm.len() {
            return Err(Error::Signal(format!("{frames} frames cannot cover {len} samples")));
        }
        let (re, im) = deinterleave(spec.data());
        let bins = self.cfg.bins();
        let mut framed = vec![S::zero(); frames * frame_len];
        let fl = frame_len as isize;
        S::gemm(frames, bins, frame_len, S::one(), &re, bins as isize, 1, &self.syn_cos, fl, 1, S::zero(), &mut framed, fl, 1);
        S::gemm(frames, bins, frame_len, S::one(), &im, bins as isize, 1, &self.syn_sin, fl, 1, S::one(), &mut framed, fl, 1);
        let mut acc = vec![S::zero(); norm.len()];
        for (t, row) in framed.chunks_exact(frame_len).enumerate() {
            for ((a, &v), &w) in acc[t * hop..].iter_mut().zip(row).zip(&self.window) {
                *a += v * w;
            }
        }
        (pad..pad + len)
            .map(|i| {
                if norm[i] == S::zero() {
                    Err(Error::Signal(format!("zero overlap-add normalization at sample {}", i - pad)))
                } else {
                    Ok(acc[i] / norm[i])
                }
            })
            .collect()
    }

    /// Adjoint of [`StftPlan::synthesize`]: maps a waveform gradient back to
    /// a `[frames, bins, 2]` spectrogram gradient.
    fn synthesize_adjoint(&self, g: &[S], frames: usize) -> Tensor<S> {
        let StftConfig { frame_len, hop, .. } = self.cfg;
        let pad = self.cfg.pad();
        let bins = self.cfg.bins();
        let norm = self.window_power(frames);
        let mut gp = vec![S::zero(); norm.len()];
        for (i, &v) in g.iter().enumerate() {
            gp[pad + i] = v / norm[pad + i];
        }
        let mut framed = vec![S::zero(); frames * frame_len];
        for (t, row) in framed.chunks_exact_mut(frame_len).enumerate() {
            for ((r, &v), &w) in row.iter_mut().zip(&gp[t * hop..]).zip(&self.window) {
                *r = v * w;
            }
        }
        let mut re = vec![S::zero(); frames * bins];
        let mut im = vec![S::zero(); frames * bins];
        let fl = frame_len as isize;
        // transpose of the [bins, frame_len] synthesis bases
        S::gemm(frames, frame_len, bins, S::one(), &framed, fl, 1, &self.syn_cos, 1, fl, S::zero(), &mut re, bins as isize, 1);
        S::gemm(frames, frame_len, bins, S::one(), &framed, fl, 1, &self.syn_sin, 1, fl, S::zero(), &mut im, bins as isize, 1);
        interleave(frames, bins, &re, &im)
    }
}

fn interleave<S: Real>(frames: usize, bins: usize, re: &[S], im: &[S]) -> Tensor<S> {
    let data = re.iter().zip(im).flat_map(|(&r, &i)| [r, i]).collect();
    Tensor::from_parts(vec![frames, bins, 2], data)
}

fn deinterleave<S: Real>(data: &[S]) -> (Vec<S>, Vec<S>) {
    data.chunks_exact(2).map(|c| (c[0], c[1])).unzip()
}

impl<S: Real> Tape<S> {
    /// Differentiable inverse STFT of a batch `[B, frames, bins, 2]` to `[B, len]`.
    pub fn istft(&mut self, plan: &Rc<StftPlan<S>>, spec: &Var<S>, len: usize) -> Result<Var<S>> {
        let &[batch, frames, bins, two] = spec.shape() else {
            return Err(Error::shape("istft", format!("expected [B, frames, bins, 2], got {:?}", spec.shape())));
        };
        plan.check_spec(&[frames, bins, two])?;
        let item = frames * bins * 2;
        let mut out = Vec::with_capacity(batch * len);
        for b in 0..batch {
            let one = Tensor::from_parts(vec![frames, bins, 2], spec.data()[b * item..(b + 1) * item].to_vec());
            out.extend(plan.synthesize(&one, len)?);
        }
        let plan = Rc::clone(plan);
        self.record("istft", &[spec], Tensor::from_parts(vec![batch, len], out), move |g, _| {
            let mut d = Vec::with_capacity(batch * item);
            for row in g.data().chunks_exact(len) {
                d.extend(plan.synthesize_adjoint(row, frames).into_data());
            }
            vec![Some(Tensor::from_parts(vec![batch, frames, bins, 2], d))]
        })
    }
}
