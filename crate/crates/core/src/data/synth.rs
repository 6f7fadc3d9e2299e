use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

pub const TARGET_RMS: f64 = 0.1;

const F0_RANGE: (f64, f64) = (80.0, 300.0);
const HARMONICS: usize = 8;
const BABBLE_TALKERS: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "babble" => Ok(NoiseKind::Babble),
            _ => Err(Error::Unknown { what: "noise kind", name: s.into() }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CleanOptions {
    /// Hold f0 fixed at this frequency instead of drifting.
    pub f0: Option<f64>,
}

fn sample_count(duration: f64) -> Result<usize> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Signal(format!("duration {duration} s must be positive")));
    }
    Ok((duration * SAMPLE_RATE as f64).round() as usize)
}

fn normalized(mut x: Vec<f64>) -> Result<Waveform> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms == 0.0 {
        return Err(Error::Signal("generated silence".into()));
    }
    let g = TARGET_RMS / rms;
    x.iter_mut().for_each(|v| *v *= g);
    Waveform::from_samples(x.into_iter().map(|v| v as f32).collect())
}

/// Two-pole resonator with unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bandwidth / fs).exp();
        let w = 2.0 * PI * freq / fs;
        let (a1, a2) = (-2.0 * r * w.cos(), r * r);
        // |1 / (1 + a1 z^-1 + a2 z^-2)| at z = e^{jw}
        let z1 = Complex::from_polar(1.0, -w);
        let gain = (Complex::new(1.0, 0.0) + z1 * a1 + z1 * z1 * a2).norm();
        Resonator { a1, a2, gain, y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Syllable-rate amplitude contour: raised-cosine bumps at 2 to 6 Hz with
/// occasional pauses.
fn syllabic_envelope(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut env = Vec::with_capacity(n);
    while env.len() < n {
        let len = (fs / rng.random_range(2.0..6.0)) as usize;
        let peak = rng.random_range(0.5..1.0);
        env.extend((0..len).map(|i| peak * 0.5 * (1.0 - (2.0 * PI * i as f64 / len as f64).cos())));
        if rng.random_bool(0.25) {
            let gap = (fs * rng.random_range(0.05..0.2)) as usize;
            env.extend(std::iter::repeat_n(0.0, gap));
        }
    }
    env.truncate(n);
    env
}

/// Voiced, speech-like signal of `duration` seconds at 16 kHz with RMS 0.1.
pub fn synth_clean(seed: u64, duration: f64) -> Result<Waveform> {
    synth_clean_with(seed, duration, CleanOptions::default())
}

pub fn synth_clean_with(seed: u64, duration: f64, opts: CleanOptions) -> Result<Waveform> {
    Ok(normalized(synth_voice(seed, sample_count(duration)?, opts))?)
}

fn synth_voice(seed: u64, n: usize, opts: CleanOptions) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = F0_RANGE;
    let step = Normal::new(0.0, 4.0).expect("valid std");
    // f0 knots every 10 ms, linearly interpolated
    let knot = (fs / 100.0) as usize;
    let mut f0_knots = vec![opts.f0.unwrap_or_else(|| rng.random_range(100.0..250.0))];
    for _ in 0..n / knot + 1 {
        let last = *f0_knots.last().unwrap();
        let next = match opts.f0 {
            Some(f) => f,
            None => {
                let v = last + step.sample(&mut rng);
                if v < lo {
                    2.0 * lo - v
                } else if v > hi {
                    2.0 * hi - v
                } else {
                    v
                }
            }
        };
        f0_knots.push(next);
    }
    let mut r1 = Resonator::new(rng.random_range(300.0..800.0), 120.0);
    let mut r2 = Resonator::new(rng.random_range(1000.0..2500.0), 200.0);
    let env = syllabic_envelope(n, &mut rng);
    let nyquist = fs / 2.0;
    let mut phase = 0.0f64;
    (0..n)
        .map(|i| {
            let (k, frac) = (i / knot, (i % knot) as f64 / knot as f64);
            let f0 = f0_knots[k] * (1.0 - frac) + f0_knots[k + 1] * frac;
            phase = (phase + 2.0 * PI * f0 / fs) % (2.0 * PI);
            let src: f64 = (1..=HARMONICS)
                .filter(|&h| h as f64 * f0 < nyquist * 0.95)
                .map(|h| (h as f64 * phase).sin() / h as f64)
                .sum();
            // the dry path keeps the fundamental the strongest component
            (0.5 * src + 0.3 * r1.step(src) + 0.2 * r2.step(src)) * env[i]
        })
        .collect()
}

/// Noise of the given colour, RMS 0.1.
pub fn synth_noise(seed: u64, kind: NoiseKind, duration: f64) -> Result<Waveform> {
    let n = sample_count(duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("valid std");
    let x: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| gauss.sample(&mut rng)).collect(),
        NoiseKind::Pink => {
            let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(gauss.sample(&mut rng), 0.0)).collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            // power ∝ 1/f, mirrored bins get the same gain
            buf[0] = Complex::new(0.0, 0.0);
            for k in 1..n {
                let f = k.min(n - k) as f64;
                buf[k] /= f.sqrt();
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            buf.into_iter().map(|c| c.re).collect()
        }
        NoiseKind::Babble => {
            let mut sum = vec![0.0; n];
            for talker in 0..BABBLE_TALKERS {
                let voice = synth_voice(rng.random::<u64>() ^ talker, n, CleanOptions::default());
                sum.iter_mut().zip(voice).for_each(|(s, v)| *s += v);
            }
            sum
        }
    };
    normalized(x)
}
