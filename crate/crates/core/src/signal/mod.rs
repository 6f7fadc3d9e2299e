//! Waveforms, complex spectrograms and the transforms between them.

mod stft;

pub use stft::{hann_periodic, StftConfig, StftPlan};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAGNITUDE_EPS};

pub const SAMPLE_RATE: u32 = 16_000;

/// Ceiling applied to [`si_snr`], in dB. The floor is its negation.
pub const SI_SNR_CAP_DB: f64 = 60.0;

/// Mono audio at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    /// Fails on non-finite samples or a rate other than 16 kHz.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Signal(format!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Signal(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples })
    }

    pub fn from_samples(samples: Vec<f32>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// A `T × F` complex spectrogram held as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    real: Vec<f32>,
    imag: Vec<f32>,
    frames: usize,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(real: Vec<f32>, imag: Vec<f32>, frames: usize, config: StftConfig) -> Result<Self> {
        let n = frames * config.bins();
        if real.len() != n || imag.len() != n {
            return Err(Error::Signal(format!(
                "planes of {} and {} values for {frames}×{} bins",
                real.len(),
                imag.len(),
                config.bins()
            )));
        }
        Ok(ComplexSpectrogram { real, imag, frames, config })
    }

    /// From an interleaved `[T, F, 2]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, config: StftConfig) -> Result<Self> {
        match *t.shape() {
            [frames, bins, 2] if bins == config.bins() => {
                let (real, imag) = t.data().chunks_exact(2).map(|c| (c[0], c[1])).unzip();
                Ok(ComplexSpectrogram { real, imag, frames, config })
            }
            _ => Err(Error::Signal(format!("expected [T, {}, 2], got {:?}", config.bins(), t.shape()))),
        }
    }

    /// Interleaved `[T, F, 2]` view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.real.iter().zip(&self.imag).flat_map(|(&r, &i)| [r, i]).collect();
        Tensor::new([self.frames, self.bins(), 2], data).expect("planes match metadata")
    }

    pub fn real(&self) -> &[f32] {
        &self.real
    }

    pub fn imag(&self) -> &[f32] {
        &self.imag
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    /// Bin `(t, f)` as `(re, im)`.
    pub fn bin(&self, t: usize, f: usize) -> (f32, f32) {
        let i = t * self.bins() + f;
        (self.real[i], self.imag[i])
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.real.iter().zip(&self.imag).map(|(r, i)| r.hypot(*i)).collect()
    }

    fn map_bins(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let (real, imag) = self
            .real
            .iter()
            .zip(&self.imag)
            .map(|(&r, &i)| {
                let (a, b) = f(r as f64, i as f64);
                (a as f32, b as f32)
            })
            .unzip();
        ComplexSpectrogram { real, imag, frames: self.frames, config: self.config }
    }
}

/// Spectrogram of `w` with the default framing.
pub fn stft(w: &Waveform) -> Result<ComplexSpectrogram> {
    stft_with(w, StftConfig::default())
}

pub fn stft_with(w: &Waveform, config: StftConfig) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::<f32>::new(config)?;
    let t = plan.analyze(w.samples())?;
    ComplexSpectrogram::from_tensor(&t, config)
}

/// Overlap-add resynthesis, trimmed to `target_len` samples.
pub fn istft(spec: &ComplexSpectrogram, target_len: usize) -> Result<Waveform> {
    let plan = StftPlan::<f32>::new(spec.config())?;
    Waveform::from_samples(plan.synthesize(&spec.to_tensor(), target_len)?)
}

fn check_power(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("compression power {p} outside (0, 1]")));
    }
    Ok(())
}

/// `z -> |z|^p · z/|z|`; bins with `|z| < 1e-12` map to zero.
pub fn power_compress(spec: &ComplexSpectrogram, p: f64) -> Result<ComplexSpectrogram> {
    check_power(p)?;
    Ok(spec.map_bins(|r, i| {
        let m = r.hypot(i);
        if m < MAGNITUDE_EPS {
            (0.0, 0.0)
        } else {
            let k = m.powf(p - 1.0);
            (r * k, i * k)
        }
    }))
}

/// Inverse of [`power_compress`].
pub fn power_decompress(spec: &ComplexSpectrogram, p: f64) -> Result<ComplexSpectrogram> {
    check_power(p)?;
    Ok(spec.map_bins(|r, i| {
        let m = r.hypot(i);
        if m < MAGNITUDE_EPS {
            (0.0, 0.0)
        } else {
            let k = m.powf(1.0 / p - 1.0);
            (r * k, i * k)
        }
    }))
}

/// Bin-wise complex product of `noisy` with a `[T, F, 2]` mask.
pub fn apply_complex_mask(noisy: &ComplexSpectrogram, mask: &Tensor<f32>) -> Result<ComplexSpectrogram> {
    if mask.shape() != [noisy.frames(), noisy.bins(), 2] {
        return Err(Error::Signal(format!(
            "mask {:?} does not match spectrogram [{}, {}, 2]",
            mask.shape(),
            noisy.frames(),
            noisy.bins()
        )));
    }
    let (real, imag) = noisy
        .real
        .iter()
        .zip(&noisy.imag)
        .zip(mask.data().chunks_exact(2))
        .map(|((&a, &b), m)| (a * m[0] - b * m[1], a * m[1] + b * m[0]))
        .unzip();
    Ok(ComplexSpectrogram { real, imag, frames: noisy.frames, config: noisy.config })
}

/// Scale-invariant SNR in dB, clamped to `±60`.
pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_slices(est.samples(), reference.samples())
}

pub fn si_snr_slices(est: &[f32], reference: &[f32]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Signal(format!("length mismatch: {} vs {}", est.len(), reference.len())));
    }
    let rr: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
    if rr == 0.0 {
        return Err(Error::Signal("SI-SNR reference is all zeros".into()));
    }
    let er: f64 = est.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    let alpha = er / rr;
    let (mut target, mut residual) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let t = alpha * r as f64;
        target += t * t;
        residual += (e as f64 - t).powi(2);
    }
    let db = if residual == 0.0 {
        SI_SNR_CAP_DB
    } else if target == 0.0 {
        -SI_SNR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        Waveform::from_samples(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn waveform_rejects_other_rates_and_nan() {
        assert!(Waveform::new(vec![0.0; 10], 44_100).is_err());
        assert!(Waveform::from_samples(vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn silence_gives_zero_spectrogram_of_301_frames() {
        let s = stft(&Waveform::from_samples(vec![0.0; 48_000]).unwrap()).unwrap();
        assert_eq!((s.frames(), s.bins()), (301, 163));
        assert!(s.real().iter().chain(s.imag()).all(|&v| v == 0.0));
        let w = istft(&s, 48_000).unwrap();
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_kilohertz_peaks_at_bin_20() {
        let s = stft(&tone(1000.0, 1.0)).unwrap();
        for t in [10, 50, 90] {
            let mags = &s.magnitudes()[t * 163..(t + 1) * 163];
            let peak = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, 20);
        }
    }

    #[test]
    fn constant_signal_dc_is_window_sum() {
        let s = stft(&Waveform::from_samples(vec![1.0; 16_000]).unwrap()).unwrap();
        let (re, im) = s.bin(50, 0);
        assert!((re - 160.0).abs() < 1e-3 && im.abs() < 1e-3, "{re} {im}");
    }

    #[test]
    fn compression_examples() {
        let cfg = StftConfig { frame_len: 4, hop: 2, fft_size: 4 };
        let s = ComplexSpectrogram::new(vec![0.6, 0.0, 100.0], vec![0.8, 0.0, 0.0], 1, cfg).unwrap();
        let c = power_compress(&s, 0.3).unwrap();
        assert!((c.bin(0, 0).0 - 0.6).abs() < 1e-6 && (c.bin(0, 0).1 - 0.8).abs() < 1e-6);
        assert_eq!(c.bin(0, 1), (0.0, 0.0));
        assert!((c.bin(0, 2).0 - 3.9811).abs() < 1e-4);
        assert!(power_compress(&s, 0.0).is_err());
        assert!(power_compress(&s, 1.5).is_err());
    }

    #[test]
    fn mask_examples() {
        let cfg = StftConfig { frame_len: 4, hop: 2, fft_size: 4 };
        let s = ComplexSpectrogram::new(vec![1.0, -2.0, 3.0], vec![0.5, 4.0, 0.0], 1, cfg).unwrap();
        let ident = Tensor::from_fn([1, 3, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        assert_eq!(apply_complex_mask(&s, &ident).unwrap(), s);
        let rot = Tensor::from_fn([1, 3, 2], |i| (i % 2) as f32);
        let r = apply_complex_mask(&s, &rot).unwrap();
        assert_eq!(r.real(), &[-0.5, -4.0, 0.0]);
        assert_eq!(r.imag(), &[1.0, -2.0, 3.0]);
        assert!(apply_complex_mask(&s, &Tensor::zeros([2, 3, 2])).is_err());
    }

    #[test]
    fn si_snr_examples() {
        let s: Vec<f32> = (0..1000).map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0).collect();
        let w = Waveform::from_samples(s.clone()).unwrap();
        assert_eq!(si_snr(&w, &w).unwrap(), 60.0);
        let twice = Waveform::from_samples(s.iter().map(|v| 2.0 * v).collect()).unwrap();
        assert_eq!(si_snr(&twice, &w).unwrap(), 60.0);
        // an orthogonal residual with a tenth of the power
        let ss: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum();
        let raw: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.731).sin()).collect();
        let proj = raw.iter().zip(&s).map(|(a, &b)| a * b as f64).sum::<f64>() / ss;
        let n: Vec<f64> = raw.iter().zip(&s).map(|(a, &b)| a - proj * b as f64).collect();
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let k = (ss / 10.0 / nn).sqrt();
        let est: Vec<f32> = s.iter().zip(&n).map(|(&a, b)| (a as f64 + k * b) as f32).collect();
        assert!((si_snr_slices(&est, &s).unwrap() - 10.0).abs() < 1e-4);
        assert!(si_snr_slices(&est, &[0.0; 1000]).is_err());
        assert!(si_snr_slices(&est[..10], &s).is_err());
    }
}
