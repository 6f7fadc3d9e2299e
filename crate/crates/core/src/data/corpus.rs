use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_clean, synth_noise, NoiseKind};
use super::wav::write_wav;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// SNR range of training mixtures in dB.
pub const TRAIN_SNR_RANGE: (f64, f64) = (-5.0, 20.0);

/// Everything needed to regenerate one noisy/clean pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub clean_seed: u64,
    pub noise_seed: u64,
    pub kind: NoiseKind,
    pub snr_db: f64,
    pub duration_s: f64,
}

/// How mixture SNRs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SnrMode {
    /// Continuous uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Uniform over a fixed set of levels.
    Discrete { levels: Vec<f64> },
}

impl Default for SnrMode {
    fn default() -> Self {
        SnrMode::Uniform { lo: TRAIN_SNR_RANGE.0, hi: TRAIN_SNR_RANGE.1 }
    }
}

impl SnrMode {
    /// The four levels of the VoiceBank+DEMAND training set.
    pub fn voicebank() -> Self {
        SnrMode::Discrete { levels: vec![0.0, 5.0, 10.0, 15.0] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SnrMode::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(()),
            SnrMode::Discrete { levels } if !levels.is_empty() && levels.iter().all(|v| v.is_finite()) => Ok(()),
            other => Err(Error::Config(format!("invalid SNR mode {other:?}"))),
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            SnrMode::Uniform { lo, hi } if lo == hi => *lo,
            SnrMode::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            SnrMode::Discrete { levels } => levels[rng.random_range(0..levels.len())],
        }
    }
}

impl MixSpec {
    /// `n` specs drawn from one seed, cycling through `kinds`.
    pub fn draw_many(seed: u64, n: usize, mode: &SnrMode, kinds: &[NoiseKind], duration_s: f64) -> Result<Vec<MixSpec>> {
        mode.validate()?;
        if kinds.is_empty() {
            return Err(Error::Config("no noise kinds to draw from".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|i| MixSpec {
                clean_seed: rng.random(),
                noise_seed: rng.random(),
                kind: kinds[i % kinds.len()],
                snr_db: mode.draw(&mut rng),
                duration_s,
            })
            .collect())
    }
}

/// A training example; `gain` is the factor both signals were scaled by to avoid clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub gain: f32,
}

/// `clean + g · noise` with `g` chosen so the clean-to-scaled-noise power ratio is `snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.len() != noise.len() {
        return Err(Error::Signal(format!("clean has {} samples, noise {}", clean.len(), noise.len())));
    }
    let power = |w: &Waveform| w.samples().iter().map(|&v| v as f64 * v as f64).sum::<f64>() / w.len().max(1) as f64;
    let (pc, pn) = (power(clean), power(noise));
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::Signal("cannot mix at an SNR with a zero-power signal".into()));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Waveform::from_samples(clean.samples().iter().zip(noise.samples()).map(|(&c, &n)| (c as f64 + g * n as f64) as f32).collect())
}

/// Synthesizes the pair; if the mixture would clip, both signals are scaled
/// so its peak is 0.99.
pub fn make_pair(spec: &MixSpec) -> Result<Pair> {
    let clean = synth_clean(spec.clean_seed, spec.duration_s)?;
    let noise = synth_noise(spec.noise_seed, spec.kind, spec.duration_s)?;
    let noisy = mix_at_snr(&clean, &noise, spec.snr_db)?;
    let peak = noisy.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak <= 1.0 {
        return Ok(Pair { clean, noisy, gain: 1.0 });
    }
    let gain = 0.99 / peak;
    let scale = |w: Waveform| Waveform::from_samples(w.into_samples().into_iter().map(|v| v * gain).collect());
    Ok(Pair { clean: scale(clean)?, noisy: scale(noisy)?, gain })
}

const MANIFEST_HEADER: &str = "# clean_seed noise_seed kind snr_db duration_s";

pub fn format_manifest(specs: &[MixSpec]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for m in specs {
        writeln!(s, "{} {} {} {} {}", m.clean_seed, m.noise_seed, m.kind, m.snr_db, m.duration_s).unwrap();
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<MixSpec>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Config(format!("manifest line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [clean, noise, kind, snr, dur] = fields[..] else {
            return Err(bad(&format!("expected 5 fields, found {}", fields.len())));
        };
        out.push(MixSpec {
            clean_seed: clean.parse().map_err(|_| bad("bad clean seed"))?,
            noise_seed: noise.parse().map_err(|_| bad("bad noise seed"))?,
            kind: kind.parse()?,
            snr_db: snr.parse().map_err(|_| bad("bad SNR"))?,
            duration_s: dur.parse().map_err(|_| bad("bad duration"))?,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, specs: &[MixSpec]) -> Result<()> {
    std::fs::write(path, format_manifest(specs)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<MixSpec>> {
    parse_manifest(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `manifest.txt` plus `clean/NNNN.wav` and `noisy/NNNN.wav` under `dir`.
pub fn write_corpus(dir: &Path, specs: &[MixSpec]) -> Result<()> {
    for sub in ["clean", "noisy"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, spec) in specs.iter().enumerate() {
        let pair = make_pair(spec)?;
        write_wav(&dir.join(format!("clean/{i:04}.wav")), &pair.clean)?;
        write_wav(&dir.join(format!("noisy/{i:04}.wav")), &pair.noisy)?;
    }
    write_manifest(&dir.join("manifest.txt"), specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_wav;

    fn w(v: &[f32]) -> Waveform {
        Waveform::from_samples(v.to_vec()).unwrap()
    }

    fn measured_snr(clean: &Waveform, noisy: &Waveform) -> f64 {
        let (mut pc, mut pn) = (0.0, 0.0);
        for (&c, &y) in clean.samples().iter().zip(noisy.samples()) {
            pc += c as f64 * c as f64;
            pn += (y as f64 - c as f64).powi(2);
        }
        10.0 * (pc / pn).log10()
    }

    #[test]
    fn equal_powers_at_zero_db_just_add() {
        let out = mix_at_snr(&w(&[1.0, 1.0, 1.0, 1.0]), &w(&[1.0, -1.0, 1.0, -1.0]), 0.0).unwrap();
        assert_eq!(out.samples(), [2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn high_snr_leaves_clean_nearly_untouched() {
        let clean = synth_clean(1, 0.5).unwrap();
        let noise = synth_noise(2, NoiseKind::White, 0.5).unwrap();
        let out = mix_at_snr(&clean, &noise, 60.0).unwrap();
        let diff: f64 = out.samples().iter().zip(clean.samples()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        let rms_diff = (diff / clean.len() as f64).sqrt();
        // the scaled noise has exactly a thousandth of the clean RMS
        assert!(rms_diff <= 1e-3 * clean.rms() * (1.0 + 1e-6), "{rms_diff}");
    }

    #[test]
    fn achieved_snr_matches_request() {
        let clean = synth_clean(3, 1.0).unwrap();
        for (kind, snr) in [(NoiseKind::White, -5.0), (NoiseKind::Pink, 7.3), (NoiseKind::Babble, 20.0)] {
            let noise = synth_noise(4, kind, 1.0).unwrap();
            let out = mix_at_snr(&clean, &noise, snr).unwrap();
            assert!((measured_snr(&clean, &out) - snr).abs() < 1e-6, "{kind}");
        }
    }

    #[test]
    fn zero_power_and_length_mismatch_fail() {
        assert!(mix_at_snr(&w(&[0.0; 4]), &w(&[1.0; 4]), 0.0).is_err());
        assert!(mix_at_snr(&w(&[1.0; 4]), &w(&[0.0; 4]), 0.0).is_err());
        assert!(mix_at_snr(&w(&[1.0; 4]), &w(&[1.0; 3]), 0.0).is_err());
    }

    #[test]
    fn discrete_levels_are_drawn_uniformly() {
        let mode = SnrMode::voicebank();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let v = mode.draw(&mut rng);
            counts[(v / 5.0) as usize] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 250.0).powi(2) / 250.0).sum();
        // 99.9th percentile of chi-square with 3 degrees of freedom
        assert!(chi2 < 16.27, "{counts:?}");
    }

    #[test]
    fn uniform_draws_stay_in_training_range() {
        let specs = MixSpec::draw_many(1, 500, &SnrMode::default(), &NoiseKind::ALL, 3.0).unwrap();
        assert!(specs.iter().all(|s| (-5.0..=20.0).contains(&s.snr_db)));
        assert_eq!(specs[4].kind, NoiseKind::Pink);
    }

    #[test]
    fn clipping_rescales_both_signals() {
        let spec = MixSpec { clean_seed: 1, noise_seed: 1, kind: NoiseKind::White, snr_db: -60.0, duration_s: 0.2 };
        let pair = make_pair(&spec).unwrap();
        assert!(pair.gain < 1.0);
        let peak = pair.noisy.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.99).abs() < 1e-6);
        assert!((pair.clean.rms() - 0.1 * pair.gain as f64).abs() < 1e-6);
    }

    #[test]
    fn manifest_reproduces_corpus() {
        let specs = MixSpec::draw_many(7, 3, &SnrMode::voicebank(), &NoiseKind::ALL, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &specs).unwrap();
        let back = read_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back, specs);
        let again = make_pair(&back[2]).unwrap();
        let stored = read_wav(&dir.path().join("noisy/0002.wav")).unwrap();
        let err = stored.samples().iter().zip(again.noisy.samples()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 32768.0);
        assert!(parse_manifest("1 2 white 5").is_err());
        assert!(parse_manifest("1 2 violet 5 3").is_err());
    }
}
