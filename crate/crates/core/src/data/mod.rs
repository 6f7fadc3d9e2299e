//! Synthetic speech and noise, SNR mixing, manifests and WAV files.

mod corpus;
mod synth;
mod wav;

pub use corpus::{format_manifest, make_pair, mix_at_snr, parse_manifest, read_manifest, write_corpus, write_manifest, MixSpec, Pair, SnrMode, TRAIN_SNR_RANGE};
pub use synth::{synth_clean, synth_clean_with, synth_noise, CleanOptions, NoiseKind, TARGET_RMS};
pub use wav::{read_wav, write_wav};
