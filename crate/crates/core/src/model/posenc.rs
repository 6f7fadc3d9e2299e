use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal 2-D positional code of shape `[T, F, channels]`.
///
/// The first half of the channels encodes the time index and the second half
/// the frequency index. Each half is `[sin(p·ω_0..), cos(p·ω_0..)]` with
/// `ω_i = 10000^(-i / (channels/4))`.
pub fn posenc_2d(frames: usize, bins: usize, channels: usize) -> Result<Tensor<f32>> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Config(format!("positional channels {channels} must be a positive multiple of 4")));
    }
    let q = channels / 4;
    let omega: Vec<f64> = (0..q).map(|i| 10_000f64.powf(-(i as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(frames * bins * channels);
    for t in 0..frames {
        for f in 0..bins {
            for pos in [t as f64, f as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin() as f32));
                data.extend(omega.iter().map(|w| (pos * w).cos() as f32));
            }
        }
    }
    Tensor::new([frames, bins, channels], data)
}
