//! Analytic parameter and operation counts.

use super::config::ModelConfig;
use crate::signal::SAMPLE_RATE;

/// Counts for one forward pass over a single `frames × bins` spectrogram.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    /// Learnable scalars.
    pub params: u64,
    /// MACs in convolutions and linear layers.
    pub layer_macs: u64,
    /// MACs in attention score and aggregation products.
    pub attention_macs: u64,
    /// Elements passing through normalizations, activations, softmaxes and residual sums.
    pub elementwise: u64,
}

impl CostBreakdown {
    /// Layer MACs, the figure comparable with published model tables.
    pub fn reported_flops(&self) -> u64 {
        self.layer_macs
    }

    /// Two FLOPs per MAC including attention products, plus one per element-wise op.
    pub fn full_flops(&self) -> u64 {
        2 * (self.layer_macs + self.attention_macs) + self.elementwise
    }

    fn linear(&mut self, n_in: usize, n_out: usize, rows: usize) {
        self.params += (n_in * n_out + n_out) as u64;
        self.layer_macs += (rows * n_in * n_out) as u64;
    }

    fn layer_norm(&mut self, c: usize, rows: usize) {
        self.params += 2 * c as u64;
        // residual sum and normalization
        self.elementwise += 2 * (rows * c) as u64;
    }

    fn elementwise(&mut self, n: usize) {
        self.elementwise += n as u64;
    }

    /// Projections, both products and softmax for `groups` independent calls.
    #[allow(clippy::too_many_arguments)]
    fn attention(&mut self, q_dim: usize, kv_dim: usize, c: usize, groups: usize, nq: usize, nk: usize) {
        self.linear(q_dim, c, groups * nq);
        self.linear(kv_dim, c, groups * nk);
        self.linear(kv_dim, c, groups * nk);
        self.linear(c, c, groups * nq);
        self.attention_macs += 2 * (groups * nq * nk * c) as u64;
        self.elementwise(groups * nq * nk);
    }

    fn conv_ffn(&mut self, c: usize, hidden: usize, k: usize, rows: usize) {
        self.params += (k * k * c + c) as u64;
        self.layer_macs += (rows * k * k * c) as u64;
        self.linear(c, hidden, rows);
        self.linear(hidden, c, rows);
        self.elementwise(rows * (2 * c + hidden));
        self.layer_norm(c, rows);
    }

    fn ffn(&mut self, c: usize, hidden: usize, rows: usize) {
        self.linear(c, hidden, rows);
        self.linear(hidden, c, rows);
        self.elementwise(rows * hidden);
        self.layer_norm(c, rows);
    }

    /// One companion branch with `m` tokens over a kept axis of length `a`
    /// and a summarized axis of length `n`.
    fn branch(&mut self, cfg: &ModelConfig, m: usize, a: usize, n: usize) {
        let (c, p, h) = (cfg.channels, cfg.posenc_channels, cfg.ffn_hidden);
        let tokens = m * a;
        self.attention(c, c + p, c, a, m, n);
        self.layer_norm(c, tokens);
        for _ in 0..3 {
            self.ffn(c, h, tokens);
        }
        self.linear(m, 2 * m, a * c);
        self.linear(2 * m, m, a * c);
        self.elementwise(2 * tokens * c);
        self.layer_norm(c, tokens);
        self.attention(c, c, c, m, a, a);
        self.layer_norm(c, tokens);
        self.attention(c + p, c, c, a, n, m);
        self.layer_norm(c, a * n);
    }
}

/// Frames covering `seconds` of audio under the configured framing.
pub fn frames_for_seconds(cfg: &ModelConfig, seconds: f64) -> usize {
    cfg.stft.frames((seconds * SAMPLE_RATE as f64).round() as usize)
}

/// Full count for a `frames × bins` input.
pub fn cost_breakdown(cfg: &ModelConfig, frames: usize, bins: usize) -> CostBreakdown {
    let mut k = CostBreakdown::default();
    let (c, h) = (cfg.channels, cfg.ffn_hidden);
    let tf = frames * bins;

    k.params += (7 * 2 * c + c + 7 * c * c + c + 4 * c) as u64;
    k.layer_macs += (tf * (7 * 2 * c + 7 * c * c)) as u64;
    k.elementwise(4 * tf * c);

    if cfg.blocks > 0 {
        k.params += ((cfg.tokens_t + cfg.tokens_f) * c) as u64;
    }
    for _ in 0..cfg.blocks {
        k.conv_ffn(c, h, cfg.kernel, tf);
        if cfg.tokens_t > 0 {
            k.branch(cfg, cfg.tokens_t, bins, frames);
        }
        if cfg.tokens_f > 0 {
            k.branch(cfg, cfg.tokens_f, frames, bins);
        }
    }

    k.linear(c, c, tf);
    k.linear(c, c, tf);
    k.elementwise(2 * tf * c);
    for _ in 0..cfg.decoder_blocks {
        k.conv_ffn(c, h, cfg.kernel, tf);
    }
    k.linear(c, 2, tf);
    k.elementwise(2 * tf);
    k
}

/// Exact number of learnable scalars.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    cost_breakdown(cfg, 1, 1).params
}

/// Layer MACs for an input of `input_seconds`.
///
/// Published model tables count one multiply-accumulate as one operation and
/// leave out attention products; this follows that convention so results are
/// directly comparable. [`CostBreakdown::full_flops`] gives the complete count.
pub fn estimate_flops(cfg: &ModelConfig, input_seconds: f64) -> u64 {
    cost_breakdown(cfg, frames_for_seconds(cfg, input_seconds), cfg.stft.bins()).reported_flops()
}
