use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::StftConfig;

/// Attention head counts per attention kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heads {
    pub t_sa: usize,
    pub f_sa: usize,
    pub in_ca: usize,
    pub out_ca: usize,
}

impl Default for Heads {
    fn default() -> Self {
        Heads { t_sa: 2, f_sa: 2, in_ca: 3, out_ca: 3 }
    }
}

impl Heads {
    pub fn uniform(h: usize) -> Self {
        Heads { t_sa: h, f_sa: h, in_ca: h, out_ca: h }
    }
}

/// Which companion branch writes back into the main stream first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutCaOrder {
    #[default]
    TimeFirst,
    FreqFirst,
}

/// Every architectural hyper-parameter of the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Main-branch depthwise kernel `K` (odd).
    pub kernel: usize,
    /// Time-global tokens `M_T`.
    pub tokens_t: usize,
    /// Frequency-global tokens `M_F`.
    pub tokens_f: usize,
    /// Trident blocks `L`.
    pub blocks: usize,
    /// Decoder Conv-FFN blocks `L_d`.
    pub decoder_blocks: usize,
    pub heads: Heads,
    pub ffn_hidden: usize,
    pub posenc_channels: usize,
    pub out_ca_order: OutCaOrder,
    /// Magnitude compression applied to the encoder input.
    pub input_power: f64,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::medium()
    }
}

impl ModelConfig {
    fn base(blocks: usize, decoder_blocks: usize, tokens: usize) -> Self {
        ModelConfig {
            channels: 96,
            kernel: 7,
            tokens_t: tokens,
            tokens_f: tokens,
            blocks,
            decoder_blocks,
            heads: Heads::default(),
            ffn_hidden: 96,
            posenc_channels: 64,
            out_ca_order: OutCaOrder::TimeFirst,
            input_power: 0.3,
            stft: StftConfig::default(),
        }
    }

    /// `L = L_d = 2`.
    pub fn small() -> Self {
        Self::base(2, 2, 16)
    }

    /// `L = 3`, `L_d = 4`.
    pub fn medium() -> Self {
        Self::base(3, 4, 16)
    }

    /// `L = 7`, `L_d = 8`.
    pub fn large() -> Self {
        Self::base(7, 8, 16)
    }

    /// Companion branches removed, depth raised to `L = L_d = 6`.
    pub fn g1() -> Self {
        Self::base(6, 6, 0)
    }

    /// Desk-scale configuration used by the smoke run.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 16,
            kernel: 3,
            tokens_t: 4,
            tokens_f: 4,
            blocks: 1,
            decoder_blocks: 1,
            heads: Heads::uniform(2),
            ffn_hidden: 32,
            posenc_channels: 16,
            ..Self::medium()
        }
    }

    #[cfg(test)]
    pub(crate) fn g1_like_tiny() -> Self {
        ModelConfig { tokens_t: 0, tokens_f: 0, blocks: 2, decoder_blocks: 2, ..Self::tiny() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "S" | "small" => Ok(Self::small()),
            "M" | "medium" => Ok(Self::medium()),
            "L" | "large" => Ok(Self::large()),
            "G1" | "g1" => Ok(Self::g1()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Unknown { what: "model preset", name: name.into() }),
        }
    }

    pub fn has_branches(&self) -> bool {
        self.tokens_t > 0 || self.tokens_f > 0
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.ffn_hidden == 0 {
            return err("channels and ffn_hidden must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return err(format!("kernel {} must be odd", self.kernel));
        }
        let h = self.heads;
        for (name, n, used) in [
            ("t_sa", h.t_sa, self.tokens_f > 0),
            ("f_sa", h.f_sa, self.tokens_t > 0),
            ("in_ca", h.in_ca, self.has_branches()),
            ("out_ca", h.out_ca, self.has_branches()),
        ] {
            if used && (n == 0 || self.channels % n != 0) {
                return err(format!("{name} heads {n} do not divide channels {}", self.channels));
            }
        }
        if self.has_branches() && (self.posenc_channels == 0 || self.posenc_channels % 4 != 0) {
            return err(format!("posenc_channels {} must be a positive multiple of 4", self.posenc_channels));
        }
        if !(self.input_power > 0.0 && self.input_power <= 1.0) {
            return err(format!("input_power {} outside (0, 1]", self.input_power));
        }
        self.stft.validate()
    }
}
