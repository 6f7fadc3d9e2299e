//! Recorded attention weights from one forward pass.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    /// Time-global branch: tokens along time, full frequency resolution.
    Time,
    /// Frequency-global branch: tokens along frequency, full time resolution.
    Freq,
}

impl BranchKind {
    pub fn label(self) -> &'static str {
        match self {
            BranchKind::Time => "t",
            BranchKind::Freq => "f",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttnKind {
    InCa,
    OutCa,
    SelfAttn,
}

/// Where an attention call sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttnSite {
    pub block: usize,
    pub branch: BranchKind,
    pub kind: AttnKind,
}

/// Softmax weights of one attention call, laid out `[groups, heads, queries, keys]`.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub site: AttnSite,
    pub groups: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    /// Largest `|Σ row - 1|` over all rows.
    pub fn max_row_error(&self) -> f64 {
        self.weights
            .chunks_exact(self.keys)
            .map(|row| (row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn at(&self, g: usize, h: usize, q: usize, k: usize) -> f32 {
        self.weights[((g * self.heads + h) * self.queries + q) * self.keys + k]
    }
}

/// Everything recorded during one forward pass of a `batch × frames × bins` input.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub batch: usize,
    pub frames: usize,
    pub bins: usize,
    pub records: Vec<AttentionRecord>,
}

/// Head-averaged In-CA weights of one global token as a `frames × bins` grid.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub block: usize,
    pub branch: BranchKind,
    pub token: usize,
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames × bins`.
    pub values: Vec<f32>,
}

impl AttentionCapture {
    pub fn new(batch: usize, frames: usize, bins: usize) -> Self {
        AttentionCapture { batch, frames, bins, records: Vec::new() }
    }

    pub fn max_row_error(&self) -> f64 {
        self.records.iter().map(AttentionRecord::max_row_error).fold(0.0, f64::max)
    }

    pub fn rows(&self) -> usize {
        self.records.iter().map(|r| r.weights.len() / r.keys).sum()
    }

    /// One map per (block, branch, token) for batch item `item`.
    ///
    /// For the time branch each map column (fixed bin) is one softmax row over
    /// frames; for the frequency branch each map row is a softmax over bins.
    pub fn in_ca_maps(&self, item: usize) -> Result<Vec<SaliencyMap>> {
        if item >= self.batch {
            return Err(Error::Config(format!("batch item {item} out of {}", self.batch)));
        }
        let (nt, nf) = (self.frames, self.bins);
        let mut maps = Vec::new();
        for r in self.records.iter().filter(|r| r.site.kind == AttnKind::InCa) {
            let inv_h = 1.0 / r.heads as f32;
            for token in 0..r.queries {
                let mut values = vec![0.0f32; nt * nf];
                for t in 0..nt {
                    for f in 0..nf {
                        // time branch groups by bin and attends over frames; frequency branch the reverse
                        let (g, k) = match r.site.branch {
                            BranchKind::Time => (item * nf + f, t),
                            BranchKind::Freq => (item * nt + t, f),
                        };
                        values[t * nf + f] = (0..r.heads).map(|h| r.at(g, h, token, k)).sum::<f32>() * inv_h;
                    }
                }
                maps.push(SaliencyMap { block: r.site.block, branch: r.site.branch, token, frames: nt, bins: nf, values });
            }
        }
        Ok(maps)
    }
}

impl SaliencyMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 10);
        for row in self.values.chunks_exact(self.bins) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.7e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit PGM, min-max scaled, one pixel per cell.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.bins, self.frames).into_bytes();
        out.extend(self.values.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8));
        out
    }

    pub fn file_stem(&self) -> String {
        format!("block{}_{}_token{:02}", self.block, self.branch.label(), self.token)
    }
}
