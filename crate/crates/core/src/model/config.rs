use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_heads() -> usize {
    4
}

fn default_lambda() -> f64 {
    1.1
}

fn default_eta() -> f64 {
    0.3
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Number of MTS-DR blocks (`M`).
    pub blocks: usize,
    /// Base channel count `C`; reduced blocks carry `C/2`.
    pub channels: usize,
    /// Fraction of spatial elements kept by the reducing MTS layer (`CR`).
    pub compress_ratio: f64,
    /// Window sizes of every MTS layer, in input pixels.
    pub window_scales: Vec<usize>,
    /// Summation terms per GTS (`T`).
    pub terms: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Refinement widths per scale; `[C, 2C, 4C]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement_channels: Option<[usize; 3]>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

impl NetworkConfig {
    /// The four published variants, `variant` in `1..=4`.
    pub fn paper_preset(variant: usize) -> Result<Self> {
        let (blocks, channels) = match variant {
            1 => (2, 32),
            2 => (4, 32),
            3 => (2, 16),
            4 => (4, 16),
            _ => return Err(Error::Config(format!("no preset MTS-DR-{variant}"))),
        };
        Ok(Self {
            name: Some(format!("MTS-DR-{variant}")),
            blocks,
            channels,
            compress_ratio: 0.4,
            window_scales: vec![8, 16, 32, 64],
            terms: 3,
            heads: default_heads(),
            refinement_channels: None,
            lambda: default_lambda(),
            eta: default_eta(),
        })
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / 2
    }

    pub fn refinement_plan(&self) -> [usize; 3] {
        self.refinement_channels.unwrap_or([
            self.channels,
            2 * self.channels,
            4 * self.channels,
        ])
    }

    /// `(w, w')` per window scale.
    pub fn window_pairs(&self) -> Vec<(usize, usize)> {
        self.window_scales
            .iter()
            .map(|&w| (w, crate::mts::reduced_window(w, self.compress_ratio)))
            .collect()
    }

    /// Multiple that input extents are padded to at the network entry.
    pub fn pad_multiple(&self) -> usize {
        let w = self.window_scales.iter().copied().max().unwrap_or(1);
        lcm(4, w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return bad(format!("channels must be even and >= 2, got {}", self.channels));
        }
        if !(self.compress_ratio > 0.0 && self.compress_ratio <= 1.0) {
            return bad(format!("compress_ratio must lie in (0, 1], got {}", self.compress_ratio));
        }
        if self.window_scales.is_empty() {
            return bad("window_scales must not be empty".into());
        }
        for (i, &w) in self.window_scales.iter().enumerate() {
            if w < 2 || self.window_scales[..i].contains(&w) {
                return bad(format!(
                    "window scales must be distinct and >= 2, got {:?}",
                    self.window_scales
                ));
            }
        }
        if self.terms == 0 {
            return bad("terms must be at least 1".into());
        }
        if self.heads == 0 || !self.reduced_channels().is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide the reduced channel count {}",
                self.heads,
                self.reduced_channels()
            ));
        }
        if self.refinement_plan().iter().any(|&c| c < 2) {
            return bad(format!("refinement channels must be >= 2, got {:?}", self.refinement_plan()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
