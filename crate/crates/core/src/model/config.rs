use crate::attention::AttentionKind;
use crate::connectors::{ConnectorConfig, ConnectorMode, DilationSchedule};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The eight named method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantPreset {
    Informer,
    #[serde(rename = "Informer+")]
    InformerPlus,
    #[serde(rename = "TCCT_I")]
    TcctI,
    #[serde(rename = "TCCT_II")]
    TcctII,
    #[serde(rename = "TCCT_III")]
    TcctIII,
    #[serde(rename = "TCCT_IV")]
    TcctIV,
    #[serde(rename = "TCCT_V")]
    TcctV,
    #[serde(rename = "TCCT_VI")]
    TcctVI,
}

impl VariantPreset {
    pub const ALL: [VariantPreset; 8] = [
        VariantPreset::Informer,
        VariantPreset::InformerPlus,
        VariantPreset::TcctI,
        VariantPreset::TcctII,
        VariantPreset::TcctIII,
        VariantPreset::TcctIV,
        VariantPreset::TcctV,
        VariantPreset::TcctVI,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantPreset::Informer => "Informer",
            VariantPreset::InformerPlus => "Informer+",
            VariantPreset::TcctI => "TCCT_I",
            VariantPreset::TcctII => "TCCT_II",
            VariantPreset::TcctIII => "TCCT_III",
            VariantPreset::TcctIV => "TCCT_IV",
            VariantPreset::TcctV => "TCCT_V",
            VariantPreset::TcctVI => "TCCT_VI",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let base = VariantFlags::default();
        match self {
            VariantPreset::Informer => base,
            VariantPreset::InformerPlus => VariantFlags {
                full_distilling: true,
                ..base
            },
            VariantPreset::TcctI => VariantFlags { csp: true, ..base },
            VariantPreset::TcctII => VariantFlags {
                csp: true,
                dilated: true,
                ..base
            },
            VariantPreset::TcctIII => VariantFlags {
                csp: true,
                dilated: true,
                passthrough: true,
                ..base
            },
            VariantPreset::TcctIV => VariantFlags {
                dilated: true,
                ..base
            },
            VariantPreset::TcctV => VariantFlags {
                passthrough: true,
                ..base
            },
            VariantPreset::TcctVI => VariantFlags {
                dilated: true,
                passthrough: true,
                ..base
            },
        }
    }
}

impl fmt::Display for VariantPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        VariantPreset::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_uppercase() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    VariantPreset::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub csp: bool,
    pub dilated: bool,
    pub passthrough: bool,
    pub full_distilling: bool,
    pub inner: AttentionKind,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            csp: false,
            dilated: false,
            passthrough: false,
            full_distilling: false,
            inner: AttentionKind::ProbSparse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_len: usize,
    pub pred_len: usize,
    pub token_len: usize,
    pub n_series: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_layers: usize,
    pub flags: VariantFlags,
    pub feedforward_dim: usize,
    pub seed: u64,
    pub sampling_factor: f64,
    pub kernel: usize,
    pub schedule: DilationSchedule,
    /// Pre-norm residual connections around every sub-layer.
    pub residual: bool,
    pub positional: bool,
    /// Number of calendar features projected into the embedding (0 = off).
    pub time_marks: usize,
    pub attention_bias: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for `preset`; the start token spans the whole input.
    pub fn new(preset: VariantPreset, input_len: usize, pred_len: usize, n_series: usize) -> Self {
        let d_model = 16;
        ModelConfig {
            input_len,
            pred_len,
            token_len: input_len,
            n_series,
            d_model,
            heads: 2,
            enc_blocks: 3,
            dec_layers: 2,
            flags: preset.flags(),
            feedforward_dim: 4 * d_model,
            seed: 0,
            sampling_factor: 5.0,
            kernel: 3,
            schedule: DilationSchedule::PowerOfTwo,
            residual: true,
            positional: true,
            time_marks: 0,
            attention_bias: false,
        }
    }

    pub fn with_dims(mut self, d_model: usize, heads: usize) -> Self {
        self.d_model = d_model;
        self.heads = heads;
        self.feedforward_dim = 4 * d_model;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn connector(&self) -> ConnectorConfig {
        ConnectorConfig {
            kernel: self.kernel,
            mode: if self.flags.dilated {
                ConnectorMode::DilatedCausal
            } else {
                ConnectorMode::CanonicalConv
            },
            schedule: self.schedule,
        }
    }

    /// Length of every encoder output path.
    pub fn encoder_out_len(&self) -> usize {
        self.input_len >> (self.enc_blocks.saturating_sub(1))
    }

    pub fn decoder_len(&self) -> usize {
        self.token_len + self.pred_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_len == 0 || self.pred_len == 0 || self.n_series == 0 {
            return fail("input_len, pred_len and n_series must be positive".into());
        }
        if self.enc_blocks == 0 || self.dec_layers == 0 {
            return fail("enc_blocks and dec_layers must be positive".into());
        }
        if self.token_len > self.input_len {
            return fail(format!(
                "token_len {} exceeds input_len {}",
                self.token_len, self.input_len
            ));
        }
        let block = 1usize << (self.enc_blocks - 1);
        if self.input_len % block != 0 {
            return fail(format!(
                "input_len {} not divisible by 2^{} required by {} encoder blocks",
                self.input_len,
                self.enc_blocks - 1,
                self.enc_blocks
            ));
        }
        if self.flags.passthrough && self.flags.full_distilling {
            return fail("passthrough and full distilling are mutually exclusive".into());
        }
        if self.flags.full_distilling && self.enc_blocks < 2 {
            return fail("full distilling needs at least two encoder blocks".into());
        }
        if self.feedforward_dim == 0 {
            return fail("feedforward_dim must be positive".into());
        }
        Ok(())
    }
}
