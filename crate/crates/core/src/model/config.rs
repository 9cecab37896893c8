use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the domain label reaches the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Conditioning {
    /// Labels are ignored.
    None,
    /// A domain tag token is prepended to the source.
    TagPrefix,
    /// A learned per-domain vector is added to every encoder output row.
    /// During training a label is replaced by pad with `mask_probability`.
    AdditiveIntervention { mask_probability: f64 },
}

impl Conditioning {
    /// Short name used in file names and reports.
    pub fn short_name(&self) -> &'static str {
        match self {
            Conditioning::None => "base",
            Conditioning::TagPrefix => "tags",
            Conditioning::AdditiveIntervention { .. } => "ints",
        }
    }

    pub fn mask_probability(&self) -> f64 {
        match self {
            Conditioning::AdditiveIntervention { mask_probability } => *mask_probability,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 12/6 layers, d_model 1024, d_ff 4096, 8 heads.
    Full,
    /// 4/2 layers, d_model 64, d_ff 256, 4 heads.
    Desk,
    /// 2/1 layers, d_model 32, d_ff 64, 4 heads; the acceptance run of the regime matrix uses it.
    Small,
    /// 2/2 layers, d_model 8, d_ff 16, 2 heads; for gradient checks.
    Micro,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            "small" => Ok(Preset::Small),
            "micro" => Ok(Preset::Micro),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Applied to embeddings and residual branches only.
    pub dropout: f64,
    pub conditioning: Conditioning,
    /// Longest encoder input (tag included) or decoder input (bos included).
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_domains: usize,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, vocab_size: usize, num_domains: usize, conditioning: Conditioning) -> Self {
        let (enc_layers, dec_layers, heads, d_model, d_ff, max_len) = match preset {
            Preset::Full => (12, 6, 8, 1024, 4096, 256),
            Preset::Desk => (4, 2, 4, 64, 256, 64),
            Preset::Small => (2, 1, 4, 32, 64, 32),
            Preset::Micro => (2, 2, 2, 8, 16, 16),
        };
        ModelConfig {
            enc_layers,
            dec_layers,
            heads,
            d_model,
            d_ff,
            dropout: 0.1,
            conditioning,
            max_len,
            vocab_size,
            num_domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.d_model,
            self.d_ff,
            self.max_len,
        ]
        .contains(&0)
        {
            return bad("layer counts, heads, widths and max_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if let Conditioning::AdditiveIntervention { mask_probability } = self.conditioning {
            if !(0.0..=1.0).contains(&mask_probability) {
                return bad(format!("mask probability {mask_probability} not in [0, 1]"));
            }
        }
        if self.vocab_size < crate::data::vocab::FIRST_TAG_ID as usize + self.num_domains {
            return bad("vocabulary smaller than its reserved block".into());
        }
        Ok(())
    }
}
