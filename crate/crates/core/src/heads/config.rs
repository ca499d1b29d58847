use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Prediction-head architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Weighted average of layers, temporal global pooling.
    WaTgp,
    /// Weighted average of layers, temporal transformer.
    WaTt,
    /// Temporal transformer, then a layer-wise transformer.
    Dt,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::WaTgp, Arch::WaTt, Arch::Dt];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::WaTgp => "wa-tgp",
            Arch::WaTt => "wa-tt",
            Arch::Dt => "dt",
        }
    }

    pub fn uses_temporal_transformer(self) -> bool {
        !matches!(self, Arch::WaTgp)
    }

    pub fn uses_weighted_fusion(self) -> bool {
        !matches!(self, Arch::Dt)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "wa-tgp" => Ok(Arch::WaTgp),
            "wa-tt" => Ok(Arch::WaTt),
            "dt" => Ok(Arch::Dt),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Which encoder layers a head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerMode {
    Single(usize),
    All,
}

impl LayerMode {
    pub fn layers(self, total: usize) -> Vec<usize> {
        match self {
            LayerMode::Single(k) => vec![k],
            LayerMode::All => (0..total).collect(),
        }
    }
}

impl fmt::Display for LayerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerMode::Single(k) => write!(f, "layer-{k}"),
            LayerMode::All => f.write_str("all"),
        }
    }
}

impl FromStr for LayerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerMode::All);
        }
        let digits = s.strip_prefix("layer-").unwrap_or(s);
        digits
            .parse()
            .map(LayerMode::Single)
            .map_err(|_| Error::Config(format!("layer mode must be \"all\" or a layer index, got {s:?}")))
    }
}

impl Serialize for LayerMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const DIM_GRID: [usize; 4] = [192, 384, 768, 1536];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub arch: Arch,
    pub layer_mode: LayerMode,
    pub embed_dim: usize,
    pub pool_factor: usize,
    pub depth: usize,
    pub heads: usize,
    /// Add sinusoidal positions before each transformer.
    #[serde(default)]
    pub positional: bool,
    pub seed: u64,
}

impl HeadConfig {
    pub fn new(arch: Arch, layer_mode: LayerMode, embed_dim: usize) -> Self {
        Self {
            arch,
            layer_mode,
            embed_dim,
            pool_factor: 20,
            depth: 2,
            heads: 4,
            positional: false,
            seed: 17,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks against an encoder with `layers` layers.
    pub fn validate(&self, layers: usize) -> Result<()> {
        if let LayerMode::Single(k) = self.layer_mode {
            if k >= layers {
                return Err(Error::Config(format!(
                    "layer {k} out of range for an encoder with {layers} layers"
                )));
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.pool_factor == 0 {
            return Err(Error::Config("pool factor must be at least 1".into()));
        }
        if self.arch.uses_temporal_transformer() {
            if self.depth == 0 {
                return Err(Error::Config("transformer depth must be at least 1".into()));
            }
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "embedding dimension {} must be a multiple of {} heads",
                    self.embed_dim, self.heads
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for a in Arch::ALL {
            assert_eq!(a.as_str().parse::<Arch>().unwrap(), a);
        }
        assert_eq!("WA_TGP".parse::<Arch>().unwrap(), Arch::WaTgp);
        assert_eq!("all".parse::<LayerMode>().unwrap(), LayerMode::All);
        assert_eq!("7".parse::<LayerMode>().unwrap(), LayerMode::Single(7));
        assert_eq!("layer-3".parse::<LayerMode>().unwrap(), LayerMode::Single(3));
        assert!("x".parse::<LayerMode>().is_err());
        let json = serde_json::to_string(&HeadConfig::new(Arch::Dt, LayerMode::Single(2), 8)).unwrap();
        assert!(json.contains("\"layer-2\"") && json.contains("\"dt\""));
    }

    #[test]
    fn validation() {
        let c = HeadConfig::new(Arch::WaTgp, LayerMode::Single(4), 16);
        assert!(c.validate(4).is_err());
        assert!(c.validate(5).is_ok());
        let c = HeadConfig::new(Arch::Dt, LayerMode::All, 10);
        assert!(c.validate(3).is_err());
        // WA-TGP has no attention, so head count is irrelevant
        let c = HeadConfig::new(Arch::WaTgp, LayerMode::All, 10);
        assert!(c.validate(3).is_ok());
    }
}
