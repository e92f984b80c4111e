//! Run configuration file (TOML). Every section falls back to defaults, so a
//! file only needs the keys it changes.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amp::AmpConfig;
use crate::error::{Error, Result};
use crate::policy::Fusion;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub iterations: usize,
    pub fusion: Fusion,
    pub n_experts: usize,
    /// Train base and residual together from a random initialization.
    pub one_stage: bool,
    /// Zero the height-scan inputs after normalization, in both stages.
    pub blind: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iterations: 200,
            fusion: Fusion::Latent,
            n_experts: 3,
            one_stage: false,
            blind: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteEntry {
    pub obstacle: crate::env::TerrainKind,
    pub mode: crate::env::BenchmarkMode,
    pub trials: usize,
    pub seed_base: u64,
}

impl Default for SuiteEntry {
    fn default() -> Self {
        Self {
            obstacle: crate::env::TerrainKind::Gap,
            mode: crate::env::BenchmarkMode::Easy,
            trials: 200,
            seed_base: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub suite: Vec<SuiteEntry>,
    pub timeout: f64,
    pub goal: f64,
    pub lin_vel: f64,
    /// Gaits evaluated; each gets its own row per suite entry.
    pub gaits: Vec<usize>,
    /// Mean-action policy.
    pub deterministic: bool,
    /// Write one trace file per trial next to the report.
    pub traces: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        use crate::env::{BenchmarkMode::*, TerrainKind::*};
        let suite = [Gap, Step, Stair]
            .into_iter()
            .flat_map(|o| {
                [Easy, Hard].into_iter().map(move |m| SuiteEntry {
                    obstacle: o,
                    mode: m,
                    ..SuiteEntry::default()
                })
            })
            .collect();
        Self {
            suite,
            timeout: 40.0,
            goal: 14.0,
            lin_vel: 0.6,
            gaits: vec![0],
            deterministic: true,
            traces: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    /// Control steps sampled per gait.
    pub samples_per_gait: usize,
    /// Steps between recorded samples.
    pub stride: usize,
    pub lin_vel: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            samples_per_gait: 300,
            stride: 5,
            lin_vel: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: u32,
    pub train: TrainConfig,
    pub amp: AmpConfig,
    pub stage2: Stage2Config,
    pub bench: BenchConfig,
    pub latents: LatentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            train: TrainConfig::default(),
            amp: AmpConfig::default(),
            stage2: Stage2Config::default(),
            bench: BenchConfig::default(),
            latents: LatentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        if cfg.format_version != CONFIG_VERSION {
            return Err(Error::FormatVersion {
                found: cfg.format_version,
                expected: CONFIG_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.stage2.n_experts == 0 {
            return Err(Error::InvalidArgument("stage2.n_experts must be at least 1".into()));
        }
        if self.bench.suite.iter().any(|s| s.trials == 0) {
            return Err(Error::InvalidArgument("every benchmark suite entry needs at least one trial".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    More2,
    More3,
    More4,
    MoreA,
    MoreOs,
    Blind,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::More2,
        Ablation::More3,
        Ablation::More4,
        Ablation::MoreA,
        Ablation::MoreOs,
        Ablation::Blind,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::More2 => "more2",
            Ablation::More3 => "more3",
            Ablation::More4 => "more4",
            Ablation::MoreA => "more-a",
            Ablation::MoreOs => "more-os",
            Ablation::Blind => "blind",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::More2 => cfg.stage2.n_experts = 2,
            Ablation::More3 => cfg.stage2.n_experts = 3,
            Ablation::More4 => cfg.stage2.n_experts = 4,
            Ablation::MoreA => cfg.stage2.fusion = Fusion::Action,
            Ablation::MoreOs => cfg.stage2.one_stage = true,
            Ablation::Blind => cfg.stage2.blind = true,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("[stage2]\nn_experts = 4\n").unwrap();
        assert_eq!(cfg.stage2.n_experts, 4);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn version_checked() {
        assert!(matches!(
            RunConfig::from_toml("format_version = 7\n"),
            Err(Error::FormatVersion { found: 7, .. })
        ));
    }

    #[test]
    fn ablations_touch_only_their_field() {
        let base = RunConfig::default();
        for a in Ablation::ALL {
            let mut cfg = base.clone();
            a.apply(&mut cfg);
            assert_eq!(cfg.train, base.train);
            assert_eq!(cfg.amp, base.amp);
            assert_eq!(cfg.bench, base.bench);
            let mut s = cfg.stage2.clone();
            s.n_experts = base.stage2.n_experts;
            s.fusion = base.stage2.fusion;
            s.one_stage = base.stage2.one_stage;
            s.blind = base.stage2.blind;
            assert_eq!(s, base.stage2);
        }
    }
}
