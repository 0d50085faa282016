//! Experiment configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::StreamConfig;
use crate::trainer::{Method, MethodConfig};

/// Update-step grid shared by `Δ_C` and `Δ_M`.
pub const DEFAULT_DELTAS: [usize; 6] = [1, 2, 4, 6, 8, 10];
/// Memory-size grid `N`.
pub const DEFAULT_MEMORY_SIZES: [usize; 5] = [8, 16, 32, 64, 128];
/// Fixed gate-memory capacities `P` for the ablation.
pub const DEFAULT_GATE_CAPACITIES: [usize; 6] = [4, 20, 32, 64, 80, 128];

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "DG_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Sets `Δ_C = Δ_M`.
    Delta,
    /// Memory capacity `N`.
    Memory,
    /// Fixed gate-memory capacity `P`; gating methods only.
    Gate,
}

/// Grids for each axis. Only axes listed in `vary` are crossed; the others
/// keep the value from each method's own configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub vary: Vec<Axis>,
    pub deltas: Vec<usize>,
    pub memory_sizes: Vec<usize>,
    pub gate_capacities: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            vary: vec![Axis::Delta],
            deltas: DEFAULT_DELTAS.to_vec(),
            memory_sizes: DEFAULT_MEMORY_SIZES.to_vec(),
            gate_capacities: DEFAULT_GATE_CAPACITIES.to_vec(),
        }
    }
}

impl SweepConfig {
    pub fn varies(&self, axis: Axis) -> bool {
        self.vary.contains(&axis)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Synthetic stream; used when no manifest is given.
    #[serde(default)]
    pub stream: Option<StreamConfig>,
    /// Manifest of an externally produced stream, relative to the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads for grid points; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
}

fn default_methods() -> Vec<MethodConfig> {
    Method::ALL
        .into_iter()
        .map(MethodConfig::with_method)
        .collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            stream: None,
            manifest: None,
            methods: default_methods(),
            sweep: SweepConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output(),
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative manifest and output paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = cfg.manifest.take() {
            cfg.manifest = Some(base.join(m));
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stream.is_some() && self.manifest.is_some() {
            return bad("give either [stream] or manifest, not both".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let s = &self.sweep;
        for (axis, grid) in [
            (Axis::Delta, &s.deltas),
            (Axis::Memory, &s.memory_sizes),
            (Axis::Gate, &s.gate_capacities),
        ] {
            if s.varies(axis) && (grid.is_empty() || grid.contains(&0)) {
                return bad(format!(
                    "sweep grid for {axis:?} must be nonempty and positive"
                ));
            }
        }
        if let Some(stream) = &self.stream {
            stream
                .validate()
                .map_err(|e| Error::Config(format!("stream: {e}")))?;
        }
        for m in &self.methods {
            m.validate()
                .map_err(|e| Error::Config(format!("method {}: {e}", m.method)))?;
        }
        Ok(())
    }

    /// Seeds after applying the [`SEED_ENV`] override, if set.
    pub fn effective_seeds(&self) -> Result<Vec<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => parse_seed_list(&v),
            Err(_) => Ok(self.seeds.clone()),
        }
    }
}

/// Parses `"3"` or `"1,2,5"`.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: `{s}` is not a seed")))
        })
        .collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("{SEED_ENV} is empty")));
    }
    Ok(seeds)
}
