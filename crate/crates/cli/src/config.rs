//! Run configuration: one TOML file with flat sections, resolved against
//! command-line overrides before a run starts.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bitbench_core::binarize::{BinarizerKind, BinarizerSpec, Learnable};
use bitbench_core::nn::{Dataset, LayerDef, ModelConfig, Synthetic, TrainConfig};
use bitbench_core::probe::ProbeGrid;
use bitbench_core::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    TwoMoons,
    Blobs,
    Textures,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Required for `source = "csv"`: feature columns then an integer label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Points to generate.
    pub n: usize,
    /// two_moons / textures jitter.
    pub noise: f64,
    /// blobs only.
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    /// Defaults to the global seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::TwoMoons,
            path: None,
            n: 2000,
            noise: 0.15,
            classes: 2,
            dim: 2,
            spread: 0.5,
            seed: None,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<LayerDef>,
    pub first_last_full_precision: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![LayerDef::Linear { out: 64 }, LayerDef::Linear { out: 64 }],
            first_last_full_precision: true,
        }
    }
}

/// An algorithm id from the binarizer list, or `fp` for the full-precision twin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Fp,
    Bin(BinarizerKind),
}

impl Algorithm {
    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Fp => "fp",
            Algorithm::Bin(k) => k.id(),
        }
    }
}

pub fn parse_algorithm(s: &str) -> Result<Algorithm> {
    if s.eq_ignore_ascii_case("fp") || s.eq_ignore_ascii_case("fp32") {
        return Ok(Algorithm::Fp);
    }
    Ok(Algorithm::Bin(s.parse()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizerSection {
    pub algorithms: Vec<String>,
    pub tau: f64,
    pub fourier_terms: usize,
    pub omega: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learnable: Option<Learnable>,
}

impl Default for BinarizerSection {
    fn default() -> Self {
        let d = BinarizerSpec::new(BinarizerKind::Bnn);
        BinarizerSection {
            algorithms: BinarizerKind::ALL.iter().map(|k| k.id().to_owned()).collect(),
            tau: d.tau,
            fourier_terms: d.fourier_terms,
            omega: d.omega,
            learnable: None,
        }
    }
}

impl BinarizerSection {
    pub fn algorithms(&self) -> Result<Vec<Algorithm>> {
        if self.algorithms.is_empty() {
            bail!("binarizer.algorithms is empty");
        }
        self.algorithms
            .iter()
            .map(|a| parse_algorithm(a).with_context(|| "binarizer.algorithms"))
            .collect()
    }

    pub fn spec(&self, algo: Algorithm) -> Result<Option<BinarizerSpec>> {
        let Algorithm::Bin(kind) = algo else { return Ok(None) };
        let spec = BinarizerSpec {
            kind,
            tau: self.tau,
            fourier_terms: self.fourier_terms,
            omega: self.omega,
            learnable: self.learnable,
        };
        spec.validate().context("binarizer")?;
        Ok(Some(spec))
    }
}

/// Cartesian grid; an empty axis takes the `[training]` value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepSection {
    pub fn grid(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let lrs = or(&self.learning_rates, base.learning_rate);
        let eps = if self.epochs.is_empty() { vec![base.epochs] } else { self.epochs.clone() };
        let bss = if self.batch_sizes.is_empty() { vec![base.batch_size] } else { self.batch_sizes.clone() };
        let seeds = if self.seeds.is_empty() { vec![base.seed] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for &learning_rate in &lrs {
            for &epochs in &eps {
                for &batch_size in &bss {
                    for &seed in &seeds {
                        out.push(TrainConfig {
                            learning_rate,
                            epochs,
                            batch_size,
                            seed,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSection {
    pub severities: Vec<u8>,
    pub sigma_schedule: [f64; 5],
    /// Defaults to the global seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            severities: vec![1, 2, 3, 4, 5],
            sigma_schedule: bitbench_core::corrupt::DEFAULT_SIGMAS,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub warmup: usize,
    pub repetitions: usize,
    /// BBT1 operands; when both are set they replace the random shapes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<PathBuf>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let d = bitbench_core::bench::BenchConfig::default();
        BenchSection {
            sizes: d.sizes,
            m: d.m,
            k: d.k,
            warmup: d.warmup,
            repetitions: d.repetitions,
            a: None,
            w: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexitySection {
    /// ModelSpec TOML; the bundled ImageNet ResNet18 when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploySection {
    /// Capability and requirement TOML; the bundled profiles when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table1: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table2: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Relative paths are taken under `$BITBENCH_OUT` when it is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub binarizer: BinarizerSection,
    pub training: TrainConfig,
    pub sweep: SweepSection,
    pub corruption: CorruptionSection,
    pub probe: ProbeGrid,
    pub bench: BenchSection,
    pub complexity: ComplexitySection,
    pub deploy: DeploySection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            output: None,
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            binarizer: BinarizerSection::default(),
            training: TrainConfig::default(),
            sweep: SweepSection::default(),
            corruption: CorruptionSection::default(),
            probe: ProbeGrid::table7(16),
            bench: BenchSection::default(),
            complexity: ComplexitySection::default(),
            deploy: DeploySection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads a run config, or the `config` table of a manifest written by an
    /// earlier run. Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let table = match (table.get("tool"), table.get("config")) {
            (Some(_), Some(toml::Value::Table(c))) => c.clone(),
            _ => table,
        };
        let mut cfg: RunConfig = table.try_into().with_context(|| format!("parsing {}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.bench.a);
        fix(&mut self.bench.w);
        fix(&mut self.complexity.spec);
        fix(&mut self.deploy.data);
        fix(&mut self.metrics.table1);
        fix(&mut self.metrics.table2);
        fix(&mut self.metrics.corruption);
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// Train/test split of the configured dataset.
    pub fn load_dataset<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let d = &self.dataset;
        let seed = self.dataset_seed();
        let data = match d.source {
            DataSource::Csv => {
                let path = d
                    .path
                    .as_ref()
                    .ok_or_else(|| anyhow!("dataset.path is required when dataset.source = \"csv\""))?;
                if !path.is_file() {
                    bail!("dataset.path: {} does not exist", path.display());
                }
                Dataset::read_csv(path).with_context(|| format!("dataset.path: {}", path.display()))?
            }
            DataSource::TwoMoons => Synthetic::TwoMoons { noise: d.noise }.generate(d.n, seed)?,
            DataSource::Textures => Synthetic::Textures { noise: d.noise }.generate(d.n, seed)?,
            DataSource::Blobs => Synthetic::Blobs {
                classes: d.classes,
                dim: d.dim,
                spread: d.spread,
            }
            .generate(d.n, seed)?,
        };
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            bail!("dataset.train_fraction must lie in (0, 1), got {}", d.train_fraction);
        }
        Ok(data.split(d.train_fraction, seed)?)
    }

    pub fn model_config<T: Scalar>(&self, data: &Dataset<T>) -> ModelConfig {
        ModelConfig {
            input: data.sample_shape().to_vec(),
            hidden: self.model.hidden.clone(),
            classes: data.classes,
            first_last_full_precision: self.model.first_last_full_precision,
        }
    }
}
