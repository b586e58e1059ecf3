//! Gaussian-noise corruption at five severities, and the robustness run that
//! feeds the corruption gap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{corruption_gap, GapTask};
use crate::nn::{evaluate, Dataset, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Noise std per severity as a fraction of the input range.
pub const DEFAULT_SIGMAS: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
}

/// Declared value range of a dataset's inputs; corrupted values are clamped
/// back into it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRange {
    pub lo: f64,
    pub hi: f64,
}

impl InputRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::param(format!("input range [{lo}, {hi}]")));
        }
        Ok(InputRange { lo, hi })
    }

    /// Observed min and max of `x`.
    pub fn of<T: Scalar>(x: &Tensor<T>) -> Result<Self> {
        let v = x.data().iter().filter_map(|v| v.to_f64());
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        Self::new(lo, hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn default_kind() -> CorruptionKind {
    CorruptionKind::GaussianNoise
}

fn default_sigmas() -> [f64; 5] {
    DEFAULT_SIGMAS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    #[serde(default = "default_kind")]
    pub kind: CorruptionKind,
    /// 1 to 5.
    pub severity: u8,
    #[serde(default = "default_sigmas")]
    pub sigma_schedule: [f64; 5],
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(severity: u8, seed: u64) -> Self {
        CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity,
            sigma_schedule: DEFAULT_SIGMAS,
            seed,
        }
    }

    /// Severities 1 to 5 with a shared seed.
    pub fn all_severities(seed: u64) -> Vec<Self> {
        (1..=5).map(|s| Self::new(s, seed)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::param(format!("severity must lie in 1..=5, got {}", self.severity)));
        }
        let s = &self.sigma_schedule;
        if !(s[0] > 0.0 && s.windows(2).all(|w| w[1] > w[0]) && s[4].is_finite()) {
            return Err(Error::param(format!("sigma schedule must be positive and strictly increasing: {s:?}")));
        }
        Ok(())
    }

    /// Schedule entry for this severity (a fraction of the input range).
    pub fn sigma_fraction(&self) -> f64 {
        self.sigma_schedule[usize::from(self.severity.clamp(1, 5)) - 1]
    }
}

/// `x + N(0, sigma^2)` with `sigma = sigma_fraction * range.width()`,
/// clamped into `range`.
pub fn apply<T: Scalar>(x: &Tensor<T>, spec: &CorruptionSpec, range: InputRange) -> Result<Tensor<T>> {
    spec.validate()?;
    apply_sigma(x, spec.sigma_fraction() * range.width(), spec.seed, range)
}

/// [`apply`] with an absolute noise std; `sigma = 0` returns `x` unchanged.
pub fn apply_sigma<T: Scalar>(x: &Tensor<T>, sigma: f64, seed: u64, range: InputRange) -> Result<Tensor<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("noise std {sigma}")));
    }
    x.ensure_finite()?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (T::lit(range.lo), T::lit(range.hi));
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v + T::lit(noise.sample(&mut rng))).max(lo).min(hi);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityResult {
    pub severity: u8,
    /// Absolute noise std.
    pub sigma: f64,
    pub accuracy: f64,
    /// Clean minus corrupted accuracy.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub severities: Vec<SeverityResult>,
}

impl RobustnessReport {
    pub fn gaps(&self) -> Vec<f64> {
        self.severities.iter().map(|s| s.gap).collect()
    }

    /// Pairs a full-precision and a binarized run over the same specs.
    pub fn gap_task(name: &str, fp: &RobustnessReport, bi: &RobustnessReport) -> Result<GapTask> {
        if fp.severities.len() != bi.severities.len() {
            return Err(Error::shape("full-precision and binarized runs cover different severities"));
        }
        Ok(GapTask {
            name: name.to_string(),
            fp_gaps: fp.gaps(),
            bi_gaps: bi.gaps(),
        })
    }
}

/// Packed-path accuracy on `clean` and on each corrupted copy, evaluated in
/// parallel across specs.
pub fn robustness_run<T: Scalar>(
    model: &Model<T>,
    clean: &Dataset<T>,
    specs: &[CorruptionSpec],
    range: InputRange,
) -> Result<RobustnessReport> {
    if clean.is_empty() {
        return Err(Error::Empty("clean evaluation set"));
    }
    let clean_accuracy = evaluate(model, clean)?;
    let severities = specs
        .par_iter()
        .map(|spec| {
            let x = apply(&clean.x, spec, range)?;
            let corrupted = Dataset {
                x,
                y: clean.y.clone(),
                classes: clean.classes,
            };
            let accuracy = evaluate(model, &corrupted)?;
            Ok(SeverityResult {
                severity: spec.severity,
                sigma: spec.sigma_fraction() * range.width(),
                accuracy,
                gap: corruption_gap(clean_accuracy, accuracy),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport {
        clean_accuracy,
        severities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, Synthetic};
    use proptest::prelude::*;

    fn range() -> InputRange {
        InputRange::new(-1e9, 1e9).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = Tensor::from_fn(vec![4, 5], |k| k as f64 * 0.1);
        assert_eq!(apply_sigma(&x, 0.0, 3, range()).unwrap(), x);
    }

    #[test]
    fn seeded() {
        let x = Tensor::<f32>::zeros(vec![10, 10]);
        let s = CorruptionSpec::new(3, 8);
        let r = InputRange::new(-1.0, 1.0).unwrap();
        assert_eq!(apply(&x, &s, r).unwrap(), apply(&x, &s, r).unwrap());
        assert_ne!(apply(&x, &s, r).unwrap(), apply(&x, &CorruptionSpec::new(3, 9), r).unwrap());
    }

    #[test]
    fn empirical_std_matches_sigma() {
        let x = Tensor::<f64>::zeros(vec![100_000]);
        for sigma in [0.05, 0.3, 2.0] {
            let y = apply_sigma(&x, sigma, 17, range()).unwrap();
            let n = y.len() as f64;
            let mean = y.data().iter().sum::<f64>() / n;
            let sd = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((sd / sigma - 1.0).abs() < 0.05, "{sd} vs {sigma}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let x = Tensor::<f64>::zeros(vec![3]);
        let r = InputRange::new(0.0, 1.0).unwrap();
        for sev in [0, 6] {
            assert!(apply(&x, &CorruptionSpec::new(sev, 0), r).is_err());
        }
        let mut s = CorruptionSpec::new(2, 0);
        s.sigma_schedule = [0.1, 0.1, 0.2, 0.3, 0.4];
        assert!(apply(&x, &s, r).is_err());
        assert!(InputRange::new(1.0, 1.0).is_err());
        let s: CorruptionSpec = toml::from_str("severity = 4").unwrap();
        assert_eq!(s.sigma_fraction(), 0.2);
    }

    #[test]
    fn tiny_sigma_keeps_clean_accuracy() {
        let d: Dataset<f32> = Synthetic::Blobs {
            classes: 2,
            dim: 4,
            spread: 0.2,
        }
        .generate(200, 1)
        .unwrap();
        let m = Model::new(&ModelConfig::mlp(4, &[8], 2), None, 0).unwrap();
        let mut spec = CorruptionSpec::new(1, 0);
        spec.sigma_schedule = [1e-12, 0.1, 0.2, 0.3, 0.4];
        let r = robustness_run(&m, &d, &[spec], InputRange::of(&d.x).unwrap()).unwrap();
        assert_eq!(r.severities[0].accuracy, r.clean_accuracy);
        assert_eq!(r.gaps(), vec![0.0]);
    }

    #[test]
    fn constant_model_has_zero_gap() {
        let d: Dataset<f64> = Synthetic::TwoMoons { noise: 0.1 }.generate(100, 2).unwrap();
        let mut m = Model::new(&ModelConfig::mlp(2, &[], 2), None, 0).unwrap();
        m.blocks[0].weight = Tensor::zeros(vec![2, 2]);
        let r = robustness_run(&m, &d, &CorruptionSpec::all_severities(4), InputRange::of(&d.x).unwrap()).unwrap();
        assert!(r.gaps().iter().all(|&g| g == 0.0));
        let t = RobustnessReport::gap_task("noise", &r, &r).unwrap();
        assert_eq!(t.fp_gaps, vec![0.0; 5]);
    }

    proptest! {
        #[test]
        fn clamped_into_range(seed in any::<u64>(), sev in 1u8..=5) {
            let x = Tensor::from_fn(vec![64], |k| (k as f64 / 63.0) * 2.0 - 1.0);
            let r = InputRange::new(-1.0, 1.0).unwrap();
            let y = apply(&x, &CorruptionSpec::new(sev, seed), r).unwrap();
            prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
