//! Experiment configuration: an optional JSON file layered under command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;

use sddjd::experiment::{parse_algorithms, thirteen_matrix_deltas, Algorithm, Design, ExperimentSpec};
use sddjd::matrixset::ner_to_delta;
use sddjd::{SolverConfig, SynthSpec};

/// Invalid flags or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

const DEFAULT_M: usize = 6;
const DEFAULT_N: usize = 6;
const DEFAULT_K: usize = 20;
const DEFAULT_DELTA: f64 = 0.01;
const DEFAULT_OUTLIER_FRACTION: f64 = 0.2;
const DEFAULT_TRIALS: usize = 20;

/// Flags shared by every subcommand. Unset flags fall back to the config file,
/// then to built-in defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// Sensor dimension M.
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Number of sources N.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Number of target matrices K.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Noise-to-error ratio in dB; comma list for a sweep grid or per-matrix levels.
    #[arg(long, value_delimiter = ',', conflicts_with = "delta", allow_negative_numbers = true)]
    pub ner: Option<Vec<f64>>,
    /// Noise level δ; comma list for per-matrix levels or a trajectory design.
    #[arg(long, value_delimiter = ',')]
    pub delta: Option<Vec<f64>>,
    /// Fraction of matrices replaced by outliers; comma list for an outlier sweep grid.
    #[arg(long = "outlier-frac", value_delimiter = ',')]
    pub outlier_frac: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma list drawn from {sddjd, ls}.
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "t-max")]
    pub t_max: Option<usize>,
    /// Mixing-matrix updates per outer iteration.
    #[arg(long = "inner-a")]
    pub inner_a: Option<usize>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON experiment description; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseDoc {
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub noise_levels: Option<Vec<f64>>,
    pub outlier_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverDoc {
    pub epsilon: Option<f64>,
    pub t_max: Option<usize>,
    pub inner_a_updates: Option<usize>,
}

/// On-disk form of an experiment description. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub design: Option<String>,
    pub grid: Option<Vec<f64>>,
    pub trials: Option<usize>,
    #[serde(default)]
    pub base: BaseDoc,
    #[serde(default)]
    pub solver: SolverDoc,
    pub algorithms: Option<Vec<String>>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl ConfigDoc {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str(&text) {
            Ok(doc) => Ok(doc),
            Err(e) => usage(format!("config {}: {e}", path.display())),
        }
    }
}

/// Fully resolved command inputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: ExperimentSpec,
    pub out: Option<PathBuf>,
}

fn single(name: &str, values: &[f64]) -> Result<f64> {
    match values {
        [v] => Ok(*v),
        _ => usage(format!("--{name} takes a single value here, got {}", values.len())),
    }
}

impl CommonArgs {
    fn noise_levels(&self) -> Option<Vec<f64>> {
        match (&self.delta, &self.ner) {
            (Some(d), _) => Some(d.clone()),
            (None, Some(ner)) => Some(ner.iter().map(|&x| ner_to_delta(x)).collect()),
            (None, None) => None,
        }
    }

    /// Resolves flags over the config file. `design` is fixed by the subcommand
    /// when given; otherwise it comes from the config, defaulting to `single`.
    pub fn resolve(&self, design: Option<Design>) -> Result<Resolved> {
        let doc = match &self.config {
            Some(path) => ConfigDoc::load(path)?,
            None => ConfigDoc::default(),
        };
        let design = match (design, &doc.design) {
            (Some(d), _) => d,
            (None, Some(name)) => match name.parse() {
                Ok(d) => d,
                Err(e) => return usage(format!("config design: {e}")),
            },
            (None, None) => Design::Single,
        };

        let mut noise = self.noise_levels().or(doc.base.noise_levels.clone());
        let mut fraction = match &self.outlier_frac {
            Some(v) if design != Design::OutlierSweep => Some(single("outlier-frac", v)?),
            _ => doc.base.outlier_fraction,
        };
        let flag_grid = match design {
            Design::NerSweep => {
                let g = self.ner.clone();
                if g.is_some() {
                    noise = doc.base.noise_levels.clone();
                } else if self.delta.is_some() {
                    return usage("ner_sweep takes its grid from --ner, not --delta");
                }
                g
            }
            Design::OutlierSweep => self.outlier_frac.clone(),
            Design::Trajectory => self.noise_levels(),
            Design::Single => None,
        };
        let grid = match (flag_grid, doc.grid) {
            (Some(g), _) | (None, Some(g)) => g,
            (None, None) => match design {
                Design::Trajectory => thirteen_matrix_deltas(),
                Design::Single => vec![0.0],
                Design::NerSweep => return usage("ner_sweep needs a grid: --ner 10,20,30,40"),
                Design::OutlierSweep => return usage("outlier_sweep needs a grid: --outlier-frac 0,0.1,0.2"),
            },
        };
        if design == Design::OutlierSweep {
            fraction = None;
        }

        let mut k = self.k.or(doc.base.k).unwrap_or(DEFAULT_K);
        if design == Design::Trajectory {
            if self.k.is_some_and(|k| k != grid.len()) {
                return usage(format!("--K {} disagrees with {} trajectory noise levels", k, grid.len()));
            }
            k = grid.len();
            noise = None;
        }
        let base = SynthSpec {
            m: self.m.or(doc.base.m).unwrap_or(DEFAULT_M),
            n: self.n.or(doc.base.n).unwrap_or(DEFAULT_N),
            k,
            noise_levels: noise.unwrap_or_else(|| vec![DEFAULT_DELTA]),
            outlier_fraction: fraction.unwrap_or(DEFAULT_OUTLIER_FRACTION),
            seed: 0,
        };

        let defaults = SolverConfig::default();
        let solver = SolverConfig {
            epsilon: self.epsilon.or(doc.solver.epsilon).unwrap_or(defaults.epsilon),
            t_max: self.t_max.or(doc.solver.t_max).unwrap_or(defaults.t_max),
            inner_a_updates: self.inner_a.or(doc.solver.inner_a_updates).unwrap_or(defaults.inner_a_updates),
            ..defaults
        };

        let algorithms = match (&self.algo, &doc.algorithms) {
            (Some(list), _) => parse_algorithms(list)?,
            (None, Some(names)) => parse_algorithms(&names.join(","))?,
            (None, None) => vec![Algorithm::Sddjd, Algorithm::Ls],
        };

        let spec = ExperimentSpec {
            design,
            grid,
            trials: self.trials.or(doc.trials).unwrap_or(DEFAULT_TRIALS),
            base,
            solver,
            algorithms,
            seed: self.seed.or(doc.seed).unwrap_or(0),
        };
        Ok(Resolved {
            spec,
            out: self.out.clone().or(doc.output),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults() {
        let r = CommonArgs::default().resolve(None).unwrap();
        assert_eq!(r.spec.design, Design::Single);
        assert_eq!((r.spec.base.m, r.spec.base.n, r.spec.base.k), (6, 6, 20));
        assert_eq!(r.spec.base.noise_levels, vec![0.01]);
        assert_eq!(r.spec.base.outlier_fraction, 0.2);
        assert_eq!(r.spec.trials, 20);
        assert_eq!(r.spec.algorithms, vec![Algorithm::Sddjd, Algorithm::Ls]);
        assert_eq!(r.spec.solver, SolverConfig::default());
    }

    #[test]
    fn sweep_grids_come_from_the_swept_flag() {
        let args = CommonArgs {
            ner: Some(vec![10.0, 20.0]),
            ..Default::default()
        };
        let r = args.resolve(Some(Design::NerSweep)).unwrap();
        assert_eq!(r.spec.grid, vec![10.0, 20.0]);
        assert_eq!(r.spec.base.noise_levels, vec![0.01]);

        let args = CommonArgs {
            outlier_frac: Some(vec![0.0, 0.5]),
            ..Default::default()
        };
        assert_eq!(args.resolve(Some(Design::OutlierSweep)).unwrap().spec.grid, vec![0.0, 0.5]);
        assert!(CommonArgs::default().resolve(Some(Design::NerSweep)).is_err());
    }

    #[test]
    fn trajectory_sets_k_from_the_noise_vector() {
        let r = CommonArgs::default().resolve(Some(Design::Trajectory)).unwrap();
        assert_eq!(r.spec.base.k, 13);
        assert_eq!(r.spec.grid, thirteen_matrix_deltas());
        let clash = CommonArgs {
            k: Some(5),
            delta: Some(vec![0.1, 0.2]),
            ..Default::default()
        };
        assert!(clash.resolve(Some(Design::Trajectory)).is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(
            file,
            r#"{{"design":"outlier_sweep","grid":[0.1,0.3],"trials":3,"base":{{"M":5,"N":4,"K":8}},
                "solver":{{"epsilon":1e-6}},"algorithms":["ls"],"seed":9}}"#
        )
        .unwrap();
        let args = CommonArgs {
            config: Some(file.path().to_path_buf()),
            m: Some(7),
            seed: Some(11),
            ..Default::default()
        };
        let r = args.resolve(None).unwrap();
        assert_eq!(r.spec.design, Design::OutlierSweep);
        assert_eq!(r.spec.grid, vec![0.1, 0.3]);
        assert_eq!((r.spec.base.m, r.spec.base.n, r.spec.base.k), (7, 4, 8));
        assert_eq!(r.spec.trials, 3);
        assert_eq!(r.spec.solver.epsilon, 1e-6);
        assert_eq!(r.spec.algorithms, vec![Algorithm::Ls]);
        assert_eq!(r.spec.seed, 11);
    }

    #[test]
    fn unknown_config_fields_are_usage_errors() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, r#"{{"trails":3}}"#).unwrap();
        let args = CommonArgs {
            config: Some(file.path().to_path_buf()),
            ..Default::default()
        };
        let err = args.resolve(None).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
