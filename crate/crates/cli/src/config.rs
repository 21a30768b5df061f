//! Run configuration: a JSON document overlaid by command-line flags,
//! resolved into a complete, validated [`RunConfig`] that is echoed to the
//! output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mvsde::sde::InitSampler;
use mvsde::{BuiltinModel, Scheme, StudyConfig, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Interacting and decoupled particle systems on shared noise
    Simulate,
    /// Picard iteration for the limiting measure flow
    Picard,
    /// Propagation-of-chaos gap against N
    Poc,
    /// Variational Malliavin derivative against the Wiener-shift oracle
    MalliavinCheck,
    /// Off-diagonal and diagonal derivative statistics against N
    CrossDecay,
    /// Particle-averaged derivative statistic against N
    Psi,
    /// Particle derivative against the limit-equation derivative
    Diagonal,
    /// Moment statistics against the second moment of the initial law
    Moments,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Picard => "picard",
            Command::Poc => "poc",
            Command::MalliavinCheck => "malliavin-check",
            Command::CrossDecay => "cross-decay",
            Command::Psi => "psi",
            Command::Diagonal => "diagonal",
            Command::Moments => "moments",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Model name plus parameters, written flat: `{"name": "DoubleWell", "kappa": 0.5}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

fn default_params(name: &str) -> Option<&'static [(&'static str, f64)]> {
    match name {
        "MeanFieldOU" => Some(&[("a", 1.0), ("kappa", 0.5), ("sigma0", 0.3)]),
        "DoubleWell" => Some(&[("kappa", 0.5), ("sigma0", 0.3)]),
        "ScalarStateDiffusion" => Some(&[("a", 1.0), ("kappa", 0.5), ("sigma1", 0.2), ("sigma2", 0.1)]),
        _ => None,
    }
}

impl ModelSpec {
    /// `NAME` or `NAME:k=v,k=v`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = BTreeMap::new();
        for kv in rest.split(',').filter(|kv| !kv.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("model parameter \"{kv}\" is not of the form key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("model parameter \"{}\" is not a number: \"{v}\"", k.trim())))?;
            params.insert(k.trim().to_string(), v);
        }
        Ok(Self {
            name: name.trim().to_string(),
            params,
        })
    }

    /// Fills unspecified parameters from the model's defaults and rejects
    /// names the model does not take.
    fn complete(&self) -> Result<Self, CliError> {
        let defaults = default_params(&self.name).ok_or_else(|| {
            CliError::config(format!(
                "unknown model \"{}\"; available models: {}",
                self.name,
                BuiltinModel::<f64>::NAMES.join(", ")
            ))
        })?;
        if let Some(k) = self.params.keys().find(|k| !defaults.iter().any(|(d, _)| d == k)) {
            let names: Vec<&str> = defaults.iter().map(|(d, _)| *d).collect();
            return Err(CliError::config(format!(
                "unknown key \"model.{k}\"; {} takes {}",
                self.name,
                names.join(", ")
            )));
        }
        let mut params: BTreeMap<String, f64> = defaults.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        params.extend(self.params.iter().map(|(k, v)| (k.clone(), *v)));
        Ok(Self {
            name: self.name.clone(),
            params,
        })
    }

    pub fn build(&self) -> Result<BuiltinModel<f64>, CliError> {
        for (k, v) in &self.params {
            if !v.is_finite() {
                return Err(CliError::config(format!("\"model.{k}\" must be finite, got {v}")));
            }
            if (k == "sigma0" || k == "sigma1") && *v < 0.0 {
                return Err(CliError::config(format!("\"model.{k}\" must be nonnegative, got {v}")));
            }
        }
        BuiltinModel::from_params(&self.name, |k| self.params.get(k).copied()).map_err(CliError::from_core_config)
    }
}

/// What a config file may contain. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub command: Option<Command>,
    pub model: Option<ModelSpec>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub steps: Option<usize>,
    pub dt: Option<f64>,
    pub n_list: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub particles: Option<usize>,
    pub samples: Option<usize>,
    pub reference_samples: Option<usize>,
    pub seed: Option<u64>,
    pub scheme: Option<Scheme>,
    pub init: Option<InitSampler>,
    pub picard_tol: Option<f64>,
    pub picard_max_iter: Option<usize>,
    pub s_nodes: Option<usize>,
    pub source_particle: Option<usize>,
    pub target_particle: Option<usize>,
    pub slope_window: Option<[f64; 2]>,
    pub ratio_limit: Option<f64>,
    pub decreasing_fraction: Option<f64>,
    pub variance_factors: Option<Vec<f64>>,
    pub growth_limit: Option<f64>,
    pub oracle_paths: Option<usize>,
    pub epsilon: Option<f64>,
    pub oracle_tolerance: Option<f64>,
    pub outdir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        // serde_json reports line and column, and names unknown keys
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved configuration; this is what `config.json` records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelSpec,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    pub n_list: Vec<usize>,
    pub reps: usize,
    /// Particle count of `simulate`.
    pub particles: usize,
    /// Sample count of `picard` and `malliavin-check` flows.
    pub samples: usize,
    pub reference_samples: Option<usize>,
    pub seed: u64,
    pub scheme: Option<Scheme>,
    pub init: InitSampler,
    pub picard_tol: Option<f64>,
    pub picard_max_iter: usize,
    pub s_nodes: usize,
    pub source_particle: usize,
    pub target_particle: usize,
    pub slope_window: [f64; 2],
    pub ratio_limit: f64,
    pub decreasing_fraction: f64,
    pub variance_factors: Vec<f64>,
    pub growth_limit: f64,
    pub oracle_paths: usize,
    pub epsilon: f64,
    pub oracle_tolerance: f64,
    pub outdir: PathBuf,
    pub threads: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 42;
const DEFAULT_DT: f64 = 1e-3;

impl RunConfig {
    fn defaults(command: Command) -> Self {
        let base = StudyConfig::<f64>::new(BuiltinModel::MeanFieldOU {
            a: 1.0,
            kappa: 0.5,
            sigma0: 0.3,
        });
        let init = match command {
            // doubling E|ξ|² is only meaningful for a centred law
            Command::Moments => InitSampler::Gaussian { mean: 0.0, std: 1.0 },
            _ => base.init,
        };
        // at R = 16 the slope interval of the gap is about ±0.5 wide, and
        // an 8·N_max-sample reference flow leaves a visible bias floor
        let (reps, reference_samples) = match command {
            Command::Poc => (64, Some(32768)),
            _ => (base.reps, None),
        };
        Self {
            command,
            model: ModelSpec::parse("MeanFieldOU").expect("literal"),
            horizon: 1.0,
            steps: 1000,
            n_list: base.n_list,
            reps,
            particles: 256,
            samples: 4096,
            reference_samples,
            seed: DEFAULT_SEED,
            scheme: None,
            init,
            picard_tol: None,
            picard_max_iter: base.picard_max_iter,
            s_nodes: base.s_nodes,
            source_particle: base.source_particle,
            target_particle: base.target_particle,
            slope_window: base.slope_window,
            ratio_limit: base.ratio_limit,
            decreasing_fraction: base.decreasing_fraction,
            variance_factors: base.variance_factors,
            growth_limit: base.growth_limit,
            oracle_paths: 100,
            epsilon: 1e-4,
            oracle_tolerance: 1e-3,
            outdir: PathBuf::from("results"),
            threads: None,
        }
    }

    /// Defaults, then the file, then flags (passed as a second `FileConfig`).
    pub fn resolve(command: Command, file: FileConfig, flags: FileConfig) -> Result<Self, CliError> {
        if let Some(c) = file.command {
            if c != command {
                return Err(CliError::config(format!(
                    "config file is for command \"{c}\" but \"{command}\" was requested"
                )));
            }
        }
        let mut cfg = Self::defaults(command);
        let mut steps = None;
        let mut dt = None;
        for layer in [file, flags] {
            macro_rules! take {
                ($($field:ident),*) => {
                    $(if let Some(v) = layer.$field { cfg.$field = v; })*
                };
            }
            macro_rules! take_opt {
                ($($field:ident),*) => {
                    $(if let Some(v) = layer.$field { cfg.$field = Some(v); })*
                };
            }
            take!(
                model,
                horizon,
                n_list,
                reps,
                particles,
                samples,
                seed,
                init,
                picard_max_iter,
                s_nodes,
                source_particle,
                target_particle,
                slope_window,
                ratio_limit,
                decreasing_fraction,
                variance_factors,
                growth_limit,
                oracle_paths,
                epsilon,
                oracle_tolerance,
                outdir
            );
            take_opt!(reference_samples, scheme, picard_tol, threads);
            // a later layer's dt or steps replaces both from earlier layers
            if layer.steps.is_some() || layer.dt.is_some() {
                steps = layer.steps;
                dt = layer.dt;
            }
        }
        cfg.model = cfg.model.complete()?;
        cfg.steps = match (steps, dt) {
            (Some(_), Some(_)) => {
                return Err(CliError::config("give either \"steps\" or \"dt\", not both"));
            }
            (Some(s), None) => s,
            (None, dt) => {
                let dt = dt.unwrap_or(DEFAULT_DT);
                if !(dt > 0.0 && dt.is_finite()) {
                    return Err(CliError::config(format!("\"dt\" must be positive, got {dt}")));
                }
                if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
                    return Err(CliError::config(format!("\"T\" must be positive, got {}", cfg.horizon)));
                }
                (cfg.horizon / dt).round() as usize
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: String| Err(CliError::config(format!("\"{key}\" {why}")));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("T", format!("must be positive, got {}", self.horizon));
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1, got 0".into());
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n < 2) {
            return bad(
                "n_list",
                format!("must be non-empty with every N ≥ 2, got {:?}", self.n_list),
            );
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_list", format!("must be strictly increasing, got {:?}", self.n_list));
        }
        if self.reps < 4 {
            return bad("reps", format!("must be at least 4, got {}", self.reps));
        }
        if self.particles == 0 {
            return bad("particles", "must be at least 1".into());
        }
        if self.samples < 2 {
            return bad("samples", format!("must be at least 2, got {}", self.samples));
        }
        if self.reference_samples.is_some_and(|m| m < 2) {
            return bad("reference_samples", "must be at least 2".into());
        }
        if let Err(e) = self.init.validate() {
            return bad("init", e.to_string());
        }
        if self.picard_tol.is_some_and(|t| !(t > 0.0)) {
            return bad("picard_tol", "must be positive".into());
        }
        if self.picard_max_iter == 0 {
            return bad("picard_max_iter", "must be at least 1".into());
        }
        if self.s_nodes == 0 || self.s_nodes > self.steps {
            return bad(
                "s_nodes",
                format!("must lie in 1..={}, got {}", self.steps, self.s_nodes),
            );
        }
        if self.source_particle == self.target_particle {
            return bad("target_particle", "must differ from source_particle".into());
        }
        for (key, p) in [
            ("source_particle", self.source_particle),
            ("target_particle", self.target_particle),
        ] {
            if p >= self.n_list[0] {
                return bad(
                    key,
                    format!("must be below the smallest N ({}), got {p}", self.n_list[0]),
                );
            }
        }
        if !(self.slope_window[0] < self.slope_window[1]) {
            return bad(
                "slope_window",
                format!("must be an increasing pair, got {:?}", self.slope_window),
            );
        }
        if !(self.ratio_limit >= 1.0) {
            return bad("ratio_limit", format!("must be at least 1, got {}", self.ratio_limit));
        }
        if !(0.0..=1.0).contains(&self.decreasing_fraction) {
            return bad(
                "decreasing_fraction",
                format!("must lie in [0, 1], got {}", self.decreasing_fraction),
            );
        }
        if self.variance_factors.len() < 2 || self.variance_factors.iter().any(|&f| !(f > 0.0)) {
            return bad("variance_factors", "needs at least two positive factors".into());
        }
        if !(self.growth_limit > 0.0) {
            return bad("growth_limit", "must be positive".into());
        }
        if self.oracle_paths == 0 {
            return bad("oracle_paths", "must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive".into());
        }
        if !(self.oracle_tolerance > 0.0) {
            return bad("oracle_tolerance", "must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads", "must be at least 1".into());
        }
        self.model.build()?;
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid<f64> {
        TimeGrid::new(self.horizon, self.steps).expect("validated grid")
    }

    pub fn model(&self) -> BuiltinModel<f64> {
        self.model.build().expect("validated model")
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
            .unwrap_or_else(|| Scheme::for_regularity(mvsde::Model::regularity(&self.model())))
    }

    pub fn study(&self) -> StudyConfig<f64> {
        StudyConfig {
            model: self.model(),
            n_list: self.n_list.clone(),
            reps: self.reps,
            grid: self.grid(),
            s_nodes: self.s_nodes,
            seed: self.seed,
            scheme: self.scheme,
            init: self.init,
            reference_samples: self.reference_samples,
            picard_tol: self.picard_tol,
            picard_max_iter: self.picard_max_iter,
            source_particle: self.source_particle,
            target_particle: self.target_particle,
            slope_window: self.slope_window,
            ratio_limit: self.ratio_limit,
            decreasing_fraction: self.decreasing_fraction,
            variance_factors: self.variance_factors.clone(),
            growth_limit: self.growth_limit,
        }
    }
}
