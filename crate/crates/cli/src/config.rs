//! Flat key=value run configuration with section prefixes.
//!
//! Example:
//!
//! ```text
//! # texture run
//! train.lr=1e-3
//! train.epochs=4
//! data.name=2spirals
//! data.n=10000
//! solver.atol=1e-5
//! out.dir=runs/spirals
//! ```
//!
//! Unknown keys are rejected; command-line flags override file values.

use crate::CliError;
use grassflow::data::{parse_source, DatasetSpec, SourceKind};
use grassflow::flow::{SolverConfig, SolverMethod};
use grassflow::train::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
    /// Validation/test sample counts for generated data.
    pub n_val: usize,
    pub n_test: usize,
    /// Split fractions for CSV data.
    pub split: (f64, f64, f64),
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::textures(),
            data: DatasetSpec::texture(grassflow::data::TextureKind::TwoSpirals, 10_000, 1),
            n_val: 500,
            n_test: 500,
            split: (0.8, 0.1, 0.1),
            out_dir: "runs/default".into(),
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, CliError> {
    v.split(',')
        .map(|p| parse_val::<usize>(key, p.trim()))
        .collect()
}

fn parse_fracs(key: &str, v: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| parse_val::<f64>(key, p.trim()))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(CliError::Usage(format!(
            "config key `{key}` needs three comma-separated fractions"
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

impl RunConfig {
    /// Loads a key=value file over the defaults, rejecting unknown keys.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {} line {}: expected key=value, got `{line}`",
                    path.display(),
                    idx + 1
                ))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut unknown = Vec::new();
        for (key, v) in &map {
            match key.as_str() {
                "train.lr" => cfg.train.lr = parse_val(key, v)?,
                "train.beta1" => cfg.train.beta1 = parse_val(key, v)?,
                "train.beta2" => cfg.train.beta2 = parse_val(key, v)?,
                "train.weight_decay" => cfg.train.weight_decay = parse_val(key, v)?,
                "train.epochs" => cfg.train.epochs = parse_val(key, v)?,
                "train.batch_size" => cfg.train.batch_size = parse_val(key, v)?,
                "train.lr_step_epoch" => cfg.train.lr_step_epoch = parse_val(key, v)?,
                "train.lr_step_factor" => cfg.train.lr_step_factor = parse_val(key, v)?,
                "train.seed" => cfg.train.seed = parse_val(key, v)?,
                "train.dt" => cfg.train.train_dt = parse_val(key, v)?,
                "train.integration_time" => cfg.train.integration_time = parse_val(key, v)?,
                "train.train_integration_time" => {
                    cfg.train.train_integration_time = parse_val(key, v)?
                }
                "train.eval_every" => cfg.train.eval_every = parse_val(key, v)?,
                "train.threads" => cfg.train.threads = parse_val(key, v)?,
                "train.widths" => cfg.train.widths = parse_list(key, v)?,
                "prior.sigma" => cfg.train.prior_sigma = parse_val(key, v)?,
                "prior.col_sigma" => cfg.train.prior_col_sigma = Some(parse_val(key, v)?),
                "solver.method" => {
                    cfg.train.solver.method = parse_method(v)?;
                }
                "solver.atol" => cfg.train.solver.atol = parse_val(key, v)?,
                "solver.rtol" => cfg.train.solver.rtol = parse_val(key, v)?,
                "solver.t0" => cfg.train.solver.t0 = parse_val(key, v)?,
                "solver.t1" => cfg.train.solver.t1 = parse_val(key, v)?,
                "solver.max_steps" => cfg.train.solver.max_steps = parse_val(key, v)?,
                "solver.fixed_dt" => cfg.train.solver.fixed_dt = parse_val(key, v)?,
                "data.name" => {
                    cfg.data.source =
                        parse_source(v).map_err(|e| CliError::Usage(e.to_string()))?
                }
                "data.n" => cfg.data.n = parse_val(key, v)?,
                "data.n_val" => cfg.n_val = parse_val(key, v)?,
                "data.n_test" => cfg.n_test = parse_val(key, v)?,
                "data.seed" => cfg.data.seed = parse_val(key, v)?,
                "data.path" => cfg.data.path = Some(v.clone()),
                "data.dims" => {
                    let dims = parse_list(key, v)?;
                    if dims.len() != 2 {
                        return Err(CliError::Usage(format!(
                            "config key `{key}` needs D,k"
                        )));
                    }
                    cfg.data.dims = (dims[0], dims[1]);
                }
                "data.split" => cfg.split = parse_fracs(key, v)?,
                "out.dir" => cfg.out_dir = v.clone(),
                _ => unknown.push(key.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        cfg.train.dims = cfg.data.dims;
        Ok(cfg)
    }
}

pub fn parse_method(v: &str) -> Result<SolverMethod, CliError> {
    match v {
        "dopri5" => Ok(SolverMethod::Dopri5Adaptive),
        "rk4" => Ok(SolverMethod::Rk4Fixed),
        other => Err(CliError::Usage(format!(
            "unknown solver `{other}` (valid: dopri5, rk4)"
        ))),
    }
}

/// Applies `--solver/--atol/--rtol` style overrides onto a solver config.
pub fn apply_solver_flags(
    cfg: &mut SolverConfig,
    method: Option<&str>,
    atol: Option<f64>,
    rtol: Option<f64>,
) -> Result<(), CliError> {
    if let Some(m) = method {
        cfg.method = parse_method(m)?;
    }
    if let Some(a) = atol {
        cfg.atol = a;
    }
    if let Some(r) = rtol {
        cfg.rtol = r;
    }
    Ok(())
}

/// True when the dataset spec refers to generated textures.
pub fn is_texture(spec: &DatasetSpec) -> bool {
    matches!(spec.source, SourceKind::Texture(_))
}
