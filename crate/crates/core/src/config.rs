//! On-disk run configuration.
//!
//! ```toml
//! [cost]
//! alpha = 2.0
//! beta = 1.0
//!
//! [train]
//! lr = 1e-4
//! n_interior = 2000
//! seed = 7
//!
//! [net]
//! field_width = 48
//!
//! [source]
//! kind = "gaussian"
//! mean = [0.0, 0.0]
//! cov = [[1.0, 0.0], [0.0, 1.0]]
//!
//! [target]
//! kind = "mixture"
//! weights = [0.5, 0.5]
//! means = [[3.0, 0.0], [-3.0, 0.0]]
//! covs = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]]
//! ```
//!
//! Every table and key is optional except `source` and `target`; unknown
//! keys are rejected by their dotted name. Relative `path` values are
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::cost::CostModel;
use crate::measures::MeasureSpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub source: MeasureSpec,
    pub target: MeasureSpec,
}

const TRAIN_KEYS: &[&str] = &[
    "dim",
    "lr",
    "n_interior",
    "n_boundary",
    "n_cycle",
    "inner_phi_steps",
    "outer_iters",
    "min_iters",
    "lambda",
    "epsilon",
    "seed",
    "precondition",
    "deterministic",
    "workers",
    "sample_noise_std",
    "checkpoint_every",
];
const NET_KEYS: &[&str] = &["field_width", "field_hidden", "phi_width", "phi_hidden"];
const COST_KEYS: &[&str] = &["alpha", "beta"];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        Value::String(s) if s.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
        _ => Err(cfg_err(format!("`{key}` must be a number"))),
    }
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(cfg_err(format!("`{key}` must be a non-negative integer"))),
    }
}

fn as_bool(v: &Value, key: &str) -> Result<bool> {
    v.as_bool().ok_or_else(|| cfg_err(format!("`{key}` must be true or false")))
}

fn as_vec(v: &Value, key: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| cfg_err(format!("`{key}` must be an array of numbers")))?
        .iter()
        .map(|x| as_f64(x, key))
        .collect()
}

fn as_matrix(v: &Value, key: &str) -> Result<Vec<Vec<f64>>> {
    v.as_array()
        .ok_or_else(|| cfg_err(format!("`{key}` must be an array of rows")))?
        .iter()
        .map(|r| as_vec(r, key))
        .collect()
}

fn table<'a>(root: &'a Table, name: &str, allowed: &[&str]) -> Result<Option<&'a Table>> {
    match root.get(name) {
        None => Ok(None),
        Some(Value::Table(t)) => {
            if let Some(k) = t.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(cfg_err(format!("unknown key `{name}.{k}`")));
            }
            Ok(Some(t))
        }
        Some(_) => Err(cfg_err(format!("`{name}` must be a table"))),
    }
}

fn measure(root: &Table, name: &str, base: &Path) -> Result<MeasureSpec> {
    let t = match root.get(name) {
        Some(Value::Table(t)) => t,
        Some(_) => return Err(cfg_err(format!("`{name}` must be a table"))),
        None => return Err(cfg_err(format!("missing `[{name}]` table"))),
    };
    let kind = t
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| cfg_err(format!("`{name}.kind` must be one of gaussian, mixture, empirical, image")))?;
    let allowed: &[&str] = match kind {
        "gaussian" => &["kind", "mean", "cov"],
        "mixture" => &["kind", "weights", "means", "covs"],
        "empirical" | "image" => &["kind", "path"],
        other => return Err(cfg_err(format!("unknown measure kind `{other}` in `{name}.kind`"))),
    };
    if let Some(k) = t.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(cfg_err(format!("unknown key `{name}.{k}`")));
    }
    let get = |k: &str| t.get(k).ok_or_else(|| cfg_err(format!("missing `{name}.{k}`")));
    let key = |k: &str| format!("{name}.{k}");
    Ok(match kind {
        "gaussian" => MeasureSpec::Gaussian {
            mean: as_vec(get("mean")?, &key("mean"))?,
            cov: as_matrix(get("cov")?, &key("cov"))?,
        },
        "mixture" => {
            let means = get("means")?
                .as_array()
                .ok_or_else(|| cfg_err(format!("`{}` must be an array", key("means"))))?
                .iter()
                .map(|m| as_vec(m, &key("means")))
                .collect::<Result<Vec<_>>>()?;
            let covs = get("covs")?
                .as_array()
                .ok_or_else(|| cfg_err(format!("`{}` must be an array", key("covs"))))?
                .iter()
                .map(|c| as_matrix(c, &key("covs")))
                .collect::<Result<Vec<_>>>()?;
            if means.len() != covs.len() {
                return Err(cfg_err(format!("`{name}` has {} means but {} covs", means.len(), covs.len())));
            }
            MeasureSpec::Mixture {
                weights: as_vec(get("weights")?, &key("weights"))?,
                components: means.into_iter().zip(covs).collect(),
            }
        }
        _ => {
            let p = get("path")?
                .as_str()
                .ok_or_else(|| cfg_err(format!("`{}` must be a string", key("path"))))?;
            let path = base.join(p);
            if kind == "empirical" {
                MeasureSpec::Empirical { path }
            } else {
                MeasureSpec::ImagePalette { path }
            }
        }
    })
}

/// Dimension implied by a measure without loading any file.
fn spec_dim(spec: &MeasureSpec) -> Option<usize> {
    match spec {
        MeasureSpec::Gaussian { mean, .. } => Some(mean.len()),
        MeasureSpec::Mixture { components, .. } => components.first().map(|c| c.0.len()),
        MeasureSpec::Empirical { .. } => None,
        MeasureSpec::ImagePalette { .. } => Some(3),
    }
}

/// Parses config text; `base` resolves relative data paths.
pub fn parse_run_config(text: &str, base: &Path) -> Result<RunConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
    if let Some(k) = root
        .keys()
        .find(|k| !["cost", "train", "net", "source", "target"].contains(&k.as_str()))
    {
        return Err(cfg_err(format!("unknown key `{k}`")));
    }
    let source = measure(&root, "source", base)?;
    let target = measure(&root, "target", base)?;

    let mut alpha = 2.0;
    let mut beta = 1.0;
    if let Some(t) = table(&root, "cost", COST_KEYS)? {
        if let Some(v) = t.get("alpha") {
            alpha = as_f64(v, "cost.alpha")?;
        }
        if let Some(v) = t.get("beta") {
            beta = as_f64(v, "cost.beta")?;
        }
    }
    let cost = CostModel::new(alpha, beta).map_err(|e| cfg_err(e.to_string()))?;

    let dim = spec_dim(&source).or_else(|| spec_dim(&target));
    let mut train = TrainConfig::new(dim.unwrap_or(0), cost);
    if let Some(t) = table(&root, "train", TRAIN_KEYS)? {
        for (k, v) in t {
            let key = format!("train.{k}");
            match k.as_str() {
                "dim" => train.dim = as_usize(v, &key)?,
                "lr" => train.lr = as_f64(v, &key)?,
                "n_interior" => train.n_interior = as_usize(v, &key)?,
                "n_boundary" => train.n_boundary = as_usize(v, &key)?,
                "n_cycle" => train.n_cycle = as_usize(v, &key)?,
                "inner_phi_steps" => train.inner_phi_steps = as_usize(v, &key)?,
                "outer_iters" => train.outer_iters = as_usize(v, &key)?,
                "min_iters" => train.min_iters = as_usize(v, &key)?,
                "lambda" => train.lambda = as_f64(v, &key)?,
                "epsilon" => train.epsilon = Some(as_f64(v, &key)?),
                "seed" => train.seed = as_usize(v, &key)? as u64,
                "precondition" => train.precondition = as_bool(v, &key)?,
                "deterministic" => train.deterministic = as_bool(v, &key)?,
                "workers" => train.workers = as_usize(v, &key)?,
                "sample_noise_std" => train.sample_noise_std = as_f64(v, &key)?,
                "checkpoint_every" => train.checkpoint_every = as_usize(v, &key)?,
                _ => unreachable!("keys validated"),
            }
        }
    }
    if let Some(t) = table(&root, "net", NET_KEYS)? {
        for (k, v) in t {
            let n = as_usize(v, &format!("net.{k}"))?;
            match k.as_str() {
                "field_width" => train.arch.field_width = n,
                "field_hidden" => train.arch.field_hidden = n,
                "phi_width" => train.arch.phi_width = n,
                "phi_hidden" => train.arch.phi_hidden = n,
                _ => unreachable!("keys validated"),
            }
        }
    }
    if train.dim == 0 {
        return Err(cfg_err("cannot infer dimension; set `train.dim`"));
    }
    for (name, spec) in [("source", &source), ("target", &target)] {
        if let Some(d) = spec_dim(spec) {
            if d != train.dim {
                return Err(cfg_err(format!("`{name}` is {d}-dimensional but train.dim is {}", train.dim)));
            }
        }
    }
    train.validate()?;
    Ok(RunConfig { train, source, target })
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_run_config(&text, &base)
}
