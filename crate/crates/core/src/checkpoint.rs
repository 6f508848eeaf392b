//! JSON checkpoints.
//!
//! Output is canonical: object keys sorted, floats written with 17
//! significant digits (`{:.16e}`), integers as integers, two-space
//! indentation. Saving a loaded checkpoint reproduces the original bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde_json::{json, Map, Value};

use crate::cost::CostModel;
use crate::diffcore::{Dense, Mlp};
use crate::geoflow::{GeoState, Preconditioner};
use crate::measures::{atomic_write, MeasureSpec};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "wgeo-checkpoint/1";

/// Run metadata stored next to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub final_w_ab: f64,
    pub final_w_ba: f64,
    pub seed: u64,
    pub source: Option<MeasureSpec>,
    pub target: Option<MeasureSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: GeoState,
    pub meta: TrainingMeta,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn num(v: f64) -> Value {
    // serde_json refuses non-finite floats; they round-trip as null.
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn nums<'a>(it: impl IntoIterator<Item = &'a f64>) -> Value {
    Value::Array(it.into_iter().map(|v| num(*v)).collect())
}

fn net_to_json(net: &Mlp) -> Value {
    let shapes: Vec<Value> = net.layers().iter().map(|l| json!([l.out_dim(), l.in_dim()])).collect();
    let weights: Vec<Value> = net.layers().iter().map(|l| nums(l.weight.iter())).collect();
    let biases: Vec<Value> = net.layers().iter().map(|l| nums(l.bias.iter())).collect();
    json!({ "shapes": shapes, "weights": weights, "biases": biases })
}

fn matrix_json(m: &[Vec<f64>]) -> Value {
    Value::Array(m.iter().map(|r| nums(r)).collect())
}

fn spec_to_json(spec: &MeasureSpec) -> Value {
    match spec {
        MeasureSpec::Gaussian { mean, cov } => json!({ "kind": "gaussian", "mean": nums(mean), "cov": matrix_json(cov) }),
        MeasureSpec::Mixture { weights, components } => json!({
            "kind": "mixture",
            "weights": nums(weights),
            "means": Value::Array(components.iter().map(|c| nums(&c.0)).collect()),
            "covs": Value::Array(components.iter().map(|c| matrix_json(&c.1)).collect()),
        }),
        MeasureSpec::Empirical { path } => json!({ "kind": "empirical", "path": path.to_string_lossy() }),
        MeasureSpec::ImagePalette { path } => json!({ "kind": "image", "path": path.to_string_lossy() }),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Value {
        let s = &self.state;
        let mut training = Map::new();
        training.insert("iterations".into(), json!(self.meta.iterations));
        training.insert("final_w_ab".into(), num(self.meta.final_w_ab));
        training.insert("final_w_ba".into(), num(self.meta.final_w_ba));
        training.insert("seed".into(), json!(self.meta.seed));
        if let Some(src) = &self.meta.source {
            training.insert("source".into(), spec_to_json(src));
        }
        if let Some(tgt) = &self.meta.target {
            training.insert("target".into(), spec_to_json(tgt));
        }
        json!({
            "version": CHECKPOINT_VERSION,
            "dim": s.dim(),
            "cost": { "alpha": num(s.cost.alpha()), "beta": num(s.cost.beta()) },
            "preconditioner": { "sigma": num(s.precond.sigma()), "mu": nums(s.precond.mu().iter()) },
            "networks": {
                "f": net_to_json(&s.f_net),
                "g": net_to_json(&s.g_net),
                "phi_f": net_to_json(&s.phi_f),
                "phi_g": net_to_json(&s.phi_g),
            },
            "training": Value::Object(training),
        })
    }

    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        write_canonical(&self.to_json(), 0, &mut out);
        out.push('\n');
        out
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let version = v.get("version").and_then(Value::as_str).ok_or_else(|| ck_err("missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(ck_err(format!("unrecognized checkpoint version {version:?}")));
        }
        let dim = get_usize(v, "dim")?;
        let cost = field(v, "cost")?;
        let cost = CostModel::new(get_f64(cost, "alpha")?, get_f64(cost, "beta")?).map_err(|e| ck_err(e.to_string()))?;
        let pre = field(v, "preconditioner")?;
        let mu = f64_array(field(pre, "mu")?, "preconditioner.mu")?;
        if mu.len() != dim {
            return Err(ck_err(format!("preconditioner.mu has {} entries, dim is {dim}", mu.len())));
        }
        let precond = Preconditioner::new(get_f64(pre, "sigma")?, Array1::from(mu)).map_err(|e| ck_err(e.to_string()))?;
        let nets = field(v, "networks")?;
        let net = |name: &str| net_from_json(field(nets, name)?, name);
        let state = GeoState::from_parts(net("f")?, net("g")?, net("phi_f")?, net("phi_g")?, precond, cost)
            .map_err(|e| ck_err(e.to_string()))?;
        if state.dim() != dim {
            return Err(ck_err(format!("networks are {}-dimensional, dim is {dim}", state.dim())));
        }
        let tr = field(v, "training")?;
        let opt_spec = |k: &str| tr.get(k).map(|s| spec_from_json(s, k)).transpose();
        let meta = TrainingMeta {
            iterations: get_usize(tr, "iterations")?,
            final_w_ab: get_f64_or_nan(tr, "final_w_ab")?,
            final_w_ba: get_f64_or_nan(tr, "final_w_ba")?,
            seed: tr.get("seed").and_then(Value::as_u64).ok_or_else(|| ck_err("missing training.seed"))?,
            source: opt_spec("source")?,
            target: opt_spec("target")?,
        };
        Ok(Checkpoint { state, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), self.to_canonical_string().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| ck_err(format!("{}: {e}", path.display())))?;
        Checkpoint::from_json(&v)
    }
}

fn field<'a>(v: &'a Value, k: &str) -> Result<&'a Value> {
    v.get(k).ok_or_else(|| ck_err(format!("missing field `{k}`")))
}

fn get_f64(v: &Value, k: &str) -> Result<f64> {
    field(v, k)?.as_f64().ok_or_else(|| ck_err(format!("`{k}` is not a number")))
}

fn get_f64_or_nan(v: &Value, k: &str) -> Result<f64> {
    match field(v, k)? {
        Value::Null => Ok(f64::NAN),
        other => other.as_f64().ok_or_else(|| ck_err(format!("`{k}` is not a number"))),
    }
}

fn get_usize(v: &Value, k: &str) -> Result<usize> {
    field(v, k)?
        .as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| ck_err(format!("`{k}` is not a non-negative integer")))
}

fn f64_array(v: &Value, what: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| ck_err(format!("`{what}` is not an array")))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| ck_err(format!("`{what}` has a non-numeric entry"))))
        .collect()
}

fn f64_matrix(v: &Value, what: &str) -> Result<Vec<Vec<f64>>> {
    v.as_array()
        .ok_or_else(|| ck_err(format!("`{what}` is not an array")))?
        .iter()
        .map(|r| f64_array(r, what))
        .collect()
}

fn net_from_json(v: &Value, name: &str) -> Result<Mlp> {
    let arr = |k: &str| {
        field(v, k)?
            .as_array()
            .ok_or_else(|| ck_err(format!("networks.{name}.{k} is not an array")))
    };
    let (shapes, weights, biases) = (arr("shapes")?, arr("weights")?, arr("biases")?);
    if shapes.len() != weights.len() || shapes.len() != biases.len() {
        return Err(ck_err(format!("networks.{name}: layer counts disagree")));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (k, ((s, w), b)) in shapes.iter().zip(weights).zip(biases).enumerate() {
        let s = f64_array(s, "shape")?;
        if s.len() != 2 || s.iter().any(|x| *x < 1.0 || x.fract() != 0.0) {
            return Err(ck_err(format!("networks.{name}: layer {k} has a malformed shape")));
        }
        let (rows, cols) = (s[0] as usize, s[1] as usize);
        let w = f64_array(w, "weights")?;
        let b = f64_array(b, "biases")?;
        if w.len() != rows * cols || b.len() != rows {
            return Err(ck_err(format!(
                "networks.{name}: layer {k} declares {rows}x{cols} but stores {} weights and {} biases",
                w.len(),
                b.len()
            )));
        }
        layers.push(Dense {
            weight: Array2::from_shape_vec((rows, cols), w).expect("length checked"),
            bias: Array1::from(b),
        });
    }
    Mlp::from_layers(layers).map_err(|e| ck_err(format!("networks.{name}: {e}")))
}

fn spec_from_json(v: &Value, what: &str) -> Result<MeasureSpec> {
    let kind = field(v, "kind")?.as_str().ok_or_else(|| ck_err(format!("{what}.kind is not a string")))?;
    let path = || -> Result<PathBuf> {
        Ok(PathBuf::from(
            field(v, "path")?.as_str().ok_or_else(|| ck_err(format!("{what}.path is not a string")))?,
        ))
    };
    Ok(match kind {
        "gaussian" => MeasureSpec::Gaussian {
            mean: f64_array(field(v, "mean")?, what)?,
            cov: f64_matrix(field(v, "cov")?, what)?,
        },
        "mixture" => {
            let means = field(v, "means")?
                .as_array()
                .ok_or_else(|| ck_err(format!("{what}.means is not an array")))?
                .iter()
                .map(|m| f64_array(m, what))
                .collect::<Result<Vec<_>>>()?;
            let covs = field(v, "covs")?
                .as_array()
                .ok_or_else(|| ck_err(format!("{what}.covs is not an array")))?
                .iter()
                .map(|c| f64_matrix(c, what))
                .collect::<Result<Vec<_>>>()?;
            MeasureSpec::Mixture {
                weights: f64_array(field(v, "weights")?, what)?,
                components: means.into_iter().zip(covs).collect(),
            }
        }
        "empirical" => MeasureSpec::Empirical { path: path()? },
        "image" => MeasureSpec::ImagePalette { path: path()? },
        other => return Err(ck_err(format!("{what}: unknown measure kind {other:?}"))),
    })
}

fn indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn is_flat(items: &[Value]) -> bool {
    items.iter().all(|v| !matches!(v, Value::Array(_) | Value::Object(_)))
}

/// Sorted keys, `{:.16e}` floats; numeric arrays stay on one line.
pub fn write_canonical(v: &Value, level: usize, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                write!(out, "{u}").unwrap();
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").unwrap();
            } else {
                write!(out, "{:.16e}", n.as_f64().expect("finite number")).unwrap();
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else if is_flat(items) {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_canonical(item, level, out);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, item) in items.iter().enumerate() {
                    indent(level + 1, out);
                    write_canonical(item, level + 1, out);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                indent(level, out);
                out.push(']');
            }
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                indent(level + 1, out);
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push_str(": ");
                write_canonical(&map[k.as_str()], level + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            indent(level, out);
            out.push('}');
        }
    }
}
