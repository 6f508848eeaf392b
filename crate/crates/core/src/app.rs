//! Command implementations behind the `wgeo` binary.
//!
//! Every command validates its inputs and computes its results before it
//! writes anything; files are written through a temp file and renamed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::config::load_run_config;
use crate::cost::{lagrangian, CostModel};
use crate::geoflow::{push_samples, GeoState, VectorField};
use crate::measures::{atomic_write, load_csv, load_ppm_palette, write_csv, write_ppm, MeasureSpec, PointCloud};
use crate::objective::wass_estimate;
use crate::oracle::{exact_discrete_ot, gaussian_w2, mccann_interpolate};
use crate::trainer::{field_l2_error, train_with_hook, CheckpointReason, TrainHistory};
use crate::{Error, Result};

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Argument(_) => 2,
        Error::Checkpoint(_) => 3,
        Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::Shape(_) => 4,
        Error::Training(_) => 5,
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlobalOpts {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub deterministic: bool,
}

impl GlobalOpts {
    fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ab,
    Ba,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Ab => "ab",
            Direction::Ba => "ba",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ab" => Ok(Direction::Ab),
            "ba" => Ok(Direction::Ba),
            other => Err(Error::Usage(format!("direction must be `ab` or `ba`, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Gaussian,
    Discrete,
}

impl std::str::FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(OracleKind::Gaussian),
            "discrete" => Ok(OracleKind::Discrete),
            other => Err(Error::Usage(format!("oracle must be `gaussian` or `discrete`, got {other:?}"))),
        }
    }
}

fn field_for(state: &GeoState, dir: Direction) -> Box<dyn VectorField + '_> {
    match dir {
        Direction::Ab => Box::new(state.forward_field()),
        Direction::Ba => Box::new(state.backward_field()),
    }
}

fn start_spec(meta: &TrainingMeta, dir: Direction) -> Result<&MeasureSpec> {
    let (spec, name) = match dir {
        Direction::Ab => (&meta.source, "source"),
        Direction::Ba => (&meta.target, "target"),
    };
    spec.as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint does not record its {name} measure")))
}

fn check_dim(cloud: &PointCloud, dim: usize, what: &str) -> Result<()> {
    if cloud.dim() != dim {
        return Err(Error::Shape(format!(
            "{what} has {} columns, checkpoint is {dim}-dimensional",
            cloud.dim()
        )));
    }
    Ok(())
}

/// Path of the loss history written next to a checkpoint.
pub fn history_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.csv");
    PathBuf::from(name)
}

/// CSV of the per-iteration loss report, with a header row.
pub fn format_history(history: &TrainHistory) -> String {
    let mut s = String::from("iteration,l_ab,l_ba,k_reg,w_ab,w_ba,hjb_residual_mean\n");
    for (i, r) in history.reports.iter().enumerate() {
        writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            i + 1,
            r.l_ab,
            r.l_ba,
            r.k_reg,
            r.w_ab,
            r.w_ba,
            r.hjb_residual_mean
        )
        .unwrap();
    }
    s
}

/// Trains from a config file and writes the checkpoint plus its history.
pub fn cmd_train(config_path: &Path, out: &Path, opts: GlobalOpts) -> Result<TrainHistory> {
    let run = load_run_config(config_path)?;
    let mut cfg = run.train.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(w) = opts.workers {
        cfg.workers = w;
    }
    if opts.deterministic {
        cfg.deterministic = true;
    }
    let sa = run.source.sampler()?;
    let sb = run.target.sampler()?;
    let meta_for = |history: &TrainHistory| TrainingMeta {
        iterations: history.iterations(),
        final_w_ab: history.final_w_ab,
        final_w_ba: history.final_w_ba,
        seed: cfg.seed,
        source: Some(run.source.clone()),
        target: Some(run.target.clone()),
    };
    let save = |state: &GeoState, history: &TrainHistory| -> Result<()> {
        let ck = Checkpoint {
            state: state.clone(),
            meta: meta_for(history),
        };
        ck.save(out)?;
        atomic_write(&history_path(out), format_history(history).as_bytes())
    };
    let mut hook = |state: &GeoState, history: &TrainHistory, reason: CheckpointReason| -> Result<()> {
        let mut partial = history.clone();
        partial.final_w_ab = history.reports.last().map_or(f64::NAN, |r| r.w_ab);
        partial.final_w_ba = history.reports.last().map_or(f64::NAN, |r| r.w_ba);
        if reason == CheckpointReason::Abort {
            log::warn!("writing last good state to {}", out.display());
        }
        save(state, &partial)
    };
    let (state, history) = train_with_hook(&cfg, &sa, &sb, &mut hook)?;
    save(&state, &history)?;
    println!(
        "iterations {}  W_ab {:.6}  W_ba {:.6}  gap {:.3e}",
        history.iterations(),
        history.final_w_ab,
        history.final_w_ba,
        (history.final_w_ab - history.final_w_ba).abs()
    );
    Ok(history)
}

/// Transport estimates in both directions on fresh samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceReport {
    pub w_ab: f64,
    pub w_ba: f64,
}

impl DistanceReport {
    pub fn gap(&self) -> f64 {
        (self.w_ab - self.w_ba).abs()
    }
}

pub fn cmd_distance(ckpt: &Path, n_samples: usize, opts: GlobalOpts) -> Result<DistanceReport> {
    if n_samples == 0 {
        return Err(Error::Usage("--samples must be at least 1".into()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed_or(ck.meta.seed));
    let a = start_spec(&ck.meta, Direction::Ab)?.sampler()?.sample(n_samples, &mut rng)?;
    let b = start_spec(&ck.meta, Direction::Ba)?.sampler()?.sample(n_samples, &mut rng)?;
    let cost = ck.state.cost;
    let report = DistanceReport {
        w_ab: wass_estimate(&ck.state.forward_field(), a.points(), &cost)?,
        w_ba: wass_estimate(&ck.state.backward_field(), b.points(), &cost)?,
    };
    println!("W_ab {:.10}", report.w_ab);
    println!("W_ba {:.10}", report.w_ba);
    println!("gap {:.10}", report.gap());
    Ok(report)
}

/// Start cloud for a geodesic: `input` if given, else `n_samples` draws
/// from the checkpoint's start measure with `ChaCha8Rng::seed_from_u64(seed)`.
pub fn geodesic_start(ck: &Checkpoint, dir: Direction, n_samples: usize, input: Option<&Path>, seed: u64) -> Result<PointCloud> {
    match input {
        Some(p) => load_csv(p),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            start_spec(&ck.meta, dir)?.sampler()?.sample(n_samples, &mut rng)
        }
    }
}

/// Writes `geo_{dir}_t{k}.csv` for `t = k/(n_steps-1)`; returns the paths.
pub fn cmd_geodesic(
    ckpt: &Path,
    n_samples: usize,
    n_steps: usize,
    dir: Direction,
    out_dir: &Path,
    input: Option<&Path>,
    opts: GlobalOpts,
) -> Result<Vec<PathBuf>> {
    if n_steps < 2 {
        return Err(Error::Usage(format!("--steps must be at least 2, got {n_steps}")));
    }
    if input.is_none() && n_samples == 0 {
        return Err(Error::Usage("--samples must be at least 1".into()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let start = geodesic_start(&ck, dir, n_samples, input, opts.seed_or(ck.meta.seed))?;
    check_dim(&start, ck.state.dim(), "start cloud")?;
    let field = field_for(&ck.state, dir);
    let snapshots = (0..n_steps)
        .map(|k| push_samples(field.as_ref(), &start, k as f64 / (n_steps - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(n_steps);
    for (k, snap) in snapshots.iter().enumerate() {
        let p = out_dir.join(format!("geo_{}_t{k}.csv", dir.label()));
        write_csv(&p, snap.points.points())?;
        paths.push(p);
    }
    Ok(paths)
}

/// Rows `x + F(x)` (or `x + G(x)`).
pub fn map_points(state: &GeoState, dir: Direction, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let v = field_for(state, dir).eval_batch(x)?;
    Ok(&x + &v)
}

pub fn cmd_map(ckpt: &Path, input: &Path, dir: Direction, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cloud = load_csv(input)?;
    check_dim(&cloud, ck.state.dim(), "input")?;
    let mapped = map_points(&ck.state, dir, cloud.points())?;
    write_csv(out, mapped.view())
}

/// Maps every pixel's color; output is clamped to `[0, 1]` by the encoder.
pub fn cmd_transfer(ckpt: &Path, image: &Path, dir: Direction, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.state.dim() != 3 {
        return Err(Error::Argument(format!(
            "color transfer needs a 3-dimensional checkpoint, got {}",
            ck.state.dim()
        )));
    }
    let (palette, width, height) = load_ppm_palette(image)?;
    let mapped = map_points(&ck.state, dir, palette.points())?;
    write_ppm(out, mapped.view(), width, height)
}

/// Metrics printed by [`cmd_eval`].
#[derive(Debug, Clone, PartialEq)]
pub enum EvalReport {
    Gaussian {
        w_trained: f64,
        w_oracle: f64,
        rel_distance_error: f64,
        /// `E|F(x) - (T(x) - x)|²` over source samples.
        field_l2_error: f64,
        /// `field_l2_error / E|T(x) - x|²`.
        rel_field_l2_error: f64,
    },
    Discrete {
        n: usize,
        oracle_cost: f64,
        w_trained: f64,
        /// Mean nearest-neighbor distance from the trained `t = 0.5` cloud to
        /// the McCann interpolant.
        mean_nn_distance: f64,
        mean_displacement: f64,
        normalized_discrepancy: f64,
    },
}

fn gaussian_parts(spec: &MeasureSpec, what: &str) -> Result<(Array1<f64>, Array2<f64>)> {
    match spec {
        MeasureSpec::Gaussian { mean, cov } => {
            let d = mean.len();
            if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                return Err(Error::Shape(format!("{what} covariance is not {d}x{d}")));
            }
            let flat: Vec<f64> = cov.iter().flatten().copied().collect();
            Ok((Array1::from(mean.clone()), Array2::from_shape_vec((d, d), flat).expect("checked")))
        }
        _ => Err(Error::Argument(format!("gaussian oracle needs a Gaussian {what} measure"))),
    }
}

/// Exact cost and optimal displacement map between two Gaussians.
///
/// Quadratic costs use the Bures formula. Other costs are supported only for
/// pure translations, where `x ↦ x + Δm` is optimal for every strictly convex
/// `L` and the cost is `L(Δm)`.
pub fn gaussian_reference(
    cost: &CostModel,
    a: &MeasureSpec,
    b: &MeasureSpec,
) -> Result<(f64, Box<dyn Fn(ArrayView2<f64>) -> Array2<f64>>)> {
    let (ma, ca) = gaussian_parts(a, "source")?;
    let (mb, cb) = gaussian_parts(b, "target")?;
    if cost.is_quadratic() || cost.alpha() == 2.0 {
        let sol = gaussian_w2(ma.view(), ca.view(), mb.view(), cb.view())?;
        let w = cost.beta() * sol.dynamic_cost();
        return Ok((w, Box::new(move |x| sol.map(x))));
    }
    let scale = ca.iter().chain(cb.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
    if ca.iter().zip(cb.iter()).any(|(x, y)| (x - y).abs() > 1e-12 * scale) {
        return Err(Error::Argument(
            "gaussian oracle with a non-quadratic cost requires equal covariances".into(),
        ));
    }
    let shift = &mb - &ma;
    let w = lagrangian(cost, shift.as_slice().expect("contiguous"));
    Ok((w, Box::new(move |x| &x + &shift)))
}

/// Mean over rows of `a` of the distance to the nearest row of `b`.
pub fn mean_nearest_neighbor(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let total: f64 = a
        .rows()
        .into_iter()
        .map(|x| {
            b.rows()
                .into_iter()
                .map(|y| x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / a.nrows() as f64
}

/// Discrete comparison between a trained forward field and the exact
/// assignment on the given clouds.
pub fn discrete_eval(state: &GeoState, a: &PointCloud, b: &PointCloud) -> Result<EvalReport> {
    let assign = exact_discrete_ot(a, b, &state.cost)?;
    let oracle_mid = mccann_interpolate(a, b, &assign, 0.5)?;
    let trained_mid = push_samples(&state.forward_field(), a, 0.5)?;
    let mean_nn_distance = mean_nearest_neighbor(trained_mid.points.points(), oracle_mid.points());
    let (pa, pb) = (a.points(), b.points());
    let mean_displacement = assign
        .perm
        .iter()
        .enumerate()
        .map(|(i, &j)| (&pb.row(j) - &pa.row(i)).mapv(|e| e * e).sum().sqrt())
        .sum::<f64>()
        / a.len() as f64;
    Ok(EvalReport::Discrete {
        n: a.len(),
        oracle_cost: assign.total_cost,
        w_trained: wass_estimate(&state.forward_field(), pa, &state.cost)?,
        mean_nn_distance,
        mean_displacement,
        normalized_discrepancy: if mean_displacement > 0.0 {
            mean_nn_distance / mean_displacement
        } else {
            mean_nn_distance
        },
    })
}

/// Compares a checkpoint with an exact oracle. Discrete mode uses the CSV
/// clouds if given, else `n_samples` draws from each recorded measure.
pub fn cmd_eval(
    ckpt: &Path,
    oracle: OracleKind,
    n_samples: usize,
    clouds: Option<(&Path, &Path)>,
    opts: GlobalOpts,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(Error::Usage("--samples must be at least 1".into()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed_or(ck.meta.seed));
    let report = match oracle {
        OracleKind::Gaussian => {
            let sa = start_spec(&ck.meta, Direction::Ab)?;
            let sb = start_spec(&ck.meta, Direction::Ba)?;
            let (w_oracle, reference) = gaussian_reference(&ck.state.cost, sa, sb)?;
            let a = sa.sampler()?.sample(n_samples, &mut rng)?;
            let field = ck.state.forward_field();
            let w_trained = wass_estimate(&field, a.points(), &ck.state.cost)?;
            let err = field_l2_error(&field, &reference, a.points())?;
            let disp = reference(a.points()) - &a.points();
            let norm = disp.mapv(|e| e * e).sum() / a.len() as f64;
            EvalReport::Gaussian {
                w_trained,
                w_oracle,
                rel_distance_error: (w_trained - w_oracle).abs() / w_oracle.abs().max(f64::MIN_POSITIVE),
                field_l2_error: err,
                rel_field_l2_error: if norm > 0.0 { err / norm } else { err },
            }
        }
        OracleKind::Discrete => {
            let (a, b) = match clouds {
                Some((pa, pb)) => (load_csv(pa)?, load_csv(pb)?),
                None => (
                    start_spec(&ck.meta, Direction::Ab)?.sampler()?.sample(n_samples, &mut rng)?,
                    start_spec(&ck.meta, Direction::Ba)?.sampler()?.sample(n_samples, &mut rng)?,
                ),
            };
            check_dim(&a, ck.state.dim(), "source cloud")?;
            check_dim(&b, ck.state.dim(), "target cloud")?;
            discrete_eval(&ck.state, &a, &b)?
        }
    };
    match &report {
        EvalReport::Gaussian {
            w_trained,
            w_oracle,
            rel_distance_error,
            field_l2_error,
            rel_field_l2_error,
        } => {
            println!("w_trained {w_trained:.10}");
            println!("w_oracle {w_oracle:.10}");
            println!("rel_distance_error {rel_distance_error:.6e}");
            println!("field_l2_error {field_l2_error:.6e}");
            println!("rel_field_l2_error {rel_field_l2_error:.6e}");
        }
        EvalReport::Discrete {
            n,
            oracle_cost,
            w_trained,
            mean_nn_distance,
            mean_displacement,
            normalized_discrepancy,
        } => {
            println!("n {n}");
            println!("oracle_cost {oracle_cost:.10}");
            println!("w_trained {w_trained:.10}");
            println!("mean_nn_distance {mean_nn_distance:.6e}");
            println!("mean_displacement {mean_displacement:.6e}");
            println!("normalized_discrepancy {normalized_discrepancy:.6e}");
        }
    }
    Ok(report)
}

/// Exact assignment between two CSV clouds; writes `i,perm[i]` rows and
/// returns the mean cost.
pub fn cmd_oracle_ot(a_csv: &Path, b_csv: &Path, alpha: f64, beta: f64, out: &Path) -> Result<f64> {
    let cost = CostModel::new(alpha, beta)?;
    let a = load_csv(a_csv)?;
    let b = load_csv(b_csv)?;
    let assign = exact_discrete_ot(&a, &b, &cost)?;
    let mut s = String::new();
    for (i, j) in assign.perm.iter().enumerate() {
        writeln!(s, "{i},{j}").unwrap();
    }
    atomic_write(out, s.as_bytes())?;
    println!("cost {:.16e}", assign.total_cost);
    Ok(assign.total_cost)
}

pub const SCATTER_SIZE: usize = 512;

/// Rasterizes the first two columns onto a white canvas, one black pixel per
/// point, with the bounding box scaled to fill the canvas.
pub fn render_scatter(cloud: &PointCloud) -> Result<Vec<u8>> {
    if cloud.dim() < 2 {
        return Err(Error::Shape(format!("scatter plot needs 2 columns, got {}", cloud.dim())));
    }
    let pts = cloud.points();
    let range = |k: usize| {
        let col = pts.column(k);
        let lo = col.fold(f64::INFINITY, |m, v| m.min(*v));
        let hi = col.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = range(0);
    let (y0, ys) = range(1);
    let last = (SCATTER_SIZE - 1) as f64;
    let mut canvas = Array2::<f64>::ones((SCATTER_SIZE * SCATTER_SIZE, 3));
    for p in pts.rows() {
        let col = ((p[0] - x0) / xs * last).round() as usize;
        let row = SCATTER_SIZE - 1 - ((p[1] - y0) / ys * last).round() as usize;
        canvas.row_mut(row * SCATTER_SIZE + col).fill(0.0);
    }
    crate::measures::encode_ppm(canvas.view(), SCATTER_SIZE, SCATTER_SIZE)
}

pub fn cmd_plot_scatter(csv: &Path, out: &Path) -> Result<()> {
    let cloud = load_csv(csv)?;
    let bytes = render_scatter(&cloud)?;
    atomic_write(out, &bytes)
}
