//! Alternating bidirectional saddle-point training.
//!
//! Each outer iteration draws fresh interior and boundary batches for both
//! directions, takes `inner_phi_steps` ascent steps on the two potentials
//! with the interior points frozen, then one descent step on the two fields
//! against the potential losses plus the cycle penalty. Training stops when
//! the forward and backward transport estimates agree to within `ε` (after
//! `min_iters` iterations) or when `outer_iters` is exhausted.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cost::CostModel;
use crate::diffcore::{adam_step, AdamState, Direction, Mlp};
use crate::geoflow::{Architecture, GeoState, Preconditioner};
use crate::measures::{PointCloud, Sampler};
use crate::objective::{
    field_grad_from_points, loss_cycle, phi_term, wass_estimate, BoundaryBatch, InteriorBatch, LossReport, Wants,
};
use crate::{Error, Result};

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub cost: CostModel,
    pub arch: Architecture,
    pub lr: f64,
    /// Interior batch size `N`.
    pub n_interior: usize,
    /// Boundary batch size `M`.
    pub n_boundary: usize,
    /// Cycle batch size `K`.
    pub n_cycle: usize,
    pub inner_phi_steps: usize,
    pub outer_iters: usize,
    pub min_iters: usize,
    pub lambda: f64,
    /// Absolute stopping threshold; `None` uses `0.01·max(Ŵ_ab, Ŵ_ba, 1e-6)`.
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub precondition: bool,
    pub deterministic: bool,
    pub workers: usize,
    pub sample_noise_std: f64,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(dim: usize, cost: CostModel) -> Self {
        TrainConfig {
            dim,
            cost,
            arch: Architecture::default(),
            lr: 1e-4,
            n_interior: 2000,
            n_boundary: 2000,
            n_cycle: 2000,
            inner_phi_steps: 5,
            outer_iters: 20_000,
            min_iters: 500,
            lambda: 1.0,
            epsilon: None,
            seed: 0,
            precondition: false,
            deterministic: true,
            workers: 1,
            sample_noise_std: 0.0,
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("n_interior", self.n_interior),
            ("n_boundary", self.n_boundary),
            ("n_cycle", self.n_cycle),
            ("inner_phi_steps", self.inner_phi_steps),
            ("outer_iters", self.outer_iters),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.sample_noise_std >= 0.0) {
            return Err(Error::Config("sample_noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub reports: Vec<LossReport>,
    /// `|Ŵ_ab - Ŵ_ba|` per iteration.
    pub gaps: Vec<f64>,
    /// Seconds since the start of training, per iteration.
    pub wall_clock: Vec<f64>,
    pub stopped_early: bool,
    /// Transport estimates of the returned (preconditioner-composed) fields
    /// on fresh samples of the original measures.
    pub final_w_ab: f64,
    pub final_w_ba: f64,
}

impl TrainHistory {
    pub fn iterations(&self) -> usize {
        self.reports.len()
    }
}

/// The stopping rule: `iter ≥ min_iters` and `|w_ab - w_ba| < ε`.
pub fn should_stop(w_ab: f64, w_ba: f64, epsilon: f64, iter: usize, min_iters: usize) -> bool {
    iter >= min_iters && (w_ab - w_ba).abs() < epsilon
}

/// Moment-matching affine map with `P♯ρ_a` roughly overlapping `ρ_b`:
/// `σ = sqrt(tr Σ_b / tr Σ_a)`, `μ = m_b - σ m_a`.
pub fn fit_preconditioner(samples_a: &PointCloud, samples_b: &PointCloud) -> Result<Preconditioner> {
    if samples_a.len() < 2 || samples_b.len() < 2 {
        return Err(Error::Argument("preconditioner fit needs at least 2 samples per side".into()));
    }
    if samples_a.dim() != samples_b.dim() {
        return Err(Error::Shape("preconditioner samples differ in dimension".into()));
    }
    let tr_a = samples_a.covariance().diag().sum();
    let tr_b = samples_b.covariance().diag().sum();
    let sigma = if tr_a > 1e-300 && tr_b > 0.0 {
        (tr_b / tr_a).sqrt()
    } else {
        1.0
    };
    let mu = samples_b.mean() - &(samples_a.mean() * sigma);
    Preconditioner::new(sigma, mu)
}

/// Something that can draw i.i.d. points.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn draw(&self, n: usize, rng: &mut dyn RngCore) -> Result<PointCloud>;
}

impl SampleSource for Sampler {
    fn dim(&self) -> usize {
        Sampler::dim(self)
    }

    fn draw(&self, n: usize, rng: &mut dyn RngCore) -> Result<PointCloud> {
        self.sample(n, rng)
    }
}

/// Why a checkpoint hook fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointReason {
    Periodic,
    /// Training hit a non-finite value; the state passed is the last good one.
    Abort,
}

struct Players {
    f: AdamState,
    g: AdamState,
    phi_f: AdamState,
    phi_g: AdamState,
}

struct DirectionBatch {
    interior: InteriorBatch,
    points: Array2<f64>,
    boundary: BoundaryBatch,
}

/// Trains from scratch and returns the final state and history.
pub fn train(config: &TrainConfig, sampler_a: &dyn SampleSource, sampler_b: &dyn SampleSource) -> Result<(GeoState, TrainHistory)> {
    train_with_hook(config, sampler_a, sampler_b, &mut |_, _, _| Ok(()))
}

/// [`train`] with a callback for periodic and abort checkpoints.
pub fn train_with_hook(
    config: &TrainConfig,
    sampler_a: &dyn SampleSource,
    sampler_b: &dyn SampleSource,
    hook: &mut dyn FnMut(&GeoState, &TrainHistory, CheckpointReason) -> Result<()>,
) -> Result<(GeoState, TrainHistory)> {
    config.validate()?;
    for (name, s) in [("source", sampler_a), ("target", sampler_b)] {
        if s.dim() != config.dim {
            return Err(Error::Argument(format!(
                "{name} sampler produces {}-dim points, config expects {}",
                s.dim(),
                config.dim
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = GeoState::init(config.dim, config.cost, config.arch, &mut rng)?;
    if config.precondition {
        let n = config.n_interior.max(2000);
        let a = sampler_a.draw(n, &mut rng)?;
        let b = sampler_b.draw(n, &mut rng)?;
        state.precond = fit_preconditioner(&a, &b)?;
        if !config.cost.is_quadratic() {
            log::warn!("preconditioning with a non-quadratic cost does not preserve optimality");
        }
    }
    let mut players = Players {
        f: AdamState::new(&state.f_net),
        g: AdamState::new(&state.g_net),
        phi_f: AdamState::new(&state.phi_f),
        phi_g: AdamState::new(&state.phi_g),
    };
    let mut history = TrainHistory::default();
    let start = Instant::now();
    let mut last_good = state.clone();

    for iter in 1..=config.outer_iters {
        match outer_step(config, &mut state, &mut players, sampler_a, sampler_b, &mut rng) {
            Ok(report) => {
                let gap = (report.w_ab - report.w_ba).abs();
                history.reports.push(report);
                history.gaps.push(gap);
                history.wall_clock.push(start.elapsed().as_secs_f64());
                last_good.clone_from(&state);
                if iter % 100 == 0 || iter == 1 {
                    log::info!(
                        "iter {iter}: W_ab={:.5} W_ba={:.5} L_ab={:.5} L_ba={:.5} K={:.2e} hjb={:.3e}",
                        report.w_ab,
                        report.w_ba,
                        report.l_ab,
                        report.l_ba,
                        report.k_reg,
                        report.hjb_residual_mean
                    );
                }
                if config.checkpoint_every > 0 && iter % config.checkpoint_every == 0 {
                    hook(&state, &history, CheckpointReason::Periodic)?;
                }
                let eps = config
                    .epsilon
                    .unwrap_or_else(|| 0.01 * report.w_ab.max(report.w_ba).max(1e-6));
                if should_stop(report.w_ab, report.w_ba, eps, iter, config.min_iters) {
                    history.stopped_early = iter < config.outer_iters;
                    log::info!("stopping at iteration {iter}: gap {gap:.3e} < {eps:.3e}");
                    break;
                }
            }
            Err(e) => {
                log::error!("training aborted at iteration {iter}: {e}");
                hook(&last_good, &history, CheckpointReason::Abort)?;
                return Err(match e {
                    Error::Training(msg) => Error::Training(format!("iteration {iter}: {msg}")),
                    other => other,
                });
            }
        }
    }

    let m = config.n_boundary;
    let a = sampler_a.draw(m, &mut rng)?;
    let b = sampler_b.draw(m, &mut rng)?;
    history.final_w_ab = wass_estimate(&state.forward_field(), a.points(), &config.cost)?;
    history.final_w_ba = wass_estimate(&state.backward_field(), b.points(), &config.cost)?;
    Ok((state, history))
}

fn draw(
    sampler: &dyn SampleSource,
    n: usize,
    precond: Option<&Preconditioner>,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let cloud = sampler.draw(n, rng)?;
    let mut pts = match precond {
        Some(p) => p.apply(cloud.points()),
        None => cloud.into_inner(),
    };
    if noise > 0.0 {
        pts.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(pts)
}

fn direction_batch(
    config: &TrainConfig,
    field: &Mlp,
    source: (&dyn SampleSource, Option<&Preconditioner>),
    target: (&dyn SampleSource, Option<&Preconditioner>),
    rng: &mut ChaCha8Rng,
) -> Result<DirectionBatch> {
    let noise = config.sample_noise_std;
    let z = draw(source.0, config.n_interior, source.1, noise, rng)?;
    let t: Vec<f64> = (0..config.n_interior).map(|_| rng.random::<f64>()).collect();
    let interior = InteriorBatch::new(z, t)?;
    let points = interior.pushed(field)?;
    let ws = draw(source.0, config.n_boundary, source.1, noise, rng)?;
    let wt = draw(target.0, config.n_boundary, target.1, noise, rng)?;
    Ok(DirectionBatch {
        interior,
        points,
        boundary: BoundaryBatch::new(ws, wt)?,
    })
}

fn ascend_phi(config: &TrainConfig, phi: &mut Mlp, adam: &mut AdamState, batch: &DirectionBatch) -> Result<()> {
    let want = Wants {
        phi: true,
        points: false,
    };
    for _ in 0..config.inner_phi_steps {
        let term = phi_term(phi, batch.points.view(), batch.interior.t(), Some(&batch.boundary), &config.cost, want)?;
        adam_step(phi, adam, term.grad_phi.as_ref().expect("requested"), config.lr, Direction::Ascend)?;
    }
    Ok(())
}

/// Field gradient of one direction's potential loss; returns `(grad, value, residual)`.
fn field_grad(config: &TrainConfig, phi: &Mlp, field: &Mlp, batch: &DirectionBatch) -> Result<(Mlp, f64, f64)> {
    let want = Wants {
        phi: false,
        points: true,
    };
    let term = phi_term(phi, batch.points.view(), batch.interior.t(), Some(&batch.boundary), &config.cost, want)?;
    let mut grad = field.zeros_like();
    field_grad_from_points(field, &batch.interior, term.grad_points.expect("requested").view(), &mut grad)?;
    Ok((grad, term.value, term.residual_abs_mean))
}

fn join<A: Send, B: Send>(parallel: bool, a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B) {
    if parallel {
        rayon::join(a, b)
    } else {
        (a(), b())
    }
}

fn outer_step(
    config: &TrainConfig,
    state: &mut GeoState,
    players: &mut Players,
    sampler_a: &dyn SampleSource,
    sampler_b: &dyn SampleSource,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let precond = config.precondition.then_some(&state.precond);
    // Direction ab: P♯ρ_a → ρ_b. Direction ba: ρ_b → P♯ρ_a.
    let batch_ab = direction_batch(config, &state.f_net, (sampler_a, precond), (sampler_b, None), rng)?;
    let batch_ba = direction_batch(config, &state.g_net, (sampler_b, None), (sampler_a, precond), rng)?;

    let parallel = config.workers > 1;
    let GeoState {
        f_net,
        g_net,
        phi_f,
        phi_g,
        ..
    } = state;
    let (ra, rb) = join(
        parallel,
        || ascend_phi(config, phi_f, &mut players.phi_f, &batch_ab),
        || ascend_phi(config, phi_g, &mut players.phi_g, &batch_ba),
    );
    ra?;
    rb?;

    let xi_a = draw(sampler_a, config.n_cycle, precond, config.sample_noise_std, rng)?;
    let xi_b = draw(sampler_b, config.n_cycle, None, config.sample_noise_std, rng)?;

    let (fa, fb) = join(
        parallel,
        || field_grad(config, phi_f, f_net, &batch_ab),
        || field_grad(config, phi_g, g_net, &batch_ba),
    );
    let (mut grad_f, l_ab, res_ab) = fa?;
    let (mut grad_g, l_ba, res_ba) = fb?;
    let cycle = loss_cycle(f_net, g_net, xi_a.view(), xi_b.view(), config.lambda)?;
    grad_f.scaled_add(1.0, &cycle.grad_f);
    grad_g.scaled_add(1.0, &cycle.grad_g);
    adam_step(f_net, &mut players.f, &grad_f, config.lr, Direction::Descend)?;
    adam_step(g_net, &mut players.g, &grad_g, config.lr, Direction::Descend)?;

    let w_ab = wass_estimate(&*f_net, batch_ab.boundary.source(), &config.cost)?;
    let w_ba = wass_estimate(&*g_net, batch_ba.boundary.source(), &config.cost)?;
    if !(w_ab.is_finite() && w_ba.is_finite()) {
        return Err(Error::Training("transport estimate is not finite".into()));
    }
    Ok(LossReport {
        l_ab,
        l_ba,
        k_reg: cycle.value,
        w_ab,
        w_ba,
        hjb_residual_mean: 0.5 * (res_ab + res_ba),
    })
}

/// Mean squared distance between a field and a reference map's displacement
/// `T(x) - x` over `samples`.
pub fn field_l2_error(
    field: &dyn crate::geoflow::VectorField,
    reference: impl Fn(ArrayView2<f64>) -> Array2<f64>,
    samples: ArrayView2<f64>,
) -> Result<f64> {
    let v = field.eval_batch(samples)?;
    let target = reference(samples) - &samples;
    Ok((&v - &target).mapv(|e| e * e).sum() / samples.nrows() as f64)
}
