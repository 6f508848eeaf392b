//! Adam with bias correction, usable for both players of a min-max game.

use crate::diffcore::Mlp;
use crate::{Error, Result};

/// Whether a step moves against the gradient (minimise) or along it
/// (maximise).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Mlp,
    pub second_moment: Mlp,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(params: &Mlp) -> Self {
        Self::with_coefficients(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_coefficients(params: &Mlp, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of `params` in place.
///
/// Gradients are checked for finiteness before anything is mutated, so a
/// failed step leaves both `params` and `state` untouched.
pub fn adam_step(
    params: &mut Mlp,
    state: &mut AdamState,
    grads: &Mlp,
    lr: f64,
    direction: Direction,
) -> Result<()> {
    if !params.same_shape(grads)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::Shape("adam: parameter/gradient/state shapes differ".into()));
    }
    if let Some((layer, idx)) = first_non_finite(grads) {
        return Err(Error::Training(format!(
            "non-finite gradient entry {idx} in layer {layer}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let sign = match direction {
        Direction::Descend => -1.0,
        Direction::Ascend => 1.0,
    };
    let m_layers = state.first_moment.layers_mut();
    let v_layers = state.second_moment.layers_mut();
    for (((p, g), m), v) in params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(m_layers.iter_mut())
        .zip(v_layers.iter_mut())
    {
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += sign * lr * m_hat / (v_hat.sqrt() + eps);
        };
        ndarray::Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

fn first_non_finite(grads: &Mlp) -> Option<(usize, usize)> {
    grads.layers().iter().enumerate().find_map(|(k, l)| {
        l.weight
            .iter()
            .chain(l.bias.iter())
            .position(|v| !v.is_finite())
            .map(|i| (k, i))
    })
}
