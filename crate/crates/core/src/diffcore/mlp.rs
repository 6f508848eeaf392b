//! Dense tanh networks with hand-written first- and second-order passes.
//!
//! All passes are batched: a batch is a `B × in_dim` matrix, one sample per
//! row, and every layer is evaluated as a matrix product. The single-vector
//! entry points at the bottom of the file are thin wrappers over a batch of
//! one.
//!
//! Layer recurrence, for hidden layers `k = 1..L-1` and the affine output
//! layer `L`:
//!
//! ```text
//! z_0 = x,  a_k = W_k z_{k-1} + b_k,  z_k = tanh(a_k),  y = a_L
//! ```
//!
//! The tangent recurrence run by [`Mlp::jvp_batch`] is
//! `ȧ_k = W_k ż_{k-1}`, `ż_k = tanh'(a_k) ∘ ȧ_k`, with `ż_0 = u`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::{Error, Result};

/// One affine layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// `tanh` through a single `exp`, with a Taylor series near zero.
///
/// Agrees with `f64::tanh` to a few ulps and is several times faster.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.0625 {
        let x2 = x * x;
        return x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0 + x2 * (-1382.0 / 155925.0))))));
    }
    if a > 20.0 {
        return 1.0f64.copysign(x);
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Parameters of a fully connected network with tanh hidden layers and an
/// identity output layer.
///
/// The same type doubles as the container for parameter gradients and Adam
/// moments, since those share its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    revision: u64,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_width: usize,
        n_hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || (n_hidden > 0 && hidden_width == 0) {
            return Err(Error::Argument(format!(
                "network dimensions must be positive (in={in_dim}, width={hidden_width}, out={out_dim})"
            )));
        }
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden_width, n_hidden));
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp {
            layers,
            revision: 0,
        })
    }

    /// Validates that adjacent shapes chain and every entry is finite.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} != weight rows {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: input width {} does not match previous output {}",
                    layer.in_dim(),
                    layers[k - 1].out_dim()
                )));
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Argument(format!("layer {k} has non-finite entries")));
            }
        }
        Ok(Mlp {
            layers,
            revision: 0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            revision: 0,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access invalidates any tape recorded against this network.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.revision = self.revision.wrapping_add(1);
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_width(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].out_dim()
        } else {
            0
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Row-major weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter();
        for l in self.layers_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| {
                *v = *it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// `self += scale * other`; shapes must agree.
    pub fn scaled_add(&mut self, scale: f64, other: &Mlp) {
        assert!(self.same_shape(other), "scaled_add: shape mismatch");
        for (a, b) in self.layers_mut().iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers_mut() {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim())
    }

    fn check_input(&self, x: &ArrayView2<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "{what} has {} columns, network expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.revision != self.revision
            || tape.hidden.len() != self.n_hidden()
            || tape.input.ncols() != self.in_dim()
            || tape.output.ncols() != self.out_dim()
        {
            return Err(Error::Usage(
                "tape was not recorded by a forward pass of this network".into(),
            ));
        }
        Ok(())
    }

    /// Forward pass over a batch, recording activations.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x, "input")?;
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.n_hidden());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = hidden.last().map_or(x, |h| h.view());
            let mut a = z.dot(&layer.weight.t());
            a += &layer.bias;
            if k == last {
                return Ok(Tape {
                    revision: self.revision,
                    input: x.to_owned(),
                    hidden,
                    output: a,
                    tangent: None,
                });
            }
            a.mapv_inplace(tanh);
            hidden.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// Outputs only, without keeping a tape.
    pub fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x, "input")?;
        let mut z = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut a = z.dot(&layer.weight.t());
            a += &layer.bias;
            if k != last {
                a.mapv_inplace(tanh);
            }
            z = a;
        }
        Ok(z)
    }

    /// Reverse-mode pass for `Σ_i ⟨cot_i, y_i⟩`.
    ///
    /// Returns the per-row input gradients; parameter gradients are added
    /// into `param_grads` when given.
    pub fn backprop(
        &self,
        tape: &Tape,
        cotangent: ArrayView2<f64>,
        param_grads: Option<&mut Mlp>,
    ) -> Result<Array2<f64>> {
        self.check_tape(tape)?;
        if cotangent.dim() != tape.output.dim() {
            return Err(Error::Shape(format!(
                "cotangent shape {:?} != output shape {:?}",
                cotangent.dim(),
                tape.output.dim()
            )));
        }
        let mut grads = param_grads;
        if let Some(g) = grads.as_deref() {
            assert!(self.same_shape(g), "gradient buffer shape mismatch");
        }
        let mut delta = cotangent.to_owned();
        for k in (0..self.layers.len()).rev() {
            let z_prev = if k == 0 {
                tape.input.view()
            } else {
                tape.hidden[k - 1].view()
            };
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[k];
                general_mat_mul(1.0, &delta.t(), &z_prev, 1.0, &mut gl.weight);
                gl.bias += &delta.sum_axis(Axis(0));
            }
            let mut dz = delta.dot(&self.layers[k].weight);
            if k > 0 {
                Zip::from(&mut dz)
                    .and(&tape.hidden[k - 1])
                    .for_each(|d, &z| *d *= 1.0 - z * z);
            }
            delta = dz;
        }
        Ok(delta)
    }

    /// Directional derivative of every output along per-row tangents.
    ///
    /// Caches the tangent activations in `tape` for a later
    /// [`Mlp::grad_of_jvp_batch`] and returns `J u` row by row.
    pub fn jvp_batch(&self, tape: &mut Tape, tangent: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_tape(tape)?;
        if tangent.dim() != tape.input.dim() {
            return Err(Error::Shape(format!(
                "tangent shape {:?} != input shape {:?}",
                tangent.dim(),
                tape.input.dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.n_hidden());
        let mut acts = Vec::with_capacity(self.n_hidden());
        let mut zdot = tangent.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let adot = zdot.dot(&layer.weight.t());
            if k == last {
                let out = adot.clone();
                tape.tangent = Some(TangentCache {
                    input: tangent.to_owned(),
                    pre,
                    acts,
                    output: adot,
                });
                return Ok(out);
            }
            let mut zd = adot.clone();
            Zip::from(&mut zd)
                .and(&tape.hidden[k])
                .for_each(|v, &z| *v *= 1.0 - z * z);
            pre.push(adot);
            acts.push(zd.clone());
            zdot = zd;
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse mode over the tangent-augmented pass of a scalar network.
    ///
    /// With `s_i = D_{u_i} Φ(x_i)` from the last [`Mlp::jvp_batch`], this
    /// differentiates `Σ_i w_i s_i` with the tangents `u_i` held constant.
    /// Returns `∂/∂x_i` row by row and adds parameter gradients into
    /// `param_grads` when given.
    ///
    /// Adjoint rules per tanh layer, with `g = ∂/∂z`, `ġ = ∂/∂ż`:
    /// `∂/∂a = tanh'(a) g + tanh''(a) ȧ ġ`, `∂/∂ȧ = tanh'(a) ġ`, and
    /// `tanh'' = -2 tanh tanh'`.
    pub fn grad_of_jvp_batch(
        &self,
        tape: &Tape,
        weights: ArrayView1<f64>,
        param_grads: Option<&mut Mlp>,
    ) -> Result<Array2<f64>> {
        self.check_tape(tape)?;
        if self.out_dim() != 1 {
            return Err(Error::Usage(format!(
                "grad_of_jvp needs a scalar network, output width is {}",
                self.out_dim()
            )));
        }
        let tc = tape
            .tangent
            .as_ref()
            .ok_or_else(|| Error::Usage("grad_of_jvp called before jvp".into()))?;
        let batch = tape.input.nrows();
        if weights.len() != batch {
            return Err(Error::Shape(format!(
                "{} weights for a batch of {batch}",
                weights.len()
            )));
        }
        let mut grads = param_grads;
        if let Some(g) = grads.as_deref() {
            assert!(self.same_shape(g), "gradient buffer shape mismatch");
        }

        // Output layer is affine: ∂s/∂a_L = 0, ∂s/∂ȧ_L = w.
        let mut ga: Option<Array2<f64>> = None;
        let mut gadot = weights.to_owned().insert_axis(Axis(1));
        for k in (0..self.layers.len()).rev() {
            let (z_prev, zdot_prev) = if k == 0 {
                (tape.input.view(), tc.input.view())
            } else {
                (tape.hidden[k - 1].view(), tc.acts[k - 1].view())
            };
            let w = &self.layers[k].weight;
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[k];
                if let Some(ga) = &ga {
                    general_mat_mul(1.0, &ga.t(), &z_prev, 1.0, &mut gl.weight);
                    gl.bias += &ga.sum_axis(Axis(0));
                }
                general_mat_mul(1.0, &gadot.t(), &zdot_prev, 1.0, &mut gl.weight);
            }
            let gz = ga.as_ref().map(|ga| ga.dot(w));
            let gzdot = gadot.dot(w);
            if k == 0 {
                return Ok(gz.unwrap_or_else(|| Array2::zeros((batch, self.in_dim()))));
            }
            // Step through tanh of hidden layer k-1.
            let z = &tape.hidden[k - 1];
            let adot = &tc.pre[k - 1];
            let mut new_ga = Array2::zeros(z.raw_dim());
            let mut new_gadot = Array2::zeros(z.raw_dim());
            match &gz {
                Some(gz) => Zip::from(&mut new_ga)
                    .and(&mut new_gadot)
                    .and(z)
                    .and(adot)
                    .and(gz)
                    .and(&gzdot)
                    .for_each(|ga, gad, &z, &ad, &g, &gd| {
                        let d1 = 1.0 - z * z;
                        let d2 = -2.0 * z * d1;
                        *ga = d1 * g + d2 * ad * gd;
                        *gad = d1 * gd;
                    }),
                None => Zip::from(&mut new_ga)
                    .and(&mut new_gadot)
                    .and(z)
                    .and(adot)
                    .and(&gzdot)
                    .for_each(|ga, gad, &z, &ad, &gd| {
                        let d1 = 1.0 - z * z;
                        *ga = -2.0 * z * d1 * ad * gd;
                        *gad = d1 * gd;
                    }),
            }
            ga = Some(new_ga);
            gadot = new_gadot;
        }
        unreachable!("network has at least one layer")
    }
}

/// Activations recorded by a forward pass, plus tangent activations once a
/// JVP has run.
#[derive(Debug, Clone)]
pub struct Tape {
    revision: u64,
    input: Array2<f64>,
    /// Post-tanh activations of the hidden layers.
    hidden: Vec<Array2<f64>>,
    output: Array2<f64>,
    tangent: Option<TangentCache>,
}

#[derive(Debug, Clone)]
struct TangentCache {
    input: Array2<f64>,
    /// `ȧ_k` for hidden layers.
    pre: Vec<Array2<f64>>,
    /// `ż_k` for hidden layers.
    acts: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.output.view()
    }

    pub fn input(&self) -> ArrayView2<'_, f64> {
        self.input.view()
    }

    pub fn output_tangent(&self) -> Option<ArrayView2<'_, f64>> {
        self.tangent.as_ref().map(|t| t.output.view())
    }

    pub fn has_tangent(&self) -> bool {
        self.tangent.is_some()
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("1 x n view")
}

/// Evaluates the network at a single point.
pub fn mlp_forward(params: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    Ok(params.eval_batch(row(input))?.into_raw_vec_and_offset().0)
}

/// Input and parameter gradients of `⟨cotangent, y⟩` from a recorded tape.
pub fn mlp_reverse(params: &Mlp, tape: &Tape, cotangent: &[f64]) -> Result<(Vec<f64>, Mlp)> {
    if tape.batch_size() != 1 {
        return Err(Error::Usage("mlp_reverse expects a single-sample tape".into()));
    }
    let mut grads = params.zeros_like();
    let gx = params.backprop(tape, row(cotangent), Some(&mut grads))?;
    Ok((gx.into_raw_vec_and_offset().0, grads))
}

/// Output and Jacobian-vector product at a single point.
pub fn mlp_jvp(params: &Mlp, input: &[f64], tangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if tangent.len() != input.len() {
        return Err(Error::Shape(format!(
            "tangent length {} != input length {}",
            tangent.len(),
            input.len()
        )));
    }
    let mut tape = params.forward_batch(row(input))?;
    let jv = params.jvp_batch(&mut tape, row(tangent))?;
    Ok((
        tape.output.row(0).to_vec(),
        jv.into_raw_vec_and_offset().0,
    ))
}

/// `s = D_u Φ(x)` with its input and parameter gradients, `u` held fixed.
pub fn mlp_grad_of_jvp(params: &Mlp, input: &[f64], tangent: &[f64]) -> Result<(f64, Vec<f64>, Mlp)> {
    if params.out_dim() != 1 {
        return Err(Error::Usage(format!(
            "grad_of_jvp needs a scalar network, output width is {}",
            params.out_dim()
        )));
    }
    if tangent.len() != input.len() {
        return Err(Error::Shape(format!(
            "tangent length {} != input length {}",
            tangent.len(),
            input.len()
        )));
    }
    let mut tape = params.forward_batch(row(input))?;
    let s = params.jvp_batch(&mut tape, row(tangent))?[[0, 0]];
    let mut grads = params.zeros_like();
    let gx = params.grad_of_jvp_batch(&tape, ndarray::aview1(&[1.0]), Some(&mut grads))?;
    Ok((s, gx.into_raw_vec_and_offset().0, grads))
}
