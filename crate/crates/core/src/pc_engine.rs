//! Predictive-coding energy, activity inference and weight gradients.
//!
//! The energy is `F = (1/2P) Σ_μ Σ_ℓ ‖z^(ℓ)_μ − pred_ℓ(z^(ℓ−1)_μ)‖²`, where
//! `pred_ℓ` are the layer maps of [`NetworkState::layer_forward`]. The
//! output prediction includes the `1/γ` factor, so `F` at the forward pass
//! equals the MSE loss. Inference steps are `z ← z − β ∇_z F` with this
//! normalisation, updating all layers from the previous iterate.

use serde::{Deserialize, Serialize};

use crate::bp_engine::GradientBundle;
use crate::network::{Batch, NetworkState};
use crate::numkit::{BlockTridiagonal, Matrix};
use crate::{Error, Result};

/// Latent activities `z^(0..=L)`, batch-major, with per-layer clamp flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityState {
    pub layers: Vec<Matrix>,
    pub clamped: Vec<bool>,
}

impl ActivityState {
    /// `z^(0) = x`, `z^(L) = y` clamped; hidden layers set to the forward pass.
    pub fn from_forward(net: &NetworkState, batch: &Batch) -> Result<Self> {
        let trace = net.forward(&batch.x)?;
        let mut layers = Vec::with_capacity(net.depth() + 1);
        layers.push(batch.x.clone());
        layers.extend(trace.hidden);
        layers.push(batch.y.clone());
        Ok(Self::clamped_ends(layers))
    }

    /// Hidden layers initialised to zero.
    pub fn zeros(net: &NetworkState, batch: &Batch) -> Self {
        let p = batch.len();
        let mut layers = vec![batch.x.clone()];
        for _ in 1..net.depth() {
            layers.push(Matrix::zeros(p, net.arch().width));
        }
        layers.push(batch.y.clone());
        Self::clamped_ends(layers)
    }

    fn clamped_ends(layers: Vec<Matrix>) -> Self {
        let n = layers.len();
        let clamped = (0..n).map(|i| i == 0 || i == n - 1).collect();
        Self { layers, clamped }
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Euclidean distance over all layers.
    pub fn distance(&self, other: &ActivityState) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("activity depth mismatch".into()));
        }
        let mut s = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            s += a.sub(b)?.sum_sq();
        }
        Ok(s.sqrt())
    }
}

/// Summary of one inference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub iterations_run: usize,
    pub final_energy: f64,
    pub final_activity_grad_norm: f64,
    pub energy_trajectory: Vec<f64>,
    pub converged: bool,
}

impl InferenceReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityInit {
    Forward,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub beta: f64,
    pub max_iters: usize,
    /// Stop once `‖∇_z F‖ ≤ grad_tol · ‖∇_z F‖` at the initial activities.
    pub grad_tol: f64,
    pub init: ActivityInit,
}

impl InferenceOptions {
    pub fn new(beta: f64, max_iters: usize, grad_tol: f64) -> Self {
        Self {
            beta,
            max_iters,
            grad_tol,
            init: ActivityInit::Forward,
        }
    }
}

/// Per-layer prediction errors `e^(ℓ) = z^(ℓ) − pred_ℓ(z^(ℓ−1))` and the
/// pre-activations they were computed from (index `ℓ − 1`).
struct Residuals {
    errors: Vec<Matrix>,
    pre: Vec<Matrix>,
    energy: f64,
}

fn check_acts(net: &NetworkState, acts: &ActivityState, batch: &Batch) -> Result<()> {
    let l = net.depth();
    if acts.layers.len() != l + 1 || acts.clamped.len() != l + 1 {
        return Err(Error::Shape(format!(
            "activities have {} layers for depth {l}",
            acts.layers.len()
        )));
    }
    let a = net.arch();
    let p = batch.len();
    for (i, z) in acts.layers.iter().enumerate() {
        let width = if i == 0 {
            a.input_dim
        } else if i == l {
            a.output_dim
        } else {
            a.width
        };
        if z.shape() != (p, width) {
            return Err(Error::Shape(format!(
                "z^({i}) is {:?}, expected {:?}",
                z.shape(),
                (p, width)
            )));
        }
    }
    if !acts.clamped[0] {
        return Err(Error::Unsupported("the input layer must stay clamped".into()));
    }
    if batch.y.shape() != acts.layers[l].shape() {
        return Err(Error::Shape("targets do not match the output activities".into()));
    }
    Ok(())
}

fn residuals(net: &NetworkState, acts: &ActivityState) -> Result<Residuals> {
    let l = net.depth();
    let p = acts.layers[0].rows() as f64;
    let mut errors = Vec::with_capacity(l);
    let mut pre = Vec::with_capacity(l);
    let mut sq = 0.0;
    for layer in 1..=l {
        let (u, pred) = net.layer_forward(layer, &acts.layers[layer - 1])?;
        let e = acts.layers[layer].sub(&pred)?;
        sq += e.sum_sq();
        errors.push(e);
        pre.push(u);
    }
    Ok(Residuals {
        errors,
        pre,
        energy: sq / (2.0 * p),
    })
}

pub fn energy(net: &NetworkState, acts: &ActivityState, batch: &Batch) -> Result<f64> {
    check_acts(net, acts, batch)?;
    Ok(residuals(net, acts)?.energy)
}

fn activity_grads_from(net: &NetworkState, acts: &ActivityState, r: &Residuals) -> Result<Vec<Matrix>> {
    let l = net.depth();
    let p = acts.layers[0].rows() as f64;
    let mut grads = Vec::with_capacity(l + 1);
    for layer in 0..=l {
        let z = &acts.layers[layer];
        if acts.clamped[layer] {
            grads.push(Matrix::zeros(z.rows(), z.cols()));
            continue;
        }
        let mut g = r.errors[layer - 1].clone();
        if layer < l {
            let (fb, _) = net.layer_backward(layer + 1, z, &r.pre[layer], &r.errors[layer])?;
            g.add_scaled(&fb.expect("layer above the input has an input cotangent"), -1.0)?;
        }
        g.scale_in_place(1.0 / p);
        grads.push(g);
    }
    Ok(grads)
}

/// `∂F/∂z^(ℓ)` for `ℓ ∈ 0..=L`; clamped layers get zero matrices.
///
/// Layer `ℓ` only reads `z^(ℓ−1)`, `z^(ℓ)`, `z^(ℓ+1)`, `W^(ℓ)` and `W^(ℓ+1)`.
pub fn activity_gradients(net: &NetworkState, acts: &ActivityState, batch: &Batch) -> Result<Vec<Matrix>> {
    check_acts(net, acts, batch)?;
    let r = residuals(net, acts)?;
    activity_grads_from(net, acts, &r)
}

fn grad_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
}

/// Gradient descent on the activities, starting from the configured init.
pub fn infer_gd(
    net: &NetworkState,
    batch: &Batch,
    beta: f64,
    max_iters: usize,
    grad_tol: f64,
) -> Result<(ActivityState, InferenceReport)> {
    infer_with(net, batch, &InferenceOptions::new(beta, max_iters, grad_tol))
}

pub fn infer_with(
    net: &NetworkState,
    batch: &Batch,
    opts: &InferenceOptions,
) -> Result<(ActivityState, InferenceReport)> {
    let acts = match opts.init {
        ActivityInit::Forward => ActivityState::from_forward(net, batch)?,
        ActivityInit::Zero => ActivityState::zeros(net, batch),
    };
    infer_from(net, batch, acts, opts)
}

/// Runs inference from explicit starting activities.
pub fn infer_from(
    net: &NetworkState,
    batch: &Batch,
    mut acts: ActivityState,
    opts: &InferenceOptions,
) -> Result<(ActivityState, InferenceReport)> {
    if !(opts.beta >= 0.0 && opts.beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", opts.beta)));
    }
    if !(opts.grad_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("grad_tol must be >= 0, got {}", opts.grad_tol)));
    }
    check_acts(net, &acts, batch)?;
    let mut r = residuals(net, &acts)?;
    let mut grads = activity_grads_from(net, &acts, &r)?;
    let g0 = grad_norm(&grads);
    let tol = opts.grad_tol * g0;
    let mut gnorm = g0;
    let mut trajectory = vec![r.energy];
    let mut iters = 0;
    while iters < opts.max_iters && gnorm > tol {
        for (z, (g, &c)) in acts.layers.iter_mut().zip(grads.iter().zip(&acts.clamped)) {
            if !c {
                z.add_scaled(g, -opts.beta)?;
            }
        }
        r = residuals(net, &acts)?;
        iters += 1;
        if !r.energy.is_finite() {
            return Err(Error::Diverged(format!(
                "energy became non-finite at inference step {iters} (beta = {}); reduce beta",
                opts.beta
            )));
        }
        grads = activity_grads_from(net, &acts, &r)?;
        gnorm = grad_norm(&grads);
        trajectory.push(r.energy);
    }
    let report = InferenceReport {
        iterations_run: iters,
        final_energy: r.energy,
        final_activity_grad_norm: gnorm,
        energy_trajectory: trajectory,
        converged: gnorm <= tol,
    };
    Ok((acts, report))
}

fn require_linear(net: &NetworkState, what: &str) -> Result<()> {
    if !net.arch().is_linear() {
        return Err(Error::Unsupported(format!(
            "{what} needs a linear network, got activation {}",
            net.arch().activation
        )));
    }
    Ok(())
}

/// Effective linear map `z^(ℓ) ≈ A_ℓ z^(ℓ−1)` of a hidden or output layer,
/// in column-vector convention (`out × in`).
pub(crate) fn effective_map(net: &NetworkState, layer: usize) -> Matrix {
    let mut a = net.weight(layer).scaled(net.pre_coeff(layer) * net.branch_coeff(layer));
    let l = net.depth();
    if net.arch().kind == crate::network::ArchKind::Resnet && layer > 1 && layer < l {
        for i in 0..a.rows() {
            a.set(i, i, a.get(i, i) + 1.0);
        }
    }
    a
}

/// Diagonal and sub-diagonal blocks of the per-sample activity Hessian of a
/// linear network (without the `1/P` factor).
pub fn linear_hessian_blocks(net: &NetworkState) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    require_linear(net, "the activity Hessian")?;
    let l = net.depth();
    let n = net.arch().width;
    let mut diag = Vec::with_capacity(l - 1);
    let mut lower = Vec::with_capacity(l.saturating_sub(2));
    for j in 1..l {
        let a_next = effective_map(net, j + 1);
        let mut d = Matrix::identity(n);
        crate::numkit::gemm(
            1.0,
            &a_next,
            crate::numkit::Transpose::Yes,
            &a_next,
            crate::numkit::Transpose::No,
            1.0,
            &mut d,
        )?;
        diag.push(d);
        if j + 1 < l {
            lower.push(a_next.scaled(-1.0));
        }
    }
    Ok((diag, lower))
}

/// The unique energy minimiser of a linear network, from one
/// block-tridiagonal factorisation shared by all samples.
pub fn solve_linear_equilibrium(net: &NetworkState, batch: &Batch) -> Result<ActivityState> {
    require_linear(net, "solve_linear_equilibrium")?;
    let l = net.depth();
    let n = net.arch().width;
    let mut acts = ActivityState::from_forward(net, batch)?;
    let (diag, lower) = linear_hessian_blocks(net)?;
    let system = BlockTridiagonal::factor(&diag, &lower)?;
    let (first_in, _) = net.layer_forward(1, &batch.x)?;
    let out = effective_map(net, l);
    let mut rhs = vec![0.0; n * (l - 1)];
    for mu in 0..batch.len() {
        rhs.iter_mut().for_each(|v| *v = 0.0);
        rhs[..n].copy_from_slice(first_in.row(mu));
        let back = out.vecmat(batch.y.row(mu))?;
        rhs[n * (l - 2)..].iter_mut().zip(&back).for_each(|(r, b)| *r += b);
        let z = system.solve(&rhs)?;
        for j in 1..l {
            acts.layers[j].row_mut(mu).copy_from_slice(&z[n * (j - 1)..n * j]);
        }
    }
    Ok(acts)
}

/// `H v` for the per-sample activity Hessian of a linear network, where `v`
/// holds one `1 × N` row per hidden layer.
pub fn hessian_vector_product(net: &NetworkState, v: &[Matrix]) -> Result<Vec<Matrix>> {
    require_linear(net, "hessian_vector_product")?;
    let a = net.arch();
    if v.len() + 1 != net.depth() {
        return Err(Error::Shape(format!("{} blocks for depth {}", v.len(), net.depth())));
    }
    // The activity gradient is affine in z; with x = y = 0 it is linear and
    // equals H z / P.
    let batch = Batch::new(Matrix::zeros(1, a.input_dim), Matrix::zeros(1, a.output_dim))?;
    let mut acts = ActivityState::zeros(net, &batch);
    for (j, vj) in v.iter().enumerate() {
        if vj.shape() != (1, a.width) {
            return Err(Error::Shape(format!("block {j} has shape {:?}", vj.shape())));
        }
        acts.layers[j + 1] = vj.clone();
    }
    let mut g = activity_gradients(net, &acts, &batch)?;
    Ok(g.drain(1..net.depth()).collect())
}

/// `∂F/∂W^(ℓ)` at fixed activities; layer `ℓ` reads only `z^(ℓ−1)`, `z^(ℓ)`.
pub fn pc_weight_gradients(net: &NetworkState, acts: &ActivityState, batch: &Batch) -> Result<GradientBundle> {
    check_acts(net, acts, batch)?;
    let r = residuals(net, acts)?;
    let p = batch.len() as f64;
    let mut layers = Vec::with_capacity(net.depth());
    for layer in 1..=net.depth() {
        let (_, mut gw) = net.layer_backward(layer, &acts.layers[layer - 1], &r.pre[layer - 1], &r.errors[layer - 1])?;
        gw.scale_in_place(-1.0 / p);
        layers.push(gw);
    }
    Ok(GradientBundle { layers })
}
