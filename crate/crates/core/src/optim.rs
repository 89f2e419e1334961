//! Weight updates: gradient descent and Adam under the parameterised
//! learning rate `η = η₀ γ² N^(−c)`.

use serde::{Deserialize, Serialize};

use crate::blob::{Reader, Writer};
use crate::bp_engine::GradientBundle;
use crate::network::{Batch, NetworkState};
use crate::numkit::{gaussian_matrix, Matrix, RngStream};
use crate::pc_engine::hessian_vector_product;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Gd,
    Adam,
}

impl std::str::FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gd" | "sgd" => Ok(Rule::Gd),
            "adam" => Ok(Rule::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimiser `{other}` (valid: gd, adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub rule: Rule,
    pub eta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiply Adam's rate by `(LN)^(−1/2)`.
    pub width_depth_scaling: bool,
    /// Include `γ² N^(−c)` in Adam's base rate (always on for GD).
    pub adam_uses_param_scaling: bool,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

const OPT_MAGIC: &[u8; 4] = b"PCOS";

impl OptimState {
    pub fn gd(eta0: f64) -> Self {
        Self::new(Rule::Gd, eta0)
    }

    pub fn adam(eta0: f64) -> Self {
        Self::new(Rule::Adam, eta0)
    }

    pub fn new(rule: Rule, eta0: f64) -> Self {
        Self {
            rule,
            eta0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            width_depth_scaling: false,
            adam_uses_param_scaling: true,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_width_depth_scaling(mut self, on: bool) -> Self {
        self.width_depth_scaling = on;
        self
    }

    /// Base rate for `net`: `η₀ γ² N^(−c)`, optionally with the Adam depth
    /// and width factor.
    pub fn learning_rate(&self, net: &NetworkState) -> f64 {
        let s = net.scales();
        let n = net.arch().width as f64;
        let param = s.gamma * s.gamma * n.powf(-net.params().c);
        match self.rule {
            Rule::Gd => self.eta0 * param,
            Rule::Adam => {
                let base = if self.adam_uses_param_scaling { self.eta0 * param } else { self.eta0 };
                if self.width_depth_scaling {
                    base / (net.depth() as f64 * n).sqrt()
                } else {
                    base
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta0 must be > 0, got {}", self.eta0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("Adam epsilon must be >= 0".into()));
        }
        Ok(())
    }

    /// Applies one update in place and increments `t`.
    pub fn step(&mut self, net: &mut NetworkState, grads: &GradientBundle) -> Result<()> {
        self.validate()?;
        if grads.layers.len() != net.weights().len()
            || grads.layers.iter().zip(net.weights()).any(|(g, w)| g.shape() != w.shape())
        {
            return Err(Error::Shape("gradient shapes do not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient at optimiser step {}", self.t + 1)));
        }
        let eta = self.learning_rate(net);
        match self.rule {
            Rule::Gd => {
                for (w, g) in net.weights_mut().iter_mut().zip(&grads.layers) {
                    w.add_scaled(g, -eta)?;
                }
            }
            Rule::Adam => {
                if self.m.is_empty() {
                    self.m = grads.layers.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                if self.m.iter().zip(&grads.layers).any(|(m, g)| m.shape() != g.shape()) {
                    return Err(Error::Shape("Adam moments do not match the gradient".into()));
                }
                let t = (self.t + 1) as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                for ((w, g), (m, v)) in net
                    .weights_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let ws = w.as_mut_slice();
                    let ms = m.as_mut_slice();
                    let vs = v.as_mut_slice();
                    for (i, &gi) in g.as_slice().iter().enumerate() {
                        ms[i] = b1 * ms[i] + (1.0 - b1) * gi;
                        vs[i] = b2 * vs[i] + (1.0 - b2) * gi * gi;
                        let mhat = ms[i] / c1;
                        let vhat = vs[i] / c2;
                        ws[i] -= eta * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        self.t += 1;
        net.validate()
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = Writer::new(OPT_MAGIC);
        w.u8(match self.rule {
            Rule::Gd => 0,
            Rule::Adam => 1,
        });
        w.u8(self.width_depth_scaling as u8);
        w.u8(self.adam_uses_param_scaling as u8);
        for v in [self.eta0, self.beta1, self.beta2, self.epsilon] {
            w.f64(v);
        }
        w.u64(self.t);
        w.matrices(&self.m);
        w.matrices(&self.v);
        w.finish()
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, OPT_MAGIC)?;
        let rule = match r.u8()? {
            0 => Rule::Gd,
            1 => Rule::Adam,
            k => return Err(Error::Format(format!("unknown optimiser code {k}"))),
        };
        let width_depth_scaling = r.u8()? != 0;
        let adam_uses_param_scaling = r.u8()? != 0;
        let eta0 = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let epsilon = r.f64()?;
        let t = r.u64()?;
        let m = r.matrices()?;
        let v = r.matrices()?;
        r.finish()?;
        if m.len() != v.len() {
            return Err(Error::Format("moment lists differ in length".into()));
        }
        let opt = Self {
            rule,
            eta0,
            beta1,
            beta2,
            epsilon,
            width_depth_scaling,
            adam_uses_param_scaling,
            t,
            m,
            v,
        };
        opt.validate()?;
        Ok(opt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub lambda_max: f64,
    pub iterations: usize,
    pub converged: bool,
}

const POWER_MAX_ITERS: usize = 20_000;
const POWER_TOL: f64 = 1e-9;

/// Largest eigenvalue of the per-sample activity Hessian of a linear
/// network, by power iteration on Hessian-vector products. The Hessian does
/// not depend on the data, so `batch` only fixes the shapes.
pub fn power_iteration_lmax(net: &NetworkState, batch: &Batch) -> Result<PowerIteration> {
    if batch.x.cols() != net.arch().input_dim || batch.y.cols() != net.arch().output_dim {
        return Err(Error::Shape("batch does not match the network".into()));
    }
    let n = net.arch().width;
    let rng = RngStream::new(0x5EED);
    let mut v: Vec<Matrix> = (1..net.depth())
        .map(|j| gaussian_matrix(&mut rng.child(j as u64), 1, n, 1.0))
        .collect::<std::result::Result<_, _>>()?;
    normalise(&mut v);
    let mut lambda = 0.0;
    for it in 1..=POWER_MAX_ITERS {
        let mut hv = hessian_vector_product(net, &v)?;
        let rq: f64 = hv.iter().zip(&v).map(|(a, b)| dot_m(a, b)).sum();
        let nrm = normalise(&mut hv);
        if nrm == 0.0 {
            return Ok(PowerIteration { lambda_max: 0.0, iterations: it, converged: true });
        }
        let done = (rq - lambda).abs() <= POWER_TOL * rq.abs();
        lambda = rq;
        v = hv;
        if done {
            return Ok(PowerIteration { lambda_max: lambda, iterations: it, converged: true });
        }
    }
    Ok(PowerIteration {
        lambda_max: lambda,
        iterations: POWER_MAX_ITERS,
        converged: false,
    })
}

fn dot_m(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn normalise(v: &mut [Matrix]) -> f64 {
    let nrm = v.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if nrm > 0.0 {
        v.iter_mut().for_each(|m| m.scale_in_place(1.0 / nrm));
    }
    nrm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::pc_engine::linear_hessian_blocks;
    use crate::parameterization::preset;

    fn scalar_net(name: &str, w: f64) -> NetworkState {
        let arch = Architecture::mlp(2, 1, 1, 1).unwrap();
        let ws = vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap(), Matrix::from_vec(1, 1, vec![w]).unwrap()];
        NetworkState::from_weights(arch, preset(name).unwrap(), ws).unwrap()
    }

    fn grads_of(net: &NetworkState, v: f64) -> GradientBundle {
        let mut g = GradientBundle::zeros_like(net);
        g.layers.iter_mut().for_each(|m| m.as_mut_slice().iter_mut().for_each(|x| *x = v));
        g
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Matrix) -> Vec<f64> {
        let n = a.rows();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a.get(i, j).powi(2)).sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        (0..n).map(|i| a.get(i, i)).collect()
    }

    #[test]
    fn gd_examples() {
        let mut net = scalar_net("SP", 1.0);
        let mut opt = OptimState::gd(0.1);
        let g = grads_of(&net, 2.0);
        opt.step(&mut net, &g).unwrap();
        assert!((net.weight(2).get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(opt.t, 1);

        let arch = Architecture::mlp(3, 4, 2, 1).unwrap();
        let net = NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(0)).unwrap();
        assert!((OptimState::gd(0.3).learning_rate(&net) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn gd_step_is_exact_flat_update() {
        let arch = Architecture::resnet(4, 5, 3, 2).unwrap();
        let mut net = NetworkState::init(arch, preset("muP").unwrap().with_gamma0(2.0), &RngStream::new(1)).unwrap();
        let rng = RngStream::new(2);
        let g = GradientBundle {
            layers: net.weights().iter().enumerate().map(|(i, w)| gaussian_matrix(&mut rng.child(i as u64), w.rows(), w.cols(), 1.0).unwrap()).collect(),
        };
        let before: Vec<f64> = net.weights().iter().flat_map(|w| w.as_slice().to_vec()).collect();
        let mut opt = OptimState::gd(0.05);
        let eta = opt.learning_rate(&net);
        opt.step(&mut net, &g).unwrap();
        let after: Vec<f64> = net.weights().iter().flat_map(|w| w.as_slice().to_vec()).collect();
        for ((a, b), gi) in after.iter().zip(&before).zip(g.flatten()) {
            assert!((a - (b - eta * gi)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_sign_times_rate() {
        for scaling in [false, true] {
            let arch = Architecture::mlp(3, 4, 2, 1).unwrap();
            let mut net = NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(3)).unwrap();
            let before = net.clone();
            let mut opt = OptimState::adam(1e-3).with_width_depth_scaling(scaling);
            let eta = opt.learning_rate(&net);
            let expected = if scaling { 1e-3 * 4.0 / 12f64.sqrt() } else { 4e-3 };
            assert!((eta - expected).abs() < 1e-15);
            let g = grads_of(&net, -0.5);
            opt.step(&mut net, &g).unwrap();
            for (a, b) in net.weights().iter().zip(before.weights()) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!(((x - y) - eta).abs() < 1e-7 * eta);
                }
            }
        }
    }

    #[test]
    fn adam_is_scale_invariant() {
        let arch = Architecture::mlp(3, 4, 2, 1).unwrap();
        let base = NetworkState::init(arch, preset("SP").unwrap(), &RngStream::new(4)).unwrap();
        let rng = RngStream::new(5);
        let g = GradientBundle {
            layers: base
                .weights()
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    gaussian_matrix(&mut rng.child(i as u64), w.rows(), w.cols(), 1.0)
                        .unwrap()
                        .map(|v| v.signum() * (v.abs() + 1e-3))
                })
                .collect(),
        };
        let mut g10 = g.clone();
        g10.scale_in_place(10.0);
        let (mut a, mut b) = (base.clone(), base.clone());
        OptimState::adam(0.01).step(&mut a, &g).unwrap();
        OptimState::adam(0.01).step(&mut b, &g10).unwrap();
        for ((x, y), w) in a.weights().iter().zip(b.weights()).zip(base.weights()) {
            for ((xa, ya), wa) in x.as_slice().iter().zip(y.as_slice()).zip(w.as_slice()) {
                let (da, db) = (xa - wa, ya - wa);
                assert!((da - db).abs() <= 1e-6 * da.abs());
            }
        }
    }

    #[test]
    fn step_rejects_bad_gradients_and_is_deterministic() {
        let mut net = scalar_net("SP", 1.0);
        let mut bad = grads_of(&net, 1.0);
        bad.layers[0].set(0, 0, f64::NAN);
        assert!(matches!(OptimState::gd(0.1).step(&mut net, &bad), Err(Error::Diverged(_))));
        let wrong = GradientBundle { layers: vec![Matrix::zeros(2, 2)] };
        assert!(OptimState::gd(0.1).step(&mut net, &wrong).is_err());

        let (mut a, mut b) = (scalar_net("SP", 0.3), scalar_net("SP", 0.3));
        let (mut oa, mut ob) = (OptimState::adam(0.1), OptimState::adam(0.1));
        for _ in 0..3 {
            let g = grads_of(&a, 0.7);
            oa.step(&mut a, &g).unwrap();
            ob.step(&mut b, &g).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(OptimState::from_blob(&oa.to_blob()).unwrap(), oa);
        assert!(OptimState::from_blob(&oa.to_blob()[1..]).is_err());
    }

    #[test]
    fn power_iteration_examples() {
        let b = Batch::new(Matrix::zeros(1, 1), Matrix::zeros(1, 1)).unwrap();
        let r = power_iteration_lmax(&scalar_net("SP", 1.0), &b).unwrap();
        assert!(r.converged && (r.lambda_max - 2.0).abs() < 1e-9);

        let arch = Architecture::mlp(4, 5, 2, 1).unwrap();
        let zero = NetworkState::init_scaled(arch, preset("SP").unwrap(), &RngStream::new(0), 0.0).unwrap();
        let b = Batch::new(Matrix::zeros(1, 2), Matrix::zeros(1, 1)).unwrap();
        assert!((power_iteration_lmax(&zero, &b).unwrap().lambda_max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver() {
        for (kind, name, seed) in [("mlp", "SP", 1), ("mlp", "mean-field", 2), ("resnet", "mean-field", 3), ("resnet", "muP", 4)] {
            let arch = Architecture::new(kind.parse().unwrap(), 4, 6, 3, 1, crate::network::Activation::Identity).unwrap();
            let net = NetworkState::init(arch, preset(name).unwrap(), &RngStream::new(seed)).unwrap();
            let (diag, lower) = linear_hessian_blocks(&net).unwrap();
            let n = 6;
            let nb = diag.len();
            let mut h = Matrix::zeros(n * nb, n * nb);
            for (k, d) in diag.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        h.set(k * n + i, k * n + j, d.get(i, j));
                    }
                }
            }
            for (k, m) in lower.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        h.set((k + 1) * n + i, k * n + j, m.get(i, j));
                        h.set(k * n + j, (k + 1) * n + i, m.get(i, j));
                    }
                }
            }
            let want = jacobi_eigenvalues(h).into_iter().fold(f64::MIN, f64::max);
            let b = Batch::new(Matrix::zeros(1, 3), Matrix::zeros(1, 1)).unwrap();
            let got = power_iteration_lmax(&net, &b).unwrap();
            assert!((got.lambda_max - want).abs() <= 1e-3 * want, "{kind} {name}: {} vs {want}", got.lambda_max);
        }
    }
}
