//! Closed-form equilibrated energy of linear scalar-output networks.
//!
//! At the activity minimiser the energy equals `F* = L(θ) / s(θ)` with
//! `s = 1 + Σ_{j=1}^{L−1} ‖c A_{L−1} ⋯ A_{j+1}‖²`. Here `c` is the effective
//! output row `γ⁻¹ N^(−a_L) w^(L)` and `A_ℓ` the effective hidden maps
//! (`N^(−a_ℓ) W^(ℓ)` for MLPs, `I + L^(−α) N^(−1/2) W^(ℓ)` for resnets).
//! Path products are accumulated as row vectors from the output side.

use serde::{Deserialize, Serialize};

use crate::bp_engine::{loss_and_gradients, mse_loss, GradientBundle};
use crate::network::{ArchKind, Batch, NetworkState};
use crate::pc_engine::{energy, solve_linear_equilibrium};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescalingBreakdown {
    pub s_total: f64,
    /// `(ℓ, ‖c A_{L−1} ⋯ A_ℓ‖²)` for `ℓ = 2..=L`; `ℓ = L` is the bare
    /// output-row term.
    pub per_path_terms: Vec<(usize, f64)>,
}

impl RescalingBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("breakdown serialises")
    }
}

fn require_closed_form(net: &NetworkState, kind: Option<ArchKind>) -> Result<()> {
    let a = net.arch();
    if !a.is_linear() {
        return Err(Error::Unsupported(format!(
            "closed-form rescaling needs a linear network, got {}",
            a.activation
        )));
    }
    if a.output_dim != 1 {
        return Err(Error::Unsupported(format!(
            "closed-form rescaling needs a scalar output, got O = {}; use empirical_rescaling",
            a.output_dim
        )));
    }
    if let Some(k) = kind {
        if a.kind != k {
            return Err(Error::Unsupported(format!("expected a {k} network, got {}", a.kind)));
        }
    }
    Ok(())
}

fn has_skip(net: &NetworkState, layer: usize) -> bool {
    net.arch().kind == ArchKind::Resnet && layer > 1 && layer < net.depth()
}

/// `v A_ℓ` for the effective map `A_ℓ`, without forming it.
fn row_times_map(net: &NetworkState, layer: usize, v: &[f64]) -> Result<Vec<f64>> {
    let k = net.pre_coeff(layer) * net.branch_coeff(layer);
    let mut out = net.weight(layer).vecmat(v)?;
    out.iter_mut().for_each(|o| *o *= k);
    if has_skip(net, layer) {
        out.iter_mut().zip(v).for_each(|(o, vi)| *o += vi);
    }
    Ok(out)
}

/// `A_ℓ r`, without forming `A_ℓ`.
fn map_times_col(net: &NetworkState, layer: usize, r: &[f64]) -> Result<Vec<f64>> {
    let k = net.pre_coeff(layer) * net.branch_coeff(layer);
    let mut out = net.weight(layer).matvec(r)?;
    out.iter_mut().for_each(|o| *o *= k);
    if has_skip(net, layer) {
        out.iter_mut().zip(r).for_each(|(o, ri)| *o += ri);
    }
    Ok(out)
}

/// Row vectors `u_j = c A_{L−1} ⋯ A_{j+1}` for `j = 1..L−1` (index `j − 1`).
fn path_rows(net: &NetworkState) -> Result<Vec<Vec<f64>>> {
    let l = net.depth();
    let mut rows = vec![Vec::new(); l - 1];
    let c = net.pre_coeff(l);
    rows[l - 2] = net.weight(l).row(0).iter().map(|w| c * w).collect();
    for j in (1..l - 1).rev() {
        rows[j - 1] = row_times_map(net, j + 1, &rows[j])?;
    }
    Ok(rows)
}

fn breakdown(net: &NetworkState) -> Result<RescalingBreakdown> {
    let rows = path_rows(net)?;
    let terms: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(j, u)| (j + 2, u.iter().map(|v| v * v).sum()))
        .collect();
    let s_total = 1.0 + terms.iter().map(|t| t.1).sum::<f64>();
    Ok(RescalingBreakdown {
        s_total,
        per_path_terms: terms,
    })
}

pub fn rescaling_mlp(net: &NetworkState) -> Result<RescalingBreakdown> {
    require_closed_form(net, Some(ArchKind::Mlp))?;
    breakdown(net)
}

pub fn rescaling_resnet(net: &NetworkState) -> Result<RescalingBreakdown> {
    require_closed_form(net, Some(ArchKind::Resnet))?;
    breakdown(net)
}

/// Dispatches on the architecture kind.
pub fn rescaling(net: &NetworkState) -> Result<RescalingBreakdown> {
    require_closed_form(net, None)?;
    breakdown(net)
}

pub fn equilibrated_energy(net: &NetworkState, batch: &Batch) -> Result<f64> {
    let s = rescaling(net)?.s_total;
    Ok(mse_loss(net, batch)? / s)
}

/// `∂s/∂W^(ℓ)` for every layer; the first-layer block is zero.
pub fn rescaling_grad(net: &NetworkState) -> Result<GradientBundle> {
    let mut grads = GradientBundle::zeros_like(net);
    add_scaled_rescaling_grad(net, 1.0, &mut grads)?;
    Ok(grads)
}

/// `grads += scale · ∂s/∂W`, accumulated in place.
pub fn add_scaled_rescaling_grad(net: &NetworkState, scale: f64, grads: &mut GradientBundle) -> Result<()> {
    require_closed_form(net, None)?;
    let l = net.depth();
    if grads.layers.len() != l
        || grads.layers.iter().zip(net.weights()).any(|(g, w)| g.shape() != w.shape())
    {
        return Err(Error::Shape("gradient bundle does not match the network".into()));
    }
    let u = path_rows(net)?;
    // r_ℓ = Σ_{j<ℓ} u_j (A_{ℓ−1} ⋯ A_{j+1})ᵀ, built upward from r_2 = u_1.
    let mut r = u[0].clone();
    for layer in 2..l {
        let coeff = scale * 2.0 * net.pre_coeff(layer) * net.branch_coeff(layer);
        let a = &u[layer - 1];
        let g = &mut grads.layers[layer - 1];
        for (i, &ai) in a.iter().enumerate() {
            let ca = coeff * ai;
            g.row_mut(i).iter_mut().zip(&r).for_each(|(gv, rk)| *gv += ca * rk);
        }
        let mut next = map_times_col(net, layer, &r)?;
        next.iter_mut().zip(a).for_each(|(n, ai)| *n += ai);
        r = next;
    }
    let coeff = scale * 2.0 * net.pre_coeff(l);
    grads.layers[l - 1]
        .row_mut(0)
        .iter_mut()
        .zip(&r)
        .for_each(|(gv, rk)| *gv += coeff * rk);
    Ok(())
}

/// `∇F* = ∇L / s − (L / s²) ∇s`.
pub fn equilibrated_grad(net: &NetworkState, batch: &Batch) -> Result<GradientBundle> {
    let s = rescaling(net)?.s_total;
    let (loss, mut g) = loss_and_gradients(net, batch)?;
    g.scale_in_place(1.0 / s);
    add_scaled_rescaling_grad(net, -loss / (s * s), &mut g)?;
    Ok(g)
}

/// Measured `s = L / F*` from the solved linear equilibrium; valid for any
/// output dimension.
pub fn empirical_rescaling(net: &NetworkState, batch: &Batch) -> Result<f64> {
    let loss = mse_loss(net, batch)?;
    if loss == 0.0 {
        return Err(Error::InvalidArgument("empirical rescaling is undefined at zero loss".into()));
    }
    let z = solve_linear_equilibrium(net, batch)?;
    let fstar = energy(net, &z, batch)?;
    if fstar <= 0.0 {
        return Err(Error::InvalidArgument("equilibrated energy is zero".into()));
    }
    Ok(loss / fstar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Architecture};
    use crate::numkit::{gaussian_matrix, Matrix, RngStream};
    use crate::pc_engine::pc_weight_gradients;
    use crate::parameterization::preset;

    fn random_batch(p: usize, d: usize, o: usize, seed: u64) -> Batch {
        let rng = RngStream::new(seed);
        Batch::new(
            gaussian_matrix(&mut rng.child(1), p, d, 1.0).unwrap(),
            gaussian_matrix(&mut rng.child(2), p, o, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn two_layer(name: &str, n: usize, w: Vec<f64>) -> NetworkState {
        let arch = Architecture::mlp(2, n, 1, 1).unwrap();
        let weights = vec![Matrix::from_fn(n, 1, |_, _| 1.0), Matrix::from_vec(1, n, w).unwrap()];
        NetworkState::from_weights(arch, preset(name).unwrap(), weights).unwrap()
    }

    fn random_nets() -> Vec<NetworkState> {
        let mut out = Vec::new();
        let mut seed = 0;
        for kind in [ArchKind::Mlp, ArchKind::Resnet] {
            for name in ["SP", "NTK", "mean-field", "muP"] {
                for l in [2, 3, 5] {
                    seed += 1;
                    let arch = Architecture::new(kind, l, 7, 4, 1, Activation::Identity).unwrap();
                    let p = preset(name).unwrap().with_gamma0(0.6);
                    out.push(NetworkState::init(arch, p, &RngStream::new(seed)).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn rescaling_examples() {
        let mf = two_layer("mean-field", 4, vec![1.0; 4]);
        assert!((rescaling_mlp(&mf).unwrap().s_total - 1.25).abs() < 1e-15);
        let sp = two_layer("SP", 2, vec![3.0, 4.0]);
        assert_eq!(rescaling_mlp(&sp).unwrap().s_total, 26.0);
        let zero = two_layer("SP", 2, vec![0.0, 0.0]);
        assert_eq!(rescaling(&zero).unwrap().s_total, 1.0);
        assert!(rescaling_resnet(&sp).is_err());

        let wide = NetworkState::init(Architecture::mlp(3, 4, 2, 2).unwrap(), preset("SP").unwrap(), &RngStream::new(1)).unwrap();
        assert!(matches!(rescaling(&wide), Err(Error::Unsupported(_))));
        let tanh = Architecture::mlp(3, 4, 2, 1).unwrap().with_activation(Activation::Tanh);
        let tanh = NetworkState::init(tanh, preset("SP").unwrap(), &RngStream::new(1)).unwrap();
        assert!(matches!(rescaling(&tanh), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mlp_matches_product_formula() {
        // s = 1 + γ⁻² Σ_ℓ N^(−2 Σ_{k≥ℓ} a_k) ‖W^(L:ℓ)‖², with explicit N×N products.
        let arch = Architecture::mlp(4, 5, 3, 1).unwrap();
        let p = preset("NTK").unwrap().with_gamma0(1.7);
        let net = NetworkState::init(arch, p, &RngStream::new(3)).unwrap();
        let n = 5f64;
        let gamma = 1.7;
        let mut prod = net.weight(4).clone();
        let mut s = 1.0 + prod.sum_sq() * n.powf(-2.0 * 0.5) / (gamma * gamma);
        let mut exp = 0.5;
        for l in (2..4).rev() {
            prod = prod.matmul(net.weight(l)).unwrap();
            exp += 0.5;
            s += prod.sum_sq() * n.powf(-2.0 * exp) / (gamma * gamma);
        }
        let got = rescaling_mlp(&net).unwrap().s_total;
        assert!((got - s).abs() < 1e-13 * s, "{got} vs {s}");
    }

    #[test]
    fn resnet_examples() {
        let arch = Architecture::resnet(5, 6, 2, 1).unwrap();
        let p = preset("mean-field").unwrap().with_gamma0(2.0);
        let mut net = NetworkState::init(arch, p, &RngStream::new(4)).unwrap();
        for l in 2..5 {
            net.weights_mut()[l - 1].scale_in_place(0.0);
        }
        let w2 = net.weight(5).sum_sq();
        let want = 1.0 + 4.0 * w2 / (4.0 * 36.0);
        assert!((rescaling_resnet(&net).unwrap().s_total - want).abs() < 1e-14);

        // L = 3, N = 1: s = 1 + (w_L² + (w_L(1 + w₂/√3))²)/γ₀².
        let arch = Architecture::resnet(3, 1, 1, 1).unwrap();
        let (w1, w2, wl) = (0.3, -1.2, 0.8);
        let weights = [w1, w2, wl].iter().map(|&v| Matrix::from_vec(1, 1, vec![v]).unwrap()).collect();
        let g0 = 0.5;
        let net = NetworkState::from_weights(arch, preset("mean-field").unwrap().with_gamma0(g0), weights).unwrap();
        let want = 1.0 + (wl * wl + (wl * (1.0 + w2 / 3f64.sqrt())).powi(2)) / (g0 * g0);
        let got = rescaling_resnet(&net).unwrap();
        assert!((got.s_total - want).abs() < 1e-14);
        let parts: f64 = got.per_path_terms.iter().map(|t| t.1).sum();
        assert!((got.s_total - 1.0 - parts).abs() < 1e-15);
        assert!(got.per_path_terms.iter().all(|t| t.1 >= 0.0));
        let back: RescalingBreakdown = serde_json::from_str(&got.to_json()).unwrap();
        assert_eq!(back, got);
    }

    #[test]
    fn rescaling_grad_examples_and_finite_differences() {
        let sp = two_layer("SP", 2, vec![3.0, 4.0]);
        let g = rescaling_grad(&sp).unwrap();
        assert_eq!(g.layer(2).as_slice(), &[6.0, 8.0]);
        assert_eq!(g.layer(1).sum_sq(), 0.0);

        for net in random_nets() {
            let g = rescaling_grad(&net).unwrap();
            assert_eq!(g.layer(1).sum_sq(), 0.0);
            for l in 1..net.depth() {
                for idx in 0..net.weights()[l].len() {
                    let theta = net.weights()[l].as_slice()[idx];
                    let h = 1e-5 * (1.0 + theta.abs());
                    let eval = |d: f64| {
                        let mut n2 = net.clone();
                        n2.weights_mut()[l].as_mut_slice()[idx] += d;
                        rescaling(&n2).unwrap().s_total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = g.layers[l].as_slice()[idx];
                    let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4);
                    assert!(err < 1e-6, "{:?} layer {}: {fd} vs {an}", net.arch(), l + 1);
                }
            }
        }
    }

    #[test]
    fn closed_form_matches_solved_equilibrium() {
        for net in random_nets() {
            let b = random_batch(4, 4, 1, 9);
            let z = solve_linear_equilibrium(&net, &b).unwrap();
            let e = energy(&net, &z, &b).unwrap();
            let f = equilibrated_energy(&net, &b).unwrap();
            assert!((e - f).abs() <= 1e-10 * f, "{e} vs {f}");

            let pc = pc_weight_gradients(&net, &z, &b).unwrap();
            let eq = equilibrated_grad(&net, &b).unwrap();
            assert!(pc.relative_error(&eq).unwrap() < 1e-9);

            let emp = empirical_rescaling(&net, &b).unwrap();
            let s = rescaling(&net).unwrap().s_total;
            assert!((emp - s).abs() < 1e-9 * s);
        }
    }

    #[test]
    fn scalar_chain_equilibrated_energy() {
        let arch = Architecture::mlp(2, 1, 1, 1).unwrap();
        let w = vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap(), Matrix::from_vec(1, 1, vec![1.0]).unwrap()];
        let net = NetworkState::from_weights(arch, preset("SP").unwrap(), w).unwrap();
        let b = Batch::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), Matrix::zeros(1, 1)).unwrap();
        assert_eq!(equilibrated_energy(&net, &b).unwrap(), 0.25);
    }

    #[test]
    fn degenerate_cases() {
        // Zero output weights: s = 1 and the equilibrated gradient is the BP gradient.
        let mut net = NetworkState::init(Architecture::mlp(2, 3, 2, 1).unwrap(), preset("mean-field").unwrap(), &RngStream::new(2)).unwrap();
        net.weights_mut()[1].scale_in_place(0.0);
        let b = random_batch(3, 2, 1, 3);
        assert_eq!(rescaling(&net).unwrap().s_total, 1.0);
        let bp = crate::bp_engine::bp_gradients(&net, &b).unwrap();
        assert_eq!(equilibrated_grad(&net, &b).unwrap(), bp);
        assert_eq!(empirical_rescaling(&net, &b).unwrap(), 1.0);

        // Perfect fit: y = f gives zero energy and zero gradient.
        let net = NetworkState::init(Architecture::resnet(4, 3, 2, 1).unwrap(), preset("muP").unwrap(), &RngStream::new(5)).unwrap();
        let x = random_batch(3, 2, 1, 6).x;
        let y = net.predict(&x).unwrap();
        let b = Batch::new(x, y).unwrap();
        assert_eq!(equilibrated_energy(&net, &b).unwrap(), 0.0);
        assert!(equilibrated_grad(&net, &b).unwrap().norm() < 1e-15);
        assert!(empirical_rescaling(&net, &b).is_err());
    }

    #[test]
    fn empirical_rescaling_multidimensional_output() {
        let arch = Architecture::mlp(3, 5, 4, 3).unwrap();
        let net = NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(7)).unwrap();
        let s = empirical_rescaling(&net, &random_batch(4, 4, 3, 8)).unwrap();
        assert!(s >= 1.0 && s.is_finite());
    }

    #[test]
    fn resnet_rescaling_tracks_depth_over_width() {
        // Reduced grid of the (s − 1)·N/L invariant.
        let mut vals = Vec::new();
        for n in [64, 128] {
            for l in [4, 16] {
                let arch = Architecture::resnet(l, n, 8, 1).unwrap();
                let mut acc = 0.0;
                for seed in 0..8 {
                    let rng = RngStream::new((n * 100 + l) as u64 + 7 * seed);
                    let net = NetworkState::init(arch, preset("mean-field").unwrap(), &rng).unwrap();
                    let s = empirical_rescaling(&net, &random_batch(2, 8, 1, seed)).unwrap();
                    acc += (s - 1.0) * n as f64 / l as f64;
                }
                vals.push(acc / 8.0);
            }
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo < 2.0, "{vals:?}");
    }
}
