//! Iterative inference run to convergence against the closed-form machinery.

use pclab_core::bp_engine::mse_loss;
use pclab_core::equilibrated::{equilibrated_energy, equilibrated_grad, rescaling};
use pclab_core::numkit::gaussian_matrix;
use pclab_core::parameterization::preset;
use pclab_core::pc_engine::{activity_gradients, energy, infer_gd, pc_weight_gradients};
use pclab_core::{Activation, ArchKind, Architecture, Batch, NetworkState, RngStream};

fn setup(kind: ArchKind, preset_name: &str, depth: usize, width: usize, seed: u64) -> (NetworkState, Batch) {
    let arch = Architecture::new(kind, depth, width, 6, 1, Activation::Identity).unwrap();
    let net = NetworkState::init(arch, preset(preset_name).unwrap(), &RngStream::new(seed)).unwrap();
    let mut rng = RngStream::new(seed + 100);
    let x = gaussian_matrix(&mut rng, 4, 6, 1.0).unwrap();
    let y = gaussian_matrix(&mut rng, 4, 1, 1.0).unwrap();
    (net, Batch::new(x, y).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn gradient_descent_reaches_the_closed_form() {
    for (kind, p) in [(ArchKind::Mlp, "mean-field"), (ArchKind::Resnet, "mean-field"), (ArchKind::Mlp, "muP")] {
        let (net, batch) = setup(kind, p, 4, 8, 3);
        let (acts, report) = infer_gd(&net, &batch, 0.5, 200_000, 1e-12).unwrap();
        assert!(report.converged, "{kind:?} {p}: {} iterations", report.iterations_run);

        let f = energy(&net, &acts, &batch).unwrap();
        let closed = equilibrated_energy(&net, &batch).unwrap();
        assert!(rel(f, closed) < 1e-8, "{kind:?} {p}: {f} vs {closed}");

        let s = rescaling(&net).unwrap().s_total;
        let loss = mse_loss(&net, &batch).unwrap();
        assert!(rel(closed * s, loss) < 1e-10);

        let g_iter = pc_weight_gradients(&net, &acts, &batch).unwrap().flatten();
        let g_closed = equilibrated_grad(&net, &batch).unwrap().flatten();
        let num: f64 = g_iter.iter().zip(&g_closed).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = g_closed.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-6, "{kind:?} {p}: gradient error {}", (num / den).sqrt());

        let grad_norm: f64 = activity_gradients(&net, &acts, &batch)
            .unwrap()
            .iter()
            .map(|g| g.sum_sq())
            .sum::<f64>()
            .sqrt();
        assert!(grad_norm < 1e-8);
    }
}

#[test]
fn energy_never_exceeds_the_loss() {
    for seed in 0..5 {
        let (net, batch) = setup(ArchKind::Resnet, "SP", 5, 4, seed);
        let closed = equilibrated_energy(&net, &batch).unwrap();
        let loss = mse_loss(&net, &batch).unwrap();
        assert!(closed <= loss && closed > 0.0);
    }
}
