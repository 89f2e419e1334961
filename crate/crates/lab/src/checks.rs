//! The acceptance suite run by `pclab verify`.
//!
//! Each check returns its verdict, a one-line numeric summary and the
//! records it produced. Summaries and records depend only on the master
//! seed, so [`metric_output`] is reproducible byte for byte; wall-clock
//! times are kept apart from it.

use std::time::{Duration, Instant};

use pclab_core::bp_engine::{bp_gradients, mse_loss, GradientBundle};
use pclab_core::equilibrated::{equilibrated_energy, equilibrated_grad, rescaling, rescaling_grad};
use pclab_core::numkit::gaussian_matrix;
use pclab_core::pc_engine::{activity_gradients, energy, pc_weight_gradients, solve_linear_equilibrium, ActivityState};
use pclab_core::{Activation, ArchKind, Architecture, Batch, NetworkState, Parameterisation, Preset, RngStream};

use crate::config::ExperimentConfig;
use crate::fit::fit_power_law;
use crate::record::{to_jsonl, MetricRecord};
use crate::runner::collect_grid;
use crate::saddle::censored_escape_time;
use crate::Result;

pub const CHECK_COUNT: usize = 10;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    /// Verdict on the numbers alone.
    pub criterion_passed: bool,
    pub summary: String,
    pub records: Vec<MetricRecord>,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl CheckOutcome {
    pub fn within_limit(&self) -> bool {
        self.limit.is_none_or(|l| self.elapsed < l)
    }

    pub fn passed(&self) -> bool {
        self.criterion_passed && self.within_limit()
    }

    /// Human-readable verdict including the runtime.
    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let limit = match self.limit {
            Some(l) => format!("{:.1}s, limit {}s", self.elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.1}s", self.elapsed.as_secs_f64()),
        };
        let slow = if self.within_limit() { "" } else { " [over time limit]" };
        format!("[{verdict}] C{} {}: {} ({limit}){slow}", self.id, self.name, self.summary)
    }

    /// Deterministic part of the outcome: verdict, summary and records.
    pub fn metric_text(&self) -> String {
        let verdict = if self.criterion_passed { "pass" } else { "fail" };
        format!("C{} {} {verdict}: {}\n{}", self.id, self.name, self.summary, to_jsonl(&self.records))
    }
}

pub fn check_name(id: usize) -> &'static str {
    match id {
        1 => "closed-form energy equals solved energy",
        2 => "equilibrated gradient equals PC gradient at equilibrium",
        3 => "finite-difference gradients",
        4 => "width law s-1 ~ 1/N",
        5 => "width-depth law s-1 ~ L/N",
        6 => "PC gradients align with BP at large width",
        7 => "iterative inference on nonlinear resnets",
        8 => "depth stability of residual second moments",
        9 => "learning-regime and saddle orderings",
        10 => "determinism",
        _ => "unknown",
    }
}

fn limit(id: usize) -> Option<Duration> {
    let secs = match id {
        1 => 30,
        2 | 3 => 60,
        4 | 6 | 9 => 300,
        5 | 7 => 600,
        8 => 120,
        _ => return None,
    };
    Some(Duration::from_secs(secs))
}

struct Verdict {
    passed: bool,
    summary: String,
    records: Vec<MetricRecord>,
}

/// Runs checks `1..=9`; check 10 needs a whole-suite rerun, see [`run_suite`].
pub fn run_check(id: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let v = match id {
        1 => c1_energy(seed)?,
        2 => c2_gradient(seed)?,
        3 => c3_finite_differences(seed)?,
        4 => c4_width_law(seed)?,
        5 => c5_width_depth_law(seed)?,
        6 => c6_width_alignment(seed)?,
        7 => c7_iterative_nonlinear(seed)?,
        8 => c8_depth_stability(seed)?,
        9 => c9_regimes(seed)?,
        _ => {
            return Err(crate::LabError::Config(format!("no standalone check {id}")));
        }
    };
    Ok(CheckOutcome {
        id,
        name: check_name(id),
        criterion_passed: v.passed,
        summary: v.summary,
        records: v.records,
        elapsed: start.elapsed(),
        limit: limit(id),
    })
}

/// Concatenated [`CheckOutcome::metric_text`] of the outcomes.
pub fn metric_output(outcomes: &[CheckOutcome]) -> String {
    outcomes.iter().map(CheckOutcome::metric_text).collect()
}

/// Runs checks 1–9, then reruns them to compare metric output for check 10.
/// `report` sees each outcome as it finishes.
pub fn run_suite(seed: u64, mut report: impl FnMut(&CheckOutcome)) -> Result<Vec<CheckOutcome>> {
    let mut first = Vec::new();
    for id in 1..CHECK_COUNT {
        let o = run_check(id, seed)?;
        report(&o);
        first.push(o);
    }
    let start = Instant::now();
    let mut second = Vec::new();
    for id in 1..CHECK_COUNT {
        second.push(run_check(id, seed)?);
    }
    let a = metric_output(&first);
    let b = metric_output(&second);
    let same = a == b;
    let summary = if same {
        format!("two runs produced identical metric output ({} bytes)", a.len())
    } else {
        let at = a.bytes().zip(b.bytes()).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        format!("metric output differs at byte {at}")
    };
    let o = CheckOutcome {
        id: CHECK_COUNT,
        name: check_name(CHECK_COUNT),
        criterion_passed: same,
        summary,
        records: Vec::new(),
        elapsed: start.elapsed(),
        limit: None,
    };
    report(&o);
    first.push(o);
    Ok(first)
}

fn record(experiment: &str, net: &NetworkState, seed: u64, step: usize, metric: &str, value: f64) -> MetricRecord {
    let a = net.arch();
    MetricRecord {
        experiment: experiment.into(),
        arch: a.kind.to_string(),
        activation: a.activation.to_string(),
        seed,
        width: a.width,
        depth: a.depth,
        gamma0: net.params().gamma0,
        beta: None,
        step,
        metric: metric.into(),
        value: Some(value),
        diverged: false,
    }
}

fn pick<T: Copy>(rng: &mut RngStream, items: &[T]) -> T {
    items[(rng.next_u64() % items.len() as u64) as usize]
}

fn range(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

/// A random linear scalar-output case for the equilibrium checks.
fn random_linear_case(rng: &mut RngStream) -> Result<(NetworkState, Batch)> {
    let kind = pick(rng, &[ArchKind::Mlp, ArchKind::Resnet]);
    let preset = pick(rng, &[Preset::Sp, Preset::MeanField, Preset::MuP]);
    let width = range(rng, 1, 64);
    let depth = range(rng, 2, 6);
    let input_dim = range(rng, 1, 8);
    let samples = range(rng, 1, 6);
    let arch = Architecture::new(kind, depth, width, input_dim, 1, Activation::Identity)?;
    let net = NetworkState::init(arch, preset.params(), &RngStream::new(rng.next_u64()))?;
    let x = gaussian_matrix(rng, samples, input_dim, 1.0)?;
    let y = gaussian_matrix(rng, samples, 1, 1.0)?;
    Ok((net, Batch::new(x, y)?))
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

const ORACLE_CASES: usize = 50;

fn c1_energy(seed: u64) -> Result<Verdict> {
    let mut rng = RngStream::new(seed).child(101);
    let mut worst = 0.0f64;
    let mut records = Vec::new();
    for i in 0..ORACLE_CASES {
        let (net, batch) = random_linear_case(&mut rng)?;
        let closed = equilibrated_energy(&net, &batch)?;
        let z = solve_linear_equilibrium(&net, &batch)?;
        let solved = energy(&net, &z, &batch)?;
        let e = rel(closed, solved);
        worst = worst.max(e);
        records.push(record("c1", &net, i as u64, 0, "energy_rel_error", e));
    }
    Ok(Verdict {
        passed: worst <= 1e-8,
        summary: format!("max relative error {worst:.3e} over {ORACLE_CASES} configs (tol 1e-8)"),
        records,
    })
}

fn c2_gradient(seed: u64) -> Result<Verdict> {
    let mut rng = RngStream::new(seed).child(101);
    let mut worst = 0.0f64;
    let mut records = Vec::new();
    for i in 0..ORACLE_CASES {
        let (net, batch) = random_linear_case(&mut rng)?;
        let closed = equilibrated_grad(&net, &batch)?;
        let z = solve_linear_equilibrium(&net, &batch)?;
        let pc = pc_weight_gradients(&net, &z, &batch)?;
        let e = closed.relative_error(&pc)?;
        worst = worst.max(e);
        records.push(record("c2", &net, i as u64, 0, "gradient_rel_error", e));
    }
    Ok(Verdict {
        passed: worst <= 1e-8,
        summary: format!("max relative error {worst:.3e} over {ORACLE_CASES} configs (tol 1e-8)"),
        records,
    })
}

/// Central differences of `f` at `x`, with step `h · max(1, |x_i|)`.
fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        p[i] = x[i] + step;
        let up = f(&p)?;
        p[i] = x[i] - step;
        let down = f(&p)?;
        p[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

fn vec_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = pclab_core::numkit::norm(a).max(pclab_core::numkit::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn with_weights(net: &NetworkState, flat: &[f64]) -> Result<NetworkState> {
    let mut out = net.clone();
    let mut off = 0;
    for w in out.weights_mut() {
        let n = w.len();
        w.as_mut_slice().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(out)
}

fn flatten_weights(net: &NetworkState) -> Vec<f64> {
    net.weights().iter().flat_map(|w| w.as_slice().iter().copied()).collect()
}

fn random_small_case(rng: &mut RngStream, activation: Activation, output_dim: usize) -> Result<(NetworkState, Batch)> {
    let kind = pick(rng, &[ArchKind::Mlp, ArchKind::Resnet]);
    let preset = pick(rng, &Preset::ALL);
    let width = range(rng, 2, 6);
    let depth = range(rng, 2, 4);
    let input_dim = range(rng, 1, 4);
    let samples = range(rng, 1, 3);
    let arch = Architecture::new(kind, depth, width, input_dim, output_dim, activation)?;
    let params = preset.params().with_gamma0(0.5 + rng.uniform());
    let net = NetworkState::init(arch, params, &RngStream::new(rng.next_u64()))?;
    let x = gaussian_matrix(rng, samples, input_dim, 1.0)?;
    let y = gaussian_matrix(rng, samples, output_dim, 1.0)?;
    Ok((net, Batch::new(x, y)?))
}

const FD_CASES: usize = 12;
const FD_STEP: f64 = 1e-5;

fn c3_finite_differences(seed: u64) -> Result<Verdict> {
    let mut rng = RngStream::new(seed).child(303);
    let mut records = Vec::new();
    let mut worst = [0.0f64; 3];
    let acts = [Activation::Identity, Activation::Tanh, Activation::Relu];
    for (i, &act) in acts.iter().cycle().take(3 * FD_CASES).enumerate() {
        let out_dim = range(&mut rng, 1, 2);
        let (net, batch) = random_small_case(&mut rng, act, out_dim)?;
        let w0 = flatten_weights(&net);
        let fd = central_difference(&w0, FD_STEP, |w| Ok(mse_loss(&with_weights(&net, w)?, &batch)?))?;
        let e = vec_rel_error(&bp_gradients(&net, &batch)?.flatten(), &fd);
        worst[0] = worst[0].max(e);
        records.push(record("c3", &net, i as u64, 0, "bp_fd_rel_error", e));

        let mut z = ActivityState::from_forward(&net, &batch)?;
        for l in 1..net.depth() {
            let (r, c) = z.layers[l].shape();
            let noise = gaussian_matrix(&mut rng, r, c, 0.25)?;
            z.layers[l].add_scaled(&noise, 1.0)?;
        }
        let free: Vec<f64> = (1..net.depth()).flat_map(|l| z.layers[l].as_slice().to_vec()).collect();
        let rebuild = |flat: &[f64]| -> Result<ActivityState> {
            let mut s = z.clone();
            let mut off = 0;
            for l in 1..net.depth() {
                let m = &mut s.layers[l];
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
            Ok(s)
        };
        let fd = central_difference(&free, FD_STEP, |v| Ok(energy(&net, &rebuild(v)?, &batch)?))?;
        let analytic: Vec<f64> = activity_gradients(&net, &z, &batch)?[1..net.depth()]
            .iter()
            .flat_map(|m| m.as_slice().to_vec())
            .collect();
        let e = vec_rel_error(&analytic, &fd);
        worst[1] = worst[1].max(e);
        records.push(record("c3", &net, i as u64, 0, "activity_fd_rel_error", e));
    }
    for i in 0..FD_CASES {
        let (net, _) = random_small_case(&mut rng, Activation::Identity, 1)?;
        let w0 = flatten_weights(&net);
        let fd = central_difference(&w0, FD_STEP, |w| Ok(rescaling(&with_weights(&net, w)?)?.s_total))?;
        let g: GradientBundle = rescaling_grad(&net)?;
        let e = vec_rel_error(&g.flatten(), &fd);
        worst[2] = worst[2].max(e);
        records.push(record("c3", &net, i as u64, 0, "rescaling_fd_rel_error", e));
    }
    let passed = worst.iter().all(|&w| w <= 1e-5);
    Ok(Verdict {
        passed,
        summary: format!(
            "max relative error bp {:.3e}, activity {:.3e}, rescaling {:.3e} (tol 1e-5)",
            worst[0], worst[1], worst[2]
        ),
        records,
    })
}

fn mean_field() -> Parameterisation {
    Preset::MeanField.params()
}

fn rescaling_grid(
    experiment: &str,
    kind: ArchKind,
    widths: &[usize],
    depths: &[usize],
    seeds: std::ops::Range<u64>,
    master: u64,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    for &depth in depths {
        for &width in widths {
            for s in seeds.clone() {
                let arch = Architecture::new(kind, depth, width, 40, 1, Activation::Identity)?;
                let stream = RngStream::new(master).child(1000 + s);
                let net = NetworkState::init(arch, mean_field(), &stream)?;
                let v = rescaling(&net)?.s_total - 1.0;
                records.push(record(experiment, &net, s, 0, "rescaling_minus_one", v));
            }
        }
    }
    Ok(records)
}

fn c4_width_law(seed: u64) -> Result<Verdict> {
    let records = rescaling_grid("c4", ArchKind::Mlp, &[64, 256, 1024, 4096], &[5], 0..10, seed)?;
    let fit = fit_power_law(&records, "width", "rescaling_minus_one")?;
    Ok(Verdict {
        passed: (-1.15..=-0.85).contains(&fit.slope) && fit.r2 >= 0.98,
        summary: format!(
            "slope {:.4} (want [-1.15, -0.85]), r2 {:.4} (want >= 0.98), {} widths x 10 seeds",
            fit.slope, fit.r2, fit.points
        ),
        records,
    })
}

fn c5_width_depth_law(seed: u64) -> Result<Verdict> {
    let records = rescaling_grid("c5", ArchKind::Resnet, &[64, 256, 1024], &[4, 16, 64], 0..5, seed)?;
    let fit = fit_power_law(&records, "depth/width", "rescaling_minus_one")?;
    Ok(Verdict {
        passed: (0.85..=1.15).contains(&fit.slope) && fit.r2 >= 0.95,
        summary: format!(
            "slope {:.4} vs L/N (want [0.85, 1.15]), r2 {:.4} (want >= 0.95), {} grid points x 5 seeds",
            fit.slope, fit.r2, fit.points
        ),
        records,
    })
}

/// Seed-averaged values of `metric` per step for runs matching `keep`.
fn mean_curve(records: &[MetricRecord], metric: &str, keep: impl Fn(&MetricRecord) -> bool) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.metric == metric && keep(r)) {
        if sums.len() <= r.step {
            sums.resize(r.step + 1, (0.0, 0));
        }
        let v = r.value.unwrap_or(f64::NAN);
        sums[r.step].0 += v;
        sums[r.step].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

fn seeds_list(master: u64, n: u64) -> String {
    (0..n).map(|i| (master.wrapping_mul(1000) + i).to_string()).collect::<Vec<_>>().join(", ")
}

fn c6_width_alignment(seed: u64) -> Result<Verdict> {
    let base = format!(
        "depths = 5\nalgorithm = pc_closed_form\noptimizer = gd\neta0 = 0.025\ngamma0 = 1\n\
         steps = 100\nmetrics = grad_cosine\nseeds = {}\n",
        seeds_list(seed, 3)
    );
    let mf = ExperimentConfig::parse(&format!("experiment = c6-mean-field\npreset = mean-field\nwidths = 64, 2048\n{base}"))?;
    let sp = ExperimentConfig::parse(&format!(
        "experiment = c6-sp\npreset = SP\nwidths = 64\ninit_scale = {KAIMING_UNIFORM_SCALE}\n{base}"
    ))?;
    let mut records = collect_grid(&mf)?;
    let sp_records = collect_grid(&sp)?;
    let wide = mean_curve(&records, "grad_cosine", |r| r.width == 2048);
    let narrow = mean_curve(&records, "grad_cosine", |r| r.width == 64);
    let sp_narrow = mean_curve(&sp_records, "grad_cosine", |_| true);
    records.extend(sp_records);

    let wide_min = wide.iter().copied().fold(f64::INFINITY, f64::min);
    let (t_min, narrow_min) = narrow
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (t, v)| if v < acc.1 { (t, v) } else { acc });
    let sp_min = sp_narrow.iter().copied().fold(f64::INFINITY, f64::min);
    let ok_wide = wide.iter().all(|&c| c > 0.99);
    let ok_gap = wide[t_min] > narrow_min;
    let ok_sp = sp_min < 0.9;
    Ok(Verdict {
        passed: ok_wide && ok_gap && ok_sp,
        summary: format!(
            "mean-field N=2048 min cosine {wide_min:.5} (want > 0.99); at step {t_min} N=2048 {:.5} vs N=64 {narrow_min:.5}; \
             SP N=64 min cosine {sp_min:.5} (want < 0.9)",
            wide[t_min]
        ),
        records,
    })
}

const C7_BETAS: [f64; 4] = [0.1, 0.5, 1.0, 5.0];

fn c7_iterative_nonlinear(seed: u64) -> Result<Verdict> {
    let cfg = ExperimentConfig::parse(&format!(
        "experiment = c7\npreset = mean-field\nkinds = resnet\nactivations = tanh\nwidths = 512\n\
         depths = 2, 16\nalgorithm = pc_iterative\nbetas = 0.1, 0.5, 1, 5\ninference_iters = 20\n\
         optimizer = adam\neta0 = 1e-3\nadam_param_scaling = false\nsteps = 20\n\
         metrics = grad_cosine, inference_energy\nseeds = {}\n",
        seeds_list(seed, 2)
    ))?;
    let records = collect_grid(&cfg)?;
    let best = |depth: usize| -> (f64, f64) {
        let mut best = (f64::NAN, f64::NEG_INFINITY);
        for &b in &C7_BETAS {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.depth == depth && r.beta == Some(b) && r.metric == "grad_cosine")
                .map(|r| r.value.unwrap_or(f64::NAN))
                .collect();
            let diverged = records.iter().any(|r| r.depth == depth && r.beta == Some(b) && r.diverged);
            let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            if !diverged && m > best.1 {
                best = (b, m);
            }
        }
        best
    };
    let per_beta = |depth: usize| -> String {
        C7_BETAS
            .iter()
            .map(|&b| {
                let v = mean_curve(&records, "grad_cosine", |r| r.depth == depth && r.beta == Some(b));
                let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
                format!("{b}:{m:.4}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let (b2, c2) = best(2);
    let (b16, c16) = best(16);
    Ok(Verdict {
        passed: c2 >= 0.95 && b16 > b2,
        summary: format!(
            "L=2 best beta {b2} cosine {c2:.4} (want >= 0.95); L=16 best beta {b16} cosine {c16:.4} (want beta > {b2}); \
             mean cosine by beta L=2 [{}] L=16 [{}]",
            per_beta(2),
            per_beta(16)
        ),
        records,
    })
}

/// Seed-averaged `(1/N)‖h^(ℓ)‖²` for `ℓ = 0..L−1` of a linear mean-field resnet.
fn resnet_moments(alpha: f64, width: usize, depth: usize, seeds: u64, master: u64) -> Result<(Vec<f64>, NetworkState)> {
    let x = gaussian_matrix(&mut RngStream::new(master).child(808), 32, 40, 1.0)?;
    let mut acc = vec![0.0; depth];
    let mut last = None;
    for s in 0..seeds {
        let arch = Architecture::resnet(depth, width, 40, 1)?;
        let net = NetworkState::init(arch, mean_field().with_alpha(alpha), &RngStream::new(master).child(2000 + s))?;
        let m = NetworkState::second_moments(&net.forward(&x)?);
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v / seeds as f64;
        }
        last = Some(net);
    }
    Ok((acc, last.expect("at least one seed")))
}

fn c8_depth_stability(seed: u64) -> Result<Verdict> {
    let width = 256;
    let seeds = 20;
    let bound = std::f64::consts::E * 1.1;
    let mut records = Vec::new();
    let mut worst_ratio = 0.0f64;
    for &depth in &[4, 8, 16, 32, 64] {
        let (m, net) = resnet_moments(0.5, width, depth, seeds, seed)?;
        let ratio = m[depth - 1] / m[1];
        worst_ratio = worst_ratio.max(ratio);
        records.push(record("c8-alpha-half", &net, 0, 0, "moment_ratio", ratio));
    }
    let mut min_growth = f64::INFINITY;
    for depth in 4..=12 {
        let (m, net) = resnet_moments(0.0, width, depth, seeds, seed)?;
        for l in 2..depth {
            let g = m[l] / m[l - 1];
            min_growth = min_growth.min(g);
            records.push(record("c8-alpha-zero", &net, 0, l, "layer_growth", g));
        }
    }
    Ok(Verdict {
        passed: worst_ratio <= bound && min_growth >= 1.8,
        summary: format!(
            "alpha=1/2 max ratio {worst_ratio:.4} (bound {bound:.4}); alpha=0 min per-layer growth {min_growth:.4} (want >= 1.8)"
        ),
        records,
    })
}

/// Seed-averaged censored time to reach half the initial loss per run group.
fn mean_half_time(records: &[MetricRecord], keep: impl Fn(&MetricRecord) -> bool) -> f64 {
    let mut runs: std::collections::BTreeMap<u64, Vec<f64>> = std::collections::BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == "loss" && keep(r)) {
        runs.entry(r.seed).or_default().push(r.value.unwrap_or(f64::INFINITY));
    }
    let n = runs.len().max(1) as f64;
    runs.values().map(|t| censored_escape_time(t, 0.5) as f64).sum::<f64>() / n
}

/// SP runs draw Gaussian weights with the variance of Kaiming-uniform
/// init, `1 / (3 d_in)`.
const KAIMING_UNIFORM_SCALE: &str = "0.5773502691896258";

fn c9_regimes(seed: u64) -> Result<Verdict> {
    let regimes = ExperimentConfig::parse(&format!(
        "experiment = c9-regimes\npreset = mean-field\ngamma0 = 0.1, 1, 4\nwidths = 1024\ndepths = 5\n\
         algorithm = pc_closed_form\neta0 = 0.025\nsteps = 400\nmetrics = loss\nseeds = {}\n",
        seeds_list(seed, 2)
    ))?;
    let mut records = collect_grid(&regimes)?;
    let times: Vec<f64> = [0.1, 1.0, 4.0]
        .iter()
        .map(|&g| mean_half_time(&records, |r| r.gamma0 == g))
        .collect();
    let ordered = times.windows(2).all(|w| w[1] <= w[0]);

    let saddle = |kind: &str, algorithm: &str| -> Result<Vec<MetricRecord>> {
        collect_grid(&ExperimentConfig::parse(&format!(
            "experiment = c9-saddle-{kind}-{algorithm}\npreset = SP\nkinds = {kind}\nwidths = 4\ndepths = 8\n\
             algorithm = {algorithm}\neta0 = 0.025\nsteps = 1000\nmetrics = loss\ninit_scale = {KAIMING_UNIFORM_SCALE}\nseeds = {}\n",
            seeds_list(seed, 8)
        ))?)
    };
    let mut escape = Vec::new();
    for kind in ["mlp", "resnet"] {
        for alg in ["pc_closed_form", "bp"] {
            let recs = saddle(kind, alg)?;
            escape.push(mean_half_time(&recs, |_| true));
            records.extend(recs);
        }
    }
    let (mlp_pc, mlp_bp, res_pc, res_bp) = (escape[0], escape[1], escape[2], escape[3]);
    let mlp_faster = mlp_pc < mlp_bp;
    let res_gap = (res_pc - res_bp).abs() / res_bp.max(1.0);
    Ok(Verdict {
        passed: ordered && mlp_faster && res_gap <= 0.2,
        summary: format!(
            "half-loss steps by gamma0 0.1/1/4: {:.1}/{:.1}/{:.1} (want non-increasing); \
             SP L=8 N=4 escape PC {mlp_pc:.1} vs BP {mlp_bp:.1} (want PC < BP); resnet PC {res_pc:.1} vs BP {res_bp:.1}, gap {:.1}% (want <= 20%)",
            times[0],
            times[1],
            times[2],
            100.0 * res_gap
        ),
        records,
    })
}
