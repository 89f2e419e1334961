//! Training loops and grid execution.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::Arc;

use pclab_core::bp_engine::{loss_and_gradients, mse_loss, GradientBundle};
use pclab_core::equilibrated::{empirical_rescaling, equilibrated_energy, add_scaled_rescaling_grad, rescaling};
use pclab_core::optim::OptimState;
use pclab_core::pc_engine::{infer_with, pc_weight_gradients, InferenceOptions, InferenceReport};
use pclab_core::{Activation, ArchKind, Architecture, Batch, NetworkState, RngStream};

use crate::config::{Algorithm, DataSource, ExperimentConfig, Metric};
use crate::data::{load_cifar_binary, load_idx_dataset, toy_dataset, ToyTaskSpec};
use crate::record::MetricRecord;
use crate::{LabError, Result};

/// Environment variable holding the number of grid workers.
pub const WORKERS_ENV: &str = "PCLAB_WORKERS";

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One (grid point × seed) run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunPoint {
    pub gamma0: f64,
    pub kind: ArchKind,
    pub activation: Activation,
    pub depth: usize,
    pub width: usize,
    pub beta: Option<f64>,
    pub seed: u64,
}

/// Grid points in emission order: γ₀, kind, activation, depth, width, β, seed.
pub fn expand(cfg: &ExperimentConfig) -> Vec<RunPoint> {
    let mut out = Vec::with_capacity(cfg.num_runs());
    for &gamma0 in &cfg.gamma0s {
        for &kind in &cfg.kinds {
            for &activation in &cfg.activations {
                for &depth in &cfg.depths {
                    for &width in &cfg.widths {
                        for beta in cfg.beta_axis() {
                            for &seed in &cfg.seeds {
                                out.push(RunPoint {
                                    gamma0,
                                    kind,
                                    activation,
                                    depth,
                                    width,
                                    beta,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Batch> {
    let mut ds = match &cfg.data {
        DataSource::Toy { samples, input_dim } => {
            let n = cfg.max_samples.map_or(*samples, |m| m.min(*samples));
            return toy_dataset(&ToyTaskSpec::new(n, *input_dim, cfg.data_seed));
        }
        DataSource::Idx { images, labels } => load_idx_dataset(images, labels)?,
        DataSource::Cifar { path } => load_cifar_binary(path)?,
    };
    if let Some(m) = cfg.max_samples {
        ds.truncate(m);
    }
    if ds.is_empty() {
        return Err(LabError::Data("dataset has no samples".into()));
    }
    ds.to_batch(cfg.centred_targets)
}

pub fn build_network(cfg: &ExperimentConfig, point: &RunPoint, data: &Batch) -> Result<NetworkState> {
    let arch = Architecture::new(
        point.kind,
        point.depth,
        point.width,
        data.x.cols(),
        data.y.cols(),
        point.activation,
    )?;
    let params = cfg.params.clone().with_gamma0(point.gamma0);
    Ok(NetworkState::init_scaled(
        arch,
        params,
        &RngStream::new(point.seed),
        cfg.init_scale,
    )?)
}

pub fn build_optimiser(cfg: &ExperimentConfig) -> OptimState {
    let mut opt = OptimState::new(cfg.optimiser.rule, cfg.optimiser.eta0)
        .with_width_depth_scaling(cfg.optimiser.width_depth_scaling);
    opt.adam_uses_param_scaling = cfg.optimiser.adam_param_scaling;
    opt
}

/// The training gradient of one algorithm at fixed weights.
pub struct TrainingGradient {
    pub grad: GradientBundle,
    /// BP gradient and loss when they were formed on the way.
    pub bp: Option<(f64, GradientBundle)>,
    pub inference: Option<InferenceReport>,
}

pub fn training_gradient(
    cfg: &ExperimentConfig,
    beta: Option<f64>,
    net: &NetworkState,
    batch: &Batch,
) -> Result<TrainingGradient> {
    Ok(match cfg.algorithm {
        Algorithm::Bp => {
            let (loss, g) = loss_and_gradients(net, batch)?;
            TrainingGradient {
                grad: g.clone(),
                bp: Some((loss, g)),
                inference: None,
            }
        }
        Algorithm::PcClosedForm => {
            let (loss, bp) = loss_and_gradients(net, batch)?;
            let s = rescaling(net)?.s_total;
            let mut grad = bp.clone();
            grad.scale_in_place(1.0 / s);
            add_scaled_rescaling_grad(net, -loss / (s * s), &mut grad)?;
            TrainingGradient {
                grad,
                bp: Some((loss, bp)),
                inference: None,
            }
        }
        Algorithm::PcIterative => {
            let mut opts = InferenceOptions::new(beta.unwrap_or(0.0), cfg.inference_iters, cfg.inference_tol);
            opts.init = cfg.activity_init;
            let (acts, report) = infer_with(net, batch, &opts)?;
            TrainingGradient {
                grad: pc_weight_gradients(net, &acts, batch)?,
                bp: None,
                inference: Some(report),
            }
        }
    })
}

struct Minibatches {
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Minibatches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Self {
            rng: RngStream::new(seed).child(1 << 32),
            order: (0..n).collect(),
            pos: n,
            size,
        }
    }

    fn next(&mut self, data: &Batch) -> Batch {
        if self.pos + self.size > self.order.len() {
            for i in (1..self.order.len()).rev() {
                let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
                self.order.swap(i, j);
            }
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        data.select(idx)
    }
}

fn is_divergence(e: &LabError) -> bool {
    matches!(e, LabError::Core(pclab_core::Error::Diverged(_)))
}

/// Trains one grid point and returns its records in step order. A diverged
/// run ends with a single flagged record.
pub fn run_point(cfg: &ExperimentConfig, point: &RunPoint, data: &Batch) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let make = |step: usize, metric: String, value: Option<f64>| MetricRecord {
        experiment: cfg.experiment.clone(),
        arch: point.kind.to_string(),
        activation: point.activation.to_string(),
        seed: point.seed,
        width: point.width,
        depth: point.depth,
        gamma0: point.gamma0,
        beta: point.beta,
        step,
        metric,
        value,
        diverged: value.is_none(),
    };
    let mut net = build_network(cfg, point, data)?;
    let mut opt = build_optimiser(cfg);
    let mut batches = cfg
        .batch_size
        .filter(|&b| b < data.len())
        .map(|b| Minibatches::new(data.len(), b, point.seed));
    for t in 0..=cfg.steps {
        let batch = match &mut batches {
            Some(mb) => mb.next(data),
            None => data.clone(),
        };
        let log = t % cfg.log_every == 0 || t == cfg.steps;
        match step_once(cfg, point, &mut net, &mut opt, &batch, t, log, &make) {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) if is_divergence(&e) => {
                records.push(make(t, "diverged".into(), None));
                return Ok(records);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn step_once(
    cfg: &ExperimentConfig,
    point: &RunPoint,
    net: &mut NetworkState,
    opt: &mut OptimState,
    batch: &Batch,
    t: usize,
    log: bool,
    make: &dyn Fn(usize, String, Option<f64>) -> MetricRecord,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    let train = t < cfg.steps;
    let wants = |m: Metric| log && cfg.metrics.contains(&m);
    let need_grad = train || wants(Metric::GradCosine) || wants(Metric::InferenceEnergy) || wants(Metric::InferenceConverged);
    let grads = if need_grad {
        Some(training_gradient(cfg, point.beta, net, batch)?)
    } else {
        None
    };
    let finite = |name: &str, v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(pclab_core::Error::Diverged(format!("{name} = {v} at step {t}")).into())
        }
    };
    if log {
        for &m in &cfg.metrics {
            match m {
                Metric::Loss => {
                    let loss = match grads.as_ref().and_then(|g| g.bp.as_ref()) {
                        Some((l, _)) => *l,
                        None => mse_loss(net, batch)?,
                    };
                    let v = finite("loss", loss)?;
                    out.push(make(t, m.name().into(), Some(v)));
                }
                Metric::EquilibratedEnergy => {
                    let v = finite("equilibrated energy", equilibrated_energy(net, batch)?)?;
                    out.push(make(t, m.name().into(), Some(v)));
                }
                Metric::Rescaling => {
                    let s = finite("rescaling", rescaling(net)?.s_total)?;
                    out.push(make(t, "rescaling".into(), Some(s)));
                    out.push(make(t, "rescaling_minus_one".into(), Some(s - 1.0)));
                }
                Metric::EmpiricalRescaling => {
                    let v = finite("empirical rescaling", empirical_rescaling(net, batch)?)?;
                    out.push(make(t, m.name().into(), Some(v)));
                }
                Metric::InferenceEnergy | Metric::InferenceConverged => {
                    let report = grads.as_ref().and_then(|g| g.inference.as_ref()).expect("inference ran");
                    if m == Metric::InferenceEnergy {
                        let v = finite("inference energy", report.final_energy)?;
                        out.push(make(t, m.name().into(), Some(v)));
                    } else {
                        let flag = if report.converged { 1.0 } else { 0.0 };
                        out.push(make(t, m.name().into(), Some(flag)));
                        out.push(make(t, "inference_iterations".into(), Some(report.iterations_run as f64)));
                    }
                }
                Metric::GradCosine => {
                    let g = grads.as_ref().expect("gradient computed");
                    let cos = match &g.bp {
                        Some((_, bp)) => g.grad.cosine(bp)?,
                        None => g.grad.cosine(&loss_and_gradients(net, batch)?.1)?,
                    };
                    let v = finite("gradient cosine", cos)?;
                    out.push(make(t, m.name().into(), Some(v)));
                }
                Metric::SecondMoments => {
                    let trace = net.forward(&batch.x)?;
                    for (l, v) in NetworkState::second_moments(&trace).into_iter().enumerate() {
                        let v = finite("second moment", v)?;
                        out.push(make(t, format!("second_moment_l{l}"), Some(v)));
                    }
                }
            }
        }
    }
    if train {
        let g = grads.expect("gradient computed");
        opt.step(net, &g.grad)?;
    }
    Ok(out)
}

/// Totals over a finished grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GridSummary {
    pub runs: usize,
    pub diverged: usize,
    pub records: usize,
}

/// Runs every grid point on a pool of [`worker_count`] threads and hands
/// records to `sink` in grid order as soon as each run's predecessors are
/// done. Output is independent of the worker count.
pub fn run_grid(
    cfg: &ExperimentConfig,
    mut sink: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<GridSummary> {
    run_grid_with_workers(cfg, worker_count(), &mut sink)
}

pub fn run_grid_with_workers(
    cfg: &ExperimentConfig,
    workers: usize,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<GridSummary> {
    cfg.validate()?;
    let data = Arc::new(load_data(cfg)?);
    if cfg.algorithm == Algorithm::PcClosedForm && data.y.cols() != 1 {
        return Err(LabError::Config("pc_closed_form requires scalar targets".into()));
    }
    let points = expand(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<MetricRecord>>)>();
    let cfg_arc = Arc::new(cfg.clone());
    for (i, p) in points.iter().copied().enumerate() {
        let tx = tx.clone();
        let data = Arc::clone(&data);
        let cfg = Arc::clone(&cfg_arc);
        pool.spawn_fifo(move || {
            let _ = tx.send((i, run_point(&cfg, &p, &data)));
        });
    }
    drop(tx);
    let mut pending: BTreeMap<usize, Vec<MetricRecord>> = BTreeMap::new();
    let mut next = 0;
    let mut summary = GridSummary::default();
    for (i, res) in rx {
        pending.insert(i, res?);
        while let Some(recs) = pending.remove(&next) {
            summary.runs += 1;
            if recs.last().is_some_and(|r| r.diverged) {
                summary.diverged += 1;
            }
            for r in &recs {
                sink(r)?;
                summary.records += 1;
            }
            next += 1;
        }
    }
    Ok(summary)
}

/// Runs the grid and collects its records in order.
pub fn collect_grid(cfg: &ExperimentConfig) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    run_grid(cfg, |r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}
