//! Power-law fits `y ≈ e^intercept · x^slope` by least squares in log-log space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::record::MetricRecord;
use crate::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

pub fn fit_log_log(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(LabError::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(LabError::Fit(format!("log-log fit needs positive values, got ({x}, {y})")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::Fit("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(PowerLawFit {
        slope,
        intercept,
        r2,
        points: points.len(),
    })
}

/// Grid coordinates of a record, without the seed.
type GridKey = (String, String, String, usize, usize, u64, Option<u64>, usize);

fn grid_key(r: &MetricRecord) -> GridKey {
    (
        r.experiment.clone(),
        r.arch.clone(),
        r.activation.clone(),
        r.width,
        r.depth,
        r.gamma0.to_bits(),
        r.beta.map(f64::to_bits),
        r.step,
    )
}

fn resolve(group: &[&MetricRecord], field: &str) -> Option<f64> {
    group
        .first()
        .and_then(|r| r.field(field))
        .or_else(|| group.iter().find(|r| r.metric == field).and_then(|r| r.value))
}

/// Pairs `x_field` with `y_field` per observation, averages both over seeds
/// at each grid point and fits the grid-point means.
///
/// A field is a record coordinate (`width`, `depth`, `gamma0`, `beta`,
/// `step`, `seed`, `depth/width`, `width/depth`) or a metric name, whose
/// value is taken from the record with that metric at the same observation.
pub fn fit_power_law(records: &[MetricRecord], x_field: &str, y_field: &str) -> Result<PowerLawFit> {
    let mut observations: BTreeMap<(GridKey, u64), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.diverged) {
        observations.entry((grid_key(r), r.seed)).or_default().push(r);
    }
    let mut grid: BTreeMap<GridKey, (f64, f64, usize)> = BTreeMap::new();
    for ((key, _), obs) in &observations {
        let (Some(x), Some(y)) = (resolve(obs, x_field), resolve(obs, y_field)) else {
            continue;
        };
        let e = grid.entry(key.clone()).or_insert((0.0, 0.0, 0));
        e.0 += x;
        e.1 += y;
        e.2 += 1;
    }
    if grid.is_empty() {
        return Err(LabError::Fit(format!("no records carry both `{x_field}` and `{y_field}`")));
    }
    let points: Vec<(f64, f64)> = grid.values().map(|&(x, y, n)| (x / n as f64, y / n as f64)).collect();
    fit_log_log(&points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pclab_core::RngStream;

    fn rec(width: usize, depth: usize, seed: u64, metric: &str, value: f64) -> MetricRecord {
        MetricRecord {
            experiment: "fit".into(),
            arch: "mlp".into(),
            activation: "identity".into(),
            seed,
            width,
            depth,
            gamma0: 1.0,
            beta: None,
            step: 0,
            metric: metric.into(),
            value: Some(value),
            diverged: false,
        }
    }

    #[test]
    fn inverse_law_exact() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 5.0, 10.0].iter().map(|&x| (x, 7.0 / x)).collect();
        let f = fit_log_log(&pts).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.intercept - 7f64.ln()).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_over_width_records() {
        let mut recs = Vec::new();
        for &n in &[16, 64, 256] {
            for &l in &[2, 8] {
                recs.push(rec(n, l, 0, "rescaling_minus_one", 3.0 * l as f64 / n as f64));
            }
        }
        let f = fit_power_law(&recs, "depth/width", "rescaling_minus_one").unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert_eq!(f.points, 6);
    }

    #[test]
    fn metric_against_metric_and_seed_averaging() {
        let mut recs = Vec::new();
        for &n in &[8, 16, 32, 64] {
            for seed in 0..2 {
                let y = if seed == 0 { 1.0 } else { 3.0 } / n as f64;
                recs.push(rec(n, 3, seed, "a", n as f64));
                recs.push(rec(n, 3, seed, "b", y));
            }
        }
        let f = fit_power_law(&recs, "a", "b").unwrap();
        assert_eq!(f.points, 4);
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.intercept - 2f64.ln()).abs() < 1e-12);
        let g = fit_power_law(&recs, "width", "b").unwrap();
        assert_eq!(g, f);
    }

    #[test]
    fn noisy_slope_recovered() {
        let mut rng = RngStream::new(17);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let x = 2f64.powf(i as f64 / 4.0);
                (x, 5.0 * x.powf(-1.0) * (0.05 * rng.standard_normal()).exp())
            })
            .collect();
        let f = fit_log_log(&pts).unwrap();
        assert!((f.slope + 1.0).abs() <= 0.05, "slope {}", f.slope);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_log_log(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_log_log(&[(1.0, 1.0), (2.0, -2.0), (3.0, 1.0)]).is_err());
        assert!(fit_log_log(&[(1.0, 1.0), (0.0, 2.0), (3.0, 1.0)]).is_err());
        assert!(fit_log_log(&[(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)]).is_err());
        assert!(fit_power_law(&[], "width", "loss").is_err());
    }
}
