//! MSE loss and exact reverse-mode gradients.

use crate::blob::{Reader, Writer};
use crate::network::{Batch, NetworkState};
use crate::numkit::{cosine_similarity, Matrix};
use crate::{Error, Result};

/// One gradient matrix per layer, in layer order `1..=L`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<Matrix>,
}

const GRAD_MAGIC: &[u8; 4] = b"PCGB";

impl GradientBundle {
    pub fn zeros_like(net: &NetworkState) -> Self {
        Self {
            layers: net
                .weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn layer(&self, layer: usize) -> &Matrix {
        &self.layers[layer - 1]
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for m in &self.layers {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    pub fn check_matches(&self, other: &GradientBundle) -> Result<()> {
        let a: Vec<_> = self.layers.iter().map(Matrix::shape).collect();
        let b: Vec<_> = other.layers.iter().map(Matrix::shape).collect();
        if a != b {
            return Err(Error::Shape(format!("gradient shapes {a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn dot(&self, other: &GradientBundle) -> Result<f64> {
        self.check_matches(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.layers.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &GradientBundle) -> Result<f64> {
        self.check_matches(other)?;
        Ok(cosine_similarity(&self.flatten(), &other.flatten())?)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|m| m.scale_in_place(s));
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &GradientBundle, s: f64) -> Result<()> {
        self.check_matches(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, s)?;
        }
        Ok(())
    }

    /// Largest relative deviation `‖a − b‖ / max(‖a‖, ‖b‖)` of the whole
    /// bundle; 0 when both are zero.
    pub fn relative_error(&self, other: &GradientBundle) -> Result<f64> {
        let mut diff = self.clone();
        diff.add_scaled(other, -1.0)?;
        let scale = self.norm().max(other.norm());
        Ok(if scale == 0.0 { 0.0 } else { diff.norm() / scale })
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = Writer::new(GRAD_MAGIC);
        w.matrices(&self.layers);
        w.finish()
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, GRAD_MAGIC)?;
        let layers = r.matrices()?;
        r.finish()?;
        Ok(Self { layers })
    }
}

fn check_batch(net: &NetworkState, batch: &Batch) -> Result<()> {
    let a = net.arch();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.x.cols() != a.input_dim || batch.y.cols() != a.output_dim || batch.x.rows() != batch.y.rows() {
        return Err(Error::Shape(format!(
            "batch x {:?}, y {:?} for network D = {}, O = {}",
            batch.x.shape(),
            batch.y.shape(),
            a.input_dim,
            a.output_dim
        )));
    }
    Ok(())
}

/// `(1/2P) Σ_μ ‖y_μ − f_μ‖²`.
pub fn mse_from_predictions(pred: &Matrix, y: &Matrix) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::Shape(format!("predictions {:?} vs targets {:?}", pred.shape(), y.shape())));
    }
    Ok(pred.sub(y)?.sum_sq() / (2.0 * y.rows() as f64))
}

pub fn mse_loss(net: &NetworkState, batch: &Batch) -> Result<f64> {
    check_batch(net, batch)?;
    mse_from_predictions(&net.predict(&batch.x)?, &batch.y)
}

/// Loss and its exact gradient in every weight matrix.
pub fn loss_and_gradients(net: &NetworkState, batch: &Batch) -> Result<(f64, GradientBundle)> {
    check_batch(net, batch)?;
    let trace = net.forward(&batch.x)?;
    let p = batch.len() as f64;
    let resid = trace.prediction.sub(&batch.y)?;
    let loss = resid.sum_sq() / (2.0 * p);
    let l = net.depth();
    let mut layers = vec![Matrix::zeros(0, 0); l];
    let mut cot = resid.scaled(1.0 / p);
    let (gin, gw) = net.layer_backward(l, &trace.hidden[l - 2], &trace.prediction, &cot)?;
    layers[l - 1] = gw;
    cot = gin.expect("output layer has an input");
    for k in (1..l).rev() {
        let input = if k == 1 { &trace.input } else { &trace.hidden[k - 2] };
        let (gin, gw) = net.layer_backward(k, input, &trace.pre[k - 1], &cot)?;
        layers[k - 1] = gw;
        if let Some(g) = gin {
            cot = g;
        }
    }
    Ok((loss, GradientBundle { layers }))
}

pub fn bp_gradients(net: &NetworkState, batch: &Batch) -> Result<GradientBundle> {
    Ok(loss_and_gradients(net, batch)?.1)
}
