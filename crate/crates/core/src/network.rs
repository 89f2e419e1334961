//! Architectures, initialisation and the parameterised forward pass.
//!
//! Activations are stored batch-major: a layer's activity for `P` samples
//! is a `P × width` matrix, one row per sample. Weight `W^(ℓ)` has shape
//! `out × in`, so a layer computes `H_in · W^(ℓ)ᵀ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blob::{Reader, Writer};
use crate::numkit::{dot, gaussian_matrix, gemm, Matrix, RngStream, Transpose};
use crate::parameterization::{scale_factors, Parameterisation, ScaleFactors};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    Resnet,
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" => Ok(ArchKind::Mlp),
            "resnet" | "res" => Ok(ArchKind::Resnet),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (valid: mlp, resnet)"
            ))),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Mlp => "mlp",
            ArchKind::Resnet => "resnet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Identity => u,
            Activation::Tanh => u.tanh(),
            Activation::Relu => u.max(0.0),
        }
    }

    /// Derivative at `u`; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_identity(self) -> bool {
        self == Activation::Identity
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}` (valid: identity, tanh, relu)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        kind: ArchKind,
        depth: usize,
        width: usize,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let a = Self {
            kind,
            depth,
            width,
            input_dim,
            output_dim,
            activation,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn mlp(depth: usize, width: usize, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(ArchKind::Mlp, depth, width, input_dim, output_dim, Activation::Identity)
    }

    pub fn resnet(depth: usize, width: usize, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(ArchKind::Resnet, depth, width, input_dim, output_dim, Activation::Identity)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.width == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "width, input_dim and output_dim must be >= 1 (got N={}, D={}, O={})",
                self.width, self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.activation.is_identity()
    }

    /// Shape `(out, in)` of `W^(ℓ)` for `ℓ ∈ 1..=L`.
    pub fn weight_shape(&self, layer: usize) -> (usize, usize) {
        if layer == 1 {
            (self.width, self.input_dim)
        } else if layer == self.depth {
            (self.output_dim, self.width)
        } else {
            (self.width, self.width)
        }
    }

    pub fn num_params(&self) -> usize {
        (1..=self.depth)
            .map(|l| {
                let (r, c) = self.weight_shape(l);
                r * c
            })
            .sum()
    }
}

/// Inputs `x` (`P × D`) and targets `y` (`P × O`).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "batch has {} inputs but {} targets",
                x.rows(),
                y.rows()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Rows `idx` of this batch, in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let pick = |m: &Matrix| Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j));
        Batch {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activations of layers `1..L−1` (index `ℓ − 1`).
    pub pre: Vec<Matrix>,
    /// Post-activations `h^(ℓ)` of layers `1..L−1` (index `ℓ − 1`).
    pub hidden: Vec<Matrix>,
    /// `h^(L)`, before division by γ.
    pub output_raw: Matrix,
    /// `f = h^(L) / γ`.
    pub prediction: Matrix,
}

impl ForwardTrace {
    /// `h^(ℓ)` for `ℓ ∈ 0..L−1`, with `h^(0) = x`.
    pub fn activity(&self, layer: usize) -> Option<&Matrix> {
        if layer == 0 {
            Some(&self.input)
        } else {
            self.hidden.get(layer - 1)
        }
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    arch: Architecture,
    params: Parameterisation,
    scales: ScaleFactors,
    weights: Vec<Matrix>,
}

const NET_MAGIC: &[u8; 4] = b"PCNS";

impl NetworkState {
    /// Draws `W^(ℓ)_ij ~ N(0, N^(−b_ℓ))` from child stream `ℓ` of `rng`.
    pub fn init(arch: Architecture, params: Parameterisation, rng: &RngStream) -> Result<Self> {
        Self::init_scaled(arch, params, rng, 1.0)
    }

    /// As [`NetworkState::init`] with every standard deviation multiplied by
    /// `init_scale` (0 gives all-zero weights).
    pub fn init_scaled(
        arch: Architecture,
        params: Parameterisation,
        rng: &RngStream,
        init_scale: f64,
    ) -> Result<Self> {
        arch.validate()?;
        let scales = scale_factors(&params, arch.width, arch.depth)?;
        let mut weights = Vec::with_capacity(arch.depth);
        for layer in 1..=arch.depth {
            let (r, c) = arch.weight_shape(layer);
            let var = scales.init_variance(layer) * init_scale * init_scale;
            weights.push(gaussian_matrix(&mut rng.child(layer as u64), r, c, var)?);
        }
        Ok(Self {
            arch,
            params,
            scales,
            weights,
        })
    }

    pub fn from_weights(
        arch: Architecture,
        params: Parameterisation,
        weights: Vec<Matrix>,
    ) -> Result<Self> {
        arch.validate()?;
        let scales = scale_factors(&params, arch.width, arch.depth)?;
        let net = Self {
            arch,
            params,
            scales,
            weights,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.arch.depth {
            return Err(Error::Shape(format!(
                "{} weight matrices for depth {}",
                self.weights.len(),
                self.arch.depth
            )));
        }
        for (i, w) in self.weights.iter().enumerate() {
            let want = self.arch.weight_shape(i + 1);
            if w.shape() != want {
                return Err(Error::Shape(format!(
                    "W^({}) is {:?}, expected {:?}",
                    i + 1,
                    w.shape(),
                    want
                )));
            }
            if !w.is_finite() {
                return Err(Error::Diverged(format!("W^({}) has non-finite entries", i + 1)));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Parameterisation {
        &self.params
    }

    pub fn scales(&self) -> &ScaleFactors {
        &self.scales
    }

    pub fn depth(&self) -> usize {
        self.arch.depth
    }

    pub fn gamma(&self) -> f64 {
        self.scales.gamma
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    /// Direct weight access; shapes must be preserved (checked by
    /// [`NetworkState::validate`]).
    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// `W^(ℓ)` for `ℓ ∈ 1..=L`.
    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer - 1]
    }

    fn applies_activation(&self, layer: usize) -> bool {
        match self.arch.kind {
            ArchKind::Mlp => layer < self.arch.depth,
            ArchKind::Resnet => layer > 1 && layer < self.arch.depth,
        }
    }

    fn is_residual(&self, layer: usize) -> bool {
        self.arch.kind == ArchKind::Resnet && layer > 1 && layer < self.arch.depth
    }

    /// Multiplier on `H W^(ℓ)ᵀ` before the activation.
    pub fn pre_coeff(&self, layer: usize) -> f64 {
        let s = &self.scales;
        if layer == 1 {
            s.first_pre_scale / (self.arch.input_dim as f64).sqrt()
        } else if layer == self.arch.depth {
            s.out_pre_scale / s.gamma
        } else if self.arch.kind == ArchKind::Resnet {
            1.0
        } else {
            s.hidden_pre_scale
        }
    }

    /// Multiplier on the residual branch `φ(H W^(ℓ)ᵀ)`; 1 elsewhere.
    pub fn branch_coeff(&self, layer: usize) -> f64 {
        if self.is_residual(layer) {
            self.scales.residual_branch_scale
        } else {
            1.0
        }
    }

    /// Applies layer `ℓ` to the batch-major `input`, returning
    /// `(pre-activation, output)`. The output layer returns `f`, i.e. the
    /// γ division is included.
    pub fn layer_forward(&self, layer: usize, input: &Matrix) -> Result<(Matrix, Matrix)> {
        let w = self.weight(layer);
        let mut pre = Matrix::zeros(input.rows(), w.rows());
        gemm(self.pre_coeff(layer), input, Transpose::No, w, Transpose::Yes, 0.0, &mut pre)?;
        if !self.applies_activation(layer) {
            let out = pre.clone();
            return Ok((pre, out));
        }
        let phi = self.arch.activation;
        let out = if self.is_residual(layer) {
            let b = self.branch_coeff(layer);
            let mut out = input.clone();
            out.as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .for_each(|(o, &u)| *o += b * phi.apply(u));
            out
        } else {
            pre.map(|u| phi.apply(u))
        };
        Ok((pre, out))
    }

    /// Vector-Jacobian products of layer `ℓ` at `(input, pre)` against the
    /// output cotangent `upstream`: returns `(∂/∂input, ∂/∂W^(ℓ))`. The input
    /// cotangent of layer 1 is not formed.
    pub fn layer_backward(
        &self,
        layer: usize,
        input: &Matrix,
        pre: &Matrix,
        upstream: &Matrix,
    ) -> Result<(Option<Matrix>, Matrix)> {
        let w = self.weight(layer);
        if upstream.shape() != pre.shape() || input.rows() != pre.rows() {
            return Err(Error::Shape(format!(
                "layer {layer} backward: upstream {:?}, pre {:?}, input {:?}",
                upstream.shape(),
                pre.shape(),
                input.shape()
            )));
        }
        let mut delta = upstream.clone();
        if self.applies_activation(layer) && !self.arch.activation.is_identity() {
            let phi = self.arch.activation;
            delta
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .for_each(|(d, &u)| *d *= phi.derivative(u));
        }
        let coeff = self.pre_coeff(layer) * self.branch_coeff(layer);
        let mut gw = Matrix::zeros(w.rows(), w.cols());
        gemm(coeff, &delta, Transpose::Yes, input, Transpose::No, 0.0, &mut gw)?;
        let gin = if layer == 1 {
            None
        } else {
            let mut gin = if self.is_residual(layer) {
                upstream.clone()
            } else {
                Matrix::zeros(input.rows(), input.cols())
            };
            gemm(coeff, &delta, Transpose::No, w, Transpose::No, 1.0, &mut gin)?;
            Some(gin)
        };
        Ok((gin, gw))
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, network expects D = {}",
                x.cols(),
                self.arch.input_dim
            )));
        }
        let l = self.arch.depth;
        let mut pre = Vec::with_capacity(l - 1);
        let mut hidden: Vec<Matrix> = Vec::with_capacity(l - 1);
        for layer in 1..l {
            let input = if layer == 1 { x } else { &hidden[layer - 2] };
            let (u, h) = self.layer_forward(layer, input)?;
            pre.push(u);
            hidden.push(h);
        }
        let (_, prediction) = self.layer_forward(l, &hidden[l - 2])?;
        let output_raw = prediction.scaled(self.scales.gamma);
        Ok(ForwardTrace {
            input: x.clone(),
            pre,
            hidden,
            output_raw,
            prediction,
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.prediction)
    }

    /// Rows `∂h^(L)_μ / ∂h^(ℓ)_μ` for `ℓ ∈ 1..L−1` (scalar output only).
    pub fn output_sensitivity(&self, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
        if self.arch.output_dim != 1 {
            return Err(Error::Unsupported(
                "output sensitivities need a scalar output".into(),
            ));
        }
        let l = self.arch.depth;
        if layer == 0 || layer >= l {
            return Err(Error::InvalidArgument(format!(
                "sensitivity layer {layer} outside 1..{}",
                l - 1
            )));
        }
        let p = trace.input.rows();
        let seed = Matrix::from_fn(p, 1, |_, _| self.scales.gamma);
        let (mut g, _) = self.layer_backward(l, &trace.hidden[l - 2], &trace.prediction, &seed)?;
        for k in (layer + 1..l).rev() {
            let cot = g.take().expect("hidden layers form input cotangents");
            let (gi, _) = self.layer_backward(k, &trace.hidden[k - 2], &trace.pre[k - 1], &cot)?;
            g = gi;
        }
        Ok(g.expect("layer < L has an input cotangent"))
    }

    /// `Φ^(ℓ)_{μν} = h^(ℓ)_μ·h^(ℓ)_ν / N`, with `Φ^(0)` normalised by `D`.
    pub fn feature_kernel(trace: &ForwardTrace, layer: usize, mu: usize, nu: usize) -> Result<f64> {
        let h = trace.activity(layer).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "feature kernel layer {layer} outside 0..{}",
                trace.depth() - 1
            ))
        })?;
        check_sample(h, mu)?;
        check_sample(h, nu)?;
        Ok(dot(h.row(mu), h.row(nu))? / h.cols() as f64)
    }

    /// `G^(ℓ)_{μν} = g^(ℓ)_μ·g^(ℓ)_ν / N` with `g^(ℓ) = √N ∂h^(L)/∂h^(ℓ)`.
    pub fn gradient_kernel(
        &self,
        trace: &ForwardTrace,
        layer: usize,
        mu: usize,
        nu: usize,
    ) -> Result<f64> {
        if self.arch.output_dim != 1 {
            return Err(Error::Unsupported("gradient kernel needs a scalar output".into()));
        }
        check_sample(&trace.input, mu)?;
        check_sample(&trace.input, nu)?;
        if layer == self.arch.depth {
            return Ok(1.0);
        }
        let g = self.output_sensitivity(trace, layer)?;
        Ok(dot(g.row(mu), g.row(nu))?)
    }

    /// Sample-averaged `(1/N)‖h^(ℓ)‖²` for `ℓ ∈ 0..L−1` (`ℓ = 0` over `D`).
    pub fn second_moments(trace: &ForwardTrace) -> Vec<f64> {
        (0..trace.depth())
            .map(|l| {
                let h = trace.activity(l).expect("layer in range");
                h.sum_sq() / (h.rows() * h.cols()) as f64
            })
            .collect()
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = Writer::new(NET_MAGIC);
        w.u8(match self.arch.kind {
            ArchKind::Mlp => 0,
            ArchKind::Resnet => 1,
        });
        w.u8(self.arch.activation.code());
        for d in [
            self.arch.depth,
            self.arch.width,
            self.arch.input_dim,
            self.arch.output_dim,
        ] {
            w.u64(d as u64);
        }
        write_params(&mut w, &self.params);
        w.matrices(&self.weights);
        w.finish()
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, NET_MAGIC)?;
        let kind = match r.u8()? {
            0 => ArchKind::Mlp,
            1 => ArchKind::Resnet,
            k => return Err(Error::Format(format!("unknown architecture code {k}"))),
        };
        let activation = Activation::from_code(r.u8()?)?;
        let depth = r.usize()?;
        let width = r.usize()?;
        let input_dim = r.usize()?;
        let output_dim = r.usize()?;
        let arch = Architecture::new(kind, depth, width, input_dim, output_dim, activation)?;
        let params = read_params(&mut r)?;
        let weights = r.matrices()?;
        r.finish()?;
        Self::from_weights(arch, params, weights)
    }
}

fn check_sample(m: &Matrix, i: usize) -> Result<()> {
    if i >= m.rows() {
        return Err(Error::InvalidArgument(format!(
            "sample {i} out of range for batch of {}",
            m.rows()
        )));
    }
    Ok(())
}

pub(crate) fn write_params(w: &mut Writer, p: &Parameterisation) {
    for v in [
        p.a_first, p.a_hidden, p.a_out, p.b_first, p.b_hidden, p.b_out, p.c, p.d, p.alpha,
        p.gamma0, p.eta0,
    ] {
        w.f64(v);
    }
}

pub(crate) fn read_params(r: &mut Reader<'_>) -> Result<Parameterisation> {
    let mut v = [0.0; 11];
    for slot in v.iter_mut() {
        *slot = r.f64()?;
    }
    let p = Parameterisation {
        a_first: v[0],
        a_hidden: v[1],
        a_out: v[2],
        b_first: v[3],
        b_hidden: v[4],
        b_out: v[5],
        c: v[6],
        d: v[7],
        alpha: v[8],
        gamma0: v[9],
        eta0: v[10],
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{mean, sample_variance};
    use crate::parameterization::preset;

    fn scalar_chain(w1: f64, w2: f64) -> NetworkState {
        let arch = Architecture::mlp(2, 1, 1, 1).unwrap();
        let w = vec![
            Matrix::from_vec(1, 1, vec![w1]).unwrap(),
            Matrix::from_vec(1, 1, vec![w2]).unwrap(),
        ];
        NetworkState::from_weights(arch, preset("SP").unwrap(), w).unwrap()
    }

    fn gaussian_x(p: usize, d: usize, seed: u64) -> Matrix {
        gaussian_matrix(&mut RngStream::new(seed), p, d, 1.0).unwrap()
    }

    #[test]
    fn init_variances_follow_preset() {
        let arch = Architecture::mlp(3, 256, 8, 1).unwrap();
        let mf = NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(1)).unwrap();
        let v = sample_variance(mf.weight(2).as_slice());
        assert!((v - 1.0).abs() < 0.05, "{v}");

        let sp = NetworkState::init(arch, preset("SP").unwrap(), &RngStream::new(1)).unwrap();
        let v = sample_variance(sp.weight(2).as_slice()) * 256.0;
        assert!((v - 1.0).abs() < 0.05, "{v}");

        let zero = NetworkState::init_scaled(arch, preset("SP").unwrap(), &RngStream::new(1), 0.0)
            .unwrap();
        assert!(zero.weights().iter().all(|w| w.sum_sq() == 0.0));
    }

    #[test]
    fn weight_shapes() {
        let arch = Architecture::resnet(4, 5, 3, 2).unwrap();
        let net = NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(0)).unwrap();
        let shapes: Vec<_> = net.weights().iter().map(|w| w.shape()).collect();
        assert_eq!(shapes, vec![(5, 3), (5, 5), (5, 5), (2, 5)]);
        assert_eq!(arch.num_params(), 15 + 25 + 25 + 10);
        assert!(Architecture::mlp(1, 4, 4, 1).is_err());
        assert!(Architecture::mlp(3, 0, 4, 1).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let arch = Architecture::mlp(4, 6, 3, 2).unwrap().with_activation(Activation::Tanh);
        let net = NetworkState::init_scaled(arch, preset("NTK").unwrap(), &RngStream::new(0), 0.0)
            .unwrap();
        let f = net.predict(&gaussian_x(5, 3, 2)).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_composes() {
        let net = scalar_chain(1.5, -2.0);
        let f = net.predict(&Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(f.get(0, 0), -9.0);
    }

    #[test]
    fn resnet_zero_hidden_passes_through() {
        let arch = Architecture::resnet(5, 4, 3, 1).unwrap().with_activation(Activation::Tanh);
        let mut net =
            NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(3)).unwrap();
        for l in 2..5 {
            net.weights_mut()[l - 1].scale_in_place(0.0);
        }
        let t = net.forward(&gaussian_x(2, 3, 4)).unwrap();
        assert_eq!(t.hidden[3], t.hidden[0]);
    }

    #[test]
    fn mlp_forward_matches_formula() {
        let arch = Architecture::mlp(3, 4, 2, 1).unwrap().with_activation(Activation::Tanh);
        let p = preset("muP").unwrap().with_gamma0(0.7);
        let net = NetworkState::init(arch, p, &RngStream::new(9)).unwrap();
        let x = gaussian_x(1, 2, 1);
        let n = 4f64;
        let xs = x.row(0);
        let h1: Vec<f64> = (0..4)
            .map(|i| {
                let u: f64 = (0..2).map(|j| net.weight(1).get(i, j) * xs[j]).sum();
                (n.powf(0.5) * u / 2f64.sqrt()).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| net.weight(2).get(i, j) * h1[j]).sum::<f64>().tanh())
            .collect();
        let out: f64 = (0..4).map(|j| net.weight(3).get(0, j) * h2[j]).sum();
        let gamma = 0.7 * n.sqrt();
        let f = net.predict(&x).unwrap().get(0, 0);
        assert!((f - out / gamma).abs() < 1e-14, "{f} vs {}", out / gamma);
    }

    #[test]
    fn forward_is_deterministic_and_reproducible() {
        let arch = Architecture::resnet(4, 8, 3, 2).unwrap().with_activation(Activation::Relu);
        let net = NetworkState::init(arch, preset("muP").unwrap(), &RngStream::new(5)).unwrap();
        let x = gaussian_x(3, 3, 6);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert!(net.forward(&gaussian_x(3, 4, 6)).is_err());
    }

    #[test]
    fn feature_kernel_examples() {
        let arch = Architecture::mlp(2, 4, 2, 1).unwrap();
        let mut net = NetworkState::init(arch, preset("SP").unwrap(), &RngStream::new(0)).unwrap();
        net.weights_mut()[0] = Matrix::from_fn(4, 2, |i, j| if i == j { 2f64.sqrt() } else { 0.0 });
        let x = Matrix::from_vec(2, 2, vec![2f64.sqrt(), 0.0, 0.0, 3.0]).unwrap();
        let t = net.forward(&x).unwrap();
        let h = t.hidden[0].row(0);
        let direct = h.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((NetworkState::feature_kernel(&t, 1, 0, 0).unwrap() - direct).abs() < 1e-15);
        assert_eq!(NetworkState::feature_kernel(&t, 1, 0, 1).unwrap(), 0.0);
        assert_eq!(NetworkState::feature_kernel(&t, 0, 1, 1).unwrap(), 4.5);
        assert!(NetworkState::feature_kernel(&t, 2, 0, 0).is_err());

        let unit = Matrix::from_fn(1, 4, |_, _| 1.0);
        let trace = ForwardTrace {
            input: Matrix::zeros(1, 2),
            pre: vec![unit.clone()],
            hidden: vec![unit],
            output_raw: Matrix::zeros(1, 1),
            prediction: Matrix::zeros(1, 1),
        };
        assert_eq!(NetworkState::feature_kernel(&trace, 1, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn gradient_kernel_matches_finite_differences() {
        for (kind, act) in [
            (ArchKind::Mlp, Activation::Identity),
            (ArchKind::Mlp, Activation::Tanh),
            (ArchKind::Resnet, Activation::Tanh),
        ] {
            let arch = Architecture::new(kind, 4, 5, 3, 1, act).unwrap();
            let net = NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(11))
                .unwrap();
            let x = gaussian_x(2, 3, 12);
            let t = net.forward(&x).unwrap();
            assert_eq!(net.gradient_kernel(&t, 4, 0, 1).unwrap(), 1.0);
            for layer in 1..4 {
                // Finite differences of h^(L) in h^(ℓ), propagated through the tail.
                let mut fd = Vec::new();
                for mu in 0..2 {
                    let mut g = vec![0.0; 5];
                    for (i, gi) in g.iter_mut().enumerate() {
                        let eps = 1e-6;
                        let eval = |delta: f64| {
                            let mut h = t.hidden[layer - 1].clone();
                            h.set(mu, i, h.get(mu, i) + delta);
                            for k in layer + 1..4 {
                                h = net.layer_forward(k, &h).unwrap().1;
                            }
                            net.layer_forward(4, &h).unwrap().1.get(mu, 0) * net.gamma()
                        };
                        *gi = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    }
                    fd.push(g);
                }
                let expect: f64 = fd[0].iter().zip(&fd[1]).map(|(a, b)| a * b).sum();
                let got = net.gradient_kernel(&t, layer, 0, 1).unwrap();
                assert!((got - expect).abs() < 1e-7 * (1.0 + expect.abs()), "{kind} {act} {layer}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn gradient_kernel_one_hidden_closed_form_and_zero_output() {
        let arch = Architecture::mlp(2, 6, 3, 1).unwrap();
        let mut net =
            NetworkState::init(arch, preset("mean-field").unwrap(), &RngStream::new(2)).unwrap();
        let t = net.forward(&gaussian_x(1, 3, 3)).unwrap();
        let w_sq = net.weight(2).sum_sq() / 6.0;
        assert!((net.gradient_kernel(&t, 1, 0, 0).unwrap() - w_sq).abs() < 1e-13);
        net.weights_mut()[1].scale_in_place(0.0);
        assert_eq!(net.gradient_kernel(&t, 1, 0, 0).unwrap(), 0.0);
        let wide = Architecture::mlp(2, 6, 3, 2).unwrap();
        let net2 = NetworkState::init(wide, preset("SP").unwrap(), &RngStream::new(2)).unwrap();
        let t2 = net2.forward(&gaussian_x(1, 3, 3)).unwrap();
        assert!(matches!(net2.gradient_kernel(&t2, 1, 0, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn width_stable_second_moments() {
        for name in ["mean-field", "muP"] {
            for n in [64, 256, 1024] {
                let arch = Architecture::mlp(5, n, 16, 1).unwrap();
                let mut per_layer = vec![Vec::new(); 4];
                for seed in 0..10 {
                    let net = NetworkState::init(arch, preset(name).unwrap(), &RngStream::new(seed))
                        .unwrap();
                    let t = net.forward(&gaussian_x(4, 16, 100 + seed)).unwrap();
                    let m = NetworkState::second_moments(&t);
                    for l in 1..5 {
                        per_layer[l - 1].push(m[l]);
                    }
                }
                let first = mean(&per_layer[0]);
                for (l, v) in per_layer.iter().enumerate() {
                    let r = mean(v) / first;
                    assert!((0.5..=2.0).contains(&r), "{name} N={n} layer {}: {r}", l + 1);
                }
            }
        }
    }

    #[test]
    fn blob_round_trip_and_corruption() {
        let arch = Architecture::resnet(3, 4, 2, 2).unwrap().with_activation(Activation::Relu);
        let net = NetworkState::init(arch, preset("muP").unwrap().with_gamma0(2.0), &RngStream::new(4))
            .unwrap();
        let blob = net.to_blob();
        assert_eq!(NetworkState::from_blob(&blob).unwrap(), net);
        assert!(NetworkState::from_blob(&blob[..blob.len() - 1]).is_err());
        assert!(NetworkState::from_blob(b"nope").is_err());
        let mut extra = blob.clone();
        extra.push(0);
        assert!(NetworkState::from_blob(&extra).is_err());
    }
}
