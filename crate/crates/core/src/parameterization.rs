//! Width/depth exponent algebra.
//!
//! A [`Parameterisation`] fixes how preactivations (`a`), init variances
//! (`b`), the learning rate (`c`), the output scale (`d`) and residual
//! branches (`alpha`) scale with width `N` and depth `L`. Everything
//! downstream reads its scale factors through [`scale_factors`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for exponent equalities.
pub const EXPONENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("unknown preset `{0}` (valid: SP, NTK, mean-field, muP)")]
    UnknownPreset(String),
    #[error("invalid parameterisation: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("width N = {n} and depth L = {l} out of range (need N >= 1, L >= 2)")]
    OutOfRange { n: usize, l: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameterisation {
    pub a_first: f64,
    pub a_hidden: f64,
    pub a_out: f64,
    pub b_first: f64,
    pub b_hidden: f64,
    pub b_out: f64,
    pub c: f64,
    pub d: f64,
    /// Residual depth exponent; unused by MLPs.
    pub alpha: f64,
    pub gamma0: f64,
    pub eta0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    Sp,
    Ntk,
    MeanField,
    MuP,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Sp, Preset::Ntk, Preset::MeanField, Preset::MuP];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Sp => "SP",
            Preset::Ntk => "NTK",
            Preset::MeanField => "mean-field",
            Preset::MuP => "muP",
        }
    }

    pub fn params(self) -> Parameterisation {
        let (a_first, b_first, a_hidden, b_hidden, c, d, alpha) = match self {
            Preset::Sp => (0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
            Preset::Ntk => (0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0),
            Preset::MeanField => (0.0, 0.0, 0.5, 0.0, 0.0, 0.5, 0.5),
            Preset::MuP => (-0.5, 1.0, 0.0, 1.0, 1.0, 0.5, 0.5),
        };
        Parameterisation {
            a_first,
            a_hidden,
            a_out: a_hidden,
            b_first,
            b_hidden,
            b_out: b_hidden,
            c,
            d,
            alpha,
            gamma0: 1.0,
            eta0: 1.0,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "sp" | "standard" => Ok(Preset::Sp),
            "ntk" => Ok(Preset::Ntk),
            "mean-field" | "meanfield" | "mf" => Ok(Preset::MeanField),
            "mup" | "μp" => Ok(Preset::MuP),
            _ => Err(ParamError::UnknownPreset(s.to_string())),
        }
    }
}

/// Looks up one of the four named presets.
pub fn preset(name: &str) -> Result<Parameterisation, ParamError> {
    Ok(name.parse::<Preset>()?.params())
}

const KEYS: [&str; 11] = [
    "a_first", "a_hidden", "a_out", "b_first", "b_hidden", "b_out", "c", "d", "alpha", "gamma0",
    "eta0",
];

impl Parameterisation {
    pub fn validate(&self) -> Result<(), ParamError> {
        let exps = [
            self.a_first,
            self.a_hidden,
            self.a_out,
            self.b_first,
            self.b_hidden,
            self.b_out,
            self.c,
            self.d,
            self.alpha,
        ];
        if exps.iter().any(|e| !e.is_finite()) {
            return Err(ParamError::Invalid("exponents must be finite".into()));
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(ParamError::Invalid(format!("gamma0 must be > 0, got {}", self.gamma0)));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(ParamError::Invalid(format!("eta0 must be > 0, got {}", self.eta0)));
        }
        Ok(())
    }

    pub fn with_gamma0(mut self, gamma0: f64) -> Self {
        self.gamma0 = gamma0;
        self
    }

    pub fn with_eta0(mut self, eta0: f64) -> Self {
        self.eta0 = eta0;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn field_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "a_first" => &mut self.a_first,
            "a_hidden" => &mut self.a_hidden,
            "a_out" => &mut self.a_out,
            "b_first" => &mut self.b_first,
            "b_hidden" => &mut self.b_hidden,
            "b_out" => &mut self.b_out,
            "c" => &mut self.c,
            "d" => &mut self.d,
            "alpha" => &mut self.alpha,
            "gamma0" => &mut self.gamma0,
            "eta0" => &mut self.eta0,
            _ => return None,
        })
    }

    fn fields(&self) -> [f64; 11] {
        [
            self.a_first,
            self.a_hidden,
            self.a_out,
            self.b_first,
            self.b_hidden,
            self.b_out,
            self.c,
            self.d,
            self.alpha,
            self.gamma0,
            self.eta0,
        ]
    }

    /// Sets one exponent or constant by its key-value name.
    pub fn set(&mut self, key: &str, value: f64) -> Result<(), ParamError> {
        let slot = self
            .field_mut(key)
            .ok_or_else(|| ParamError::Invalid(format!("unknown key `{key}`")))?;
        *slot = value;
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// One `name = value` line per field. Values use Rust's shortest
    /// round-trip float formatting.
    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .zip(self.fields())
            .map(|(k, v)| format!("{k} = {v:?}\n"))
            .collect()
    }

    /// Parses the flat `name = value` format. An optional `preset = <name>`
    /// line seeds every field; explicit keys override it. Without a preset
    /// all eleven keys are required. `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, ParamError> {
        let mut base: Option<Parameterisation> = None;
        let mut overrides: Vec<(usize, String, f64)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ParamError::Parse {
                line: line_no,
                msg: format!("expected `name = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                base = Some(preset(v).map_err(|e| ParamError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?);
                continue;
            }
            if !Self::is_key(k) {
                return Err(ParamError::Parse {
                    line: line_no,
                    msg: format!("unknown key `{k}`"),
                });
            }
            let value = parse_real(v).ok_or_else(|| ParamError::Parse {
                line: line_no,
                msg: format!("`{v}` is not a real number"),
            })?;
            overrides.push((line_no, k.to_string(), value));
        }
        let mut p = match base {
            Some(p) => p,
            None => {
                let missing: Vec<&str> = KEYS
                    .iter()
                    .copied()
                    .filter(|k| !overrides.iter().any(|(_, o, _)| o == k))
                    .collect();
                if !missing.is_empty() {
                    return Err(ParamError::Parse {
                        line: 0,
                        msg: format!("missing keys without a preset: {}", missing.join(", ")),
                    });
                }
                Preset::Sp.params()
            }
        };
        for (_, k, v) in overrides {
            p.set(&k, v)?;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Parses a real, also accepting simple fractions such as `1/2` or `-1/2`.
pub fn parse_real(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().ok()?;
        let d: f64 = den.trim().parse().ok()?;
        return (d != 0.0).then_some(n / d);
    }
    s.parse().ok()
}

/// Outcome of the desiderata checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub stable_init: bool,
    pub stable_predictions: bool,
    pub feature_learning: bool,
    pub depth_stable_init: bool,
    pub depth_feature_learning: bool,
    pub violated_equations: Vec<String>,
}

impl ConstraintReport {
    pub fn width_ok(&self) -> bool {
        self.stable_init && self.stable_predictions && self.feature_learning
    }

    pub fn all_ok(&self) -> bool {
        self.width_ok() && self.depth_stable_init && self.depth_feature_learning
    }
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXPONENT_TOL
}

/// Evaluates the width and depth desiderata.
///
/// The prediction-stability conditions are `c + 2a − 1 = min(0, 2d)` for
/// layers `ℓ ≥ 2` and `c + 2a₁ = min(0, 2d)` for the first layer, evaluated
/// on the branch selected by the actual `d`.
pub fn check_constraints(p: &Parameterisation) -> ConstraintReport {
    let mut violated = Vec::new();
    let mut check = |lhs: f64, rhs: f64, text: &str| -> bool {
        let ok = approx_eq(lhs, rhs);
        if !ok {
            violated.push(format!("{text} (lhs = {lhs}, rhs = {rhs})"));
        }
        ok
    };

    let init_first = check(2.0 * p.a_first + p.b_first, 0.0, "2·a_first + b_first = 0");
    let init_hidden = check(2.0 * p.a_hidden + p.b_hidden, 1.0, "2·a_hidden + b_hidden = 1");
    let init_out = check(2.0 * p.a_out + p.b_out, 1.0, "2·a_out + b_out = 1");

    let branch = 0f64.min(2.0 * p.d);
    let pred_hidden = check(p.c + 2.0 * p.a_hidden - 1.0, branch, "c + 2·a_hidden − 1 = min(0, 2d)");
    let pred_out = check(p.c + 2.0 * p.a_out - 1.0, branch, "c + 2·a_out − 1 = min(0, 2d)");
    let pred_first = check(p.c + 2.0 * p.a_first, branch, "c + 2·a_first = min(0, 2d)");

    let feature_learning = check(p.d, 0.5, "d = 1/2");

    let depth_feature_learning = check(p.alpha, 0.5, "alpha = 1/2");
    let depth_stable_init = p.alpha >= 0.5 - EXPONENT_TOL;
    if !depth_stable_init {
        violated.push(format!("alpha ≥ 1/2 (alpha = {})", p.alpha));
    }

    ConstraintReport {
        stable_init: init_first && init_hidden && init_out,
        stable_predictions: pred_hidden && pred_out && pred_first,
        feature_learning,
        depth_stable_init,
        depth_feature_learning,
        violated_equations: violated,
    }
}

/// Concrete multipliers for one `(N, L)` network size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub width: usize,
    pub depth: usize,
    /// `γ = γ₀ N^d`.
    pub gamma: f64,
    /// `η = η₀ γ² N^(−c)`.
    pub eta: f64,
    /// `N^(−a₁)`; the `1/√D` input factor is applied by the layer.
    pub first_pre_scale: f64,
    pub hidden_pre_scale: f64,
    pub out_pre_scale: f64,
    pub first_variance: f64,
    pub hidden_variance: f64,
    pub out_variance: f64,
    /// `L^(−α) N^(−1/2)`.
    pub residual_branch_scale: f64,
}

impl ScaleFactors {
    /// Preactivation multiplier of layer `ℓ ∈ 1..=L`.
    pub fn layer_pre_scale(&self, layer: usize) -> f64 {
        if layer <= 1 {
            self.first_pre_scale
        } else if layer >= self.depth {
            self.out_pre_scale
        } else {
            self.hidden_pre_scale
        }
    }

    /// Init variance `N^(−b_ℓ)` of layer `ℓ ∈ 1..=L`.
    pub fn init_variance(&self, layer: usize) -> f64 {
        if layer <= 1 {
            self.first_variance
        } else if layer >= self.depth {
            self.out_variance
        } else {
            self.hidden_variance
        }
    }
}

pub fn scale_factors(p: &Parameterisation, n: usize, l: usize) -> Result<ScaleFactors, ParamError> {
    if n < 1 || l < 2 {
        return Err(ParamError::OutOfRange { n, l });
    }
    p.validate()?;
    let nf = n as f64;
    let lf = l as f64;
    let pow = |e: f64| nf.powf(e);
    let gamma = p.gamma0 * pow(p.d);
    Ok(ScaleFactors {
        width: n,
        depth: l,
        gamma,
        eta: p.eta0 * gamma * gamma * pow(-p.c),
        first_pre_scale: pow(-p.a_first),
        hidden_pre_scale: pow(-p.a_hidden),
        out_pre_scale: pow(-p.a_out),
        first_variance: pow(-p.b_first),
        hidden_variance: pow(-p.b_hidden),
        out_variance: pow(-p.b_out),
        residual_branch_scale: lf.powf(-p.alpha) / nf.sqrt(),
    })
}
