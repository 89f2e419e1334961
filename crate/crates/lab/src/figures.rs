//! Committed configs for the figure reproductions, at desk scale.

use crate::config::ExperimentConfig;
use crate::{LabError, Result};

pub struct Figure {
    pub id: &'static str,
    pub description: &'static str,
    /// `(file name, contents)` of each config.
    pub configs: &'static [(&'static str, &'static str)],
}

macro_rules! cfg {
    ($name:literal) => {
        ($name, include_str!(concat!("../configs/", $name, ".cfg")))
    };
}

pub const FIGURES: &[Figure] = &[
    Figure {
        id: "fig1",
        description: "PC/BP gradient cosine over width x depth for linear resnets and MLPs",
        configs: &[cfg!("fig1-resnet-width-depth"), cfg!("fig1-mlp-width-depth")],
    },
    Figure {
        id: "fig2",
        description: "mean-field linear MLP width sweep: rescaling, energy vs loss, cosine",
        configs: &[cfg!("fig2-mean-field-mlp"), cfg!("fig2-mean-field-mlp-bp")],
    },
    Figure {
        id: "fig3",
        description: "resnet rescaling s - 1 against L/N",
        configs: &[cfg!("fig3-resnet-rescaling")],
    },
    Figure {
        id: "fig4",
        description: "nonlinear resnets with iterative inference across step sizes",
        configs: &[cfg!("fig4-tanh-resnet-betas"), cfg!("fig4-relu-resnet-betas")],
    },
    Figure {
        id: "sp-toy",
        description: "SP width sweep on the toy task",
        configs: &[cfg!("figA-sp-toy")],
    },
    Figure {
        id: "learning-regimes",
        description: "lazy vs rich learning as gamma0 grows",
        configs: &[cfg!("figA-learning-regimes-pc_closed_form"), cfg!("figA-learning-regimes-bp")],
    },
    Figure {
        id: "saddle-mlp",
        description: "SP MLP saddle escape, PC vs BP",
        configs: &[cfg!("figA-saddle-mlp-pc_closed_form"), cfg!("figA-saddle-mlp-bp")],
    },
    Figure {
        id: "saddle-resnet",
        description: "SP resnet saddle escape, PC vs BP",
        configs: &[cfg!("figA-saddle-resnet-pc_closed_form"), cfg!("figA-saddle-resnet-bp")],
    },
    Figure {
        id: "toy-resnet",
        description: "nonlinear resnets on the toy task across widths",
        configs: &[cfg!("figA-toy-resnet-tanh"), cfg!("figA-toy-resnet-relu")],
    },
];

pub fn figure(id: &str) -> Result<&'static Figure> {
    FIGURES.iter().find(|f| f.id == id).ok_or_else(|| {
        let ids: Vec<&str> = FIGURES.iter().map(|f| f.id).collect();
        LabError::Config(format!("unknown figure `{id}` (known: {})", ids.join(", ")))
    })
}

impl Figure {
    pub fn parsed(&self) -> Result<Vec<ExperimentConfig>> {
        self.configs
            .iter()
            .map(|(name, text)| ExperimentConfig::parse(text).map_err(|e| LabError::Config(format!("{name}: {e}"))))
            .collect()
    }
}
