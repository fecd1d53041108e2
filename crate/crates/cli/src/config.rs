use std::path::{Path, PathBuf};

use liaf_core::presets::{
    self, ConvVariant, MovingBarVariant, TextTemporal, VggDataset,
};
use liaf_core::{LayerSpec, NetworkSpec, OptimizerCfg, PlateauCfg};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// vocabulary and unrolled length used by the `text_*` presets
pub const TEXT_VOCAB: usize = 178;
pub const TEXT_SEQ: usize = 100;

/// Network selection: exactly one of a named preset or an inline spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
}

impl NetworkRef {
    pub fn resolve(&self) -> Result<NetworkSpec, CliError> {
        match (&self.preset, &self.spec) {
            (Some(name), None) => preset(name).ok_or_else(|| {
                CliError::Input(format!(
                    "unknown preset '{name}'; known presets: {}",
                    preset_names().join(", ")
                ))
            }),
            (None, Some(spec)) => Ok(spec.clone()),
            (Some(_), Some(_)) => Err(CliError::Input(
                "network wants either 'preset' or 'spec', not both".into(),
            )),
            (None, None) => Err(CliError::Input(
                "network needs a 'preset' name or an inline 'spec'".into(),
            )),
        }
    }
}

pub fn preset(name: &str) -> Option<NetworkSpec> {
    if let Some(v) = name.strip_prefix("dvs_vgg_mnist_") {
        return ConvVariant::parse(v).map(|v| presets::dvs_vgg(VggDataset::Mnist, v));
    }
    if let Some(v) = name.strip_prefix("dvs_vgg_cifar_") {
        return ConvVariant::parse(v).map(|v| presets::dvs_vgg(VggDataset::Cifar, v));
    }
    if let Some(v) = name.strip_prefix("gesture_") {
        return ConvVariant::parse(v).map(presets::gesture_net);
    }
    if let Some(v) = name.strip_prefix("text_") {
        return TextTemporal::parse(v).map(|t| presets::text_net(TEXT_VOCAB, TEXT_SEQ, t));
    }
    if let Some(v) = name.strip_prefix("moving_bar_") {
        return MovingBarVariant::parse(v).map(presets::moving_bar_net);
    }
    match name {
        "delayed_recall_liaf" => Some(presets::delayed_recall_net(false)),
        "delayed_recall_baseline" => Some(presets::delayed_recall_net(true)),
        _ => None,
    }
}

pub fn preset_names() -> Vec<String> {
    let conv = ["conv_liaf", "conv_lif", "conv_lstm", "td_conv3d", "td_conv2d"];
    let mut names = Vec::new();
    for family in ["dvs_vgg_mnist", "dvs_vgg_cifar", "gesture"] {
        for v in conv {
            names.push(format!("{family}_{v}"));
        }
    }
    for t in ["dense_liaf", "dense_lif", "rnn", "gru", "lstm"] {
        names.push(format!("text_{t}"));
    }
    for m in ["liaf", "lif", "ablated"] {
        names.push(format!("moving_bar_{m}"));
    }
    names.push("delayed_recall_liaf".into());
    names.push("delayed_recall_baseline".into());
    names
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    pub train: PathBuf,
    pub val: PathBuf,
    /// rescale each clip to unit max after loading
    #[serde(default)]
    pub normalize: bool,
}

fn default_batch() -> usize {
    32
}

fn default_jobs() -> usize {
    1
}

/// Everything a training run needs; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkRef,
    pub optimizer: OptimizerCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PlateauCfg>,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// surrogate window override for layers that leave it unset
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub data: DataCfg,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub wall_clock: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (what, dir) in [("train", &self.data.train), ("val", &self.data.val)] {
            if !dir.is_dir() {
                return Err(CliError::Input(format!(
                    "{what} data directory {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        let mut spec = self.network.resolve()?;
        if let Some(mu) = self.mu {
            apply_mu_default(&mut spec, mu);
        }
        Ok(spec)
    }
}

fn apply_mu_default(spec: &mut NetworkSpec, mu: f64) {
    for layer in &mut spec.layers {
        let dynamics = match layer {
            LayerSpec::DenseLiaf { dynamics, .. }
            | LayerSpec::DenseLif { dynamics, .. }
            | LayerSpec::ConvLiaf { dynamics, .. }
            | LayerSpec::ConvLif { dynamics, .. }
            | LayerSpec::DirectLiaf { dynamics, .. }
            | LayerSpec::DirectLif { dynamics, .. } => dynamics,
            _ => continue,
        };
        if dynamics.mu.is_none() {
            dynamics.mu = Some(mu);
        }
    }
}
