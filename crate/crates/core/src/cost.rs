//! Per-layer multiply/add/weight accounting, both closed-form from the
//! layer shapes and measured by instrumenting a forward pass. The two must
//! agree exactly; the instrumented path exists to keep the formulas honest.
//!
//! Conventions: an n-term sum costs n - 1 adds, a bias costs one add per
//! output element, zero-padded taps are counted, and a cell with binary fire
//! output books its integration multiplies outside the ledger because every
//! product is against a 0/1 input. Comparisons, selections, activations,
//! normalizers, and pooling are never multiplies or adds.

use serde::Serialize;

use crate::cell::Sharing;
use crate::error::Result;
use crate::network::{LayerSpec, Network, NetworkSpec};
use crate::tensor::Tensor;

/// Layer kinds whose costs make up the convolutional subtotal.
pub const CONV_FAMILY: [&str; 7] = [
    "conv_liaf",
    "conv_lif",
    "conv_lstm",
    "td_conv3d",
    "td_conv2d",
    "direct_liaf",
    "direct_lif",
];

pub fn is_conv_family(kind: &str) -> bool {
    CONV_FAMILY.contains(&kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    /// trainable scalars held by the layer
    pub weights: u64,
    /// multiplies per sample across the whole sequence
    pub muls: u64,
    /// adds per sample across the whole sequence
    pub adds: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostTotals {
    pub weights: u64,
    pub muls: u64,
    pub adds: u64,
}

impl CostTotals {
    fn absorb(&mut self, l: &LayerCost) {
        self.weights += l.weights;
        self.muls += l.muls;
        self.adds += l.adds;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: CostTotals,
    /// subtotal over the kinds in `CONV_FAMILY`
    pub conv: CostTotals,
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>) -> Self {
        let mut total = CostTotals::default();
        let mut conv = CostTotals::default();
        for l in &layers {
            total.absorb(l);
            if is_conv_family(l.kind) {
                conv.absorb(l);
            }
        }
        CostReport { layers, total, conv }
    }
}

fn dyn_weights(sharing: Sharing, channels: usize, trainable: bool) -> u64 {
    if !trainable {
        return 0;
    }
    4 * match sharing {
        Sharing::AllSharing => 1,
        Sharing::ChannelSharing | Sharing::NonSharing => channels as u64,
    }
}

/// Closed-form cost of every layer from the inferred shapes alone.
pub fn analytical(spec: &NetworkSpec) -> Result<CostReport> {
    let shapes = spec.infer_shapes(1)?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut cur: Vec<usize> = std::iter::once(1).chain(spec.input.iter().copied()).collect();
    for (li, layer) in spec.layers.iter().enumerate() {
        let out = &shapes[li];
        let t = if cur.len() >= 2 { cur[1] as u64 } else { 1 };
        // per-step feature count once anything after the time axis is flat
        let k: u64 = cur[2..].iter().product::<usize>() as u64;
        // element count of the full per-sample output, time included
        let r: u64 = out[1..].iter().product::<usize>() as u64;
        let (weights, muls, adds) = match layer {
            LayerSpec::DenseLiaf {
                units,
                sharing,
                bias,
                dynamics,
                ..
            } => {
                let l = *units as u64;
                let b = *bias as u64;
                (
                    l * (k + b) + dyn_weights(*sharing, *units, dynamics.trainable),
                    t * l * (k + 1),
                    t * l * (k - 1 + b + 2),
                )
            }
            LayerSpec::DenseLif {
                units,
                sharing,
                bias,
                dynamics,
            } => {
                let l = *units as u64;
                let b = *bias as u64;
                (
                    l * (k + b) + dyn_weights(*sharing, *units, dynamics.trainable),
                    t * l,
                    t * l * (k - 1 + b + 2),
                )
            }
            LayerSpec::ConvLiaf {
                filters,
                kernel,
                sharing,
                bias,
                dynamics,
                ..
            } => {
                let l = *filters as u64;
                let q = (kernel.0 * kernel.1 * cur[4]) as u64;
                let b = *bias as u64;
                (
                    l * (q + b) + dyn_weights(*sharing, *filters, dynamics.trainable),
                    r * (q + 1),
                    r * (q - 1 + b + 2),
                )
            }
            LayerSpec::ConvLif {
                filters,
                kernel,
                sharing,
                bias,
                dynamics,
                ..
            } => {
                let l = *filters as u64;
                let q = (kernel.0 * kernel.1 * cur[4]) as u64;
                let b = *bias as u64;
                (
                    l * (q + b) + dyn_weights(*sharing, *filters, dynamics.trainable),
                    r,
                    r * (q - 1 + b + 2),
                )
            }
            LayerSpec::DirectLiaf {
                sharing, dynamics, ..
            }
            | LayerSpec::DirectLif { sharing, dynamics } => (
                dyn_weights(*sharing, *cur.last().unwrap(), dynamics.trainable),
                r,
                2 * r,
            ),
            LayerSpec::TdDense { units, bias, .. } => {
                let l = *units as u64;
                let b = *bias as u64;
                let (steps, feat) = if out.len() == 2 {
                    (1, cur[1..].iter().product::<usize>() as u64)
                } else {
                    (t, k)
                };
                (
                    l * (feat + b),
                    steps * l * feat,
                    steps * l * (feat - 1 + b),
                )
            }
            LayerSpec::TdConv2d {
                filters,
                kernel,
                bias,
                ..
            } => {
                let l = *filters as u64;
                let q = (kernel.0 * kernel.1 * cur[4]) as u64;
                let b = *bias as u64;
                (l * (q + b), r * q, r * (q - 1 + b))
            }
            LayerSpec::TdConv3d {
                filters,
                kernel,
                bias,
                ..
            } => {
                let l = *filters as u64;
                let q = (kernel.0 * kernel.1 * kernel.2 * cur[4]) as u64;
                let b = *bias as u64;
                (l * (q + b), r * q, r * (q - 1 + b))
            }
            LayerSpec::Rnn { units, .. } => {
                let l = *units as u64;
                (l * (l + k + 1), t * l * (l + k), t * l * (l + k))
            }
            LayerSpec::Gru { units } => {
                let l = *units as u64;
                (
                    3 * l * (l + k + 1),
                    t * (3 * l * (l + k) + 3 * l),
                    t * l * (3 * (l + k) + 1),
                )
            }
            LayerSpec::Lstm { units } => {
                let l = *units as u64;
                (
                    4 * l * (l + k + 1),
                    t * l * (4 * (l + k) + 3),
                    t * l * (4 * (l + k) + 1),
                )
            }
            LayerSpec::ConvLstm {
                filters, kernel, ..
            } => {
                let l = *filters as u64;
                let q = (kernel.0 * kernel.1 * cur[4]) as u64;
                let recur = (kernel.0 * kernel.1 * filters) as u64;
                (
                    4 * l * (q + recur + 1),
                    r * (4 * (q + recur) + 3),
                    r * (4 * (q + recur) + 1),
                )
            }
            LayerSpec::TdLayerNorm {} | LayerSpec::TdBatchNorm { .. } => {
                (2 * *cur.last().unwrap() as u64, 0, 0)
            }
            LayerSpec::Embedding { vocab, dim } => ((vocab * dim) as u64, 0, 0),
            LayerSpec::TdActivation { .. }
            | LayerSpec::TdAvgPool { .. }
            | LayerSpec::TdDropout { .. }
            | LayerSpec::SumLayer {}
            | LayerSpec::Softmax {} => (0, 0, 0),
        };
        layers.push(LayerCost {
            index: li,
            kind: layer.kind_name(),
            weights,
            muls,
            adds,
        });
        cur = out.clone();
    }
    Ok(CostReport::from_layers(layers))
}

/// Cost measured by running one zero sample through the net with the
/// operation counters on. Weights are read off the parameter store.
pub fn instrumented(net: &Network) -> Result<CostReport> {
    let shape: Vec<usize> = std::iter::once(1)
        .chain(net.spec.input.iter().copied())
        .collect();
    let x = Tensor::zeros(&shape)?;
    let fwd = net.forward(&x, false, &[], true)?;
    let mut layers = Vec::with_capacity(net.spec.layers.len());
    for (li, layer) in net.spec.layers.iter().enumerate() {
        let (start, end) = net.layer_params[li];
        let weights: u64 = (start..end)
            .map(|i| net.params.get(i))
            .filter(|p| p.trainable)
            .map(|p| p.value.len() as u64)
            .sum();
        layers.push(LayerCost {
            index: li,
            kind: layer.kind_name(),
            weights,
            muls: fwd.counters[li].muls,
            adds: fwd.counters[li].adds,
        });
    }
    Ok(CostReport::from_layers(layers))
}

/// Relative saving of `ours` against `base`, in percent.
pub fn percent_saving(base: u64, ours: u64) -> f64 {
    100.0 * (base as f64 - ours as f64) / base as f64
}

/// Round a nonnegative value to one decimal, half away from zero.
pub fn round1(x: f64) -> f64 {
    (x * 10.0 + 0.5).floor() / 10.0
}
