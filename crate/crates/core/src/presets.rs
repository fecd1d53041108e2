//! Ready-made network specifications: the event-camera VGG-style stacks, the
//! gesture network in its split (conv + norm + pool + stateful) form, the
//! question-answering text network, and the two synthetic-task networks.

use crate::activation::Activation;
use crate::cell::Sharing;
use crate::network::{DynamicsCfg, LayerSpec, NetworkSpec, OutputKind};

/// Which temporal layer fills the conv slots of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvVariant {
    ConvLiaf,
    ConvLif,
    ConvLstm,
    TdConv3d,
    TdConv2d,
}

impl ConvVariant {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv_liaf" => ConvVariant::ConvLiaf,
            "conv_lif" => ConvVariant::ConvLif,
            "conv_lstm" => ConvVariant::ConvLstm,
            "td_conv3d" => ConvVariant::TdConv3d,
            "td_conv2d" => ConvVariant::TdConv2d,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggDataset {
    Mnist,
    Cifar,
}

fn td_conv(filters: usize) -> LayerSpec {
    LayerSpec::TdConv2d {
        filters,
        kernel: (3, 3),
        padding: 1,
        bias: true,
        activation: Activation::Identity,
    }
}

/// One VGG block: core, layer norm, ReLU, pool. The LIF form instead pools
/// before its spike stage and carries no separate activation.
fn vgg_block(variant: ConvVariant, filters: usize, pool: (usize, usize)) -> Vec<LayerSpec> {
    let norm = LayerSpec::TdLayerNorm {};
    let relu = LayerSpec::TdActivation {
        activation: Activation::Relu,
    };
    let pool = LayerSpec::TdAvgPool { pool };
    let core = match variant {
        ConvVariant::ConvLif => {
            return vec![
                td_conv(filters),
                norm,
                pool,
                LayerSpec::DirectLif {
                    sharing: Sharing::ChannelSharing,
                    dynamics: DynamicsCfg::default(),
                },
            ];
        }
        ConvVariant::ConvLiaf => LayerSpec::ConvLiaf {
            filters,
            kernel: (3, 3),
            padding: 1,
            activation: Activation::Identity,
            output: OutputKind::AnalogTr,
            sharing: Sharing::ChannelSharing,
            bias: true,
            dynamics: DynamicsCfg::default(),
        },
        ConvVariant::ConvLstm => LayerSpec::ConvLstm {
            filters,
            kernel: (3, 3),
            padding: 1,
        },
        ConvVariant::TdConv3d => LayerSpec::TdConv3d {
            filters,
            kernel: (3, 3, 3),
            padding_t: 1,
            padding_s: 1,
            bias: true,
        },
        ConvVariant::TdConv2d => td_conv(filters),
    };
    vec![core, norm, relu, pool]
}

fn dense_liaf(units: usize) -> LayerSpec {
    LayerSpec::DenseLiaf {
        units,
        activation: Activation::Relu,
        output: OutputKind::AnalogTr,
        sharing: Sharing::NonSharing,
        bias: true,
        dynamics: DynamicsCfg::default(),
    }
}

/// VGG-style event stack. The small variant takes (20, 40, 40, 2) frames
/// through three conv blocks and two dense blocks; the large one takes
/// (10, 128, 128, 2) through five conv blocks and one dense block. Every
/// conv is 3x3 extent-preserving; a dense block is dropout then a dense
/// stateful layer.
pub fn dvs_vgg(dataset: VggDataset, variant: ConvVariant) -> NetworkSpec {
    let (input, filters, pools, dense) = match dataset {
        VggDataset::Mnist => (
            vec![20, 40, 40, 2],
            vec![32, 64, 128],
            vec![(2, 2), (2, 2), (2, 2)],
            vec![512, 128],
        ),
        VggDataset::Cifar => (
            vec![10, 128, 128, 2],
            vec![32, 64, 128, 256, 512],
            vec![(2, 2), (2, 2), (2, 2), (2, 2), (4, 4)],
            vec![512],
        ),
    };
    let mut layers = Vec::new();
    for (f, p) in filters.iter().zip(&pools) {
        layers.extend(vgg_block(variant, *f, *p));
    }
    for units in dense {
        layers.push(LayerSpec::TdDropout { p: 0.5 });
        layers.push(dense_liaf(units));
    }
    layers.push(LayerSpec::SumLayer {});
    layers.push(LayerSpec::TdDense {
        units: 10,
        bias: true,
        activation: Activation::Identity,
    });
    layers.push(LayerSpec::Softmax {});
    NetworkSpec { input, layers }
}

/// Gesture recognition stack on (60, 32, 32, 2) frames. The stateful variant
/// splits each conv block into conv, batch norm, activation, a
/// fixed-dynamics stateful stage, and an optional pool; the recurrent
/// variant swaps the blocks for convolutional LSTM cells.
pub fn gesture_net(variant: ConvVariant) -> NetworkSpec {
    let blocks: [(usize, Option<(usize, usize)>); 3] =
        [(64, None), (128, Some((2, 2))), (128, Some((2, 2)))];
    let mut layers = Vec::new();
    for (filters, pool) in blocks {
        match variant {
            ConvVariant::ConvLstm => {
                layers.push(LayerSpec::ConvLstm {
                    filters,
                    kernel: (3, 3),
                    padding: 1,
                });
                if let Some(p) = pool {
                    layers.push(LayerSpec::TdAvgPool { pool: p });
                }
            }
            _ => {
                layers.push(LayerSpec::TdConv2d {
                    filters,
                    kernel: (3, 3),
                    padding: 1,
                    bias: true,
                    activation: Activation::Identity,
                });
                layers.push(LayerSpec::TdBatchNorm { momentum: 0.9 });
                layers.push(LayerSpec::TdActivation {
                    activation: Activation::Selu,
                });
                layers.push(LayerSpec::DirectLiaf {
                    activation: Activation::Selu,
                    output: OutputKind::AnalogNtr,
                    sharing: Sharing::AllSharing,
                    dynamics: DynamicsCfg {
                        v_th: 0.5,
                        v_reset: 0.0,
                        alpha: 0.3,
                        beta: 0.0,
                        trainable: false,
                        mu: None,
                    },
                });
                if let Some(p) = pool {
                    layers.push(LayerSpec::TdAvgPool { pool: p });
                }
            }
        }
    }
    layers.push(dense_liaf(256));
    layers.push(dense_liaf(11));
    layers.push(LayerSpec::SumLayer {});
    layers.push(LayerSpec::Softmax {});
    NetworkSpec {
        input: vec![60, 32, 32, 2],
        layers,
    }
}

/// Temporal core choices for the text network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextTemporal {
    DenseLiaf,
    DenseLif,
    Rnn,
    Gru,
    Lstm,
}

impl TextTemporal {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dense_liaf" => TextTemporal::DenseLiaf,
            "dense_lif" => TextTemporal::DenseLif,
            "rnn" => TextTemporal::Rnn,
            "gru" => TextTemporal::Gru,
            "lstm" => TextTemporal::Lstm,
            _ => return None,
        })
    }
}

/// Embedding -> temporal core (50 -> 100) -> sum -> vocabulary readout.
/// The dense LIAF core runs NTR with no activation.
pub fn text_net(vocab: usize, seq_len: usize, temporal: TextTemporal) -> NetworkSpec {
    let core = match temporal {
        TextTemporal::DenseLiaf => LayerSpec::DenseLiaf {
            units: 100,
            activation: Activation::Identity,
            output: OutputKind::AnalogNtr,
            sharing: Sharing::NonSharing,
            bias: true,
            dynamics: DynamicsCfg::default(),
        },
        TextTemporal::DenseLif => LayerSpec::DenseLif {
            units: 100,
            sharing: Sharing::NonSharing,
            bias: true,
            dynamics: DynamicsCfg::default(),
        },
        TextTemporal::Rnn => LayerSpec::Rnn {
            units: 100,
            activation: Activation::Tanh,
        },
        TextTemporal::Gru => LayerSpec::Gru { units: 100 },
        TextTemporal::Lstm => LayerSpec::Lstm { units: 100 },
    };
    NetworkSpec {
        input: vec![seq_len],
        layers: vec![
            LayerSpec::Embedding { vocab, dim: 50 },
            core,
            LayerSpec::SumLayer {},
            LayerSpec::TdDense {
                units: vocab,
                bias: true,
                activation: Activation::Identity,
            },
            LayerSpec::Softmax {},
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MovingBarVariant {
    /// trainable leaky dynamics, analog output
    Liaf,
    /// same topology with binary fire outputs
    Lif,
    /// leak and bias frozen at zero: a stateless per-frame stack
    Ablated,
}

impl MovingBarVariant {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "liaf" => MovingBarVariant::Liaf,
            "lif" => MovingBarVariant::Lif,
            "ablated" => MovingBarVariant::Ablated,
            _ => return None,
        })
    }
}

/// Direction classifier for the moving-bar task on (8, 16, 16, 2) frames.
pub fn moving_bar_net(variant: MovingBarVariant) -> NetworkSpec {
    let dynamics = match variant {
        MovingBarVariant::Ablated => DynamicsCfg {
            v_th: 0.5,
            v_reset: 0.0,
            alpha: 0.0,
            beta: 0.0,
            trainable: false,
            mu: None,
        },
        _ => DynamicsCfg {
            v_th: 0.5,
            v_reset: 0.0,
            alpha: 0.3,
            beta: 0.0,
            trainable: true,
            mu: None,
        },
    };
    let cell = |filters: usize| match variant {
        MovingBarVariant::Lif => LayerSpec::ConvLif {
            filters,
            kernel: (3, 3),
            padding: 1,
            sharing: Sharing::ChannelSharing,
            bias: true,
            dynamics,
        },
        _ => LayerSpec::ConvLiaf {
            filters,
            kernel: (3, 3),
            padding: 1,
            activation: Activation::Identity,
            output: OutputKind::AnalogTr,
            sharing: Sharing::ChannelSharing,
            bias: true,
            dynamics,
        },
    };
    let mut layers = Vec::new();
    for filters in [8usize, 16] {
        layers.push(cell(filters));
        layers.push(LayerSpec::TdLayerNorm {});
        layers.push(LayerSpec::TdActivation {
            activation: Activation::Relu,
        });
        layers.push(LayerSpec::TdAvgPool { pool: (2, 2) });
    }
    layers.push(LayerSpec::SumLayer {});
    layers.push(LayerSpec::TdDense {
        units: 4,
        bias: true,
        activation: Activation::Identity,
    });
    layers.push(LayerSpec::Softmax {});
    NetworkSpec {
        input: vec![8, 16, 16, 2],
        layers,
    }
}

/// Cued-recall classifier over (20, 9) one-hot-plus-flag sequences. The
/// baseline replaces the stateful layer with a per-step linear map, which
/// cannot bind the cue to its token.
pub fn delayed_recall_net(baseline: bool) -> NetworkSpec {
    let layers = if baseline {
        vec![
            LayerSpec::TdDense {
                units: 8,
                bias: true,
                activation: Activation::Identity,
            },
            LayerSpec::SumLayer {},
            LayerSpec::Softmax {},
        ]
    } else {
        vec![
            LayerSpec::DenseLiaf {
                units: 64,
                activation: Activation::Relu,
                output: OutputKind::AnalogTr,
                sharing: Sharing::NonSharing,
                bias: true,
                dynamics: DynamicsCfg {
                    v_th: 0.5,
                    v_reset: 0.0,
                    alpha: 0.3,
                    beta: 0.0,
                    trainable: true,
                    mu: None,
                },
            },
            LayerSpec::SumLayer {},
            LayerSpec::TdDense {
                units: 8,
                bias: true,
                activation: Activation::Identity,
            },
            LayerSpec::Softmax {},
        ]
    };
    NetworkSpec {
        input: vec![20, 9],
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;

    #[test]
    fn vgg_shapes_close() {
        for ds in [VggDataset::Mnist, VggDataset::Cifar] {
            for v in [
                ConvVariant::ConvLiaf,
                ConvVariant::ConvLif,
                ConvVariant::ConvLstm,
                ConvVariant::TdConv3d,
                ConvVariant::TdConv2d,
            ] {
                let spec = dvs_vgg(ds, v);
                let shapes = spec.infer_shapes(1).unwrap();
                assert_eq!(shapes.last().unwrap(), &vec![1, 10]);
            }
        }
    }

    #[test]
    fn vgg_mnist_pre_dense_shape() {
        let spec = dvs_vgg(VggDataset::Mnist, ConvVariant::ConvLiaf);
        let shapes = spec.infer_shapes(1).unwrap();
        // after the third pool the grid is 5x5x128 over 20 steps
        assert_eq!(shapes[11], vec![1, 20, 5, 5, 128]);
    }

    #[test]
    fn gesture_builds_both_variants() {
        for v in [ConvVariant::ConvLiaf, ConvVariant::ConvLstm] {
            let spec = gesture_net(v);
            let shapes = spec.infer_shapes(1).unwrap();
            assert_eq!(shapes.last().unwrap(), &vec![1, 11]);
        }
    }

    #[test]
    fn gesture_dynamics_are_frozen() {
        let net = Network::build(gesture_net(ConvVariant::ConvLiaf), 1).unwrap();
        let frozen: Vec<&str> = net
            .params
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(frozen.len(), 12);
        assert!(frozen.iter().all(|n| n.contains("v_th")
            || n.contains("v_reset")
            || n.contains("alpha")
            || n.contains("beta")));
    }

    #[test]
    fn text_net_builds_all_cores() {
        for t in [
            TextTemporal::DenseLiaf,
            TextTemporal::DenseLif,
            TextTemporal::Rnn,
            TextTemporal::Gru,
            TextTemporal::Lstm,
        ] {
            let spec = text_net(30, 12, t);
            let shapes = spec.infer_shapes(2).unwrap();
            assert_eq!(shapes.last().unwrap(), &vec![2, 30]);
        }
    }

    #[test]
    fn toy_nets_build() {
        for v in [
            MovingBarVariant::Liaf,
            MovingBarVariant::Lif,
            MovingBarVariant::Ablated,
        ] {
            let spec = moving_bar_net(v);
            assert_eq!(spec.infer_shapes(1).unwrap().last().unwrap(), &vec![1, 4]);
        }
        for b in [false, true] {
            let spec = delayed_recall_net(b);
            assert_eq!(spec.infer_shapes(1).unwrap().last().unwrap(), &vec![1, 8]);
        }
    }
}
