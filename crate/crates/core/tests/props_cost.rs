use liaf_core::cost;
use liaf_core::network::{LayerSpec, NetworkSpec};
use liaf_core::{Activation, DynamicsCfg, Network, OutputKind, Sharing};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dyn_cfg(rng: &mut ChaCha8Rng) -> DynamicsCfg {
    DynamicsCfg {
        v_th: 1.0,
        v_reset: 0.0,
        alpha: 0.5,
        beta: 0.0,
        trainable: rng.gen_bool(0.5),
        mu: None,
    }
}

fn shared(rng: &mut ChaCha8Rng) -> Sharing {
    if rng.gen_bool(0.5) {
        Sharing::AllSharing
    } else {
        Sharing::ChannelSharing
    }
}

fn kernel(rng: &mut ChaCha8Rng) -> ((usize, usize), usize) {
    if rng.gen_bool(0.5) {
        ((1, 1), 0)
    } else {
        ((3, 3), 1)
    }
}

fn seq_input(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..4), rng.gen_range(1..4)]
}

fn frame_input(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.gen_range(1..4),
        2 * rng.gen_range(2..4),
        2 * rng.gen_range(2..4),
        rng.gen_range(1..4),
    ]
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<NetworkSpec> {
    let act = match rng.gen_range(0..4) {
        0 => Activation::Relu,
        1 => Activation::Selu,
        2 => Activation::Tanh,
        _ => Activation::Sigmoid,
    };
    let out = if rng.gen_bool(0.5) {
        OutputKind::AnalogTr
    } else {
        OutputKind::AnalogNtr
    };
    let ((ki, kj), pad) = kernel(rng);
    let kt = if rng.gen_bool(0.5) { 1 } else { 3 };
    let mut specs = vec![
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![LayerSpec::DenseLiaf {
                units: rng.gen_range(1..5),
                activation: act,
                output: out,
                sharing: if rng.gen_bool(0.5) {
                    Sharing::NonSharing
                } else {
                    shared(rng)
                },
                bias: rng.gen_bool(0.5),
                dynamics: dyn_cfg(rng),
            }],
        },
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![LayerSpec::DenseLif {
                units: rng.gen_range(1..5),
                sharing: shared(rng),
                bias: rng.gen_bool(0.5),
                dynamics: dyn_cfg(rng),
            }],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::ConvLiaf {
                filters: rng.gen_range(1..4),
                kernel: (ki, kj),
                padding: pad,
                activation: act,
                output: out,
                sharing: shared(rng),
                bias: rng.gen_bool(0.5),
                dynamics: dyn_cfg(rng),
            }],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::ConvLif {
                filters: rng.gen_range(1..4),
                kernel: (ki, kj),
                padding: pad,
                sharing: shared(rng),
                bias: rng.gen_bool(0.5),
                dynamics: dyn_cfg(rng),
            }],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::DirectLiaf {
                activation: act,
                output: out,
                sharing: shared(rng),
                dynamics: dyn_cfg(rng),
            }],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::DirectLif {
                sharing: shared(rng),
                dynamics: dyn_cfg(rng),
            }],
        },
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![LayerSpec::TdDense {
                units: rng.gen_range(1..5),
                bias: rng.gen_bool(0.5),
                activation: act,
            }],
        },
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![
                LayerSpec::SumLayer {},
                LayerSpec::TdDense {
                    units: rng.gen_range(1..5),
                    bias: rng.gen_bool(0.5),
                    activation: act,
                },
                LayerSpec::Softmax {},
            ],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::TdConv2d {
                filters: rng.gen_range(1..4),
                kernel: (ki, kj),
                padding: pad,
                bias: rng.gen_bool(0.5),
                activation: act,
            }],
        },
        NetworkSpec {
            input: {
                let mut f = frame_input(rng);
                f[0] = kt + rng.gen_range(0..3);
                f
            },
            layers: vec![LayerSpec::TdConv3d {
                filters: rng.gen_range(1..4),
                kernel: (kt, ki, kj),
                padding_t: 0,
                padding_s: pad,
                bias: rng.gen_bool(0.5),
            }],
        },
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![LayerSpec::Rnn {
                units: rng.gen_range(1..5),
                activation: Activation::Tanh,
            }],
        },
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![LayerSpec::Gru {
                units: rng.gen_range(1..5),
            }],
        },
        NetworkSpec {
            input: seq_input(rng),
            layers: vec![LayerSpec::Lstm {
                units: rng.gen_range(1..5),
            }],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::ConvLstm {
                filters: rng.gen_range(1..4),
                kernel: (ki, kj),
                padding: pad,
            }],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![
                LayerSpec::TdLayerNorm {},
                LayerSpec::TdActivation { activation: act },
                LayerSpec::TdAvgPool { pool: (2, 2) },
                LayerSpec::TdDropout { p: 0.25 },
            ],
        },
        NetworkSpec {
            input: frame_input(rng),
            layers: vec![LayerSpec::TdBatchNorm { momentum: 0.9 }],
        },
        NetworkSpec {
            input: vec![rng.gen_range(1..5)],
            layers: vec![
                LayerSpec::Embedding {
                    vocab: rng.gen_range(1..6),
                    dim: rng.gen_range(1..5),
                },
                LayerSpec::SumLayer {},
            ],
        },
    ];
    let turn = rng.gen_range(0..specs.len());
    specs.rotate_left(turn);
    specs
}

#[test]
fn analytical_costs_match_instrumented_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut seen = std::collections::BTreeSet::new();
    for round in 0..20 {
        for spec in cases(&mut rng) {
            for layer in &spec.layers {
                seen.insert(layer.kind_name());
            }
            let analytical = cost::analytical(&spec).unwrap();
            let net = Network::build(spec.clone(), 5000 + round).unwrap();
            let measured = cost::instrumented(&net).unwrap();
            assert_eq!(
                analytical.layers, measured.layers,
                "spec: {}",
                serde_json::to_string(&spec).unwrap()
            );
            assert_eq!(analytical.total, measured.total);
            assert_eq!(analytical.conv, measured.conv);
        }
    }
    assert_eq!(seen.len(), 21, "kinds covered: {seen:?}");
}

#[test]
fn wider_layers_never_get_cheaper() {
    let build = |units: usize| NetworkSpec {
        input: vec![4, 6],
        layers: vec![LayerSpec::DenseLiaf {
            units,
            activation: Activation::Relu,
            output: OutputKind::AnalogTr,
            sharing: Sharing::NonSharing,
            bias: true,
            dynamics: DynamicsCfg {
                v_th: 1.0,
                v_reset: 0.0,
                alpha: 0.5,
                beta: 0.0,
                trainable: true,
                mu: None,
            },
        }],
    };
    let mut last = cost::analytical(&build(1)).unwrap().total;
    for units in 2..12 {
        let cur = cost::analytical(&build(units)).unwrap().total;
        assert!(cur.weights > last.weights);
        assert!(cur.muls > last.muls);
        assert!(cur.adds > last.adds);
        last = cur;
    }
}

#[test]
fn spiking_integration_needs_no_multiplies() {
    let spec = NetworkSpec {
        input: vec![3, 8, 8, 2],
        layers: vec![LayerSpec::ConvLif {
            filters: 4,
            kernel: (3, 3),
            padding: 1,
            sharing: Sharing::ChannelSharing,
            bias: true,
            dynamics: DynamicsCfg {
                v_th: 1.0,
                v_reset: 0.0,
                alpha: 0.5,
                beta: 0.0,
                trainable: false,
                mu: None,
            },
        }],
    };
    let report = cost::analytical(&spec).unwrap();
    let r = 3 * 8 * 8 * 4;
    assert_eq!(report.layers[0].muls, r as u64);
}
