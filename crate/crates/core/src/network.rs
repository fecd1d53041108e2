//! Network assembly: layer specifications, parameter initialization, shape
//! inference, and the tape-based forward pass shared by training, evaluation,
//! and operation counting.
//!
//! A network is a linear stack over a (B, T, ...) input. Temporal layers
//! (the fire/reset cells and the recurrent baselines) must appear before the
//! single `sum_layer` that collapses the time axis; `softmax`, when present,
//! must be the final layer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::cell::Sharing;
use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Bcast, OpCounter, Tensor};

fn default_true() -> bool {
    true
}

fn default_v_th() -> f64 {
    0.5
}

fn default_alpha() -> f64 {
    0.3
}

fn default_momentum() -> f64 {
    0.9
}

fn act_identity() -> Activation {
    Activation::Identity
}

fn act_relu() -> Activation {
    Activation::Relu
}

fn act_tanh() -> Activation {
    Activation::Tanh
}

fn out_tr() -> OutputKind {
    OutputKind::AnalogTr
}

fn sharing_non() -> Sharing {
    Sharing::NonSharing
}

fn sharing_channel() -> Sharing {
    Sharing::ChannelSharing
}

fn sharing_all() -> Sharing {
    Sharing::AllSharing
}

/// Initial values and trainability of the per-cell dynamics parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DynamicsCfg {
    #[serde(default = "default_v_th")]
    pub v_th: f64,
    #[serde(default)]
    pub v_reset: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_true")]
    pub trainable: bool,
    /// surrogate window half-width; defaults to half the initial threshold
    #[serde(default)]
    pub mu: Option<f64>,
}

impl Default for DynamicsCfg {
    fn default() -> Self {
        Self {
            v_th: default_v_th(),
            v_reset: 0.0,
            alpha: default_alpha(),
            beta: 0.0,
            trainable: true,
            mu: None,
        }
    }
}

impl DynamicsCfg {
    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(0.5 * self.v_th)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// binary fire train
    Spike,
    /// activation of U - v_th
    AnalogTr,
    /// activation of U
    AnalogNtr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    DenseLiaf {
        units: usize,
        #[serde(default = "act_relu")]
        activation: Activation,
        #[serde(default = "out_tr")]
        output: OutputKind,
        #[serde(default = "sharing_non")]
        sharing: Sharing,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        dynamics: DynamicsCfg,
    },
    DenseLif {
        units: usize,
        #[serde(default = "sharing_non")]
        sharing: Sharing,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        dynamics: DynamicsCfg,
    },
    ConvLiaf {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default)]
        padding: usize,
        #[serde(default = "act_relu")]
        activation: Activation,
        #[serde(default = "out_tr")]
        output: OutputKind,
        #[serde(default = "sharing_channel")]
        sharing: Sharing,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        dynamics: DynamicsCfg,
    },
    ConvLif {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default)]
        padding: usize,
        #[serde(default = "sharing_channel")]
        sharing: Sharing,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        dynamics: DynamicsCfg,
    },
    DirectLiaf {
        #[serde(default = "act_relu")]
        activation: Activation,
        #[serde(default = "out_tr")]
        output: OutputKind,
        #[serde(default = "sharing_all")]
        sharing: Sharing,
        #[serde(default)]
        dynamics: DynamicsCfg,
    },
    DirectLif {
        #[serde(default = "sharing_all")]
        sharing: Sharing,
        #[serde(default)]
        dynamics: DynamicsCfg,
    },
    TdDense {
        units: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default = "act_identity")]
        activation: Activation,
    },
    TdConv2d {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default = "act_identity")]
        activation: Activation,
    },
    TdConv3d {
        filters: usize,
        kernel: (usize, usize, usize),
        #[serde(default)]
        padding_t: usize,
        #[serde(default)]
        padding_s: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Rnn {
        units: usize,
        #[serde(default = "act_tanh")]
        activation: Activation,
    },
    Gru {
        units: usize,
    },
    Lstm {
        units: usize,
    },
    ConvLstm {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default)]
        padding: usize,
    },
    TdLayerNorm {},
    TdBatchNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    TdActivation {
        activation: Activation,
    },
    TdAvgPool {
        pool: (usize, usize),
    },
    TdDropout {
        p: f64,
    },
    /// Collapses (B, T, ...) to (B, ...) by averaging over the steps.
    SumLayer {},
    Softmax {},
    Embedding {
        vocab: usize,
        dim: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::DenseLiaf { .. } => "dense_liaf",
            LayerSpec::DenseLif { .. } => "dense_lif",
            LayerSpec::ConvLiaf { .. } => "conv_liaf",
            LayerSpec::ConvLif { .. } => "conv_lif",
            LayerSpec::DirectLiaf { .. } => "direct_liaf",
            LayerSpec::DirectLif { .. } => "direct_lif",
            LayerSpec::TdDense { .. } => "td_dense",
            LayerSpec::TdConv2d { .. } => "td_conv2d",
            LayerSpec::TdConv3d { .. } => "td_conv3d",
            LayerSpec::Rnn { .. } => "rnn",
            LayerSpec::Gru { .. } => "gru",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::ConvLstm { .. } => "conv_lstm",
            LayerSpec::TdLayerNorm {} => "td_layer_norm",
            LayerSpec::TdBatchNorm { .. } => "td_batch_norm",
            LayerSpec::TdActivation { .. } => "td_activation",
            LayerSpec::TdAvgPool { .. } => "td_avg_pool",
            LayerSpec::TdDropout { .. } => "td_dropout",
            LayerSpec::SumLayer {} => "sum_layer",
            LayerSpec::Softmax {} => "softmax",
            LayerSpec::Embedding { .. } => "embedding",
        }
    }

    /// True for the fire/reset cells and the recurrent baselines.
    pub fn is_temporal(&self) -> bool {
        matches!(
            self,
            LayerSpec::DenseLiaf { .. }
                | LayerSpec::DenseLif { .. }
                | LayerSpec::ConvLiaf { .. }
                | LayerSpec::ConvLif { .. }
                | LayerSpec::DirectLiaf { .. }
                | LayerSpec::DirectLif { .. }
                | LayerSpec::Rnn { .. }
                | LayerSpec::Gru { .. }
                | LayerSpec::Lstm { .. }
                | LayerSpec::ConvLstm { .. }
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// per-sample input shape without the batch axis: (T), (T, K), or
    /// (T, H, W, C); rank 1 means integer token ids for an embedding
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat, insertion-ordered parameter list. Order is the serialization and
/// optimizer-state order, so it must stay deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, value: Tensor, trainable: bool) {
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub layer: usize,
    pub momentum: f64,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub bn: Vec<BnRunning>,
    /// output shape of every layer at batch size 1
    pub shapes: Vec<Vec<usize>>,
    pub(crate) layer_params: Vec<(usize, usize)>,
}

/// Result of one tape forward pass.
pub struct Forward {
    pub tape: Tape,
    pub output: ValueId,
    /// leaf ids aligned with the parameter store
    pub param_ids: Vec<ValueId>,
    /// per-layer operation counts; all zero unless counting was requested
    pub counters: Vec<OpCounter>,
    /// (bn slot, batch mean, batch var) for each batch-norm layer run in
    /// training mode, in layer order
    pub bn_updates: Vec<(usize, Tensor, Tensor)>,
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    (rng.gen::<f64>() * 2.0 - 1.0) * bound
}

fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape)?;
    for v in t.data_mut() {
        *v = uniform(rng, bound);
    }
    Ok(t)
}

fn dynamics_len(sharing: Sharing, channels: usize) -> usize {
    match sharing {
        Sharing::AllSharing => 1,
        Sharing::ChannelSharing | Sharing::NonSharing => channels,
    }
}

fn sharing_bcast(sharing: Sharing) -> Bcast {
    match sharing {
        Sharing::AllSharing => Bcast::Scalar,
        Sharing::ChannelSharing | Sharing::NonSharing => Bcast::Channel,
    }
}

fn conv_out(h: usize, pad: usize, k: usize, context: &'static str) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "{}: kernel extents must be odd, got {}",
            context, k
        )));
    }
    let span = h + 2 * pad;
    if span < k {
        return Err(Error::InvalidConfig(format!(
            "{}: kernel {} exceeds padded extent {}",
            context, k, span
        )));
    }
    Ok(span - k + 1)
}

fn flat_features(step_shape: &[usize]) -> usize {
    step_shape[1..].iter().product()
}

impl NetworkSpec {
    /// Output shape of every layer for batch size `b`, validating the stack.
    pub fn infer_shapes(&self, b: usize) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.len() > 4 {
            return Err(Error::InvalidConfig(format!(
                "input shape wants rank 1..=4, got {:?}",
                self.input
            )));
        }
        let mut cur: Vec<usize> = std::iter::once(b).chain(self.input.iter().copied()).collect();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut sum_seen = false;
        for (li, layer) in self.layers.iter().enumerate() {
            let ctx = || format!("layer {} ({})", li, layer.kind_name());
            if li > 0 {
                if let LayerSpec::Embedding { .. } = layer {
                    return Err(Error::InvalidConfig(format!(
                        "{}: embedding must be the first layer",
                        ctx()
                    )));
                }
            }
            if layer.is_temporal() && sum_seen {
                return Err(Error::InvalidConfig(format!(
                    "{}: temporal layers must precede sum_layer",
                    ctx()
                )));
            }
            cur = match layer {
                LayerSpec::Embedding { vocab, dim } => {
                    if cur.len() != 2 || *vocab == 0 || *dim == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T) token input and nonzero table",
                            ctx()
                        )));
                    }
                    vec![cur[0], cur[1], *dim]
                }
                LayerSpec::DenseLiaf { units, .. }
                | LayerSpec::DenseLif { units, .. }
                | LayerSpec::Rnn { units, .. }
                | LayerSpec::Gru { units }
                | LayerSpec::Lstm { units } => {
                    if cur.len() < 3 || *units == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T, features...) input and nonzero units",
                            ctx()
                        )));
                    }
                    vec![cur[0], cur[1], *units]
                }
                LayerSpec::ConvLiaf {
                    filters,
                    kernel,
                    padding,
                    sharing,
                    ..
                }
                | LayerSpec::ConvLif {
                    filters,
                    kernel,
                    padding,
                    sharing,
                    ..
                } => {
                    if matches!(sharing, Sharing::NonSharing) {
                        return Err(Error::InvalidConfig(format!(
                            "{}: conv cells cannot use non_sharing dynamics",
                            ctx()
                        )));
                    }
                    if cur.len() != 5 || *filters == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T, H, W, C) input",
                            ctx()
                        )));
                    }
                    let oh = conv_out(cur[2], *padding, kernel.0, "conv cell")?;
                    let ow = conv_out(cur[3], *padding, kernel.1, "conv cell")?;
                    vec![cur[0], cur[1], oh, ow, *filters]
                }
                LayerSpec::ConvLstm {
                    filters,
                    kernel,
                    padding,
                } => {
                    if cur.len() != 5 || *filters == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T, H, W, C) input",
                            ctx()
                        )));
                    }
                    let oh = conv_out(cur[2], *padding, kernel.0, "conv_lstm")?;
                    let ow = conv_out(cur[3], *padding, kernel.1, "conv_lstm")?;
                    if oh != cur[2] || ow != cur[3] {
                        return Err(Error::InvalidConfig(format!(
                            "{}: recurrent conv needs extent-preserving padding",
                            ctx()
                        )));
                    }
                    vec![cur[0], cur[1], oh, ow, *filters]
                }
                LayerSpec::DirectLiaf { .. } | LayerSpec::DirectLif { .. } => {
                    if cur.len() < 3 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T, features...) input",
                            ctx()
                        )));
                    }
                    cur.clone()
                }
                LayerSpec::TdDense { units, .. } => {
                    if cur.len() < 2 || *units == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants features and nonzero units",
                            ctx()
                        )));
                    }
                    if sum_seen || cur.len() == 2 {
                        vec![cur[0], *units]
                    } else {
                        vec![cur[0], cur[1], *units]
                    }
                }
                LayerSpec::TdConv2d {
                    filters,
                    kernel,
                    padding,
                    ..
                } => {
                    if cur.len() != 5 || *filters == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T, H, W, C) input",
                            ctx()
                        )));
                    }
                    let oh = conv_out(cur[2], *padding, kernel.0, "td_conv2d")?;
                    let ow = conv_out(cur[3], *padding, kernel.1, "td_conv2d")?;
                    vec![cur[0], cur[1], oh, ow, *filters]
                }
                LayerSpec::TdConv3d {
                    filters,
                    kernel,
                    padding_t,
                    padding_s,
                    ..
                } => {
                    if cur.len() != 5 || *filters == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants (B, T, H, W, C) input",
                            ctx()
                        )));
                    }
                    let ot = conv_out(cur[1], *padding_t, kernel.0, "td_conv3d")?;
                    let oh = conv_out(cur[2], *padding_s, kernel.1, "td_conv3d")?;
                    let ow = conv_out(cur[3], *padding_s, kernel.2, "td_conv3d")?;
                    vec![cur[0], ot, oh, ow, *filters]
                }
                LayerSpec::TdLayerNorm {} | LayerSpec::TdActivation { .. } => cur.clone(),
                LayerSpec::TdBatchNorm { momentum } => {
                    if !(0.0..1.0).contains(momentum) {
                        return Err(Error::InvalidConfig(format!(
                            "{}: momentum must be in [0, 1)",
                            ctx()
                        )));
                    }
                    cur.clone()
                }
                LayerSpec::TdAvgPool { pool } => {
                    if cur.len() < 4 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants spatial input",
                            ctx()
                        )));
                    }
                    let r = cur.len();
                    if pool.0 == 0
                        || pool.1 == 0
                        || cur[r - 3] % pool.0 != 0
                        || cur[r - 2] % pool.1 != 0
                    {
                        return Err(Error::InvalidConfig(format!(
                            "{}: pool {:?} must divide extents {:?}",
                            ctx(),
                            pool,
                            &cur[r - 3..r - 1]
                        )));
                    }
                    let mut out = cur.clone();
                    out[r - 3] /= pool.0;
                    out[r - 2] /= pool.1;
                    out
                }
                LayerSpec::TdDropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(Error::InvalidConfig(format!(
                            "{}: dropout rate must be in [0, 1)",
                            ctx()
                        )));
                    }
                    cur.clone()
                }
                LayerSpec::SumLayer {} => {
                    if sum_seen {
                        return Err(Error::InvalidConfig(format!(
                            "{}: only one sum_layer is allowed",
                            ctx()
                        )));
                    }
                    if cur.len() < 3 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: wants a time axis to sum",
                            ctx()
                        )));
                    }
                    sum_seen = true;
                    let mut out = vec![cur[0]];
                    out.extend_from_slice(&cur[2..]);
                    out
                }
                LayerSpec::Softmax {} => {
                    if li + 1 != self.layers.len() {
                        return Err(Error::InvalidConfig(format!(
                            "{}: softmax must be the final layer",
                            ctx()
                        )));
                    }
                    if !sum_seen || cur.len() != 2 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: softmax wants (B, classes) after one sum_layer",
                            ctx()
                        )));
                    }
                    cur.clone()
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }
}

impl Network {
    /// Validates the spec, infers shapes, and draws initial parameters from
    /// a seeded generator: fan-in uniform weights, zero biases, constant
    /// dynamics, unit scales.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Network> {
        let shapes = spec.infer_shapes(1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut bn = Vec::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut cur: Vec<usize> = std::iter::once(1).chain(spec.input.iter().copied()).collect();
        for (li, layer) in spec.layers.iter().enumerate() {
            let start = params.len();
            let pname = |s: &str| format!("l{}/{}", li, s);
            match layer {
                LayerSpec::DenseLiaf {
                    units,
                    sharing,
                    bias,
                    dynamics,
                    ..
                }
                | LayerSpec::DenseLif {
                    units,
                    sharing,
                    bias,
                    dynamics,
                    ..
                } => {
                    let k = flat_features(&cur[1..]);
                    params.push(pname("weight"), init_weight(&mut rng, &[k, *units], k)?, true);
                    if *bias {
                        params.push(pname("bias"), Tensor::zeros(&[*units])?, true);
                    }
                    push_dynamics(&mut params, li, *sharing, *units, dynamics)?;
                }
                LayerSpec::ConvLiaf {
                    filters,
                    kernel,
                    sharing,
                    bias,
                    dynamics,
                    ..
                }
                | LayerSpec::ConvLif {
                    filters,
                    kernel,
                    sharing,
                    bias,
                    dynamics,
                    ..
                } => {
                    let c = cur[4];
                    let fan = kernel.0 * kernel.1 * c;
                    params.push(
                        pname("kernel"),
                        init_weight(&mut rng, &[kernel.0, kernel.1, c, *filters], fan)?,
                        true,
                    );
                    if *bias {
                        params.push(pname("bias"), Tensor::zeros(&[*filters])?, true);
                    }
                    push_dynamics(&mut params, li, *sharing, *filters, dynamics)?;
                }
                LayerSpec::DirectLiaf {
                    sharing, dynamics, ..
                }
                | LayerSpec::DirectLif {
                    sharing, dynamics, ..
                } => {
                    let c = *cur.last().unwrap();
                    push_dynamics(&mut params, li, *sharing, c, dynamics)?;
                }
                LayerSpec::TdDense { units, bias, .. } => {
                    // output rank 2 means no time axis is left: flatten all of
                    // the sample, otherwise flatten per step
                    let k = if shapes[li].len() == 2 {
                        cur[1..].iter().product()
                    } else {
                        flat_features(&cur[1..])
                    };
                    params.push(pname("weight"), init_weight(&mut rng, &[k, *units], k)?, true);
                    if *bias {
                        params.push(pname("bias"), Tensor::zeros(&[*units])?, true);
                    }
                }
                LayerSpec::TdConv2d {
                    filters,
                    kernel,
                    bias,
                    ..
                } => {
                    let c = cur[4];
                    let fan = kernel.0 * kernel.1 * c;
                    params.push(
                        pname("kernel"),
                        init_weight(&mut rng, &[kernel.0, kernel.1, c, *filters], fan)?,
                        true,
                    );
                    if *bias {
                        params.push(pname("bias"), Tensor::zeros(&[*filters])?, true);
                    }
                }
                LayerSpec::TdConv3d {
                    filters,
                    kernel,
                    bias,
                    ..
                } => {
                    let c = cur[4];
                    let fan = kernel.0 * kernel.1 * kernel.2 * c;
                    params.push(
                        pname("kernel"),
                        init_weight(
                            &mut rng,
                            &[kernel.0, kernel.1, kernel.2, c, *filters],
                            fan,
                        )?,
                        true,
                    );
                    if *bias {
                        params.push(pname("bias"), Tensor::zeros(&[*filters])?, true);
                    }
                }
                LayerSpec::Rnn { units, .. } => {
                    let k = flat_features(&cur[1..]);
                    push_gate(&mut params, &mut rng, li, "", k, *units)?;
                }
                LayerSpec::Gru { units } => {
                    let k = flat_features(&cur[1..]);
                    for g in ["z", "r", "h"] {
                        push_gate(&mut params, &mut rng, li, g, k, *units)?;
                    }
                }
                LayerSpec::Lstm { units } => {
                    let k = flat_features(&cur[1..]);
                    for g in ["f", "i", "o", "c"] {
                        push_gate(&mut params, &mut rng, li, g, k, *units)?;
                    }
                }
                LayerSpec::ConvLstm {
                    filters, kernel, ..
                } => {
                    let c = cur[4];
                    for g in ["f", "i", "o", "c"] {
                        push_conv_gate(&mut params, &mut rng, li, g, *kernel, c, *filters)?;
                    }
                }
                LayerSpec::TdLayerNorm {} => {
                    let c = *cur.last().unwrap();
                    params.push(pname("gamma"), Tensor::fill(&[c], 1.0)?, true);
                    params.push(pname("beta"), Tensor::zeros(&[c])?, true);
                }
                LayerSpec::TdBatchNorm { momentum } => {
                    let c = *cur.last().unwrap();
                    params.push(pname("gamma"), Tensor::fill(&[c], 1.0)?, true);
                    params.push(pname("beta"), Tensor::zeros(&[c])?, true);
                    bn.push(BnRunning {
                        layer: li,
                        momentum: *momentum,
                        mean: Tensor::zeros(&[c])?,
                        var: Tensor::fill(&[c], 1.0)?,
                    });
                }
                LayerSpec::Embedding { vocab, dim } => {
                    let mut t = Tensor::zeros(&[*vocab, *dim])?;
                    for v in t.data_mut() {
                        *v = uniform(&mut rng, 0.1);
                    }
                    params.push(pname("table"), t, true);
                }
                LayerSpec::TdActivation { .. }
                | LayerSpec::TdAvgPool { .. }
                | LayerSpec::TdDropout { .. }
                | LayerSpec::SumLayer {}
                | LayerSpec::Softmax {} => {}
            }
            layer_params.push((start, params.len()));
            cur = shapes[li].clone();
        }
        Ok(Network {
            spec,
            params,
            bn,
            shapes,
            layer_params,
        })
    }

    /// Dropout layer indices in order; masks passed to `forward` must align
    /// with this list.
    pub fn dropout_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::TdDropout { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    fn bn_slot(&self, layer: usize) -> usize {
        self.bn
            .iter()
            .position(|b| b.layer == layer)
            .expect("batch norm slot")
    }

    /// Folds freshly observed batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, Tensor, Tensor)]) {
        for (slot, mean, var) in updates {
            let s = &mut self.bn[*slot];
            let m = s.momentum;
            for (r, b) in s.mean.data_mut().iter_mut().zip(mean.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in s.var.data_mut().iter_mut().zip(var.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Runs the stack on `x`, recording every op on a fresh tape.
    ///
    /// `masks` supplies one pre-drawn dropout mask per dropout layer (same
    /// order as `dropout_layers`) and is required only when training a net
    /// that has any. When `count` is set the per-layer operation counters in
    /// the result are filled in.
    pub fn forward(
        &self,
        x: &Tensor,
        training: bool,
        masks: &[Tensor],
        count: bool,
    ) -> Result<Forward> {
        let want: Vec<usize> = std::iter::once(x.shape()[0])
            .chain(self.spec.input.iter().copied())
            .collect();
        if x.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: want,
                got: x.shape().to_vec(),
            });
        }
        if !x.all_finite() {
            return Err(Error::Numeric {
                layer: 0,
                detail: "non-finite network input".into(),
            });
        }
        let mut tape = Tape::new();
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut counters = vec![OpCounter::new(); self.spec.layers.len()];
        let mut bn_updates = Vec::new();
        let mut mask_slot = 0usize;
        let mut cur = tape.leaf(x.clone());
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let (ps, _pe) = self.layer_params[li];
            let ids = &param_ids[ps..];
            let mut c_opt: Option<&mut OpCounter> = if count { Some(&mut counters[li]) } else { None };
            cur = match layer {
                LayerSpec::DenseLiaf {
                    activation,
                    output,
                    sharing,
                    bias,
                    dynamics,
                    ..
                } => self.cell_forward(
                    &mut tape,
                    cur,
                    CellWires {
                        integ: Integ::Dense,
                        weight: Some(ids[0]),
                        bias: bias.then(|| ids[1]),
                        dyn_base: if *bias { 2 } else { 1 },
                        ids,
                        output: *output,
                        activation: *activation,
                        bcast: sharing_bcast(*sharing),
                        mu: dynamics.mu(),
                        padding: 0,
                    },
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::DenseLif {
                    sharing,
                    bias,
                    dynamics,
                    ..
                } => self.cell_forward(
                    &mut tape,
                    cur,
                    CellWires {
                        integ: Integ::Dense,
                        weight: Some(ids[0]),
                        bias: bias.then(|| ids[1]),
                        dyn_base: if *bias { 2 } else { 1 },
                        ids,
                        output: OutputKind::Spike,
                        activation: Activation::Identity,
                        bcast: sharing_bcast(*sharing),
                        mu: dynamics.mu(),
                        padding: 0,
                    },
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::ConvLiaf {
                    padding,
                    activation,
                    output,
                    sharing,
                    bias,
                    dynamics,
                    ..
                } => self.cell_forward(
                    &mut tape,
                    cur,
                    CellWires {
                        integ: Integ::Conv,
                        weight: Some(ids[0]),
                        bias: bias.then(|| ids[1]),
                        dyn_base: if *bias { 2 } else { 1 },
                        ids,
                        output: *output,
                        activation: *activation,
                        bcast: sharing_bcast(*sharing),
                        mu: dynamics.mu(),
                        padding: *padding,
                    },
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::ConvLif {
                    padding,
                    sharing,
                    bias,
                    dynamics,
                    ..
                } => self.cell_forward(
                    &mut tape,
                    cur,
                    CellWires {
                        integ: Integ::Conv,
                        weight: Some(ids[0]),
                        bias: bias.then(|| ids[1]),
                        dyn_base: if *bias { 2 } else { 1 },
                        ids,
                        output: OutputKind::Spike,
                        activation: Activation::Identity,
                        bcast: sharing_bcast(*sharing),
                        mu: dynamics.mu(),
                        padding: *padding,
                    },
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::DirectLiaf {
                    activation,
                    output,
                    sharing,
                    dynamics,
                } => self.cell_forward(
                    &mut tape,
                    cur,
                    CellWires {
                        integ: Integ::Free,
                        weight: None,
                        bias: None,
                        dyn_base: 0,
                        ids,
                        output: *output,
                        activation: *activation,
                        bcast: sharing_bcast(*sharing),
                        mu: dynamics.mu(),
                        padding: 0,
                    },
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::DirectLif { sharing, dynamics } => self.cell_forward(
                    &mut tape,
                    cur,
                    CellWires {
                        integ: Integ::Free,
                        weight: None,
                        bias: None,
                        dyn_base: 0,
                        ids,
                        output: OutputKind::Spike,
                        activation: Activation::Identity,
                        bcast: sharing_bcast(*sharing),
                        mu: dynamics.mu(),
                        padding: 0,
                    },
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::Rnn { activation, .. } => self.rnn_forward(
                    &mut tape,
                    cur,
                    ids,
                    *activation,
                    li,
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::Gru { .. } => {
                    self.gru_forward(&mut tape, cur, ids, li, c_opt.as_deref_mut())?
                }
                LayerSpec::Lstm { .. } => self.lstm_forward(
                    &mut tape,
                    cur,
                    ids,
                    li,
                    None,
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::ConvLstm { padding, .. } => self.lstm_forward(
                    &mut tape,
                    cur,
                    ids,
                    li,
                    Some(*padding),
                    c_opt.as_deref_mut(),
                )?,
                LayerSpec::TdDense {
                    bias, activation, ..
                } => {
                    let in_shape = tape.value(cur).shape().to_vec();
                    let timeless = self.shapes[li].len() == 2;
                    let (rows, feat) = if timeless {
                        (in_shape[0], in_shape[1..].iter().product())
                    } else {
                        (in_shape[0] * in_shape[1], in_shape[2..].iter().product())
                    };
                    let flat = tape.reshape(cur, &[rows, feat])?;
                    let mut h = tape.matmul(flat, ids[0], c_opt.as_deref_mut())?;
                    if *bias {
                        h = tape.add_bias(h, ids[1], c_opt.as_deref_mut())?;
                    }
                    if !matches!(activation, Activation::Identity) {
                        h = tape.activation(h, *activation, 0.5, c_opt.as_deref_mut())?;
                    }
                    let units = tape.value(h).shape()[1];
                    if timeless {
                        h
                    } else {
                        tape.reshape(h, &[in_shape[0], in_shape[1], units])?
                    }
                }
                LayerSpec::TdConv2d {
                    padding,
                    bias,
                    activation,
                    ..
                } => {
                    let in_shape = tape.value(cur).shape().to_vec();
                    let (b, t) = (in_shape[0], in_shape[1]);
                    let flat =
                        tape.reshape(cur, &[b * t, in_shape[2], in_shape[3], in_shape[4]])?;
                    let mut h = tape.conv2d(flat, ids[0], *padding, c_opt.as_deref_mut())?;
                    if *bias {
                        h = tape.add_bias(h, ids[1], c_opt.as_deref_mut())?;
                    }
                    if !matches!(activation, Activation::Identity) {
                        h = tape.activation(h, *activation, 0.5, c_opt.as_deref_mut())?;
                    }
                    let hs = tape.value(h).shape().to_vec();
                    tape.reshape(h, &[b, t, hs[1], hs[2], hs[3]])?
                }
                LayerSpec::TdConv3d {
                    padding_t,
                    padding_s,
                    bias,
                    ..
                } => {
                    let mut h =
                        tape.conv3d(cur, ids[0], *padding_t, *padding_s, c_opt.as_deref_mut())?;
                    if *bias {
                        h = tape.add_bias(h, ids[1], c_opt.as_deref_mut())?;
                    }
                    h
                }
                LayerSpec::TdLayerNorm {} => {
                    tape.layer_norm(cur, ids[0], ids[1], 1e-5, c_opt.as_deref_mut())?
                }
                LayerSpec::TdBatchNorm { .. } => {
                    let slot = self.bn_slot(li);
                    if training {
                        let (id, mean, var) = tape.batch_norm_train(
                            cur,
                            ids[0],
                            ids[1],
                            1e-5,
                            c_opt.as_deref_mut(),
                        )?;
                        bn_updates.push((slot, mean, var));
                        id
                    } else {
                        tape.batch_norm_eval(
                            cur,
                            ids[0],
                            ids[1],
                            &self.bn[slot].mean,
                            &self.bn[slot].var,
                            1e-5,
                            c_opt.as_deref_mut(),
                        )?
                    }
                }
                LayerSpec::TdActivation { activation } => {
                    tape.activation(cur, *activation, 0.5, c_opt.as_deref_mut())?
                }
                LayerSpec::TdAvgPool { pool } => {
                    tape.avg_pool2d(cur, pool.0, pool.1, c_opt.as_deref_mut())?
                }
                LayerSpec::TdDropout { .. } => {
                    if training {
                        let mask = masks.get(mask_slot).ok_or_else(|| {
                            Error::InvalidConfig(format!(
                                "missing dropout mask for layer {}",
                                li
                            ))
                        })?;
                        mask_slot += 1;
                        tape.dropout(cur, mask.clone(), c_opt.as_deref_mut())?
                    } else {
                        cur
                    }
                }
                LayerSpec::SumLayer {} => tape.time_mean(cur, c_opt.as_deref_mut())?,
                LayerSpec::Softmax {} => tape.softmax(cur, c_opt.as_deref_mut())?,
                LayerSpec::Embedding { .. } => {
                    let xv = tape.value(cur);
                    let (b, t) = (xv.shape()[0], xv.shape()[1]);
                    let ids_raw: Vec<usize> =
                        xv.data().iter().map(|v| v.round() as usize).collect();
                    tape.embedding(ids[0], &ids_raw, b, t, c_opt.as_deref_mut())?
                }
            };
        }
        Ok(Forward {
            tape,
            output: cur,
            param_ids,
            counters,
            bn_updates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_forward(
        &self,
        tape: &mut Tape,
        x: ValueId,
        w: CellWires,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let spike = matches!(w.output, OutputKind::Spike);
        let mut v: Option<ValueId> = None;
        let mut ys = Vec::with_capacity(t);
        let v_th = w.ids[w.dyn_base];
        let v_reset = w.ids[w.dyn_base + 1];
        let alpha = w.ids[w.dyn_base + 2];
        let beta = w.ids[w.dyn_base + 3];
        for ti in 0..t {
            let mut xt = tape.select_time(x, ti)?;
            if matches!(w.integ, Integ::Dense) && shape.len() > 3 {
                let feat: usize = shape[2..].iter().product();
                xt = tape.reshape(xt, &[b, feat])?;
            }
            let mut tmp = OpCounter::new();
            let i_t = match w.integ {
                Integ::Dense => {
                    let mut h = tape.matmul(xt, w.weight.unwrap(), Some(&mut tmp))?;
                    if let Some(bid) = w.bias {
                        h = tape.add_bias(h, bid, Some(&mut tmp))?;
                    }
                    h
                }
                Integ::Conv => {
                    let mut h = tape.conv2d(xt, w.weight.unwrap(), w.padding, Some(&mut tmp))?;
                    if let Some(bid) = w.bias {
                        h = tape.add_bias(h, bid, Some(&mut tmp))?;
                    }
                    h
                }
                Integ::Free => xt,
            };
            if let Some(c) = counter.as_deref_mut() {
                if spike {
                    c.adds += tmp.adds;
                    c.other += tmp.muls + tmp.other;
                } else {
                    c.muls += tmp.muls;
                    c.adds += tmp.adds;
                    c.other += tmp.other;
                }
            }
            let v_prev = match v {
                Some(id) => id,
                None => tape.leaf(Tensor::zeros(tape.value(i_t).shape())?),
            };
            let u = tape.add(i_t, v_prev, counter.as_deref_mut())?;
            let y = match w.output {
                OutputKind::Spike => {
                    tape.spike_out(u, v_th, w.bcast, w.mu, counter.as_deref_mut())?
                }
                OutputKind::AnalogTr => {
                    if matches!(w.activation, Activation::Threshold) {
                        tape.spike_out(u, v_th, w.bcast, w.mu, counter.as_deref_mut())?
                    } else {
                        let d = tape.sub_bcast(u, v_th, w.bcast, counter.as_deref_mut())?;
                        tape.activation(d, w.activation, w.mu, counter.as_deref_mut())?
                    }
                }
                OutputKind::AnalogNtr => {
                    tape.activation(u, w.activation, w.mu, counter.as_deref_mut())?
                }
            };
            v = Some(tape.liaf_tau(
                u,
                v_th,
                v_reset,
                alpha,
                beta,
                w.bcast,
                w.mu,
                counter.as_deref_mut(),
            )?);
            ys.push(y);
        }
        tape.stack_time(&ys)
    }

    fn state_leaf(&self, tape: &mut Tape, li: usize, b: usize) -> Result<ValueId> {
        let out = &self.shapes[li];
        let mut shape = vec![b];
        shape.extend_from_slice(&out[2..]);
        Ok(tape.leaf(Tensor::zeros(&shape)?))
    }

    fn rnn_forward(
        &self,
        tape: &mut Tape,
        x: ValueId,
        ids: &[ValueId],
        act: Activation,
        li: usize,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let mut h = self.state_leaf(tape, li, b)?;
        let mut ys = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = self.step_input(tape, x, ti, &shape)?;
            let s = gate_tape(tape, xt, h, ids[0], ids[1], ids[2], None, counter.as_deref_mut())?;
            h = tape.activation(s, act, 0.5, counter.as_deref_mut())?;
            ys.push(h);
        }
        tape.stack_time(&ys)
    }

    fn gru_forward(
        &self,
        tape: &mut Tape,
        x: ValueId,
        ids: &[ValueId],
        li: usize,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let mut h = self.state_leaf(tape, li, b)?;
        let mut ys = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = self.step_input(tape, x, ti, &shape)?;
            let z = gate_tape(tape, xt, h, ids[0], ids[1], ids[2], None, counter.as_deref_mut())?;
            let z = tape.activation(z, Activation::Sigmoid, 0.5, counter.as_deref_mut())?;
            let r = gate_tape(tape, xt, h, ids[3], ids[4], ids[5], None, counter.as_deref_mut())?;
            let r = tape.activation(r, Activation::Sigmoid, 0.5, counter.as_deref_mut())?;
            let rh = tape.hadamard(r, h, counter.as_deref_mut())?;
            let g = gate_tape(tape, xt, rh, ids[6], ids[7], ids[8], None, counter.as_deref_mut())?;
            let g = tape.activation(g, Activation::Tanh, 0.5, counter.as_deref_mut())?;
            let zc = tape.complement(z, counter.as_deref_mut())?;
            let keep = tape.hadamard(zc, h, counter.as_deref_mut())?;
            let take = tape.hadamard(z, g, counter.as_deref_mut())?;
            h = tape.add(keep, take, counter.as_deref_mut())?;
            ys.push(h);
        }
        tape.stack_time(&ys)
    }

    fn lstm_forward(
        &self,
        tape: &mut Tape,
        x: ValueId,
        ids: &[ValueId],
        li: usize,
        conv_pad: Option<usize>,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t) = (shape[0], shape[1]);
        let mut h = self.state_leaf(tape, li, b)?;
        let mut c = self.state_leaf(tape, li, b)?;
        let mut ys = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = if conv_pad.is_some() {
                tape.select_time(x, ti)?
            } else {
                self.step_input(tape, x, ti, &shape)?
            };
            let mut gates = Vec::with_capacity(4);
            for gi in 0..4 {
                let s = gate_tape(
                    tape,
                    xt,
                    h,
                    ids[gi * 3],
                    ids[gi * 3 + 1],
                    ids[gi * 3 + 2],
                    conv_pad,
                    counter.as_deref_mut(),
                )?;
                let act = if gi == 3 {
                    Activation::Tanh
                } else {
                    Activation::Sigmoid
                };
                gates.push(tape.activation(s, act, 0.5, counter.as_deref_mut())?);
            }
            let fc = tape.hadamard(gates[0], c, counter.as_deref_mut())?;
            let ig = tape.hadamard(gates[1], gates[3], counter.as_deref_mut())?;
            c = tape.add(fc, ig, counter.as_deref_mut())?;
            let tc = tape.activation(c, Activation::Tanh, 0.5, counter.as_deref_mut())?;
            h = tape.hadamard(gates[2], tc, counter.as_deref_mut())?;
            ys.push(h);
        }
        tape.stack_time(&ys)
    }

    /// Step input for dense recurrent layers: time slice, flattened.
    fn step_input(
        &self,
        tape: &mut Tape,
        x: ValueId,
        ti: usize,
        shape: &[usize],
    ) -> Result<ValueId> {
        let xt = tape.select_time(x, ti)?;
        if shape.len() > 3 {
            let feat: usize = shape[2..].iter().product();
            tape.reshape(xt, &[shape[0], feat])
        } else {
            Ok(xt)
        }
    }
}

enum Integ {
    Dense,
    Conv,
    Free,
}

struct CellWires<'a> {
    integ: Integ,
    weight: Option<ValueId>,
    bias: Option<ValueId>,
    /// offset of v_th within `ids`
    dyn_base: usize,
    ids: &'a [ValueId],
    output: OutputKind,
    activation: Activation,
    bcast: Bcast,
    mu: f64,
    padding: usize,
}

fn push_dynamics(
    params: &mut ParamStore,
    li: usize,
    sharing: Sharing,
    channels: usize,
    cfg: &DynamicsCfg,
) -> Result<()> {
    let n = dynamics_len(sharing, channels);
    for (name, init) in [
        ("v_th", cfg.v_th),
        ("v_reset", cfg.v_reset),
        ("alpha", cfg.alpha),
        ("beta", cfg.beta),
    ] {
        params.push(
            format!("l{}/{}", li, name),
            Tensor::fill(&[n], init)?,
            cfg.trainable,
        );
    }
    Ok(())
}

fn push_gate(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    li: usize,
    gate: &str,
    k: usize,
    l: usize,
) -> Result<()> {
    let prefix = if gate.is_empty() {
        format!("l{}", li)
    } else {
        format!("l{}/{}", li, gate)
    };
    params.push(format!("{}/w", prefix), init_weight(rng, &[k, l], k)?, true);
    params.push(format!("{}/u", prefix), init_weight(rng, &[l, l], l)?, true);
    params.push(format!("{}/b", prefix), Tensor::zeros(&[l])?, true);
    Ok(())
}

fn push_conv_gate(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    li: usize,
    gate: &str,
    kernel: (usize, usize),
    c: usize,
    filters: usize,
) -> Result<()> {
    let fan_w = kernel.0 * kernel.1 * c;
    let fan_u = kernel.0 * kernel.1 * filters;
    params.push(
        format!("l{}/{}/w", li, gate),
        init_weight(rng, &[kernel.0, kernel.1, c, filters], fan_w)?,
        true,
    );
    params.push(
        format!("l{}/{}/u", li, gate),
        init_weight(rng, &[kernel.0, kernel.1, filters, filters], fan_u)?,
        true,
    );
    params.push(format!("l{}/{}/b", li, gate), Tensor::zeros(&[filters])?, true);
    Ok(())
}

fn gate_tape(
    tape: &mut Tape,
    xt: ValueId,
    h: ValueId,
    w: ValueId,
    u: ValueId,
    b: ValueId,
    conv_pad: Option<usize>,
    mut counter: Option<&mut OpCounter>,
) -> Result<ValueId> {
    let (wx, uh) = match conv_pad {
        Some(pad) => (
            tape.conv2d(xt, w, pad, counter.as_deref_mut())?,
            tape.conv2d(h, u, pad, counter.as_deref_mut())?,
        ),
        None => (
            tape.matmul(xt, w, counter.as_deref_mut())?,
            tape.matmul(h, u, counter.as_deref_mut())?,
        ),
    };
    let s = tape.add(wx, uh, counter.as_deref_mut())?;
    tape.add_bias(s, b, counter)
}
