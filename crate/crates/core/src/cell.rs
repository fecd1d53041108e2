//! Leaky integrate neuron cells with analog (LIAF) or spike (LIF) readout.
//!
//! One step, given input x and previous membrane potential V:
//!
//! ```text
//! I  = integrate(x)                 dense, conv, or pass-through
//! U  = I + V
//! F  = U >= v_th                    fire condition, ties fire
//! R  = F ? v_reset : U              reset by selection
//! V' = alpha * R + beta             leak
//! y  = F                            Spike
//!    | act(U - v_th)                AnalogTr
//!    | act(U)                       AnalogNtr
//! ```
//!
//! `AnalogTr` with the Threshold activation reuses the fire mask F directly,
//! so that configuration reproduces the Spike readout bit for bit.

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{self, Bcast, OpCounter, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// one scalar per dynamics parameter for the whole layer
    AllSharing,
    /// one value per output channel
    ChannelSharing,
    /// one value per neuron; dense layers only
    NonSharing,
}

impl Sharing {
    pub fn bcast(self) -> Bcast {
        match self {
            Sharing::AllSharing => Bcast::Scalar,
            Sharing::ChannelSharing => Bcast::Channel,
            Sharing::NonSharing => Bcast::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Integration {
    /// I = x . weight (+ bias); weight is (K, L)
    Dense { weight: Tensor, bias: Option<Tensor> },
    /// I = conv2d(x, kernel) (+ bias); kernel is (I, J, K, L)
    Conv {
        kernel: Tensor,
        bias: Option<Tensor>,
        padding: usize,
    },
    /// I = x
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    Spike,
    /// act(U - v_th), threshold-referenced
    AnalogTr(Activation),
    /// act(U), not threshold-referenced
    AnalogNtr(Activation),
}

#[derive(Debug, Clone)]
pub struct CellParams {
    pub v_th: Tensor,
    pub v_reset: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub sharing: Sharing,
    pub integration: Integration,
    pub output: OutputMode,
}

impl CellParams {
    pub fn new(
        v_th: Tensor,
        v_reset: Tensor,
        alpha: Tensor,
        beta: Tensor,
        sharing: Sharing,
        integration: Integration,
        output: OutputMode,
    ) -> Result<Self> {
        if matches!(integration, Integration::Conv { .. }) && sharing == Sharing::NonSharing {
            return Err(Error::InvalidConfig(
                "NonSharing dynamics are not supported for conv integration".into(),
            ));
        }
        let params = Self {
            v_th,
            v_reset,
            alpha,
            beta,
            sharing,
            integration,
            output,
        };
        for (name, p) in [
            ("v_th", &params.v_th),
            ("v_reset", &params.v_reset),
            ("alpha", &params.alpha),
            ("beta", &params.beta),
        ] {
            if p.rank() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "dynamics parameter {} must be rank 1, got {:?}",
                    name,
                    p.shape()
                )));
            }
            if sharing == Sharing::AllSharing && p.len() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "AllSharing wants a single {} value, got {}",
                    name,
                    p.len()
                )));
            }
            if sharing == Sharing::ChannelSharing {
                if let Some(l) = params.out_channels() {
                    if p.len() != l {
                        return Err(Error::InvalidConfig(format!(
                            "ChannelSharing wants {} values for {}, got {}",
                            l,
                            name,
                            p.len()
                        )));
                    }
                }
            }
        }
        Ok(params)
    }

    fn out_channels(&self) -> Option<usize> {
        match &self.integration {
            Integration::Dense { weight, .. } => Some(weight.shape()[1]),
            Integration::Conv { kernel, .. } => Some(kernel.shape()[3]),
            Integration::Free => None,
        }
    }

    /// Shape of the membrane potential for a given input shape.
    pub fn state_shape(&self, x_shape: &[usize]) -> Result<Vec<usize>> {
        match &self.integration {
            Integration::Dense { weight, .. } => {
                if x_shape.len() != 2 || x_shape[1] != weight.shape()[0] {
                    return Err(Error::ShapeMismatch {
                        context: "cell dense input",
                        expected: vec![weight.shape()[0]],
                        got: x_shape.to_vec(),
                    });
                }
                Ok(vec![x_shape[0], weight.shape()[1]])
            }
            Integration::Conv { kernel, padding, .. } => {
                if x_shape.len() != 4 || x_shape[3] != kernel.shape()[2] {
                    return Err(Error::ShapeMismatch {
                        context: "cell conv input",
                        expected: vec![kernel.shape()[2]],
                        got: x_shape.to_vec(),
                    });
                }
                let oh = x_shape[1] + 2 * padding - kernel.shape()[0] + 1;
                let ow = x_shape[2] + 2 * padding - kernel.shape()[1] + 1;
                Ok(vec![x_shape[0], oh, ow, kernel.shape()[3]])
            }
            Integration::Free => Ok(x_shape.to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellState {
    pub v: Tensor,
}

/// Zero-initialized membrane potential for inputs shaped `x_shape`.
pub fn init_state(params: &CellParams, x_shape: &[usize]) -> Result<CellState> {
    Ok(CellState {
        v: Tensor::zeros(&params.state_shape(x_shape)?)?,
    })
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub y: Tensor,
    pub state: CellState,
    pub fire: Tensor,
}

/// Runs the integration stage. With `selection` set (spike-input layers),
/// the multiplies of the product accumulation are ledgered as selections.
pub(crate) fn integrate(
    integration: &Integration,
    x: &Tensor,
    selection: bool,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    if selection && counter.is_some() {
        let mut tmp = OpCounter::new();
        let out = integrate_inner(integration, x, Some(&mut tmp))?;
        let c = counter.as_deref_mut().unwrap();
        c.adds += tmp.adds;
        c.other += tmp.muls + tmp.other;
        return Ok(out);
    }
    integrate_inner(integration, x, counter)
}

fn integrate_inner(
    integration: &Integration,
    x: &Tensor,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    match integration {
        Integration::Dense { weight, bias } => {
            let mut i = tensor::matmul(x, weight, counter.as_deref_mut())?;
            if let Some(b) = bias {
                i = tensor::add_bias(&i, b, counter)?;
            }
            Ok(i)
        }
        Integration::Conv {
            kernel,
            bias,
            padding,
        } => {
            let mut i = tensor::conv2d(x, kernel, *padding, counter.as_deref_mut())?;
            if let Some(b) = bias {
                i = tensor::add_bias(&i, b, counter)?;
            }
            Ok(i)
        }
        Integration::Free => Ok(x.clone()),
    }
}

/// Fire mask F = (U >= v_th), with v_th broadcast per sharing mode.
pub(crate) fn fire_mask(
    u: &Tensor,
    v_th: &Tensor,
    bcast: Bcast,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    let diff = tensor::sub_bcast_uncounted(u, v_th, bcast, None)?;
    let f = tensor::map(&diff, |d| if d >= 0.0 { 1.0 } else { 0.0 });
    if let Some(c) = counter.as_deref_mut() {
        c.other += u.len() as u64;
    }
    Ok(f)
}

/// One cell step. Pure: neither `params` nor `state` is mutated.
pub fn step(
    params: &CellParams,
    state: &CellState,
    x: &Tensor,
    mut counter: Option<&mut OpCounter>,
) -> Result<StepOutput> {
    if !x.all_finite() {
        return Err(Error::Numeric {
            layer: 0,
            detail: "non-finite input to cell step".into(),
        });
    }
    let bcast = params.sharing.bcast();
    let selection = params.output == OutputMode::Spike;
    let i = integrate(
        &params.integration,
        x,
        selection,
        counter.as_deref_mut(),
    )?;
    let u = tensor::add(&i, &state.v, counter.as_deref_mut())?;
    let f = fire_mask(&u, &params.v_th, bcast, counter.as_deref_mut())?;

    // reset by selection
    let mut r = u.clone();
    {
        let channels = *u.shape().last().unwrap();
        let per_sample = u.len() / u.shape()[0];
        let vr = params.v_reset.data();
        for (idx, (rv, fv)) in r.data_mut().iter_mut().zip(f.data()).enumerate() {
            if *fv == 1.0 {
                *rv = match bcast {
                    Bcast::Scalar => vr[0],
                    Bcast::Channel => vr[idx % channels],
                    Bcast::Full => vr[idx % per_sample],
                };
            }
        }
        if let Some(c) = counter.as_deref_mut() {
            c.other += u.len() as u64;
        }
    }

    let v_next = tensor::affine_bcast(&r, &params.alpha, &params.beta, bcast, counter.as_deref_mut())?;

    let y = match params.output {
        OutputMode::Spike => f.clone(),
        OutputMode::AnalogTr(Activation::Threshold) => f.clone(),
        OutputMode::AnalogTr(act) => {
            let staged = tensor::sub_bcast_uncounted(&u, &params.v_th, bcast, counter.as_deref_mut())?;
            if let Some(c) = counter.as_deref_mut() {
                c.other += staged.len() as u64;
            }
            tensor::map(&staged, |v| act.eval(v))
        }
        OutputMode::AnalogNtr(act) => {
            if let Some(c) = counter.as_deref_mut() {
                c.other += u.len() as u64;
            }
            tensor::map(&u, |v| act.eval(v))
        }
    };

    Ok(StepOutput {
        y,
        state: CellState { v: v_next },
        fire: f,
    })
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// (B, T, ...) outputs
    pub y: Tensor,
    /// (B, T, ...) membrane potential after each step
    pub v_trace: Tensor,
    /// (B, T, ...) fire masks
    pub fire_trace: Tensor,
    pub final_state: CellState,
}

/// Unrolls `step` over the time axis of x (B, T, ...), starting from a zero state.
pub fn run_sequence(
    params: &CellParams,
    x: &Tensor,
    mut counter: Option<&mut OpCounter>,
) -> Result<SequenceOutput> {
    if x.rank() < 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "run_sequence wants (B, T, ...) input".into(),
        });
    }
    let t = x.shape()[1];
    let x0 = tensor::select_time(x, 0)?;
    let mut state = init_state(params, x0.shape())?;
    let mut ys = Vec::with_capacity(t);
    let mut vs = Vec::with_capacity(t);
    let mut fs = Vec::with_capacity(t);
    for ti in 0..t {
        let xt = tensor::select_time(x, ti)?;
        let out = step(params, &state, &xt, counter.as_deref_mut())?;
        state = out.state;
        ys.push(out.y);
        vs.push(state.v.clone());
        fs.push(out.fire);
    }
    Ok(SequenceOutput {
        y: tensor::stack_time(&ys)?,
        v_trace: tensor::stack_time(&vs)?,
        fire_trace: tensor::stack_time(&fs)?,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_cell(v_th: f64, v_reset: f64, alpha: f64, beta: f64, output: OutputMode) -> CellParams {
        CellParams::new(
            Tensor::scalar(v_th),
            Tensor::scalar(v_reset),
            Tensor::scalar(alpha),
            Tensor::scalar(beta),
            Sharing::AllSharing,
            Integration::Free,
            output,
        )
        .unwrap()
    }

    #[test]
    fn step_fire_and_reset() {
        let p = free_cell(1.0, 0.0, 0.5, 0.1, OutputMode::Spike);
        let state = CellState {
            v: Tensor::zeros(&[1, 1]).unwrap(),
        };
        let x = Tensor::new(&[1, 1], vec![1.1]).unwrap();
        let out = step(&p, &state, &x, None).unwrap();
        assert_eq!(out.fire.data(), &[1.0]);
        assert_eq!(out.y.data(), &[1.0]);
        assert_eq!(out.state.v.data(), &[0.1]);
    }

    #[test]
    fn step_below_threshold_keeps_potential() {
        let p = free_cell(1.0, 0.0, 0.5, 0.1, OutputMode::Spike);
        let state = CellState {
            v: Tensor::zeros(&[1, 1]).unwrap(),
        };
        let x = Tensor::new(&[1, 1], vec![0.3]).unwrap();
        let out = step(&p, &state, &x, None).unwrap();
        assert_eq!(out.fire.data(), &[0.0]);
        assert_eq!(out.y.data(), &[0.0]);
        assert!((out.state.v.data()[0] - (0.5 * 0.3 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn tie_at_threshold_fires() {
        let p = free_cell(1.0, 0.0, 1.0, 0.0, OutputMode::Spike);
        let state = CellState {
            v: Tensor::zeros(&[1, 1]).unwrap(),
        };
        let x = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let out = step(&p, &state, &x, None).unwrap();
        assert_eq!(out.fire.data(), &[1.0]);
    }

    #[test]
    fn fired_neuron_resets_exactly() {
        let p = free_cell(0.5, -0.2, 0.9, 0.05, OutputMode::Spike);
        let state = CellState {
            v: Tensor::zeros(&[1, 1]).unwrap(),
        };
        let x = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        let out = step(&p, &state, &x, None).unwrap();
        assert_eq!(out.state.v.data()[0], 0.9f64 * -0.2 + 0.05);
    }

    #[test]
    fn free_integration_accumulates() {
        // alpha=1, beta=0, high threshold: V accumulates sum of inputs
        let p = free_cell(1e9, 0.0, 1.0, 0.0, OutputMode::AnalogNtr(Activation::Identity));
        let x = Tensor::new(&[1, 3, 1], vec![0.5, 0.25, 0.125]).unwrap();
        let seq = run_sequence(&p, &x, None).unwrap();
        assert_eq!(seq.y.data(), &[0.5, 0.75, 0.875]);
        assert_eq!(seq.final_state.v.data(), &[0.875]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = free_cell(1.0, 0.0, 0.5, 0.0, OutputMode::Spike);
        let state = CellState {
            v: Tensor::zeros(&[1, 1]).unwrap(),
        };
        let x = Tensor::new(&[1, 1], vec![f64::NAN]).unwrap();
        assert!(step(&p, &state, &x, None).is_err());
    }

    #[test]
    fn conv_nonsharing_rejected() {
        let r = CellParams::new(
            Tensor::scalar(1.0),
            Tensor::scalar(0.0),
            Tensor::scalar(0.5),
            Tensor::scalar(0.0),
            Sharing::NonSharing,
            Integration::Conv {
                kernel: Tensor::zeros(&[3, 3, 1, 2]).unwrap(),
                bias: None,
                padding: 1,
            },
            OutputMode::Spike,
        );
        assert!(r.is_err());
    }

    #[test]
    fn dense_counting_follows_ledger() {
        // K=3, L=2, one step: LIAF muls L(K+1)=8, adds L(K+2)=10
        let p = CellParams::new(
            Tensor::new(&[2], vec![0.5, 0.5]).unwrap(),
            Tensor::new(&[2], vec![0.0, 0.0]).unwrap(),
            Tensor::new(&[2], vec![0.3, 0.3]).unwrap(),
            Tensor::new(&[2], vec![0.0, 0.0]).unwrap(),
            Sharing::ChannelSharing,
            Integration::Dense {
                weight: Tensor::fill(&[3, 2], 0.1).unwrap(),
                bias: Some(Tensor::zeros(&[2]).unwrap()),
            },
            OutputMode::AnalogTr(Activation::Relu),
        )
        .unwrap();
        let state = CellState {
            v: Tensor::zeros(&[1, 2]).unwrap(),
        };
        let x = Tensor::fill(&[1, 3], 1.0).unwrap();
        let mut c = OpCounter::new();
        step(&p, &state, &x, Some(&mut c)).unwrap();
        assert_eq!(c.muls, 8);
        assert_eq!(c.adds, 10);

        // same layer with spike output: integration multiplies become selections
        let p_lif = CellParams::new(
            Tensor::new(&[2], vec![0.5, 0.5]).unwrap(),
            Tensor::new(&[2], vec![0.0, 0.0]).unwrap(),
            Tensor::new(&[2], vec![0.3, 0.3]).unwrap(),
            Tensor::new(&[2], vec![0.0, 0.0]).unwrap(),
            Sharing::ChannelSharing,
            p.integration.clone(),
            OutputMode::Spike,
        )
        .unwrap();
        let mut c = OpCounter::new();
        step(&p_lif, &state, &x, Some(&mut c)).unwrap();
        assert_eq!(c.muls, 2);
        assert_eq!(c.adds, 10);
    }
}
