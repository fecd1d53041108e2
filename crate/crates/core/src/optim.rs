//! Optimizers, the plateau learning-rate scheduler, and loss helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tape::{Tape, ValueId};
use crate::tensor::{OpCounter, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerCfg {
    Sgd {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl OptimizerCfg {
    pub fn build(&self, params: &ParamStore) -> Optimizer {
        match *self {
            OptimizerCfg::Sgd { lr, weight_decay } => Optimizer::Sgd { lr, weight_decay },
            OptimizerCfg::Adam { lr, weight_decay } => Optimizer::Adam(AdamState::new(
                lr,
                weight_decay,
                params.iter().map(|p| p.value.shape().to_vec()).collect(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// first and second moment estimates, aligned with the parameter store
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    fn new(lr: f64, weight_decay: f64, shapes: Vec<Vec<usize>>) -> Self {
        let zeros = |s: &Vec<usize>| Tensor::zeros(s).expect("parameter shape");
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64, weight_decay: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } => *lr,
            Optimizer::Adam(a) => a.lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr, .. } => *lr = new_lr,
            Optimizer::Adam(a) => a.lr = new_lr,
        }
    }

    /// Applies one update from gradients aligned with the parameter store.
    /// Entries that are `None` or belong to frozen parameters are skipped.
    /// Weight decay is decoupled: it scales the parameter directly instead
    /// of entering the moment estimates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                for (i, g) in grads.iter().enumerate() {
                    let p = params.get_mut(i);
                    let Some(g) = g else { continue };
                    if !p.trainable {
                        continue;
                    }
                    for (w, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * (gv + *weight_decay * *w);
                    }
                }
            }
            Optimizer::Adam(a) => {
                a.step += 1;
                let bc1 = 1.0 - a.beta1.powi(a.step as i32);
                let bc2 = 1.0 - a.beta2.powi(a.step as i32);
                for (i, g) in grads.iter().enumerate() {
                    let p = params.get_mut(i);
                    let Some(g) = g else { continue };
                    if !p.trainable {
                        continue;
                    }
                    let m = a.m[i].data_mut();
                    let v = a.v[i].data_mut();
                    for (j, (w, gv)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * gv;
                        v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * gv * gv;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= a.lr * (mhat / (vhat.sqrt() + a.eps) + a.weight_decay * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauCfg {
    pub factor: f64,
    pub patience: usize,
    #[serde(default)]
    pub min_lr: f64,
}

/// Cuts the learning rate when the watched metric has not improved on its
/// pre-window best for `patience` consecutive epochs. After a cut the next
/// `patience` observations are a cooldown and cannot trigger another.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    cooldown: usize,
    history: Vec<f64>,
}

impl ReduceOnPlateau {
    pub fn new(cfg: PlateauCfg) -> Self {
        Self {
            factor: cfg.factor,
            patience: cfg.patience,
            min_lr: cfg.min_lr,
            cooldown: 0,
            history: Vec::new(),
        }
    }

    /// Records one epoch metric; true means the caller should reduce the rate.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.history.push(metric);
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return false;
        }
        let n = self.history.len();
        if n <= self.patience {
            return false;
        }
        let window_min = self.history[n - self.patience..]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let best_before = self.history[..n - self.patience]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if window_min >= best_before {
            self.cooldown = self.patience;
            return true;
        }
        false
    }

    pub fn reduced(&self, lr: f64) -> f64 {
        (lr * self.factor).max(self.min_lr)
    }
}

/// Mean squared error between a prediction node and a constant target.
pub fn mse_loss(
    tape: &mut Tape,
    pred: ValueId,
    target: &Tensor,
    mut counter: Option<&mut OpCounter>,
) -> Result<ValueId> {
    let n = tape.value(pred).len();
    if target.len() != n {
        return Err(Error::ShapeMismatch {
            context: "mse target",
            expected: tape.value(pred).shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let shape = tape.value(pred).shape().to_vec();
    let t = tape.leaf(target.reshape(&shape)?);
    let d = tape.sub(pred, t, counter.as_deref_mut())?;
    let sq = tape.hadamard(d, d, counter.as_deref_mut())?;
    let flat = tape.reshape(sq, &[1, n])?;
    let s = tape.time_sum(flat, counter.as_deref_mut())?;
    tape.scale(s, 1.0 / n as f64, counter)
}
