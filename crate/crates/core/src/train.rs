//! Minibatch training and evaluation over clip datasets.
//!
//! Parallelism never changes the reduction order: a batch is split into at
//! most `jobs` row shards, each shard backpropagates a per-shard gradient
//! sum on its own tape, and the sums are folded in shard order before the
//! single divide by the batch size. Runs with the same configuration are
//! bit-identical; runs with different `jobs` agree to rounding.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::Clip;
use crate::network::{LayerSpec, Network};
use crate::optim::{Optimizer, ReduceOnPlateau};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch: usize,
    /// row shards per batch; 1 disables threading
    pub jobs: usize,
    /// global gradient norm ceiling, off by default
    pub clip_norm: Option<f64>,
    /// measure wall time per epoch; off keeps the metrics file reproducible
    pub wall_clock: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            epochs: 10,
            batch: 32,
            jobs: 1,
            clip_norm: None,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// learning rate in effect during the epoch
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_s: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks the chosen clips into one batch tensor shaped `[n] + input`,
/// reshaping each clip when the element counts agree.
pub fn assemble(data: &[Clip], idx: &[usize], input: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let sample_len: usize = input.iter().product();
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(input);
    let mut out = Vec::with_capacity(idx.len() * sample_len);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let clip = &data[i];
        if clip.frames.len() != sample_len {
            return Err(Error::ShapeMismatch {
                context: "clip vs network input",
                expected: input.to_vec(),
                got: clip.frames.shape().to_vec(),
            });
        }
        out.extend_from_slice(clip.frames.data());
        labels.push(clip.label as usize);
    }
    Ok((Tensor::new(&shape, out)?, labels))
}

fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let row = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(&shape, t.data()[lo * row..hi * row].to_vec())
}

fn shard_ranges(rows: usize, jobs: usize) -> Vec<(usize, usize)> {
    let jobs = jobs.max(1).min(rows.max(1));
    let base = rows / jobs;
    let rem = rows % jobs;
    let mut out = Vec::with_capacity(jobs);
    let mut lo = 0;
    for s in 0..jobs {
        let take = base + usize::from(s < rem);
        if take == 0 {
            continue;
        }
        out.push((lo, lo + take));
        lo += take;
    }
    out
}

struct ShardOut {
    /// gradient sums over the shard rows, aligned with the parameter store
    grads: Vec<Option<Tensor>>,
    loss_sum: f64,
    correct: usize,
    bn: Vec<(usize, Tensor, Tensor)>,
}

fn run_shard(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    masks: &[Tensor],
    training: bool,
    want_grads: bool,
) -> Result<ShardOut> {
    let mut fwd = net.forward(x, training, masks, false)?;
    let last = net.spec.layers.len().saturating_sub(1);
    let correct = {
        let probs = fwd.tape.value(fwd.output);
        if !probs.all_finite() {
            return Err(Error::Numeric {
                layer: last,
                detail: "non-finite network output".into(),
            });
        }
        let classes = *probs.shape().last().unwrap();
        labels
            .iter()
            .enumerate()
            .filter(|(r, &lab)| argmax(&probs.data()[r * classes..(r + 1) * classes]) == lab)
            .count()
    };
    let ce = fwd.tape.cross_entropy(fwd.output, labels, None)?;
    let root = fwd.tape.scale(ce, labels.len() as f64, None)?;
    let loss_sum = fwd.tape.value(root).data()[0];
    let grads = if want_grads {
        let mut g = fwd.tape.backward(root)?;
        fwd.param_ids.iter().map(|&id| g.take(id)).collect()
    } else {
        Vec::new()
    };
    Ok(ShardOut {
        grads,
        loss_sum,
        correct,
        bn: std::mem::take(&mut fwd.bn_updates),
    })
}

fn run_batch(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    masks: &[Tensor],
    training: bool,
    want_grads: bool,
    jobs: usize,
) -> Result<ShardOut> {
    let b = x.shape()[0];
    let ranges = shard_ranges(b, jobs);
    let mut inputs = Vec::with_capacity(ranges.len());
    for &(lo, hi) in &ranges {
        let xs = slice_rows(x, lo, hi)?;
        let ms: Result<Vec<Tensor>> = masks.iter().map(|m| slice_rows(m, lo, hi)).collect();
        inputs.push((xs, labels[lo..hi].to_vec(), ms?));
    }
    let outs: Vec<Result<ShardOut>> = if inputs.len() == 1 {
        let (xs, lab, ms) = &inputs[0];
        vec![run_shard(net, xs, lab, ms, training, want_grads)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .iter()
                .map(|(xs, lab, ms)| {
                    s.spawn(move || run_shard(net, xs, lab, ms, training, want_grads))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("shard thread panicked"))
                .collect()
        })
    };
    let mut total = ShardOut {
        grads: vec![None; net.params.len()],
        loss_sum: 0.0,
        correct: 0,
        bn: Vec::new(),
    };
    for out in outs {
        let o = out?;
        total.loss_sum += o.loss_sum;
        total.correct += o.correct;
        total.bn.extend(o.bn);
        for (slot, g) in total.grads.iter_mut().zip(o.grads) {
            match (slot.as_mut(), g) {
                (_, None) => {}
                (None, Some(g)) => *slot = Some(g),
                (Some(acc), Some(g)) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
        }
    }
    if !total.loss_sum.is_finite() {
        return Err(Error::Numeric {
            layer: net.spec.layers.len().saturating_sub(1),
            detail: format!("non-finite loss {}", total.loss_sum),
        });
    }
    Ok(total)
}

fn draw_masks(net: &Network, b: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let mut masks = Vec::new();
    for li in net.dropout_layers() {
        let LayerSpec::TdDropout { p } = net.spec.layers[li] else {
            unreachable!("dropout_layers returned a non-dropout index")
        };
        let mut shape = net.shapes[li].clone();
        shape[0] = b;
        let mut m = Tensor::zeros(&shape)?;
        let keep = 1.0 - p;
        for v in m.data_mut() {
            *v = if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep };
        }
        masks.push(m);
    }
    Ok(masks)
}

fn train_batch(
    net: &mut Network,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
    masks: &[Tensor],
    cfg: &TrainCfg,
) -> Result<(f64, usize)> {
    let b = x.shape()[0];
    let mut total = run_batch(net, x, labels, masks, true, true, cfg.jobs)?;
    let inv = 1.0 / b as f64;
    for g in total.grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    if let Some(ceiling) = cfg.clip_norm {
        let mut sq = 0.0;
        for g in total.grads.iter().flatten() {
            for v in g.data() {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        if norm > ceiling {
            let scale = ceiling / norm;
            for g in total.grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    opt.step(&mut net.params, &total.grads)?;
    net.apply_bn_updates(&total.bn);
    Ok((total.loss_sum, total.correct))
}

/// Mean loss and accuracy over `data` in evaluation mode.
pub fn evaluate(net: &Network, data: &[Clip], batch: usize, jobs: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = assemble(data, chunk, &net.spec.input)?;
        let out = run_batch(net, &x, &labels, &[], false, false, jobs)?;
        loss_sum += out.loss_sum;
        correct += out.correct;
    }
    Ok((
        loss_sum / data.len() as f64,
        correct as f64 / data.len() as f64,
    ))
}

/// Runs `cfg.epochs` of minibatch training, calling `on_epoch` after each
/// epoch with the fresh metrics. The plateau scheduler, when given, watches
/// the validation loss. `rng` drives the shuffle and the dropout masks.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &mut Network,
    opt: &mut Optimizer,
    plateau: &mut Option<ReduceOnPlateau>,
    train_set: &[Clip],
    val_set: &[Clip],
    cfg: &TrainCfg,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network, &Optimizer, &ChaCha8Rng) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = opt.lr();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch) {
            let (x, labels) = assemble(train_set, chunk, &net.spec.input)?;
            let masks = draw_masks(net, chunk.len(), rng)?;
            let (ls, c) = train_batch(net, opt, &x, &labels, &masks, cfg)?;
            loss_sum += ls;
            correct += c;
        }
        let (val_loss, val_acc) = evaluate(net, val_set, cfg.batch, cfg.jobs)?;
        if let Some(p) = plateau.as_mut() {
            if p.observe(val_loss) {
                let reduced = p.reduced(opt.lr());
                opt.set_lr(reduced);
            }
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
            wall_s: if cfg.wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&metrics, net, opt, rng)?;
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerCfg;
    use crate::presets::delayed_recall_net;
    use crate::tasks::{delayed_recall_dataset, split_dataset};
    use rand::SeedableRng;

    fn tiny_run(seed: u64, jobs: usize, epochs: usize) -> (Network, Vec<EpochMetrics>) {
        let (train_set, val_set) = split_dataset(delayed_recall_dataset(40, 5).unwrap());
        let mut net = Network::build(delayed_recall_net(false), seed).unwrap();
        let mut opt = OptimizerCfg::Adam {
            lr: 0.01,
            weight_decay: 0.0,
        }
        .build(&net.params);
        let cfg = TrainCfg {
            epochs,
            batch: 8,
            jobs,
            ..TrainCfg::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let history = train(
            &mut net,
            &mut opt,
            &mut None,
            &train_set,
            &val_set,
            &cfg,
            &mut rng,
            |_, _, _, _| Ok(()),
        )
        .unwrap();
        (net, history)
    }

    #[test]
    fn loss_drops_on_recall_task() {
        let (_, history) = tiny_run(1, 1, 6);
        assert!(history.last().unwrap().train_loss < history[0].train_loss);
    }

    #[test]
    fn same_seed_reproduces_metrics_exactly() {
        let (_, a) = tiny_run(2, 1, 3);
        let (_, b) = tiny_run(2, 1, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn sharded_batch_matches_single_to_rounding() {
        let (_, a) = tiny_run(3, 1, 1);
        let (_, b) = tiny_run(3, 2, 1);
        let (ma, mb) = (a.last().unwrap(), b.last().unwrap());
        assert!((ma.train_loss - mb.train_loss).abs() < 1e-9);
        assert_eq!(ma.train_acc, mb.train_acc);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.5, 0.2, 0.5]), 0);
    }

    #[test]
    fn poisoned_parameters_surface_as_numeric_error() {
        let (train_set, val_set) = split_dataset(delayed_recall_dataset(10, 5).unwrap());
        let mut net = Network::build(delayed_recall_net(false), 1).unwrap();
        let readout = net.params.index_of("l2/weight").unwrap();
        net.params.get_mut(readout).value.data_mut()[0] = f64::NAN;
        let mut opt = OptimizerCfg::Sgd {
            lr: 0.1,
            weight_decay: 0.0,
        }
        .build(&net.params);
        let cfg = TrainCfg {
            epochs: 1,
            batch: 4,
            ..TrainCfg::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train(
            &mut net,
            &mut opt,
            &mut None,
            &train_set,
            &val_set,
            &cfg,
            &mut rng,
            |_, _, _, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
