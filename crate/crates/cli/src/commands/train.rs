use std::io::Write;
use std::path::{Path, PathBuf};

use liaf_core::train::{self, EpochMetrics, TrainCfg};
use liaf_core::{Network, ReduceOnPlateau};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::load_clips;
use crate::error::CliError;

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
        m.epoch, m.lr, m.train_loss, m.train_acc, m.val_loss, m.val_acc, m.wall_s
    )
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_s\n";

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;

    let mut train_set = load_clips(&cfg.data.train)?;
    let mut val_set = load_clips(&cfg.data.val)?;
    if cfg.data.normalize {
        for clip in train_set.iter_mut().chain(val_set.iter_mut()) {
            liaf_core::events::normalize_clip(clip);
        }
    }
    let spec = cfg.network_spec()?;
    let mut net = Network::build(spec, cfg.seed)?;
    let mut opt = cfg.optimizer.build(&net.params);
    let mut plateau = cfg.schedule.clone().map(ReduceOnPlateau::new);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Input(format!("{}: {e}", cfg.out.display())))?;
    let final_path = cfg.out.join("final.ckpt");
    let best_path = cfg.out.join("best.ckpt");
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", metrics_path.display())))?;
    metrics.write_all(METRICS_HEADER.as_bytes())?;
    metrics.flush()?;

    let initial = Checkpoint::snapshot(&net, &opt, 0, &rng)?;
    initial.save(&final_path)?;
    initial.save(&best_path)?;

    let tcfg = TrainCfg {
        epochs: cfg.epochs,
        batch: cfg.batch,
        jobs: cfg.jobs,
        clip_norm: cfg.clip_norm,
        wall_clock: cfg.wall_clock,
    };
    let mut best_acc = f64::NEG_INFINITY;
    let mut save_failure: Option<CliError> = None;
    let result = train::train(
        &mut net,
        &mut opt,
        &mut plateau,
        &train_set,
        &val_set,
        &tcfg,
        &mut rng,
        |m, net, opt, rng| {
            metrics.write_all(metrics_row(m).as_bytes())?;
            metrics.flush()?;
            let ck = match Checkpoint::snapshot(net, opt, m.epoch as u64, rng) {
                Ok(ck) => ck,
                Err(e) => {
                    save_failure = Some(e);
                    return Err(liaf_core::Error::Format("checkpoint snapshot failed".into()));
                }
            };
            for (path, wanted) in [(&final_path, true), (&best_path, m.val_acc > best_acc)] {
                if !wanted {
                    continue;
                }
                if let Err(e) = ck.save(path) {
                    save_failure = Some(e);
                    return Err(liaf_core::Error::Format("checkpoint save failed".into()));
                }
            }
            if m.val_acc > best_acc {
                best_acc = m.val_acc;
            }
            Ok(())
        },
    );
    match result {
        Ok(history) => {
            let last = history.last();
            println!(
                "trained {} epochs; final val_acc {:.4}; best val_acc {:.4}",
                history.len(),
                last.map_or(f64::NAN, |m| m.val_acc),
                if best_acc.is_finite() { best_acc } else { f64::NAN },
            );
            println!("metrics: {}", metrics_path.display());
            println!("checkpoints: {} {}", final_path.display(), best_path.display());
            Ok(())
        }
        Err(e) => {
            if let Some(save_err) = save_failure {
                return Err(save_err);
            }
            Err(CliError::from(e))
        }
    }
}

/// Shared by `eval` and the tests: argmax with ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn check_labels(classes: usize, labels: &[u32], what: &Path) -> Result<(), CliError> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(CliError::Input(format!(
            "{}: label {bad} out of range for {classes} classes",
            what.display()
        )));
    }
    Ok(())
}
