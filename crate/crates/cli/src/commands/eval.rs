use std::io::Write;
use std::path::Path;

use liaf_core::train::{assemble, evaluate};

use crate::checkpoint::Checkpoint;
use crate::commands::train::{argmax, check_labels};
use crate::dataset::load_clips;
use crate::error::CliError;

const EVAL_BATCH: usize = 32;

pub fn run(
    checkpoint: &Path,
    data_dir: &Path,
    out: Option<&Path>,
    jobs: usize,
    normalize: bool,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let (net, _opt, _epoch, _rng) = ck.restore()?;
    let mut data = load_clips(data_dir)?;
    if normalize {
        for clip in data.iter_mut() {
            liaf_core::events::normalize_clip(clip);
        }
    }

    let idx: Vec<usize> = (0..data.len()).collect();
    let mut confusion: Vec<Vec<u64>> = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = assemble(&data, chunk, &net.spec.input)?;
        let fwd = net.forward(&x, false, &[], false)?;
        let probs = fwd.tape.value(fwd.output);
        let classes = *probs.shape().last().unwrap();
        if confusion.is_empty() {
            confusion = vec![vec![0u64; classes]; classes];
        }
        let labels_u32: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        check_labels(classes, &labels_u32, data_dir)?;
        for (row, &truth) in probs.data().chunks(classes).zip(&labels) {
            confusion[truth][argmax(row)] += 1;
        }
    }
    let (loss, acc) = evaluate(&net, &data, EVAL_BATCH, jobs)?;
    println!("samples {}", data.len());
    println!("loss {loss:.6}");
    println!("accuracy {acc:.6}");

    if let Some(path) = out {
        let classes = confusion.len();
        let mut csv = String::from("class");
        for c in 0..classes {
            csv.push_str(&format!(",pred_{c}"));
        }
        csv.push('\n');
        for (c, row) in confusion.iter().enumerate() {
            csv.push_str(&c.to_string());
            for n in row {
                csv.push_str(&format!(",{n}"));
            }
            csv.push('\n');
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        f.write_all(csv.as_bytes())?;
        println!("confusion matrix: {}", path.display());
    }
    Ok(())
}
