use std::path::Path;

use liaf_core::events::{write_clip, write_text_events};
use liaf_core::tasks::{self, Direction};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Input(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes a moving-bar dataset as raw text event files in a
/// `<split>/<label>/` tree, ready for `preprocess` with from_subdir labels.
fn moving_bar(out: &Path, seed: u64, count: usize) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let direction = Direction::from_index(i % 4);
        let offset = rng.gen_range(0..tasks::BAR_SIDE);
        let events = tasks::moving_bar_events(direction, offset);
        let split = if i % 5 == 4 { "val" } else { "train" };
        let mut buf = Vec::new();
        write_text_events(&mut buf, &events)?;
        let path = out
            .join(split)
            .join(format!("{}", direction as u32))
            .join(format!("bar_{i:04}.txt"));
        write_file(&path, &buf)?;
    }
    println!("wrote {count} event files under {}", out.display());
    Ok(())
}

/// Writes delayed-recall clips directly, split 4:1 into train/ and val/.
fn delayed_recall(out: &Path, seed: u64, count: usize) -> Result<(), CliError> {
    let clips = tasks::delayed_recall_dataset(count, seed)?;
    let (train, val) = tasks::split_dataset(clips);
    for (split, set) in [("train", train), ("val", val)] {
        for (i, clip) in set.iter().enumerate() {
            let mut buf = Vec::new();
            write_clip(&mut buf, clip)?;
            write_file(&out.join(split).join(format!("clip_{i:04}.clip")), &buf)?;
        }
    }
    println!("wrote {count} clips under {}", out.display());
    Ok(())
}

/// Writes delayed-recall samples as `label tok tok ...` lines, split 4:1
/// into train.txt and val.txt.
fn delayed_recall_text(out: &Path, seed: u64, count: usize) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines: Vec<String> = (0..count)
        .map(|_| tasks::delayed_recall_sample(&mut rng).line())
        .collect();
    let (train, val) = lines.split_at(count - count / 5);
    for (name, set) in [("train.txt", train), ("val.txt", val)] {
        let mut body = set.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        write_file(&out.join(name), body.as_bytes())?;
    }
    println!("wrote {count} token lines under {}", out.display());
    Ok(())
}

pub fn run(task: &str, out: &Path, seed: u64, count: usize) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Input("count must be positive".into()));
    }
    match task {
        "moving-bar" => moving_bar(out, seed, count),
        "delayed-recall" => delayed_recall(out, seed, count),
        "delayed-recall-text" => delayed_recall_text(out, seed, count),
        other => Err(CliError::Input(format!(
            "unknown task '{other}'; expected moving-bar, delayed-recall or delayed-recall-text"
        ))),
    }
}
