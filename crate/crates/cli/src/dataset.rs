use std::path::{Path, PathBuf};

use liaf_core::events::{read_clip, Clip};

use crate::error::CliError;

/// Loads every `*.clip` file in `dir`, sorted by file name.
pub fn load_clips(dir: &Path) -> Result<Vec<Clip>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "clip"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!(
            "no .clip files in {}",
            dir.display()
        )));
    }
    let mut clips = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes =
            std::fs::read(&p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        let clip = read_clip(&mut bytes.as_slice())
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        clips.push(clip);
    }
    Ok(clips)
}
