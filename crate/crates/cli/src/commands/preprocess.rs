use std::io::Write;
use std::path::{Path, PathBuf};

use liaf_core::events::{
    self, bin_events, block_downsample, centroid_crop, tile_clips, AccumMode, Clip, Event,
};
use liaf_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeCfg {
    #[default]
    Count,
    Binary,
}

impl ModeCfg {
    fn accum(self) -> AccumMode {
        match self {
            ModeCfg::Count => AccumMode::Count,
            ModeCfg::Binary => AccumMode::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FormatCfg {
    #[default]
    Auto,
    Text,
    Binary,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    Fixed(u32),
    FromSubdir(bool),
}

/// Event-to-clip conversion settings; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessCfg {
    pub window: u32,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub mode: ModeCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample: Option<usize>,
    pub label: LabelPolicy,
    #[serde(default)]
    pub format: FormatCfg,
}

impl PreprocessCfg {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let cfg: PreprocessCfg = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if cfg.window == 0 {
            return Err(CliError::Input("window must be positive".into()));
        }
        if let LabelPolicy::FromSubdir(false) = cfg.label {
            return Err(CliError::Input(
                "label.from_subdir only accepts true; use {\"fixed\": k} otherwise".into(),
            ));
        }
        Ok(cfg)
    }
}

struct SourceFile {
    path: PathBuf,
    stem: String,
    label: u32,
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in
            std::fs::read_dir(&d).map_err(|e| CliError::Input(format!("{}: {e}", d.display())))?
        {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn stem_of(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    let mut s = rel.with_extension("").to_string_lossy().into_owned();
    s = s.replace(['/', '\\', '.'], "_");
    s
}

fn discover(input: &Path, cfg: &PreprocessCfg) -> Result<Vec<SourceFile>, CliError> {
    if input.is_file() {
        let label = match cfg.label {
            LabelPolicy::Fixed(k) => k,
            LabelPolicy::FromSubdir(_) => {
                return Err(CliError::Input(
                    "from_subdir labels need a directory input".into(),
                ))
            }
        };
        return Ok(vec![SourceFile {
            path: input.to_path_buf(),
            stem: stem_of(input.parent().unwrap_or(Path::new("")), input),
            label,
        }]);
    }
    if !input.is_dir() {
        return Err(CliError::Input(format!(
            "input {} does not exist",
            input.display()
        )));
    }
    match cfg.label {
        LabelPolicy::Fixed(k) => Ok(sorted_files(input)?
            .into_iter()
            .map(|p| SourceFile {
                stem: stem_of(input, &p),
                path: p,
                label: k,
            })
            .collect()),
        LabelPolicy::FromSubdir(_) => {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            let mut out = Vec::new();
            for d in dirs {
                let name = d.file_name().unwrap_or_default().to_string_lossy();
                let label: u32 = name.parse().map_err(|_| {
                    CliError::Input(format!(
                        "class directory '{name}' is not an integer label"
                    ))
                })?;
                for p in sorted_files(&d)? {
                    out.push(SourceFile {
                        stem: stem_of(input, &p),
                        path: p,
                        label,
                    });
                }
            }
            Ok(out)
        }
    }
}

fn read_events(path: &Path, format: FormatCfg) -> Result<Vec<Event>, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let binary = match format {
        FormatCfg::Binary => true,
        FormatCfg::Text => false,
        FormatCfg::Auto => bytes.starts_with(events::EVENT_MAGIC),
    };
    if binary {
        events::read_binary_events(&mut bytes.as_slice())
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    } else {
        events::read_text_events(bytes.as_slice()).map_err(|e| match e {
            liaf_core::Error::Ingest { record, detail } => {
                CliError::Input(format!("{}: line {record}: {detail}", path.display()))
            }
            other => CliError::Input(format!("{}: {other}", path.display())),
        })
    }
}

fn process_one(src: &SourceFile, cfg: &PreprocessCfg) -> Result<(Vec<Tensor>, usize), CliError> {
    let evs = read_events(&src.path, cfg.format)?;
    if evs.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let mut frames = bin_events(&evs, cfg.window, cfg.height, cfg.width, cfg.mode.accum())
        .map_err(|e| CliError::Input(format!("{}: {e}", src.path.display())))?;
    if let Some((ch, cw)) = cfg.crop {
        frames = centroid_crop(&frames, ch, cw)
            .map_err(|e| CliError::Input(format!("{}: {e}", src.path.display())))?;
    }
    if let Some(k) = cfg.downsample {
        frames = block_downsample(&frames, k)
            .map_err(|e| CliError::Input(format!("{}: {e}", src.path.display())))?;
    }
    let clips = match cfg.clip_len {
        Some(t) => tile_clips(&frames, t)
            .map_err(|e| CliError::Input(format!("{}: {e}", src.path.display())))?,
        None => vec![frames],
    };
    Ok((clips, evs.len()))
}

pub fn run(input: &Path, config: &Path, out: &Path, jobs: usize) -> Result<(), CliError> {
    let cfg = PreprocessCfg::load(config)?;
    let sources = discover(input, &cfg)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;

    let jobs = jobs.max(1).min(sources.len().max(1));
    let mut results: Vec<Option<Result<(Vec<Tensor>, usize), CliError>>> =
        (0..sources.len()).map(|_| None).collect();
    if jobs <= 1 {
        for (slot, src) in results.iter_mut().zip(&sources) {
            *slot = Some(process_one(src, &cfg));
        }
    } else {
        let chunk = sources.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            for (slots, srcs) in results.chunks_mut(chunk).zip(sources.chunks(chunk)) {
                let cfg = &cfg;
                scope.spawn(move || {
                    for (slot, src) in slots.iter_mut().zip(srcs) {
                        *slot = Some(process_one(src, cfg));
                    }
                });
            }
        });
    }

    let manifest_path = out.join("manifest.csv");
    let mut manifest = String::from("file,label,T,H,W,C,events\n");
    let mut written = 0usize;
    for (fi, (src, result)) in sources.iter().zip(results).enumerate() {
        let (clips, n_events) = result.expect("worker filled every slot")?;
        for (ci, frames) in clips.into_iter().enumerate() {
            let name = format!("{fi:04}_{}_{ci:03}.clip", src.stem);
            let shape = frames.shape().to_vec();
            let clip = Clip {
                frames,
                label: src.label,
            };
            let mut buf = Vec::new();
            events::write_clip(&mut buf, &clip)
                .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
            std::fs::write(out.join(&name), buf)
                .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
            manifest.push_str(&format!(
                "{name},{},{},{},{},{},{n_events}\n",
                src.label, shape[0], shape[1], shape[2], shape[3]
            ));
            written += 1;
        }
    }
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", manifest_path.display())))?;
    f.write_all(manifest.as_bytes())?;
    println!(
        "wrote {written} clips from {} files to {}",
        sources.len(),
        out.display()
    );
    Ok(())
}
