use std::path::Path;

use liaf_core::cost::{self, CostReport};
use liaf_core::{Network, NetworkSpec};

use crate::config::{self, NetworkRef};
use crate::error::CliError;

fn resolve_spec(preset: Option<&str>, config: Option<&Path>) -> Result<NetworkSpec, CliError> {
    match (preset, config) {
        (Some(name), None) => config::preset(name).ok_or_else(|| {
            CliError::Input(format!(
                "unknown preset '{name}'; known presets: {}",
                config::preset_names().join(", ")
            ))
        }),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let net: NetworkRef = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            net.resolve()
        }
        (Some(_), Some(_)) => Err(CliError::Input(
            "give either a preset name or --config, not both".into(),
        )),
        (None, None) => Err(CliError::Input(
            "count needs a preset name or --config".into(),
        )),
    }
}

pub fn render_table(report: &CostReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5}  {:<14} {:>14} {:>16} {:>16}\n",
        "layer", "kind", "weights", "muls", "adds"
    ));
    for l in &report.layers {
        out.push_str(&format!(
            "{:>5}  {:<14} {:>14} {:>16} {:>16}\n",
            l.index, l.kind, l.weights, l.muls, l.adds
        ));
    }
    out.push_str(&format!(
        "{:>5}  {:<14} {:>14} {:>16} {:>16}\n",
        "", "total", report.total.weights, report.total.muls, report.total.adds
    ));
    out.push_str(&format!(
        "{:>5}  {:<14} {:>14} {:>16} {:>16}\n",
        "", "conv family", report.conv.weights, report.conv.muls, report.conv.adds
    ));
    out
}

pub fn run(
    preset: Option<&str>,
    config: Option<&Path>,
    verify: bool,
    seed: u64,
) -> Result<(), CliError> {
    let spec = resolve_spec(preset, config)?;
    let report = cost::analytical(&spec)?;
    print!("{}", render_table(&report));
    if verify {
        let net = Network::build(spec, seed)?;
        let measured = cost::instrumented(&net)?;
        for (a, b) in report.layers.iter().zip(&measured.layers) {
            if a != b {
                return Err(CliError::Verify(format!(
                    "layer {} ({}): analytical weights={} muls={} adds={} \
                     but instrumented weights={} muls={} adds={}",
                    a.index, a.kind, a.weights, a.muls, a.adds, b.weights, b.muls, b.adds
                )));
            }
        }
        println!("verified: instrumented counts match analytical");
    }
    Ok(())
}
