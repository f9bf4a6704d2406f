//! Config file loading with dotted-path overrides. A file is either a bare
//! `ExperimentConfig` or a train manifest wrapping one, so any emitted
//! manifest replays directly.

use std::path::Path;

use nestdiff_core::config::ExperimentConfig;
use nestdiff_core::report::RunManifest;
use nestdiff_core::{Error, Result};

/// Parse `KEY=VALUE` pairs and graft them into the JSON tree before the
/// strict deserialization pass, so typos in keys still fail hard.
fn apply_overrides(mut value: serde_json::Value, overrides: &[String]) -> Result<serde_json::Value> {
    for entry in overrides {
        let (path, raw) = entry
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{entry}' is not KEY=VALUE")))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let parts: Vec<&str> = path.split('.').collect();
        let (last, ancestors) = parts.split_last().expect("split_once gives non-empty path");
        let mut node = &mut value;
        for part in ancestors {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::config(format!("cannot set '{path}': not an object")))?;
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("cannot set '{path}': not an object")))?;
        obj.insert(last.to_string(), parsed);
    }
    Ok(value)
}

/// Load an experiment config, accepting either a plain config file or a run
/// manifest (whose `config` field is the resolved experiment).
pub fn load_experiment(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config {} is not valid JSON: {e}", path.display())))?;

    // manifests carry the resolved experiment under "config"
    let base = if value.get("config_hash").is_some() && value.get("config").is_some() {
        let manifest: RunManifest = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("manifest parse: {e}")))?;
        resolved_to_experiment(&manifest)
    } else {
        value
    };
    let with_overrides = apply_overrides(base, overrides)?;
    serde_json::from_value(with_overrides)
        .map_err(|e| Error::config(format!("config parse: {e}")))
}

fn resolved_to_experiment(manifest: &RunManifest) -> serde_json::Value {
    let r = &manifest.config;
    serde_json::json!({
        "preset": preset_of(r),
        "seed": r.seed,
        "m_samples": r.m_samples,
        "iota": r.iota,
        "k_override": r.model.backbone.tap_levels,
        "t_override": r.model.schedule.t_count,
        "dataset": r.dataset,
        "train": r.train,
        "perturb": r.perturb.iter().map(spec_string).collect::<Vec<_>>(),
        "output_dir": r.output_dir,
        "threads": r.threads,
    })
}

fn preset_of(r: &nestdiff_core::config::ResolvedExperiment) -> &'static str {
    if r.model.backbone.embed_dim >= 768 {
        "paper"
    } else {
        "toy"
    }
}

fn spec_string(p: &nestdiff_core::perturb::PerturbSpec) -> String {
    use nestdiff_core::perturb::PerturbSpec::*;
    match p {
        Gaussian { strength } => format!("gaussian:{strength}"),
        Lowres { factor } => format!("lowres:{factor}"),
        Contrast { level } => format!("contrast:{level}"),
        Fgsm { epsilon } => format!("fgsm:{epsilon}"),
        Pgd {
            epsilon,
            steps,
            step_size,
        } => format!("pgd:{epsilon}:{steps}:{step_size}"),
    }
}
