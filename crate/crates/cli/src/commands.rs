//! Command implementations: each resolves the experiment config, dispatches
//! on the configured dtype, and reports file paths on stdout.

use std::path::{Path, PathBuf};

use nestdiff_core::backbone;
use nestdiff_core::config::ResolvedExperiment;
use nestdiff_core::data::{gen_synthetic, load_dir, split, ChannelStats, Dataset};
use nestdiff_core::numerics::{Dtype, RngStream, Scalar};
use nestdiff_core::perturb::{self, PerturbSpec};
use nestdiff_core::pipeline::{run_inference, Pipeline};
use nestdiff_core::report::{
    self, compute_metrics, ReportMetrics, RunManifest, MANIFEST_FILE, PREDICTIONS_FILE,
};
use nestdiff_core::trainer::{train_pipeline, PipelineCheckpoint};
use nestdiff_core::{Error, Result};

use crate::config_io::load_experiment;

const STREAM_DATA: u64 = 100;
const STREAM_INFER: u64 = 200;

/// Train/val/test splits plus the normalization stats applied to them.
type SplitSet<T> = (Dataset<T>, Dataset<T>, Dataset<T>, Option<ChannelStats>);

fn build_datasets<T: Scalar>(
    resolved: &ResolvedExperiment,
    stats_override: Option<&ChannelStats>,
) -> Result<SplitSet<T>> {
    let rng = RngStream::new(resolved.seed, STREAM_DATA);
    let image_size = resolved.model.backbone.image_size;
    match resolved.dataset.source.as_str() {
        "synthetic" => {
            let ds = gen_synthetic::<T>(
                resolved.dataset.n,
                image_size,
                resolved.dataset.class_sep,
                &rng,
            )?;
            let (train, val, test) = split(&ds, resolved.dataset.fractions, &rng)?;
            Ok((train, val, test, None))
        }
        "dir" => {
            let dir = resolved
                .dataset
                .dir
                .as_ref()
                .ok_or_else(|| Error::config("dataset.dir missing"))?;
            let ds = load_dir::<T>(Path::new(dir), image_size, resolved.model.backbone.channels)?;
            let (mut train, mut val, mut test) = split(&ds, resolved.dataset.fractions, &rng)?;
            let stats = match stats_override {
                Some(s) => s.clone(),
                None => ChannelStats::compute(&train)?,
            };
            stats.normalize(&mut train);
            stats.normalize(&mut val);
            stats.normalize(&mut test);
            Ok((train, val, test, Some(stats)))
        }
        other => Err(Error::config(format!("unknown dataset source '{other}'"))),
    }
}

fn run_train<T: Scalar>(resolved: &ResolvedExperiment) -> Result<PathBuf> {
    let (train, val, _test, stats) = build_datasets::<T>(resolved, None)?;
    let (mut ckpt, _summary) = train_pipeline(&resolved.model, &resolved.train, &train, &val)?;
    ckpt.norm_stats = stats;
    let out = Path::new(&resolved.output_dir);
    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.ndck");
    ckpt.save(&ckpt_path)?;
    RunManifest::new(resolved, Some(&ckpt_path), "train").save(&out.join(MANIFEST_FILE))?;
    Ok(ckpt_path)
}

pub fn train(config_path: &Path, overrides: &[String]) -> Result<()> {
    let resolved = load_experiment(config_path, overrides)?.resolve()?;
    let ckpt_path = match resolved.model.dtype {
        Dtype::F32 => run_train::<f32>(&resolved)?,
        Dtype::F64 => run_train::<f64>(&resolved)?,
    };
    println!("{}", ckpt_path.display());
    Ok(())
}

/// Labeled perturbation set for one inference run: `None` is the clean pass.
fn report_specs(
    resolved: &ResolvedExperiment,
    only: Option<&str>,
) -> Result<Vec<(String, Option<PerturbSpec>)>> {
    if let Some(raw) = only {
        let spec: PerturbSpec = raw.parse()?;
        return Ok(vec![(spec.label(), Some(spec))]);
    }
    let mut out = vec![("clean".to_string(), None)];
    for spec in &resolved.perturb {
        out.push((spec.label(), Some(spec.clone())));
    }
    Ok(out)
}

fn run_infer<T: Scalar>(
    resolved: &ResolvedExperiment,
    ckpt_path: &Path,
    specs: &[(String, Option<PerturbSpec>)],
    out_root: &Path,
) -> Result<Vec<(PathBuf, ReportMetrics)>> {
    let ckpt = PipelineCheckpoint::<T>::load_expecting(ckpt_path, &resolved.model)?;
    let stats = ckpt.norm_stats.clone();
    let (_train, _val, test, _) = build_datasets::<T>(resolved, stats.as_ref())?;
    let pipeline = Pipeline::new(ckpt)?;
    let classes = resolved.model.backbone.num_classes;
    let base = RngStream::new(resolved.seed, STREAM_INFER);

    let mut out = Vec::new();
    for (label, spec) in specs {
        let records = run_inference(
            &pipeline,
            &test,
            resolved.m_samples,
            resolved.iota,
            &base,
            spec.as_ref(),
            resolved.threads,
        )?;
        let dir = out_root.join(format!("report_{label}"));
        let manifest = RunManifest::new(resolved, Some(ckpt_path), label);
        report::write_bundle(&dir, &manifest, &records, classes)?;
        out.push((dir, compute_metrics(label, &records)?));
    }
    Ok(out)
}

fn config_beside_checkpoint(checkpoint: &Path) -> Result<PathBuf> {
    let candidate = checkpoint
        .parent()
        .map(|p| p.join(MANIFEST_FILE))
        .filter(|p| p.exists());
    candidate.ok_or_else(|| {
        Error::config(format!(
            "no --config given and no {MANIFEST_FILE} beside {}",
            checkpoint.display()
        ))
    })
}

pub fn infer(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    perturb: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => config_beside_checkpoint(checkpoint)?,
    };
    let resolved = load_experiment(&config_path, overrides)?.resolve()?;
    let specs = report_specs(&resolved, perturb)?;
    let out_root = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| Path::new(&resolved.output_dir).join("reports"));
    let results = match resolved.model.dtype {
        Dtype::F32 => run_infer::<f32>(&resolved, checkpoint, &specs, &out_root)?,
        Dtype::F64 => run_infer::<f64>(&resolved, checkpoint, &specs, &out_root)?,
    };
    for (dir, m) in results {
        println!(
            "{}  accuracy {:.4}  ece10 {:.4}",
            dir.display(),
            m.accuracy,
            m.ece10
        );
    }
    Ok(())
}

pub fn eval(reports: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for dir in reports {
        let predictions = dir.join(PREDICTIONS_FILE);
        let records = report::read_predictions(&predictions)?;
        if records.is_empty() {
            return Err(Error::Data(format!("{} has no records", predictions.display())));
        }
        let label = RunManifest::load(&dir.join(MANIFEST_FILE))
            .map(|m| m.perturb_label)
            .unwrap_or_else(|_| dir.file_name().unwrap().to_string_lossy().into_owned());
        let classes = records[0].proba.len();
        let metrics = compute_metrics(&label, &records)?;
        report::write_metrics_csv(&dir.join(report::METRICS_FILE), std::slice::from_ref(&metrics))?;
        report::write_uncertainty_csv(&dir.join(report::UNCERTAINTY_FILE), &records, classes)?;
        report::write_bins_csv(&dir.join(report::BINS_FILE), &records)?;
        println!(
            "{:<24} instances {:>5}  accuracy {:.4}  ece10 {:.4}",
            metrics.label, metrics.instances, metrics.accuracy, metrics.ece10
        );
        rows.push(metrics);
    }
    let summary = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| reports[0].join("summary.csv"));
    report::write_metrics_csv(&summary, &rows)?;
    println!("{}", summary.display());
    Ok(())
}

pub fn sweep(config_path: &Path, overrides: &[String], param: &str, values: &str) -> Result<()> {
    let base_exp = load_experiment(config_path, overrides)?;
    let base_resolved = base_exp.resolve()?;
    let out_root = Path::new(&base_resolved.output_dir).to_path_buf();
    let mut rows: Vec<ReportMetrics> = Vec::new();

    match param {
        "k" => {
            for raw in values.split(',') {
                let k: usize = raw
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad k value '{raw}'")))?;
                let mut exp = base_exp.clone();
                exp.k_override = Some(k);
                exp.output_dir = out_root.join(format!("k_{k}")).display().to_string();
                let resolved = exp.resolve()?;
                let results = match resolved.model.dtype {
                    Dtype::F32 => sweep_point::<f32>(&resolved)?,
                    Dtype::F64 => sweep_point::<f64>(&resolved)?,
                };
                for (_, mut m) in results {
                    m.label = format!("k={k}");
                    rows.push(m);
                }
            }
        }
        "perturb" => {
            // one training run, one report per perturbation level
            let mut exp = base_exp.clone();
            exp.output_dir = out_root.join("base").display().to_string();
            exp.perturb = values.split(',').map(|s| s.trim().to_string()).collect();
            let resolved = exp.resolve()?;
            let results = match resolved.model.dtype {
                Dtype::F32 => sweep_point::<f32>(&resolved)?,
                Dtype::F64 => sweep_point::<f64>(&resolved)?,
            };
            rows.extend(results.into_iter().map(|(_, m)| m));
        }
        other => {
            return Err(Error::config(format!(
                "unknown sweep parameter '{other}' (use k or perturb)"
            )))
        }
    }

    std::fs::create_dir_all(&out_root)?;
    let summary = out_root.join("sweep_summary.csv");
    report::write_metrics_csv(&summary, &rows)?;
    for r in &rows {
        println!(
            "{:<24} instances {:>5}  accuracy {:.4}  ece10 {:.4}",
            r.label, r.instances, r.accuracy, r.ece10
        );
    }
    println!("{}", summary.display());
    Ok(())
}

fn sweep_point<T: Scalar>(resolved: &ResolvedExperiment) -> Result<Vec<(PathBuf, ReportMetrics)>> {
    let ckpt_path = run_train::<T>(resolved)?;
    let specs = report_specs(resolved, None)?;
    let out_root = Path::new(&resolved.output_dir).join("reports");
    run_infer::<T>(resolved, &ckpt_path, &specs, &out_root)
}

fn run_probe<T: Scalar>(
    resolved: &ResolvedExperiment,
    ckpt_path: &Path,
    spec: &PerturbSpec,
    out_path: &Path,
) -> Result<(Vec<f64>, f64)> {
    let ckpt = PipelineCheckpoint::<T>::load_expecting(ckpt_path, &resolved.model)?;
    let stats = ckpt.norm_stats.clone();
    let (_train, _val, test, _) = build_datasets::<T>(resolved, stats.as_ref())?;
    let cfg = &ckpt.config.backbone;
    let base = RngStream::new(resolved.seed, STREAM_INFER);

    let blocks = cfg.num_blocks;
    let mut sums = vec![0.0f64; blocks];
    let mut deeper = 0usize;
    for i in 0..test.len() {
        let mut prng = base.substream(i as u64);
        let x = &test.images[i];
        let xp = perturb::apply(spec, cfg, &ckpt.backbone, x, &test.labels[i], &mut prng)?;
        let d = backbone::representation_drift(cfg, &ckpt.backbone, x, &xp)?;
        for (s, v) in sums.iter_mut().zip(d.iter()) {
            *s += v.to_f64_val();
        }
        if d[blocks - 1] > d[0] {
            deeper += 1;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / test.len() as f64).collect();
    let fraction_deeper = deeper as f64 / test.len() as f64;

    let mut file = String::from("block,mean_distance\n");
    for (k, m) in means.iter().enumerate() {
        file.push_str(&format!("{},{m:.17}\n", k + 1));
    }
    std::fs::write(out_path, file)?;
    Ok((means, fraction_deeper))
}

pub fn probe(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    perturb: &str,
    out: Option<&Path>,
) -> Result<()> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => config_beside_checkpoint(checkpoint)?,
    };
    let resolved = load_experiment(&config_path, overrides)?.resolve()?;
    let spec: PerturbSpec = perturb.parse()?;
    let out_path = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| Path::new(&resolved.output_dir).join(format!("drift_{}.csv", spec.label())));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (means, fraction) = match resolved.model.dtype {
        Dtype::F32 => run_probe::<f32>(&resolved, checkpoint, &spec, &out_path)?,
        Dtype::F64 => run_probe::<f64>(&resolved, checkpoint, &spec, &out_path)?,
    };
    for (k, m) in means.iter().enumerate() {
        println!("block {:>2}: mean distance {m:.6}", k + 1);
    }
    println!("deepest block exceeds block 1 on {:.1}% of instances", fraction * 100.0);
    println!("{}", out_path.display());
    Ok(())
}

pub fn verify() -> Result<()> {
    let checks = nestdiff_core::verify::run_all();
    let mut failed = 0usize;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<32} {}", c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::numeric(format!("{failed} verification checks failed")));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
