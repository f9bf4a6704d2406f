//! Full inference: shallow predictions at every tapped level, M reverse
//! diffusion samples per level, nested-ensemble aggregation, and the
//! per-instance uncertainty measures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::data::Dataset;
use crate::diffusion::{self, NoiseSchedule};
use crate::ensemble::{self, CandidateGroup, EnsembleOutput};
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::{RngStream, Scalar, Tensor};
use crate::perturb::PerturbSpec;
use crate::shallow;
use crate::trainer::PipelineCheckpoint;

// rng stream labels under one instance's stream
const STREAM_PERTURB: u64 = 0x70657274;
const STREAM_CHAIN: u64 = 0x636e;

/// Trained pipeline ready for prediction.
pub struct Pipeline<T: Scalar> {
    pub checkpoint: PipelineCheckpoint<T>,
    schedule: NoiseSchedule,
}

/// Decision plus uncertainty for one instance.
pub struct InstancePrediction<T: Scalar> {
    pub output: EnsembleOutput<T>,
    pub piw: Vec<f64>,
    pub pv: Vec<f64>,
}

/// Serialized per-instance result, one JSON object per line in a report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub index: usize,
    pub true_class: usize,
    pub class: usize,
    pub proba: Vec<f64>,
    pub piw: Vec<f64>,
    pub pv: Vec<f64>,
}

impl PredictionRecord {
    pub fn eval_record(&self) -> metrics::EvalRecord {
        let confidence = self.proba.iter().cloned().fold(f64::MIN, f64::max);
        metrics::EvalRecord {
            true_class: self.true_class,
            predicted_class: self.class,
            confidence,
        }
    }
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(checkpoint: PipelineCheckpoint<T>) -> Result<Self> {
        checkpoint.config.validate()?;
        let schedule = NoiseSchedule::new(checkpoint.config.schedule)?;
        for d in &checkpoint.denoise {
            if d.t_count() != schedule.t_count() {
                return Err(Error::config(format!(
                    "denoiser level {} has {} time steps, schedule has {}",
                    d.level,
                    d.t_count(),
                    schedule.t_count()
                )));
            }
        }
        Ok(Pipeline { checkpoint, schedule })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Predict one instance: K shallow maps, K x M reverse chains, bi-level
    /// vote, calibrated probability, and per-class PIW/PV over the raw
    /// samples. Chains draw from substreams of `stream` keyed by (level,
    /// sample), so the result is independent of evaluation order.
    pub fn predict(
        &self,
        x: &Tensor<T>,
        m_samples: usize,
        iota: f64,
        stream: &RngStream,
    ) -> Result<InstancePrediction<T>> {
        if m_samples == 0 {
            return Err(Error::config("need at least one sample per level"));
        }
        let ckpt = &self.checkpoint;
        let cfg = &ckpt.config.backbone;
        let fwd = backbone::forward(cfg, &ckpt.backbone, x)?;
        let mut groups = Vec::with_capacity(cfg.tap_levels);
        for (level, denoise_params) in ckpt.denoise.iter().enumerate() {
            let z = shallow::shallow_map(&fwd.taps[level], &ckpt.shallow[level])?;
            let cond = diffusion::condition(denoise_params, x)?;
            let level_stream = stream.substream(STREAM_CHAIN).substream(level as u64);
            let mut samples = Vec::with_capacity(m_samples);
            for m in 0..m_samples {
                let mut chain_stream = level_stream.substream(m as u64);
                samples.push(diffusion::sample_chain_cond(
                    &z,
                    denoise_params,
                    &cond,
                    &self.schedule,
                    &mut chain_stream,
                )?);
            }
            groups.push(CandidateGroup { level, samples });
        }
        let output = ensemble::decide(&groups, iota)?;
        let classes = cfg.num_classes;
        let mut piw = Vec::with_capacity(classes);
        let mut pv = Vec::with_capacity(classes);
        for c in 0..classes {
            // a single retained sample has no interval width
            piw.push(if output.raw.len() < 2 {
                0.0
            } else {
                metrics::piw(&output.raw, c)?
            });
            pv.push(metrics::pv(&output.raw, c)?);
        }
        Ok(InstancePrediction { output, piw, pv })
    }
}

/// Run inference over a dataset split, optionally perturbing every image
/// first. Instance `i` uses `base.substream(i)`, so results are identical
/// whether instances run serially or across `threads` workers.
pub fn run_inference<T: Scalar>(
    pipeline: &Pipeline<T>,
    data: &Dataset<T>,
    m_samples: usize,
    iota: f64,
    base: &RngStream,
    perturb: Option<&PerturbSpec>,
    threads: usize,
) -> Result<Vec<PredictionRecord>> {
    let one = |i: usize| -> Result<PredictionRecord> {
        let stream = base.substream(i as u64);
        let x = match perturb {
            Some(spec) => {
                let mut prng = stream.substream(STREAM_PERTURB);
                crate::perturb::apply(
                    spec,
                    &pipeline.checkpoint.config.backbone,
                    &pipeline.checkpoint.backbone,
                    &data.images[i],
                    &data.labels[i],
                    &mut prng,
                )?
            }
            None => data.images[i].clone(),
        };
        let pred = pipeline.predict(&x, m_samples, iota, &stream)?;
        Ok(PredictionRecord {
            index: i,
            true_class: data.label_index(i),
            class: pred.output.class,
            proba: pred.output.proba.data().iter().map(|v| v.to_f64_val()).collect(),
            piw: pred.piw,
            pv: pred.pv,
        })
    };

    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..data.len()).into_par_iter().map(one).collect())
    } else {
        (0..data.len()).map(one).collect()
    }
}
