//! Structural configuration of the whole pipeline, its presets, and the
//! canonical hash that guards checkpoint/config compatibility.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::diffusion::{DenoiseDims, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::Dtype;

/// Everything that determines tensor shapes and chain length. Two runs with
/// the same `PipelineConfig` can exchange checkpoints; anything else is a
/// hash mismatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dtype: Dtype,
    pub backbone: BackboneConfig,
    pub shallow_hiddens: Vec<usize>,
    pub denoise: DenoiseDims,
    pub schedule: ScheduleConfig,
}

impl PipelineConfig {
    /// Desk-scale preset: 32x32 grayscale, D=64, L=6, K=3, T=100.
    pub fn toy() -> Self {
        PipelineConfig {
            dtype: Dtype::F32,
            backbone: BackboneConfig {
                image_size: 32,
                channels: 1,
                patch_size: 8,
                embed_dim: 64,
                num_blocks: 6,
                num_heads: 4,
                mlp_hidden: 128,
                num_classes: 2,
                tap_levels: 3,
            },
            shallow_hiddens: vec![256, 128, 64],
            denoise: DenoiseDims::toy(),
            schedule: ScheduleConfig {
                t_count: 100,
                alpha_first: 1.0 - 1e-4,
                alpha_last: 0.98,
            },
        }
    }

    /// Full-scale preset matching the published architecture: ViT-B/16
    /// shapes, K=5, T=1000.
    pub fn paper() -> Self {
        PipelineConfig {
            dtype: Dtype::F32,
            backbone: BackboneConfig {
                image_size: 224,
                channels: 3,
                patch_size: 16,
                embed_dim: 768,
                num_blocks: 12,
                num_heads: 12,
                mlp_hidden: 3072,
                num_classes: 2,
                tap_levels: 5,
            },
            shallow_hiddens: vec![4096, 2048, 128],
            denoise: DenoiseDims::paper(),
            schedule: ScheduleConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.shallow_hiddens.is_empty() || self.shallow_hiddens.contains(&0) {
            return Err(Error::config("shallow hidden sizes must be positive"));
        }
        if self.denoise.width == 0 {
            return Err(Error::config("denoiser width must be positive"));
        }
        // constructing the schedule validates its endpoints
        crate::diffusion::NoiseSchedule::new(self.schedule)?;
        Ok(())
    }

    /// Flattened input size of the shallow mappings: N * D.
    pub fn tap_dim(&self) -> usize {
        self.backbone.num_patches() * self.backbone.embed_dim
    }

    /// Flattened pixel count seen by the denoiser encoders.
    pub fn pixel_dim(&self) -> usize {
        self.backbone.image_size * self.backbone.image_size * self.backbone.channels
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

/// Where evaluation data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// "synthetic" or "dir".
    pub source: String,
    /// Synthetic sample count.
    pub n: usize,
    /// Synthetic class separation.
    pub class_sep: f64,
    /// Root directory for `source = "dir"` (one subdirectory per class).
    pub dir: Option<String>,
    /// Train/val/test fractions.
    pub fractions: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            n: 1000,
            class_sep: 1.0,
            dir: None,
            fractions: (0.8, 0.1, 0.1),
        }
    }
}

/// One experiment as written in a config file. Unset fields resolve to
/// preset defaults; unknown keys are hard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Diffusion samples per level (M). Preset default: 10 toy, 20 paper.
    pub m_samples: Option<usize>,
    /// Brier temperature.
    pub iota: f64,
    /// Override the preset's tapped level count K.
    pub k_override: Option<usize>,
    /// Override the preset's chain length T.
    pub t_override: Option<usize>,
    pub dataset: DataConfig,
    pub train: Option<crate::trainer::TrainConfig>,
    /// Perturbations to evaluate, e.g. "gaussian:0.5".
    pub perturb: Vec<String>,
    pub output_dir: String,
    /// Worker threads for inference; the NESTDIFF_THREADS env var wins.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::Toy,
            seed: 7,
            m_samples: None,
            iota: 0.3162,
            k_override: None,
            t_override: None,
            dataset: DataConfig::default(),
            train: None,
            perturb: Vec::new(),
            output_dir: "runs/default".into(),
            threads: None,
        }
    }
}

/// Fully resolved experiment: every knob concrete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedExperiment {
    pub model: PipelineConfig,
    pub train: crate::trainer::TrainConfig,
    pub m_samples: usize,
    pub iota: f64,
    pub seed: u64,
    pub dataset: DataConfig,
    pub perturb: Vec<crate::perturb::PerturbSpec>,
    pub output_dir: String,
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let mut model = match self.preset {
            Preset::Toy => PipelineConfig::toy(),
            Preset::Paper => PipelineConfig::paper(),
        };
        if let Some(k) = self.k_override {
            model.backbone.tap_levels = k;
        }
        if let Some(t) = self.t_override {
            model.schedule.t_count = t;
        }
        model.validate()?;
        let train = self.train.unwrap_or(match self.preset {
            Preset::Toy => crate::trainer::TrainConfig::toy(),
            Preset::Paper => crate::trainer::TrainConfig::paper(),
        });
        train.validate()?;
        let m_samples = self.m_samples.unwrap_or(match self.preset {
            Preset::Toy => 10,
            Preset::Paper => 20,
        });
        if m_samples == 0 {
            return Err(Error::config("m_samples must be >= 1"));
        }
        if self.iota <= 0.0 {
            return Err(Error::config("iota must be positive"));
        }
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "dir" => {
                if self.dataset.dir.is_none() {
                    return Err(Error::config("dataset.source = \"dir\" needs dataset.dir"));
                }
            }
            other => return Err(Error::config(format!("unknown dataset source '{other}'"))),
        }
        let perturb: Vec<crate::perturb::PerturbSpec> = self
            .perturb
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_>>()?;
        let threads = std::env::var("NESTDIFF_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .or(self.threads)
            .unwrap_or(1);
        Ok(ResolvedExperiment {
            model,
            train,
            m_samples,
            iota: self.iota,
            seed: self.seed,
            dataset: self.dataset.clone(),
            perturb,
            output_dir: self.output_dir.clone(),
            threads: threads.max(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_defaults_resolve() {
        let exp = ExperimentConfig::default();
        let r = exp.resolve().unwrap();
        assert_eq!(r.m_samples, 10);
        assert_eq!(r.model.schedule.t_count, 100);
        assert_eq!(r.threads, 1);
    }

    #[test]
    fn k_at_or_above_l_is_a_config_error() {
        let exp = ExperimentConfig {
            k_override: Some(6),
            ..Default::default()
        };
        assert!(matches!(exp.resolve(), Err(Error::Config(_))));
        let ok = ExperimentConfig {
            k_override: Some(5),
            ..Default::default()
        };
        assert!(ok.resolve().is_ok());
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let json = r#"{"preset": "toy", "typo_key": 3}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
        let ok = r#"{"preset": "toy", "iota": 0.1737}"#;
        let exp: ExperimentConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(exp.iota, 0.1737);
    }

    #[test]
    fn bad_perturb_specs_are_rejected_at_resolve() {
        let exp = ExperimentConfig {
            perturb: vec!["gaussian:0.5".into(), "nonsense".into()],
            ..Default::default()
        };
        assert!(exp.resolve().is_err());
    }

    #[test]
    fn presets_validate() {
        PipelineConfig::toy().validate().unwrap();
        PipelineConfig::paper().validate().unwrap();
    }

    #[test]
    fn hash_is_stable_and_shape_sensitive() {
        let a = PipelineConfig::toy();
        let b = PipelineConfig::toy();
        assert_eq!(a.hash(), b.hash());
        let mut c = PipelineConfig::toy();
        c.schedule.t_count = 200;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn paper_preset_matches_published_shapes() {
        let p = PipelineConfig::paper();
        assert_eq!(p.backbone.num_patches(), 196);
        assert_eq!(p.backbone.embed_dim, 768);
        assert_eq!(p.backbone.num_blocks, 12);
        assert_eq!(p.shallow_hiddens, vec![4096, 2048, 128]);
        assert_eq!(p.denoise.width, 4096);
        assert_eq!(p.schedule.t_count, 1000);
        assert_eq!(p.schedule.alpha_first, 1.0 - 1e-4);
        assert_eq!(p.schedule.alpha_last, 0.98);
    }

    #[test]
    fn invalid_k_is_rejected() {
        let mut c = PipelineConfig::toy();
        c.backbone.tap_levels = c.backbone.num_blocks;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let a = PipelineConfig::toy();
        let json = serde_json::to_string(&a).unwrap();
        let b: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }
}
