//! Single-file checkpoint container: a JSON manifest (shapes, dtype,
//! version, config and its hash, normalization stats, class names) followed
//! by raw little-endian tensor sections in manifest order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::config::PipelineConfig;
use crate::data::ChannelStats;
use crate::diffusion::DenoiseParams;
use crate::error::{Error, Result};
use crate::numerics::nn::{load_named_tensors, ParamKind, ParamSource};
use crate::numerics::{Dtype, RngStream, Scalar, Tensor};
use crate::shallow::ShallowParams;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NDCK";

/// The full trained state of the pipeline.
#[derive(Clone, Debug)]
pub struct PipelineCheckpoint<T> {
    pub config: PipelineConfig,
    pub backbone: BackboneParams<T>,
    pub shallow: Vec<ShallowParams<T>>,
    pub denoise: Vec<DenoiseParams<T>>,
    pub norm_stats: Option<ChannelStats>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: Dtype,
    config_hash: String,
    config: PipelineConfig,
    norm_stats: Option<ChannelStats>,
    class_names: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> PipelineCheckpoint<T> {
    /// Fresh (untrained) parameter set for `config`, seeded from `rng`.
    pub fn init(config: &PipelineConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        if T::DTYPE != config.dtype {
            return Err(Error::config(format!(
                "config dtype {} does not match element type {}",
                config.dtype,
                T::DTYPE
            )));
        }
        let mut stream = rng.clone();
        let backbone = BackboneParams::init(&config.backbone, &mut stream)?;
        let k = config.backbone.tap_levels;
        let classes = config.backbone.num_classes;
        let shallow = (0..k)
            .map(|level| {
                ShallowParams::init(config.tap_dim(), &config.shallow_hiddens, classes, level, &stream)
            })
            .collect();
        let denoise = (0..k)
            .map(|level| {
                DenoiseParams::init(
                    config.pixel_dim(),
                    classes,
                    config.schedule.t_count,
                    &config.denoise,
                    level,
                    &stream,
                )
            })
            .collect();
        Ok(PipelineCheckpoint {
            config: config.clone(),
            backbone,
            shallow,
            denoise,
            norm_stats: None,
            class_names: Vec::new(),
        })
    }

    pub fn visit_all(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.backbone.visit("", f);
        for s in &self.shallow {
            s.visit("", f);
        }
        for d in &self.denoise {
            d.visit("", f);
        }
    }

    fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_all(&mut |name, _, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.named();
        let manifest = Manifest {
            version: FORMAT_VERSION,
            dtype: T::DTYPE,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            norm_stats: self.norm_stats.clone(),
            class_names: self.class_names.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let manifest_json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_u64::<LittleEndian>(manifest_json.len() as u64)?;
        file.write_all(&manifest_json)?;
        for (_, t) in &tensors {
            match T::DTYPE {
                Dtype::F32 => {
                    for &v in t.data() {
                        file.write_f32::<LittleEndian>(v.to_f64_val() as f32)?;
                    }
                }
                Dtype::F64 => {
                    for &v in t.data() {
                        file.write_f64::<LittleEndian>(v.to_f64_val())?;
                    }
                }
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(
            std::fs::File::open(path)
                .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
        );
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated file: missing magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let len = file
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Checkpoint("truncated file: missing manifest length".into()))?;
        let mut manifest_json = vec![0u8; len as usize];
        file.read_exact(&mut manifest_json)
            .map_err(|_| Error::Checkpoint("truncated file: manifest cut short".into()))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_json)
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.version
            )));
        }
        if manifest.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint dtype {} does not match requested {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Checkpoint("config hash mismatch inside manifest".into()));
        }

        let mut tensors: HashMap<String, Tensor<T>> = HashMap::new();
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let v = match T::DTYPE {
                    Dtype::F32 => file
                        .read_f32::<LittleEndian>()
                        .map(|x| T::from_f64(x as f64)),
                    Dtype::F64 => file.read_f64::<LittleEndian>().map(T::from_f64),
                }
                .map_err(|_| {
                    Error::Checkpoint(format!("truncated file: tensor {} cut short", entry.name))
                })?;
                data.push(v);
            }
            tensors.insert(entry.name.clone(), Tensor::from_vec(entry.shape.clone(), data)?);
        }

        let mut ckpt = PipelineCheckpoint::init(&manifest.config, &RngStream::new(0, 0))?;
        load_named_tensors(&mut ckpt.backbone, "", &tensors)?;
        for s in ckpt.shallow.iter_mut() {
            load_named_tensors(s, "", &tensors)?;
        }
        for d in ckpt.denoise.iter_mut() {
            load_named_tensors(d, "", &tensors)?;
        }
        ckpt.norm_stats = manifest.norm_stats;
        ckpt.class_names = manifest.class_names;
        Ok(ckpt)
    }

    /// Load and verify against an expected structural config.
    pub fn load_expecting(path: &Path, expected: &PipelineConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.config.hash() != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs expected {}",
                &ckpt.config.hash()[..12],
                &expected.hash()[..12]
            )));
        }
        Ok(ckpt)
    }
}
