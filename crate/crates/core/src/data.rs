//! Synthetic two-class image generation and labeled-directory ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Scalar, Tensor};
use crate::perturb::area_resize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labeled image set. Labels are exact one-hot vectors; all images share
/// dimensions.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Tensor<T>>,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn label_index(&self, i: usize) -> usize {
        self.labels[i].argmax()
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images vs {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let dims = self.images.first().map(|x| x.shape().to_vec());
        for (i, img) in self.images.iter().enumerate() {
            if Some(img.shape().to_vec()) != dims {
                return Err(Error::Data(format!("image {i} has mismatched dims")));
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            crate::numerics::validate_one_hot(&l.reshape(&[1, l.len()])?)
                .map_err(|_| Error::Data(format!("label {i} is not one-hot")))?;
        }
        Ok(())
    }
}

/// Per-channel normalization statistics, computed on the training split and
/// persisted in the checkpoint so inference reuses the same space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute<T: Scalar>(dataset: &Dataset<T>) -> Result<Self> {
        let first = dataset
            .images
            .first()
            .ok_or_else(|| Error::Data("cannot compute stats of an empty dataset".into()))?;
        let channels = *first.shape().last().unwrap();
        let mut sum = vec![0.0f64; channels];
        let mut sumsq = vec![0.0f64; channels];
        let mut count = vec![0usize; channels];
        for img in &dataset.images {
            for (i, v) in img.data().iter().enumerate() {
                let c = i % channels;
                let x = v.to_f64_val();
                sum[c] += x;
                sumsq[c] += x * x;
                count[c] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .zip(&count)
            .map(|((sq, m), &n)| (sq / n as f64 - m * m).max(1e-12).sqrt())
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn normalize_image<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let channels = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % channels;
            *v = T::from_f64((v.to_f64_val() - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn normalize<T: Scalar>(&self, dataset: &mut Dataset<T>) {
        for img in dataset.images.iter_mut() {
            *img = self.normalize_image(img);
        }
    }
}

/// Centered radial blob, standardized to zero mean and unit RMS.
fn blob_pattern(size: usize) -> Vec<f64> {
    let sigma = size as f64 / 6.0;
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (r, q) = ((i / size) as f64, (i % size) as f64);
            (-((r - c).powi(2) + (q - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    standardize(raw)
}

/// Diagonal stripes, standardized to zero mean and unit RMS.
fn stripe_pattern(size: usize) -> Vec<f64> {
    let period = size as f64 / 4.0;
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (r, q) = ((i / size) as f64, (i % size) as f64);
            (std::f64::consts::TAU * (r + q) / period).sin()
        })
        .collect();
    standardize(raw)
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let rms = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / rms;
    }
    v
}

const SYNTH_NOISE_SIGMA: f64 = 0.5;

/// Balanced two-class synthetic set: class 0 is a centered blob, class 1 a
/// diagonal stripe pattern, both scaled by `class_sep` with additive
/// Gaussian noise (sigma 0.5) so the classes are cleanly separable at
/// `class_sep = 1`. Grayscale, `image_size` square. Bitwise reproducible
/// from the stream.
pub fn gen_synthetic<T: Scalar>(
    n: usize,
    image_size: usize,
    class_sep: f64,
    rng: &RngStream,
) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Data("synthetic dataset needs n >= 2".into()));
    }
    if class_sep <= 0.0 {
        return Err(Error::Data("class_sep must be positive".into()));
    }
    let patterns = [blob_pattern(image_size), stripe_pattern(image_size)];
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let base = rng.substream(0x73796e74);
    for i in 0..n {
        let class = i % 2;
        let mut stream = base.substream(i as u64);
        let data: Vec<T> = patterns[class]
            .iter()
            .map(|&p| T::from_f64(class_sep * p + SYNTH_NOISE_SIGMA * stream.next_gaussian()))
            .collect();
        images.push(Tensor::from_vec(vec![image_size, image_size, 1], data)?);
        labels.push(Tensor::one_hot(2, class));
    }
    let ds = Dataset {
        images,
        labels,
        split: Split::Train,
        class_names: vec!["class_0".into(), "class_1".into()],
    };
    ds.validate()?;
    Ok(ds)
}

/// Load `<root>/<class_name>/*.png|pgm` with lexicographic class order.
/// Pixels are scaled to [0, 1]; images are area-resized to `image_size`
/// square with `channels` channels (1 = luminance, 3 = RGB).
pub fn load_dir<T: Scalar>(
    root: &Path,
    image_size: usize,
    channels: usize,
) -> Result<Dataset<T>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset path {} is not a directory", root.display())));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Data(format!("unsupported channel count {channels}")));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two class directories under {}",
            root.display()
        )));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "pgm" || e == "pnm" || e == "ppm"
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", file.display())))?;
            let raw = decode_image::<T>(&img, channels)?;
            images.push(area_resize(&raw, image_size, image_size)?);
            labels.push(Tensor::one_hot(class_names.len(), class_idx));
        }
    }
    let ds = Dataset {
        images,
        labels,
        split: Split::Train,
        class_names,
    };
    ds.validate()?;
    Ok(ds)
}

fn decode_image<T: Scalar>(img: &image::DynamicImage, channels: usize) -> Result<Tensor<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w * channels);
    match channels {
        1 => {
            let gray = img.to_luma8();
            for p in gray.pixels() {
                data.push(T::from_f64(p.0[0] as f64 / 255.0));
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for p in rgb.pixels() {
                for c in 0..3 {
                    data.push(T::from_f64(p.0[c] as f64 / 255.0));
                }
            }
        }
    }
    Tensor::from_vec(vec![h, w, channels], data)
}

/// Label-stratified disjoint split into train/val/test. Fractions must sum
/// to 1; a fraction that would leave a split empty is an error. Per-class
/// counts use largest-remainder rounding so exact fractions come out exact.
pub fn split<T: Scalar>(
    dataset: &Dataset<T>,
    fractions: (f64, f64, f64),
    rng: &RngStream,
) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    let (ft, fv, fs) = fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 || ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(Error::Data(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let classes = dataset.classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..dataset.len() {
        per_class[dataset.label_index(i)].push(i);
    }
    let mut buckets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut stream = rng.substream(0x73706c69);
    for indices in per_class.iter_mut() {
        stream.shuffle(indices);
        let n = indices.len();
        let counts = largest_remainder(n, &[ft, fv, fs]);
        let (a, b) = (counts[0], counts[0] + counts[1]);
        buckets[0].extend_from_slice(&indices[..a]);
        buckets[1].extend_from_slice(&indices[a..b]);
        buckets[2].extend_from_slice(&indices[b..]);
    }
    if buckets.iter().any(|b| b.is_empty()) {
        return Err(Error::Data(
            "split fractions produce an empty train/val/test bucket".into(),
        ));
    }
    let mk = |idx: &[usize], split: Split| Dataset {
        images: idx.iter().map(|&i| dataset.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| dataset.labels[i].clone()).collect(),
        split,
        class_names: dataset.class_names.clone(),
    };
    Ok((
        mk(&buckets[0], Split::Train),
        mk(&buckets[1], Split::Val),
        mk(&buckets[2], Split::Test),
    ))
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut remainder = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remainder == 0 {
            break;
        }
        counts[i] += 1;
        remainder -= 1;
    }
    counts
}
