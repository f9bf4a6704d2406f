//! Test-time corruptions and gradient-based attacks for robustness
//! evaluation. All transforms are deterministic given their inputs and (for
//! the noise transform) an RNG stream. Attacks differentiate the backbone's
//! cross-entropy only, never the diffusion sampler, and keep images in
//! normalized float space without clipping.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::numerics::nn::cross_entropy_one_hot;
use crate::numerics::{RngStream, Scalar, Tape, Tensor};

/// Kind and strength of one perturbation, e.g. `gaussian:0.5`, `lowres:4`,
/// `contrast:0.7`, `fgsm:0.03`, `pgd:0.03` or `pgd:0.03:10:0.0075`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PerturbSpec {
    Gaussian { strength: f64 },
    Lowres { factor: f64 },
    Contrast { level: f64 },
    Fgsm { epsilon: f64 },
    Pgd { epsilon: f64, steps: usize, step_size: f64 },
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PerturbSpec::Gaussian { strength } if *strength < 0.0 => {
                Err(Error::config("gaussian strength must be >= 0"))
            }
            PerturbSpec::Lowres { factor } if *factor < 1.0 => {
                Err(Error::config("lowres factor must be >= 1"))
            }
            PerturbSpec::Contrast { level } if *level <= 0.0 => {
                Err(Error::config("contrast level must be > 0"))
            }
            PerturbSpec::Fgsm { epsilon } if *epsilon < 0.0 => {
                Err(Error::config("fgsm epsilon must be >= 0"))
            }
            PerturbSpec::Pgd { epsilon, steps, .. } if *epsilon < 0.0 || *steps == 0 => {
                Err(Error::config("pgd needs epsilon >= 0 and steps >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Short tag used in file names and report columns.
    pub fn label(&self) -> String {
        match self {
            PerturbSpec::Gaussian { strength } => format!("gaussian_{strength}"),
            PerturbSpec::Lowres { factor } => format!("lowres_{factor}"),
            PerturbSpec::Contrast { level } => format!("contrast_{level}"),
            PerturbSpec::Fgsm { epsilon } => format!("fgsm_{epsilon}"),
            PerturbSpec::Pgd { epsilon, .. } => format!("pgd_{epsilon}"),
        }
    }
}

impl FromStr for PerturbSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("cannot parse perturbation spec '{s}'"));
        let num = |p: &str| p.parse::<f64>().map_err(|_| bad());
        let spec = match parts.as_slice() {
            ["gaussian", g] => PerturbSpec::Gaussian { strength: num(g)? },
            ["lowres", w] => PerturbSpec::Lowres { factor: num(w)? },
            ["contrast", r] => PerturbSpec::Contrast { level: num(r)? },
            ["fgsm", e] => PerturbSpec::Fgsm { epsilon: num(e)? },
            ["pgd", e] => {
                let epsilon = num(e)?;
                PerturbSpec::Pgd {
                    epsilon,
                    steps: 10,
                    step_size: epsilon / 4.0,
                }
            }
            ["pgd", e, steps] => PerturbSpec::Pgd {
                epsilon: num(e)?,
                steps: steps.parse().map_err(|_| bad())?,
                step_size: num(e)? / 4.0,
            },
            ["pgd", e, steps, step] => PerturbSpec::Pgd {
                epsilon: num(e)?,
                steps: steps.parse().map_err(|_| bad())?,
                step_size: num(step)?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `x' = x + g * eps` with standard normal noise; no clipping.
pub fn gaussian_noise<T: Scalar>(x: &Tensor<T>, g: f64, rng: &mut RngStream) -> Result<Tensor<T>> {
    if g < 0.0 {
        return Err(Error::config("gaussian strength must be >= 0"));
    }
    if g == 0.0 {
        return Ok(x.clone());
    }
    let noise = Tensor::gaussian(rng, x.shape());
    x.add(&noise.scale(T::from_f64(g)))
}

/// Area-average resize of an `H x W x A` image to `new_h x new_w x A`.
pub fn area_resize<T: Scalar>(x: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let (h, w, a) = match x.shape() {
        [h, w, a] => (*h, *w, *a),
        other => return Err(Error::shape(format!("expected H x W x A image, got {other:?}"))),
    };
    if new_h == 0 || new_w == 0 {
        return Err(Error::shape("resize target must be positive"));
    }
    if new_h == h && new_w == w {
        return Ok(x.clone());
    }
    let mut out = Tensor::<T>::zeros(&[new_h, new_w, a]);
    let overlap = |cell: usize, lo: f64, hi: f64| -> f64 {
        let c0 = cell as f64;
        (hi.min(c0 + 1.0) - lo.max(c0)).max(0.0)
    };
    for oi in 0..new_h {
        let r0 = oi as f64 * h as f64 / new_h as f64;
        let r1 = (oi + 1) as f64 * h as f64 / new_h as f64;
        for oj in 0..new_w {
            let c0 = oj as f64 * w as f64 / new_w as f64;
            let c1 = (oj + 1) as f64 * w as f64 / new_w as f64;
            for ch in 0..a {
                let mut acc = 0.0f64;
                let mut weight = 0.0f64;
                for ri in (r0.floor() as usize)..(r1.ceil() as usize).min(h) {
                    let wr = overlap(ri, r0, r1);
                    if wr == 0.0 {
                        continue;
                    }
                    for rj in (c0.floor() as usize)..(c1.ceil() as usize).min(w) {
                        let wc = overlap(rj, c0, c1);
                        if wc == 0.0 {
                            continue;
                        }
                        acc += wr * wc * x.data()[(ri * w + rj) * a + ch].to_f64_val();
                        weight += wr * wc;
                    }
                }
                out.data_mut()[(oi * new_w + oj) * a + ch] = T::from_f64(acc / weight);
            }
        }
    }
    Ok(out)
}

/// Downsample by factor `w` (area averaging to `floor(H/w) x floor(W/w)`),
/// then nearest-neighbor upsample back to the original resolution so the
/// model input size is unchanged. Errors when the reduced side would fall
/// below `min_size` (the patch size).
pub fn downsample<T: Scalar>(x: &Tensor<T>, w: f64, min_size: usize) -> Result<Tensor<T>> {
    if w < 1.0 {
        return Err(Error::config("downsample factor must be >= 1"));
    }
    if w == 1.0 {
        return Ok(x.clone());
    }
    let (h, wid, a) = match x.shape() {
        [h, wd, a] => (*h, *wd, *a),
        other => return Err(Error::shape(format!("expected H x W x A image, got {other:?}"))),
    };
    let new_h = (h as f64 / w).floor() as usize;
    let new_w = (wid as f64 / w).floor() as usize;
    if new_h < min_size || new_w < min_size {
        return Err(Error::config(format!(
            "downsample factor {w} reduces {h}x{wid} below the minimum size {min_size}"
        )));
    }
    let small = area_resize(x, new_h, new_w)?;
    // nearest-neighbor back to the original resolution
    let mut out = Tensor::<T>::zeros(&[h, wid, a]);
    for i in 0..h {
        let si = (i * new_h / h).min(new_h - 1);
        for j in 0..wid {
            let sj = (j * new_w / wid).min(new_w - 1);
            for ch in 0..a {
                out.data_mut()[(i * wid + j) * a + ch] = small.data()[(si * new_w + sj) * a + ch];
            }
        }
    }
    Ok(out)
}

/// `x' = r (x - mean(x)) + mean(x)` with the mean over all pixels and
/// channels.
pub fn contrast<T: Scalar>(x: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    if r <= 0.0 {
        return Err(Error::config("contrast level must be > 0"));
    }
    if r == 1.0 {
        return Ok(x.clone());
    }
    let mu = x.mean();
    let rr = T::from_f64(r);
    Ok(x.map(|v| rr * (v - mu) + mu))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradient of the backbone cross-entropy with respect to the input image.
fn input_gradient<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::with_trainable(&[]);
    let xv = tape.constant(x.clone());
    let fwd = backbone::forward_taped(&mut tape, cfg, params, xv)?;
    let target = y.reshape(&[1, y.len()])?;
    let loss = cross_entropy_one_hot(&mut tape, fwd.y_b, &target)?;
    tape.backward(loss)?;
    Ok(tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Force `|x'_i - x_i| <= eps` bit-exactly by stepping the few offending
/// elements (float rounding of `x + delta`) back toward `x`.
fn project_linf<T: Scalar>(x: &Tensor<T>, x_adv: &mut Tensor<T>, eps: f64) {
    let eps = T::from_f64(eps);
    for (xa, &xo) in x_adv.data_mut().iter_mut().zip(x.data().iter()) {
        let d = *xa - xo;
        if d > eps {
            *xa = xo + eps;
            while *xa - xo > eps {
                *xa = step_toward(*xa, false);
            }
        } else if d < -eps {
            *xa = xo - eps;
            while *xa - xo < -eps {
                *xa = step_toward(*xa, true);
            }
        }
    }
}

/// One representable value up or down, independent of the float width.
fn step_toward<T: Scalar>(v: T, up: bool) -> T {
    match T::DTYPE {
        crate::numerics::Dtype::F32 => {
            let f = v.to_f64_val() as f32;
            T::from_f64(if up { f.next_up() } else { f.next_down() } as f64)
        }
        crate::numerics::Dtype::F64 => {
            let f = v.to_f64_val();
            T::from_f64(if up { f.next_up() } else { f.next_down() })
        }
    }
}

/// Fast gradient sign attack: `x' = x + eps * sign(grad_x L_init)`.
pub fn fgsm<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if eps < 0.0 {
        return Err(Error::config("fgsm epsilon must be >= 0"));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(cfg, params, x, y)?;
    let mut adv = x.add(&g.map(sign).scale(T::from_f64(eps)))?;
    project_linf(x, &mut adv, eps);
    Ok(adv)
}

/// Projected gradient descent under the L-infinity ball of radius `eps`
/// around `x`. No random start; `steps = 1, step_size = eps` reduces to
/// [`fgsm`].
pub fn pgd<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor<T>> {
    if eps < 0.0 || steps == 0 {
        return Err(Error::config("pgd needs epsilon >= 0 and steps >= 1"));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    for _ in 0..steps {
        let g = input_gradient(cfg, params, &adv, y)?;
        adv = adv.add(&g.map(sign).scale(T::from_f64(step_size)))?;
        project_linf(x, &mut adv, eps);
    }
    Ok(adv)
}

/// Apply a perturbation spec to one image. Attacks need the backbone and the
/// true label; the noise transform advances `rng`.
pub fn apply<T: Scalar>(
    spec: &PerturbSpec,
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    spec.validate()?;
    match spec {
        PerturbSpec::Gaussian { strength } => gaussian_noise(x, *strength, rng),
        PerturbSpec::Lowres { factor } => downsample(x, *factor, cfg.patch_size),
        PerturbSpec::Contrast { level } => contrast(x, *level),
        PerturbSpec::Fgsm { epsilon } => fgsm(cfg, params, x, y, *epsilon),
        PerturbSpec::Pgd {
            epsilon,
            steps,
            step_size,
        } => pgd(cfg, params, x, y, *epsilon, *steps, *step_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneParams;

    fn image(seed: u64, h: usize) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 0);
        Tensor::gaussian(&mut rng, &[h, h, 1])
    }

    fn tiny_backbone() -> (BackboneConfig, BackboneParams<f64>) {
        let cfg = BackboneConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden: 8,
            num_classes: 2,
            tap_levels: 1,
        };
        let mut rng = RngStream::new(123, 0);
        let params = BackboneParams::init(&cfg, &mut rng).unwrap();
        (cfg, params)
    }

    #[test]
    fn zero_strength_noise_is_exact_identity() {
        let x = image(1, 8);
        let mut rng = RngStream::new(2, 0);
        let out = gaussian_noise(&x, 0.0, &mut rng).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn noise_variance_tracks_strength() {
        let x = Tensor::<f64>::zeros(&[40, 40, 1]);
        let mut rng = RngStream::new(3, 0);
        for g in [0.5f64, 1.0] {
            let out = gaussian_noise(&x, g, &mut rng).unwrap();
            let n = out.len() as f64;
            let mean: f64 = out.data().iter().sum::<f64>() / n;
            let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let tol = 6.0 * g * g * (2.0 / n).sqrt();
            assert!((var - g * g).abs() < tol, "g={g}: var {var}");
        }
    }

    #[test]
    fn unit_factor_downsample_is_exact_identity() {
        let x = image(4, 8);
        assert_eq!(downsample(&x, 1.0, 4).unwrap(), x);
    }

    #[test]
    fn constant_image_unchanged_by_any_factor() {
        let x = Tensor::<f64>::full(&[16, 16, 1], 0.37);
        for w in [1.5f64, 2.0, 4.0] {
            let out = downsample(&x, w, 2).unwrap();
            for v in out.data() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_below_patch_size_errors() {
        let x = image(5, 16);
        assert!(downsample(&x, 8.0, 4).is_err()); // 16/8 = 2 < 4
        assert!(downsample(&x, 4.0, 4).is_ok());
    }

    #[test]
    fn downsample_blurs_structure() {
        // checkerboard averages toward the mean under a 2x reduction
        let mut x = Tensor::<f64>::zeros(&[8, 8, 1]);
        for i in 0..8 {
            for j in 0..8 {
                x.data_mut()[i * 8 + j] = ((i + j) % 2) as f64;
            }
        }
        let out = downsample(&x, 2.0, 2).unwrap();
        for v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_contrast_is_exact_identity_and_mean_is_preserved() {
        let x = image(6, 8);
        assert_eq!(contrast(&x, 1.0).unwrap(), x);
        let out = contrast(&x, 0.7).unwrap();
        assert!((out.mean() - x.mean()).abs() < 1e-6);
        // variance shrinks by r^2
        let center = |t: &Tensor<f64>| {
            let m = t.mean();
            t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.len() as f64
        };
        assert!((center(&out) - 0.49 * center(&x)).abs() < 1e-10);
    }

    #[test]
    fn fgsm_budget_and_zero_eps() {
        let (cfg, params) = tiny_backbone();
        let x = image(7, 8);
        let y = Tensor::<f64>::one_hot(2, 0);
        assert_eq!(fgsm(&cfg, &params, &x, &y, 0.0).unwrap(), x);

        let eps = 0.03;
        let adv = fgsm(&cfg, &params, &x, &y, eps).unwrap();
        let mut nonzero = 0usize;
        for (a, o) in adv.data().iter().zip(x.data().iter()) {
            let d = (a - o).abs();
            assert!(d <= eps, "budget violated: {d} > {eps}");
            if d > 0.0 {
                assert!(d > eps - 1e-12, "step short of budget: {d}");
                nonzero += 1;
            }
        }
        assert!(nonzero > adv.len() / 2, "gradient signs mostly zero");
    }

    #[test]
    fn pgd_single_step_equals_fgsm_and_respects_budget() {
        let (cfg, params) = tiny_backbone();
        let x = image(8, 8);
        let y = Tensor::<f64>::one_hot(2, 1);
        let eps = 0.03;
        let a = pgd(&cfg, &params, &x, &y, eps, 1, eps).unwrap();
        let b = fgsm(&cfg, &params, &x, &y, eps).unwrap();
        assert_eq!(a, b);

        let multi = pgd(&cfg, &params, &x, &y, eps, 10, eps / 4.0).unwrap();
        for (a, o) in multi.data().iter().zip(x.data().iter()) {
            assert!((a - o).abs() <= eps);
        }
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "gaussian:0.5".parse::<PerturbSpec>().unwrap(),
            PerturbSpec::Gaussian { strength: 0.5 }
        );
        assert_eq!(
            "lowres:4".parse::<PerturbSpec>().unwrap(),
            PerturbSpec::Lowres { factor: 4.0 }
        );
        assert_eq!(
            "contrast:0.7".parse::<PerturbSpec>().unwrap(),
            PerturbSpec::Contrast { level: 0.7 }
        );
        assert_eq!(
            "fgsm:0.03".parse::<PerturbSpec>().unwrap(),
            PerturbSpec::Fgsm { epsilon: 0.03 }
        );
        assert_eq!(
            "pgd:0.03".parse::<PerturbSpec>().unwrap(),
            PerturbSpec::Pgd {
                epsilon: 0.03,
                steps: 10,
                step_size: 0.0075
            }
        );
        assert!("gaussian".parse::<PerturbSpec>().is_err());
        assert!("lowres:0.5".parse::<PerturbSpec>().is_err());
        assert!("warp:1".parse::<PerturbSpec>().is_err());
    }
}
