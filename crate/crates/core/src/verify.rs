//! Built-in oracle and property checks, runnable from the command line.
//! Each check computes an expected value through an independent route
//! (brute force, closed form, or exhaustive counting) and compares the
//! implementation against it.

use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::diffusion::{self, make_schedule};
use crate::ensemble::{self, CandidateGroup};
use crate::error::Result;
use crate::metrics::{self, EvalRecord};
use crate::numerics::{grad_check, percentile, RngStream, Tensor};
use crate::perturb;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run the oracle suite. Returns one entry per check.
pub fn run_all() -> Vec<Check> {
    vec![
        check("rng.moments", rng_moments),
        check("gradients.networks", gradient_networks),
        check("schedule.invariants", schedule_invariants),
        check("diffusion.forward_equivalence", forward_equivalence),
        check("diffusion.posterior_oracle", posterior_oracle),
        check("diffusion.round_trip", round_trip),
        check("ensemble.counting_oracle", ensemble_oracle),
        check("metrics.oracles", metrics_oracles),
        check("proba.contract", proba_contract),
        check("perturb.contracts", perturb_contracts),
    ]
}

fn rng_moments() -> Result<(bool, String)> {
    let mut rng = RngStream::new(1, 0);
    let n = 200_000usize;
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..n {
        let z = rng.next_gaussian();
        sum += z;
        sumsq += z * z;
    }
    let mean = sum / n as f64;
    let var = sumsq / n as f64 - mean * mean;
    let ok = mean.abs() < 0.011 && (var - 1.0).abs() < 0.022;
    Ok((ok, format!("mean {mean:.4}, var {var:.4} over {n} draws")))
}

fn gradient_networks() -> Result<(bool, String)> {
    let cfg = BackboneConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_hidden: 10,
        num_classes: 2,
        tap_levels: 1,
    };
    let mut rng = RngStream::new(21, 0);
    let mut params = BackboneParams::<f64>::init(&cfg, &mut rng)?;
    // healthy weight scale so no gradient is lost in float noise
    let mut wstream = rng.substream(1);
    use crate::numerics::nn::{ParamKind, ParamSource};
    params.visit_mut("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            *t = Tensor::trunc_normal(&mut wstream, t.shape(), 0.45);
        }
    });
    let x = Tensor::gaussian(&mut rng, &[8, 8, 1]);
    let y = Tensor::<f64>::one_hot(2, 1).reshape(&[1, 2])?;
    let rel = grad_check(
        &mut params,
        move |p, tape| {
            let xv = tape.constant(x.clone());
            let fwd = backbone::forward_taped(tape, &cfg, p, xv)?;
            crate::numerics::cross_entropy_one_hot(tape, fwd.y_b, &y)
        },
        1e-4,
    )?;
    Ok((rel < 1e-5, format!("backbone max rel err {rel:.3e}")))
}

fn schedule_invariants() -> Result<(bool, String)> {
    let s = make_schedule(1000, 1.0 - 1e-4, 0.98)?;
    let mut ok = s.alpha_bar(1000) < 1e-3 && s.alpha_bar(0) == 1.0;
    for t in 1..=1000 {
        ok &= s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t);
        ok &= s.alpha_bar(t) <= s.alpha_bar(t - 1);
        if t >= 2 {
            ok &= s.alpha(t) < s.alpha(t - 1);
        }
    }
    Ok((ok, format!("alpha_bar_T = {:.3e}", s.alpha_bar(1000))))
}

fn forward_equivalence() -> Result<(bool, String)> {
    let mut rng = RngStream::new(31, 0);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let t_count = 4 + (trial % 7) * 4;
        let first = 0.999 - 0.0001 * trial as f64;
        let s = make_schedule(t_count, first, 0.8)?;
        let y0 = rng.next_gaussian();
        let u = rng.next_gaussian();
        let (mut mean, mut var) = (y0, 0.0f64);
        for t in 1..=t_count {
            let a = s.alpha(t);
            mean = a.sqrt() * mean + (1.0 - a.sqrt()) * u;
            var = a * var + (1.0 - a);
            let ab = s.alpha_bar(t);
            worst = worst
                .max((mean - (ab.sqrt() * y0 + (1.0 - ab.sqrt()) * u)).abs())
                .max((var - (1.0 - ab)).abs());
        }
    }
    Ok((worst < 1e-10, format!("worst deviation {worst:.3e}")))
}

fn posterior_oracle() -> Result<(bool, String)> {
    let mut rng = RngStream::new(41, 0);
    let s = make_schedule(20, 0.998, 0.8)?;
    let mut worst = 0.0f64;
    for t in 2..=20 {
        let y0 = rng.next_gaussian();
        let u = rng.next_gaussian() * 0.5;
        let yt = rng.next_gaussian();
        let z = Tensor::scalar(u);
        let e = Tensor::scalar(0.0);
        let (mean, var) =
            diffusion::posterior_params(&Tensor::scalar(yt), &Tensor::scalar(y0), &z, &e, t, &s)?;
        let a = s.alpha(t);
        let abp = s.alpha_bar(t - 1);
        let m1 = abp.sqrt() * y0 + (1.0 - abp.sqrt()) * u;
        let v1 = 1.0 - abp;
        let mt = a.sqrt() * m1 + (1.0 - a.sqrt()) * u;
        let vt = a * v1 + (1.0 - a);
        let cov = a.sqrt() * v1;
        worst = worst
            .max((mean.data()[0] - (m1 + cov / vt * (yt - mt))).abs())
            .max((var - (v1 - cov * cov / vt)).abs());
    }
    Ok((worst < 1e-10, format!("worst deviation {worst:.3e}")))
}

fn round_trip() -> Result<(bool, String)> {
    let mut rng = RngStream::new(51, 0);
    let s = make_schedule(32, 0.999, 0.85)?;
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let t = 1 + trial % 32;
        let y0 = Tensor::<f64>::gaussian(&mut rng, &[3]);
        let z = Tensor::gaussian(&mut rng, &[3]);
        let e = Tensor::gaussian(&mut rng, &[3]);
        let eps = Tensor::gaussian(&mut rng, &[3]);
        let yt = diffusion::forward_sample(&y0, &z, &e, t, &eps, &s)?;
        let back = diffusion::recover_y0(&yt, &z, &e, t, &eps, &s)?;
        for (a, b) in back.data().iter().zip(y0.data().iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst < 1e-12, format!("worst deviation {worst:.3e}")))
}

fn ensemble_oracle() -> Result<(bool, String)> {
    let mut rng = RngStream::new(61, 0);
    for _ in 0..200 {
        let k = 1 + (rng.next_u64() % 7) as usize;
        let m = 1 + (rng.next_u64() % 25) as usize;
        let c = 2 + (rng.next_u64() % 4) as usize;
        let groups: Vec<CandidateGroup<f64>> = (0..k)
            .map(|level| CandidateGroup {
                level,
                samples: (0..m).map(|_| Tensor::gaussian(&mut rng, &[c])).collect(),
            })
            .collect();
        let mut counts = vec![0usize; c];
        for g in &groups {
            for s in &g.samples {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (ci, &v) in s.data().iter().enumerate() {
                    let d = (v - 1.0) * (v - 1.0);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                counts[best] += 1;
            }
        }
        let mut oracle = 0usize;
        for (ci, &n) in counts.iter().enumerate() {
            if n > counts[oracle] {
                oracle = ci;
            }
        }
        if ensemble::aggregate_upper(&groups)? != oracle {
            return Ok((false, format!("mismatch at K={k} M={m} C={c}")));
        }
    }
    Ok((true, "200 randomized cases".to_string()))
}

fn metrics_oracles() -> Result<(bool, String)> {
    let mut rng = RngStream::new(71, 0);
    let records: Vec<EvalRecord> = (0..300)
        .map(|_| EvalRecord {
            true_class: (rng.next_u64() % 2) as usize,
            predicted_class: (rng.next_u64() % 2) as usize,
            confidence: 0.5 + 0.5 * rng.next_f64(),
        })
        .collect();
    let mut oracle = 0.0;
    for i in 0..10 {
        let (lo, hi) = (i as f64 / 10.0, (i + 1) as f64 / 10.0);
        let in_bin: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| r.confidence > lo && r.confidence <= hi)
            .collect();
        if in_bin.is_empty() {
            continue;
        }
        let acc = in_bin.iter().filter(|r| r.correct()).count() as f64 / in_bin.len() as f64;
        let conf = in_bin.iter().map(|r| r.confidence).sum::<f64>() / in_bin.len() as f64;
        oracle += in_bin.len() as f64 / records.len() as f64 * (acc - conf).abs();
    }
    let d_ece = (metrics::ece10(&records)? - oracle).abs();

    let samples: Vec<Tensor<f64>> = (0..=100)
        .map(|i| Tensor::from_vec(vec![1], vec![i as f64]).unwrap())
        .collect();
    let d_piw = (metrics::piw(&samples, 0)? - 95.0).abs();
    let coords: Vec<f64> = samples.iter().map(|s| s.data()[0]).collect();
    let mean = coords.iter().sum::<f64>() / coords.len() as f64;
    let two_pass = coords.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / coords.len() as f64;
    let d_pv = (metrics::pv(&samples, 0)? - two_pass).abs();
    let ok = d_ece < 1e-12 && d_piw < 1e-12 && d_pv < 1e-9;
    Ok((ok, format!("ece dev {d_ece:.1e}, piw dev {d_piw:.1e}, pv dev {d_pv:.1e}")))
}

fn proba_contract() -> Result<(bool, String)> {
    let mut rng = RngStream::new(81, 0);
    let groups: Vec<CandidateGroup<f64>> = (0..3)
        .map(|level| CandidateGroup {
            level,
            samples: (0..7).map(|_| Tensor::gaussian(&mut rng, &[4])).collect(),
        })
        .collect();
    let mut worst = 0.0f64;
    for iota in [0.1737, 0.3162, 1.0] {
        let p = ensemble::predict_proba(&groups, iota)?;
        let sum: f64 = p.data().iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok((worst < 1e-6, format!("worst |sum - 1| = {worst:.2e}")))
}

fn perturb_contracts() -> Result<(bool, String)> {
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
    let mut rng = RngStream::new(91, 0);
    let params = BackboneParams::<f64>::init(&cfg, &mut rng)?;
    let x = Tensor::gaussian(&mut rng, &[8, 8, 1]);
    let y = Tensor::<f64>::one_hot(2, 0);

    let id1 = perturb::gaussian_noise(&x, 0.0, &mut rng)? == x;
    let id2 = perturb::contrast(&x, 1.0)? == x;
    let id3 = perturb::downsample(&x, 1.0, 4)? == x;
    let contrasted: Tensor<f64> = perturb::contrast(&x, 0.7)?;
    let mean_ok = (contrasted.mean() - x.mean()).abs() < 1e-6;
    let eps = 0.03;
    let adv = perturb::fgsm(&cfg, &params, &x, &y, eps)?;
    let budget = adv
        .data()
        .iter()
        .zip(x.data().iter())
        .all(|(a, o)| (a - o).abs() <= eps);
    let padv = perturb::pgd(&cfg, &params, &x, &y, eps, 5, eps / 4.0)?;
    let pbudget = padv
        .data()
        .iter()
        .zip(x.data().iter())
        .all(|(a, o)| (a - o).abs() <= eps);
    let ok = id1 && id2 && id3 && mean_ok && budget && pbudget;
    Ok((
        ok,
        format!("identities {id1}/{id2}/{id3}, mean {mean_ok}, budgets {budget}/{pbudget}"),
    ))
}

// percentile is used by the metrics checks above; keep the linkage explicit
#[allow(dead_code)]
fn percentile_probe() -> Result<f64> {
    percentile(&[1.0, 2.0], 50.0)
}
