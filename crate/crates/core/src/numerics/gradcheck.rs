//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::nn::{ParamKind, ParamSource};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Compare analytic gradients of a scalar loss against central differences
/// for every trainable element of `model`, returning the maximum relative
/// error `|analytic - cd| / (|cd| + 1e-12)`.
///
/// `forward` must build the loss node from the model's current tensors and
/// register parameters under exactly the names `model.visit("")` yields. A
/// non-finite loss at any evaluation point is a numeric error.
pub fn grad_check<T, S, F>(model: &mut S, forward: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    S: ParamSource<T>,
    F: Fn(&S, &mut Tape<T>) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = forward(model, &mut tape)?;
    tape.backward(loss)?;
    let analytic: std::collections::HashMap<String, Tensor<T>> =
        tape.param_grads().into_iter().collect();

    let mut entries: Vec<(String, usize)> = Vec::new();
    model.visit("", &mut |name, kind, t| {
        if kind == ParamKind::Trainable {
            entries.push((name.to_string(), t.len()));
        }
    });

    let eval = |model: &S| -> Result<f64> {
        let mut tape = Tape::with_trainable(&[]);
        let loss = forward(model, &mut tape)?;
        let v = tape.value(loss).data()[0].to_f64_val();
        if !v.is_finite() {
            return Err(Error::numeric("non-finite loss during grad check"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (name, len) in &entries {
        for idx in 0..*len {
            let nudge = |model: &mut S, delta: f64| {
                model.visit_mut("", &mut |n, _, t| {
                    if n == name {
                        let d = t.data_mut();
                        d[idx] = d[idx] + T::from_f64(delta);
                    }
                });
            };
            nudge(model, eps);
            let plus = eval(model)?;
            nudge(model, -2.0 * eps);
            let minus = eval(model)?;
            nudge(model, eps); // restore

            let cd = (plus - minus) / (2.0 * eps);
            let an = analytic
                .get(name)
                .map(|g| g.data()[idx].to_f64_val())
                .unwrap_or(0.0);
            let rel = (an - cd).abs() / (cd.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
