//! Per-level shallow mapping: a feed-forward network from the flattened
//! patch-token representation r_k to a latent class-probability vector z_k.

use crate::error::{Error, Result};
use crate::numerics::nn::{cross_entropy_one_hot, join, Mlp, ParamKind, ParamSource};
use crate::numerics::{RngStream, Scalar, Tape, Tensor, Var};

/// Parameter prefix for level `k` (zero-based index).
pub fn param_prefix(k: usize) -> String {
    format!("shallow.k{k}")
}

/// Input, hidden..., output sizes of the mapping network.
pub fn layer_dims(input_dim: usize, hiddens: &[usize], classes: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hiddens.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hiddens);
    dims.push(classes);
    dims
}

/// psi_k: the mapping network for one hierarchy level.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowParams<T> {
    pub net: Mlp<T>,
    pub level: usize,
}

impl<T: Scalar> ShallowParams<T> {
    /// `input_dim` is N*D (flattened tap), `hiddens` the fully connected
    /// widths, `classes` the output dimension. Each level draws its own
    /// init stream so the K networks start from different weights.
    pub fn init(
        input_dim: usize,
        hiddens: &[usize],
        classes: usize,
        level: usize,
        base: &RngStream,
    ) -> Self {
        let dims = layer_dims(input_dim, hiddens, classes);
        let mut stream = base.substream(0x7368616c).substream(level as u64);
        ShallowParams {
            net: Mlp::new(&dims, &mut stream),
            level,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.net.layers.last().expect("mlp has layers").out_dim()
    }
}

impl<T: Scalar> ParamSource<T> for ShallowParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.net.visit(&join(prefix, &param_prefix(self.level)), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.net.visit_mut(&join(prefix, &param_prefix(self.level)), f);
    }
}

/// Batched forward on an existing tape. `taps` must be `B x (N*D)` rows of
/// flattened representations; the output is `B x C` softmax rows.
pub fn forward_taped<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ShallowParams<T>,
    taps: Var,
) -> Result<Var> {
    if tape.value(taps).cols()? != params.input_dim() {
        return Err(Error::shape(format!(
            "shallow level {} wants input {}, got {:?}",
            params.level,
            params.input_dim(),
            tape.value(taps).shape()
        )));
    }
    let logits = params.net.forward(tape, &param_prefix(params.level), taps)?;
    tape.softmax_rows(logits)
}

/// z_k = g(r_k; psi_k): flatten the `N x D` tap row-major, run the MLP,
/// softmax. The tap must exclude the class-head token.
pub fn shallow_map<T: Scalar>(r_k: &Tensor<T>, params: &ShallowParams<T>) -> Result<Tensor<T>> {
    let flat = r_k.reshape(&[1, r_k.len()])?;
    let mut tape = Tape::with_trainable(&[]);
    let x = tape.constant(flat);
    let z = forward_taped(&mut tape, params, x)?;
    tape.value(z).reshape(&[params.classes()])
}

/// Cross-entropy of one intermediate prediction against a one-hot target.
pub fn loss_shallow<T: Scalar>(z_k: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    let c = y.len();
    let mut tape = Tape::with_trainable(&[]);
    let probs = tape.constant(z_k.reshape(&[1, c])?);
    let loss = cross_entropy_one_hot(&mut tape, probs, &y.reshape(&[1, c])?)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{self, BackboneConfig, BackboneParams};
    use crate::numerics::grad_check;
    use crate::numerics::nn::cross_entropy_one_hot;

    #[test]
    fn output_is_a_probability_vector() {
        let base = RngStream::new(1, 0);
        let params = ShallowParams::<f64>::init(12, &[8, 6], 3, 0, &base);
        let mut rng = RngStream::new(2, 0);
        let r = Tensor::gaussian(&mut rng, &[4, 3]);
        let z = shallow_map(&r, &params).unwrap();
        assert_eq!(z.shape(), &[3]);
        let sum: f64 = z.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(z.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn paper_scale_layer_sizes() {
        // input 768 x 196, hiddens {4096, 2048, 128}, output 2
        assert_eq!(
            layer_dims(768 * 196, &[4096, 2048, 128], 2),
            vec![768 * 196, 4096, 2048, 128, 2]
        );
        let base = RngStream::new(1, 0);
        let params = ShallowParams::<f64>::init(12, &[8, 6], 2, 0, &base);
        let dims: Vec<(usize, usize)> = params
            .net
            .layers
            .iter()
            .map(|l| (l.in_dim(), l.out_dim()))
            .collect();
        assert_eq!(dims, vec![(12, 8), (8, 6), (6, 2)]);
    }

    #[test]
    fn identical_params_and_input_give_identical_output() {
        let base = RngStream::new(9, 0);
        let params = ShallowParams::<f64>::init(6, &[4], 2, 1, &base);
        let dup = params.clone();
        let mut rng = RngStream::new(3, 0);
        let r = Tensor::gaussian(&mut rng, &[2, 3]);
        assert_eq!(
            shallow_map(&r, &params).unwrap(),
            shallow_map(&r, &dup).unwrap()
        );
    }

    #[test]
    fn levels_start_from_different_initializations() {
        let base = RngStream::new(9, 0);
        let a = ShallowParams::<f64>::init(6, &[4], 2, 0, &base);
        let b = ShallowParams::<f64>::init(6, &[4], 2, 1, &base);
        assert_ne!(a.net.layers[0].w, b.net.layers[0].w);
    }

    #[test]
    fn loss_shallow_examples() {
        let y = Tensor::from_vec(vec![2], vec![1.0f64, 0.0]).unwrap();
        assert_eq!(loss_shallow(&y, &y).unwrap(), 0.0);
        let uniform = Tensor::from_vec(vec![2], vec![0.5f64, 0.5]).unwrap();
        assert!((loss_shallow(&uniform, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = Tensor::from_vec(vec![2], vec![0.62f64, 0.38]).unwrap();
        assert!((loss_shallow(&z, &y).unwrap() - -(0.62f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn invariant_to_the_head_token() {
        // z_k consumes only rows 1..N of e_k; perturbing row 0 of the full
        // sequence cannot change the tap.
        let cfg = BackboneConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 3,
            num_heads: 2,
            mlp_hidden: 12,
            num_classes: 2,
            tap_levels: 2,
        };
        let mut rng = RngStream::new(4, 0);
        let bparams = BackboneParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::gaussian(&mut rng, &[8, 8, 1]);
        let seqs = backbone::token_sequences(&cfg, &bparams, &x).unwrap();
        let e1 = &seqs[0];
        let base = RngStream::new(5, 0);
        let sparams = ShallowParams::<f64>::init(
            cfg.num_patches() * cfg.embed_dim,
            &[16],
            2,
            0,
            &base,
        );
        let tap = e1.slice_rows(1, cfg.num_patches()).unwrap();
        let z = shallow_map(&tap, &sparams).unwrap();

        let mut perturbed = e1.clone();
        for c in 0..cfg.embed_dim {
            perturbed.data_mut()[c] += 123.0;
        }
        let tap2 = perturbed.slice_rows(1, cfg.num_patches()).unwrap();
        let z2 = shallow_map(&tap2, &sparams).unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn gradients_pass_and_do_not_reach_frozen_backbone() {
        let base = RngStream::new(6, 0);
        let mut params = ShallowParams::<f64>::init(8, &[6], 2, 0, &base);
        let mut rng = RngStream::new(7, 0);
        let taps = Tensor::gaussian(&mut rng, &[3, 8]);
        let mut y = Tensor::<f64>::zeros(&[3, 2]);
        y.data_mut()[0] = 1.0;
        y.data_mut()[3] = 1.0;
        y.data_mut()[4] = 1.0;

        let t2 = taps.clone();
        let y2 = y.clone();
        let rel = grad_check(
            &mut params,
            move |p, tape| {
                let tv = tape.constant(t2.clone());
                let z = forward_taped(tape, p, tv)?;
                cross_entropy_one_hot(tape, z, &y2)
            },
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-5, "rel {rel}");

        // On a stage-2 tape only shallow parameters are trainable; a frozen
        // backbone weight registered on the same tape stays gradient-free.
        let mut tape = Tape::with_trainable(&["shallow."]);
        let frozen = tape.param("backbone.head.w", &Tensor::gaussian(&mut rng, &[8, 2]));
        let tv = tape.constant(taps);
        let z = forward_taped(&mut tape, &params, tv).unwrap();
        let loss = cross_entropy_one_hot(&mut tape, z, &y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        let touched = tape.touched_params();
        assert!(!touched.is_empty());
        assert!(touched.iter().all(|n| n.starts_with("shallow.")));
    }
}
