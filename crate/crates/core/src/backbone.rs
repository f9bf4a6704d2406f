//! Transformer image classifier. Produces the final-layer class prediction
//! and the early-block token representations consumed by the shallow
//! mappings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{cross_entropy_one_hot, join, Linear, ParamKind, ParamSource};
use crate::numerics::{LayerNorm, RngStream, Scalar, Tape, Tensor, Var};

pub const PARAM_PREFIX: &str = "backbone";
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Image height and width in pixels (square input).
    pub image_size: usize,
    /// Input channels.
    pub channels: usize,
    /// Patch edge in pixels.
    pub patch_size: usize,
    /// Token embedding width.
    pub embed_dim: usize,
    /// Number of encoder blocks.
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Hidden width of the per-block feed-forward network.
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// How many leading blocks are tapped for shallow mappings (K).
    pub tap_levels: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.tap_levels == 0 || self.tap_levels >= self.num_blocks {
            return Err(Error::config(format!(
                "tap levels K={} must satisfy 1 <= K < L={}",
                self.tap_levels, self.num_blocks
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.channels == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("channels and mlp_hidden must be positive"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Token matrix at one hierarchy level; row 0 is the class-head token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub level: usize,
}

/// One transformer encoder block. The key projection carries no bias: a
/// key bias shifts every attention logit in a row by the same amount, which
/// the row softmax cancels, so it would be a dead parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Tensor<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn new(cfg: &BackboneConfig, rng: &mut RngStream) -> Self {
        let d = cfg.embed_dim;
        EncoderBlock {
            ln1: LayerNorm::new(d, LN_EPS),
            wq: Linear::new(d, d, rng),
            wk: Tensor::trunc_normal(rng, &[d, d], 0.02),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d, LN_EPS),
            fc1: Linear::new(d, cfg.mlp_hidden, rng),
            fc2: Linear::new(cfg.mlp_hidden, d, rng),
        }
    }
}

impl<T: Scalar> ParamSource<T> for EncoderBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.wq.visit(&join(prefix, "wq"), f);
        f(&join(prefix, "wk.w"), ParamKind::Trainable, &self.wk);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.wq.visit_mut(&join(prefix, "wq"), f);
        f(&join(prefix, "wk.w"), ParamKind::Trainable, &mut self.wk);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Patch projection + class token (gamma), per-block weights (Phi), and the
/// classification head (omega).
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub patch_proj: Linear<T>,
    pub class_token: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init(cfg: &BackboneConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut stream = rng.substream(0x6261636b); // "back"
        let patch_proj = Linear::new(cfg.patch_dim(), cfg.embed_dim, &mut stream);
        let class_token = Tensor::trunc_normal(&mut stream, &[1, cfg.embed_dim], 0.02);
        let blocks = (0..cfg.num_blocks)
            .map(|_| EncoderBlock::new(cfg, &mut stream))
            .collect();
        let head = Linear::new(cfg.embed_dim, cfg.num_classes, &mut stream);
        Ok(BackboneParams {
            patch_proj,
            class_token,
            blocks,
            head,
        })
    }
}

impl<T: Scalar> ParamSource<T> for BackboneParams<T> {
    // Names embed the canonical "backbone" root so they line up with what
    // forward passes register on the tape.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        let root = join(prefix, PARAM_PREFIX);
        self.patch_proj.visit(&join(&root, "patch.proj"), f);
        f(&join(&root, "patch.cls"), ParamKind::Trainable, &self.class_token);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(&root, &format!("block{i}")), f);
        }
        self.head.visit(&join(&root, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        let root = join(prefix, PARAM_PREFIX);
        self.patch_proj.visit_mut(&join(&root, "patch.proj"), f);
        f(&join(&root, "patch.cls"), ParamKind::Trainable, &mut self.class_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(&root, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(&root, "head"), f);
    }
}

/// Fixed sinusoidal position table. Row 0 (class token) is zero; patch rows
/// use their token index as the position.
pub fn position_encoding<T: Scalar>(tokens: usize, dim: usize) -> Tensor<T> {
    let mut pe = Tensor::zeros(&[tokens, dim]);
    for pos in 1..tokens {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 1e4f64.powf(2.0 * i / dim as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.data_mut()[pos * dim + j] = T::from_f64(v);
        }
    }
    pe
}

fn patch_indices(cfg: &BackboneConfig) -> Vec<usize> {
    let (p, w, a) = (cfg.patch_size, cfg.image_size, cfg.channels);
    let grid = cfg.grid();
    let mut idx = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pi in 0..grid {
        for pj in 0..grid {
            for di in 0..p {
                for dj in 0..p {
                    for c in 0..a {
                        idx.push(((pi * p + di) * w + (pj * p + dj)) * a + c);
                    }
                }
            }
        }
    }
    idx
}

fn check_image<T: Scalar>(cfg: &BackboneConfig, x: &Tensor<T>) -> Result<()> {
    let want = [cfg.image_size, cfg.image_size, cfg.channels];
    if x.shape() != want {
        return Err(Error::shape(format!(
            "image shape {:?}, config wants {:?}",
            x.shape(),
            want
        )));
    }
    Ok(())
}

/// Split the image into patches, project, prepend the class token, add the
/// position encoding. Output is the level-0 token matrix `(N+1) x D`.
pub fn patch_embed_taped<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: Var,
) -> Result<Var> {
    if tape.value(x).shape() != [cfg.image_size, cfg.image_size, cfg.channels] {
        return Err(Error::shape(format!(
            "image shape {:?}, config wants [{}, {}, {}]",
            tape.value(x).shape(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        )));
    }
    let n = cfg.num_patches();
    let patches = tape.gather(x, patch_indices(cfg), &[n, cfg.patch_dim()])?;
    let projected = params
        .patch_proj
        .forward(tape, &join(PARAM_PREFIX, "patch.proj"), patches)?;
    let cls = tape.param(&join(PARAM_PREFIX, "patch.cls"), &params.class_token);
    let seq = tape.concat_rows(&[cls, projected])?;
    let pe = tape.constant(position_encoding(n + 1, cfg.embed_dim));
    tape.add(seq, pe)
}

pub fn patch_embed<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let mut tape = Tape::with_trainable(&[]);
    let xv = tape.constant(x.clone());
    let e0 = patch_embed_taped(&mut tape, cfg, params, xv)?;
    Ok(TokenSequence {
        tokens: tape.value(e0).clone(),
        level: 0,
    })
}

fn msa_taped<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    block: &EncoderBlock<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let q = block.wq.forward(tape, &join(prefix, "wq"), x)?;
    let wk = tape.param(&join(prefix, "wk.w"), &block.wk);
    let k = tape.matmul(x, wk)?;
    let v = block.wv.forward(tape, &join(prefix, "wv"), x)?;
    let dh = cfg.embed_dim / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale);
        let attn = tape.softmax_rows(scaled)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    block.wo.forward(tape, &join(prefix, "wo"), cat)
}

/// One encoder block in the paper's two-residual form:
/// `e' = MSA(LN(e_prev)) + e_prev; e = MLP(LN(e')) + e'`.
pub fn encoder_block_taped<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    block: &EncoderBlock<T>,
    prefix: &str,
    e_prev: Var,
) -> Result<Var> {
    let n1 = block.ln1.forward(tape, &join(prefix, "ln1"), e_prev)?;
    let attn = msa_taped(tape, cfg, block, prefix, n1)?;
    let e_mid = tape.add(attn, e_prev)?;
    let n2 = block.ln2.forward(tape, &join(prefix, "ln2"), e_mid)?;
    let h = block.fc1.forward(tape, &join(prefix, "fc1"), n2)?;
    let g = tape.gelu(h);
    let m = block.fc2.forward(tape, &join(prefix, "fc2"), g)?;
    tape.add(m, e_mid)
}

/// Pure single-block step, checking the level contract.
pub fn encoder_block<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    k: usize,
    e_prev: &TokenSequence<T>,
) -> Result<TokenSequence<T>> {
    if k == 0 || k > cfg.num_blocks {
        return Err(Error::config(format!("block index {k} out of 1..={}", cfg.num_blocks)));
    }
    if e_prev.level != k - 1 {
        return Err(Error::shape(format!(
            "encoder_block {k} fed sequence of level {}",
            e_prev.level
        )));
    }
    let mut tape = Tape::with_trainable(&[]);
    let ev = tape.constant(e_prev.tokens.clone());
    let prefix = join(PARAM_PREFIX, &format!("block{}", k - 1));
    let out = encoder_block_taped(&mut tape, cfg, &params.blocks[k - 1], &prefix, ev)?;
    Ok(TokenSequence {
        tokens: tape.value(out).clone(),
        level: k,
    })
}

pub struct TapedForward {
    /// Softmax class probabilities, `1 x C`.
    pub y_b: Var,
    /// Patch-token representations r_k (`N x D`) for k = 1..K.
    pub taps: Vec<Var>,
    /// Full token matrices e_1..e_L.
    pub sequences: Vec<Var>,
}

/// Forward pass through all L blocks on an existing tape.
pub fn forward_taped<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: Var,
) -> Result<TapedForward> {
    let n = cfg.num_patches();
    let mut e = patch_embed_taped(tape, cfg, params, x)?;
    let mut taps = Vec::with_capacity(cfg.tap_levels);
    let mut sequences = Vec::with_capacity(cfg.num_blocks);
    for (i, block) in params.blocks.iter().enumerate() {
        let prefix = join(PARAM_PREFIX, &format!("block{i}"));
        e = encoder_block_taped(tape, cfg, block, &prefix, e)?;
        sequences.push(e);
        if i < cfg.tap_levels {
            taps.push(tape.slice_rows(e, 1, n)?);
        }
    }
    let cls = tape.slice_rows(e, 0, 1)?;
    let logits = params.head.forward(tape, &join(PARAM_PREFIX, "head"), cls)?;
    let y_b = tape.softmax_rows(logits)?;
    Ok(TapedForward { y_b, taps, sequences })
}

pub struct BackboneOutput<T> {
    /// Class probability vector of length C.
    pub y_b: Tensor<T>,
    /// r_1..r_K, each `N x D`.
    pub taps: Vec<Tensor<T>>,
}

/// Inference forward: class probabilities plus the K tap representations.
pub fn forward<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
) -> Result<BackboneOutput<T>> {
    check_image(cfg, x)?;
    let mut tape = Tape::with_trainable(&[]);
    let xv = tape.constant(x.clone());
    let fwd = forward_taped(&mut tape, cfg, params, xv)?;
    let y_b = tape.value(fwd.y_b).reshape(&[cfg.num_classes])?;
    let taps = fwd.taps.iter().map(|&v| tape.value(v).clone()).collect();
    Ok(BackboneOutput { y_b, taps })
}

/// Full token matrices e_1..e_L for one input.
pub fn token_sequences<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    check_image(cfg, x)?;
    let mut tape = Tape::with_trainable(&[]);
    let xv = tape.constant(x.clone());
    let fwd = forward_taped(&mut tape, cfg, params, xv)?;
    Ok(fwd.sequences.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Cross-entropy of the backbone prediction against a one-hot target.
pub fn loss_init<T: Scalar>(y_b: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::with_trainable(&[]);
    let c = y.len();
    let probs = tape.constant(y_b.reshape(&[1, c])?);
    let loss = cross_entropy_one_hot(&mut tape, probs, &y.reshape(&[1, c])?)?;
    Ok(tape.value(loss).data()[0])
}

/// Per-block Euclidean distance between the full token sequences of two
/// inputs: `d_k = || e_k(x) - e_k(x') ||_2` for k = 1..L.
pub fn representation_drift<T: Scalar>(
    cfg: &BackboneConfig,
    params: &BackboneParams<T>,
    x: &Tensor<T>,
    x_perturbed: &Tensor<T>,
) -> Result<Vec<T>> {
    let a = token_sequences(cfg, params, x)?;
    let b = token_sequences(cfg, params, x_perturbed)?;
    a.iter()
        .zip(b.iter())
        .map(|(ea, eb)| ea.l2_distance(eb))
        .collect()
}
