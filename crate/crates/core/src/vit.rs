//! Patch embedding and pre-norm transformer stacks for the context encoder,
//! the target encoder and the predictor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{xavier, Bound, ParamSet};
use crate::tape::{GeluKind, Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub gelu: GeluKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub learned_pos: bool,
}

impl EncoderConfig {
    /// Desk-scale default: 32×32 single-channel images, 4×4 grid of 8×8 patches.
    pub fn tiny() -> Self {
        Self {
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
            patch_size: 8,
            image_height: 32,
            image_width: 32,
            channels: 1,
            gelu: GeluKind::Exact,
            learned_pos: false,
        }
    }

    pub fn vit_small16() -> Self {
        Self {
            depth: 12,
            heads: 6,
            embed_dim: 384,
            mlp_ratio: 4,
            patch_size: 16,
            image_height: 224,
            image_width: 224,
            channels: 3,
            gelu: GeluKind::Exact,
            learned_pos: false,
        }
    }

    pub fn vit_base16() -> Self {
        Self {
            depth: 12,
            heads: 12,
            embed_dim: 768,
            ..Self::vit_small16()
        }
    }

    pub fn vit_large16() -> Self {
        Self {
            depth: 24,
            heads: 16,
            embed_dim: 1024,
            ..Self::vit_small16()
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.heads,
            self.embed_dim,
            self.mlp_ratio,
            self.patch_size,
            self.image_height,
            self.image_width,
            self.channels,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config("embed_dim must be divisible by 4 for 2-D positions".into()));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PredictorConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
}

impl PredictorConfig {
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            embed_dim: 32,
            heads: 4,
        }
    }

    /// Width 384 and depth 6, used with ViT-S/16 and ViT-B/16 encoders.
    pub fn paper_base(encoder_heads: usize) -> Self {
        Self {
            depth: 6,
            embed_dim: 384,
            heads: encoder_heads,
        }
    }

    /// Width 384 and depth 12, used with ViT-L/16 encoders.
    pub fn paper_large(encoder_heads: usize) -> Self {
        Self {
            depth: 12,
            embed_dim: 384,
            heads: encoder_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config("predictor extents must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 || self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "predictor embed_dim {} must be divisible by heads {} and by 4",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// An image cut into a grid of patch embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    /// `[N × D]`, row `r·cols + c` holds patch `(r, c)`.
    pub embeddings: Tensor,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Cuts a `[C×H×W]` image into `[N × C·P·P]` pixel rows. Within a row the
/// order is channel, then patch row, then patch column.
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Dimension {
                op: "patchify",
                lhs: s.to_vec(),
                rhs: vec![cfg.channels, cfg.image_height, cfg.image_width],
            })
        }
    };
    let p = cfg.patch_size;
    if c != cfg.channels || h % p != 0 || w % p != 0 || h != cfg.image_height || w != cfg.image_width {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: vec![c, h, w],
            rhs: vec![cfg.channels, cfg.image_height, cfg.image_width],
        });
    }
    let (rows, cols) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                for y in 0..p {
                    let start = ch * h * w + (r * p + y) * w + q * p;
                    out.extend_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, c * p * p], out)
}

/// Fixed 2-D sine-cosine table `[rows·cols × dim]`: the first half of each
/// row encodes the grid row, the second half the grid column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "positional dim must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / libm::pow(10000.0, i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for coord in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| libm::sin(coord * w)));
                data.extend(omega.iter().map(|w| libm::cos(coord * w)));
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("positive extents")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn init(set: &mut ParamSet, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = set.push(format!("{name}.weight"), xavier(rng, fan_in, fan_out), true);
        let bias = set.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn init(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = set.push(format!("{name}.weight"), Tensor::full(&[dim], 1.0), false);
        let beta = set.push(format!("{name}.bias"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub gelu: GeluKind,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        set: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        gelu: GeluKind,
    ) -> Self {
        Self {
            norm1: Norm::init(set, &format!("{name}.norm1"), dim),
            qkv: Linear::init(set, rng, &format!("{name}.attn.qkv"), dim, 3 * dim),
            proj: Linear::init(set, rng, &format!("{name}.attn.proj"), dim, dim),
            norm2: Norm::init(set, &format!("{name}.norm2"), dim),
            fc1: Linear::init(set, rng, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim),
            fc2: Linear::init(set, rng, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim),
            heads,
            gelu,
        }
    }

    /// Returns the block output and the per-head attention matrices.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let dim = tape.value(x).dims2()?.1;
        let dh = dim / self.heads;
        let h = self.norm1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.slice_cols(qkv, head * dh, (head + 1) * dh)?;
            let k = tape.slice_cols(qkv, dim + head * dh, dim + (head + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * dim + head * dh, 2 * dim + (head + 1) * dh)?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, scale)?;
            let a = tape.softmax_rows(logits)?;
            outs.push(tape.matmul(a, v)?);
            attn.push(a);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let y = self.proj.forward(tape, p, merged)?;
        let x = tape.add(x, y)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h, self.gelu)?;
        let h = self.fc2.forward(tape, p, h)?;
        Ok((tape.add(x, h)?, attn))
    }
}

/// Output of an encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[n × D]` representations of the encoded patches.
    pub tokens: Var,
    /// Attention matrices per block, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Parameter layout of one ViT encoder inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos: Option<usize>,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    fixed_pos: Tensor,
}

impl Encoder {
    pub fn init(config: &EncoderConfig, set: &mut ParamSet, rng: &mut Rng, prefix: &str) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let fixed_pos = sincos_2d(config.grid_rows(), config.grid_cols(), d);
        let patch_embed = Linear::init(set, rng, &format!("{prefix}.patch_embed"), config.patch_dim(), d);
        let pos = config
            .learned_pos
            .then(|| set.push(format!("{prefix}.pos_embed"), fixed_pos.clone(), false));
        let blocks = (0..config.depth)
            .map(|i| {
                Block::init(
                    set,
                    rng,
                    &format!("{prefix}.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    config.gelu,
                )
            })
            .collect();
        let norm = Norm::init(set, &format!("{prefix}.norm"), d);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos,
            blocks,
            norm,
            fixed_pos,
        })
    }

    /// Patch embeddings plus positions for the whole grid, `[N × D]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, pixels: Var) -> Result<Var> {
        let x = self.patch_embed.forward(tape, p, pixels)?;
        let pos = match self.pos {
            Some(i) => p.var(i),
            None => tape.constant(self.fixed_pos.clone()),
        };
        tape.add(x, pos)
    }

    /// Runs the transformer over already-embedded tokens.
    pub fn encode_tokens(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Encoded> {
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(tape, p, x)?;
            x = y;
            attention.push(a);
        }
        let tokens = self.norm.forward(tape, p, x)?;
        Ok(Encoded { tokens, attention })
    }

    /// Encodes the patches listed in `subset` (all patches when `None`).
    /// Positions are attached before the subset is taken.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, pixels: Var, subset: Option<&[usize]>) -> Result<Encoded> {
        let x = self.embed(tape, p, pixels)?;
        let x = match subset {
            Some([]) => return Err(Error::Empty("encode")),
            Some(idx) => tape.gather_rows(x, idx)?,
            None => x,
        };
        self.encode_tokens(tape, p, x)
    }

    /// Embeds an image without recording gradients.
    pub fn patchify(&self, set: &ParamSet, image: &Tensor) -> Result<PatchGrid> {
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let pixels = tape.constant(extract_patches(image, &self.config)?);
        let e = self.embed(&mut tape, &p, pixels)?;
        Ok(PatchGrid {
            rows: self.config.grid_rows(),
            cols: self.config.grid_cols(),
            embeddings: tape.value(e).clone(),
        })
    }
}

/// What the predictor emits at mask-token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorHead {
    /// Back to the encoder width `D`.
    Latent,
    /// Per-patch pixels, for the pixel-reconstruction baseline.
    Pixels,
}

/// Parameter layout of the narrow predictor transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub in_proj: Linear,
    pub mask_token: usize,
    pub pos: Option<usize>,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub out_proj: Linear,
    pub pixel_head: Linear,
    fixed_pos: Tensor,
}

impl Predictor {
    pub fn init(
        config: &PredictorConfig,
        encoder: &EncoderConfig,
        set: &mut ParamSet,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let dp = config.embed_dim;
        let fixed_pos = sincos_2d(encoder.grid_rows(), encoder.grid_cols(), dp);
        let in_proj = Linear::init(set, rng, &format!("{prefix}.embed"), encoder.embed_dim, dp);
        let mask_token = set.push(
            format!("{prefix}.mask_token"),
            crate::params::normal(rng, &[1, dp], 0.02),
            false,
        );
        let pos = encoder
            .learned_pos
            .then(|| set.push(format!("{prefix}.pos_embed"), fixed_pos.clone(), false));
        let blocks = (0..config.depth)
            .map(|i| {
                Block::init(
                    set,
                    rng,
                    &format!("{prefix}.blocks.{i}"),
                    dp,
                    config.heads,
                    encoder.mlp_ratio,
                    encoder.gelu,
                )
            })
            .collect();
        let norm = Norm::init(set, &format!("{prefix}.norm"), dp);
        let out_proj = Linear::init(set, rng, &format!("{prefix}.proj"), dp, encoder.embed_dim);
        let pixel_head = Linear::init(set, rng, &format!("{prefix}.pixel_head"), dp, encoder.patch_dim());
        Ok(Self {
            config: config.clone(),
            in_proj,
            mask_token,
            pos,
            blocks,
            norm,
            out_proj,
            pixel_head,
            fixed_pos,
        })
    }

    fn positions(&self, tape: &mut Tape, p: &Bound, idx: &[usize]) -> Result<Var> {
        match self.pos {
            Some(i) => tape.gather_rows(p.var(i), idx),
            None => {
                let rows = self.fixed_pos.gather_rows(idx)?;
                Ok(tape.constant(rows))
            }
        }
    }

    /// Predicts representations at `mask_positions` from the context tokens
    /// (`[n×D]` with their grid positions) and/or an extra summary token
    /// (`[1×D]`, no position). Returns one row per mask position.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        context: Option<(Var, &[usize])>,
        summary: Option<Var>,
        mask_positions: &[usize],
        head: PredictorHead,
    ) -> Result<Var> {
        if mask_positions.is_empty() {
            return Err(Error::Empty("predict: no mask tokens"));
        }
        let mut seq = Vec::with_capacity(3);
        if let Some((tokens, pos)) = context {
            let z = self.in_proj.forward(tape, p, tokens)?;
            let pe = self.positions(tape, p, pos)?;
            seq.push(tape.add(z, pe)?);
        }
        if let Some(s) = summary {
            seq.push(self.in_proj.forward(tape, p, s)?);
        }
        if seq.is_empty() {
            return Err(Error::Empty("predict: no context"));
        }
        let lead: usize = seq.iter().map(|v| tape.value(*v).dims2().map(|d| d.0).unwrap_or(0)).sum();
        let m = mask_positions.len();
        let tokens = tape.gather_rows(p.var(self.mask_token), &vec![0; m])?;
        let pe = self.positions(tape, p, mask_positions)?;
        seq.push(tape.add(tokens, pe)?);
        let mut x = tape.concat_rows(&seq)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x)?.0;
        }
        let x = self.norm.forward(tape, p, x)?;
        let idx: Vec<usize> = (lead..lead + m).collect();
        let x = tape.gather_rows(x, &idx)?;
        match head {
            PredictorHead::Latent => self.out_proj.forward(tape, p, x),
            PredictorHead::Pixels => self.pixel_head.forward(tape, p, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(7)
    }

    #[test]
    fn grid_arithmetic() {
        let mut cfg = EncoderConfig::tiny();
        cfg.channels = 3;
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!((cfg.grid_rows(), cfg.grid_cols()), (4, 4));
        assert_eq!(EncoderConfig::vit_base16().num_patches(), 196);
    }

    #[test]
    fn patchify_shapes_and_errors() {
        let mut cfg = EncoderConfig::tiny();
        cfg.channels = 3;
        let mut set = ParamSet::new();
        let enc = Encoder::init(&cfg, &mut set, &mut rng(), "enc").unwrap();
        let img = Tensor::zeros(&[3, 32, 32]);
        let grid = enc.patchify(&set, &img).unwrap();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid.embeddings.shape(), &[16, 64]);
        assert!(enc.patchify(&set, &Tensor::zeros(&[3, 30, 32])).is_err());

        let mut bad = cfg.clone();
        bad.image_width = 36;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_image_embeds_to_positions() {
        let cfg = EncoderConfig::tiny();
        let mut set = ParamSet::new();
        let enc = Encoder::init(&cfg, &mut set, &mut rng(), "enc").unwrap();
        let grid = enc.patchify(&set, &Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(grid.embeddings, sincos_2d(4, 4, 64));
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(grid.embeddings.row(i), grid.embeddings.row(j));
            }
        }
    }

    #[test]
    fn patch_pixel_order() {
        let mut cfg = EncoderConfig::tiny();
        cfg.image_height = 4;
        cfg.image_width = 4;
        cfg.patch_size = 2;
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn depth_zero_encoder_is_identity_before_final_norm() {
        let mut cfg = EncoderConfig::tiny();
        cfg.depth = 0;
        let mut set = ParamSet::new();
        let enc = Encoder::init(&cfg, &mut set, &mut rng(), "enc").unwrap();
        let img = crate::params::normal(&mut rng(), &[1, 32, 32], 1.0);
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let pixels = tape.constant(extract_patches(&img, &cfg).unwrap());
        let embedded = enc.embed(&mut tape, &p, pixels).unwrap();
        let out = enc.encode_tokens(&mut tape, &p, embedded).unwrap();
        let expect = tape.value(embedded).layernorm(&[1.0; 64], &[0.0; 64], LN_EPS).unwrap();
        assert_eq!(tape.value(out.tokens), &expect);
        assert!(out.attention.is_empty());
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        let cfg = EncoderConfig::tiny();
        let mut set = ParamSet::new();
        let enc = Encoder::init(&cfg, &mut set, &mut rng(), "enc").unwrap();
        for b in &enc.blocks {
            let (pw, fw) = (b.proj.weight, b.fc2.weight);
            let shape_p = set.get(pw).value.shape().to_vec();
            let shape_f = set.get(fw).value.shape().to_vec();
            set.get_mut(pw).value = Tensor::zeros(&shape_p);
            set.get_mut(fw).value = Tensor::zeros(&shape_f);
        }
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let x = tape.constant(crate::params::normal(&mut rng(), &[5, 64], 1.0));
        let mut y = x;
        for b in &enc.blocks {
            y = b.forward(&mut tape, &p, y).unwrap().0;
        }
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = EncoderConfig::tiny();
        let mut set = ParamSet::new();
        let enc = Encoder::init(&cfg, &mut set, &mut rng(), "enc").unwrap();
        let img = crate::params::normal(&mut rng(), &[1, 32, 32], 1.0);
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let pixels = tape.constant(extract_patches(&img, &cfg).unwrap());
        let out = enc.encode(&mut tape, &p, pixels, None).unwrap();
        assert_eq!(tape.value(out.tokens).shape(), &[16, 64]);
        assert!(tape.value(out.tokens).all_finite());
        for layer in &out.attention {
            assert_eq!(layer.len(), 4);
            for a in layer {
                for r in 0..16 {
                    let s: f64 = tape.value(*a).row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(enc.encode(&mut tape, &p, pixels, Some(&[])).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = EncoderConfig::tiny();
        let mut set = ParamSet::new();
        let enc = Encoder::init(&cfg, &mut set, &mut rng(), "enc").unwrap();
        let img = crate::params::normal(&mut rng(), &[1, 32, 32], 1.0);
        let subset = [3usize, 9, 0, 14];
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<usize> = perm.iter().map(|&i| subset[i]).collect();
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let pixels = tape.constant(extract_patches(&img, &cfg).unwrap());
        let a = enc.encode(&mut tape, &p, pixels, Some(&subset)).unwrap().tokens;
        let b = enc.encode(&mut tape, &p, pixels, Some(&permuted)).unwrap().tokens;
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in tape.value(b).row(k).iter().zip(tape.value(a).row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn predictor_fixture() -> (Encoder, Predictor, ParamSet, ParamSet) {
        let cfg = EncoderConfig::tiny();
        let mut enc_set = ParamSet::new();
        let mut pred_set = ParamSet::new();
        let mut r = rng();
        let enc = Encoder::init(&cfg, &mut enc_set, &mut r, "enc").unwrap();
        let pred = Predictor::init(&PredictorConfig::tiny(), &cfg, &mut pred_set, &mut r, "pred").unwrap();
        (enc, pred, enc_set, pred_set)
    }

    #[test]
    fn predictor_shapes_and_duplicates() {
        let (_, pred, _, set) = predictor_fixture();
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let ctx = tape.constant(crate::params::normal(&mut rng(), &[3, 64], 1.0));
        let out = pred
            .forward(&mut tape, &p, Some((ctx, &[0, 1, 2])), None, &[5, 6, 9, 10, 11], PredictorHead::Latent)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 64]);
        let out = pred
            .forward(&mut tape, &p, Some((ctx, &[0, 1, 2])), None, &[7, 7], PredictorHead::Latent)
            .unwrap();
        assert_eq!(tape.value(out).row(0), tape.value(out).row(1));
        assert!(pred
            .forward(&mut tape, &p, Some((ctx, &[0, 1, 2])), None, &[], PredictorHead::Latent)
            .is_err());
        let summary = tape.constant(Tensor::full(&[1, 64], 0.5));
        let px = pred
            .forward(&mut tape, &p, None, Some(summary), &[4], PredictorHead::Pixels)
            .unwrap();
        assert_eq!(tape.value(px).shape(), &[1, 64]);
    }

    #[test]
    fn predictor_depends_on_mask_position() {
        let (_, pred, _, set) = predictor_fixture();
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let ctx = tape.constant(crate::params::normal(&mut rng(), &[3, 64], 1.0));
        let a = pred
            .forward(&mut tape, &p, Some((ctx, &[0, 1, 2])), None, &[5], PredictorHead::Latent)
            .unwrap();
        let b = pred
            .forward(&mut tape, &p, Some((ctx, &[0, 1, 2])), None, &[15], PredictorHead::Latent)
            .unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }
}
