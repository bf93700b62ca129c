//! Vision-transformer backbone with a class token, resizable learned
//! position embeddings, mask-token substitution, and an MLP projection head.
//!
//! All images in one call share a size and are processed as a batch of
//! token sequences stacked row-wise: sequence `b` occupies rows
//! `b·(1+P) .. (b+1)·(1+P)`, class token first, patches in row-major grid
//! order.
//!
//! Parameter names:
//!
//! ```text
//! patch_embed.weight [p·p·C, D]   rows ordered (py, px, channel)
//! patch_embed.bias   [D]
//! cls_token, mask_token [D]
//! pos_embed.cls      [D]
//! pos_embed.grid     [B, B, D]    B = pe_base_resolution
//! blocks.{i}.norm1.{weight,bias}, blocks.{i}.attn.qkv.{weight,bias},
//! blocks.{i}.attn.proj.{weight,bias}, blocks.{i}.norm2.{weight,bias},
//! blocks.{i}.mlp.fc1.{weight,bias}, blocks.{i}.mlp.fc2.{weight,bias}
//! norm.{weight,bias}
//! head.mlp.{j}.{weight,bias}      j < proj_layers
//! head.last.{weight,bias}
//! ```
//!
//! Linear weights are stored `[in, out]`.

mod params;

pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::views::MaskPattern;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_layers: usize,
    pub proj_dim: usize,
    /// Head hidden width; `None` means `4 · proj_dim`.
    pub proj_hidden: Option<usize>,
    pub pe_base_resolution: usize,
    pub inference_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            proj_layers: 3,
            proj_dim: 256,
            proj_hidden: None,
            pe_base_resolution: 8,
            inference_layer: 4,
        }
    }
}

impl ModelConfig {
    pub fn head_hidden(&self) -> usize {
        self.proj_hidden.unwrap_or(4 * self.proj_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.channels == 0 || self.embed_dim == 0 {
            return bad("patch size, channels and width must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide width {}",
                self.heads, self.embed_dim
            ));
        }
        if self.mlp_ratio == 0 || self.proj_layers == 0 || self.proj_dim == 0 {
            return bad("mlp ratio, head layers and output dim must be positive".into());
        }
        if self.head_hidden() == 0 {
            return bad("head hidden width must be positive".into());
        }
        if self.pe_base_resolution < 2 {
            return bad("position-embedding grid must be at least 2x2".into());
        }
        if self.inference_layer > self.depth || (self.inference_layer == 0 && self.depth > 0) {
            return bad(format!(
                "inference layer {} outside 1..={}",
                self.inference_layer, self.depth
            ));
        }
        Ok(())
    }
}

/// Whether the projection head runs on patch tokens too.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadScope {
    ClassOnly,
    All,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    norm1: Linear,
    qkv: Linear,
    proj: Linear,
    norm2: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    shapes: Vec<(String, Vec<usize>)>,
    patch: Linear,
    cls_token: usize,
    mask_token: usize,
    pe_cls: usize,
    pe_grid: usize,
    blocks: Vec<BlockLayout>,
    norm: Linear,
    head_mlp: Vec<Linear>,
    head_last: Linear,
}

#[derive(Default)]
struct ShapeList(Vec<(String, Vec<usize>)>);

impl ShapeList {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.0.push((name, shape));
        self.0.len() - 1
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![inputs, outputs]),
            b: self.add(format!("{name}.bias"), vec![outputs]),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![width]),
            b: self.add(format!("{name}.bias"), vec![width]),
        }
    }
}

impl Layout {
    fn build(c: &ModelConfig) -> Self {
        let d = c.embed_dim;
        let mut s = ShapeList::default();
        let patch = s.linear("patch_embed", c.patch_size * c.patch_size * c.channels, d);
        let cls_token = s.add("cls_token".into(), vec![d]);
        let mask_token = s.add("mask_token".into(), vec![d]);
        let pe_cls = s.add("pos_embed.cls".into(), vec![d]);
        let b = c.pe_base_resolution;
        let pe_grid = s.add("pos_embed.grid".into(), vec![b, b, d]);
        let blocks = (0..c.depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                BlockLayout {
                    norm1: s.norm(&format!("{p}.norm1"), d),
                    qkv: s.linear(&format!("{p}.attn.qkv"), d, 3 * d),
                    proj: s.linear(&format!("{p}.attn.proj"), d, d),
                    norm2: s.norm(&format!("{p}.norm2"), d),
                    fc1: s.linear(&format!("{p}.mlp.fc1"), d, c.mlp_ratio * d),
                    fc2: s.linear(&format!("{p}.mlp.fc2"), c.mlp_ratio * d, d),
                }
            })
            .collect();
        let norm = s.norm("norm", d);
        let h = c.head_hidden();
        let head_mlp = (0..c.proj_layers)
            .map(|j| s.linear(&format!("head.mlp.{j}"), if j == 0 { d } else { h }, h))
            .collect();
        let head_last = s.linear("head.last", h, c.proj_dim);
        Self {
            shapes: s.0,
            patch,
            cls_token,
            mask_token,
            pe_cls,
            pe_grid,
            blocks,
            norm,
            head_mlp,
            head_last,
        }
    }
}

/// Parameters bound onto a tape, in store order.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Stacked token sequences. `tokens = embedded + pos`; the split is kept so
/// mask tokens can be substituted under the original position embedding.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub embedded: Var,
    pub pos: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len()).collect()
    }

    /// Patch rows of every sequence, sequence-major.
    pub fn patch_rows(&self) -> Vec<usize> {
        let (n, p) = (self.seq_len(), self.num_patches());
        (0..self.batch)
            .flat_map(|b| (0..p).map(move |j| b * n + 1 + j))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch × k]`.
    pub cls_logits: Var,
    /// `[batch·P × k]`, present with [`HeadScope::All`].
    pub patch_logits: Option<Var>,
    /// Full token activations after each block, `[batch·(1+P) × D]`.
    pub features_by_layer: Vec<Var>,
    /// Tokens after the final norm, the head's input.
    pub final_tokens: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: ModelConfig,
    layout: Layout,
}

impl Encoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.layout.shapes
    }

    /// Names exempt from weight decay: every rank-1 tensor plus the
    /// class and mask tokens.
    pub fn is_decay_exempt(&self, index: usize) -> bool {
        let (name, shape) = &self.layout.shapes[index];
        shape.len() == 1 || name == "cls_token" || name == "mask_token"
    }

    /// Truncated-normal weights, tokens and position embeddings; zero
    /// biases; unit norm gains. Head weights use std `1/sqrt(fan_in)` so a
    /// narrow head keeps its output scale (at width 2048 this is about
    /// `INIT_STD` anyway). Each tensor draws from its own named substream.
    pub fn init<T: Real>(&self, rng: &Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, shape) in &self.layout.shapes {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.starts_with("norm") || name.contains(".norm") {
                Tensor::ones(shape)
            } else {
                let std = if name.starts_with("head.") {
                    1.0 / (shape[0] as f64).sqrt()
                } else {
                    INIT_STD
                };
                let mut r = rng.substream(name);
                Tensor::from_fn(shape, |_| T::from_f64_lossy(r.truncated_normal(std)))
            };
            store.push(name.clone(), t);
        }
        store
    }

    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let ok = params.len() == self.layout.shapes.len()
            && params
                .iter()
                .zip(&self.layout.shapes)
                .all(|((n, t), (name, shape))| n == name && t.shape() == shape.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "parameter store does not match the model configuration",
            ))
        }
    }

    /// Places parameters on `tape`, as gradient leaves when `trainable`.
    pub fn bind<T: Real>(&self, tape: &Tape<T>, params: &ParamStore<T>, trainable: bool) -> Result<Bound> {
        self.check_params(params)?;
        Ok(Bound(
            params
                .tensors()
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        ))
    }

    fn grid_of(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        if shape.len() != 3 || shape[2] != self.config.channels {
            return Err(Error::InvalidShape {
                op: "patchify",
                shape: shape.to_vec(),
                reason: format!("expected [H × W × {}]", self.config.channels),
            });
        }
        if shape[0] % p != 0 || shape[1] % p != 0 {
            return Err(Error::InvalidShape {
                op: "patchify",
                shape: shape.to_vec(),
                reason: format!("extents not divisible by patch size {p}"),
            });
        }
        Ok((shape[0] / p, shape[1] / p))
    }

    /// Flattened patches, `[batch·P × p·p·C]`.
    fn patch_matrix<T: Real>(&self, images: &[Tensor<T>]) -> Result<(Tensor<T>, (usize, usize))> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("patchify: empty batch"))?;
        let grid = self.grid_of(first.shape())?;
        let (p, c) = (self.config.patch_size, self.config.channels);
        let w = first.shape()[1];
        let cols = p * p * c;
        let mut data = Vec::with_capacity(images.len() * grid.0 * grid.1 * cols);
        for img in images {
            if img.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "patchify",
                    lhs: first.shape().to_vec(),
                    rhs: img.shape().to_vec(),
                });
            }
            let src = img.data();
            for ty in 0..grid.0 {
                for tx in 0..grid.1 {
                    for py in 0..p {
                        let start = ((ty * p + py) * w + tx * p) * c;
                        data.extend_from_slice(&src[start..start + p * c]);
                    }
                }
            }
        }
        let rows = data.len() / cols;
        Ok((Tensor::new(vec![rows, cols], data)?, grid))
    }

    /// Embeds patches, prepends the class token and adds position
    /// embeddings resized to the token grid.
    pub fn patchify<T: Real>(&self, tape: &Tape<T>, bound: &Bound, images: &[Tensor<T>]) -> Result<TokenSequence> {
        let l = &self.layout;
        let d = self.config.embed_dim;
        let (patches, grid) = self.patch_matrix(images)?;
        let batch = images.len();
        let np = grid.0 * grid.1;
        let patches = tape.constant(patches);
        let emb = tape.linear(patches, bound.at(l.patch.w), bound.at(l.patch.b))?;
        let cls = tape.reshape(bound.at(l.cls_token), &[1, d])?;
        let stacked = tape.concat_rows(&[cls, emb])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..np).map(move |j| 1 + b * np + j)))
            .collect();
        let embedded = tape.gather_rows(stacked, &order)?;

        let resized = tape.bicubic_resize_2d(bound.at(l.pe_grid), grid)?;
        let pe_patch = tape.reshape(resized, &[np, d])?;
        let pe_cls = tape.reshape(bound.at(l.pe_cls), &[1, d])?;
        let pe = tape.concat_rows(&[pe_cls, pe_patch])?;
        let tile: Vec<usize> = (0..batch).flat_map(|_| 0..1 + np).collect();
        let pos = tape.gather_rows(pe, &tile)?;
        let tokens = tape.add(embedded, pos)?;
        Ok(TokenSequence {
            tokens,
            embedded,
            pos,
            batch,
            grid,
        })
    }

    /// Replaces the embedded patch at every masked position with the mask
    /// token; position embeddings are kept. One mask per sequence.
    pub fn apply_mask_tokens<T: Real>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
        masks: &[MaskPattern],
    ) -> Result<TokenSequence> {
        let np = seq.num_patches();
        if masks.len() != seq.batch || masks.iter().any(|m| m.len() != np) {
            return Err(Error::invalid(format!(
                "apply_mask_tokens: {} masks for {} sequences of {np} patches",
                masks.len(),
                seq.batch
            )));
        }
        let flags: Vec<bool> = masks
            .iter()
            .flat_map(|m| std::iter::once(false).chain(m.cells.iter().copied()))
            .collect();
        let embedded = tape.replace_rows(seq.embedded, bound.at(self.layout.mask_token), &flags)?;
        let tokens = tape.add(embedded, seq.pos)?;
        Ok(TokenSequence {
            tokens,
            embedded,
            ..*seq
        })
    }

    /// Runs the first `layers` pre-norm blocks; returns the activations
    /// after each.
    pub fn blocks<T: Real>(&self, tape: &Tape<T>, bound: &Bound, seq: &TokenSequence, layers: usize) -> Result<Vec<Var>> {
        let mut x = seq.tokens;
        let mut out = Vec::with_capacity(layers);
        for (i, b) in self.layout.blocks.iter().take(layers).enumerate() {
            let h = tape.layer_norm(x, bound.at(b.norm1.w), bound.at(b.norm1.b))?;
            let qkv = tape.linear(h, bound.at(b.qkv.w), bound.at(b.qkv.b))?;
            let a = tape.attention(qkv, seq.batch, self.config.heads)?;
            let a = tape.linear(a, bound.at(b.proj.w), bound.at(b.proj.b))?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bound.at(b.norm2.w), bound.at(b.norm2.b))?;
            let h = tape.linear(h, bound.at(b.fc1.w), bound.at(b.fc1.b))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, bound.at(b.fc2.w), bound.at(b.fc2.b))?;
            x = tape.add(x, h)?;
            if !tape.value(x).all_finite() {
                return Err(Error::NonFinite(format!("encoder block {i} activations")));
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Projection head on `[rows × D]`: every MLP layer is linear + gelu,
    /// then a final linear layer to `k`.
    pub fn head<T: Real>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for lin in &self.layout.head_mlp {
            h = tape.linear(h, bound.at(lin.w), bound.at(lin.b))?;
            h = tape.gelu(h);
        }
        let last = self.layout.head_last;
        tape.linear(h, bound.at(last.w), bound.at(last.b))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
        scope: HeadScope,
    ) -> Result<EncoderOutput> {
        let features_by_layer = self.blocks(tape, bound, seq, self.config.depth)?;
        let x = features_by_layer.last().copied().unwrap_or(seq.tokens);
        let n = &self.layout.norm;
        let x = tape.layer_norm(x, bound.at(n.w), bound.at(n.b))?;
        let cls = tape.gather_rows(x, &seq.cls_rows())?;
        let cls_logits = self.head(tape, bound, cls)?;
        let patch_logits = match scope {
            HeadScope::ClassOnly => None,
            HeadScope::All => {
                let patches = tape.gather_rows(x, &seq.patch_rows())?;
                Some(self.head(tape, bound, patches)?)
            }
        };
        Ok(EncoderOutput {
            cls_logits,
            patch_logits,
            features_by_layer,
            final_tokens: x,
        })
    }

    /// Unit-norm patch activations after block `inference_layer`, as an
    /// `[h × w × D]` grid. The head is not used.
    pub fn extract_inference_features<T: Real>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, params, false)?;
        let seq = self.patchify(&tape, &bound, std::slice::from_ref(image))?;
        let layers = self.blocks(&tape, &bound, &seq, self.config.inference_layer)?;
        let x = layers.last().copied().unwrap_or(seq.tokens);
        let patches = tape.gather_rows(x, &seq.patch_rows())?;
        let unit = tape.l2_normalize_rows(patches)?;
        let (h, w) = seq.grid;
        let grid = tape.value(unit).reshape(&[h, w, self.config.embed_dim]);
        grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            proj_layers: 2,
            proj_dim: 8,
            proj_hidden: Some(12),
            pe_base_resolution: 2,
            inference_layer: 1,
            ..ModelConfig::default()
        }
    }

    fn image(size: usize, seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        Tensor::from_fn(&[size, size, 3], |_| r.uniform())
    }

    #[test]
    fn config_checks() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_heads = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let bad_layer = ModelConfig { inference_layer: 7, ..ModelConfig::default() };
        assert!(bad_layer.validate().is_err());
        let zero_depth = ModelConfig { depth: 0, inference_layer: 0, ..ModelConfig::default() };
        assert!(zero_depth.validate().is_ok());
    }

    #[test]
    fn token_counts() {
        let enc = Encoder::new(ModelConfig::default()).unwrap();
        let params = enc.init::<f32>(&Rng::new(0));
        let tape = Tape::new();
        let b = enc.bind(&tape, &params, false).unwrap();
        let img = Tensor::<f32>::zeros(&[64, 64, 3]);
        let seq = enc.patchify(&tape, &b, &[img]).unwrap();
        assert_eq!((seq.num_patches(), tape.shape(seq.tokens)), (64, vec![65, 64]));
        let small = Tensor::<f32>::zeros(&[32, 32, 3]);
        let seq = enc.patchify(&tape, &b, &[small.clone(), small]).unwrap();
        assert_eq!(seq.grid, (4, 4));
        assert_eq!(tape.shape(seq.tokens), vec![34, 64]);
        assert!(enc.patchify(&tape, &b, &[Tensor::zeros(&[30, 32, 3])]).is_err());
    }

    #[test]
    fn default_config_grid_is_28_by_28() {
        let enc = Encoder::new(ModelConfig::default()).unwrap();
        assert_eq!(enc.grid_of(&[224, 224, 3]).unwrap(), (28, 28));
    }

    #[test]
    fn mask_tokens_replace_only_masked_rows() {
        let enc = Encoder::new(micro()).unwrap();
        let params = enc.init::<f64>(&Rng::new(1));
        let tape = Tape::new();
        let b = enc.bind(&tape, &params, false).unwrap();
        let seq = enc.patchify(&tape, &b, &[image(8, 2)]).unwrap();
        let none = MaskPattern::from_cells((4, 4), vec![false; 16]).unwrap();
        let same = enc.apply_mask_tokens(&tape, &b, &seq, &[none]).unwrap();
        assert_eq!(*tape.value(same.tokens), *tape.value(seq.tokens));

        let mut cells = vec![false; 16];
        for i in [0, 5, 6, 15] {
            cells[i] = true;
        }
        let m = MaskPattern::from_cells((4, 4), cells.clone()).unwrap();
        let masked = enc.apply_mask_tokens(&tape, &b, &seq, &[m]).unwrap();
        let (orig, new, pos) = (tape.value(seq.tokens), tape.value(masked.tokens), tape.value(seq.pos));
        let mask_token = params.get("mask_token").unwrap();
        let mut differing = 0;
        for r in 0..17 {
            if orig.row(r) != new.row(r) {
                differing += 1;
                assert!(r > 0 && cells[r - 1]);
                for c in 0..8 {
                    assert_eq!(new.row(r)[c], mask_token.data()[c] + pos.row(r)[c]);
                }
            }
        }
        assert_eq!(differing, 4);
        assert!(enc
            .apply_mask_tokens(&tape, &b, &seq, &[MaskPattern::from_cells((2, 2), vec![true; 4]).unwrap()])
            .is_err());
    }

    #[test]
    fn depth_zero_masking_leaves_unmasked_rows_bitwise() {
        let cfg = ModelConfig { depth: 0, inference_layer: 0, ..micro() };
        let enc = Encoder::new(cfg).unwrap();
        let params = enc.init::<f64>(&Rng::new(3));
        let tape = Tape::new();
        let b = enc.bind(&tape, &params, false).unwrap();
        let seq = enc.patchify(&tape, &b, &[image(8, 4)]).unwrap();
        let plain = enc.forward(&tape, &b, &seq, HeadScope::All).unwrap();
        let mut cells = vec![false; 16];
        cells[3] = true;
        cells[9] = true;
        let m = MaskPattern::from_cells((4, 4), cells.clone()).unwrap();
        let mseq = enc.apply_mask_tokens(&tape, &b, &seq, &[m]).unwrap();
        let masked = enc.forward(&tape, &b, &mseq, HeadScope::All).unwrap();
        let (p, q) = (
            tape.value(plain.patch_logits.unwrap()),
            tape.value(masked.patch_logits.unwrap()),
        );
        for j in 0..16 {
            assert_eq!(p.row(j) == q.row(j), !cells[j]);
        }
        assert!(plain.features_by_layer.is_empty());
    }

    #[test]
    fn permuting_patches_permutes_outputs() {
        let enc = Encoder::new(micro()).unwrap();
        let params = enc.init::<f64>(&Rng::new(5));
        let tape = Tape::new();
        let b = enc.bind(&tape, &params, false).unwrap();
        let seq = enc.patchify(&tape, &b, &[image(8, 6)]).unwrap();
        let out = enc.forward(&tape, &b, &seq, HeadScope::All).unwrap();
        let mut order: Vec<usize> = (0..17).collect();
        order.swap(2, 11);
        let permuted = TokenSequence {
            tokens: tape.gather_rows(seq.tokens, &order).unwrap(),
            ..seq
        };
        let out2 = enc.forward(&tape, &b, &permuted, HeadScope::All).unwrap();
        let (c1, c2) = (tape.value(out.cls_logits), tape.value(out2.cls_logits));
        assert!(c1.max_abs_diff(&c2) < 1e-12);
        let (p1, p2) = (tape.value(out.patch_logits.unwrap()), tape.value(out2.patch_logits.unwrap()));
        for j in 0..16 {
            let k = match j {
                1 => 10,
                10 => 1,
                _ => j,
            };
            let diff = p1.row(j).iter().zip(p2.row(k)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn inference_features_are_unit_grid() {
        let enc = Encoder::new(micro()).unwrap();
        let params = enc.init::<f64>(&Rng::new(7));
        let img = image(8, 8);
        let f = enc.extract_inference_features(&params, &img).unwrap();
        assert_eq!(f.shape(), &[4, 4, 8]);
        for r in 0..16 {
            let n: f64 = f.data()[r * 8..(r + 1) * 8].iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(f, enc.extract_inference_features(&params, &img).unwrap());
    }

    #[test]
    fn last_layer_features_match_forward() {
        let cfg = ModelConfig { inference_layer: 2, ..micro() };
        let enc = Encoder::new(cfg).unwrap();
        let params = enc.init::<f64>(&Rng::new(9));
        let img = image(8, 10);
        let f = enc.extract_inference_features(&params, &img).unwrap();
        let tape = Tape::new();
        let b = enc.bind(&tape, &params, false).unwrap();
        let seq = enc.patchify(&tape, &b, &[img]).unwrap();
        let out = enc.forward(&tape, &b, &seq, HeadScope::ClassOnly).unwrap();
        let last = tape.value(*out.features_by_layer.last().unwrap()).clone();
        for j in 0..16 {
            let row = last.row(1 + j);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..8 {
                assert!((row[c] / norm - f.data()[j * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let enc = Encoder::new(micro()).unwrap();
        let a = enc.init::<f32>(&Rng::new(1));
        assert_eq!(a, enc.init::<f32>(&Rng::new(1)));
        assert_ne!(a, enc.init::<f32>(&Rng::new(2)));
        assert_eq!(a.get("blocks.1.norm2.weight").unwrap().data(), &[1.0; 8]);
        assert_eq!(a.get("head.last.weight").unwrap().shape(), &[12, 8]);
        assert!(a.get("patch_embed.weight").unwrap().data().iter().all(|v| v.abs() <= 0.04));
        let i = a.index_of("cls_token").unwrap();
        assert!(enc.is_decay_exempt(i));
        assert!(!enc.is_decay_exempt(a.index_of("blocks.0.attn.qkv.weight").unwrap()));
    }
}
