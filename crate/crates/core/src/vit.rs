//! A minimal pre-norm Vision Transformer.
//!
//! Images are cut into `P x P` patches, projected to `d` dimensions, prefixed
//! with a learned [CLS] token and given learned positional embeddings. Each
//! block applies `x + attn(norm1(x))` then `x + mlp(norm2(x))`. When a
//! [`RefinePlan`] names a block, the token sequence is refined right after
//! that block's output.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::refine::{self, RefinePlan, TokenScores};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 12 blocks of width 64 over 32x32 grayscale images
    /// with 4x4 patches (64 tokens).
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            num_layers: 12,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return Err(Error::Config("empty image dimensions".into()));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "num_layers, num_classes and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of image tokens `N = HW / P²`.
    pub fn num_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Flattened patch length `P²C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Splits an `[H, W, C]` image into `[N, P²C]` patch rows.
///
/// Patches are ordered row-major over the patch grid; within a patch values
/// are row-major over pixels with channels last.
pub fn patchify<F: Element>(image: &Tensor<F>, config: &ModelConfig) -> Result<Tensor<F>> {
    let (h, w, c) = (config.image_height, config.image_width, config.channels);
    if image.shape() != [h, w, c] {
        return Err(Error::Input(format!(
            "image shape {:?} does not match config [{h}, {w}, {c}]",
            image.shape()
        )));
    }
    let mut out = Vec::with_capacity(image.numel());
    patchify_into(image.data(), config, &mut out);
    Tensor::new(vec![config.num_tokens(), config.patch_dim()], out)
}

fn patchify_into<F: Copy>(pixels: &[F], config: &ModelConfig, out: &mut Vec<F>) {
    let (w, c, p) = (config.image_width, config.channels, config.patch_size);
    let grid_h = config.image_height / p;
    let grid_w = w / p;
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for py in 0..p {
                let row = (gy * p + py) * w + gx * p;
                out.extend_from_slice(&pixels[row * c..(row + p) * c]);
            }
        }
    }
}

/// Where a token of the current sequence came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenOrigin {
    Patch(usize),
    /// A merged token and the original patches folded into it.
    Merged(Vec<usize>),
}

impl TokenOrigin {
    fn patches(&self) -> Vec<usize> {
        match self {
            TokenOrigin::Patch(i) => vec![*i],
            TokenOrigin::Merged(v) => v.clone(),
        }
    }
}

/// Token bookkeeping at one refining layer for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub layer: usize,
    pub image: usize,
    /// Original patch indices still present as individual tokens.
    pub kept_patch_indices: Vec<usize>,
    /// Original patch indices folded into the new merged token.
    pub merged_from_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Keep full per-head attention matrices in the trace.
    pub record_attention: bool,
}

/// Everything observed during one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    /// Per layer `[B, heads, T, T]` attention (only with `record_attention`).
    pub attention: Vec<Tensor<F>>,
    /// Per layer, per image: the head-averaged [CLS] attention row over all
    /// `T` tokens, [CLS] itself first. Recorded before any refinement.
    pub cls_attention: Vec<Vec<Vec<f64>>>,
    /// Tokens (including [CLS]) entering each layer.
    pub token_counts: Vec<usize>,
    pub refinements: Vec<RefineRecord>,
    /// `[B, d]` final-norm [CLS] representation.
    pub cls_repr: Var,
    /// `[B, K]` class scores.
    pub logits: Var,
}

/// Parameter names of block `i`.
pub struct BlockNames {
    pub norm1_gain: String,
    pub norm1_bias: String,
    pub q: (String, String),
    pub k: (String, String),
    pub v: (String, String),
    pub o: (String, String),
    pub norm2_gain: String,
    pub norm2_bias: String,
    pub fc1: (String, String),
    pub fc2: (String, String),
}

impl BlockNames {
    pub fn new(i: usize) -> Self {
        let lin = |group: &str, name: &str| {
            (
                format!("block{i}.{group}.{name}.weight"),
                format!("block{i}.{group}.{name}.bias"),
            )
        };
        Self {
            norm1_gain: format!("block{i}.norm1.gain"),
            norm1_bias: format!("block{i}.norm1.bias"),
            q: lin("attn", "q"),
            k: lin("attn", "k"),
            v: lin("attn", "v"),
            o: lin("attn", "o"),
            norm2_gain: format!("block{i}.norm2.gain"),
            norm2_bias: format!("block{i}.norm2.bias"),
            fc1: lin("mlp", "fc1"),
            fc2: lin("mlp", "fc2"),
        }
    }
}

/// Vision Transformer parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<F> {
    config: ModelConfig,
    params: ParamSet<F>,
}

fn trunc_normal<F: Element, R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor<F> {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break F::of(v);
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

impl<F: Element> ViTModel<F> {
    /// Fresh model with seeded truncated-normal weights and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "init");
        let d = config.embed_dim;
        let n = config.num_tokens();
        let hid = config.mlp_hidden();
        let mut ps = ParamSet::new();
        ps.push(
            "patch.weight",
            None,
            trunc_normal(&mut r, vec![d, config.patch_dim()]),
        )?;
        ps.push("patch.bias", None, Tensor::zeros(vec![d]))?;
        ps.push("cls", None, trunc_normal(&mut r, vec![1, d]))?;
        ps.push("pos", None, trunc_normal(&mut r, vec![n + 1, d]))?;
        for i in 0..config.num_layers {
            let nm = BlockNames::new(i);
            let l = Some(i);
            ps.push(&nm.norm1_gain, l, Tensor::full(vec![d], F::one()))?;
            ps.push(&nm.norm1_bias, l, Tensor::zeros(vec![d]))?;
            for (w, b) in [&nm.q, &nm.k, &nm.v, &nm.o] {
                ps.push(w, l, trunc_normal(&mut r, vec![d, d]))?;
                ps.push(b, l, Tensor::zeros(vec![d]))?;
            }
            ps.push(&nm.norm2_gain, l, Tensor::full(vec![d], F::one()))?;
            ps.push(&nm.norm2_bias, l, Tensor::zeros(vec![d]))?;
            ps.push(&nm.fc1.0, l, trunc_normal(&mut r, vec![hid, d]))?;
            ps.push(&nm.fc1.1, l, Tensor::zeros(vec![hid]))?;
            ps.push(&nm.fc2.0, l, trunc_normal(&mut r, vec![d, hid]))?;
            ps.push(&nm.fc2.1, l, Tensor::zeros(vec![d]))?;
        }
        ps.push("norm.gain", None, Tensor::full(vec![d], F::one()))?;
        ps.push("norm.bias", None, Tensor::zeros(vec![d]))?;
        ps.push(
            "head.weight",
            None,
            trunc_normal(&mut r, vec![config.num_classes, d]),
        )?;
        ps.push("head.bias", None, Tensor::zeros(vec![config.num_classes]))?;
        Ok(Self { config, params: ps })
    }

    /// Rebuilds a model from stored parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        let template = Self::new(config.clone())?;
        template
            .params
            .registry()
            .ensure_congruent(&params.registry())?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<F> {
        self.params
    }

    /// Swaps in a freshly initialized classifier for `num_classes` classes.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut r = rng::stream(seed, "head");
        let d = self.config.embed_dim;
        self.params
            .replace("head.weight", trunc_normal(&mut r, vec![num_classes, d]))?;
        self.params
            .replace("head.bias", Tensor::zeros(vec![num_classes]))?;
        self.config.num_classes = num_classes;
        Ok(())
    }

    pub fn cast<G: Element>(&self) -> ViTModel<G> {
        ViTModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn p(&self, g: &mut Graph<F>, name: &str) -> Var {
        let slot = self.params.slot(name).expect("registered parameter");
        g.param(slot, &self.params.by_slot(slot).tensor)
    }

    fn lin(&self, g: &mut Graph<F>, x: Var, names: &(String, String)) -> Result<Var> {
        let w = self.p(g, &names.0);
        let b = self.p(g, &names.1);
        g.linear(x, w, b)
    }

    /// Batched forward pass over `images[B, H, W, C]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        images: &Tensor<F>,
        plan: Option<&RefinePlan>,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace<F>> {
        let c = &self.config;
        let expect = [c.image_height, c.image_width, c.channels];
        if images.rank() != 4 || images.shape()[1..] != expect {
            return Err(Error::Input(format!(
                "images shape {:?} does not match [B, {}, {}, {}]",
                images.shape(),
                expect[0],
                expect[1],
                expect[2]
            )));
        }
        let b = images.shape()[0];
        let per = images.numel() / b.max(1);
        let mut out = Vec::with_capacity(images.numel());
        for img in images.data().chunks_exact(per.max(1)).take(b) {
            patchify_into(img, c, &mut out);
        }
        let patches = Tensor::new(vec![b, c.num_tokens(), c.patch_dim()], out)?;
        self.forward_patches(g, &patches, plan, opts)
    }

    /// Forward pass from already patchified input `patches[B, N, P²C]`.
    pub fn forward_patches(
        &self,
        g: &mut Graph<F>,
        patches: &Tensor<F>,
        plan: Option<&RefinePlan>,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace<F>> {
        let c = &self.config;
        let (n, d, heads) = (c.num_tokens(), c.embed_dim, c.num_heads);
        let dh = c.head_dim();
        if patches.rank() != 3 || patches.shape()[1..] != [n, c.patch_dim()] {
            return Err(Error::Shape {
                op: "forward",
                lhs: patches.shape().to_vec(),
                rhs: vec![n, c.patch_dim()],
            });
        }
        if let Some(plan) = plan {
            plan.validate(c.num_layers)?;
        }
        let b = patches.shape()[0];
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }

        let x = g.constant(patches.clone());
        let w = self.p(g, "patch.weight");
        let bias = self.p(g, "patch.bias");
        let tokens = g.linear(x, w, bias)?;
        let cls = self.p(g, "cls");
        let cls = g.broadcast_batch(cls, b);
        let mut h = g.concat(&[cls, tokens], 1)?;
        let pos = self.p(g, "pos");
        h = g.add(h, pos)?;

        let mut origins: Vec<Vec<TokenOrigin>> = vec![(0..n).map(TokenOrigin::Patch).collect(); b];
        let mut trace = ForwardTrace {
            attention: Vec::new(),
            cls_attention: Vec::with_capacity(c.num_layers),
            token_counts: Vec::with_capacity(c.num_layers),
            refinements: Vec::new(),
            cls_repr: h,
            logits: h,
        };
        let scale = F::of(1.0 / (dh as f64).sqrt());

        for layer in 0..c.num_layers {
            let nm = BlockNames::new(layer);
            let t = g.shape(h)[1];
            trace.token_counts.push(t);

            let gain = self.p(g, &nm.norm1_gain);
            let beta = self.p(g, &nm.norm1_bias);
            let a = g.layer_norm(h, gain, beta, LN_EPS)?;
            let split = |g: &mut Graph<F>, v: Var| -> Result<Var> {
                let v = g.reshape(v, &[b, t, heads, dh])?;
                let v = g.permute(v, &[0, 2, 1, 3])?;
                g.reshape(v, &[b * heads, t, dh])
            };
            let q = self.lin(g, a, &nm.q)?;
            let q = split(g, q)?;
            let k = self.lin(g, a, &nm.k)?;
            let k = split(g, k)?;
            let v = self.lin(g, a, &nm.v)?;
            let v = split(g, v)?;
            let scores = g.batch_matmul_t(q, k)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 2)?;

            let att = g.value(attn).data();
            let rows: Vec<Vec<f64>> = (0..b)
                .map(|img| {
                    let per_head: Vec<&[F]> = (0..heads)
                        .map(|hd| {
                            let base = (img * heads + hd) * t * t;
                            &att[base..base + t]
                        })
                        .collect();
                    let inv = 1.0 / heads as f64;
                    (0..t)
                        .map(|i| per_head.iter().map(|r| r[i].as_f64()).sum::<f64>() * inv)
                        .collect()
                })
                .collect();
            if opts.record_attention {
                let mut full = g.value(attn).clone();
                full = full.reshape(vec![b, heads, t, t])?;
                trace.attention.push(full);
            }

            let ctx = g.batch_matmul(attn, v)?;
            let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b, t, d])?;
            let o = self.lin(g, ctx, &nm.o)?;
            h = g.add(h, o)?;

            let gain = self.p(g, &nm.norm2_gain);
            let beta = self.p(g, &nm.norm2_bias);
            let m = g.layer_norm(h, gain, beta, LN_EPS)?;
            let m = self.lin(g, m, &nm.fc1)?;
            let m = g.gelu(m);
            let m = self.lin(g, m, &nm.fc2)?;
            h = g.add(h, m)?;

            if let Some(plan) = plan.filter(|p| p.refines_at(layer)) {
                let token_scores: Vec<TokenScores> =
                    rows.iter().map(|r| TokenScores(r[1..].to_vec())).collect();
                let r = refine::refine_in_graph(g, h, &token_scores, plan.rho)?;
                h = r.hidden;
                for (img, (kept, merged)) in r.kept.iter().zip(&r.merged).enumerate() {
                    let old = &origins[img];
                    let mut merged_from: Vec<usize> =
                        merged.iter().flat_map(|&i| old[i].patches()).collect();
                    merged_from.sort_unstable();
                    let mut next: Vec<TokenOrigin> = kept.iter().map(|&i| old[i].clone()).collect();
                    let mut kept_patches: Vec<usize> = next
                        .iter()
                        .filter_map(|o| match o {
                            TokenOrigin::Patch(p) => Some(*p),
                            TokenOrigin::Merged(_) => None,
                        })
                        .collect();
                    kept_patches.sort_unstable();
                    if !merged.is_empty() {
                        next.push(TokenOrigin::Merged(merged_from.clone()));
                    }
                    trace.refinements.push(RefineRecord {
                        layer,
                        image: img,
                        kept_patch_indices: kept_patches,
                        merged_from_indices: merged_from,
                    });
                    origins[img] = next;
                }
            }
            trace.cls_attention.push(rows);
        }

        let (cls_repr, logits) = self.classify(g, h)?;
        trace.cls_repr = cls_repr;
        trace.logits = logits;
        Ok(trace)
    }

    /// Final LayerNorm, [CLS] row extraction and classifier head applied to
    /// the last hidden sequence `[B, T, d]`. Returns `(cls_repr, logits)`.
    pub fn classify(&self, g: &mut Graph<F>, hidden: Var) -> Result<(Var, Var)> {
        let b = g.shape(hidden)[0];
        let d = self.config.embed_dim;
        let gain = self.p(g, "norm.gain");
        let beta = self.p(g, "norm.bias");
        let h = g.layer_norm(hidden, gain, beta, LN_EPS)?;
        let cls = g.gather_rows(h, vec![vec![0]; b])?;
        let cls = g.reshape(cls, &[b, d])?;
        let w = self.p(g, "head.weight");
        let bias = self.p(g, "head.bias");
        let logits = g.linear(cls, w, bias)?;
        Ok((cls, logits))
    }

    /// Logits for a batch without keeping the graph.
    pub fn logits(&self, images: &Tensor<F>, plan: Option<&RefinePlan>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, images, plan, ForwardOptions::default())?;
        Ok(g.value(trace.logits).clone())
    }
}
