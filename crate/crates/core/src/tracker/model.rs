//! Parameters and differentiable forward pieces of the tracker.

use std::rc::Rc;

use rand::Rng;

use super::config::TrackerConfig;
use crate::error::{ensure, Result};
use crate::numerics::ops::{im2col_index, layer_norm, linear, softmax_last, transpose2};
use crate::numerics::{BoundParams, ParamId, ParamStore, Real, Var};
use crate::registers::{extract, retrieve, RegisterTemplate};
use crate::ssm::{mamba_stack, MambaBlockParams, LAYER_NORM_EPS};

type Affine = (ParamId, ParamId);

/// Pre-norm single-head self-attention plus MLP, both residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm1: Affine,
    pub qkv: [ParamId; 3],
    pub proj: Affine,
    pub norm2: Affine,
    pub mlp_in: Affine,
    pub mlp_out: Affine,
    pub dim: usize,
}

impl AttentionBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let norm = |store: &mut ParamStore<T>, name: &str| {
            (
                store.full(format!("{prefix}.{name}.gain"), &[dim], 1.0),
                store.zeros(format!("{prefix}.{name}.bias"), &[dim]),
            )
        };
        let norm1 = norm(store, "norm1");
        let qkv = ["q", "k", "v"].map(|n| store.normal(format!("{prefix}.{n}"), &[dim, dim], std, rng));
        let proj = (
            store.normal(format!("{prefix}.proj.w"), &[dim, dim], 0.5 * std, rng),
            store.zeros(format!("{prefix}.proj.b"), &[dim]),
        );
        let norm2 = norm(store, "norm2");
        let mlp_in = (
            store.normal(format!("{prefix}.mlp_in.w"), &[dim, 2 * dim], std, rng),
            store.zeros(format!("{prefix}.mlp_in.b"), &[2 * dim]),
        );
        let mlp_out = (
            store.normal(
                format!("{prefix}.mlp_out.w"),
                &[2 * dim, dim],
                0.5 / (2.0 * dim as f64).sqrt(),
                rng,
            ),
            store.zeros(format!("{prefix}.mlp_out.b"), &[dim]),
        );
        Self {
            norm1,
            qkv,
            proj,
            norm2,
            mlp_in,
            mlp_out,
            dim,
        }
    }

    fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &BoundParams<'t, T>) -> Var<'t, T> {
        let h = layer_norm(x, p.get(self.norm1.0), p.get(self.norm1.1), LAYER_NORM_EPS);
        let [q, k, v] = self.qkv.map(|id| h.matmul(p.get(id)));
        let att = softmax_last(q.matmul(transpose2(k)).scale(1.0 / (self.dim as f64).sqrt()));
        let x = x + linear(att.matmul(v), p.get(self.proj.0), Some(p.get(self.proj.1)));
        let h = layer_norm(x, p.get(self.norm2.0), p.get(self.norm2.1), LAYER_NORM_EPS);
        let h = linear(h, p.get(self.mlp_in.0), Some(p.get(self.mlp_in.1))).silu();
        x + linear(h, p.get(self.mlp_out.0), Some(p.get(self.mlp_out.1)))
    }
}

/// Patch embedding shared by search and template crops, with separate
/// positional tables.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub patch_embed: Affine,
    pub pos_search: ParamId,
    pub pos_template: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub patch: usize,
    pub channels: usize,
}

/// Which positional table a crop uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropKind {
    Search,
    Template,
}

/// Cross-attention prediction head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub norm: Option<Affine>,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub conv: Affine,
    pub out: Affine,
    pub width: usize,
    pub attn_dim: usize,
}

/// All learnable parameters of one tracker, with the ids addressing them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: TrackerConfig,
    pub store: ParamStore<T>,
    pub backbone: BackboneParams,
    pub double: Affine,
    pub register: Option<RegisterTemplate>,
    pub extractor: Vec<MambaBlockParams>,
    pub retriever: Vec<MambaBlockParams>,
    pub head: HeadParams,
}

impl<T: Real> Model<T> {
    /// Declares every parameter in a fixed order (the checkpoint order).
    pub fn new<R: Rng + ?Sized>(cfg: TrackerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (c, w, p) = (cfg.channels, cfg.width(), cfg.patch);
        let patch_embed = (
            store.normal("backbone.patch.w", &[p * p, c], 1.0 / p as f64, rng),
            store.zeros("backbone.patch.b", &[c]),
        );
        let pos_search = store.normal("backbone.pos_search", &[cfg.search_tokens(), c], 0.1, rng);
        let pos_template =
            store.normal("backbone.pos_template", &[cfg.template_tokens(), c], 0.1, rng);
        let blocks = (0..cfg.backbone_depth)
            .map(|i| AttentionBlock::new(&mut store, &format!("backbone.block{i}"), c, rng))
            .collect();
        let backbone = BackboneParams {
            patch_embed,
            pos_search,
            pos_template,
            blocks,
            patch: p,
            channels: c,
        };
        let double = (
            store.normal("double.w", &[c, w], 1.0 / (c as f64).sqrt(), rng),
            store.zeros("double.b", &[w]),
        );
        let register = cfg
            .registers
            .then(|| RegisterTemplate::new(&mut store, "register", cfg.k, w, rng));
        let extractor = (0..cfg.mamba_depth)
            .map(|i| MambaBlockParams::new(&mut store, &format!("extractor{i}"), w, cfg.block, rng))
            .collect();
        let retriever = (0..cfg.mamba_depth)
            .map(|i| MambaBlockParams::new(&mut store, &format!("retriever{i}"), w, cfg.block, rng))
            .collect();
        let std = 1.0 / (w as f64).sqrt();
        let head = HeadParams {
            norm: cfg.final_norm.then(|| {
                (
                    store.full("head.norm.gain", &[w], 1.0),
                    store.zeros("head.norm.bias", &[w]),
                )
            }),
            q: store.normal("head.q", &[w, cfg.attn_dim], std, rng),
            k: store.normal("head.k", &[w, cfg.attn_dim], std, rng),
            v: store.normal("head.v", &[w, w], std, rng),
            o: store.normal("head.o", &[w, w], 0.5 * std, rng),
            conv: (
                store.normal("head.conv.w", &[9 * w, cfg.head_channels], 1.0 / (9.0 * w as f64).sqrt(), rng),
                store.zeros("head.conv.b", &[cfg.head_channels]),
            ),
            out: (
                store.normal(
                    "head.out.w",
                    &[cfg.head_channels, 3],
                    0.1 / (cfg.head_channels as f64).sqrt(),
                    rng,
                ),
                store.zeros("head.out.b", &[3]),
            ),
            width: w,
            attn_dim: cfg.attn_dim,
        };
        Ok(Self {
            cfg,
            store,
            backbone,
            double,
            register,
            extractor,
            retriever,
            head,
        })
    }

    /// Embeds a crop and doubles its channels: [T, 2C].
    pub fn tokens<'t>(
        &self,
        p: &BoundParams<'t, T>,
        tape: &'t crate::numerics::Tape<T>,
        pixels: &[f64],
        kind: CropKind,
    ) -> Result<Var<'t, T>> {
        let size = match kind {
            CropKind::Search => self.cfg.search_size,
            CropKind::Template => self.cfg.template_size,
        };
        let emb = embed_patches(tape, pixels, size, size, &self.backbone, kind, p)?;
        Ok(linear(emb, p.get(self.double.0), Some(p.get(self.double.1))))
    }

    /// Extractor: `(x̂_t, Some(r_t))`, or the register-free stack for `(x̂_t, None)`.
    pub fn extract<'t>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        match &self.register {
            Some(reg) => {
                let (xh, r) = extract(x, reg, &self.extractor, p)?;
                Ok((xh, Some(r)))
            }
            None => Ok((mamba_stack(x, &self.extractor, p)?, None)),
        }
    }

    /// Retriever over newest-first bank entries; ignores the bank without registers.
    pub fn retrieve<'t>(
        &self,
        p: &BoundParams<'t, T>,
        z: Var<'t, T>,
        entries: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        match &self.register {
            Some(_) => retrieve(z, entries, &self.retriever, p),
            None => mamba_stack(z, &self.retriever, p),
        }
    }
}

/// Non-overlapping `patch`×`patch` patches of an `h`×`w` image as [T, p²].
pub fn patchify(pixels: &[f64], h: usize, w: usize, patch: usize) -> Result<Vec<f64>> {
    ensure!(
        h % patch == 0 && w % patch == 0,
        "{h}x{w} image is not divisible by patch size {patch}"
    );
    ensure!(pixels.len() == h * w, "image has {} pixels, expected {}", pixels.len(), h * w);
    let mut out = Vec::with_capacity(h * w);
    for pi in 0..h / patch {
        for pj in 0..w / patch {
            for y in 0..patch {
                let row = (pi * patch + y) * w + pj * patch;
                out.extend_from_slice(&pixels[row..row + patch]);
            }
        }
    }
    Ok(out)
}

/// Patch linear embedding + positional embedding + self-attention blocks:
/// [(h/p)·(w/p), C].
pub fn embed_patches<'t, T: Real>(
    tape: &'t crate::numerics::Tape<T>,
    pixels: &[f64],
    h: usize,
    w: usize,
    params: &BackboneParams,
    kind: CropKind,
    p: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    let patch = params.patch;
    let patches = patchify(pixels, h, w, patch)?;
    let t = (h / patch) * (w / patch);
    let pos = p.get(match kind {
        CropKind::Search => params.pos_search,
        CropKind::Template => params.pos_template,
    });
    ensure!(
        pos.shape()[0] == t,
        "{t} patches do not match the {} positional embeddings",
        pos.shape()[0]
    );
    let x = tape.constant(&[t, patch * patch], patches.into_iter().map(T::from_f64).collect());
    let x = linear(x, p.get(params.patch_embed.0), Some(p.get(params.patch_embed.1))) + pos;
    Ok(params.blocks.iter().fold(x, |x, b| b.forward(x, p)))
}

/// One cross-attention layer (search tokens query the dynamic template),
/// residual, then a 3×3 conv → SiLU → 1×1 conv over the search grid giving a
/// score logit map [H, W] and a sub-cell offset map [H, W, 2].
pub fn cross_attention_head<'t, T: Real>(
    z_hat: Var<'t, T>,
    x_hat: Var<'t, T>,
    params: &HeadParams,
    p: &BoundParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (xs, zs) = (x_hat.shape(), z_hat.shape());
    ensure!(
        xs.len() == 2 && zs.len() == 2 && xs[1] == params.width && zs[1] == params.width,
        "head expects [T, {}] tokens, got {xs:?} and {zs:?}",
        params.width
    );
    let grid = (xs[0] as f64).sqrt().round() as usize;
    ensure!(grid * grid == xs[0], "{} search tokens do not form a square grid", xs[0]);
    let zg = (zs[0] as f64).sqrt().round() as usize;
    ensure!(zg * zg == zs[0], "{} template tokens do not form a square grid", zs[0]);
    let x = match params.norm {
        Some((g, b)) => layer_norm(x_hat, p.get(g), p.get(b), LAYER_NORM_EPS),
        None => x_hat,
    };
    let q = x.matmul(p.get(params.q));
    let k = z_hat.matmul(p.get(params.k));
    let v = z_hat.matmul(p.get(params.v));
    let att = softmax_last(q.matmul(transpose2(k)).scale(1.0 / (params.attn_dim as f64).sqrt()));
    let x = x + att.matmul(v).matmul(p.get(params.o));
    let w = params.width;
    let cols = x.gather(im2col_index(grid, grid, w, 3), &[grid * grid, 9 * w]);
    let h = linear(cols, p.get(params.conv.0), Some(p.get(params.conv.1))).silu();
    let out = linear(h, p.get(params.out.0), Some(p.get(params.out.1)));
    let n = grid * grid;
    let score_idx: Rc<[usize]> = (0..n).map(|i| i * 3).collect();
    let offset_idx: Rc<[usize]> = (0..n).flat_map(|i| [i * 3 + 1, i * 3 + 2]).collect();
    Ok((
        out.gather(score_idx, &[grid, grid]),
        out.gather(offset_idx, &[grid, grid, 2]),
    ))
}
