//! Multi-token patch transformer.
//!
//! The input sequence is `[global | M class tokens | patch tokens]`. Blocks
//! are pre-norm (attention and a GELU MLP, each with a residual). Patch
//! tokens carry learned positional embeddings; class tokens carry none, so
//! permuting class-token rows permutes the node outputs identically. The
//! global token's output, passed through a linear visual projection, is the
//! image descriptor `z`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small configuration used for training on a laptop.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }

    /// ViT-B/16 proportions; used for parameter accounting only.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("dim, channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Every encoder tensor with its shape.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let h = d * cfg.mlp_ratio;
    let mut out = vec![
        ("encoder.patch.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("encoder.patch.bias".to_string(), vec![d]),
        ("encoder.pos".to_string(), vec![cfg.num_patches(), d]),
        ("encoder.global_token".to_string(), vec![d]),
        ("encoder.visual_proj.weight".to_string(), vec![d, d]),
        ("encoder.visual_proj.bias".to_string(), vec![d]),
    ];
    for b in 0..cfg.depth {
        let p = |s: &str| format!("encoder.blocks.{b}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.qkv.weight"), vec![d, 3 * d]),
            (p("attn.qkv.bias"), vec![3 * d]),
            (p("attn.out.weight"), vec![d, d]),
            (p("attn.out.bias"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("mlp.fc1.weight"), vec![d, h]),
            (p("mlp.fc1.bias"), vec![h]),
            (p("mlp.fc2.weight"), vec![h, d]),
            (p("mlp.fc2.bias"), vec![d]),
        ]);
    }
    out
}

/// Cuts `[B, C, S, S]` images into non-overlapping patches, giving
/// `[B, (S/P)^2, C*P*P]` with patches in row-major grid order and each patch
/// flattened channel-major.
pub fn extract_patches<T: Scalar>(images: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::shape(
            "patchify",
            format!(
                "images {s:?}, expected [B, {}, {}, {}]",
                cfg.channels, cfg.image_size, cfg.image_size
            ),
        ));
    }
    if cfg.image_size % cfg.patch_size != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch {} does not divide image {}", cfg.patch_size, cfg.image_size),
        ));
    }
    let (b, c, side, p) = (s[0], s[1], s[2], cfg.patch_size);
    let grid = side / p;
    let data = images.data();
    let mut out = Vec::with_capacity(data.len());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ci) * side + gy * p + y) * side + gx * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, cfg.patch_dim()], out)
}

fn get(p: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    p.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &BTreeMap<String, Var>, x: Var, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, get(p, &format!("{prefix}.weight"))?)?;
    g.add(y, get(p, &format!("{prefix}.bias"))?)
}

fn norm<T: Scalar>(g: &mut Graph<T>, p: &BTreeMap<String, Var>, x: Var, prefix: &str) -> Result<Var> {
    g.layer_norm(x, get(p, &format!("{prefix}.gain"))?, get(p, &format!("{prefix}.bias"))?, LN_EPS)
}

/// Patch projection plus positional embeddings: `[B, N, d]`.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    p: &BTreeMap<String, Var>,
    images: &Tensor<T>,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let patches = g.constant(extract_patches(images, cfg)?)?;
    let x = linear(g, p, patches, "encoder.patch")?;
    g.add(x, get(p, "encoder.pos")?)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[B, M, d]`; absent when the encoder runs without class tokens.
    pub node_tokens: Option<Var>,
    /// `[B, d]`, the projected global token.
    pub global: Var,
}

fn attention<T: Scalar>(g: &mut Graph<T>, p: &BTreeMap<String, Var>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = linear(g, p, x, &format!("{prefix}.qkv"))?;
    let qkv = g.reshape(qkv, &[b, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, H, T, dh]
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let part = g.narrow(qkv, 0, i, 1)?;
        parts.push(g.reshape(part, &[b * heads, t, dh])?);
    }
    let scores = g.batch_matmul(parts[0], parts[1], true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let ctx = g.batch_matmul(weights, parts[2], false)?; // [B*H, T, dh]
    let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    linear(g, p, ctx, &format!("{prefix}.out"))
}

fn block<T: Scalar>(g: &mut Graph<T>, p: &BTreeMap<String, Var>, x: Var, i: usize, heads: usize) -> Result<Var> {
    let pre = format!("encoder.blocks.{i}");
    let h = norm(g, p, x, &format!("{pre}.ln1"))?;
    let a = attention(g, p, h, &format!("{pre}.attn"), heads)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, x, &format!("{pre}.ln2"))?;
    let h = linear(g, p, h, &format!("{pre}.mlp.fc1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, p, h, &format!("{pre}.mlp.fc2"))?;
    g.add(x, h)
}

/// Runs the encoder on `images` with optional `class_tokens` of shape
/// `[M, d]`. Without class tokens the sequence is `[global | patches]`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &BTreeMap<String, Var>,
    images: &Tensor<T>,
    class_tokens: Option<Var>,
    cfg: &EncoderConfig,
) -> Result<EncoderOutput> {
    let d = cfg.dim;
    let patches = patch_embed(g, p, images, cfg)?;
    let b = g.shape(patches)[0];

    let global = g.reshape(get(p, "encoder.global_token")?, &[1, 1, d])?;
    let global = g.expand(global, 0, b)?;
    let mut seq = vec![global];
    let mut m = 0;
    if let Some(ct) = class_tokens {
        let shape = g.shape(ct).to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] == 0 {
            return Err(Error::shape("encode", format!("class tokens {shape:?}, expected [M, {d}]")));
        }
        m = shape[0];
        let cls = g.reshape(ct, &[1, m, d])?;
        seq.push(g.expand(cls, 0, b)?);
    }
    seq.push(patches);
    let mut x = g.concat(&seq, 1)?;
    for i in 0..cfg.depth {
        x = block(g, p, x, i, cfg.heads)?;
    }
    let node_tokens = match class_tokens {
        Some(_) => Some(g.narrow(x, 1, 1, m)?),
        None => None,
    };
    let z = g.narrow(x, 1, 0, 1)?;
    let z = g.reshape(z, &[b, d])?;
    let z = linear(g, p, z, "encoder.visual_proj")?;
    Ok(EncoderOutput { node_tokens, global: z })
}
