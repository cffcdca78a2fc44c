//! Conventional Transformer skeleton: patches, multi-head self-attention,
//! feed-forward and the pooled classifier head.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Where a patch row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

/// `B×N×E` patch embeddings with their origin on the patch grid.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub embeddings: Tensor,
    pub grid: (usize, usize),
    pub provenance: Vec<Provenance>,
}

impl PatchBatch {
    pub fn new(embeddings: Tensor, grid: (usize, usize)) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(Error::shape("patch batch", s, &[grid.0, grid.1]));
        }
        let provenance = (0..s[0])
            .flat_map(|b| {
                (0..grid.0 * grid.1).map(move |n| Provenance {
                    sample: b,
                    row: n / grid.1,
                    col: n % grid.1,
                })
            })
            .collect();
        Ok(PatchBatch {
            embeddings,
            grid,
            provenance,
        })
    }
}

/// Split an `H×W×C` image into raster-ordered `P×P` patches, each flattened
/// row-major (patch row, patch column, channel). Output is `N×(P²·C)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let out = patchify_batch(&image.reshape(&[1, s[0], s[1], s[2]])?, patch)?;
    let (n, d) = (out.shape()[1], out.shape()[2]);
    out.reshape(&[n, d])
}

/// Batched [`patchify`]: `B×H×W×C → B×N×(P²·C)`.
pub fn patchify_batch(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gr, gc) = (h / patch, w / patch);
    let d = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for pr in 0..gr {
            for pc in 0..gc {
                for y in 0..patch {
                    let row = pr * patch + y;
                    let start = ((bi * h + row) * w + pc * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, gr * gc, d], out))
}

/// Inverse of [`patchify`] for an image of the given size.
pub fn unpatchify(patches: &Tensor, patch: usize, height: usize, width: usize, channels: usize) -> Result<Tensor> {
    let (gr, gc) = (height / patch, width / patch);
    if patches.shape() != [gr * gc, patch * patch * channels] || gr * patch != height || gc * patch != width {
        return Err(Error::shape("unpatchify", patches.shape(), &[height, width, channels]));
    }
    let mut img = vec![0.0; height * width * channels];
    let src = patches.data();
    let row_len = patch * channels;
    for n in 0..gr * gc {
        let (pr, pc) = (n / gc, n % gc);
        for y in 0..patch {
            let dst = ((pr * patch + y) * width + pc * patch) * channels;
            let s = n * patch * row_len + y * row_len;
            img[dst..dst + row_len].copy_from_slice(&src[s..s + row_len]);
        }
    }
    Tensor::new(&[height, width, channels], img)
}

/// Linear projection of flattened patches plus an additive position
/// embedding. `patches` is `[B, N, P²C]` or `[N, P²C]`; no class token.
pub fn embed_patches(tape: &mut GradTape, patches: Var, projection: Var, pos_embedding: Var) -> Result<Var> {
    let ps = tape.shape(patches).to_vec();
    let pos = tape.shape(pos_embedding).to_vec();
    let (b, n, d) = match ps.as_slice() {
        [n, d] => (1, *n, *d),
        [b, n, d] => (*b, *n, *d),
        _ => return Err(Error::shape("embed_patches", &ps, tape.shape(projection))),
    };
    let e = tape.shape(projection).get(1).copied().unwrap_or(0);
    if tape.shape(projection) != [d, e] || pos != [n, e] {
        return Err(Error::shape("embed_patches", &ps, &pos));
    }
    let flat = tape.reshape(patches, &[b * n, d])?;
    let proj = tape.matmul(flat, projection)?;
    let proj = tape.reshape(proj, &[b, n * e])?;
    let pos_flat = tape.reshape(pos_embedding, &[n * e])?;
    let out = tape.add_bias(proj, pos_flat)?;
    if ps.len() == 2 {
        tape.reshape(out, &[n, e])
    } else {
        tape.reshape(out, &[b, n, e])
    }
}

/// Affine map `x·W + b` over the last axis of any-rank `x`.
pub fn linear(tape: &mut GradTape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(Error::shape("linear", &xs, &ws));
    }
    let rows = xs.iter().product::<usize>() / ws[0];
    let flat = tape.reshape(x, &[rows, ws[0]])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add_bias(y, b)?;
    }
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = ws[1];
    tape.reshape(y, &out_shape)
}

/// Multi-head self-attention weights. Each of `wq`, `wk`, `wv` is `E×(A·D_h)`
/// with head `i` occupying columns `i·D_h..(i+1)·D_h`; `wo` is `(A·D_h)×E`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Option<Var>,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Option<Var>,
    pub wo: Var,
    pub bo: Option<Var>,
    pub heads: usize,
}

/// Output of [`self_attention`]: the mapped result and the per-head score
/// matrices `[B·A, N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub scores: Var,
}

fn split_heads(tape: &mut GradTape, x: Var, b: usize, n: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, n, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, n, dh])
}

/// Scaled dot-product attention within each sample, heads concatenated and
/// mapped by `W^O`. Residual and normalization belong to the caller.
pub fn self_attention(tape: &mut GradTape, v: Var, p: &AttentionParams) -> Result<AttentionOutput> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("self_attention", &s, &[]));
    }
    let (b, n, e) = (s[0], s[1], s[2]);
    let inner = tape.shape(p.wq)[1];
    if p.heads == 0 || inner % p.heads != 0 || tape.shape(p.wq)[0] != e {
        return Err(Error::shape("self_attention", &s, tape.shape(p.wq)));
    }
    let dh = inner / p.heads;
    let q = linear(tape, v, p.wq, p.bq)?;
    let k = linear(tape, v, p.wk, p.bk)?;
    let val = linear(tape, v, p.wv, p.bv)?;
    let q = split_heads(tape, q, b, n, p.heads, dh)?;
    let k = split_heads(tape, k, b, n, p.heads, dh)?;
    let val = split_heads(tape, val, b, n, p.heads, dh)?;
    let kt = tape.transpose(k)?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dh as Scalar).sqrt());
    let scores = tape.softmax(logits);
    let ctx = tape.bmm(scores, val)?;
    let ctx = tape.reshape(ctx, &[b, p.heads, n, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, inner])?;
    let output = linear(tape, ctx, p.wo, p.bo)?;
    Ok(AttentionOutput { output, scores })
}

/// Two-layer MLP: linear → GELU → linear.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn feed_forward(tape: &mut GradTape, v: Var, p: &FeedForwardParams) -> Result<Var> {
    let h = linear(tape, v, p.w1, Some(p.b1))?;
    let h = tape.gelu(h);
    linear(tape, h, p.w2, Some(p.b2))
}

/// Mean-pool over patches, then map to class logits: `[B,N,E] → [B,classes]`.
pub fn pooled_head(tape: &mut GradTape, v: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("pooled_head", &s, tape.shape(w)));
    }
    let pooled = tape.sum_axis(v, 1)?;
    let pooled = tape.scale(pooled, 1.0 / s[1] as Scalar);
    linear(tape, pooled, w, Some(b))
}
