//! Global workspace write path: squash, low-rank explicit memory, top-k
//! bottleneck cross-attention, EWMA memory consolidation and the balance loss
//! that keeps the bottleneck from collapsing onto a few positions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Scope of the unit-norm constraint applied after every memory update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScope {
    /// The whole `M×D` bank has unit Frobenius norm.
    #[default]
    Memory,
    /// Every slot row has unit norm.
    Slot,
}

/// Scope of the top-k budget.
/// Which scores feed the importance half of the balance loss. Loads always
/// count post-mask survivors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceScores {
    /// Soft scores before top-k; every position gets a gradient.
    #[default]
    PreMask,
    PostMask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopkScope {
    /// `k` survivors per memory-slot row.
    #[default]
    Slot,
    /// `k` survivors over each head's full `M×(B·N)` score matrix.
    Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryInit {
    #[default]
    Gaussian,
    Positional,
    Uniform,
    Identity,
}

impl FromStr for MemoryInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(MemoryInit::Gaussian),
            "positional" => Ok(MemoryInit::Positional),
            "uniform" => Ok(MemoryInit::Uniform),
            "identity" => Ok(MemoryInit::Identity),
            other => Err(Error::Config(format!(
                "unknown memory init '{other}' (expected gaussian, positional, uniform or identity)"
            ))),
        }
    }
}

impl fmt::Display for MemoryInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MemoryInit::Gaussian => "gaussian",
            MemoryInit::Positional => "positional",
            MemoryInit::Uniform => "uniform",
            MemoryInit::Identity => "identity",
        };
        f.write_str(s)
    }
}

/// Concatenate the patches of a batch: `[B,N,E] → [(B·N),E]`, sample-major.
pub fn squash(tape: &mut GradTape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("squash", &s, &[]));
    }
    tape.reshape(v, &[s[0] * s[1], s[2]])
}

pub fn unsquash(tape: &mut GradTape, v: Var, batch: usize) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 || batch == 0 || s[0] % batch != 0 {
        return Err(Error::shape("unsquash", &s, &[batch]));
    }
    tape.reshape(v, &[batch, s[0] / batch, s[1]])
}

/// The `M×D` bank of priors plus its smoothing state.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitMemory {
    gamma: Tensor,
    pub alpha: f64,
    pub norm_scope: NormScope,
}

/// Raw initial values for a memory bank; deterministic for a fixed seed.
pub fn init_values(method: MemoryInit, slots: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        MemoryInit::Gaussian => Tensor::randn(&[slots, dim], 1.0, &mut rng),
        MemoryInit::Uniform => Tensor::uniform(&[slots, dim], 1.0 / ((slots + dim) as Scalar).sqrt(), &mut rng),
        MemoryInit::Identity => {
            let mut t = Tensor::zeros(&[slots, dim]);
            for i in 0..slots.min(dim) {
                t.data_mut()[i * dim + i] = 1.0;
            }
            t
        }
        MemoryInit::Positional => {
            let mut t = Tensor::zeros(&[slots, dim]);
            for pos in 0..slots {
                for d in 0..dim {
                    let pair = (d / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
                    t.data_mut()[pos * dim + d] = if d % 2 == 0 { angle.sin() } else { angle.cos() } as Scalar;
                }
            }
            t
        }
    }
}

impl ExplicitMemory {
    pub fn init(method: MemoryInit, slots: usize, dim: usize, seed: u64, alpha: f64) -> Result<Self> {
        if slots == 0 || dim == 0 {
            return Err(Error::Config("memory needs at least one slot and one dimension".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("EWMA alpha must lie in (0,1), got {alpha}")));
        }
        Ok(ExplicitMemory {
            gamma: init_values(method, slots, dim, seed),
            alpha,
            norm_scope: NormScope::Memory,
        })
    }

    pub fn from_gamma(gamma: Tensor, alpha: f64, norm_scope: NormScope) -> Result<Self> {
        if gamma.rank() != 2 {
            return Err(Error::shape("memory", gamma.shape(), &[]));
        }
        Ok(ExplicitMemory {
            gamma,
            alpha,
            norm_scope,
        })
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn slot_count(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn slot_dim(&self) -> usize {
        self.gamma.shape()[1]
    }

    /// √(Σⱼ Σ_d γⱼ,d²).
    pub fn memory_norm(&self) -> f64 {
        self.gamma.frobenius_norm()
    }

    /// Replace the bank contents (e.g. with a value computed on the tape).
    pub fn set_gamma(&mut self, gamma: Tensor) -> Result<()> {
        if gamma.shape() != self.gamma.shape() {
            return Err(Error::shape("memory update", self.gamma.shape(), gamma.shape()));
        }
        self.gamma = gamma;
        Ok(())
    }

    /// `γ ← (1−α)·γ + α·γ̂`, then rescale to unit norm under `norm_scope`.
    pub fn update(&mut self, gamma_hat: &Tensor) -> Result<()> {
        let mut tape = GradTape::new();
        let old = tape.constant(self.gamma.clone());
        let hat = tape.constant(gamma_hat.clone());
        let new = ewma_update(&mut tape, old, hat, self.alpha, self.norm_scope)?;
        self.gamma = tape.value(new).clone();
        Ok(())
    }
}

/// EWMA consolidation on the tape. `old` should be a constant: the previous
/// memory never receives gradient.
pub fn ewma_update(tape: &mut GradTape, old: Var, gamma_hat: Var, alpha: f64, scope: NormScope) -> Result<Var> {
    let keep = tape.scale(old, (1.0 - alpha) as Scalar);
    let fresh = tape.scale(gamma_hat, alpha as Scalar);
    let mixed = tape.add(keep, fresh)?;
    Ok(match scope {
        NormScope::Memory => tape.normalize_all(mixed),
        NormScope::Slot => tape.normalize_rows(mixed),
    })
}

/// Learnable maps of one bottleneck attention block, as tape handles.
///
/// `wq`, `wk`, `wv` are `D×(A_b·D)` with head `i` in columns `i·D..(i+1)·D`;
/// `wo` is `(A_b·D)×D`.
#[derive(Clone, Copy, Debug)]
pub struct WorkspaceLayerParams {
    pub down_projection: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Bottleneck hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub heads: usize,
    /// Survivors per slot row; `None` disables the bottleneck (k = B·N).
    pub k: Option<usize>,
    pub topk_scope: TopkScope,
    pub sigma: f64,
    pub epsilon: f64,
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("bottleneck needs at least one head".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("bottleneck capacity k must be >= 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckOutput {
    /// `γ̂`, `M×D`.
    pub gamma_hat: Var,
    /// Soft scores `[A_b, M, B·N]`.
    pub pre_mask: Var,
    /// Scores after top-k masking, same shape.
    pub post_mask: Var,
}

/// Cross-attention from memory-slot queries to the squashed, down-projected
/// patches, restricted to the top-k scores, then `LN(Concat(heads)·W^O)`.
pub fn bottleneck_attention(
    tape: &mut GradTape,
    gamma: Var,
    squashed: Var,
    params: &WorkspaceLayerParams,
    cfg: &BottleneckConfig,
) -> Result<BottleneckOutput> {
    cfg.validate()?;
    let gs = tape.shape(gamma).to_vec();
    let xs = tape.shape(squashed).to_vec();
    if gs.len() != 2 || xs.len() != 2 {
        return Err(Error::shape("bottleneck_attention", &gs, &xs));
    }
    let (m, d) = (gs[0], gs[1]);
    let positions = xs[0];
    let heads = cfg.heads;
    if tape.shape(params.down_projection) != [xs[1], d] {
        return Err(Error::shape("bottleneck down-projection", &xs, tape.shape(params.down_projection)));
    }
    if tape.shape(params.wq) != [d, heads * d] {
        return Err(Error::shape("bottleneck query map", &gs, tape.shape(params.wq)));
    }
    let budget = match cfg.topk_scope {
        TopkScope::Slot => positions,
        TopkScope::Head => m * positions,
    };
    let k = cfg.k.unwrap_or(budget);
    if k > budget {
        return Err(Error::Capacity { k, available: budget });
    }

    let low = tape.matmul(squashed, params.down_projection)?;
    let q = tape.matmul(gamma, params.wq)?;
    let q = tape.reshape(q, &[m, heads, d])?;
    let q = tape.permute(q, &[1, 0, 2])?;
    let key = tape.matmul(low, params.wk)?;
    let key = tape.reshape(key, &[positions, heads, d])?;
    let key_t = tape.permute(key, &[1, 2, 0])?;
    let val = tape.matmul(low, params.wv)?;
    let val = tape.reshape(val, &[positions, heads, d])?;
    let val = tape.permute(val, &[1, 0, 2])?;

    let logits = tape.bmm(q, key_t)?;
    let logits = tape.scale(logits, 1.0 / (d as Scalar).sqrt());
    let pre_mask = tape.softmax(logits);
    let post_mask = match cfg.topk_scope {
        TopkScope::Slot => tape.top_k_mask(pre_mask, k)?,
        TopkScope::Head => {
            let flat = tape.reshape(pre_mask, &[heads, m * positions])?;
            let masked = tape.top_k_mask(flat, k)?;
            tape.reshape(masked, &[heads, m, positions])?
        }
    };
    let head_out = tape.bmm(post_mask, val)?;
    let head_out = tape.permute(head_out, &[1, 0, 2])?;
    let concat = tape.reshape(head_out, &[m, heads * d])?;
    let mapped = tape.matmul(concat, params.wo)?;
    let gamma_hat = tape.layer_norm(mapped, Some(params.ln_gain), Some(params.ln_bias))?;
    Ok(BottleneckOutput {
        gamma_hat,
        pre_mask,
        post_mask,
    })
}

/// Bottleneck balance loss on the tape from post-mask scores `[A_b, M, L]`:
/// `σ · Σ_heads [CV²(importance) + CV²(loads)]`. Loads are piecewise
/// constant and enter as constants.
pub fn balance_loss(tape: &mut GradTape, post_mask: Var, sigma: f64, epsilon: f64) -> Result<Var> {
    balance_loss_with(tape, post_mask, post_mask, sigma, epsilon)
}

/// As [`balance_loss`], with the importance term summed from `scores`
/// (pre- or post-mask) while loads always count post-mask survivors.
pub fn balance_loss_with(tape: &mut GradTape, scores: Var, post_mask: Var, sigma: f64, epsilon: f64) -> Result<Var> {
    let s = tape.shape(post_mask).to_vec();
    if s.len() != 3 || tape.shape(scores) != s.as_slice() {
        return Err(Error::shape("balance_loss", tape.shape(scores), &s));
    }
    let (heads, positions) = (s[0], s[2]);
    let importance = tape.sum_axis(scores, 1)?;
    let imp_term = normalized_variance(tape, importance, epsilon)?;

    let loads = loads_from_scores(tape.value(post_mask));
    let loads: Vec<Scalar> = loads.into_iter().flatten().map(|c| c as Scalar).collect();
    let loads = tape.constant(Tensor::new(&[heads, positions], loads)?);
    let load_term = normalized_variance(tape, loads, epsilon)?;

    let per_head = tape.add(imp_term, load_term)?;
    let total = tape.sum(per_head);
    Ok(tape.scale(total, sigma as Scalar))
}

/// `Var(x) / (mean(x)² + ε)` along the last axis.
fn normalized_variance(tape: &mut GradTape, x: Var, epsilon: f64) -> Result<Var> {
    let var = tape.var_last(x);
    let mean = tape.mean_last(x);
    let sq = tape.mul(mean, mean)?;
    let denom = tape.add_const(sq, epsilon as Scalar);
    tape.div(var, denom)
}

/// Per head, per position: number of slots with a positive score.
fn loads_from_scores(post_mask: &Tensor) -> Vec<Vec<u32>> {
    let s = post_mask.shape();
    let (heads, m, l) = (s[0], s[1], s[2]);
    let d = post_mask.data();
    (0..heads)
        .map(|h| {
            (0..l)
                .map(|p| (0..m).filter(|&j| d[(h * m + j) * l + p] > 0.0).count() as u32)
                .collect()
        })
        .collect()
}

/// Immutable snapshot of one bottleneck pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckDiagnostics {
    /// Soft scores `[A_b, M, L]`.
    pub pre_mask: Tensor,
    /// Masked scores `[A_b, M, L]`.
    pub post_mask: Tensor,
    /// Per head, per position: summed post-mask scores over slots.
    pub importance: Vec<Vec<f64>>,
    /// Per head, per position: number of slots that selected it.
    pub loads: Vec<Vec<u32>>,
    pub distinct_patch_ratio: f64,
}

impl BottleneckDiagnostics {
    pub fn from_scores(pre_mask: Tensor, post_mask: Tensor) -> Result<Self> {
        let s = post_mask.shape().to_vec();
        if s.len() != 3 || pre_mask.shape() != s.as_slice() {
            return Err(Error::shape("bottleneck diagnostics", pre_mask.shape(), &s));
        }
        let (heads, m, l) = (s[0], s[1], s[2]);
        let d = post_mask.data();
        let importance = (0..heads)
            .map(|h| (0..l).map(|p| (0..m).map(|j| d[(h * m + j) * l + p] as f64).sum()).collect())
            .collect();
        let loads = loads_from_scores(&post_mask);
        let distinct_patch_ratio = distinct_ratio(&post_mask);
        Ok(BottleneckDiagnostics {
            pre_mask,
            post_mask,
            importance,
            loads,
            distinct_patch_ratio,
        })
    }

    pub fn heads(&self) -> usize {
        self.post_mask.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.post_mask.shape()[1]
    }

    pub fn positions(&self) -> usize {
        self.post_mask.shape()[2]
    }

    /// Number of surviving entries in every (head, slot) row.
    pub fn selections_per_row(&self) -> Vec<usize> {
        let l = self.positions();
        self.post_mask
            .data()
            .chunks(l)
            .map(|r| r.iter().filter(|&&v| v > 0.0).count())
            .collect()
    }
}

/// Distinct selected positions over total selections (with multiplicity)
/// across all heads and slots. 1.0 when nothing is selected.
fn distinct_ratio(post_mask: &Tensor) -> f64 {
    let l = *post_mask.shape().last().unwrap_or(&1);
    let mut distinct = HashSet::new();
    let mut total = 0usize;
    for row in post_mask.data().chunks(l) {
        for (p, &v) in row.iter().enumerate() {
            if v > 0.0 {
                distinct.insert(p);
                total += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

pub fn distinct_patch_ratio(diag: &BottleneckDiagnostics) -> f64 {
    diag.distinct_patch_ratio
}

/// Plain double-precision evaluation of the balance loss from diagnostics.
pub fn balance_loss_value(diag: &BottleneckDiagnostics, sigma: f64, epsilon: f64) -> f64 {
    fn cv2(xs: &[f64], eps: f64) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        var / (mean * mean + eps)
    }
    let per_head: f64 = diag
        .importance
        .iter()
        .zip(&diag.loads)
        .map(|(imp, loads)| {
            let loads: Vec<f64> = loads.iter().map(|&c| c as f64).collect();
            cv2(imp, epsilon) + cv2(&loads, epsilon)
        })
        .sum();
    sigma * per_head
}
