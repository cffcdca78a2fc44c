//! Model assembly: patch embedding, `layers` blocks of
//! MHSA → FF → global workspace layer, then a mean-pooled head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationConfig, LayerReduction, ModelConfig, TrainConfig};
use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::hopfield::{mean_energy_drop, retrieve_on_tape, AttractorBank};
use crate::params::{ParamStore, ParamVars};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{embed_patches, feed_forward, linear, patchify_batch, pooled_head, self_attention, AttentionParams, FeedForwardParams};
use crate::workspace::{
    balance_loss_with, bottleneck_attention, ewma_update, squash, unsquash, BottleneckConfig, BottleneckDiagnostics, ExplicitMemory,
    ImportanceScores, TopkScope, WorkspaceLayerParams,
};

const PARAM_STREAM: u64 = 0x5041_5241;
const MEMORY_STREAM: u64 = 0x4d45_4d00;

/// Tape handles produced by one global workspace layer.
#[derive(Clone, Copy, Debug)]
pub struct WorkspaceTrace {
    /// `[B·N, E]` input to the layer.
    pub squashed: Var,
    /// `[A_b, M, B·N]`.
    pub pre_mask: Var,
    pub post_mask: Var,
    /// Memory after the EWMA step.
    pub gamma: Var,
    pub balance_loss: Var,
    pub attractors: Option<Var>,
    /// Hopfield reconstruction before the skip connection.
    pub retrieved: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LayerTrace {
    /// `[B·A, N, N]` self-attention probabilities.
    pub sa_scores: Option<Var>,
    pub workspace: Option<WorkspaceTrace>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Combined balance loss over layers; `None` without memory.
    pub bottleneck_loss: Option<Var>,
    pub layers: Vec<LayerTrace>,
    pub batch: usize,
}

/// Scalars read back from a forward pass for metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorkspaceStats {
    pub distinct_patch_ratio: f64,
    pub mean_energy_drop: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: TrainConfig,
    pub params: ParamStore,
    memories: Vec<ExplicitMemory>,
}

pub fn build_model(cfg: &TrainConfig) -> Result<Model> {
    Model::new(cfg)
}

fn layer_names(l: usize) -> impl Fn(&str) -> String {
    move |s| format!("layer{l}.{s}")
}

/// Analytic parameter count for `cfg`, independent of `build_model`.
pub fn param_count(model: &ModelConfig, ablation: &AblationConfig) -> usize {
    let (e, h) = (model.embed_dim, model.mlp_dim);
    let (d, ab) = (model.slot_dim, model.bottleneck_heads);
    let embed = model.patch_dim() * e + model.patch_count() * e;
    let mut block = 0;
    if ablation.use_sa {
        block += 2 * e + 4 * (e * e + e);
    }
    if ablation.use_ff {
        block += 2 * e + e * h + h + h * e + e;
    }
    if ablation.use_memory {
        block += e * d + d * ab * d * 3 + ab * d * d + 2 * d;
        block += if ablation.use_hopfield {
            d * e
        } else {
            e * ab * d + 2 * d * ab * d + ab * d * e
        };
    }
    let final_norm = if model.pre_norm { 2 * e } else { 0 };
    embed + model.layers * block + final_norm + e * model.classes + model.classes
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let a = &cfg.ablation;
        let (e, d, ab) = (m.embed_dim, m.slot_dim, m.bottleneck_heads);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, PARAM_STREAM));
        let mut p = ParamStore::new();
        p.glorot("embed.proj", &[m.patch_dim(), e], &mut rng);
        p.weight("embed.pos", &[m.patch_count(), e], &mut rng);
        for l in 0..m.layers {
            let n = layer_names(l);
            if a.use_sa {
                p.ones(n("ln1.gain"), &[e]);
                p.zeros(n("ln1.bias"), &[e]);
                for w in ["q", "k", "v", "o"] {
                    p.glorot(n(&format!("attn.w{w}")), &[e, e], &mut rng);
                    p.zeros(n(&format!("attn.b{w}")), &[e]);
                }
            }
            if a.use_ff {
                p.ones(n("ln2.gain"), &[e]);
                p.zeros(n("ln2.bias"), &[e]);
                p.glorot(n("ff.w1"), &[e, m.mlp_dim], &mut rng);
                p.zeros(n("ff.b1"), &[m.mlp_dim]);
                p.glorot(n("ff.w2"), &[m.mlp_dim, e], &mut rng);
                p.zeros(n("ff.b2"), &[e]);
            }
            if a.use_memory {
                p.glorot(n("gwl.down"), &[e, d], &mut rng);
                for w in ["wq", "wk", "wv"] {
                    p.glorot(n(&format!("gwl.{w}")), &[d, ab * d], &mut rng);
                }
                p.glorot(n("gwl.wo"), &[ab * d, d], &mut rng);
                p.ones(n("gwl.ln.gain"), &[d]);
                p.zeros(n("gwl.ln.bias"), &[d]);
                if a.use_hopfield {
                    p.glorot(n("gwl.up"), &[d, e], &mut rng);
                } else {
                    p.glorot(n("gwl.read.wq"), &[e, ab * d], &mut rng);
                    p.glorot(n("gwl.read.wk"), &[d, ab * d], &mut rng);
                    p.glorot(n("gwl.read.wv"), &[d, ab * d], &mut rng);
                    p.glorot(n("gwl.read.wo"), &[ab * d, e], &mut rng);
                }
            }
        }
        if m.pre_norm {
            p.ones("head.ln.gain", &[e]);
            p.zeros("head.ln.bias", &[e]);
        }
        p.glorot("head.w", &[e, m.classes], &mut rng);
        p.zeros("head.b", &[m.classes]);

        let mut model = Model {
            cfg: cfg.clone(),
            params: p,
            memories: Vec::new(),
        };
        model.reset_memory(0)?;
        Ok(model)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn memories(&self) -> &[ExplicitMemory] {
        &self.memories
    }

    pub fn memories_mut(&mut self) -> &mut [ExplicitMemory] {
        &mut self.memories
    }

    /// Re-run memory initialization. Epoch 0 gives the initial state; other
    /// epochs draw fresh values (used by `reset_memory_each_epoch`).
    pub fn reset_memory(&mut self, epoch: u64) -> Result<()> {
        let m = &self.cfg.model;
        self.memories.clear();
        if !self.cfg.ablation.use_memory {
            return Ok(());
        }
        for l in 0..m.layers {
            let seed = mix_seed(self.cfg.seed, MEMORY_STREAM + epoch * m.layers as u64 + l as u64);
            let mut mem = ExplicitMemory::init(m.memory_init, m.memory_slots, m.slot_dim, seed, self.cfg.loss.alpha)?;
            mem.norm_scope = m.norm_scope;
            self.memories.push(mem);
        }
        Ok(())
    }

    fn bottleneck_for(&self, positions: usize) -> BottleneckConfig {
        let mut b = self.cfg.bottleneck();
        let budget = match b.topk_scope {
            TopkScope::Slot => positions,
            TopkScope::Head => positions * self.cfg.model.memory_slots,
        };
        // A short batch can hold fewer positions than k; it keeps them all.
        b.k = b.k.map(|k| k.min(budget));
        b
    }

    /// Forward `images [B,H,W,C]` on `tape`. Memory is read, never written;
    /// call `commit_memory` afterwards in training mode.
    pub fn forward(&self, tape: &mut GradTape, pv: &ParamVars, images: &Tensor) -> Result<ForwardOutput> {
        let m = &self.cfg.model;
        let a = &self.cfg.ablation;
        let s = images.shape();
        if s.len() != 4 || s[1] != m.image_size || s[2] != m.image_size || s[3] != m.channels {
            return Err(Error::shape(
                "model input (batch, image, image, channels)",
                s,
                &[s.first().copied().unwrap_or(0), m.image_size, m.image_size, m.channels],
            ));
        }
        let b = s[0];
        let n = m.patch_count();
        let patches = tape.constant(patchify_batch(images, m.patch_size)?);
        let mut x = embed_patches(tape, patches, pv["embed.proj"], pv["embed.pos"])?;
        let mut traces = Vec::with_capacity(m.layers);
        let mut losses = Vec::new();

        for l in 0..m.layers {
            let nm = layer_names(l);
            let mut trace = LayerTrace::default();
            if a.use_sa {
                let ap = AttentionParams {
                    wq: pv[&nm("attn.wq")],
                    bq: Some(pv[&nm("attn.bq")]),
                    wk: pv[&nm("attn.wk")],
                    bk: Some(pv[&nm("attn.bk")]),
                    wv: pv[&nm("attn.wv")],
                    bv: Some(pv[&nm("attn.bv")]),
                    wo: pv[&nm("attn.wo")],
                    bo: Some(pv[&nm("attn.bo")]),
                    heads: m.heads,
                };
                let (gain, bias) = (pv[&nm("ln1.gain")], pv[&nm("ln1.bias")]);
                x = if m.pre_norm {
                    let h = tape.layer_norm(x, Some(gain), Some(bias))?;
                    let out = self_attention(tape, h, &ap)?;
                    trace.sa_scores = Some(out.scores);
                    tape.add(x, out.output)?
                } else {
                    let out = self_attention(tape, x, &ap)?;
                    trace.sa_scores = Some(out.scores);
                    let r = tape.add(x, out.output)?;
                    tape.layer_norm(r, Some(gain), Some(bias))?
                };
            }
            if a.use_ff {
                let fp = FeedForwardParams {
                    w1: pv[&nm("ff.w1")],
                    b1: pv[&nm("ff.b1")],
                    w2: pv[&nm("ff.w2")],
                    b2: pv[&nm("ff.b2")],
                };
                let (gain, bias) = (pv[&nm("ln2.gain")], pv[&nm("ln2.bias")]);
                x = if m.pre_norm {
                    let h = tape.layer_norm(x, Some(gain), Some(bias))?;
                    let out = feed_forward(tape, h, &fp)?;
                    tape.add(x, out)?
                } else {
                    let out = feed_forward(tape, x, &fp)?;
                    let r = tape.add(x, out)?;
                    tape.layer_norm(r, Some(gain), Some(bias))?
                };
            }
            if a.use_memory {
                let (out, ws) = self.workspace_layer(tape, pv, l, x, b * n)?;
                losses.push(ws.balance_loss);
                trace.workspace = Some(ws);
                x = unsquash(tape, out, b)?;
            }
            traces.push(trace);
        }

        if m.pre_norm {
            x = tape.layer_norm(x, Some(pv["head.ln.gain"]), Some(pv["head.ln.bias"]))?;
        }
        let logits = pooled_head(tape, x, pv["head.w"], pv["head.b"])?;
        let bottleneck_loss = match losses.split_first() {
            None => None,
            Some((&first, rest)) => {
                let mut acc = first;
                for &v in rest {
                    acc = tape.add(acc, v)?;
                }
                if self.cfg.loss.layer_reduction == LayerReduction::Mean {
                    acc = tape.scale(acc, 1.0 / losses.len() as Scalar);
                }
                Some(acc)
            }
        };
        Ok(ForwardOutput {
            logits,
            bottleneck_loss,
            layers: traces,
            batch: b,
        })
    }

    fn workspace_layer(&self, tape: &mut GradTape, pv: &ParamVars, l: usize, x: Var, positions: usize) -> Result<(Var, WorkspaceTrace)> {
        let m = &self.cfg.model;
        let nm = layer_names(l);
        let xi = squash(tape, x)?;
        let old = tape.constant(self.memories[l].gamma().clone());
        let wp = WorkspaceLayerParams {
            down_projection: pv[&nm("gwl.down")],
            wq: pv[&nm("gwl.wq")],
            wk: pv[&nm("gwl.wk")],
            wv: pv[&nm("gwl.wv")],
            wo: pv[&nm("gwl.wo")],
            ln_gain: pv[&nm("gwl.ln.gain")],
            ln_bias: pv[&nm("gwl.ln.bias")],
        };
        let bcfg = self.bottleneck_for(positions);
        let bo = bottleneck_attention(tape, old, xi, &wp, &bcfg)?;
        let gamma = ewma_update(tape, old, bo.gamma_hat, self.cfg.loss.alpha, m.norm_scope)?;
        let scores = match self.cfg.loss.importance {
            ImportanceScores::PreMask => bo.pre_mask,
            ImportanceScores::PostMask => bo.post_mask,
        };
        let loss = balance_loss_with(tape, scores, bo.post_mask, bcfg.sigma, bcfg.epsilon)?;
        let (read, attractors, retrieved) = if self.cfg.ablation.use_hopfield {
            let att = tape.matmul(gamma, pv[&nm("gwl.up")])?;
            let hat = retrieve_on_tape(tape, xi, att, m.beta, m.hopfield_iters)?;
            (hat, Some(att), Some(hat))
        } else {
            let r = memory_readout(tape, pv, &nm, xi, gamma, m.bottleneck_heads, m.slot_dim)?;
            (r, None, None)
        };
        let out = tape.add(read, xi)?;
        Ok((
            out,
            WorkspaceTrace {
                squashed: xi,
                pre_mask: bo.pre_mask,
                post_mask: bo.post_mask,
                gamma,
                balance_loss: loss,
                attractors,
                retrieved,
            },
        ))
    }

    /// Write the post-EWMA memory of every workspace layer back into the bank.
    pub fn commit_memory(&mut self, tape: &GradTape, out: &ForwardOutput) -> Result<()> {
        for (l, t) in out.layers.iter().enumerate() {
            if let Some(ws) = t.workspace {
                self.memories[l].set_gamma(tape.value(ws.gamma).clone())?;
            }
        }
        Ok(())
    }

    /// Distinct-patch ratio averaged over workspace layers, and mean Hopfield
    /// energy drop. Without a bottleneck mask the ratio is 1 by definition.
    pub fn workspace_stats(&self, tape: &GradTape, out: &ForwardOutput) -> Result<WorkspaceStats> {
        let mut ratio = 0.0;
        let mut drop = 0.0;
        let mut count = 0usize;
        let mut hop = 0usize;
        for t in &out.layers {
            let Some(ws) = t.workspace else { continue };
            count += 1;
            ratio += if self.cfg.ablation.use_bottleneck {
                let diag = BottleneckDiagnostics::from_scores(tape.value(ws.pre_mask).clone(), tape.value(ws.post_mask).clone())?;
                diag.distinct_patch_ratio
            } else {
                1.0
            };
            if let (Some(att), Some(hat)) = (ws.attractors, ws.retrieved) {
                let m = &self.cfg.model;
                let bank = AttractorBank::from_attractors(tape.value(att).clone(), m.beta, m.hopfield_iters, m.hopfield_tol)?;
                drop += mean_energy_drop(tape.value(ws.squashed), tape.value(hat), &bank)?;
                hop += 1;
            }
        }
        Ok(WorkspaceStats {
            distinct_patch_ratio: if count == 0 { 1.0 } else { ratio / count as f64 },
            mean_energy_drop: if hop == 0 { 0.0 } else { drop / hop as f64 },
        })
    }
}

/// Cross-attention readout used when the Hopfield retrieval is ablated:
/// patch queries against memory keys and values, `heads` heads of width D.
fn memory_readout(
    tape: &mut GradTape,
    pv: &ParamVars,
    nm: &impl Fn(&str) -> String,
    xi: Var,
    gamma: Var,
    heads: usize,
    d: usize,
) -> Result<Var> {
    let p = tape.shape(xi)[0];
    let slots = tape.shape(gamma)[0];
    let q = linear(tape, xi, pv[&nm("gwl.read.wq")], None)?;
    let q = tape.reshape(q, &[p, heads, d])?;
    let q = tape.permute(q, &[1, 0, 2])?;
    let k = linear(tape, gamma, pv[&nm("gwl.read.wk")], None)?;
    let k = tape.reshape(k, &[slots, heads, d])?;
    let k = tape.permute(k, &[1, 2, 0])?;
    let v = linear(tape, gamma, pv[&nm("gwl.read.wv")], None)?;
    let v = tape.reshape(v, &[slots, heads, d])?;
    let v = tape.permute(v, &[1, 0, 2])?;
    let s = tape.bmm(q, k)?;
    let s = tape.scale(s, 1.0 / (d as Scalar).sqrt());
    let w = tape.softmax(s);
    let o = tape.bmm(w, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[p, heads * d])?;
    linear(tape, o, pv[&nm("gwl.read.wo")], None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[b, 32, 32, 1], 1.0, &mut rng)
    }

    #[test]
    fn tiny_forward_shapes() {
        let cfg = TrainConfig::tiny();
        let model = build_model(&cfg).unwrap();
        let mut tape = GradTape::new();
        let pv = model.params.register(&mut tape);
        let out = model.forward(&mut tape, &pv, &images(2, 1)).unwrap();
        assert_eq!(tape.shape(out.logits), &[2, cfg.model.classes]);
        assert_eq!(out.layers.len(), 2);
        let ws = out.layers[0].workspace.unwrap();
        assert_eq!(tape.shape(ws.pre_mask), &[4, 8, 32]);
        assert!(out.bottleneck_loss.is_some());
    }

    #[test]
    fn analytic_count_matches_built_model() {
        let mut cfg = TrainConfig::tiny();
        for (mem, hop, sa, ff) in [(true, true, true, true), (true, false, true, true), (false, false, true, false), (false, false, false, true)] {
            cfg.ablation.use_memory = mem;
            cfg.ablation.use_hopfield = hop;
            cfg.ablation.use_bottleneck = mem;
            cfg.ablation.use_sa = sa;
            cfg.ablation.use_ff = ff;
            let model = build_model(&cfg).unwrap();
            assert_eq!(model.params.count(), param_count(&cfg.model, &cfg.ablation));
        }
    }

    #[test]
    fn gwl_off_equals_plain_vit_count() {
        let mut cfg = TrainConfig::tiny();
        cfg.ablation.use_memory = false;
        cfg.ablation.use_hopfield = false;
        cfg.ablation.use_bottleneck = false;
        let m = &cfg.model;
        let (e, h) = (m.embed_dim, m.mlp_dim);
        let vit = m.patch_dim() * e + m.patch_count() * e + m.layers * (4 * e + 4 * (e * e + e) + 2 * e * h + h + e) + 2 * e + e * m.classes + m.classes;
        assert_eq!(build_model(&cfg).unwrap().params.count(), vit);
    }

    #[test]
    fn small_proportions_overhead_under_ten_percent() {
        // ViT-Small proportions scaled down: E=384, A=6, mlp=4E, 4 layers.
        let mut cfg = TrainConfig::default();
        cfg.model.embed_dim = 384;
        cfg.model.heads = 6;
        cfg.model.mlp_dim = 1536;
        cfg.model.layers = 4;
        let ait = param_count(&cfg.model, &cfg.ablation);
        let mut plain = cfg.ablation.clone();
        plain.use_memory = false;
        plain.use_hopfield = false;
        plain.use_bottleneck = false;
        let vit = param_count(&cfg.model, &plain);
        assert!(ait > vit);
        assert!(((ait - vit) as f64) / (vit as f64) < 0.10, "{ait} vs {vit}");
    }

    #[test]
    fn eval_forward_leaves_memory_untouched() {
        let cfg = TrainConfig::tiny();
        let mut model = build_model(&cfg).unwrap();
        let before: Vec<Tensor> = model.memories().iter().map(|m| m.gamma().clone()).collect();
        let mut tape = GradTape::new();
        let pv = model.params.register(&mut tape);
        let out = model.forward(&mut tape, &pv, &images(2, 2)).unwrap();
        let after: Vec<Tensor> = model.memories().iter().map(|m| m.gamma().clone()).collect();
        assert_eq!(before, after);
        model.commit_memory(&tape, &out).unwrap();
        for mem in model.memories() {
            assert!((mem.memory_norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_image_is_shape_error() {
        let cfg = TrainConfig::tiny();
        let model = build_model(&cfg).unwrap();
        let mut tape = GradTape::new();
        let pv = model.params.register(&mut tape);
        let bad = Tensor::zeros(&[1, 28, 28, 1]);
        assert!(matches!(model.forward(&mut tape, &pv, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn readout_variant_runs() {
        let mut cfg = TrainConfig::tiny();
        cfg.ablation.use_hopfield = false;
        let model = build_model(&cfg).unwrap();
        let mut tape = GradTape::new();
        let pv = model.params.register(&mut tape);
        let out = model.forward(&mut tape, &pv, &images(3, 3)).unwrap();
        assert_eq!(tape.shape(out.logits), &[3, 2]);
    }
}
