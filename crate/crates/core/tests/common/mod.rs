#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ait_core::config::TrainConfig;
use ait_core::gradcheck::{check_piecewise_at, weighted_sum, GradCheckReport, DEFAULT_STEP};
use ait_core::hopfield::retrieve_on_tape;
use ait_core::model::Model;
use ait_core::params::ParamVars;
use ait_core::vit::{embed_patches, feed_forward, pooled_head, self_attention, AttentionParams, FeedForwardParams};
use ait_core::workspace::{
    balance_loss, balance_loss_with, bottleneck_attention, ewma_update, squash, unsquash, BottleneckConfig, NormScope, TopkScope,
    WorkspaceLayerParams,
};
use ait_core::{GradTape, Result, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Returns the scalar loss and a key naming its smooth region.
pub type CaseFn = Box<dyn Fn(&mut GradTape, &[Var]) -> Result<(Var, u64)>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

impl GradCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        let all: Vec<Vec<usize>> = self.inputs.iter().map(|t| (0..t.len()).collect()).collect();
        check_piecewise_at(&self.inputs, &all, DEFAULT_STEP, &self.f)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(1.5..2.5)).collect()).unwrap()
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut GradTape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(move |t, x| Ok((f(t, x)?, 0))),
    }
}

/// A case whose loss passes through a top-k mask; `f` returns the loss and
/// the masked tensor, whose support keys the region.
fn masked_case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut GradTape, &[Var]) -> Result<(Var, Var)> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(move |t, x| {
            let (loss, masked) = f(t, x)?;
            Ok((loss, support_key(t.value(masked))))
        }),
    }
}

pub fn support_key(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    for &v in t.data() {
        (v != 0.0).hash(&mut h);
    }
    h.finish()
}

/// One case per differentiable operation and composite block, all extents
/// at most 8.
pub fn grad_cases() -> Vec<GradCase> {
    grad_cases_seeded(7)
}

pub fn grad_cases_seeded(seed: u64) -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let mut v = vec![
        case("matmul", vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |t, x| {
            let y = t.matmul(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("bmm", vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 2])], |t, x| {
            let y = t.bmm(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("add", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, x| {
            let y = t.add(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("sub", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, x| {
            let y = t.sub(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("mul", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, x| {
            let y = t.mul(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("div", vec![randn(r, &[3, 4]), positive(r, &[3, 4])], |t, x| {
            let y = t.div(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("add_bias", vec![randn(r, &[2, 3, 4]), randn(r, &[4])], |t, x| {
            let y = t.add_bias(x[0], x[1])?;
            weighted_sum(t, y)
        }),
        case("scale", vec![randn(r, &[3, 4])], |t, x| {
            let y = t.scale(x[0], -1.7);
            weighted_sum(t, y)
        }),
        case("add_const", vec![randn(r, &[3, 4])], |t, x| {
            let y = t.add_const(x[0], 0.3);
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        }),
        case("sum", vec![randn(r, &[3, 4])], |t, x| {
            let y = t.mul(x[0], x[0])?;
            Ok(t.sum(y))
        }),
        case("mean", vec![randn(r, &[3, 4])], |t, x| {
            let y = t.mul(x[0], x[0])?;
            Ok(t.mean(y))
        }),
        case("sum_axis", vec![randn(r, &[2, 3, 4])], |t, x| {
            let y = t.sum_axis(x[0], 1)?;
            weighted_sum(t, y)
        }),
        case("mean_last", vec![randn(r, &[3, 5])], |t, x| {
            let y = t.mean_last(x[0]);
            weighted_sum(t, y)
        }),
        case("var_last", vec![randn(r, &[3, 5])], |t, x| {
            let y = t.var_last(x[0]);
            weighted_sum(t, y)
        }),
        case("max_last", vec![randn(r, &[3, 5])], |t, x| {
            let y = t.max_last(x[0]);
            weighted_sum(t, y)
        }),
        case("softmax", vec![randn(r, &[3, 5])], |t, x| {
            let y = t.softmax(x[0]);
            weighted_sum(t, y)
        }),
        case("layer_norm", vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])], |t, x| {
            let y = t.layer_norm(x[0], Some(x[1]), Some(x[2]))?;
            weighted_sum(t, y)
        }),
        case("gelu", vec![randn(r, &[3, 5])], |t, x| {
            let y = t.gelu(x[0]);
            weighted_sum(t, y)
        }),
        case("normalize_all", vec![randn(r, &[3, 4])], |t, x| {
            let y = t.normalize_all(x[0]);
            weighted_sum(t, y)
        }),
        case("normalize_rows", vec![randn(r, &[3, 4])], |t, x| {
            let y = t.normalize_rows(x[0]);
            weighted_sum(t, y)
        }),
        case("reshape", vec![randn(r, &[2, 6])], |t, x| {
            let y = t.reshape(x[0], &[3, 4])?;
            let y = t.softmax(y);
            weighted_sum(t, y)
        }),
        case("permute", vec![randn(r, &[2, 3, 4])], |t, x| {
            let y = t.permute(x[0], &[2, 0, 1])?;
            let y = t.softmax(y);
            weighted_sum(t, y)
        }),
        case("transpose", vec![randn(r, &[2, 3, 4])], |t, x| {
            let y = t.transpose(x[0])?;
            let y = t.softmax(y);
            weighted_sum(t, y)
        }),
        case("concat", vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |t, x| {
            let y = t.concat(&[x[0], x[1]], 1)?;
            let y = t.softmax(y);
            weighted_sum(t, y)
        }),
        masked_case("top_k_mask", vec![randn(r, &[3, 6])], |t, x| {
            let y = t.top_k_mask(x[0], 2)?;
            Ok((weighted_sum(t, y)?, y))
        }),
        case("cross_entropy", vec![randn(r, &[4, 3])], |t, x| t.cross_entropy(x[0], &[0, 2, 1, 2])),
    ];

    let scale = |r: &mut ChaCha8Rng, s: &[usize]| Tensor::randn(s, 0.4, r);
    v.push(case(
        "embed_patches",
        vec![random_images(2, 2, 6, 9).reshape(&[2, 4, 6]).unwrap(), scale(r, &[6, 5]), scale(r, &[4, 5])],
        |t, x| {
            let y = embed_patches(t, x[0], x[1], x[2])?;
            weighted_sum(t, y)
        },
    ));
    let e = 4;
    v.push(case(
        "self_attention",
        vec![
            randn(r, &[1, 3, e]),
            scale(r, &[e, e]),
            scale(r, &[e]),
            scale(r, &[e, e]),
            scale(r, &[e]),
            scale(r, &[e, e]),
            scale(r, &[e]),
            scale(r, &[e, e]),
            scale(r, &[e]),
        ],
        |t, x| {
            let p = AttentionParams {
                wq: x[1],
                bq: Some(x[2]),
                wk: x[3],
                bk: Some(x[4]),
                wv: x[5],
                bv: Some(x[6]),
                wo: x[7],
                bo: Some(x[8]),
                heads: 2,
            };
            let y = self_attention(t, x[0], &p)?.output;
            weighted_sum(t, y)
        },
    ));
    v.push(case(
        "feed_forward",
        vec![randn(r, &[2, 3, 4]), scale(r, &[4, 8]), scale(r, &[8]), scale(r, &[8, 4]), scale(r, &[4])],
        |t, x| {
            let p = FeedForwardParams {
                w1: x[1],
                b1: x[2],
                w2: x[3],
                b2: x[4],
            };
            let y = feed_forward(t, x[0], &p)?;
            weighted_sum(t, y)
        },
    ));
    v.push(case(
        "pooled_head",
        vec![randn(r, &[2, 3, 4]), scale(r, &[4, 3]), scale(r, &[3])],
        |t, x| {
            let y = pooled_head(t, x[0], x[1], x[2])?;
            weighted_sum(t, y)
        },
    ));
    v.push(case("squash_unsquash", vec![randn(r, &[2, 3, 4])], |t, x| {
        let s = squash(t, x[0])?;
        let s = t.softmax(s);
        let y = unsquash(t, s, 2)?;
        weighted_sum(t, y)
    }));
    let d = 4;
    let bottleneck_inputs = vec![
        randn(r, &[3, d]),
        randn(r, &[6, 5]),
        scale(r, &[5, d]),
        scale(r, &[d, 2 * d]),
        scale(r, &[d, 2 * d]),
        scale(r, &[d, 2 * d]),
        scale(r, &[2 * d, d]),
        randn(r, &[d]),
        randn(r, &[d]),
    ];
    v.push(masked_case("bottleneck_attention", bottleneck_inputs, |t, x| {
        let p = WorkspaceLayerParams {
            down_projection: x[2],
            wq: x[3],
            wk: x[4],
            wv: x[5],
            wo: x[6],
            ln_gain: x[7],
            ln_bias: x[8],
        };
        let cfg = BottleneckConfig {
            heads: 2,
            k: Some(3),
            topk_scope: TopkScope::Slot,
            sigma: 1e-2,
            epsilon: 1e-10,
        };
        let out = bottleneck_attention(t, x[0], x[1], &p, &cfg)?;
        let balance = balance_loss(t, out.post_mask, cfg.sigma, cfg.epsilon)?;
        let loss = weighted_sum(t, out.gamma_hat)?;
        Ok((t.add(loss, balance)?, out.post_mask))
    }));
    let prior = randn(r, &[3, 4]);
    v.push(case("ewma_update", vec![randn(r, &[3, 4])], move |t, x| {
        let old = t.constant(prior.clone());
        let y = ewma_update(t, old, x[0], 0.9, NormScope::Memory)?;
        weighted_sum(t, y)
    }));
    let prior = randn(r, &[3, 4]);
    v.push(case("ewma_update_slot", vec![randn(r, &[3, 4])], move |t, x| {
        let old = t.constant(prior.clone());
        let y = ewma_update(t, old, x[0], 0.5, NormScope::Slot)?;
        weighted_sum(t, y)
    }));
    v.push(masked_case("balance_loss", vec![randn(r, &[2, 3, 6])], |t, x| {
        let s = t.softmax(x[0]);
        let m = t.top_k_mask(s, 3)?;
        Ok((balance_loss(t, m, 0.5, 1e-10)?, m))
    }));
    v.push(case("hopfield_retrieval", vec![randn(r, &[4, 5]), randn(r, &[3, 5])], |t, x| {
        let y = retrieve_on_tape(t, x[0], x[1], 1.0, 1)?;
        weighted_sum(t, y)
    }));
    v.push(case("hopfield_retrieval_3", vec![randn(r, &[4, 5]), scale(r, &[3, 5])], |t, x| {
        let y = retrieve_on_tape(t, x[0], x[1], 0.7, 3)?;
        weighted_sum(t, y)
    }));
    v.push(masked_case("balance_loss_pre_mask", vec![randn(r, &[2, 3, 6])], |t, x| {
        let s = t.softmax(x[0]);
        let m = t.top_k_mask(s, 3)?;
        Ok((balance_loss_with(t, s, m, 0.5, 1e-10)?, m))
    }));
    v
}

/// AiT-tiny (2 layers, E=64, M=8, D=8, k=4, β=1, one retrieval step) on
/// 8×8 single-channel images cut into 4 patches.
pub fn tiny_grad_config() -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.model.image_size = 8;
    cfg.model.patch_size = 4;
    cfg.model.channels = 1;
    cfg.model.hopfield_iters = 1;
    cfg.model.beta = 1.0;
    cfg
}

/// Gradient check of the training loss against every parameter tensor of
/// `model`, at `per_tensor` sampled coordinates each. The region key hashes
/// the top-k supports of every workspace layer.
pub fn model_grad_check(model: &Model, images: &Tensor, labels: &[usize], per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_tensor {
                (0..t.len()).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..t.len())).collect()
            }
        })
        .collect();
    let labels = labels.to_vec();
    check_piecewise_at(&inputs, &indices, DEFAULT_STEP, |tape, vars| {
        let pv: ParamVars = names.iter().cloned().zip(vars.iter().copied()).collect();
        let out = model.forward(tape, &pv, images)?;
        let mut h = DefaultHasher::new();
        for ws in out.layers.iter().filter_map(|l| l.workspace) {
            support_key(tape.value(ws.post_mask)).hash(&mut h);
        }
        let task = tape.cross_entropy(out.logits, &labels)?;
        let loss = match out.bottleneck_loss {
            Some(b) => tape.add(task, b)?,
            None => task,
        };
        Ok((loss, h.finish()))
    })
}

pub fn random_images(batch: usize, side: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * side * side * channels;
    Tensor::new(&[batch, side, side, channels], (0..n).map(|_| rng.random::<Scalar>()).collect()).unwrap()
}
