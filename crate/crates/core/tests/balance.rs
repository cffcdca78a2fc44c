use ait_core::workspace::{
    balance_loss_with, bottleneck_attention, distinct_patch_ratio, BottleneckConfig, BottleneckDiagnostics, TopkScope,
    WorkspaceLayerParams,
};
use ait_core::{GradTape, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Descends the balance loss alone on the down, query and key maps, with
/// near-identical memory slots, and returns the distinct ratio before and after.
fn spread_under_balance_loss(seed: u64, steps: usize) -> (f64, f64) {
    let (m, d, heads, positions, e) = (8, 8, 2, 256, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[positions, e], 1.0, &mut rng);
    let shared = Tensor::randn(&[d], 1.0, &mut rng);
    let mut gamma = Tensor::randn(&[m, d], 0.1, &mut rng);
    for row in gamma.data_mut().chunks_mut(d) {
        row.iter_mut().zip(shared.data()).for_each(|(a, &b)| *a += b);
    }
    let mut trained = [
        Tensor::randn(&[e, d], 0.3, &mut rng),
        Tensor::randn(&[d, heads * d], 0.3, &mut rng),
        Tensor::randn(&[d, heads * d], 0.3, &mut rng),
    ];
    let fixed = [
        Tensor::randn(&[d, heads * d], 0.3, &mut rng),
        Tensor::randn(&[heads * d, d], 0.3, &mut rng),
        Tensor::ones(&[d]),
        Tensor::zeros(&[d]),
    ];
    let cfg = BottleneckConfig {
        heads,
        k: Some(4),
        topk_scope: TopkScope::Slot,
        sigma: 1.0,
        epsilon: 1e-10,
    };
    let mut ratios = Vec::new();
    for _ in 0..=steps {
        let mut tape = GradTape::new();
        let t: Vec<_> = trained.iter().map(|w| tape.param(w.clone())).collect();
        let f: Vec<_> = fixed.iter().map(|w| tape.constant(w.clone())).collect();
        let p = WorkspaceLayerParams {
            down_projection: t[0],
            wq: t[1],
            wk: t[2],
            wv: f[0],
            wo: f[1],
            ln_gain: f[2],
            ln_bias: f[3],
        };
        let (g, xv) = (tape.constant(gamma.clone()), tape.constant(x.clone()));
        let out = bottleneck_attention(&mut tape, g, xv, &p, &cfg).unwrap();
        let diag = BottleneckDiagnostics::from_scores(tape.value(out.pre_mask).clone(), tape.value(out.post_mask).clone()).unwrap();
        ratios.push(distinct_patch_ratio(&diag));
        let loss = balance_loss_with(&mut tape, out.pre_mask, out.post_mask, cfg.sigma, cfg.epsilon).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (w, v) in trained.iter_mut().zip(&t) {
            let g = grads.get(*v).unwrap();
            let norm = g.iter().map(|a| a * a).sum::<Scalar>().sqrt().max(1e-12);
            w.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a -= 0.01 * b / norm);
        }
    }
    (ratios[0], *ratios.last().unwrap())
}

#[test]
fn balance_loss_spreads_slot_selections() {
    for seed in 0..3 {
        let (before, after) = spread_under_balance_loss(seed, 300);
        assert!(after > before + 0.2, "seed {seed}: {before} -> {after}");
    }
}
