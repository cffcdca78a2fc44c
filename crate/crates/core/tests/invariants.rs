use ait_core::analysis::{row_sparsity, MASS_SLACK};
use ait_core::hopfield::{retrieve_batch, AttractorBank};
use ait_core::tensor::{softmax, top_k_mask};
use ait_core::workspace::{
    balance_loss, balance_loss_value, bottleneck_attention, squash, unsquash, BottleneckConfig, BottleneckDiagnostics,
    ExplicitMemory, MemoryInit, TopkScope, WorkspaceLayerParams,
};
use ait_core::{GradTape, Scalar, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, range: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-range..range, n)
        .prop_map(move |v| Tensor::new(&shape, v.into_iter().map(|x| x as Scalar).collect()).unwrap())
}

fn shape2(max: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max, 1..=max).prop_map(|(a, b)| vec![a, b])
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

/// Mask of shape `[heads, slots, positions]` keeping `k` random-scored
/// entries per row, built from softmax scores.
fn post_mask(heads: usize, slots: usize, positions: usize, k: usize) -> impl Strategy<Value = Tensor> {
    tensor(vec![heads, slots, positions], 3.0).prop_map(move |t| top_k_mask(&softmax(&t), k.min(positions)).unwrap())
}

fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let inner: usize = s[axis + 1..].iter().product();
    let len = s[axis];
    let mut out = t.clone();
    for o in 0..t.len() / (len * inner) {
        for (dst, &src) in perm.iter().enumerate() {
            let from = &t.data()[(o * len + src) * inner..][..inner];
            out.data_mut()[(o * len + dst) * inner..][..inner].copy_from_slice(from);
        }
    }
    out
}

/// Smallest subset (of any membership) whose mass reaches the threshold,
/// by exhaustive enumeration.
fn brute_force_sparsity(row: &[Scalar], threshold: f64) -> usize {
    let n = row.len();
    let mut best = n;
    for mask in 1u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size >= best {
            continue;
        }
        let mass: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| row[i] as f64).sum();
        if mass >= threshold - MASS_SLACK {
            best = size;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(t in shape2(8).prop_flat_map(|s| tensor(s, 20.0))) {
        let n = t.shape()[1];
        for row in softmax(&t).data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }

    #[test]
    fn top_k_keeps_exactly_k(
        (t, k) in shape2(8).prop_flat_map(|s| { let n = s[1]; (tensor(s, 5.0), 1..=n) })
    ) {
        let n = t.shape()[1];
        let p = softmax(&t);
        let masked = top_k_mask(&p, k).unwrap();
        for (row, orig) in masked.data().chunks(n).zip(p.data().chunks(n)) {
            prop_assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), k);
            let kept_min = row.iter().filter(|&&v| v != 0.0).cloned().fold(Scalar::INFINITY, Scalar::min);
            let dropped_max = row.iter().zip(orig).filter(|(&v, _)| v == 0.0).map(|(_, &o)| o).fold(Scalar::NEG_INFINITY, Scalar::max);
            prop_assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn bottleneck_rows_have_min_k_survivors(
        slots in 1usize..5, positions in 1usize..9, k in 1usize..12, seed in any::<u64>()
    ) {
        let (d, heads) = (4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = GradTape::new();
        let gamma = tape.constant(Tensor::randn(&[slots, d], 1.0, &mut rng));
        let x = tape.constant(Tensor::randn(&[positions, 6], 1.0, &mut rng));
        let mut w = |s: &[usize]| tape.constant(Tensor::randn(s, 0.5, &mut rng));
        let p = WorkspaceLayerParams {
            down_projection: w(&[6, d]),
            wq: w(&[d, heads * d]),
            wk: w(&[d, heads * d]),
            wv: w(&[d, heads * d]),
            wo: w(&[heads * d, d]),
            ln_gain: w(&[d]),
            ln_bias: w(&[d]),
        };
        let cfg = BottleneckConfig { heads, k: Some(k.min(positions)), topk_scope: TopkScope::Slot, sigma: 0.0, epsilon: 1e-10 };
        let out = bottleneck_attention(&mut tape, gamma, x, &p, &cfg).unwrap();
        for row in tape.value(out.post_mask).data().chunks(positions) {
            prop_assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), k.min(positions));
        }
    }

    #[test]
    fn balance_loss_ignores_slot_and_position_order(
        (m, sp, pp) in (1usize..5, 1usize..9).prop_flat_map(|(s, l)| (post_mask(2, s, l, 3), permutation(s), permutation(l)))
    ) {
        let value = |t: &Tensor| {
            let d = BottleneckDiagnostics::from_scores(t.clone(), t.clone()).unwrap();
            balance_loss_value(&d, 1e-2, 1e-10)
        };
        let tape_value = |t: &Tensor| {
            let mut tape = GradTape::new();
            let v = tape.constant(t.clone());
            let l = balance_loss(&mut tape, v, 1e-2, 1e-10).unwrap();
            tape.value(l).item() as f64
        };
        let shuffled = permute_axis(&permute_axis(&m, 1, &sp), 2, &pp);
        let (a, b) = (value(&m), value(&shuffled));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        let (a, b) = (tape_value(&m), tape_value(&shuffled));
        prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn retrieval_is_permutation_equivariant(
        (states, bank, rows, slots) in (1usize..7, 1usize..6).prop_flat_map(|(p, m)| (
            tensor(vec![p, 5], 2.0), tensor(vec![m, 5], 2.0), permutation(p), permutation(m)
        )),
        beta in 0.05f64..4.0
    ) {
        let b = AttractorBank::from_attractors(bank.clone(), beta, 3, 0.0).unwrap();
        let (out, _) = retrieve_batch(&states, &b).unwrap();
        let (out_p, _) = retrieve_batch(&permute_axis(&states, 0, &rows), &b).unwrap();
        prop_assert_eq!(permute_axis(&out, 0, &rows), out_p);

        let b2 = AttractorBank::from_attractors(permute_axis(&bank, 0, &slots), beta, 3, 0.0).unwrap();
        let (out_s, _) = retrieve_batch(&states, &b2).unwrap();
        for (x, y) in out.data().iter().zip(out_s.data()) {
            prop_assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn energy_never_rises(
        (states, bank) in (1usize..6, 1usize..6, 1usize..9).prop_flat_map(|(p, m, e)| (tensor(vec![p, e], 3.0), tensor(vec![m, e], 3.0))),
        beta in 0.01f64..8.0
    ) {
        let b = AttractorBank::from_attractors(bank, beta, 5, 0.0).unwrap();
        let (_, report) = retrieve_batch(&states, &b).unwrap();
        for tr in &report.trace {
            for w in tr.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-6, "{:?}", tr);
            }
        }
    }

    #[test]
    fn squash_round_trips(x in (1usize..5, 1usize..6, 1usize..5).prop_flat_map(|(b, n, e)| tensor(vec![b, n, e], 4.0))) {
        let (b, n, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut tape = GradTape::new();
        let v = tape.constant(x.clone());
        let s = squash(&mut tape, v).unwrap();
        prop_assert_eq!(tape.shape(s), &[b * n, e]);
        for i in 0..b {
            for j in 0..n {
                prop_assert_eq!(tape.value(s).row(i * n + j), &x.data()[(i * n + j) * e..][..e]);
            }
        }
        let back = unsquash(&mut tape, s, b).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn memory_stays_unit_norm(
        updates in prop::collection::vec(tensor(vec![4, 3], 10.0), 1..8),
        alpha in 0.01f64..0.99,
        seed in any::<u64>()
    ) {
        let mut mem = ExplicitMemory::init(MemoryInit::Gaussian, 4, 3, seed, alpha).unwrap();
        for u in &updates {
            if u.frobenius_norm() == 0.0 { continue; }
            mem.update(u).unwrap();
            prop_assert!((mem.memory_norm() - 1.0).abs() <= 1e-6, "{}", mem.memory_norm());
        }
    }

    #[test]
    fn sparsity_matches_exhaustive_search(t in (1usize..9).prop_flat_map(|n| tensor(vec![1, n], 4.0)), thr in 0.05f64..1.0) {
        let p = softmax(&t);
        prop_assert_eq!(row_sparsity(p.data(), thr), brute_force_sparsity(p.data(), thr));
    }
}
