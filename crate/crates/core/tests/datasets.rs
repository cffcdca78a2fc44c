use std::fs;

use ait_core::data::{self, gen_triangle, gen_two_blob, LabeledImageSet};
use ait_core::{GradTape, Scalar, Tensor};

/// Intensity-weighted centroids of the 4-connected bright regions.
fn blob_centers(img: &[Scalar], side: usize) -> Vec<(f64, f64)> {
    let mut seen = vec![false; img.len()];
    let mut centers = Vec::new();
    for start in 0..img.len() {
        if seen[start] || img[start] < 0.05 {
            continue;
        }
        let (mut w, mut sy, mut sx) = (0.0, 0.0, 0.0);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / side, i % side);
            let v = img[i] as f64;
            w += v;
            sy += v * y as f64;
            sx += v * x as f64;
            let mut push = |j: usize| {
                if !seen[j] && img[j] >= 0.05 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - side);
            }
            if y + 1 < side {
                push(i + side);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < side {
                push(i + 1);
            }
        }
        centers.push((sy / w, sx / w));
    }
    centers
}

fn spread(c: &[(f64, f64)]) -> f64 {
    let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let s = [d(c[0], c[1]), d(c[1], c[2]), d(c[0], c[2])];
    s.iter().cloned().fold(f64::MIN, f64::max) / s.iter().cloned().fold(f64::MAX, f64::min) - 1.0
}

#[test]
fn triangle_labels_survive_geometric_recheck() {
    let set = gen_triangle(1000, 32, 21).unwrap();
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    assert!((450..=550).contains(&positives), "{positives}");
    let mut ambiguous = 0;
    for i in 0..set.len() {
        let c = blob_centers(set.image(i), 32);
        assert_eq!(c.len(), 3, "image {i}");
        let s = spread(&c);
        // Centroids are good to a few hundredths of a pixel; only sides
        // right at the 5% edge are left undecided.
        if (0.04..=0.06).contains(&s) {
            ambiguous += 1;
            continue;
        }
        assert_eq!(set.labels[i], usize::from(s < 0.05), "image {i}: spread {s}");
    }
    assert!(ambiguous <= 10, "{ambiguous}");
}

#[test]
fn generators_are_deterministic() {
    let a = data::encode(&gen_triangle(20, 32, 4).unwrap()).unwrap();
    assert_eq!(a, data::encode(&gen_triangle(20, 32, 4).unwrap()).unwrap());
    assert_ne!(a, data::encode(&gen_triangle(20, 32, 5).unwrap()).unwrap());
    let b = data::encode(&gen_two_blob(20, 16, 4).unwrap()).unwrap();
    assert_eq!(b, data::encode(&gen_two_blob(20, 16, 4).unwrap()).unwrap());
}

#[test]
fn two_blob_label_follows_the_column() {
    let set = gen_two_blob(200, 16, 8).unwrap();
    for i in 0..set.len() {
        let c = blob_centers(set.image(i), 16);
        assert_eq!(c.len(), 1);
        assert_eq!(set.labels[i], usize::from(c[0].1 >= 8.0), "image {i}: {:?}", c[0]);
    }
}

#[test]
fn stored_sets_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let set = gen_triangle(30, 16, 2).unwrap();
    let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    data::store(&set, &p1).unwrap();
    let back = data::load(&p1).unwrap();
    assert_eq!(back.images, set.images);
    assert_eq!(back.labels, set.labels);
    data::store(&back, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

/// Logistic regression on raw pixels, plain gradient descent on the tape.
fn linear_probe(train: &LabeledImageSet, test: &LabeledImageSet, steps: usize) -> f64 {
    let (h, w, c) = train.image_dims();
    let d = h * w * c;
    let flat = |s: &LabeledImageSet| s.images.reshape(&[s.len(), d]).unwrap();
    let x = flat(train);
    let mut weights = Tensor::zeros(&[d, 2]);
    let mut bias = Tensor::zeros(&[2]);
    for _ in 0..steps {
        let mut tape = GradTape::new();
        let (wv, bv) = (tape.param(weights.clone()), tape.param(bias.clone()));
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, wv).unwrap();
        let logits = tape.add_bias(logits, bv).unwrap();
        let loss = tape.cross_entropy(logits, &train.labels).unwrap();
        let g = tape.backward(loss).unwrap();
        for (p, v) in [(&mut weights, wv), (&mut bias, bv)] {
            let grad = g.get(v).unwrap();
            p.data_mut().iter_mut().zip(grad).for_each(|(a, &b)| *a -= 0.5 * b);
        }
    }
    let xt = flat(test);
    let correct = (0..test.len())
        .filter(|&i| {
            let row = xt.row(i);
            let score = |k: usize| bias.data()[k] + row.iter().enumerate().map(|(j, &v)| v * weights.data()[j * 2 + k]).sum::<Scalar>();
            usize::from(score(1) > score(0)) == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn two_blob_is_linearly_separable() {
    let acc = linear_probe(&gen_two_blob(400, 16, 1).unwrap(), &gen_two_blob(400, 16, 2).unwrap(), 300);
    assert!(acc >= 0.99, "{acc}");
}
