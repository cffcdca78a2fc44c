//! Post-hoc analysis: self-attention head sparsity and memory inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{AugmentFlags, BatchStream, LabeledImageSet};
use crate::error::{Error, Result};
use crate::hopfield::{retrieve_batch, AttractorBank};
use crate::model::Model;
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};

/// Slack on the cumulative-mass comparison so a row whose scores sum to the
/// threshold only up to float rounding still counts as reaching it.
pub const MASS_SLACK: f64 = 1e-6;

/// Minimal `s` such that the `s` largest entries of `row` carry at least
/// `threshold` of the mass.
pub fn row_sparsity(row: &[Scalar], threshold: f64) -> usize {
    let mut sorted: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        cum += v;
        if cum >= threshold - MASS_SLACK {
            return i + 1;
        }
    }
    sorted.len()
}

/// `s` for every query row of `scores [B·A, N, N]`, as `[head][sample][patch]`.
pub fn sparsity_from_scores(scores: &Tensor, heads: usize, threshold: f64) -> Result<Vec<Vec<Vec<usize>>>> {
    let s = scores.shape();
    if s.len() != 3 || s[1] != s[2] || heads == 0 || s[0] % heads != 0 {
        return Err(Error::shape("sparsity scores", s, &[heads]));
    }
    let (batch, n) = (s[0] / heads, s[1]);
    let mut out = vec![vec![Vec::with_capacity(n); batch]; heads];
    for (i, row) in scores.data().chunks(n).enumerate() {
        let bh = i / n;
        out[bh % heads][bh / heads].push(row_sparsity(row, threshold));
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSparsity {
    pub layer: usize,
    pub head: usize,
    /// `s` per (sample, query patch), sample-major.
    pub values: Vec<usize>,
    /// Per-sample median over query patches, averaged over samples.
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub patches: usize,
    pub heads: Vec<HeadSparsity>,
}

impl SparsityReport {
    /// One row per (layer, head, sample, patch): the raw distribution.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,sample,patch,s\n");
        for h in &self.heads {
            for (i, v) in h.values.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", h.layer, h.head, i / self.patches, i % self.patches, v);
            }
        }
        s
    }
}

/// Head sparsity of every self-attention head over `set`.
pub fn analyze_sparsity(model: &Model, set: &LabeledImageSet, threshold: f64) -> Result<SparsityReport> {
    let cfg = model.config();
    if !cfg.ablation.use_sa {
        return Err(Error::Config("sparsity analysis needs a model with self-attention".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Param(format!("threshold must lie in (0,1], got {threshold}")));
    }
    let heads = cfg.model.heads;
    let n = cfg.model.patch_count();
    let mut acc: Vec<Vec<Vec<Vec<usize>>>> = vec![vec![Vec::new(); heads]; cfg.model.layers];
    for batch in eval_batches(model, set)? {
        let mut tape = GradTape::new();
        let pv = model.params.register(&mut tape);
        let out = model.forward(&mut tape, &pv, &batch.images)?;
        for (l, t) in out.layers.iter().enumerate() {
            let scores = t.sa_scores.expect("self-attention enabled");
            for (h, per_sample) in sparsity_from_scores(tape.value(scores), heads, threshold)?.into_iter().enumerate() {
                acc[l][h].extend(per_sample);
            }
        }
    }
    let mut report = SparsityReport { patches: n, heads: Vec::new() };
    for (layer, per_head) in acc.into_iter().enumerate() {
        for (head, samples) in per_head.into_iter().enumerate() {
            let medians: Vec<f64> = samples
                .iter()
                .map(|p| median(&mut p.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect();
            report.heads.push(HeadSparsity {
                layer,
                head,
                median: medians.iter().sum::<f64>() / medians.len().max(1) as f64,
                values: samples.into_iter().flatten().collect(),
            });
        }
    }
    Ok(report)
}

fn eval_batches<'a>(model: &Model, set: &'a LabeledImageSet) -> Result<BatchStream<'a>> {
    let cfg = model.config();
    let (h, w, c) = set.image_dims();
    let m = &cfg.model;
    if (h, w, c) != (m.image_size, m.image_size, m.channels) {
        return Err(Error::shape("dataset vs model (height, width, channels)", &[h, w, c], &[m.image_size, m.image_size, m.channels]));
    }
    let flags = AugmentFlags {
        normalize: match (&cfg.data.normalize_mean, &cfg.data.normalize_std) {
            (Some(mean), Some(std)) => Some(crate::data::Normalize {
                mean: mean.iter().map(|&v| v as Scalar).collect(),
                std: std.iter().map(|&v| v as Scalar).collect(),
            }),
            _ => None,
        },
        ..Default::default()
    };
    BatchStream::new(set, cfg.data.batch_size, cfg.seed, 0, false, flags)
}

/// Portable graymap: one byte per pixel, scaled so the largest value is 255.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }));
    out
}

/// Files written by [`inspect_memory`].
#[derive(Clone, Debug, Default)]
pub struct InspectOutput {
    pub heatmaps: Vec<PathBuf>,
    pub scores_csv: PathBuf,
    pub energy_csvs: Vec<PathBuf>,
}

/// Pre-mask slot attention on the first evaluation batch of `set`.
///
/// Writes `layer{l}_slot{j}.pgm` (head-averaged attention of slot `j` over
/// the first sample's patch grid), `memory_scores.csv` with every raw score,
/// and `layer{l}_energy.csv` with the Hopfield energy of each patch along
/// `trace_iters` retrieval steps.
pub fn inspect_memory(model: &Model, set: &LabeledImageSet, out_dir: &Path, trace_iters: usize) -> Result<InspectOutput> {
    let cfg = model.config();
    if !cfg.ablation.use_memory {
        return Err(Error::Config("memory inspection needs a model with a workspace layer".into()));
    }
    let batch = eval_batches(model, set)?
        .next()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tape = GradTape::new();
    let pv = model.params.register(&mut tape);
    let out = model.forward(&mut tape, &pv, &batch.images)?;
    let side = cfg.model.patches_per_side();
    let n = side * side;
    let mut result = InspectOutput {
        scores_csv: out_dir.join("memory_scores.csv"),
        ..Default::default()
    };
    let mut csv = String::from("layer,head,slot,position,sample,row,col,score\n");
    for (l, t) in out.layers.iter().enumerate() {
        let Some(ws) = t.workspace else { continue };
        let pre = tape.value(ws.pre_mask);
        let (heads, slots, positions) = (pre.shape()[0], pre.shape()[1], pre.shape()[2]);
        for h in 0..heads {
            for j in 0..slots {
                let row = &pre.data()[(h * slots + j) * positions..][..positions];
                for (p, v) in row.iter().enumerate() {
                    let q = p % n;
                    let _ = writeln!(csv, "{l},{h},{j},{p},{},{},{},{v}", p / n, q / side, q % side);
                }
            }
        }
        for j in 0..slots {
            let mut map = vec![0.0f64; n];
            for h in 0..heads {
                let row = &pre.data()[(h * slots + j) * positions..][..n];
                map.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64 / heads as f64);
            }
            let path = out_dir.join(format!("layer{l}_slot{j}.pgm"));
            fs::write(&path, encode_pgm(&map, side, side)).map_err(|e| Error::io(&path, e))?;
            result.heatmaps.push(path);
        }
        if let Some(att) = ws.attractors {
            let m = &cfg.model;
            let bank = AttractorBank::from_attractors(tape.value(att).clone(), m.beta, trace_iters, 0.0)?;
            let (_, report) = retrieve_batch(tape.value(ws.squashed), &bank)?;
            let mut e = String::from("patch,step,energy\n");
            for (p, tr) in report.trace.iter().enumerate() {
                for (s, en) in tr.iter().enumerate() {
                    let _ = writeln!(e, "{p},{s},{en}");
                }
            }
            let path = out_dir.join(format!("layer{l}_energy.csv"));
            fs::write(&path, e).map_err(|err| Error::io(&path, err))?;
            result.energy_csvs.push(path);
        }
    }
    fs::write(&result.scores_csv, csv).map_err(|e| Error::io(&result.scores_csv, e))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_one_hot_rows() {
        for n in [1usize, 7, 10, 16, 64] {
            let row = vec![1.0 / n as Scalar; n];
            assert_eq!(row_sparsity(&row, 0.9), (0.9 * n as f64).ceil() as usize, "n={n}");
        }
        let mut hot = vec![0.0; 9];
        hot[4] = 1.0;
        assert_eq!(row_sparsity(&hot, 0.9), 1);
    }

    #[test]
    fn scores_layout_is_sample_major() {
        // Two samples, two heads, N=2: only sample 1 / head 0 is peaked.
        let mut data = vec![0.5; 16];
        data[8..12].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let t = Tensor::new(&[4, 2, 2], data).unwrap();
        let s = sparsity_from_scores(&t, 2, 0.9).unwrap();
        assert_eq!(s[0][1], vec![1, 1]);
        assert_eq!(s[0][0], vec![2, 2]);
        assert_eq!(s[1][1], vec![2, 2]);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let b = encode_pgm(&[0.0, 0.5, 1.0, 1.0], 2, 2);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255, 255]);
    }
}
