//! Synthetic image tasks, the AITDATA1 container and shuffled batch streams.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DATA_MAGIC: &[u8; 8] = b"AITDATA1";
pub const DATA_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 6 * 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    #[default]
    Unspecified,
}

/// Images `count×H×W×C` in `[0,1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub class_count: u32,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Data(format!(
                "image tensor {:?} does not match {} labels",
                s,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} >= class count {class_count}")));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("pixel outside [0,1]".into()));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            class_count,
            split: Split::Unspecified,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (H, W, C)
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[Scalar] {
        let (h, w, c) = self.image_dims();
        let n = h * w * c;
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Subset by indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let (h, w, c) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            images: Tensor::from_parts(vec![indices.len(), h, w, c], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }
}

fn quantize(v: f64) -> Scalar {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as Scalar
}

/// Render Gaussian blobs (peak 1, max-combined) into a `side×side` image,
/// quantized to the 8-bit grid.
fn render_blobs(side: usize, centers: &[(f64, f64)], spread: f64) -> Vec<Scalar> {
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut v: f64 = 0.0;
            for &(cy, cx) in centers {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v = v.max((-d2 / (2.0 * spread * spread)).exp());
            }
            img[y * side + x] = quantize(v);
        }
    }
    img
}

/// Shuffled balanced label vector.
fn balanced_labels(count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| usize::from(i < count.div_ceil(2))).collect();
    labels.shuffle(rng);
    labels
}

/// Knobs of the Triangle generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleParams {
    /// Standard deviation of each cluster blob, in pixels.
    pub spread: f64,
    /// Relative side-length tolerance for the positive class.
    pub tolerance: f64,
}

impl Default for TriangleParams {
    fn default() -> Self {
        TriangleParams {
            spread: 1.0,
            tolerance: 0.05,
        }
    }
}

/// `(max side / min side) − 1` for three points.
pub fn side_spread(points: &[(f64, f64); 3]) -> f64 {
    let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let sides = [d(points[0], points[1]), d(points[1], points[2]), d(points[0], points[2])];
    let max = sides.iter().cloned().fold(f64::MIN, f64::max);
    let min = sides.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min - 1.0
    }
}

/// Equilateral within the given relative side-length tolerance.
pub fn is_equilateral(points: &[(f64, f64); 3], tolerance: f64) -> bool {
    side_spread(points) <= tolerance
}

/// Three Gaussian point clusters per grayscale image; label 1 iff the
/// cluster centers form an equilateral triangle.
pub fn gen_triangle(count: usize, side: usize, seed: u64) -> Result<LabeledImageSet> {
    gen_triangle_with(count, side, seed, TriangleParams::default())
}

pub fn gen_triangle_with(count: usize, side: usize, seed: u64, params: TriangleParams) -> Result<LabeledImageSet> {
    if side < 16 {
        return Err(Error::Param(format!("triangle images need side >= 16, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(count, &mut rng);
    let margin = 2.0 + params.spread;
    let hi = side as f64 - 1.0 - margin;
    let min_side = side as f64 * 0.3;
    let mut data = Vec::with_capacity(count * side * side);
    for &label in &labels {
        let centers = if label == 1 {
            loop {
                let radius = rng.random_range(min_side / 3f64.sqrt()..side as f64 * 0.45);
                let cy = rng.random_range(margin..=hi);
                let cx = rng.random_range(margin..=hi);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let pts: [(f64, f64); 3] = std::array::from_fn(|i| {
                    let a = theta + i as f64 * std::f64::consts::TAU / 3.0;
                    (cy + radius * a.sin(), cx + radius * a.cos())
                });
                if pts.iter().all(|&(y, x)| (margin..=hi).contains(&y) && (margin..=hi).contains(&x)) {
                    break pts;
                }
            }
        } else {
            loop {
                let pts: [(f64, f64); 3] =
                    std::array::from_fn(|_| (rng.random_range(margin..=hi), rng.random_range(margin..=hi)));
                let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                let shortest = d(pts[0], pts[1]).min(d(pts[1], pts[2])).min(d(pts[0], pts[2]));
                if shortest >= min_side && !is_equilateral(&pts, params.tolerance) {
                    break pts;
                }
            }
        };
        data.extend(render_blobs(side, &centers, params.spread));
    }
    let images = Tensor::new(&[count, side, side, 1], data)?;
    LabeledImageSet::new(images, labels, 2)
}

/// A single blob in the left half (label 0) or right half (label 1).
pub fn gen_two_blob(count: usize, side: usize, seed: u64) -> Result<LabeledImageSet> {
    if side < 8 {
        return Err(Error::Param(format!("two-blob images need side >= 8, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(count, &mut rng);
    let half = side as f64 / 2.0;
    let spread = side as f64 / 16.0;
    let mut data = Vec::with_capacity(count * side * side);
    for &label in &labels {
        let cy = rng.random_range(1.0..side as f64 - 2.0);
        let cx = if label == 0 {
            rng.random_range(1.0..half - 1.0)
        } else {
            rng.random_range(half + 1.0..side as f64 - 2.0)
        };
        data.extend(render_blobs(side, &[(cy, cx)], spread.max(0.75)));
    }
    let images = Tensor::new(&[count, side, side, 1], data)?;
    LabeledImageSet::new(images, labels, 2)
}

/// Write a set in the AITDATA1 layout.
pub fn store(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(set)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn encode(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let (h, w, c) = set.image_dims();
    if set.class_count > 256 {
        return Err(Error::Data("AITDATA1 stores labels as u8; at most 256 classes".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + set.images.len() + set.len());
    out.extend_from_slice(DATA_MAGIC);
    for v in [DATA_VERSION, set.len() as u32, h as u32, w as u32, c as u32, set.class_count as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(set.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out.extend(set.labels.iter().map(|&l| l as u8));
    Ok(out)
}

pub fn load(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<LabeledImageSet> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != DATA_MAGIC {
        return Err(fmt(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let header = DatasetHeader {
        version: word(0),
        count: word(1),
        height: word(2),
        width: word(3),
        channels: word(4),
        class_count: word(5),
    };
    if header.version != DATA_VERSION {
        return Err(fmt(format!("unsupported version {}", header.version)));
    }
    if header.height == 0 || header.width == 0 || header.channels == 0 || header.class_count == 0 {
        return Err(fmt(format!("non-positive extent in header {header:?}")));
    }
    let (n, h, w, c) = (
        header.count as usize,
        header.height as usize,
        header.width as usize,
        header.channels as usize,
    );
    let pixels = n as u64 * (h * w * c) as u64;
    let expected = HEADER_LEN as u64 + pixels + n as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let px = &bytes[HEADER_LEN..HEADER_LEN + pixels as usize];
    let data = px.iter().map(|&b| (b as f64 / 255.0) as Scalar).collect();
    let labels: Vec<usize> = bytes[HEADER_LEN + pixels as usize..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= header.class_count as usize) {
        return Err(fmt(format!("label {bad} >= class count {}", header.class_count)));
    }
    let images = Tensor::new(&[n, h, w, c], data)?;
    LabeledImageSet::new(images, labels, header.class_count as usize)
}

/// Per-channel `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalize {
    pub mean: Vec<Scalar>,
    pub std: Vec<Scalar>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    /// Swap rows and columns; square images only.
    pub transpose: bool,
    pub normalize: Option<Normalize>,
}

const HFLIP: u8 = 1;
const VFLIP: u8 = 2;
const TRANSPOSE: u8 = 4;

#[derive(Clone, Debug)]
pub struct Batch {
    /// `B×H×W×C`
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the samples in the source set.
    pub indices: Vec<usize>,
}

/// SplitMix64 finalizer; derives independent stream seeds from (seed, epoch).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-epoch shuffled batches, a pure function of `(seed, epoch)`.
pub struct BatchStream<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    /// Per-sample transform bits, indexed by position in `order`.
    transforms: Vec<u8>,
    batch_size: usize,
    cursor: usize,
    flags: AugmentFlags,
}

impl<'a> BatchStream<'a> {
    pub fn new(set: &'a LabeledImageSet, batch_size: usize, seed: u64, epoch: u64, shuffle: bool, flags: AugmentFlags) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let (_, _, c) = set.image_dims();
        if let Some(n) = &flags.normalize {
            if n.mean.len() != c || n.std.len() != c || n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("normalize needs {c} means and positive stds")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
        let mut order: Vec<usize> = (0..set.len()).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        let (h, w, _) = set.image_dims();
        if flags.transpose && h != w {
            return Err(Error::Config(format!("transpose augmentation needs square images, got {h}x{w}")));
        }
        let transforms = (0..set.len())
            .map(|_| {
                let mut t = 0;
                for (on, bit) in [(flags.hflip, HFLIP), (flags.vflip, VFLIP), (flags.transpose, TRANSPOSE)] {
                    if on && rng.random_bool(0.5) {
                        t |= bit;
                    }
                }
                t
            })
            .collect();
        Ok(BatchStream {
            set,
            order,
            transforms,
            batch_size,
            cursor: 0,
            flags,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.set.len().div_ceil(self.batch_size)
    }

    /// Advance past `n` batches without materializing them.
    pub fn skip_batches(&mut self, n: usize) {
        self.cursor = (self.cursor + n * self.batch_size).min(self.order.len());
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        let (h, w, c) = self.set.image_dims();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for (pos, &i) in indices.iter().enumerate() {
            let img = self.set.image(i);
            let t = self.transforms[self.cursor + pos];
            for y in 0..h {
                for x in 0..w {
                    let (mut sy, mut sx) = if t & TRANSPOSE != 0 { (x, y) } else { (y, x) };
                    if t & HFLIP != 0 {
                        sx = w - 1 - sx;
                    }
                    if t & VFLIP != 0 {
                        sy = h - 1 - sy;
                    }
                    for ch in 0..c {
                        let mut v = img[(sy * w + sx) * c + ch];
                        if let Some(n) = &self.flags.normalize {
                            v = (v - n.mean[ch]) / n.std[ch];
                        }
                        data.push(v);
                    }
                }
            }
        }
        self.cursor = end;
        Some(Batch {
            images: Tensor::from_parts(vec![indices.len(), h, w, c], data),
            labels: indices.iter().map(|&i| self.set.labels[i]).collect(),
            indices,
        })
    }
}
