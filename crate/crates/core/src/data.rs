//! Dataset loaders, preprocessing, synthetic sources and the binary codecs
//! shared by the pipeline phases.
//!
//! Pixel data is held as `N×C×H×W` single-precision tensors in `[−1, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const DCFM_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub preset: String,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)` of one image.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, idx: &[usize]) -> ImageDataset {
        ImageDataset {
            images: self.images.gather_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            preset: self.preset.clone(),
        }
    }
}

/// `[0, 255] → [−1, 1]`.
pub fn scale_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`scale_byte`], rounded and saturated.
pub fn unscale(v: f32) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, format!("header truncated at byte {at}")))
}

/// Decode an IDX image file (`0x00000803`, `N×rows×cols` bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            "idx images",
            format!("bad magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            "idx images",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Tensor::new(
        vec![n, 1, rows, cols],
        bytes[16..].iter().map(|&b| scale_byte(b)).collect(),
    )
}

/// Decode an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            "idx labels",
            format!("bad magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            "idx labels",
            format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Encode single-channel images in `[−1, 1]` as an IDX image file.
pub fn encode_idx_images(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("encode_idx_images", s, &[0, 1, 0, 0]));
    }
    let mut b = IDX_IMAGES.to_be_bytes().to_vec();
    for v in [s[0], s[2], s[3]] {
        b.extend_from_slice(&(v as u32).to_be_bytes());
    }
    b.extend(x.data().iter().map(|&v| unscale(v)));
    Ok(b)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut b = IDX_LABELS.to_be_bytes().to_vec();
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        b.push(
            u8::try_from(l)
                .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?,
        );
    }
    Ok(b)
}

/// Load IDX images with optional labels and an optional center crop.
pub fn load_idx(images: &Path, labels: Option<&Path>, crop: Option<usize>) -> Result<ImageDataset> {
    let mut x = parse_idx_images(&fs::read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&fs::read(p)?)?;
            if l.len() != x.shape()[0] {
                return Err(Error::format(
                    "idx labels",
                    format!("{} labels for {} images", l.len(), x.shape()[0]),
                ));
            }
            Some(l)
        }
        None => None,
    };
    if let Some(s) = crop {
        x = center_crop(&x, s, s)?;
    }
    Ok(ImageDataset {
        images: x,
        labels,
        preset: "mnist".into(),
    })
}

/// Decode concatenated CIFAR-10 binary records (label byte + planar 3×32×32).
pub fn parse_cifar(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "cifar batch",
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| scale_byte(b)));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], pixels)?, labels))
}

pub fn load_cifar_bin<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR batch files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (x, l) = parse_cifar(&fs::read(p)?)?;
        images.push(x);
        labels.extend(l);
    }
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    Ok(ImageDataset {
        images: Tensor::concat_rows(&refs)?,
        labels: Some(labels),
        preset: "cifar".into(),
    })
}

/// Keep the central `h×w` window of every image.
pub fn center_crop(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, ih, iw) = dims4(x)?;
    if h > ih || w > iw || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {ih}×{iw} to {h}×{w}"
        )));
    }
    let (top, left) = ((ih - h) / 2, (iw - w) / 2);
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for r in top..top + h {
            out.extend_from_slice(&plane[r * iw + left..r * iw + left + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

fn dims4(x: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(Error::InvalidArgument(format!(
            "expected N×C×H×W images, got {s:?}"
        ))),
    }
}

/// Overlap weights of a 1-D area resample from `n_in` to `n_out` cells.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                if overlap > 1e-12 {
                    w.push((i, overlap));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resample of every plane to `h×w`.
pub fn area_resize(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, ih, iw) = dims4(x)?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be non-empty".into(),
        ));
    }
    let (wr, wc) = (area_weights(ih, h), area_weights(iw, w));
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for rw in &wr {
            for cw in &wc {
                let mut acc = 0.0f64;
                for &(r, a) in rw {
                    for &(cc, b) in cw {
                        acc += a * b * plane[r * iw + cc] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Gaussian mixture source for clustering-only runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k: usize,
    pub dim: usize,
    /// Explicit component means; when absent they are placed with pairwise
    /// distance `separation·std`.
    pub means: Option<Vec<Vec<f64>>>,
    pub separation: f64,
    pub std: f64,
    pub weights: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// `k` equally weighted components in `dim` dimensions, `sep` standard
    /// deviations apart.
    pub fn uniform(k: usize, dim: usize, sep: f64, n: usize, seed: u64) -> Self {
        SynthSpec {
            k,
            dim,
            means: None,
            separation: sep,
            std: 1.0,
            weights: vec![1.0 / k as f64; k],
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n == 0 {
            return bad("N must be positive");
        }
        if self.k < 1 || self.dim < 1 {
            return bad("k and dim must be positive");
        }
        if !(self.std > 0.0) {
            return bad("std must be positive");
        }
        if self.weights.len() != self.k || self.weights.iter().any(|&w| !(w > 0.0)) {
            return bad("need k positive weights");
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("weights must sum to 1");
        }
        match &self.means {
            Some(m) if m.len() != self.k || m.iter().any(|r| r.len() != self.dim) => {
                bad("means must be k×dim")
            }
            None if self.k > 1 && self.dim < 2 && self.k > 2 => {
                bad("more than 2 components need dim ≥ 2")
            }
            _ => Ok(()),
        }
    }

    /// Component means: scaled basis vectors when `dim ≥ k` (a regular
    /// simplex), otherwise a regular polygon in the first two coordinates.
    pub fn resolved_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.means {
            return m.clone();
        }
        let d = self.separation * self.std;
        (0..self.k)
            .map(|i| {
                let mut v = vec![0.0; self.dim];
                if self.dim >= self.k {
                    v[i] = d / 2f64.sqrt();
                } else if self.k == 2 {
                    v[0] = if i == 0 { -d / 2.0 } else { d / 2.0 };
                } else {
                    let r = d / (2.0 * (std::f64::consts::PI / self.k as f64).sin());
                    let a = 2.0 * std::f64::consts::PI * i as f64 / self.k as f64;
                    v[0] = r * a.cos();
                    v[1] = r * a.sin();
                }
                v
            })
            .collect()
    }
}

/// Sample `N` labelled points from the mixture.
pub fn synth_gaussians(spec: &SynthSpec) -> Result<(FeatureMatrix, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = spec.resolved_means();
    let pick =
        WeightedIndex::new(&spec.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut labels = Vec::with_capacity(spec.n);
    let mut values = Vec::with_capacity(spec.n * spec.dim);
    for _ in 0..spec.n {
        let c = pick.sample(&mut rng);
        labels.push(c);
        for &mu in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            values.push((mu + spec.std * z) as f32);
        }
    }
    Ok((
        FeatureMatrix {
            values: Tensor::new(vec![spec.n, spec.dim], values)?,
            dropout_rate: 0.0,
            seed: spec.seed,
        },
        labels,
    ))
}

/// Distance from `p` to segment `ab`.
fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Stroke skeleton of digit 0, 1 or 2 in a unit box centred at the origin
/// (y grows downwards).
fn digit_strokes(digit: usize, rng: &mut impl Rng) -> Vec<Vec<(f64, f64)>> {
    let arc = |cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let a = a0 + (a1 - a0) * i as f64 / n as f64;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    use std::f64::consts::PI;
    match digit {
        0 => {
            let rx = rng.random_range(0.22..0.32);
            vec![arc(0.0, 0.0, rx, 0.38, 0.0, 2.0 * PI, 40)]
        }
        1 => {
            let mut s = vec![vec![(0.0, -0.4), (0.0, 0.4)]];
            if rng.random_bool(0.5) {
                s.push(vec![(-0.12, -0.28), (0.0, -0.4)]);
            }
            if rng.random_bool(0.3) {
                s.push(vec![(-0.12, 0.4), (0.12, 0.4)]);
            }
            s
        }
        _ => {
            let mut s = arc(0.0, -0.17, 0.24, 0.21, -PI * 1.05, PI * 0.2, 24);
            s.push((-0.26, 0.38));
            s.push((0.28, 0.38));
            vec![s]
        }
    }
}

/// Render one anti-aliased digit on a `size×size` canvas with values in
/// `[0, 1]`, under a random affine jitter and stroke width.
pub fn render_digit(digit: usize, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let strokes = digit_strokes(digit, rng);
    let rot: f64 = rng.random_range(-0.25..0.25);
    let shear: f64 = rng.random_range(-0.2..0.2);
    let scale = size as f64 * rng.random_range(0.62..0.78);
    let (tx, ty) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let half_width = size as f64 * rng.random_range(0.045..0.08);
    let c = size as f64 / 2.0;
    let (cs, sn) = (rot.cos(), rot.sin());
    let map = |(x, y): (f64, f64)| {
        let x = x + shear * y;
        (
            c + tx + scale * (cs * x - sn * y),
            c + ty + scale * (sn * x + cs * y),
        )
    };
    let segs: Vec<((f64, f64), (f64, f64))> = strokes
        .iter()
        .flat_map(|s| {
            s.windows(2)
                .map(|w| (map(w[0]), map(w[1])))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut img = vec![0f32; size * size];
    for r in 0..size {
        for col in 0..size {
            let p = (col as f64 + 0.5, r as f64 + 0.5);
            let d = segs
                .iter()
                .map(|&(a, b)| seg_dist(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let v = (half_width + 0.5 - d).clamp(0.0, 1.0);
            let noise: f64 = 0.03 * rng.sample::<f64, _>(StandardNormal);
            img[r * size + col] = (v + noise).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Procedural stand-in for MNIST digits: `n` images of the given classes
/// drawn round-robin, rendered at 28×28 and area-downsampled to `side`.
pub fn synthetic_digits(
    classes: &[usize],
    n: usize,
    side: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if classes.is_empty() || n == 0 || classes.iter().any(|&c| c > 2) {
        return Err(Error::InvalidArgument(
            "synthetic digits support classes 0, 1, 2 and N > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes.len();
        pixels.extend(
            render_digit(classes[label], 28, &mut rng)
                .into_iter()
                .map(|v| 2.0 * v - 1.0),
        );
        labels.push(label);
    }
    let full = Tensor::new(vec![n, 1, 28, 28], pixels)?;
    let images = if side == 28 {
        full
    } else {
        area_resize(&full, side, side)?
    };
    Ok(ImageDataset {
        images,
        labels: Some(labels),
        preset: "mnist-mini".into(),
    })
}

/// Keep images whose label is in `classes` (relabelled to `0..classes.len()`
/// in the given order), at most `limit` of them.
pub fn filter_classes(ds: &ImageDataset, classes: &[usize], limit: usize) -> Result<ImageDataset> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("class filter needs labels".into()))?;
    let idx: Vec<usize> = (0..labels.len())
        .filter(|&i| classes.contains(&labels[i]))
        .take(limit)
        .collect();
    let mut out = ds.subset(&idx);
    out.labels = Some(
        idx.iter()
            .map(|&i| classes.iter().position(|&c| c == labels[i]).unwrap())
            .collect(),
    );
    Ok(out)
}

fn read_u32(bytes: &[u8], at: &mut usize, what: &str) -> Result<u32> {
    let v = bytes
        .get(*at..*at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, format!("truncated at byte {at}")))?;
    *at += 4;
    Ok(v)
}

/// Encode a feature matrix as `DCFM`.
pub fn encode_features(f: &FeatureMatrix) -> Result<Vec<u8>> {
    let (n, d) = match f.values.shape() {
        &[n, d] => (n, d),
        s => {
            return Err(Error::InvalidArgument(format!(
                "feature matrix must be N×d, got {s:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(28 + 4 * n * d);
    out.extend_from_slice(b"DCFM");
    out.extend_from_slice(&DCFM_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&f.dropout_rate.to_le_bytes());
    out.extend_from_slice(&f.seed.to_le_bytes());
    for v in f.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.get(..4) != Some(b"DCFM") {
        return Err(Error::format("feature file", "missing DCFM magic"));
    }
    let mut at = 4;
    let version = read_u32(bytes, &mut at, "feature file")?;
    if version != DCFM_VERSION {
        return Err(Error::format(
            "feature file",
            format!("unsupported version {version}"),
        ));
    }
    let n = read_u32(bytes, &mut at, "feature file")? as usize;
    let d = read_u32(bytes, &mut at, "feature file")? as usize;
    let rate = f32::from_bits(read_u32(bytes, &mut at, "feature file")?);
    let seed = bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format("feature file", "truncated header"))?;
    at += 8;
    let expected = at + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::format(
            "feature file",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let values = bytes[at..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(FeatureMatrix {
        values: Tensor::new(vec![n, d], values)?,
        dropout_rate: rate,
        seed,
    })
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(b"DCLB");
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.get(..4) != Some(b"DCLB") {
        return Err(Error::format("label file", "missing DCLB magic"));
    }
    let mut at = 4;
    let n = read_u32(bytes, &mut at, "label file")? as usize;
    if bytes.len() != 8 + 4 * n {
        return Err(Error::format(
            "label file",
            format!("expected {} bytes, found {}", 8 + 4 * n, bytes.len()),
        ));
    }
    (0..n)
        .map(|_| read_u32(bytes, &mut at, "label file").map(|v| v as usize))
        .collect()
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    write_bytes(path, &encode_features(f)?)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    decode_features(&fs::read(path)?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_bytes(path, &encode_labels(labels))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, fill: u8) -> Vec<u8> {
        let mut b = IDX_IMAGES.to_be_bytes().to_vec();
        for v in [n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * r * c) as usize));
        b
    }

    #[test]
    fn idx_encoding_round_trips() {
        let x = synthetic_digits(&[0, 1], 4, 14, 3).unwrap();
        let back = parse_idx_images(&encode_idx_images(&x.images).unwrap()).unwrap();
        let again = encode_idx_images(&back).unwrap();
        assert_eq!(encode_idx_images(&x.images).unwrap(), again);
        assert!(back
            .data()
            .iter()
            .zip(x.images.data())
            .all(|(a, b)| (a - b).abs() <= 1.0 / 255.0 + 1e-6));
        let l = x.labels.unwrap();
        assert_eq!(
            parse_idx_labels(&encode_idx_labels(&l).unwrap()).unwrap(),
            l
        );
        assert!(encode_idx_labels(&[256]).is_err());
    }

    #[test]
    fn idx_parsing() {
        let x = parse_idx_images(&idx_images(2, 28, 28, 255)).unwrap();
        assert_eq!(x.shape(), &[2, 1, 28, 28]);
        assert!(x.data().iter().all(|&v| v == 1.0));
        let mut short = idx_images(2, 4, 4, 0);
        short.pop();
        let err = parse_idx_images(&short).unwrap_err().to_string();
        assert!(
            err.contains("expected 48") && err.contains("found 47"),
            "{err}"
        );
        let mut bad = idx_images(1, 2, 2, 0);
        bad[3] = 0x01;
        assert!(parse_idx_images(&bad).is_err());
        let mut l = IDX_LABELS.to_be_bytes().to_vec();
        l.extend_from_slice(&3u32.to_be_bytes());
        l.extend_from_slice(&[0, 1, 2]);
        assert_eq!(parse_idx_labels(&l).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn crop_removes_border() {
        let v: Vec<f32> = (0..28 * 28).map(|i| i as f32).collect();
        let x = Tensor::new(vec![1, 1, 28, 28], v).unwrap();
        let c = center_crop(&x, 24, 24).unwrap();
        assert_eq!(c.shape(), &[1, 1, 24, 24]);
        assert_eq!(c.data()[0], (2 * 28 + 2) as f32);
        assert_eq!(c.data()[24 * 24 - 1], (25 * 28 + 25) as f32);
    }

    #[test]
    fn cifar_records() {
        let mut b = vec![7u8];
        b.extend(std::iter::repeat_n(0u8, 3072));
        let (x, l) = parse_cifar(&b).unwrap();
        assert_eq!(l, vec![7]);
        assert!(x.data().iter().all(|&v| v == -1.0));
        b.push(0);
        assert!(parse_cifar(&b).is_err());
    }

    #[test]
    fn byte_scaling_inverts() {
        for b in 0..=255u8 {
            assert_eq!(unscale(scale_byte(b)), b);
        }
    }

    #[test]
    fn area_resize_averages() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = area_resize(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5]);
        let z = area_resize(&Tensor::full(vec![1, 1, 96, 96], 0.25f32), 48, 48).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let w = area_resize(&Tensor::full(vec![1, 1, 5, 5], 1.0f32), 3, 3).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn synth_nearest_mean_and_counts() {
        let spec = SynthSpec::uniform(3, 8, 10.0, 3000, 11);
        let (f, labels) = synth_gaussians(&spec).unwrap();
        let means = spec.resolved_means();
        let hits = (0..3000)
            .filter(|&i| {
                let row = f.values.row(i);
                let d = |m: &Vec<f64>| {
                    row.iter()
                        .zip(m)
                        .map(|(&a, b)| (a as f64 - b).powi(2))
                        .sum::<f64>()
                };
                let best = (0..3)
                    .min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b])))
                    .unwrap();
                best == labels[i]
            })
            .count();
        assert!(hits as f64 / 3000.0 > 0.999);

        let spec = SynthSpec {
            weights: vec![0.7, 0.2, 0.1],
            n: 10_000,
            ..SynthSpec::uniform(3, 4, 6.0, 1, 3)
        };
        let (_, labels) = synth_gaussians(&spec).unwrap();
        for (c, &w) in spec.weights.iter().enumerate() {
            let count = labels.iter().filter(|&&l| l == c).count() as f64;
            let sd = (10_000.0 * w * (1.0 - w)).sqrt();
            assert!(
                (count - 10_000.0 * w).abs() < 3.0 * sd,
                "class {c}: {count}"
            );
        }
        assert!(synth_gaussians(&SynthSpec::uniform(3, 4, 6.0, 0, 1)).is_err());
    }

    #[test]
    fn mean_separation() {
        for dim in [2, 3, 10] {
            let m = SynthSpec::uniform(3, dim, 6.0, 1, 0).resolved_means();
            for a in 0..3 {
                for b in a + 1..3 {
                    let d: f64 = m[a]
                        .iter()
                        .zip(&m[b])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!((d - 6.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn feature_and_label_round_trip() {
        let v: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 1.1).collect();
        let f = FeatureMatrix {
            values: Tensor::new(vec![3, 4], v).unwrap(),
            dropout_rate: 0.1,
            seed: 99,
        };
        let g = decode_features(&encode_features(&f).unwrap()).unwrap();
        assert_eq!(g.values, f.values);
        assert_eq!(g.dropout_rate, 0.1);
        assert_eq!(g.seed, 99);
        let mut bytes = encode_features(&f).unwrap();
        bytes[0] = b'X';
        assert!(decode_features(&bytes).is_err());
        let l = vec![0, 2, 1, 1];
        assert_eq!(decode_labels(&encode_labels(&l)).unwrap(), l);
        assert!(decode_labels(&encode_labels(&l)[..10]).is_err());
    }

    #[test]
    fn digits_render_in_range() {
        let ds = synthetic_digits(&[0, 1, 2], 9, 14, 5).unwrap();
        assert_eq!(ds.images.shape(), &[9, 1, 14, 14]);
        assert!(ds.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(ds.labels.as_ref().unwrap()[..3], [0, 1, 2]);
        let again = synthetic_digits(&[0, 1, 2], 9, 14, 5).unwrap();
        assert_eq!(ds.images, again.images);
    }
}
