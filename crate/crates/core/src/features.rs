//! Run a trained discriminator over a dataset to obtain the clustering
//! domain `M` and its low-dropout variant `M'`.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gan::GanState;
use crate::nn::{dropout_apply, DropoutCtx, ForwardCtx};
use crate::par;
use crate::tensor::Tensor;

/// `N×d` representation matrix with the dropout rate and seed it was
/// produced with.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor<f32>,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Inverted dropout applied directly to the stored rows; the stand-in for
    /// `M'` when features do not come from a discriminator.
    pub fn with_dropout(&self, rate: f64, seed: u64) -> Result<FeatureMatrix> {
        Ok(FeatureMatrix {
            values: dropout_apply(&self.values, rate, seed)?,
            dropout_rate: rate as f32,
            seed,
        })
    }
}

/// Per-column affine map fitted on `M` and applied to both `M` and `M'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureNorm {
    None,
    Center,
    Standardize,
}

impl FeatureNorm {
    pub fn parse(s: &str) -> Result<FeatureNorm> {
        match s {
            "none" => Ok(FeatureNorm::None),
            "center" => Ok(FeatureNorm::Center),
            "standardize" => Ok(FeatureNorm::Standardize),
            other => Err(Error::InvalidArgument(format!(
                "feature norm: unknown '{other}'"
            ))),
        }
    }

    /// Column offsets and scales, accumulated in f64.
    pub fn fit(self, m: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
        let (n, d) = (m.shape()[0], m.shape()[1]);
        if self == FeatureNorm::None || n == 0 {
            return (vec![0.0; d], vec![1.0; d]);
        }
        let mut mean = vec![0.0f64; d];
        for row in m.data().chunks(d) {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut scale = vec![1.0f32; d];
        if self == FeatureNorm::Standardize {
            let mut var = vec![0.0f64; d];
            for row in m.data().chunks(d) {
                for ((a, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v as f64 - mu).powi(2);
                }
            }
            for (s, v) in scale.iter_mut().zip(&var) {
                let sd = (v / n as f64).sqrt();
                *s = if sd > 1e-6 { (1.0 / sd) as f32 } else { 1.0 };
            }
        }
        (mean.into_iter().map(|v| v as f32).collect(), scale)
    }

    pub fn apply(m: &Tensor<f32>, offset: &[f32], scale: &[f32]) -> Result<Tensor<f32>> {
        let d = offset.len();
        if m.shape().len() != 2 || m.shape()[1] != d {
            return Err(Error::shape("feature norm", m.shape(), &[m.shape()[0], d]));
        }
        let mut out = m.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((v, o), s) in row.iter_mut().zip(offset).zip(scale) {
                *v = (*v - o) * s;
            }
        }
        Tensor::new(m.shape().to_vec(), out)
    }
}

/// Rows per forward pass during extraction.
pub const EXTRACT_CHUNK: usize = 256;

/// Discriminator features of every image, batchnorm in inference mode and
/// dropout at `rate` (0 disables it). Masks are keyed by sample index, so the
/// result does not depend on chunking or thread count.
pub fn extract_features(
    gan: &GanState,
    images: &Tensor<f32>,
    rate: f64,
    seed: u64,
) -> Result<FeatureMatrix> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != gan.image_shape() {
        let mut want = vec![0];
        want.extend_from_slice(&gan.image_shape());
        return Err(Error::shape("extract_features", s, &want));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let n = s[0];
    let d = gan.feature_dim();
    let chunks = n.div_ceil(EXTRACT_CHUNK);
    let parts: Vec<Result<Vec<f32>>> = par::map_range(chunks, |c| {
        let start = c * EXTRACT_CHUNK;
        let len = EXTRACT_CHUNK.min(n - start);
        let mut tape = Tape::new();
        let vars = gan.discriminator.params.bind(&mut tape, false);
        let x = tape.constant(images.slice_rows(start, len)?);
        let ctx = ForwardCtx {
            train: false,
            dropout: (rate > 0.0).then_some(DropoutCtx {
                rate_override: Some(rate),
                seed,
                first_sample: start,
            }),
        };
        let (_, m, _) = gan.discriminate(&mut tape, &vars, x, &ctx)?;
        Ok(tape.value(m).data().to_vec())
    });
    let mut values = Vec::with_capacity(n * d);
    for p in parts {
        values.extend(p?);
    }
    let values = Tensor::new(vec![n, d], values)?;
    values.check_finite("extracted features")?;
    Ok(FeatureMatrix {
        values,
        dropout_rate: rate as f32,
        seed,
    })
}

/// Projection of the centered rows onto the two leading principal axes,
/// found by power iteration with deflation on the f64 covariance. Axis signs
/// are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(m: &Tensor<f32>) -> Result<Vec<[f64; 2]>> {
    let (n, d) = match m.shape() {
        &[n, d] if n > 0 && d > 0 => (n, d),
        s => {
            return Err(Error::InvalidArgument(format!(
                "pca needs a non-empty N×d matrix, got {s:?}"
            )))
        }
    };
    let mut mean = vec![0.0f64; d];
    for row in m.data().chunks(d) {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v as f64 / n as f64;
        }
    }
    let mut cov = vec![0.0f64; d * d];
    let mut c = vec![0.0f64; d];
    for row in m.data().chunks(d) {
        for ((x, &v), mu) in c.iter_mut().zip(row).zip(&mean) {
            *x = v as f64 - mu;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for a in 0..2 {
        let mut v: Vec<f64> = (0..d)
            .map(|i| 1.0 + ((i * 7 + a * 3) % 11) as f64 / 11.0)
            .collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum())
                .collect();
            for prev in &axes {
                let dot: f64 = w.iter().zip(prev).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(prev).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let moved: f64 = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
            v = w;
            if moved < 1e-12 {
                break;
            }
        }
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    Ok(m.data()
        .chunks(d)
        .map(|row| {
            let p = |ax: &[f64]| {
                row.iter()
                    .zip(&mean)
                    .zip(ax)
                    .map(|((&v, mu), w)| (v as f64 - mu) * w)
                    .sum()
            };
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

/// Mean cosine similarity between corresponding rows.
pub fn mean_row_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let d = a.shape()[1];
    let rows = a.data().chunks(d).zip(b.data().chunks(d));
    let n = a.shape()[0].max(1) as f64;
    rows.map(|(x, y)| {
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    })
    .sum::<f64>()
        / n
}
