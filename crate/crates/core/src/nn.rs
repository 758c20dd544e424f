//! Parameter storage, layer specifications and a sequential network builder
//! on top of the autodiff tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, Padding};
use crate::tensor::{Scalar, Tensor};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

/// One layer of a [`Sequential`] stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    Dropout {
        rate: f64,
    },
    Activation(Activation),
    Flatten,
    /// Reinterpret each sample as the given per-sample shape.
    Reshape(Vec<usize>),
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            LayerSpec::Conv { stride, kernel, .. }
            | LayerSpec::ConvTranspose { stride, kernel, .. } => {
                if *stride < 1 || *kernel < 1 {
                    return bad("stride and kernel must be at least 1");
                }
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                return bad("dropout rate must lie in [0, 1)");
            }
            LayerSpec::Activation(Activation::LeakyRelu(s)) if !(0.0..1.0).contains(s) => {
                return bad("leaky slope must lie in [0, 1)");
            }
            LayerSpec::Dense { units: 0 } => return bad("dense layer needs at least one unit"),
            _ => {}
        }
        Ok(())
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Register every tensor on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Inverted-dropout mask of length `len`: survivors carry `1/(1-rate)`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// Inverted dropout on a plain tensor. Rate 0 is the identity; the same seed
/// always yields the same mask.
pub fn dropout_apply<T: Scalar>(input: &Tensor<T>, rate: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let mask = dropout_mask::<T>(input.len(), rate, seed);
    let data = input.data().iter().zip(mask).map(|(&v, m)| v * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Gaussian tensor with mean 0 and standard deviation `std`.
pub fn normal_tensor<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Per-sample dropout stream: sample `first_sample + i` of layer `layer` gets
/// its own seed, so masks do not depend on how a dataset is batched.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx {
    /// Overrides the rate stored in the layer spec.
    pub rate_override: Option<f64>,
    pub seed: u64,
    pub first_sample: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    /// Normalize with batch statistics when true, running statistics
    /// otherwise.
    pub train: bool,
    pub dropout: Option<DropoutCtx>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: None,
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        w: ParamId,
        b: Option<ParamId>,
    },
    Conv {
        k: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    },
    ConvT {
        k: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        stats: usize,
    },
    Dropout {
        rate: f64,
    },
    Act(Activation),
    Flatten,
    Reshape(Vec<usize>),
}

/// Running per-channel statistics of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// A stack of layers with shape inference at build time.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    prefix: String,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    input_shape: Vec<usize>,
    pub params: ParamStore<T>,
    pub stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// Build from specs for per-sample `input_shape` (`[C, H, W]` or `[F]`).
    /// Weights are drawn from N(0, `init_std`); biases and shifts start at 0
    /// and scales at 1. Layers immediately followed by batchnorm carry no bias.
    pub fn build(
        prefix: &str,
        input_shape: &[usize],
        specs: &[LayerSpec],
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut cur = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let bias_follows = !matches!(specs.get(i + 1), Some(LayerSpec::BatchNorm));
            let name = |p: &str| format!("{prefix}.{i}.{p}");
            let layer = match spec {
                LayerSpec::Dense { units } => {
                    if cur.len() != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "{prefix}: dense layer {i} needs a flat input, got {cur:?}"
                        )));
                    }
                    let w = params.add(
                        name("w"),
                        normal_tensor(vec![cur[0], *units], init_std, rng),
                    );
                    let b =
                        bias_follows.then(|| params.add(name("b"), Tensor::zeros(vec![*units])));
                    cur = vec![*units];
                    Layer::Dense { w, b }
                }
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = spatial(&cur, prefix, i)?;
                    let g =
                        ConvGeom::build(c, h, w, *filters, *kernel, *kernel, *stride, *padding)?;
                    let k = params.add(
                        name("k"),
                        normal_tensor(vec![*filters, c, *kernel, *kernel], init_std, rng),
                    );
                    let b =
                        bias_follows.then(|| params.add(name("b"), Tensor::zeros(vec![*filters])));
                    cur = vec![*filters, g.out_h, g.out_w];
                    Layer::Conv {
                        k,
                        b,
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::ConvTranspose {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = spatial(&cur, prefix, i)?;
                    let g = ConvGeom::transposed(c, h, w, *filters, *kernel, *stride, *padding)?;
                    let k = params.add(
                        name("k"),
                        normal_tensor(vec![c, *filters, *kernel, *kernel], init_std, rng),
                    );
                    let b =
                        bias_follows.then(|| params.add(name("b"), Tensor::zeros(vec![*filters])));
                    cur = vec![*filters, g.h, g.w];
                    Layer::ConvT {
                        k,
                        b,
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::BatchNorm => {
                    let ch = cur[0];
                    let gamma = params.add(name("gamma"), Tensor::full(vec![ch], T::one()));
                    let beta = params.add(name("beta"), Tensor::zeros(vec![ch]));
                    stats.push(RunningStats {
                        mean: vec![T::zero(); ch],
                        var: vec![T::one(); ch],
                    });
                    Layer::BatchNorm {
                        gamma,
                        beta,
                        stats: stats.len() - 1,
                    }
                }
                LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
                LayerSpec::Activation(a) => Layer::Act(*a),
                LayerSpec::Flatten => {
                    cur = vec![cur.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Reshape(s) => {
                    if s.iter().product::<usize>() != cur.iter().product::<usize>() {
                        return Err(Error::shape("reshape layer", &cur, s));
                    }
                    cur = s.clone();
                    Layer::Reshape(s.clone())
                }
            };
            layers.push(layer);
            shapes.push(cur.clone());
        }
        Ok(Sequential {
            prefix: prefix.to_string(),
            specs: specs.to_vec(),
            layers,
            shapes,
            input_shape: input_shape.to_vec(),
            params,
            stats,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes
            .last()
            .map(|s| s.as_slice())
            .unwrap_or(&self.input_shape)
    }

    /// Run the stack on `x` (batch-first). `vars` must come from
    /// `self.params.bind`. Returns the output of every layer, plus the batch
    /// statistics of each batchnorm layer in training mode (see
    /// [`Sequential::absorb_stats`]).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        ctx: &ForwardCtx,
    ) -> Result<Forward<T>> {
        let batch = tape.shape(x)[0];
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Dense { w, b } => {
                    let y = tape.matmul(h, vars[w.0])?;
                    match b {
                        Some(b) => tape.add_channel(y, vars[b.0])?,
                        None => y,
                    }
                }
                Layer::Conv {
                    k,
                    b,
                    stride,
                    padding,
                } => {
                    let y = tape.conv2d(h, vars[k.0], *stride, *padding)?;
                    match b {
                        Some(b) => tape.add_channel(y, vars[b.0])?,
                        None => y,
                    }
                }
                Layer::ConvT {
                    k,
                    b,
                    stride,
                    padding,
                } => {
                    let y = tape.conv_transpose2d(h, vars[k.0], *stride, *padding)?;
                    match b {
                        Some(b) => tape.add_channel(y, vars[b.0])?,
                        None => y,
                    }
                }
                Layer::BatchNorm { gamma, beta, stats } => {
                    let eps = T::lit(BN_EPS);
                    let normed = if ctx.train {
                        let (y, mean, var) = tape.batch_norm(h, eps)?;
                        batch_stats.push(RunningStats { mean, var });
                        y
                    } else {
                        let rs = &self.stats[*stats];
                        let inv: Vec<T> = rs
                            .var
                            .iter()
                            .map(|&v| T::one() / (v + eps).sqrt())
                            .collect();
                        let shift: Vec<T> =
                            rs.mean.iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
                        let ch = inv.len();
                        let inv = tape.constant(Tensor::new(vec![ch], inv)?);
                        let shift = tape.constant(Tensor::new(vec![ch], shift)?);
                        let y = tape.mul_channel(h, inv)?;
                        tape.add_channel(y, shift)?
                    };
                    let y = tape.mul_channel(normed, vars[gamma.0])?;
                    tape.add_channel(y, vars[beta.0])?
                }
                Layer::Dropout { rate } => match &ctx.dropout {
                    Some(d) => {
                        let rate = d.rate_override.unwrap_or(*rate);
                        if rate > 0.0 {
                            let per = tape.value(h).len() / batch;
                            let layer_seed = mix_seed(d.seed, i as u64);
                            let mut mask = Vec::with_capacity(per * batch);
                            for s in 0..batch {
                                let seed = mix_seed(layer_seed, (d.first_sample + s) as u64);
                                mask.extend(dropout_mask::<T>(per, rate, seed));
                            }
                            tape.mask_mul(h, mask)?
                        } else {
                            h
                        }
                    }
                    None => h,
                },
                Layer::Act(a) => apply_activation(tape, h, *a),
                Layer::Flatten => {
                    let per = tape.value(h).len() / batch;
                    tape.reshape(h, &[batch, per])?
                }
                Layer::Reshape(s) => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(s);
                    tape.reshape(h, &shape)?
                }
            };
            outs.push(h);
        }
        Ok(Forward {
            outputs: outs,
            batch_stats,
        })
    }

    /// Fold batch statistics from a training-mode forward into the running
    /// averages.
    pub fn absorb_stats(&mut self, batch_stats: &[RunningStats<T>]) {
        let mom = T::lit(BN_MOMENTUM);
        for (rs, bs) in self.stats.iter_mut().zip(batch_stats) {
            for c in 0..rs.mean.len() {
                rs.mean[c] = mom * rs.mean[c] + (T::one() - mom) * bs.mean[c];
                rs.var[c] = mom * rs.var[c] + (T::one() - mom) * bs.var[c];
            }
        }
    }
}

/// Result of [`Sequential::forward`].
#[derive(Debug)]
pub struct Forward<T> {
    pub outputs: Vec<Var>,
    pub batch_stats: Vec<RunningStats<T>>,
}

impl<T> Forward<T> {
    pub fn last(&self) -> Var {
        *self.outputs.last().expect("non-empty network")
    }
}

fn spatial(cur: &[usize], prefix: &str, i: usize) -> Result<[usize; 3]> {
    match cur {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::InvalidArgument(format!(
            "{prefix}: layer {i} needs a C×H×W input, got {cur:?}"
        ))),
    }
}

pub fn apply_activation<T: Scalar>(tape: &mut Tape<T>, x: Var, a: Activation) -> Var {
    match a {
        Activation::LeakyRelu(s) => tape.leaky_relu(x, T::lit(s)),
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Identity => x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_examples() {
        let x = Tensor::<f64>::from_f64(vec![4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dropout_apply(&x, 0.0, 7).unwrap(), x);
        let ones = Tensor::<f64>::full(vec![100_000], 1.0);
        let y = dropout_apply(&ones, 0.5, 11).unwrap();
        let mean = y.sum() / 100_000.0;
        assert!((0.97..=1.03).contains(&mean), "mean {mean}");
        assert_eq!(y, dropout_apply(&ones, 0.5, 11).unwrap());
        assert!(dropout_apply(&ones, 1.0, 1).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Activation(Activation::LeakyRelu(1.0))
            .validate()
            .is_err());
        assert!(LayerSpec::Conv {
            filters: 1,
            kernel: 3,
            stride: 0,
            padding: Padding::Same
        }
        .validate()
        .is_err());
    }

    #[test]
    fn shape_inference_through_conv_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [
            LayerSpec::Conv {
                filters: 32,
                kernel: 4,
                stride: 2,
                padding: Padding::Same,
            },
            LayerSpec::Activation(Activation::LeakyRelu(0.2)),
            LayerSpec::Conv {
                filters: 64,
                kernel: 4,
                stride: 2,
                padding: Padding::Same,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Conv {
                filters: 128,
                kernel: 4,
                stride: 2,
                padding: Padding::Same,
            },
            LayerSpec::Flatten,
        ];
        let net = Sequential::<f32>::build("d", &[3, 24, 24], &specs, 0.02, &mut rng).unwrap();
        assert_eq!(net.layer_shape(0), &[32, 12, 12]);
        assert_eq!(net.layer_shape(2), &[64, 6, 6]);
        assert_eq!(net.output_shape(), &[1152]);
        // conv before batchnorm carries no bias
        assert!(net.params.find("d.2.b").is_none());
        assert!(net.params.find("d.0.b").is_some());
    }

    #[test]
    fn batchnorm_train_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net =
            Sequential::<f64>::build("n", &[3], &[LayerSpec::BatchNorm], 0.02, &mut rng).unwrap();
        let x = normal_tensor::<f64>(vec![64, 3], 3.0, &mut rng).map(|v| v + 5.0);
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let out = net
            .forward(
                &mut tape,
                &vars,
                xv,
                &ForwardCtx {
                    train: true,
                    dropout: None,
                },
            )
            .unwrap();
        let y = tape.value(out.outputs[0]);
        for c in 0..3 {
            let col: Vec<f64> = (0..64).map(|r| y.at2(r, c)).collect();
            let m = col.iter().sum::<f64>() / 64.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0;
            assert!(
                m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4,
                "channel {c}: {m} {v}"
            );
        }
    }
}
