//! Representation-learning phase: a DCGAN whose discriminator sees each image
//! together with its Sobel edge maps, with an L1 penalty keeping the feature
//! layer `M` inside `[−τ, τ]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nn::{mix_seed, Activation, DropoutCtx, ForwardCtx, LayerSpec, Sequential};
use crate::optim::{adam_step, AdamState};
use crate::sobel::{augment_input, SobelKernels};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;
const DCGK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    /// `mnist-24`, `cifar-32`, `stl-48` or `toy-N` (even `N`).
    pub arch: String,
    pub latent_dim: usize,
    pub batch_size: usize,
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub init_std: f64,
    pub d_dropout: f64,
    pub leaky_slope: f64,
    pub tau: f64,
    pub sobel: bool,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            arch: "toy-14".into(),
            latent_dim: 100,
            batch_size: 64,
            iters: 1000,
            lr: 1e-4,
            beta1: 0.5,
            init_std: 0.02,
            d_dropout: 0.2,
            leaky_slope: 0.2,
            tau: 20.0,
            sobel: true,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iters < 1 {
            return bad("GAN iteration budget must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "GAN batch size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.latent_dim < 1 {
            return bad("latent dimension must be positive".into());
        }
        Ok(())
    }
}

/// Layer stacks and geometry of one architecture preset.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub image: [usize; 3],
    pub generator: Vec<LayerSpec>,
    pub discriminator: Vec<LayerSpec>,
    /// Index of the discriminator layer whose output is `M`.
    pub feature_layer: usize,
}

fn conv(filters: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel: 3,
        stride,
        padding: Padding::Same,
    }
}

fn convt(filters: usize, stride: usize) -> LayerSpec {
    LayerSpec::ConvTranspose {
        filters,
        kernel: 4,
        stride,
        padding: Padding::Same,
    }
}

/// `(filters, stride, batchnorm)` conv blocks, then `M` as the flatten output
/// (`fc = None`) or a dense layer of `fc` units, then a sigmoid unit.
fn discriminator(
    blocks: &[(usize, usize, bool)],
    fc: Option<usize>,
    slope: f64,
    drop: f64,
) -> (Vec<LayerSpec>, usize) {
    let mut s = Vec::new();
    for &(f, stride, bn) in blocks {
        s.push(conv(f, stride));
        if bn {
            s.push(LayerSpec::BatchNorm);
        }
        s.push(LayerSpec::Activation(Activation::LeakyRelu(slope)));
        s.push(LayerSpec::Dropout { rate: drop });
    }
    s.push(LayerSpec::Flatten);
    let feature = match fc {
        Some(units) => {
            s.push(LayerSpec::Dense { units });
            let at = s.len() - 1;
            s.push(LayerSpec::Activation(Activation::LeakyRelu(slope)));
            at
        }
        None => s.len() - 1,
    };
    s.push(LayerSpec::Dense { units: 1 });
    s.push(LayerSpec::Activation(Activation::Sigmoid));
    (s, feature)
}

/// Dense projection to `base`, then `(filters, stride)` transposed-conv
/// blocks, then a final transposed conv to `channels` with tanh.
fn generator(
    base: [usize; 3],
    blocks: &[(usize, usize)],
    channels: usize,
    last_stride: usize,
    slope: f64,
) -> Vec<LayerSpec> {
    let mut s = vec![
        LayerSpec::Dense {
            units: base.iter().product(),
        },
        LayerSpec::Reshape(base.to_vec()),
        LayerSpec::BatchNorm,
        LayerSpec::Activation(Activation::LeakyRelu(slope)),
    ];
    for &(f, stride) in blocks {
        s.push(convt(f, stride));
        s.push(LayerSpec::BatchNorm);
        s.push(LayerSpec::Activation(Activation::LeakyRelu(slope)));
    }
    s.push(convt(channels, last_stride));
    s.push(LayerSpec::Activation(Activation::Tanh));
    s
}

impl Preset {
    pub fn named(arch: &str, slope: f64, drop: f64) -> Result<Preset> {
        let (image, generator, (discriminator, feature_layer)) = match arch {
            "mnist-24" => (
                [1, 24, 24],
                generator([128, 3, 3], &[(64, 2), (32, 2)], 1, 2, slope),
                discriminator(
                    &[(32, 2, false), (64, 2, true), (128, 2, true)],
                    None,
                    slope,
                    drop,
                ),
            ),
            "cifar-32" => (
                [3, 32, 32],
                generator([256, 4, 4], &[(128, 2), (64, 2)], 3, 2, slope),
                discriminator(
                    &[(64, 2, false), (128, 2, true), (256, 2, true)],
                    Some(1024),
                    slope,
                    drop,
                ),
            ),
            "stl-48" => (
                [3, 48, 48],
                generator([256, 6, 6], &[(128, 2), (64, 2)], 3, 2, slope),
                discriminator(
                    &[(64, 2, false), (128, 2, true), (256, 2, true)],
                    Some(1024),
                    slope,
                    drop,
                ),
            ),
            toy if toy.starts_with("toy-") => {
                let n: usize = toy[4..]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("unknown architecture {arch}")))?;
                if n < 4 || !n.is_multiple_of(2) {
                    return Err(Error::InvalidArgument(format!(
                        "toy side must be even and ≥ 4, got {n}"
                    )));
                }
                (
                    [1, n, n],
                    generator([32, n / 2, n / 2], &[(16, 1)], 1, 2, slope),
                    discriminator(&[(16, 2, false), (32, 2, true)], Some(64), slope, drop),
                )
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown architecture {arch}"
                )))
            }
        };
        Ok(Preset {
            image,
            generator,
            discriminator,
            feature_layer,
        })
    }
}

/// `n×dim` uniform draws on `[−1, 1]`.
pub fn sample_latent<T: Scalar>(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    let v = (0..n * dim)
        .map(|_| T::lit(rng.random_range(-1.0..=1.0)))
        .collect();
    Tensor::new(vec![n, dim], v).expect("latent shape")
}

fn warn_clamped(p: &[f64], what: &str) {
    let hits = p
        .iter()
        .filter(|&&v| v <= P_CLAMP || v >= 1.0 - P_CLAMP)
        .count();
    if hits > 0 {
        warn!("{hits} {what} probabilities clamped to [{P_CLAMP}, 1 - {P_CLAMP}]");
    }
}

fn clamp_probs(p: &[f64], what: &str) -> Vec<f64> {
    warn_clamped(p, what);
    p.iter().map(|&v| v.clamp(P_CLAMP, 1.0 - P_CLAMP)).collect()
}

/// `Σ max(|m| − τ, 0)` over features, averaged over rows.
pub fn l1_penalty(m: &Tensor<f64>, tau: f64) -> f64 {
    let rows = m.shape().first().copied().unwrap_or(1).max(1);
    m.data()
        .iter()
        .map(|&v| (v.abs() - tau).max(0.0))
        .sum::<f64>()
        / rows as f64
}

/// `−[mean log d_real + mean log(1 − d_fake)] + L1(M_real)`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64], m_real: &Tensor<f64>, tau: f64) -> f64 {
    let r = clamp_probs(d_real, "real");
    let f = clamp_probs(d_fake, "fake");
    let lr = r.iter().map(|v| v.ln()).sum::<f64>() / r.len() as f64;
    let lf = f.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / f.len() as f64;
    -(lr + lf) + l1_penalty(m_real, tau)
}

/// Non-saturating `−mean log d_fake`.
pub fn generator_loss(d_fake: &[f64]) -> f64 {
    let f = clamp_probs(d_fake, "fake");
    -f.iter().map(|v| v.ln()).sum::<f64>() / f.len() as f64
}

fn tape_l1<T: Scalar>(tape: &mut Tape<T>, m: Var, tau: f64) -> Var {
    let rows = tape.shape(m)[0];
    let hi = tape.add_scalar(m, T::lit(-tau));
    let hi = tape.relu(hi);
    let neg = tape.neg(m);
    let lo = tape.add_scalar(neg, T::lit(-tau));
    let lo = tape.relu(lo);
    let both = tape.add(hi, lo).expect("same shape");
    let s = tape.sum(both);
    tape.scale(s, T::lit(1.0 / rows as f64))
}

/// `mean log(x)` or `mean log(1 − x)` of a probability node, clamped.
fn tape_mean_log<T: Scalar>(tape: &mut Tape<T>, p: Var, complement: bool) -> Var {
    let x = if complement {
        let n = tape.neg(p);
        tape.add_scalar(n, T::one())
    } else {
        p
    };
    let l = tape.log_clamped(x, T::lit(P_CLAMP));
    tape.mean(l)
}

/// Per-iteration record of the adversarial phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStepLog {
    pub iter: usize,
    pub d_loss: f64,
    pub l1_penalty: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub m_max_abs: f64,
}

/// Generator, discriminator, their optimizers and the sampling stream.
pub struct GanState {
    pub config: GanConfig,
    pub preset: Preset,
    pub generator: Sequential<f32>,
    pub discriminator: Sequential<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub iter: usize,
    pub history: Vec<GanStepLog>,
    kernels: SobelKernels,
    rng: ChaCha8Rng,
}

impl GanState {
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let preset = Preset::named(&config.arch, config.leaky_slope, config.d_dropout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Sequential::build(
            "gen",
            &[config.latent_dim],
            &preset.generator,
            config.init_std,
            &mut rng,
        )?;
        if generator.output_shape() != preset.image {
            return Err(Error::shape(
                "generator output",
                generator.output_shape(),
                &preset.image,
            ));
        }
        let [c, h, w] = preset.image;
        let d_in = [if config.sobel { c + 2 } else { c }, h, w];
        let discriminator = Sequential::build(
            "disc",
            &d_in,
            &preset.discriminator,
            config.init_std,
            &mut rng,
        )?;
        let adam_g = AdamState::new(generator.params.values(), config.lr, config.beta1);
        let adam_d = AdamState::new(discriminator.params.values(), config.lr, config.beta1);
        Ok(GanState {
            config,
            preset,
            generator,
            discriminator,
            adam_g,
            adam_d,
            iter: 0,
            history: Vec::new(),
            kernels: SobelKernels::default(),
            rng,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.preset.image
    }

    /// Width of the feature layer `M`.
    pub fn feature_dim(&self) -> usize {
        self.discriminator.layer_shape(self.preset.feature_layer)[0]
    }

    fn d_input(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        if self.config.sobel {
            augment_input(tape, &self.kernels, x)
        } else {
            Ok(x)
        }
    }

    /// Discriminator forward returning `(probabilities, M, batch stats)`.
    pub fn discriminate(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        x: Var,
        ctx: &ForwardCtx,
    ) -> Result<(Var, Var, Vec<crate::nn::RunningStats<f32>>)> {
        let input = self.d_input(tape, x)?;
        let fwd = self.discriminator.forward(tape, vars, input, ctx)?;
        let d = tape.reshape(fwd.last(), &[tape.shape(fwd.last())[0]])?;
        Ok((d, fwd.outputs[self.preset.feature_layer], fwd.batch_stats))
    }

    /// Images from the generator in inference mode.
    pub fn generate(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.generator.params.bind(&mut tape, false);
        let x = tape.constant(z.clone());
        let out = self
            .generator
            .forward(&mut tape, &vars, x, &ForwardCtx::eval())?;
        Ok(tape.value(out.last()).clone())
    }

    fn check_batch(&self, real: &Tensor<f32>) -> Result<()> {
        let s = real.shape();
        if s.len() != 4 || s[1..] != self.preset.image {
            let mut want = vec![0];
            want.extend_from_slice(&self.preset.image);
            return Err(Error::shape("real batch", s, &want));
        }
        Ok(())
    }

    /// One discriminator update on `real` and a generated batch, then one
    /// generator update on a fresh latent batch.
    pub fn train_step(&mut self, real: &Tensor<f32>) -> Result<GanStepLog> {
        self.check_batch(real)?;
        let b = real.shape()[0];
        let step_seed = mix_seed(self.config.seed, self.iter as u64);
        let train_ctx = |salt: u64| ForwardCtx {
            train: true,
            dropout: Some(DropoutCtx {
                rate_override: None,
                seed: mix_seed(step_seed, salt),
                first_sample: 0,
            }),
        };

        let z = sample_latent::<f32>(b, self.config.latent_dim, &mut self.rng);
        let fake = {
            let mut tape = Tape::new();
            let vars = self.generator.params.bind(&mut tape, false);
            let zv = tape.constant(z);
            let out = self
                .generator
                .forward(&mut tape, &vars, zv, &train_ctx(0))?;
            tape.value(out.last()).clone()
        };

        let mut tape = Tape::new();
        let vars = self.discriminator.params.bind(&mut tape, true);
        let xr = tape.constant(real.clone());
        let (d_real, m_real, real_stats) =
            self.discriminate(&mut tape, &vars, xr, &train_ctx(1))?;
        let xf = tape.constant(fake);
        let (d_fake, _, _) = self.discriminate(&mut tape, &vars, xf, &train_ctx(2))?;
        let lr = tape_mean_log(&mut tape, d_real, false);
        let lf = tape_mean_log(&mut tape, d_fake, true);
        let adv = tape.add(lr, lf)?;
        let adv = tape.neg(adv);
        let pen = tape_l1(&mut tape, m_real, self.config.tau);
        let d_loss = tape.add(adv, pen)?;
        let d_loss_v = tape.value(d_loss).item() as f64;
        let pen_v = tape.value(pen).item() as f64;
        let dr = tape.value(d_real).to_f64_vec();
        let df = tape.value(d_fake).to_f64_vec();
        let m_max = tape.value(m_real).max_abs() as f64;
        if !d_loss_v.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss at iteration {}",
                self.iter
            )));
        }
        let mut grads = tape.backward(d_loss)?;
        let g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v)).collect();
        adam_step(self.discriminator.params.values_mut(), &g, &mut self.adam_d)?;
        self.discriminator.absorb_stats(&real_stats);
        warn_clamped(&dr, "real");
        warn_clamped(&df, "fake");

        let z = sample_latent::<f32>(b, self.config.latent_dim, &mut self.rng);
        let mut tape = Tape::new();
        let gvars = self.generator.params.bind(&mut tape, true);
        let dvars = self.discriminator.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let gen = self
            .generator
            .forward(&mut tape, &gvars, zv, &train_ctx(3))?;
        let (d_gen, _, _) = self.discriminate(&mut tape, &dvars, gen.last(), &train_ctx(4))?;
        let lg = tape_mean_log(&mut tape, d_gen, false);
        let g_loss = tape.neg(lg);
        let g_loss_v = tape.value(g_loss).item() as f64;
        if !g_loss_v.is_finite() {
            return Err(Error::NonFinite(format!(
                "generator loss at iteration {}",
                self.iter
            )));
        }
        let mut grads = tape.backward(g_loss)?;
        let g: Vec<Tensor<f32>> = gvars.iter().map(|&v| grads.take(v)).collect();
        adam_step(self.generator.params.values_mut(), &g, &mut self.adam_g)?;
        self.generator.absorb_stats(&gen.batch_stats);

        let log = GanStepLog {
            iter: self.iter,
            d_loss: d_loss_v,
            l1_penalty: pen_v,
            g_loss: g_loss_v,
            d_real: dr.iter().sum::<f64>() / b as f64,
            d_fake: df.iter().sum::<f64>() / b as f64,
            m_max_abs: m_max,
        };
        self.iter += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    /// Run `config.iters` steps over shuffled mini-batches of `images`,
    /// reshuffling at each pass. `on_step` sees every log record.
    pub fn train(
        &mut self,
        images: &Tensor<f32>,
        mut on_step: impl FnMut(&GanStepLog),
    ) -> Result<()> {
        self.check_batch(images)?;
        let n = images.shape()[0];
        let bs = self.config.batch_size;
        if n < bs {
            return Err(Error::InvalidArgument(format!(
                "{n} images cannot fill a batch of {bs}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        while self.iter < self.config.iters {
            if cursor + bs > n {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let batch = images.gather_rows(&order[cursor..cursor + bs]);
            cursor += bs;
            let log = self.train_step(&batch)?;
            on_step(&log);
        }
        Ok(())
    }

    /// Every named tensor of the checkpoint, parameters first, then batchnorm
    /// running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for net in [&self.generator, &self.discriminator] {
            for (name, v) in net.params.names().iter().zip(net.params.values()) {
                out.push((name.clone(), v.clone()));
            }
            for (j, s) in net.stats.iter().enumerate() {
                let ch = s.mean.len();
                out.push((
                    format!("{}.bn{j}.mean", net.prefix()),
                    Tensor::new(vec![ch], s.mean.clone()).unwrap(),
                ));
                out.push((
                    format!("{}.bn{j}.var", net.prefix()),
                    Tensor::new(vec![ch], s.var.clone()).unwrap(),
                ));
            }
        }
        out
    }

    /// Overwrite parameters and running statistics from checkpoint tensors.
    /// Every expected name must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut map: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape("checkpoint tensor", t.shape(), shape));
            }
            Ok(t)
        };
        for net in [&mut self.generator, &mut self.discriminator] {
            let names = net.params.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                let shape = net.params.values()[i].shape().to_vec();
                net.params.values_mut()[i] = take(name, &shape)?;
            }
            let prefix = net.prefix().to_string();
            for (j, s) in net.stats.iter_mut().enumerate() {
                let ch = s.mean.len();
                s.mean = take(&format!("{prefix}.bn{j}.mean"), &[ch])?.into_data();
                s.var = take(&format!("{prefix}.bn{j}.var"), &[ch])?.into_data();
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(
                "checkpoint",
                format!("unexpected tensor {extra}"),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&encode_checkpoint(&self.named_tensors())?)?;
        Ok(())
    }

    pub fn load(config: GanConfig, path: &Path) -> Result<Self> {
        let mut s = GanState::new(config)?;
        s.load_tensors(decode_checkpoint(&fs::read(path)?)?)?;
        Ok(s)
    }
}

/// `DCGK` container of named little-endian f32 tensors.
pub fn encode_checkpoint(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = b"DCGK".to_vec();
    out.extend_from_slice(&DCGK_VERSION.to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "tensor {name} cannot be encoded"
            )));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.get(..4) != Some(b"DCGK") {
        return Err(Error::format("checkpoint", "missing DCGK magic"));
    }
    let trunc = |at: usize| Error::format("checkpoint", format!("truncated at byte {at}"));
    let get = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| trunc(at));
    let version = u32::from_le_bytes(get(4, 4)?.try_into().unwrap());
    if version != DCGK_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let mut at = 8;
    let mut out = Vec::new();
    while at < bytes.len() {
        let len = u16::from_le_bytes(get(at, 2)?.try_into().unwrap()) as usize;
        at += 2;
        let name = String::from_utf8(get(at, len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        at += len;
        let rank = get(at, 1)?[0] as usize;
        at += 1;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(get(at, 4)?.try_into().unwrap()) as usize);
            at += 4;
        }
        let n: usize = shape.iter().product();
        let data = get(at, 4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        at += 4 * n;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
