//! Auxiliary clustering classifier: a shared fully connected trunk feeding a
//! bank of softmax heads, trained on discriminator features by minimizing,
//! per head,
//!
//! ```text
//! ½·R_sat + ½·L_d + λ·(max(KL(p̄ ‖ u) − δ, 0) + H(Y|M))
//! ```
//!
//! averaged over the heads. `R_sat` is the divergence between predictions on
//! a feature and on its virtual-adversarial perturbation, `L_d` the divergence
//! between predictions on clean features and on their low-dropout variant.
//! The first argument of both divergences is held constant.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::info;
use crate::nn::{normal_tensor, ParamId, ParamStore};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadRole {
    Primary,
    Overcluster,
}

/// Output count, tolerance and role of one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub k: usize,
    pub delta: f64,
    pub role: HeadRole,
}

impl HeadSpec {
    pub fn primary(k: usize, delta: f64) -> Self {
        HeadSpec {
            k,
            delta,
            role: HeadRole::Primary,
        }
    }

    pub fn overcluster(k: usize, delta: f64) -> Self {
        HeadSpec {
            k,
            delta,
            role: HeadRole::Overcluster,
        }
    }
}

/// `primary` heads with `k` outputs and `δ = 1e-4·ln k`, plus `over` heads with
/// `factor·k` outputs and `δ = 1e-2·ln(factor·k)`.
pub fn default_heads(k: usize, primary: usize, over: usize, factor: usize) -> Vec<HeadSpec> {
    let kp = k * factor;
    let mut heads: Vec<HeadSpec> = (0..primary)
        .map(|_| HeadSpec::primary(k, 1e-4 * (k as f64).ln()))
        .collect();
    heads.extend((0..over).map(|_| HeadSpec::overcluster(kp, 1e-2 * (kp as f64).ln())));
    heads
}

/// How the perturbation radius scales with a feature's norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormRule {
    /// `ε = α·‖m‖₂`
    L2,
    /// `ε = α·‖m‖₂²`
    Squared,
}

/// Two-round perturbation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub alpha_r: f64,
    pub alpha_adv: f64,
    pub replicas: usize,
    pub norm: NormRule,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_r > 0.0 && self.alpha_adv > 0.0) || self.replicas < 1 {
            return Err(Error::InvalidArgument(format!(
                "perturbation needs alpha_r, alpha_adv > 0 and replicas ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn radius(&self, alpha: f64, norm: f64) -> f64 {
        match self.norm {
            NormRule::L2 => alpha * norm,
            NormRule::Squared => alpha * norm * norm,
        }
    }
}

/// Which divergence the adversarial direction is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VatTarget {
    Head(usize),
    /// Sum over all heads; one perturbation shared by the bank.
    Bank,
}

/// Whether each head gets its own adversarial perturbations during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VatMode {
    PerHead,
    Shared,
}

#[derive(Clone, Debug)]
struct Head {
    spec: HeadSpec,
    w: ParamId,
    b: ParamId,
}

/// Shared ReLU trunk plus softmax heads.
#[derive(Clone, Debug)]
pub struct ClusterBank<T> {
    pub params: ParamStore<T>,
    input_dim: usize,
    trunk: Vec<(ParamId, ParamId)>,
    heads: Vec<Head>,
}

impl<T: Scalar> ClusterBank<T> {
    /// Hidden widths may be empty, giving linear-softmax heads.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        heads: &[HeadSpec],
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidArgument(
                "a cluster bank needs at least one head".into(),
            ));
        }
        let primary_k = heads
            .iter()
            .filter(|h| h.role == HeadRole::Primary)
            .map(|h| h.k)
            .max();
        for h in heads {
            if h.k < 2 || !(h.delta >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid head {h:?}")));
            }
            if let (HeadRole::Overcluster, Some(pk)) = (h.role, primary_k) {
                if h.k <= pk {
                    return Err(Error::InvalidArgument(format!(
                        "overcluster head has k' = {} but primary k = {pk}",
                        h.k
                    )));
                }
            }
        }
        let mut params = ParamStore::new();
        let mut trunk = Vec::new();
        let mut width = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let w = params.add(
                format!("trunk.{i}.w"),
                normal_tensor(vec![width, h], init_std, rng),
            );
            let b = params.add(format!("trunk.{i}.b"), Tensor::zeros(vec![h]));
            trunk.push((w, b));
            width = h;
        }
        let heads = heads
            .iter()
            .enumerate()
            .map(|(j, &spec)| Head {
                spec,
                w: params.add(
                    format!("head.{j}.w"),
                    normal_tensor(vec![width, spec.k], init_std, rng),
                ),
                b: params.add(format!("head.{j}.b"), Tensor::zeros(vec![spec.k])),
            })
            .collect();
        Ok(ClusterBank {
            params,
            input_dim,
            trunk,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, j: usize) -> &HeadSpec {
        &self.heads[j].spec
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        self.heads.iter().map(|h| h.spec).collect()
    }

    pub fn trunk_forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in &self.trunk {
            let y = tape.matmul(h, vars[w.0])?;
            let y = tape.add_channel(y, vars[b.0])?;
            h = tape.relu(y);
        }
        Ok(h)
    }

    pub fn head_probs(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        trunk_out: Var,
        j: usize,
    ) -> Result<Var> {
        let head = &self.heads[j];
        let z = tape.matmul(trunk_out, vars[head.w.0])?;
        let z = tape.add_channel(z, vars[head.b.0])?;
        tape.softmax(z, 1)
    }

    fn check_input(&self, m: &Tensor<T>) -> Result<()> {
        if m.rank() != 2 || m.shape()[1] != self.input_dim {
            return Err(Error::shape(
                "cluster input",
                m.shape(),
                &[0, self.input_dim],
            ));
        }
        Ok(())
    }

    /// Softmax outputs of every head on `m`, without gradients.
    pub fn predict_all(&self, m: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(m)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(m.clone());
        let h = self.trunk_forward(&mut tape, &vars, x)?;
        (0..self.heads.len())
            .map(|j| {
                let p = self.head_probs(&mut tape, &vars, h, j)?;
                Ok(tape.value(p).clone())
            })
            .collect()
    }

    pub fn predict(&self, m: &Tensor<T>, head: usize) -> Result<Tensor<T>> {
        self.check_input(m)?;
        if head >= self.heads.len() {
            return Err(Error::InvalidArgument(format!("no head {head}")));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(m.clone());
        let h = self.trunk_forward(&mut tape, &vars, x)?;
        let p = self.head_probs(&mut tape, &vars, h, head)?;
        Ok(tape.value(p).clone())
    }
}

/// Per-row argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Hard cluster labels from one head.
pub fn assign_clusters<T: Scalar>(
    bank: &ClusterBank<T>,
    head: usize,
    features: &Tensor<T>,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&bank.predict(features, head)?))
}

fn row_norms<T: Scalar>(m: &Tensor<T>) -> Vec<f64> {
    let d = m.shape()[1];
    m.data()
        .chunks(d)
        .map(|r| {
            r.iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn random_unit_rows(b: usize, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * d);
    for _ in 0..b {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                out.extend(v.iter().map(|x| x / n));
                break;
            }
        }
    }
    out
}

/// Adversarial perturbations of `m`, one `B×d` tensor per replica.
///
/// Round one draws a random unit direction `dᵢ` per row, sets
/// `rᵢ = α_r·‖mᵢ‖·dᵢ` and takes `gᵢ = ∂/∂rᵢ KL(p(y|mᵢ) ‖ p(y|mᵢ + rᵢ))`.
/// Round two returns `α_adv·‖mᵢ‖·gᵢ/‖gᵢ‖`, falling back to `dᵢ` when
/// `‖gᵢ‖ < 1e-12`. `clean` may supply the already computed predictions on `m`
/// (one tensor per head).
pub fn vat_perturbation<T: Scalar>(
    bank: &ClusterBank<T>,
    m: &Tensor<T>,
    clean: Option<&[Tensor<T>]>,
    target: VatTarget,
    spec: &PerturbSpec,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    spec.validate()?;
    bank.check_input(m)?;
    let (b, d) = (m.shape()[0], m.shape()[1]);
    let reps = spec.replicas;
    let heads: Vec<usize> = match target {
        VatTarget::Head(j) if j < bank.num_heads() => vec![j],
        VatTarget::Head(j) => return Err(Error::InvalidArgument(format!("no head {j}"))),
        VatTarget::Bank => (0..bank.num_heads()).collect(),
    };
    let owned;
    let clean = match clean {
        Some(c) => c,
        None => {
            owned = bank.predict_all(m)?;
            &owned[..]
        }
    };
    let norms = row_norms(m);
    let dirs = random_unit_rows(b * reps, d, rng);
    let mut r1 = Vec::with_capacity(b * reps * d);
    for rep in 0..reps {
        for i in 0..b {
            let eps = spec.radius(spec.alpha_r, norms[i]);
            let row = &dirs[(rep * b + i) * d..(rep * b + i + 1) * d];
            r1.extend(row.iter().map(|&v| T::lit(eps * v)));
        }
    }

    let mut tape = Tape::new();
    let vars = bank.params.bind(&mut tape, false);
    let tiled: Vec<&Tensor<T>> = std::iter::repeat_n(m, reps).collect();
    let base = tape.constant(Tensor::concat_rows(&tiled)?);
    let r = tape.param(Tensor::new(vec![b * reps, d], r1)?);
    let x = tape.add(base, r)?;
    let h = bank.trunk_forward(&mut tape, &vars, x)?;
    let mut loss: Option<Var> = None;
    for &j in &heads {
        let q = bank.head_probs(&mut tape, &vars, h, j)?;
        let tgt: Vec<&Tensor<T>> = std::iter::repeat_n(&clean[j], reps).collect();
        let kl = info::tape_kl_to(&mut tape, &Tensor::concat_rows(&tgt)?, q)?;
        // summed over rows so the per-row gradient is not diluted by 1/B
        let kl = tape.scale(kl, T::lit((b * reps) as f64));
        loss = Some(match loss {
            Some(l) => tape.add(l, kl)?,
            None => kl,
        });
    }
    let loss = loss.expect("at least one head");
    let grads = tape.backward(loss)?;
    let g = grads.wrt(r);
    g.check_finite("adversarial direction gradient")?;

    let mut out = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let at = (rep * b + i) * d;
            let gi = &g.data()[at..at + d];
            let gn = gi
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            let eps = spec.radius(spec.alpha_adv, norms[i]);
            if gn < 1e-12 {
                data.extend(dirs[at..at + d].iter().map(|&v| T::lit(eps * v)));
            } else {
                data.extend(gi.iter().map(|&v| T::lit(eps * v.as_f64() / gn)));
            }
        }
        out.push(Tensor::new(vec![b, d], data)?);
    }
    Ok(out)
}

/// Loss terms of one head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadBreakdown {
    pub r_sat: f64,
    pub l_d: f64,
    pub kl: f64,
    pub kl_clamped: f64,
    pub cond_entropy: f64,
    pub total: f64,
}

impl HeadBreakdown {
    /// Evaluate every term from probability matrices: `clean` on `m`,
    /// `perturbed` on each `m + r_adv` replica, `prime` on `m'`.
    pub fn from_probs(
        clean: &Tensor<f64>,
        perturbed: &[Tensor<f64>],
        prime: &Tensor<f64>,
        delta: f64,
        lambda: f64,
    ) -> Result<Self> {
        let r_sat = if perturbed.is_empty() {
            0.0
        } else {
            perturbed
                .iter()
                .map(|q| info::kl_divergence(clean, q))
                .sum::<Result<f64>>()?
                / perturbed.len() as f64
        };
        let l_d = info::kl_divergence(clean, prime)?;
        let kl = info::kl_to_uniform(&info::marginal(clean)?);
        let kl_clamped = info::marginal_kl_tolerant(clean, delta)?;
        let cond_entropy = info::conditional_entropy(clean)?;
        Ok(HeadBreakdown {
            r_sat,
            l_d,
            kl,
            kl_clamped,
            cond_entropy,
            total: 0.5 * r_sat + 0.5 * l_d + lambda * (kl_clamped + cond_entropy),
        })
    }
}

/// Per-head terms plus their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heads: Vec<HeadBreakdown>,
    pub mean_total: f64,
}

impl LossBreakdown {
    pub fn from_heads(heads: Vec<HeadBreakdown>) -> Self {
        let mean_total = if heads.is_empty() {
            0.0
        } else {
            heads.iter().map(|h| h.total).sum::<f64>() / heads.len() as f64
        };
        LossBreakdown { heads, mean_total }
    }

    /// Element-wise mean of several breakdowns with the same head count.
    pub fn average(parts: &[LossBreakdown]) -> Self {
        let Some(first) = parts.first() else {
            return LossBreakdown::default();
        };
        let n = parts.len() as f64;
        let heads = (0..first.heads.len())
            .map(|j| {
                let mut acc = HeadBreakdown::default();
                for p in parts {
                    let h = &p.heads[j];
                    acc.r_sat += h.r_sat / n;
                    acc.l_d += h.l_d / n;
                    acc.kl += h.kl / n;
                    acc.kl_clamped += h.kl_clamped / n;
                    acc.cond_entropy += h.cond_entropy / n;
                    acc.total += h.total / n;
                }
                acc
            })
            .collect();
        LossBreakdown::from_heads(heads)
    }
}

/// Which loss components are active; all on by default. Switching terms off
/// reproduces the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub vat: bool,
    pub dropout: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms {
            vat: true,
            dropout: true,
        }
    }
}

/// Differentiable per-head objective on a tape. `perturbed` holds one node per
/// replica, `targets` the constant clean predictions.
#[allow(clippy::too_many_arguments)]
fn head_objective<T: Scalar>(
    tape: &mut Tape<T>,
    clean: Var,
    target: &Tensor<T>,
    perturbed: Option<Var>,
    prime: Option<Var>,
    delta: f64,
    lambda: f64,
) -> Result<(Var, [Option<Var>; 2], Var, Var, Var)> {
    let r_sat = match perturbed {
        Some(p) => {
            let reps = tape.shape(p)[0] / target.shape()[0];
            let tiled: Vec<&Tensor<T>> = std::iter::repeat_n(target, reps).collect();
            Some(info::tape_kl_to(tape, &Tensor::concat_rows(&tiled)?, p)?)
        }
        None => None,
    };
    let l_d = match prime {
        Some(p) => Some(info::tape_kl_to(tape, target, p)?),
        None => None,
    };
    let (klc, klu) = info::tape_marginal_kl(tape, clean, delta)?;
    let h = info::tape_conditional_entropy(tape, clean);
    let mi = tape.add(klc, h)?;
    let mut total = tape.scale(mi, T::lit(lambda));
    for t in [r_sat, l_d].into_iter().flatten() {
        let half = tape.scale(t, T::lit(0.5));
        total = tape.add(total, half)?;
    }
    Ok((total, [r_sat, l_d], klc, klu, h))
}

/// Build the full bank objective for one mini-batch on `tape`. `adv[j]` holds
/// the replicas used by head `j` (a shared set may be repeated). Returns the
/// scalar loss and the per-head breakdown read off the forward values.
#[allow(clippy::too_many_arguments)]
pub fn bank_objective<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    bank: &ClusterBank<T>,
    m: &Tensor<T>,
    m_prime: Option<&Tensor<T>>,
    adv: &[Vec<Tensor<T>>],
    targets: &[Tensor<T>],
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let c = bank.num_heads();
    let b = m.shape()[0];
    let shared = adv.len() <= 1
        || adv
            .windows(2)
            .all(|w| std::ptr::eq(w[0].as_ptr(), w[1].as_ptr()));
    // stack [m; m'; m + r_1; ...] so the trunk runs once for shared replicas
    let mut stack: Vec<Tensor<T>> = vec![m.clone()];
    if let Some(p) = m_prime {
        stack.push(p.clone());
    }
    let pert = |r: &Tensor<T>| -> Result<Tensor<T>> {
        let data = m
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::new(m.shape().to_vec(), data)
    };
    let shared_reps = if shared {
        adv.first().map(|a| a.len()).unwrap_or(0)
    } else {
        0
    };
    if shared {
        if let Some(reps) = adv.first() {
            for r in reps {
                stack.push(pert(r)?);
            }
        }
    }
    let refs: Vec<&Tensor<T>> = stack.iter().collect();
    let x = tape.constant(Tensor::concat_rows(&refs)?);
    let h = bank.trunk_forward(tape, vars, x)?;
    let prime_off = m_prime.map(|_| b);
    let pert_off = b * (1 + usize::from(m_prime.is_some()));

    let mut total: Option<Var> = None;
    let mut rows = Vec::with_capacity(c);
    for j in 0..c {
        let probs = bank.head_probs(tape, vars, h, j)?;
        let clean = tape.slice_rows(probs, 0, b)?;
        let prime = match prime_off {
            Some(off) => Some(tape.slice_rows(probs, off, b)?),
            None => None,
        };
        let perturbed = if shared {
            if shared_reps > 0 {
                Some(tape.slice_rows(probs, pert_off, b * shared_reps)?)
            } else {
                None
            }
        } else if adv[j].is_empty() {
            None
        } else {
            let xs: Vec<Tensor<T>> = adv[j].iter().map(&pert).collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = xs.iter().collect();
            let xj = tape.constant(Tensor::concat_rows(&refs)?);
            let hj = bank.trunk_forward(tape, vars, xj)?;
            Some(bank.head_probs(tape, vars, hj, j)?)
        };
        let spec = bank.head(j);
        let (tot, [r_sat, l_d], klc, klu, ent) = head_objective(
            tape,
            clean,
            &targets[j],
            perturbed,
            prime,
            spec.delta,
            lambda,
        )?;
        let read = |v: Option<Var>, tape: &Tape<T>| {
            v.map(|v| tape.value(v).item().as_f64()).unwrap_or(0.0)
        };
        rows.push(HeadBreakdown {
            r_sat: read(r_sat, tape),
            l_d: read(l_d, tape),
            kl: tape.value(klu).item().as_f64(),
            kl_clamped: tape.value(klc).item().as_f64(),
            cond_entropy: tape.value(ent).item().as_f64(),
            total: tape.value(tot).item().as_f64(),
        });
        total = Some(match total {
            Some(t) => tape.add(t, tot)?,
            None => tot,
        });
    }
    let loss = tape.scale(total.expect("heads"), T::lit(1.0 / c as f64));
    Ok((loss, LossBreakdown::from_heads(rows)))
}

/// Evaluate one head's terms on fixed inputs, without gradients.
pub fn head_loss<T: Scalar>(
    bank: &ClusterBank<T>,
    head: usize,
    m: &Tensor<T>,
    m_prime: &Tensor<T>,
    adv: &[Tensor<T>],
    lambda: f64,
) -> Result<HeadBreakdown> {
    let clean = bank.predict(m, head)?.cast::<f64>();
    let prime = bank.predict(m_prime, head)?.cast::<f64>();
    let perturbed = adv
        .iter()
        .map(|r| {
            let x = Tensor::new(
                m.shape().to_vec(),
                m.data()
                    .iter()
                    .zip(r.data())
                    .map(|(&a, &b)| a + b)
                    .collect(),
            )?;
            Ok(bank.predict(&x, head)?.cast::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;
    HeadBreakdown::from_probs(&clean, &perturbed, &prime, bank.head(head).delta, lambda)
}

/// Mean of [`head_loss`] over all heads; `adv[j]` are head `j`'s replicas.
pub fn bank_loss<T: Scalar>(
    bank: &ClusterBank<T>,
    m: &Tensor<T>,
    m_prime: &Tensor<T>,
    adv: &[Vec<Tensor<T>>],
    lambda: f64,
) -> Result<LossBreakdown> {
    let heads = (0..bank.num_heads())
        .map(|j| head_loss(bank, j, m, m_prime, &adv[j], lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::from_heads(heads))
}

/// Lowest-total primary head; overcluster heads never win. Ties go to the
/// lowest index.
pub fn select_best_head(breakdown: &LossBreakdown, heads: &[HeadSpec]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, (h, spec)) in breakdown.heads.iter().zip(heads).enumerate() {
        if spec.role != HeadRole::Primary {
            continue;
        }
        if best.is_none_or(|(_, t)| h.total < t) {
            best = Some((j, h.total));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::InvalidArgument("no primary head to select".into()))
}

/// Optimizer and schedule settings of the clustering phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub hidden: Vec<usize>,
    pub heads: Vec<HeadSpec>,
    pub init_std: f64,
    pub lr: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub perturb: PerturbSpec,
    pub vat_mode: VatMode,
    pub terms: Terms,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        self.perturb.validate()?;
        if self.batch_size < 1 || self.heads.is_empty() || !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(
                "cluster config needs batch_size ≥ 1, at least one head and λ ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of the clustering log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub heads: Vec<HeadBreakdown>,
    pub mean_total: f64,
    pub best_head: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

/// Owns the bank, its optimizer state and the sampling stream.
pub struct ClusterTrainer<T> {
    pub bank: ClusterBank<T>,
    pub adam: AdamState<T>,
    pub config: ClusterConfig,
    rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> ClusterTrainer<T> {
    pub fn new(input_dim: usize, config: ClusterConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bank = ClusterBank::new(
            input_dim,
            &config.hidden,
            &config.heads,
            config.init_std,
            &mut rng,
        )?;
        let adam = AdamState::new(bank.params.values(), config.lr, config.beta1);
        Ok(ClusterTrainer {
            bank,
            adam,
            config,
            rng,
            history: Vec::new(),
        })
    }

    /// One Adam step on the given mini-batch.
    pub fn step(&mut self, m: &Tensor<T>, m_prime: &Tensor<T>) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let c = self.bank.num_heads();
        let targets = self.bank.predict_all(m)?;
        let adv: Vec<Vec<Tensor<T>>> = if !cfg.terms.vat {
            vec![Vec::new(); c]
        } else {
            match cfg.vat_mode {
                VatMode::Shared => {
                    let r = vat_perturbation(
                        &self.bank,
                        m,
                        Some(&targets),
                        VatTarget::Bank,
                        &cfg.perturb,
                        &mut self.rng,
                    )?;
                    vec![r]
                }
                VatMode::PerHead => (0..c)
                    .map(|j| {
                        vat_perturbation(
                            &self.bank,
                            m,
                            Some(&targets),
                            VatTarget::Head(j),
                            &cfg.perturb,
                            &mut self.rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            }
        };
        let adv_by_head: Vec<Vec<Tensor<T>>>;
        let adv_ref: &[Vec<Tensor<T>>] = if adv.len() == 1 && c > 1 {
            // shared: every head sees the same replicas
            adv_by_head = vec![adv[0].clone()];
            &adv_by_head
        } else {
            &adv
        };
        let mut tape = Tape::new();
        let vars = self.bank.params.bind(&mut tape, true);
        let prime = cfg.terms.dropout.then_some(m_prime);
        let (loss, breakdown) = bank_objective(
            &mut tape, &vars, &self.bank, m, prime, adv_ref, &targets, cfg.lambda,
        )?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("clustering loss ({breakdown:?})")));
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor<T>> = vars.iter().map(|&v| grads.take(v)).collect();
        adam_step(self.bank.params.values_mut(), &g, &mut self.adam)?;
        Ok(breakdown)
    }

    /// One pass over `features` in shuffled mini-batches. The returned record
    /// averages the per-batch breakdowns; its best head is the lowest-loss
    /// primary head.
    pub fn train_epoch(&mut self, features: &Tensor<T>, prime: &Tensor<T>) -> Result<EpochRecord> {
        if features.shape() != prime.shape() {
            return Err(Error::shape("train_epoch", features.shape(), prime.shape()));
        }
        let n = features.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let bs = self.config.batch_size.min(n);
        let mut parts = Vec::new();
        for chunk in order.chunks(bs) {
            // a trailing sliver would give a noisy marginal; fold it into the previous batch instead
            if chunk.len() < bs / 2 && !parts.is_empty() {
                continue;
            }
            let m = features.gather_rows(chunk);
            let p = prime.gather_rows(chunk);
            parts.push(self.step(&m, &p)?);
        }
        let avg = LossBreakdown::average(&parts);
        let best_head = select_best_head(&avg, &self.config.heads)?;
        let rec = EpochRecord {
            epoch: self.history.len(),
            mean_total: avg.mean_total,
            heads: avg.heads,
            best_head,
            acc: None,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn best_head(&self) -> Result<usize> {
        match self.history.last() {
            Some(r) => Ok(r.best_head),
            None => self
                .config
                .heads
                .iter()
                .position(|h| h.role == HeadRole::Primary)
                .ok_or_else(|| Error::InvalidArgument("no primary head".into())),
        }
    }
}
