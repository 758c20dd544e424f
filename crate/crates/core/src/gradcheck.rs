//! Central finite-difference checks of the reverse-mode gradients, covering
//! every differentiable primitive, the edge front-end and the complete
//! clustering objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::cluster::{
    bank_objective, vat_perturbation, ClusterBank, HeadSpec, NormRule, PerturbSpec, VatTarget,
};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::nn::{dropout_mask, mix_seed};
use crate::sobel::{augment_input, SobelKernels};
use crate::tensor::{Scalar, Tensor};

/// Outcome of one case.
#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub params: usize,
    pub rel_error: f64,
    pub passed: bool,
}

/// Outcome of the whole suite at one precision.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
    pub cases: Vec<CaseReport>,
}

/// Tolerance on the norm-wise relative error.
pub fn tolerance<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        1e-6
    } else {
        1e-3
    }
}

/// Finite-difference step. The stencil is always evaluated in double
/// precision; single-precision gradients are compared against it at the
/// same (exactly representable) point.
pub const STEP: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Reverse-mode gradient of `f` with respect to every element of every input.
pub fn analytic_gradient<T: Scalar>(
    inputs: &[Tensor<T>],
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::InvalidArgument(
            "gradient check needs a scalar loss".into(),
        ));
    }
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .flat_map(|&v| grads.wrt(v).to_f64_vec())
        .collect())
}

/// Central differences of `f` with step `h`.
pub fn numeric_gradient<T: Scalar>(
    inputs: &[Tensor<T>],
    h: f64,
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };
    let mut numeric = Vec::new();
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for e in 0..xs[i].len() {
            let x0 = xs[i].data()[e];
            xs[i].data_mut()[e] = T::lit(x0.as_f64() + h);
            let up = eval(&xs)?;
            xs[i].data_mut()[e] = T::lit(x0.as_f64() - h);
            let down = eval(&xs)?;
            xs[i].data_mut()[e] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(numeric)
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Values bounded away from zero so kinks stay outside the stencil.
fn off_kink<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let t = uniform::<f64>(rng, shape, 0.2, 1.0);
    let data = t
        .data()
        .iter()
        .map(|&v| T::lit(if rng.random_bool(0.5) { v } else { -v }))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Contract `y` against a fixed random tensor so every output element gets a
/// distinct weight.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform::<T>(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type CaseFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;
type Case<T> = (String, Vec<Tensor<T>>, CaseFn<T>);

/// `(name, inputs, loss)` for every primitive.
fn primitive_cases<T: Scalar>(rng: &mut ChaCha8Rng) -> Vec<Case<T>> {
    let mut cases: Vec<Case<T>> = Vec::new();
    let mut add = |name: &str, inputs: Vec<Tensor<T>>, f: CaseFn<T>| {
        cases.push((name.to_string(), inputs, f))
    };
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform::<T>(rng, s, -1.0, 1.0);

    add(
        "add",
        vec![u(rng, &[3, 4]), u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 1)
        }),
    );
    add(
        "sub",
        vec![u(rng, &[3, 4]), u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 2)
        }),
    );
    add(
        "mul",
        vec![u(rng, &[3, 4]), u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 3)
        }),
    );
    add(
        "scale+add_scalar",
        vec![u(rng, &[5])],
        Box::new(|t, v| {
            let y = t.scale(v[0], T::lit(-1.5));
            let y = t.add_scalar(y, T::lit(0.25));
            project(t, y, 4)
        }),
    );
    add(
        "add_channel",
        vec![u(rng, &[2, 3, 2, 2]), u(rng, &[3])],
        Box::new(|t, v| {
            let y = t.add_channel(v[0], v[1])?;
            project(t, y, 5)
        }),
    );
    add(
        "mul_channel",
        vec![u(rng, &[2, 3, 2, 2]), u(rng, &[3])],
        Box::new(|t, v| {
            let y = t.mul_channel(v[0], v[1])?;
            project(t, y, 6)
        }),
    );
    add(
        "matmul",
        vec![u(rng, &[3, 4]), u(rng, &[4, 5])],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 7)
        }),
    );
    add(
        "matmul_wide",
        vec![u(rng, &[5, 20]), u(rng, &[20, 18])],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 8)
        }),
    );
    add(
        "conv2d_same_s1",
        vec![u(rng, &[2, 2, 5, 5]), u(rng, &[3, 2, 3, 3])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
            project(t, y, 9)
        }),
    );
    add(
        "conv2d_same_s2",
        vec![u(rng, &[1, 2, 6, 5]), u(rng, &[2, 2, 4, 4])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, Padding::Same)?;
            project(t, y, 10)
        }),
    );
    add(
        "conv2d_valid",
        vec![u(rng, &[1, 1, 5, 4]), u(rng, &[2, 1, 2, 3])],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, Padding::Valid)?;
            project(t, y, 11)
        }),
    );
    add(
        "conv_transpose2d_s2",
        vec![u(rng, &[2, 2, 3, 3]), u(rng, &[2, 3, 4, 4])],
        Box::new(|t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 2, Padding::Same)?;
            project(t, y, 12)
        }),
    );
    add(
        "conv_transpose2d_s1",
        vec![u(rng, &[1, 2, 3, 4]), u(rng, &[2, 1, 3, 3])],
        Box::new(|t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 1, Padding::Same)?;
            project(t, y, 13)
        }),
    );
    add(
        "batch_norm",
        vec![u(rng, &[4, 3, 2, 2])],
        Box::new(|t, v| {
            let (y, _, _) = t.batch_norm(v[0], T::lit(1e-5))?;
            project(t, y, 14)
        }),
    );
    add(
        "batch_norm_dense",
        vec![u(rng, &[6, 4])],
        Box::new(|t, v| {
            let (y, _, _) = t.batch_norm(v[0], T::lit(1e-5))?;
            project(t, y, 15)
        }),
    );
    add(
        "leaky_relu",
        vec![off_kink(rng, &[4, 5])],
        Box::new(|t, v| {
            let y = t.leaky_relu(v[0], T::lit(0.2));
            project(t, y, 16)
        }),
    );
    add(
        "relu",
        vec![off_kink(rng, &[4, 5])],
        Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 17)
        }),
    );
    add(
        "tanh",
        vec![u(rng, &[4, 5])],
        Box::new(|t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 18)
        }),
    );
    add(
        "sigmoid",
        vec![u(rng, &[4, 5])],
        Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 19)
        }),
    );
    add(
        "softmax_rows",
        vec![u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 20)
        }),
    );
    add(
        "softmax_axis0",
        vec![u(rng, &[3, 2, 2])],
        Box::new(|t, v| {
            let y = t.softmax(v[0], 0)?;
            project(t, y, 21)
        }),
    );
    add(
        "log",
        vec![uniform(rng, &[3, 4], 0.5, 2.0)],
        Box::new(|t, v| {
            let y = t.log(v[0]);
            project(t, y, 22)
        }),
    );
    add(
        "log_clamped",
        vec![uniform(rng, &[3, 4], 0.5, 2.0)],
        Box::new(|t, v| {
            let y = t.log_clamped(v[0], T::lit(1e-12));
            project(t, y, 23)
        }),
    );
    add(
        "sum",
        vec![u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
    );
    add(
        "mean",
        vec![u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
    );
    add(
        "mean_rows",
        vec![u(rng, &[4, 3])],
        Box::new(|t, v| {
            let y = t.mean_rows(v[0])?;
            project(t, y, 24)
        }),
    );
    add(
        "sum_last_axis",
        vec![u(rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.sum_last_axis(v[0])?;
            project(t, y, 25)
        }),
    );
    add(
        "concat_axis0",
        vec![u(rng, &[2, 3]), u(rng, &[1, 3])],
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            project(t, y, 26)
        }),
    );
    add(
        "concat_axis1",
        vec![u(rng, &[2, 1, 2, 2]), u(rng, &[2, 2, 2, 2])],
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y, 27)
        }),
    );
    add(
        "reshape",
        vec![u(rng, &[2, 6])],
        Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let y = t.tanh(y);
            project(t, y, 28)
        }),
    );
    add(
        "slice_rows",
        vec![u(rng, &[5, 3])],
        Box::new(|t, v| {
            let y = t.slice_rows(v[0], 1, 3)?;
            project(t, y, 29)
        }),
    );
    add(
        "mask_mul",
        vec![u(rng, &[4, 5])],
        Box::new(|t, v| {
            let y = t.mask_mul(v[0], dropout_mask(20, 0.3, 7))?;
            project(t, y, 30)
        }),
    );
    cases
}

/// Edge front-end on gray and colour input.
fn sobel_cases<T: Scalar>(rng: &mut ChaCha8Rng) -> Vec<Case<T>> {
    let rgb = uniform::<T>(rng, &[2, 3, 5, 6], -1.0, 1.0);
    let gray = uniform::<T>(rng, &[1, 1, 6, 6], -1.0, 1.0);
    let f = |seed: u64| -> CaseFn<T> {
        Box::new(move |t, v| {
            let y = augment_input(t, &SobelKernels::default(), v[0])?;
            project(t, y, seed)
        })
    };
    vec![
        ("sobel_rgb".into(), vec![rgb], f(31)),
        ("sobel_gray".into(), vec![gray], f(32)),
    ]
}

/// The complete bank objective with respect to every bank parameter, with
/// perturbations and targets frozen at the evaluation point. One head has a
/// tolerance large enough to sit in the clamped branch.
fn objective_case<T: Scalar>(seed: u64) -> Result<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [
        HeadSpec::primary(3, 0.0),
        HeadSpec::primary(3, 10.0),
        HeadSpec::overcluster(6, 1e-2 * 6f64.ln()),
    ];
    let bank = ClusterBank::<T>::new(4, &[6], &heads, 0.5, &mut rng)?;
    let m = uniform::<T>(&mut rng, &[5, 4], -1.0, 1.0);
    let mask = dropout_mask::<T>(m.len(), 0.1, mix_seed(seed, 1));
    let prime = Tensor::new(
        m.shape().to_vec(),
        m.data().iter().zip(&mask).map(|(&a, &b)| a * b).collect(),
    )?;
    let spec = PerturbSpec {
        alpha_r: 0.3,
        alpha_adv: 0.15,
        replicas: 2,
        norm: NormRule::L2,
    };
    let targets = bank.predict_all(&m)?;
    let adv = vec![vat_perturbation(
        &bank,
        &m,
        Some(&targets),
        VatTarget::Bank,
        &spec,
        &mut rng,
    )?];
    let inputs = bank.params.values().to_vec();
    let f: CaseFn<T> = Box::new(move |t, v| {
        let (loss, _) = bank_objective(t, v, &bank, &m, Some(&prime), &adv, &targets, 0.2)?;
        Ok(loss)
    });
    Ok(("complete_objective".into(), inputs, f))
}

fn all_cases<T: Scalar>(seed: u64) -> Result<Vec<Case<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases::<T>(&mut rng);
    cases.extend(sobel_cases::<T>(&mut rng));
    cases.push(objective_case::<T>(mix_seed(seed, 99))?);
    Ok(cases)
}

/// Run every case at precision `T`.
pub fn run_suite<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let start = std::time::Instant::now();
    let cases = all_cases::<T>(seed)?;
    let reference = all_cases::<f64>(seed)?;
    let tol = tolerance::<T>();
    let mut reports = Vec::with_capacity(cases.len());
    for ((name, inputs, f), (_, _, g)) in cases.iter().zip(&reference) {
        let analytic = analytic_gradient(inputs, f.as_ref())?;
        let at: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
        let numeric = numeric_gradient(&at, STEP, g.as_ref())?;
        let rel = relative_error(&analytic, &numeric);
        reports.push(CaseReport {
            name: name.clone(),
            params: analytic.len(),
            rel_error: rel,
            passed: rel <= tol,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        precision: T::NAME,
        tolerance: tol,
        step: STEP,
        max_rel_error,
        passed: reports.iter().all(|r| r.passed),
        seconds: start.elapsed().as_secs_f64(),
        cases: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.0, 1e-3]) - 1e-3).abs() < 1e-9);
        assert_eq!(relative_error(&[1.0], &[-1.0]), 2.0);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // at the kink the stencil sees slope 1/2
        let x = [Tensor::<f64>::new(vec![1], vec![0.0]).unwrap()];
        let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.relu(v[0]));
        let a = analytic_gradient(&x, &f).unwrap();
        let n = numeric_gradient(&x, STEP, &f).unwrap();
        assert!(relative_error(&a, &n) > 0.1);
    }

    #[test]
    fn double_precision_suite_passes() {
        let r = run_suite::<f64>(0).unwrap();
        for c in &r.cases {
            assert!(c.passed, "{} {:e}", c.name, c.rel_error);
        }
    }

    #[test]
    fn single_precision_suite_passes() {
        let r = run_suite::<f32>(0).unwrap();
        for c in &r.cases {
            assert!(c.passed, "{} {:e}", c.name, c.rel_error);
        }
    }
}
