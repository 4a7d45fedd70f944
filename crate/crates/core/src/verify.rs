//! Self-checks runnable from the command line: derivative checks against
//! finite differences, the closed-form Hamiltonian against a brute-force
//! Legendre transform, Adam against a scalar reference, and metric axioms of
//! the Gaussian W2 distance.

use std::time::Instant;

use mfgan_autodiff::{finite_diff_check, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

use crate::data::Rng64;
use crate::error::{Error, Result};
use crate::metrics::gaussian_w2;
use crate::networks::{Mlp, MlpSpec, ParamSet};
use crate::objective::{hamiltonian, legendre_oracle, mfg_gan_loss, HamiltonianSpec, LossBatch};
use crate::trainer::{adam_step, AdamParams, AdamState};

pub const SUITES: [&str; 4] = ["gradcheck", "legendre", "adam", "w2"];

pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-5;
pub const SECOND_ORDER_TOL: f64 = 1e-4;
pub const LEGENDRE_TOL: f64 = 1e-2;
pub const ADAM_TOL: f64 = 1e-12;
pub const W2_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Empty means all suites.
    pub suites: Vec<String>,
    /// Added to `q` on the Hamiltonian side of the Legendre suite only.
    /// Non-zero values are a negative control: the suite must then fail.
    pub exponent_perturbation: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
    /// Largest observed error, relative to the suite's tolerance units.
    pub worst: String,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run(opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    for s in &opts.suites {
        if !SUITES.contains(&s.as_str()) {
            return Err(Error::Config(format!(
                "unknown suite `{s}`; valid suites: {}",
                SUITES.join(", ")
            )));
        }
    }
    let wanted = |s: &str| opts.suites.is_empty() || opts.suites.iter().any(|x| x == s);
    let mut out = Vec::new();
    if wanted("gradcheck") {
        out.push(gradcheck_suite(100)?);
    }
    if wanted("legendre") {
        out.push(legendre_suite(50, opts.exponent_perturbation)?);
    }
    if wanted("adam") {
        out.push(adam_suite(1000)?);
    }
    if wanted("w2") {
        out.push(w2_suite(100)?);
    }
    Ok(out)
}

fn timed(
    name: &'static str,
    f: impl FnOnce(&mut Vec<String>) -> Result<(usize, String)>,
) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let (cases, worst) = f(&mut failures)?;
    Ok(SuiteResult {
        name,
        cases,
        failures,
        worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_tensor(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> mfgan_autodiff::Result<Var>>;

struct OpCase {
    name: &'static str,
    input: Vec<usize>,
    output: Vec<usize>,
    range: (f64, f64),
    f: OpFn,
}

fn with_const(
    c: Tensor,
    f: impl Fn(&mut Tape, Var, Var) -> mfgan_autodiff::Result<Var> + 'static,
) -> OpFn {
    Box::new(move |t, x| {
        let k = t.constant(c.clone());
        f(t, x, k)
    })
}

fn op_cases(rng: &mut Rng64) -> Vec<OpCase> {
    let m34 = random_tensor(rng, &[3, 4], -2.0, 2.0);
    let m45 = random_tensor(rng, &[4, 5], -2.0, 2.0);
    let m23 = random_tensor(rng, &[2, 3], -2.0, 2.0);
    let case = |name, input: &[usize], output: &[usize], range, f| OpCase {
        name,
        input: input.to_vec(),
        output: output.to_vec(),
        range,
        f,
    };
    vec![
        case("add", &[3, 4], &[3, 4], (-2.0, 2.0), with_const(m34.clone(), |t, x, k| t.add(x, k))),
        case("subtract", &[3, 4], &[3, 4], (-2.0, 2.0), with_const(m34.clone(), |t, x, k| t.sub(k, x))),
        case("multiply", &[3, 4], &[3, 4], (-2.0, 2.0), with_const(m34.clone(), |t, x, k| t.mul(x, k))),
        case("square", &[3, 4], &[3, 4], (-2.0, 2.0), Box::new(|t, x| t.mul(x, x))),
        case("scale", &[3, 4], &[3, 4], (-2.0, 2.0), Box::new(|t, x| t.scale(x, -1.75))),
        case("matmul_lhs", &[3, 4], &[3, 5], (-2.0, 2.0), with_const(m45.clone(), |t, x, k| t.matmul(x, k))),
        case("matmul_rhs", &[4, 5], &[2, 5], (-2.0, 2.0), with_const(random_tensor(rng, &[2, 4], -2.0, 2.0), |t, x, k| t.matmul(k, x))),
        case("matmul_tt", &[5, 4], &[3, 5], (-2.0, 2.0), with_const(m34.clone(), |t, x, k| {
            let kt = t.matmul_t(k, x, false, true)?;
            Ok(kt)
        })),
        case("concat", &[2, 3], &[2, 6], (-2.0, 2.0), with_const(m23.clone(), |t, x, k| t.concat_last(&[k, x]))),
        case("slice", &[3, 4], &[3, 2], (-2.0, 2.0), Box::new(|t, x| t.slice_last(x, 1, 3))),
        case("sum", &[3, 4], &[1], (-2.0, 2.0), Box::new(|t, x| {
            let s = t.sum(x)?;
            t.mul(s, s)
        })),
        case("mean", &[3, 4], &[1], (-2.0, 2.0), Box::new(|t, x| {
            let s = t.mean(x)?;
            t.mul(s, s)
        })),
        case("tanh", &[3, 4], &[3, 4], (-3.0, 3.0), Box::new(|t, x| t.tanh(x))),
        case("power", &[3, 4], &[3, 4], (0.2, 2.0), Box::new(|t, x| t.pow(x, 2.5))),
        case("ln", &[3, 4], &[3, 4], (0.2, 3.0), Box::new(|t, x| t.ln(x))),
        case("exp", &[3, 4], &[3, 4], (-2.0, 2.0), Box::new(|t, x| t.exp(x))),
        case("squared_norm", &[3, 4], &[3, 1], (-2.0, 2.0), Box::new(|t, x| t.squared_norm(x))),
    ]
}

/// Checks every op at `points` random inputs, then the loss itself on a tiny
/// network: parameter gradients of both players (which pass through the
/// potential's input gradient) and of `|grad_x phi|^2` alone.
pub fn gradcheck_suite(points: usize) -> Result<SuiteResult> {
    timed("gradcheck", |failures| {
        let mut rng = Rng64::seed_from_u64(0x6AD);
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for op in op_cases(&mut rng) {
            let mut op_worst: f64 = 0.0;
            for _ in 0..points {
                let x = random_tensor(&mut rng, &op.input, op.range.0, op.range.1);
                let w = random_tensor(&mut rng, &op.output, -1.0, 1.0);
                let f = |t: &mut Tape, x: Var| {
                    let y = (op.f)(t, x)?;
                    let wv = t.constant(w.clone());
                    let p = t.mul(y, wv)?;
                    t.sum(p)
                };
                op_worst = op_worst.max(finite_diff_check(f, &x, FD_STEP)?);
                cases += 1;
            }
            if op_worst >= FIRST_ORDER_TOL {
                failures.push(format!("{}: relative error {op_worst:e}", op.name));
            }
            worst = worst.max(op_worst);
        }
        for (name, err) in loss_gradchecks(&mut rng)? {
            cases += 1;
            if err >= SECOND_ORDER_TOL {
                failures.push(format!("{name}: relative error {err:e}"));
            }
            worst = worst.max(err);
        }
        Ok((cases, format!("{worst:.2e}")))
    })
}

/// Parameters carved out of one flat variable so a scalar function of all of
/// them can go through [`finite_diff_check`].
fn unflatten_on_tape(tape: &mut Tape, flat: Var, params: &ParamSet) -> mfgan_autodiff::Result<Vec<Var>> {
    let mut vars = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        let n = t.numel();
        let s = tape.slice_last(flat, offset, offset + n)?;
        vars.push(tape.reshape(s, t.shape().to_vec())?);
        offset += n;
    }
    Ok(vars)
}

fn flat_tensor(p: &ParamSet) -> Tensor {
    let flat = p.flatten();
    Tensor::matrix(1, flat.len(), flat).expect("row vector")
}

fn to_autodiff(e: Error) -> mfgan_autodiff::Error {
    match e {
        Error::Autodiff(inner) => inner,
        other => mfgan_autodiff::Error::InvalidArgument(other.to_string()),
    }
}

/// Relative errors of the loss gradients with respect to both parameter sets
/// and of `d/domega |grad_x phi|^2`, for a 2-unit network with `d = 2`.
pub fn loss_gradchecks(rng: &mut Rng64) -> Result<Vec<(&'static str, f64)>> {
    let gen_spec = MlpSpec::generator(2, vec![2]);
    let disc_spec = MlpSpec::discriminator(2, vec![2]);
    let gen = ParamSet::init(&gen_spec, rng.random())?;
    let disc = ParamSet::init(&disc_spec, rng.random())?;
    let batch = LossBatch {
        z_interior: random_tensor(rng, &[4, 2], -1.5, 1.5),
        t_interior: random_tensor(rng, &[4, 1], 0.0, 1.0),
        x_data: random_tensor(rng, &[4, 2], -1.5, 1.5),
        z_initial: random_tensor(rng, &[4, 2], -1.5, 1.5),
    };
    let mut out = Vec::new();
    for q in [2.0, 3.0] {
        let hs = HamiltonianSpec::new(q)?;
        let wrt_disc = |t: &mut Tape, flat: Var| {
            let g = Mlp::on_tape(&gen_spec, &gen, t, false);
            let d = Mlp {
                spec: &disc_spec,
                params: unflatten_on_tape(t, flat, &disc)?,
            };
            mfg_gan_loss(t, &g, &d, &batch, &hs).map(|r| r.0).map_err(to_autodiff)
        };
        let e = finite_diff_check(wrt_disc, &flat_tensor(&disc), FD_STEP)?;
        out.push((if q == 2.0 { "loss/potential q=2" } else { "loss/potential q=3" }, e));
        let wrt_gen = |t: &mut Tape, flat: Var| {
            let g = Mlp {
                spec: &gen_spec,
                params: unflatten_on_tape(t, flat, &gen)?,
            };
            let d = Mlp::on_tape(&disc_spec, &disc, t, false);
            mfg_gan_loss(t, &g, &d, &batch, &hs).map(|r| r.0).map_err(to_autodiff)
        };
        let e = finite_diff_check(wrt_gen, &flat_tensor(&gen), FD_STEP)?;
        out.push((if q == 2.0 { "loss/generator q=2" } else { "loss/generator q=3" }, e));
    }

    // d/domega |grad_x phi(x, t)|^2 for a random 2-hidden-layer network.
    let spec = MlpSpec::discriminator(2, vec![4, 3]);
    let phi = ParamSet::init(&spec, rng.random())?;
    let x = random_tensor(rng, &[3, 2], -1.5, 1.5);
    let tt = random_tensor(rng, &[3, 1], 0.0, 1.0);
    let grad_norm = |t: &mut Tape, flat: Var| {
        let net = Mlp {
            spec: &spec,
            params: unflatten_on_tape(t, flat, &phi)?,
        };
        let xv = t.constant(x.clone());
        let tv = t.constant(tt.clone());
        let out = net.forward(t, xv, Some(tv)).map_err(to_autodiff)?;
        let s = t.sum(out)?;
        let g = t.grad(s, &[xv], true)?[0];
        let n = t.squared_norm(g)?;
        t.sum(n)
    };
    out.push(("grad-norm second order", finite_diff_check(grad_norm, &flat_tensor(&phi), FD_STEP)?));
    Ok(out)
}

/// Compares `hamiltonian()` with a grid Legendre transform for
/// `q` in {1.5, 2, 3, 10} at `per_q` random covectors in the plane.
pub fn legendre_suite(per_q: usize, exponent_perturbation: f64) -> Result<SuiteResult> {
    timed("legendre", |failures| {
        let mut rng = Rng64::seed_from_u64(0x1E6);
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for q in [1.5, 2.0, 3.0, 10.0] {
            let truth = HamiltonianSpec::new(q)?;
            let tested = HamiltonianSpec::new(q + exponent_perturbation)?;
            for _ in 0..per_q {
                let p: [f64; 2] = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
                // The maximizer has norm |p|^(q-1); give it room on both sides.
                let half_width = (2.0 * norm.powf(q - 1.0)).max(0.5);
                let oracle = legendre_oracle(&p, &truth, half_width, half_width / 400.0)?;
                let mut tape = Tape::new();
                let g = tape.constant(Tensor::matrix(1, 2, p.to_vec())?);
                let h = hamiltonian(&mut tape, g, &tested)?;
                let value = tape.item(h)?;
                let err = (value - oracle).abs() / oracle.max(1.0);
                cases += 1;
                worst = worst.max(err);
                if err >= LEGENDRE_TOL {
                    failures.push(format!(
                        "q={q}, p=({:.4}, {:.4}): H={value:.6} oracle={oracle:.6} (rel {err:.2e})",
                        p[0], p[1]
                    ));
                }
            }
        }
        Ok((cases, format!("{worst:.2e}")))
    })
}

/// Scalar Adam written independently of [`adam_step`]: bias corrections by
/// running products instead of powers.
pub fn adam_reference(theta: f64, grads: &[f64], hp: AdamParams) -> f64 {
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta);
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for &g in grads {
        m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        b1t *= hp.beta1;
        b2t *= hp.beta2;
        let m_hat = m / (1.0 - b1t);
        let v_hat = v / (1.0 - b2t);
        theta -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    theta
}

pub fn adam_suite(trials: usize) -> Result<SuiteResult> {
    timed("adam", |failures| {
        let mut rng = Rng64::seed_from_u64(0xADA);
        let spec = MlpSpec::discriminator(1, vec![1]);
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let hp = AdamParams {
                lr: 10f64.powf(rng.random_range(-5.0..-1.0)),
                beta1: rng.random_range(0.0..0.99),
                beta2: rng.random_range(0.9..0.9999),
                eps: 10f64.powf(rng.random_range(-10.0..-6.0)),
            };
            let steps = rng.random_range(1..=5);
            let mut params = ParamSet::init(&spec, rng.random())?;
            let start = params.flatten();
            let mut state = AdamState::new(&params);
            let mut history: Vec<Vec<f64>> = vec![Vec::new(); start.len()];
            for _ in 0..steps {
                let grads: Vec<Tensor> = params
                    .tensors()
                    .iter()
                    .map(|t| random_tensor(&mut rng, t.shape(), -3.0, 3.0))
                    .collect();
                let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
                for (h, g) in history.iter_mut().zip(flat) {
                    h.push(g);
                }
                adam_step(&mut params, &grads, &mut state, hp)?;
            }
            for ((got, &theta0), gs) in params.flatten().iter().zip(&start).zip(&history) {
                let want = adam_reference(theta0, gs, hp);
                let err = (got - want).abs();
                worst = worst.max(err);
                if err > ADAM_TOL {
                    failures.push(format!("trial {trial}: got {got}, reference {want}"));
                }
            }
        }
        Ok((trials, format!("{worst:.2e}")))
    })
}

fn random_gaussian(rng: &mut Rng64, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.05;
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// Metric axioms of [`gaussian_w2`] on random Gaussian triples in 2–5 dims.
pub fn w2_suite(triples: usize) -> Result<SuiteResult> {
    timed("w2", |failures| {
        let mut rng = Rng64::seed_from_u64(0xB2E5);
        let mut worst: f64 = 0.0;
        for i in 0..triples {
            let d = 2 + i % 4;
            let (ma, sa) = random_gaussian(&mut rng, d);
            let (mb, sb) = random_gaussian(&mut rng, d);
            let (mc, sc) = random_gaussian(&mut rng, d);
            let ab = gaussian_w2(&ma, &sa, &mb, &sb)?;
            let ba = gaussian_w2(&mb, &sb, &ma, &sa)?;
            let bc = gaussian_w2(&mb, &sb, &mc, &sc)?;
            let ac = gaussian_w2(&ma, &sa, &mc, &sc)?;
            let aa = gaussian_w2(&ma, &sa, &ma, &sa)?;
            let shifted = gaussian_w2(&ma, &sa, &mb, &sa)?;
            let checks = [
                ("symmetry", (ab - ba).abs()),
                ("nonnegativity", (-ab.min(bc).min(ac)).max(0.0)),
                ("identity", aa),
                ("triangle", (ac - ab - bc).max(0.0)),
            ];
            for (name, violation) in checks {
                worst = worst.max(violation);
                if violation > W2_SLACK {
                    failures.push(format!("triple {i} (d={d}): {name} violated by {violation:e}"));
                }
            }
            if shifted != (&ma - &mb).norm() {
                failures.push(format!(
                    "triple {i}: equal covariances gave {shifted}, expected {}",
                    (&ma - &mb).norm()
                ));
            }
        }
        Ok((triples, format!("{worst:.2e}")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_exponent_fails_legendre() {
        let r = legendre_suite(5, 0.5).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn reference_adam_first_step() {
        let hp = AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let theta = adam_reference(0.0, &[1.0], hp);
        assert!((theta + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn unknown_suite_rejected() {
        let opts = VerifyOptions {
            suites: vec!["nope".into()],
            ..Default::default()
        };
        assert!(run(&opts).is_err());
    }
}
