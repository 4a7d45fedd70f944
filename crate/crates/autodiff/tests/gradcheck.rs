use mfgan_autodiff::{finite_diff_check, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a tensor-valued op to a scalar by a fixed random weighting so
/// every output coordinate contributes differently.
fn weighted<F>(op: F, weights: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    move |t, x| {
        let y = op(t, x)?;
        let w = t.constant(weights.clone());
        let p = t.mul(y, w)?;
        t.sum(p)
    }
}

fn run<F>(name: &str, in_shape: &[usize], out_shape: &[usize], lo: f64, hi: f64, op: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Clone,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = random(&mut rng, in_shape, lo, hi);
        let w = random(&mut rng, out_shape, -1.0, 1.0);
        let err = finite_diff_check(weighted(op.clone(), w), &x, STEP).unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let other = random(&mut rng, &[3, 4], -2.0, 2.0);
    let o = other.clone();
    run("add", &[3, 4], &[3, 4], -2.0, 2.0, move |t, x| {
        let c = t.constant(o.clone());
        t.add(x, c)
    });
    let o = other.clone();
    run("sub_lhs", &[3, 4], &[3, 4], -2.0, 2.0, move |t, x| {
        let c = t.constant(o.clone());
        t.sub(x, c)
    });
    let o = other.clone();
    run("sub_rhs", &[3, 4], &[3, 4], -2.0, 2.0, move |t, x| {
        let c = t.constant(o.clone());
        t.sub(c, x)
    });
    let o = other.clone();
    run("mul", &[3, 4], &[3, 4], -2.0, 2.0, move |t, x| {
        let c = t.constant(o.clone());
        t.mul(c, x)
    });
    run("mul_self", &[3, 4], &[3, 4], -2.0, 2.0, |t, x| t.mul(x, x));
    let o = other;
    run("scalar_broadcast", &[1], &[3, 4], -2.0, 2.0, move |t, x| {
        let c = t.constant(o.clone());
        let p = t.mul(x, c)?;
        t.add(p, x)
    });
    run("scale", &[5], &[5], -2.0, 2.0, |t, x| t.scale(x, -1.75));
}

#[test]
fn matmul_all_transpose_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    let bt = random(&mut rng, &[2, 4], -1.0, 1.0);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let at = random(&mut rng, &[4, 3], -1.0, 1.0);
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let rhs = if tb { bt.clone() } else { b.clone() };
        let lhs_shape: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        run("matmul_lhs", lhs_shape, &[3, 2], -1.0, 1.0, move |t, x| {
            let c = t.constant(rhs.clone());
            t.matmul_t(x, c, ta, tb)
        });
        let lhs = if ta { at.clone() } else { a.clone() };
        let rhs_shape: &[usize] = if tb { &[2, 4] } else { &[4, 2] };
        run("matmul_rhs", rhs_shape, &[3, 2], -1.0, 1.0, move |t, x| {
            let c = t.constant(lhs.clone());
            t.matmul_t(c, x, ta, tb)
        });
    }
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let side = random(&mut rng, &[3, 2], -1.0, 1.0);
    run("concat", &[3, 1], &[3, 3], -1.0, 1.0, move |t, x| {
        let c = t.constant(side.clone());
        t.concat_last(&[c, x])
    });
    run("slice", &[3, 5], &[3, 2], -1.0, 1.0, |t, x| t.slice_last(x, 1, 3));
    run("pad", &[3, 2], &[3, 6], -1.0, 1.0, |t, x| t.pad_last(x, 3, 6));
    run("sum", &[2, 3], &[], -1.0, 1.0, |t, x| t.sum(x));
    run("mean", &[2, 3], &[], -1.0, 1.0, |t, x| t.mean(x));
    run("expand", &[], &[2, 3], -1.0, 1.0, |t, x| t.expand(x, vec![2, 3]));
    run("sum_last", &[4, 3], &[4, 1], -1.0, 1.0, |t, x| t.sum_last(x));
    run("repeat_last", &[4, 1], &[4, 3], -1.0, 1.0, |t, x| t.repeat_last(x, 3));
    run("reshape", &[2, 3], &[3, 2], -1.0, 1.0, |t, x| t.reshape(x, vec![3, 2]));
}

#[test]
fn nonlinear_ops() {
    run("tanh", &[2, 3], &[2, 3], -2.0, 2.0, |t, x| t.tanh(x));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = random(&mut rng, &[2, 3], -1.0, 1.0);
    let g2 = g.clone();
    run("tanh_grad_y", &[2, 3], &[2, 3], -1.0, 1.0, move |t, y| {
        let c = t.constant(g2.clone());
        t.record(mfgan_autodiff::Op::TanhGrad, &[y, c])
    });
    let y = random(&mut rng, &[2, 3], -1.0, 1.0);
    run("tanh_grad_g", &[2, 3], &[2, 3], -1.0, 1.0, move |t, g| {
        let c = t.constant(y.clone());
        t.record(mfgan_autodiff::Op::TanhGrad, &[c, g])
    });
    for c in [0.5, 2.0, 2.5, 5.0, -1.0] {
        run("pow", &[6], &[6], 0.5, 2.0, move |t, x| t.pow(x, c));
    }
    run("ln", &[6], &[6], 0.2, 3.0, |t, x| t.ln(x));
    run("exp", &[6], &[6], -2.0, 2.0, |t, x| t.exp(x));
    run("sin", &[6], &[6], -3.0, 3.0, |t, x| t.sin(x));
    run("cos", &[6], &[6], -3.0, 3.0, |t, x| t.cos(x));
    run("squared_norm", &[4, 3], &[4, 1], -2.0, 2.0, |t, x| t.squared_norm(x));
}

#[test]
fn gradient_of_gradient_matches_finite_differences() {
    // g(x) = (d/dx sin x)^2; dg/dx at 1 is -sin 2.
    let g = |t: &mut Tape, x: Var| -> Result<Var> {
        let s = t.sin(x)?;
        let ds = t.grad(s, &[x], true)?[0];
        t.mul(ds, ds)
    };
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(1.0));
    let gx = g(&mut tape, x).unwrap();
    let dgv = tape.grad(gx, &[x], false).unwrap()[0];
    let dg = tape.item(dgv).unwrap();

    let eval = |v: f64| {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(v));
        let out = g(&mut t, x).unwrap();
        t.item(out).unwrap()
    };
    let h = 1e-5;
    let numeric = (eval(1.0 + h) - eval(1.0 - h)) / (2.0 * h);
    assert!((dg - numeric).abs() < 1e-8, "{dg} vs {numeric}");
    assert!((dg + 2f64.sin()).abs() < 1e-12);
    assert!((dg - -0.909297).abs() < 1e-6);
}

#[test]
fn tanh_composition_passes_the_check_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = random(&mut rng, &[3, 3], -1.0, 1.0);
    for _ in 0..20 {
        let x = random(&mut rng, &[2, 3], -1.5, 1.5);
        let w = w.clone();
        let err = finite_diff_check(
            move |t, x| {
                let w = t.constant(w.clone());
                let h = t.matmul(x, w)?;
                let h = t.tanh(h)?;
                let h = t.tanh(h)?;
                let n = t.squared_norm(h)?;
                t.mean(n)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:e}");
    }
}

fn two_layer(t: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let h = t.matmul(x, w)?;
    let h = t.tanh(h)?;
    let s = t.squared_norm(h)?;
    t.sum(s)
}

#[test]
fn identical_inputs_give_bit_identical_tapes() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random(&mut rng, &[8, 3], -1.0, 1.0);
        let w = random(&mut rng, &[3, 5], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.variable(x);
        let out = two_layer(&mut tape, xv, &w).unwrap();
        let g = tape.grad(out, &[xv], true).unwrap()[0];
        let n = tape.squared_norm(g).unwrap();
        let s = tape.sum(n).unwrap();
        tape.grad(s, &[xv], false).unwrap();
        tape
    };
    let a = build();
    let b = build();
    assert!(a.bits_eq(&b));
    assert!(a.replay().unwrap().bits_eq(&a));
}

fn linear_combination(a: f64, b: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random(&mut rng, &[4, 3], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2], -1.0, 1.0);

    let mut tape = Tape::new();
    let x = tape.variable(x0);
    let f = two_layer(&mut tape, x, &w).unwrap();
    let g = tape.exp(x).unwrap();
    let g = tape.sum(g).unwrap();
    let af = tape.scale(f, a).unwrap();
    let bg = tape.scale(g, b).unwrap();
    let combo = tape.add(af, bg).unwrap();

    let grads = tape.grad(combo, &[x], false).unwrap();
    let gf = tape.grad(f, &[x], false).unwrap();
    let gg = tape.grad(g, &[x], false).unwrap();
    let (gc, gf, gg) = (tape.value(grads[0]), tape.value(gf[0]), tape.value(gg[0]));
    (0..gc.numel())
        .map(|i| (gc.data()[i], a * gf.data()[i] + b * gg.data()[i]))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Power-of-two coefficients scale every backward value exactly, so the
    // identity holds bit for bit.
    #[test]
    fn gradient_is_exactly_linear_for_dyadic_weights(
        ka in -4i32..4, kb in -4i32..4, sa in any::<bool>(), sb in any::<bool>(), seed in 0u64..1000,
    ) {
        let a = if sa { -1.0 } else { 1.0 } * 2f64.powi(ka);
        let b = if sb { -1.0 } else { 1.0 } * 2f64.powi(kb);
        for (combined, separate) in linear_combination(a, b, seed) {
            prop_assert_eq!(combined.to_bits(), separate.to_bits());
        }
    }

    #[test]
    fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        for (combined, separate) in linear_combination(a, b, seed) {
            prop_assert!((combined - separate).abs() <= 1e-12 * (1.0 + separate.abs()));
        }
    }
}
