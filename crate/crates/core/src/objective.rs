//! The saddle objective.
//!
//! With Lagrangian `L(v) = |v|_s^p / p` the Hamiltonian is its convex
//! conjugate `H(g) = (1/q) |g|_{s'}^q`, where `1/p + 1/q = 1` and
//! `1/s + 1/s' = 1`. The training loss, maximized over the potential
//! `phi` and minimized over the generator `rho`, is
//!
//! ```text
//! - E_{z, t~U[0,1]} [ d_t phi(rho(z,t), t) + H(grad_x phi(rho(z,t), t)) ]
//!   + E_{x~data} [ phi(x, 1) ] - E_z [ phi(rho(z,0), 0) ]
//! ```
//!
//! `d_t phi` and `grad_x phi` are taken on the tape with `create_graph`,
//! so the loss stays differentiable in both parameter sets.

use mfgan_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::networks::Mlp;

/// `r / (r - 1)`, the Hölder conjugate of `r > 1`.
pub fn conjugate_exponent(r: f64) -> Result<f64> {
    if !(r > 1.0) || !r.is_finite() {
        return Err(Error::Domain(format!(
            "conjugate exponent needs a finite r > 1, got {r}"
        )));
    }
    Ok(r / (r - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianSpec {
    /// Exponent of `H`; the configuration input.
    pub q: f64,
    /// Lagrangian exponent, always `conjugate_exponent(q)`.
    pub p: f64,
    /// Norm index of the Lagrangian.
    pub s: f64,
    /// Dual norm index used by `H`.
    pub s_prime: f64,
    /// Added under the power to keep gradients finite at `grad phi = 0`.
    pub epsilon: f64,
}

impl HamiltonianSpec {
    pub const DEFAULT_EPSILON: f64 = 1e-12;

    /// Euclidean norms (`s = s' = 2`).
    pub fn new(q: f64) -> Result<Self> {
        Self::with_norm(q, 2.0)
    }

    pub fn with_norm(q: f64, s: f64) -> Result<Self> {
        let p = conjugate_exponent(q)?;
        if !(s >= 1.0) {
            return Err(Error::Domain(format!("norm index must be >= 1, got {s}")));
        }
        let s_prime = if s == 1.0 {
            f64::INFINITY
        } else {
            conjugate_exponent(s)?
        };
        Ok(Self {
            q,
            p,
            s,
            s_prime,
            epsilon: Self::DEFAULT_EPSILON,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// `|v|_s^p / p`.
    pub fn lagrangian(&self, v: &[f64]) -> f64 {
        lp_norm(v, self.s).powf(self.p) / self.p
    }

    /// `(1/q) |g|_{s'}^q` without the stabilizer.
    pub fn closed_form(&self, g: &[f64]) -> f64 {
        lp_norm(g, self.s_prime).powf(self.q) / self.q
    }

    /// The value [`hamiltonian`] records for one row, on plain numbers.
    pub fn stabilized(&self, g: &[f64]) -> f64 {
        let sq: f64 = g.iter().map(|v| v * v).sum();
        if self.q == 2.0 {
            0.5 * sq
        } else {
            (sq + self.epsilon).powf(self.q / 2.0) * (1.0 / self.q)
        }
    }
}

fn lp_norm(v: &[f64], s: f64) -> f64 {
    if s.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else if s == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        v.iter().map(|x| x.abs().powf(s)).sum::<f64>().powf(1.0 / s)
    }
}

/// Per-row `H(grad_phi)` for an `n x d` batch of gradients, as an `n x 1` node.
///
/// Computed as `(1/q) (|g|^2 + eps)^{q/2}`. At `q = 2` the power is the
/// identity and the exact `|g|^2 / 2` is used.
pub fn hamiltonian(tape: &mut Tape, grad_phi: Var, spec: &HamiltonianSpec) -> Result<Var> {
    if (spec.s_prime - 2.0).abs() > 1e-12 {
        return Err(Error::Unsupported(format!(
            "only the Euclidean dual norm is implemented (s' = {})",
            spec.s_prime
        )));
    }
    let sq = tape.squared_norm(grad_phi)?;
    if spec.q == 2.0 {
        return Ok(tape.scale(sq, 0.5)?);
    }
    let eps = tape.scalar(spec.epsilon);
    let shifted = tape.add(sq, eps)?;
    let powered = tape.pow(shifted, spec.q / 2.0)?;
    Ok(tape.scale(powered, 1.0 / spec.q)?)
}

/// Brute-force `sup_v <v, p> - L(v)` over a cubic grid in up to three
/// dimensions.
///
/// Fails with [`Error::WidenGrid`] when the best grid point lies on the
/// boundary, since the true maximizer is then probably outside.
pub fn legendre_oracle(
    p_vec: &[f64],
    spec: &HamiltonianSpec,
    grid_half_width: f64,
    grid_step: f64,
) -> Result<f64> {
    let d = p_vec.len();
    if d == 0 || d > 3 {
        return Err(Error::Precondition(format!(
            "grid oracle supports 1 to 3 dimensions, got {d}"
        )));
    }
    if !(grid_half_width > 0.0 && grid_step > 0.0) {
        return Err(Error::Precondition("grid width and step must be positive".into()));
    }
    let k = (2.0 * grid_half_width / grid_step).round() as usize + 1;
    if k < 3 {
        return Err(Error::Precondition("grid needs at least three points per axis".into()));
    }
    let total = k.checked_pow(d as u32).ok_or_else(|| {
        Error::Precondition("grid too large".into())
    })?;
    let coord = |i: usize| -grid_half_width + i as f64 * grid_step;

    let mut best = f64::NEG_INFINITY;
    let mut best_idx = [0usize; 3];
    let mut idx = [0usize; 3];
    let mut v = [0.0f64; 3];
    for flat in 0..total {
        let mut rem = flat;
        for axis in (0..d).rev() {
            idx[axis] = rem % k;
            rem /= k;
            v[axis] = coord(idx[axis]);
        }
        let inner: f64 = (0..d).map(|a| v[a] * p_vec[a]).sum();
        let value = inner - spec.lagrangian(&v[..d]);
        if value > best {
            best = value;
            best_idx = idx;
        }
    }
    if best_idx[..d].iter().any(|&i| i == 0 || i == k - 1) {
        return Err(Error::WidenGrid {
            half_width: grid_half_width,
        });
    }
    Ok(best)
}

/// The three expectations of the loss and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// `-E[d_t phi + H(grad phi)]` along generated paths.
    pub interior: f64,
    /// `E_data[phi(x, 1)]`.
    pub terminal: f64,
    /// `E_z[phi(rho(z, 0), 0)]`.
    pub initial: f64,
    /// `interior + terminal - initial`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.interior.is_finite()
            && self.terminal.is_finite()
            && self.initial.is_finite()
            && self.total.is_finite()
    }

    pub fn identity_holds(&self) -> bool {
        self.total == self.interior + self.terminal - self.initial
    }
}

/// One draw of everything the loss consumes.
#[derive(Debug, Clone)]
pub struct LossBatch {
    /// Noise for the interior term, `n x d`.
    pub z_interior: Tensor,
    /// Times for the interior term, `n x 1`, in `[0, 1]`.
    pub t_interior: Tensor,
    /// Data samples, `m x d`.
    pub x_data: Tensor,
    /// Noise for the initial term, `m x d`; drawn independently of `z_interior`.
    pub z_initial: Tensor,
}

impl LossBatch {
    pub fn dim(&self) -> usize {
        self.z_interior.last_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let n = rows(&self.z_interior, d, "interior noise")?;
        let nt = rows(&self.t_interior, 1, "interior times")?;
        if nt != n {
            return Err(Error::Dimension {
                context: "interior times",
                expected: n,
                found: nt,
            });
        }
        rows(&self.x_data, d, "data batch")?;
        rows(&self.z_initial, d, "initial noise")?;
        check_times(&self.t_interior)
    }
}

fn rows(t: &Tensor, width: usize, what: &'static str) -> Result<usize> {
    if t.rank() != 2 {
        return Err(Error::Precondition(format!("{what} must be a matrix")));
    }
    if t.shape()[1] != width {
        return Err(Error::Dimension {
            context: what,
            expected: width,
            found: t.shape()[1],
        });
    }
    if t.shape()[0] == 0 {
        return Err(Error::Precondition(format!("{what} is empty")));
    }
    Ok(t.shape()[0])
}

fn check_times(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::Precondition(format!("time {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Generator outputs consumed by the loss.
#[derive(Debug, Clone, Copy)]
pub struct Paths {
    /// `rho(z_i, t_i)`, `n x d`.
    pub interior: Var,
    /// `rho(z_j, 0)`, `m x d`.
    pub initial: Var,
}

/// Runs the generator on the batch noise, recording on `tape`.
pub fn generate_paths(tape: &mut Tape, gen: &Mlp<'_>, batch: &LossBatch) -> Result<Paths> {
    let z = tape.constant(batch.z_interior.clone());
    let t = tape.constant(batch.t_interior.clone());
    let interior = gen.forward(tape, z, Some(t))?;
    let z0 = tape.constant(batch.z_initial.clone());
    let t0 = tape.constant(Tensor::zeros(vec![batch.z_initial.shape()[0], 1]));
    let initial = gen.forward(tape, z0, Some(t0))?;
    Ok(Paths { interior, initial })
}

/// Inputs handed to a Hamiltonian callback: positions, potential values and
/// spatial gradients of the potential, all row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianArgs {
    pub x: Var,
    pub phi: Var,
    pub grad_phi: Var,
}

pub type HamiltonianFn<'a> = dyn Fn(&mut Tape, &HamiltonianArgs) -> Result<Var> + 'a;

/// Potential-side assembly of the loss given generated positions.
///
/// `paths` may be live generator outputs or constants; the trainer passes
/// constants during the potential's ascent steps since the generator is
/// frozen there.
pub fn loss_on_paths(
    tape: &mut Tape,
    disc: &Mlp<'_>,
    paths: &Paths,
    t_interior: &Tensor,
    x_data: &Tensor,
    h: &HamiltonianFn<'_>,
) -> Result<(Var, LossBreakdown)> {
    check_times(t_interior)?;
    let n = tape.shape(paths.interior)[0];

    // Its own leaf, so d/dt does not flow through the generator's time input.
    let t = tape.constant(t_interior.clone());
    let phi = disc.forward(tape, paths.interior, Some(t))?;
    // Rows are independent, so the gradient of the batch sum is the
    // per-sample gradient in every row.
    let phi_sum = tape.sum(phi)?;
    let grads = tape.grad(phi_sum, &[paths.interior, t], true)?;
    let (grad_x, grad_t) = (grads[0], grads[1]);

    let args = HamiltonianArgs {
        x: paths.interior,
        phi,
        grad_phi: grad_x,
    };
    let hv = h(tape, &args)?;
    if tape.shape(hv) != [n, 1] {
        return Err(Error::Precondition(format!(
            "Hamiltonian must return one value per row ({n}x1), got {:?}",
            tape.shape(hv)
        )));
    }
    let integrand = tape.add(grad_t, hv)?;
    let avg = tape.mean(integrand)?;
    let interior = tape.neg(avg)?;

    let m = x_data.shape()[0];
    let x = tape.constant(x_data.clone());
    let ones = tape.constant(Tensor::ones(vec![m, 1]));
    let phi_data = disc.forward(tape, x, Some(ones))?;
    let terminal = tape.mean(phi_data)?;

    let m0 = tape.shape(paths.initial)[0];
    let zeros = tape.constant(Tensor::zeros(vec![m0, 1]));
    let phi_start = disc.forward(tape, paths.initial, Some(zeros))?;
    let initial = tape.mean(phi_start)?;

    let partial = tape.add(interior, terminal)?;
    let total = tape.sub(partial, initial)?;

    let breakdown = LossBreakdown {
        interior: tape.item(interior)?,
        terminal: tape.item(terminal)?,
        initial: tape.item(initial)?,
        total: tape.item(total)?,
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss(breakdown));
    }
    Ok((total, breakdown))
}

/// The loss with an arbitrary Hamiltonian `H(x, phi, grad phi)`.
pub fn general_hamiltonian_loss(
    tape: &mut Tape,
    gen: &Mlp<'_>,
    disc: &Mlp<'_>,
    batch: &LossBatch,
    h: &HamiltonianFn<'_>,
) -> Result<(Var, LossBreakdown)> {
    batch.validate()?;
    check_dims(gen, disc, batch.dim())?;
    let paths = generate_paths(tape, gen, batch)?;
    loss_on_paths(tape, disc, &paths, &batch.t_interior, &batch.x_data, h)
}

/// The loss with `H = (1/q)|grad phi|^q`.
pub fn mfg_gan_loss(
    tape: &mut Tape,
    gen: &Mlp<'_>,
    disc: &Mlp<'_>,
    batch: &LossBatch,
    spec: &HamiltonianSpec,
) -> Result<(Var, LossBreakdown)> {
    general_hamiltonian_loss(tape, gen, disc, batch, &|t, a| hamiltonian(t, a.grad_phi, spec))
}

/// The kinetic-energy form with `H = |grad phi|^2 / 2`.
pub fn ot_gan_loss(
    tape: &mut Tape,
    gen: &Mlp<'_>,
    disc: &Mlp<'_>,
    batch: &LossBatch,
) -> Result<(Var, LossBreakdown)> {
    general_hamiltonian_loss(tape, gen, disc, batch, &half_squared_norm)
}

/// `|g|^2 / 2` per row.
pub fn half_squared_norm(tape: &mut Tape, args: &HamiltonianArgs) -> Result<Var> {
    let sq = tape.squared_norm(args.grad_phi)?;
    Ok(tape.scale(sq, 0.5)?)
}

fn check_dims(gen: &Mlp<'_>, disc: &Mlp<'_>, d: usize) -> Result<()> {
    if gen.spec.input_dim != d || gen.spec.output_dim != d {
        return Err(Error::Dimension {
            context: "generator dimensions",
            expected: d,
            found: if gen.spec.input_dim != d {
                gen.spec.input_dim
            } else {
                gen.spec.output_dim
            },
        });
    }
    if disc.spec.input_dim != d || disc.spec.output_dim != 1 {
        return Err(Error::Dimension {
            context: "discriminator input",
            expected: d,
            found: disc.spec.input_dim,
        });
    }
    if !gen.spec.time_augmented || !disc.spec.time_augmented {
        return Err(Error::InvalidSpec("both networks must take a time input".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conjugates() {
        assert_eq!(conjugate_exponent(2.0).unwrap(), 2.0);
        assert!((conjugate_exponent(10.0).unwrap() - 10.0 / 9.0).abs() < 1e-15);
        assert!(matches!(conjugate_exponent(1.0), Err(Error::Domain(_))));
        assert!(conjugate_exponent(0.5).is_err());
    }

    #[test]
    fn exponents_are_conjugate_pairs() {
        for q in [1.5, 2.0, 3.0, 10.0] {
            let s = HamiltonianSpec::new(q).unwrap();
            assert!((1.0 / s.p + 1.0 / s.q - 1.0).abs() < 1e-12);
            assert!((1.0 / s.s + 1.0 / s.s_prime - 1.0).abs() < 1e-12);
        }
        let l1 = HamiltonianSpec::with_norm(2.0, 1.0).unwrap();
        assert!(l1.s_prime.is_infinite());
    }

    fn h_rows(rows: &[[f64; 2]], q: f64) -> Vec<f64> {
        let spec = HamiltonianSpec::new(q).unwrap();
        let mut tape = Tape::new();
        let data = rows.iter().flatten().copied().collect();
        let g = tape.constant(Tensor::matrix(rows.len(), 2, data).unwrap());
        let h = hamiltonian(&mut tape, g, &spec).unwrap();
        tape.value(h).data().to_vec()
    }

    #[test]
    fn hamiltonian_examples() {
        let h = h_rows(&[[0.0, 0.0], [3.0, 4.0]], 2.0);
        assert_eq!(h, vec![0.0, 12.5]);
        let h = h_rows(&[[1.0, 1.0], [0.0, 0.0]], 10.0);
        assert!((h[0] - 3.2).abs() < 1e-10);
        assert!(h[1] <= 1e-12);
    }

    #[test]
    fn non_euclidean_dual_norm_is_unsupported() {
        let spec = HamiltonianSpec::with_norm(2.0, 3.0).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            hamiltonian(&mut tape, g, &spec),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn oracle_zero_covector() {
        let spec = HamiltonianSpec::new(2.0).unwrap();
        let v = legendre_oracle(&[0.0, 0.0], &spec, 1.0, 0.01).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn oracle_reports_boundary_maximizer() {
        // maximizer of the q = 10 case sits at |p|^9 = 512
        let spec = HamiltonianSpec::new(10.0).unwrap();
        assert!(matches!(
            legendre_oracle(&[2.0, 0.0], &spec, 5.0, 0.05),
            Err(Error::WidenGrid { .. })
        ));
    }

    #[test]
    fn oracle_high_exponent_case() {
        let spec = HamiltonianSpec::new(10.0).unwrap();
        let v = legendre_oracle(&[2.0, 0.0], &spec, 600.0, 0.5).unwrap();
        assert!((v - 102.4).abs() / 102.4 < 1e-2, "{v}");
    }

    #[test]
    fn stabilized_matches_recorded_value() {
        let spec = HamiltonianSpec::new(3.0).unwrap();
        let g = [0.3, -1.7];
        let mut tape = Tape::new();
        let gv = tape.constant(Tensor::matrix(1, 2, g.to_vec()).unwrap());
        let h = hamiltonian(&mut tape, gv, &spec).unwrap();
        assert_eq!(tape.value(h).data()[0], spec.stabilized(&g));
    }

    #[test]
    fn batch_validation() {
        let good = LossBatch {
            z_interior: Tensor::zeros(vec![3, 2]),
            t_interior: Tensor::full(vec![3, 1], 0.5),
            x_data: Tensor::zeros(vec![4, 2]),
            z_initial: Tensor::zeros(vec![4, 2]),
        };
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.t_interior = Tensor::full(vec![3, 1], 1.01);
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))));
        let mut bad = good.clone();
        bad.x_data = Tensor::zeros(vec![0, 2]);
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))));
        let mut bad = good;
        bad.z_initial = Tensor::zeros(vec![4, 3]);
        assert!(matches!(bad.validate(), Err(Error::Dimension { .. })));
    }
}
