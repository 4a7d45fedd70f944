//! Moment errors, the closed-form Gaussian W2 (Bures) distance, and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use mfgan_autodiff::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::networks::{evaluate, MlpSpec, ParamSet};
use crate::objective::LossBreakdown;

pub const METRICS_HEADER: &str =
    "step,total,interior,terminal,initial,mean_err,cov_err,w2,hjb_residual,wall_ms";

/// Sample mean and unbiased (`1/(n-1)`) covariance of the rows of `samples`.
pub fn empirical_moments(samples: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.rank() != 2 {
        return Err(Error::Precondition("samples must be an n x d matrix".into()));
    }
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    if n < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, samples.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Precondition("covariance must be square".into()));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Square root of a symmetric PSD matrix; negative eigenvalues (rounding
/// noise in empirical covariances) are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Wasserstein-2 distance between `N(m1, s1)` and `N(m2, s2)`.
pub fn gaussian_w2(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || s1.nrows() != d || s2.nrows() != d {
        return Err(Error::Dimension {
            context: "gaussian_w2",
            expected: d,
            found: if m2.len() != d { m2.len() } else { s1.nrows().max(s2.nrows()) },
        });
    }
    check_symmetric(s1)?;
    check_symmetric(s2)?;
    let mean_sq = (m1 - m2).norm_squared();
    if s1 == s2 {
        // The covariance term vanishes identically.
        return Ok(mean_sq.sqrt());
    }
    let r1 = sqrtm_psd(s1);
    let cross = sqrtm_psd(&(&r1 * s2 * &r1));
    let bures = s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok((mean_sq + bures.max(0.0)).sqrt())
}

/// Errors of generated samples against a reference Gaussian:
/// (`|mean diff|_inf`, `|cov diff|_F`, W2).
pub fn moment_errors(
    samples: &Tensor,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(f64, f64, f64)> {
    let (m, s) = empirical_moments(samples)?;
    if m.len() != mean.len() {
        return Err(Error::Dimension {
            context: "moment_errors",
            expected: mean.len(),
            found: m.len(),
        });
    }
    let mean_err = (&m - mean).amax();
    let cov_err = (&s - cov).norm();
    let w2 = gaussian_w2(&m, &s, mean, cov)?;
    Ok((mean_err, cov_err, w2))
}

/// One evaluation row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub mean_err: f64,
    pub cov_err: f64,
    pub w2: f64,
    pub hjb_residual: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss.total,
            self.loss.interior,
            self.loss.terminal,
            self.loss.initial,
            self.mean_err,
            self.cov_err,
            self.w2,
            self.hjb_residual,
            self.wall_ms
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Precondition(format!("metrics row has {} fields", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Precondition(format!("bad metrics field `{}`", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse()
                .map_err(|_| Error::Precondition(format!("bad metrics field `{}`", f[i])))
        };
        Ok(Self {
            step: int(0)?,
            loss: LossBreakdown {
                total: num(1)?,
                interior: num(2)?,
                terminal: num(3)?,
                initial: num(4)?,
            },
            mean_err: num(5)?,
            cov_err: num(6)?,
            w2: num(7)?,
            hjb_residual: num(8)?,
            wall_ms: int(9)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::Precondition(format!("{}: bad metrics header", path.display()))),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRecord::parse_row).collect()
}

/// C-style `%.{precision}g` formatting.
pub fn format_g(v: f64, precision: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= p as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip_zeros(mantissa), sign, exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp) as usize;
        strip_zeros(&format!("{:.*}", decimals, v)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes rows of `points` as CSV with a `x1,...,xd` header.
pub fn write_points_csv(points: &Tensor, path: &Path) -> Result<()> {
    if points.rank() != 2 {
        return Err(Error::Precondition("points must be an n x d matrix".into()));
    }
    let d = points.shape()[1];
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    let mut buf = header.join(",");
    buf.push('\n');
    if d > 0 {
        for row in points.data().chunks_exact(d) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    buf.push(',');
                }
                let _ = write!(buf, "{}", format_g(*v, 9));
            }
            buf.push('\n');
        }
    }
    w.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pushes `z` through the generator at time `t` and writes the points.
pub fn export_samples(
    gen_spec: &MlpSpec,
    gen: &ParamSet,
    z: &Tensor,
    t: f64,
    path: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("time {t} outside [0, 1]")));
    }
    let n = z.shape()[0];
    let points = if n == 0 {
        Tensor::zeros(vec![0, gen_spec.output_dim])
    } else {
        let times = Tensor::full(vec![n, 1], t);
        evaluate(gen_spec, gen, z, Some(&times))?
    };
    write_points_csv(&points, path)
}
