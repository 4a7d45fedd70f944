//! Samplers for Gaussian targets, noise and times, and an IDX image reader.
//!
//! Every sampler is a pure function of its arguments and the generator state
//! it is handed; the trainer owns a single [`ChaCha8Rng`] so runs replay
//! exactly.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use mfgan_autodiff::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, IdxError, Result};

pub type Rng64 = ChaCha8Rng;

/// The generator every sampler draws from, seeded from a single integer.
pub fn seeded_rng(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    Rng64::seed_from_u64(seed)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// `N(mean, covariance)` with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    cholesky: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Precondition("target dimension must be positive".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Dimension {
                context: "target covariance",
                expected: d,
                found: covariance.nrows().max(covariance.ncols()),
            });
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::NotSymmetric(asym));
        }
        let cholesky = covariance
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            cholesky,
        })
    }

    /// `N(c * 1, I)` in `d` dimensions.
    pub fn isotropic(d: usize, center: f64) -> Result<Self> {
        Self::new(vec![center; d], DMatrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.cholesky
    }
}

/// Rows `mean + L xi` with `xi` standard normal.
pub fn sample_gaussian(target: &GaussianTarget, n: usize, rng: &mut Rng64) -> Result<Tensor> {
    let d = target.dim();
    let xi = sample_noise(n, d, rng)?;
    let l = &target.cholesky;
    let mut out = Vec::with_capacity(n * d);
    for row in xi.data().chunks_exact(d) {
        for i in 0..d {
            let mut v = target.mean[i];
            for (j, x) in row.iter().enumerate().take(i + 1) {
                v += l[(i, j)] * x;
            }
            out.push(v);
        }
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

pub fn sample_noise(n: usize, d: usize, rng: &mut Rng64) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::Precondition(format!(
            "noise batch must be non-empty (n = {n}, d = {d})"
        )));
    }
    let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::new(vec![n, d], data)?)
}

/// I.i.d. `Unif[0, 1)` times as an `n x 1` column.
pub fn sample_time(n: usize, rng: &mut Rng64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Precondition("time batch must be non-empty".into()));
    }
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(Tensor::new(vec![n, 1], data)?)
}

/// Flattened 28x28 images with pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pixels: Vec<f64>,
    count: usize,
}

impl ImageDataset {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Reads an IDX3 image file (optionally gzip-compressed).
pub fn load_idx_images(path: &Path) -> Result<ImageDataset> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingDataset(format!("{} does not exist", path.display()))
        }
        _ => Error::io(path, e),
    })?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    Ok(parse_idx_images(&bytes)?)
}

pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<ImageDataset, IdxError> {
    const HEADER: usize = 16;
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let magic = word(0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER {
        return Err(IdxError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let (count, rows, cols) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(IdxError::BadDims { rows, cols });
    }
    let expected = HEADER + count * IMAGE_PIXELS;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[HEADER..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(ImageDataset { pixels, count })
}

/// Anything the trainer can draw target samples from.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut Rng64) -> Result<Tensor>;
    /// Mean and covariance that generated samples are scored against.
    fn reference_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

impl DataSource for GaussianTarget {
    fn dim(&self) -> usize {
        GaussianTarget::dim(self)
    }

    fn sample(&self, n: usize, rng: &mut Rng64) -> Result<Tensor> {
        sample_gaussian(self, n, rng)
    }

    fn reference_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.mean.clone(), self.covariance.clone()))
    }
}

/// Uniform sampling of images with replacement.
impl DataSource for ImageDataset {
    fn dim(&self) -> usize {
        IMAGE_PIXELS
    }

    fn sample(&self, n: usize, rng: &mut Rng64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Precondition("data batch must be non-empty".into()));
        }
        if self.count == 0 {
            return Err(Error::Precondition("image dataset is empty".into()));
        }
        let mut out = Vec::with_capacity(n * IMAGE_PIXELS);
        for _ in 0..n {
            let i = rng.random_range(0..self.count);
            out.extend_from_slice(self.image(i));
        }
        Ok(Tensor::new(vec![n, IMAGE_PIXELS], out)?)
    }

    /// Empirical moments of the whole dataset.
    fn reference_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let all = Tensor::new(vec![self.count, IMAGE_PIXELS], self.pixels.clone())?;
        crate::metrics::empirical_moments(&all)
    }
}
