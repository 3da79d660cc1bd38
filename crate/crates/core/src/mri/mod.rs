//! Single-coil Cartesian MRI measurement model.
//!
//! Images and k-space share one storage type, [`Plane`], distinguished by a
//! domain marker so the two cannot be mixed up at call sites.

mod cg;
mod fft;
pub mod io;
mod mask;
mod noise;
mod phantom;

use std::marker::PhantomData;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{LinearOp, ShapeError, Tensor};

pub use cg::{cg_solve, CgSolution};
pub use fft::{fft2c, ifft2c};
pub use mask::{make_mask, MaskPattern, MaskSpec, SamplingMask};
pub use noise::add_noise;
pub use phantom::{make_phantoms, ContrastParams, PhantomKind, PhantomSample, PhantomSpec};

#[derive(Debug, Error)]
pub enum MriError {
    #[error("unsupported size {height}x{width}: both dimensions must be powers of two >= 2")]
    UnsupportedSize { height: usize, width: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("mask config: {0}")]
    MaskConfig(String),
    #[error("regularization weight must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("conjugate gradient produced a non-finite residual at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDomain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyDomain;

/// Complex `height×width` grid stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<D> {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    _domain: PhantomData<D>,
}

pub type ComplexImage = Plane<ImageDomain>;
pub type KSpace = Plane<FrequencyDomain>;

impl<D> Plane<D> {
    pub fn from_parts(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Self {
        assert_eq!(re.len(), height * width);
        assert_eq!(im.len(), height * width);
        Plane {
            height,
            width,
            re,
            im,
            _domain: PhantomData,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Plane::from_parts(height, width, vec![0.0; n], vec![0.0; n])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.re
            .iter()
            .chain(&self.im)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `⟨self, other⟩ = Σ conj(self)·other`, as `(re, im)`.
    pub fn inner(&self, other: &Plane<D>) -> (f64, f64) {
        let mut r = 0.0;
        let mut i = 0.0;
        for k in 0..self.len() {
            r += self.re[k] * other.re[k] + self.im[k] * other.im[k];
            i += self.re[k] * other.im[k] - self.im[k] * other.re[k];
        }
        (r, i)
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Plane::from_parts(
            self.height,
            self.width,
            self.re.iter().map(|v| v * s).collect(),
            self.im.iter().map(|v| v * s).collect(),
        )
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<(), MriError> {
        if (self.height, self.width) != (h, w) {
            return Err(MriError::ShapeMismatch {
                left: (self.height, self.width),
                right: (h, w),
            });
        }
        Ok(())
    }

    /// Network-facing view: `2×H×W` with real then imaginary channel.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.len());
        data.extend_from_slice(&self.re);
        data.extend_from_slice(&self.im);
        Tensor::new(&[2, self.height, self.width], data).expect("two-channel shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, ShapeError> {
        let (c, h, w) = t.chw()?;
        if c != 2 {
            return Err(ShapeError::Mismatch {
                left: t.shape().to_vec(),
                right: vec![2, h, w],
            });
        }
        let n = h * w;
        Ok(Plane::from_parts(
            h,
            w,
            t.data()[..n].to_vec(),
            t.data()[n..].to_vec(),
        ))
    }

    fn masked(mut self, mask: &SamplingMask) -> Self {
        for (k, &m) in mask.grid().iter().enumerate() {
            if m == 0 {
                self.re[k] = 0.0;
                self.im[k] = 0.0;
            }
        }
        self
    }
}

/// `A m = mask ⊙ F m`.
pub fn forward_op(m: &ComplexImage, mask: &SamplingMask) -> Result<KSpace, MriError> {
    m.check_shape(mask.height(), mask.width())?;
    Ok(fft2c(m)?.masked(mask))
}

/// `Aᴴ b = Fᴴ (mask ⊙ b)`.
pub fn adjoint_op(b: &KSpace, mask: &SamplingMask) -> Result<ComplexImage, MriError> {
    b.check_shape(mask.height(), mask.width())?;
    ifft2c(&b.clone().masked(mask))
}

/// `AᴴA` acting on the two-channel real view of an image. The map is
/// self-adjoint under the real inner product, so `adjoint == apply`.
#[derive(Debug, Clone)]
pub struct NormalOperator {
    mask: Arc<SamplingMask>,
}

impl NormalOperator {
    pub fn new(mask: Arc<SamplingMask>) -> Self {
        NormalOperator { mask }
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn apply_image(&self, x: &ComplexImage) -> Result<ComplexImage, MriError> {
        adjoint_op(&forward_op(x, &self.mask)?, &self.mask)
    }
}

impl LinearOp for NormalOperator {
    fn apply(&self, x: &Tensor) -> Tensor {
        let img = ComplexImage::from_tensor(x).expect("two-channel image tensor");
        self.apply_image(&img)
            .expect("image shape matches mask")
            .to_tensor()
    }

    fn adjoint(&self, y: &Tensor) -> Tensor {
        self.apply(y)
    }
}
