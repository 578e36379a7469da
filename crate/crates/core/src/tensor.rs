//! Dense rank-4 tensors in row-major NCHW layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Extents of a rank-4 tensor: batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Number of elements, or `None` when the product overflows `usize`.
    pub fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial plane size `h * w`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    fn validate(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Construction(format!(
                "all dimensions must be >= 1, got {:?}",
                self.dims()
            )));
        }
        self.checked_len().ok_or_else(|| {
            Error::Construction(format!("element count of {:?} overflows", self.dims()))
        })
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Result<Self> {
        let len = shape.validate()?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn full(shape: Shape4, value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Wraps existing data; the length must match the shape exactly.
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        let len = shape.validate()?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "shape {shape} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Fills a tensor with i.i.d. uniform values in `[lo, hi)` drawn from
    /// [`Stream::new(seed)`](Stream) in flat layout order.
    pub fn fill_random(shape: Shape4, seed: u64, lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::Argument(format!(
                "random range requires finite lo < hi, got [{lo}, {hi})"
            )));
        }
        let mut t = Self::zeros(shape)?;
        let mut rng = Stream::new(seed);
        for v in &mut t.data {
            *v = rng.uniform(lo, hi);
        }
        Ok(t)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offset of `(n, c, y, x)`: `((n*C + c)*H + y)*W + x`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    fn checked_offset(&self, n: usize, c: usize, y: usize, x: usize) -> Result<usize> {
        let s = self.shape;
        if n >= s.n || c >= s.c || y >= s.h || x >= s.w {
            return Err(Error::Index {
                index: [n, c, y, x],
                shape: s.dims(),
            });
        }
        Ok(self.offset(n, c, y, x))
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> Result<f64> {
        Ok(self.data[self.checked_offset(n, c, y, x)?])
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) -> Result<()> {
        let i = self.checked_offset(n, c, y, x)?;
        self.data[i] = v;
        Ok(())
    }

    /// The `h * w` plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n` as one contiguous `c * h * w` slice.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of element-wise products. Shapes must agree.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot of {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.map_inplace(|v| v * alpha);
    }
}
