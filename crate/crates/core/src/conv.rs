//! Channel-wise fractional dilated convolution.
//!
//! Each input channel `c` carries its own positive real dilation `d[c]`. Output
//! position `(m, n)` of output channel `o` is
//!
//! ```text
//! y[o, m, n] = bias[o] + sum_{c, i, j} w[o, c, i + r, j + r] * B_c(m + i*d[c], n + j*d[c])
//! ```
//!
//! with centered tap offsets `i, j` in `-r..=r` and `B_c` the zero-padded
//! bilinear interpolant of channel `c`. Interpolation uses an independent
//! fractional part per axis and per tap.
//!
//! Because `m` and `n` are integers, the fractional part of `m + i*d` depends
//! only on the tap, so each (channel, tap) pair reads a fixed sub-pixel shift of
//! the input plane. The forward pass exploits this: it gathers one shifted,
//! interpolated copy of every input plane per tap into a column matrix and then
//! applies the weights with a single matrix product per batch item.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Shape4, Tensor4};

/// Per-channel dilation factors constrained to `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DilationVector {
    values: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl DilationVector {
    pub fn new(values: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Argument(format!(
                "dilation range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if values.is_empty() {
            return Err(Error::Argument("dilation vector is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Argument(format!(
                "dilation {v} outside range [{lo}, {hi}]"
            )));
        }
        Ok(Self { values, lo, hi })
    }

    /// A dilation pinned to a single value on every channel (range `[d, d]`).
    pub fn fixed(d: f64, channels: usize) -> Result<Self> {
        Self::new(vec![d; channels], d, d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Raw access for optimizer updates. Callers must re-establish the range
    /// invariant with [`DilationVector::project_in_place`] afterwards.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn project_in_place(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(self.lo, self.hi);
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation (n - 1 denominator); 0 for a single channel.
    pub fn sample_std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let ss: f64 = self.values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

/// Clamps every entry of `d` into its range.
pub fn project_dilations(d: &DilationVector) -> DilationVector {
    let mut out = d.clone();
    out.project_in_place();
    out
}

/// How a learnable dilation vector is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationInit {
    Constant(f64),
    /// i.i.d. uniform on the range, drawn from the given seed.
    Uniform(u64),
}

pub fn init_dilations(
    mode: DilationInit,
    range: (f64, f64),
    channels: usize,
) -> Result<DilationVector> {
    let (lo, hi) = range;
    match mode {
        DilationInit::Constant(v) => {
            if !(v >= lo && v <= hi) {
                return Err(Error::Argument(format!(
                    "initial dilation {v} outside range [{lo}, {hi}]"
                )));
            }
            DilationVector::new(vec![v; channels], lo, hi)
        }
        DilationInit::Uniform(seed) => {
            let mut rng = Stream::new(seed);
            let values = (0..channels)
                .map(|_| if lo < hi { rng.uniform(lo, hi) } else { lo })
                .collect();
            DilationVector::new(values, lo, hi)
        }
    }
}

/// Four-neighbour bilinear stencil around a real sample position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearStencil {
    pub u: f64,
    pub v: f64,
    pub fu: i64,
    pub fv: i64,
    pub du: f64,
    pub dv: f64,
}

impl BilinearStencil {
    pub fn new(u: f64, v: f64) -> Self {
        let fu = u.floor();
        let fv = v.floor();
        Self {
            u,
            v,
            fu: fu as i64,
            fv: fv as i64,
            du: u - fu,
            dv: v - fv,
        }
    }

    /// Corner weights in order `(fu, fv)`, `(fu, fv+1)`, `(fu+1, fv)`, `(fu+1, fv+1)`.
    pub fn weights(&self) -> [f64; 4] {
        let (du, dv) = (self.du, self.dv);
        [
            (1.0 - du) * (1.0 - dv),
            (1.0 - du) * dv,
            du * (1.0 - dv),
            du * dv,
        ]
    }

    /// Corner coordinates in the same order as [`BilinearStencil::weights`].
    pub fn corners(&self) -> [(i64, i64); 4] {
        [
            (self.fu, self.fv),
            (self.fu, self.fv + 1),
            (self.fu + 1, self.fv),
            (self.fu + 1, self.fv + 1),
        ]
    }
}

#[inline]
fn padded(plane: &[f64], h: usize, w: usize, r: i64, c: i64) -> f64 {
    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
        plane[r as usize * w + c as usize]
    } else {
        0.0
    }
}

/// Bilinear sample of channel `c` of batch item `n` at real position `(u, v)`.
/// Corners outside the image read as zero.
pub fn sample_bilinear(x: &Tensor4, n: usize, c: usize, u: f64, v: f64) -> Result<f64> {
    let s = x.shape();
    if n >= s.n || c >= s.c {
        return Err(Error::Index {
            index: [n, c, 0, 0],
            shape: s.dims(),
        });
    }
    let plane = x.plane(n, c);
    let st = BilinearStencil::new(u, v);
    Ok(st
        .corners()
        .iter()
        .zip(st.weights())
        .map(|(&(r, cc), wt)| wt * padded(plane, s.h, s.w, r, cc))
        .sum())
}

/// Parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerState {
    weights: Tensor4,
    bias: Vec<f64>,
    dilation: DilationVector,
}

impl ConvLayerState {
    /// `weights` has shape `(C_out, C_in, K, K)` with `K` odd.
    pub fn new(weights: Tensor4, bias: Vec<f64>, dilation: DilationVector) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w || s.h.is_multiple_of(2) {
            return Err(Error::Construction(format!(
                "kernel must be square with odd size, got {}x{}",
                s.h, s.w
            )));
        }
        if bias.len() != s.n {
            return Err(Error::Construction(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                s.n
            )));
        }
        if dilation.len() != s.c {
            return Err(Error::Construction(format!(
                "dilation length {} does not match {} input channels",
                dilation.len(),
                s.c
            )));
        }
        Ok(Self {
            weights,
            bias,
            dilation,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    pub fn radius(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn weights(&self) -> &Tensor4 {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.data_mut()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn dilation(&self) -> &DilationVector {
        &self.dilation
    }

    pub fn dilation_mut(&mut self) -> &mut DilationVector {
        &mut self.dilation
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let k = self.kernel();
        ArrayView2::from_shape((self.c_out(), self.c_in() * k * k), self.weights.data())
            .expect("weight tensor is contiguous")
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.shape().c != self.c_in() {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, input has shape {}",
                self.c_in(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn output_shape(&self, x: &Tensor4) -> Shape4 {
        let s = x.shape();
        Shape4::new(s.n, self.c_out(), s.h, s.w)
    }
}

/// Gradients of a scalar loss with respect to one layer's parameters and input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub d_weights: Tensor4,
    pub d_bias: Vec<f64>,
    pub d_dilation: Vec<f64>,
    pub d_input: Tensor4,
}

impl LayerGradients {
    pub fn is_finite(&self) -> bool {
        self.d_weights.is_finite()
            && self.d_input.is_finite()
            && self.d_bias.iter().all(|v| v.is_finite())
            && self.d_dilation.iter().all(|v| v.is_finite())
    }
}

/// Integer anchor and fractional part of one tap coordinate offset `i * d`.
#[derive(Clone, Copy, Debug)]
struct TapShift {
    tap: isize,
    anchor: isize,
    frac: f64,
}

fn tap_shifts(layer: &ConvLayerState) -> Vec<Vec<TapShift>> {
    let r = layer.radius() as isize;
    layer
        .dilation
        .values()
        .iter()
        .map(|&d| {
            (-r..=r)
                .map(|tap| {
                    let t = tap as f64 * d;
                    let anchor = t.floor();
                    TapShift {
                        tap,
                        anchor: anchor as isize,
                        frac: t - anchor,
                    }
                })
                .collect()
        })
        .collect()
}

/// Index range of `n` in `0..w` for which `n + shift` lies in `0..w`.
#[inline]
fn valid_cols(w: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (w as isize - shift).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// `out[n] += weight * row[n + shift]` wherever the source column is inside.
#[inline]
fn axpy_shifted(out: &mut [f64], row: &[f64], shift: isize, weight: f64) {
    let (lo, hi) = valid_cols(out.len(), shift);
    if lo >= hi || weight == 0.0 {
        return;
    }
    let src = &row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
    for (o, s) in out[lo..hi].iter_mut().zip(src) {
        *o += weight * s;
    }
}

/// Writes the bilinearly shifted copy of `plane` for one (row shift, column
/// shift) pair into `out` (which must be zeroed).
fn gather_plane(plane: &[f64], h: usize, w: usize, row: TapShift, col: TapShift, out: &mut [f64]) {
    let (du, dv) = (row.frac, col.frac);
    for m in 0..h {
        let dst = &mut out[m * w..(m + 1) * w];
        for (dr, wr) in [(0isize, 1.0 - du), (1, du)] {
            if wr == 0.0 {
                continue;
            }
            let r = m as isize + row.anchor + dr;
            if r < 0 || r >= h as isize {
                continue;
            }
            let src = &plane[r as usize * w..(r as usize + 1) * w];
            axpy_shifted(dst, src, col.anchor, wr * (1.0 - dv));
            axpy_shifted(dst, src, col.anchor + 1, wr * dv);
        }
    }
}

/// Builds the `(C_in*K*K, H*W)` column matrix of one batch item.
fn gather_columns(item: &[f64], h: usize, w: usize, shifts: &[Vec<TapShift>], cols: &mut [f64]) {
    let hw = h * w;
    let k = shifts[0].len();
    cols.fill(0.0);
    for (c, taps) in shifts.iter().enumerate() {
        let plane = &item[c * hw..(c + 1) * hw];
        for (ki, &row) in taps.iter().enumerate() {
            for (kj, &col) in taps.iter().enumerate() {
                let idx = (c * k + ki) * k + kj;
                gather_plane(plane, h, w, row, col, &mut cols[idx * hw..(idx + 1) * hw]);
            }
        }
    }
}

/// Scatters the column-gradient of one tap back into the input gradient and
/// returns that tap's contribution to the dilation gradient of the channel.
#[allow(clippy::too_many_arguments)]
fn scatter_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    row: TapShift,
    col: TapShift,
    grad: &[f64],
    d_plane: &mut [f64],
) -> f64 {
    let (du, dv) = (row.frac, col.frac);
    let (ti, tj) = (row.tap as f64, col.tap as f64);
    let w00 = (1.0 - du) * (1.0 - dv);
    let w01 = (1.0 - du) * dv;
    let w10 = du * (1.0 - dv);
    let w11 = du * dv;
    let hi = h as isize;
    let wi = w as isize;
    let mut acc = 0.0;
    for m in 0..h {
        let r0 = m as isize + row.anchor;
        let r1 = r0 + 1;
        let ok_r0 = r0 >= 0 && r0 < hi;
        let ok_r1 = r1 >= 0 && r1 < hi;
        if !ok_r0 && !ok_r1 {
            continue;
        }
        let g_row = &grad[m * w..(m + 1) * w];
        for (n, &g) in g_row.iter().enumerate() {
            let c0 = n as isize + col.anchor;
            let c1 = c0 + 1;
            let ok_c0 = c0 >= 0 && c0 < wi;
            let ok_c1 = c1 >= 0 && c1 < wi;
            let i00 = (ok_r0 && ok_c0).then(|| r0 as usize * w + c0 as usize);
            let i01 = (ok_r0 && ok_c1).then(|| r0 as usize * w + c1 as usize);
            let i10 = (ok_r1 && ok_c0).then(|| r1 as usize * w + c0 as usize);
            let i11 = (ok_r1 && ok_c1).then(|| r1 as usize * w + c1 as usize);
            let x00 = i00.map_or(0.0, |i| plane[i]);
            let x01 = i01.map_or(0.0, |i| plane[i]);
            let x10 = i10.map_or(0.0, |i| plane[i]);
            let x11 = i11.map_or(0.0, |i| plane[i]);
            let dbu = (1.0 - dv) * (x10 - x00) + dv * (x11 - x01);
            let dbv = (1.0 - du) * (x01 - x00) + du * (x11 - x10);
            acc += g * (ti * dbu + tj * dbv);
            if let Some(i) = i00 {
                d_plane[i] += g * w00;
            }
            if let Some(i) = i01 {
                d_plane[i] += g * w01;
            }
            if let Some(i) = i10 {
                d_plane[i] += g * w10;
            }
            if let Some(i) = i11 {
                d_plane[i] += g * w11;
            }
        }
    }
    acc
}

/// Fractional dilated convolution with "same" output size and zero padding.
pub fn forward(x: &Tensor4, layer: &ConvLayerState) -> Result<Tensor4> {
    layer.check_input(x)?;
    let s = x.shape();
    let hw = s.plane();
    let k = layer.kernel();
    let rows = layer.c_in() * k * k;
    let shifts = tap_shifts(layer);
    let w_mat = layer.weight_matrix();
    let mut y = Tensor4::zeros(layer.output_shape(x))?;
    let mut cols = vec![0.0; rows * hw];
    for b in 0..s.n {
        gather_columns(x.item(b), s.h, s.w, &shifts, &mut cols);
        let cols_mat = ArrayView2::from_shape((rows, hw), &cols[..]).expect("column buffer");
        let y_item = y.item_mut(b);
        for (o, bias) in layer.bias.iter().enumerate() {
            y_item[o * hw..(o + 1) * hw].fill(*bias);
        }
        let mut y_mat =
            ArrayViewMut2::from_shape((layer.c_out(), hw), y_item).expect("output buffer");
        general_mat_mul(1.0, &w_mat, &cols_mat, 1.0, &mut y_mat);
    }
    Ok(y)
}

/// Classic integer dilated convolution by direct lookup, without any
/// interpolation. `d_int` gives one dilation per input channel.
pub fn forward_integer(x: &Tensor4, layer: &ConvLayerState, d_int: &[usize]) -> Result<Tensor4> {
    layer.check_input(x)?;
    if d_int.len() != layer.c_in() {
        return Err(Error::Shape(format!(
            "{} integer dilations for {} input channels",
            d_int.len(),
            layer.c_in()
        )));
    }
    if d_int.contains(&0) {
        return Err(Error::Argument("integer dilations must be >= 1".into()));
    }
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let k = layer.kernel();
    let r = layer.radius() as isize;
    let mut y = Tensor4::zeros(layer.output_shape(x))?;
    let weights = layer.weights.data();
    for b in 0..s.n {
        for o in 0..layer.c_out() {
            let out = y.plane_mut(b, o);
            out.fill(layer.bias[o]);
            for (c, &d) in d_int.iter().enumerate() {
                let plane = x.plane(b, c);
                for ki in 0..k {
                    let dy = (ki as isize - r) * d as isize;
                    for kj in 0..k {
                        let dx = (kj as isize - r) * d as isize;
                        let wt = weights[((o * layer.c_in() + c) * k + ki) * k + kj];
                        for m in 0..h {
                            let src_r = m as isize + dy;
                            if src_r < 0 || src_r >= h as isize {
                                continue;
                            }
                            let src = &plane[src_r as usize * w..(src_r as usize + 1) * w];
                            axpy_shifted(&mut out[m * w..(m + 1) * w], src, dx, wt);
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Exact gradients of `sum(grad_out * forward(x, layer))` with respect to the
/// weights, bias, per-channel dilations and the input.
pub fn backward(x: &Tensor4, layer: &ConvLayerState, grad_out: &Tensor4) -> Result<LayerGradients> {
    layer.check_input(x)?;
    let out_shape = layer.output_shape(x);
    if grad_out.shape() != out_shape {
        return Err(Error::Shape(format!(
            "output gradient has shape {}, forward output is {}",
            grad_out.shape(),
            out_shape
        )));
    }
    let s = x.shape();
    let hw = s.plane();
    let k = layer.kernel();
    let rows = layer.c_in() * k * k;
    let shifts = tap_shifts(layer);
    let w_mat = layer.weight_matrix();

    let mut d_weights = Tensor4::zeros(layer.weights.shape())?;
    let mut d_bias = vec![0.0; layer.c_out()];
    let mut d_dilation = vec![0.0; layer.c_in()];
    let mut d_input = Tensor4::zeros(s)?;
    let mut cols = vec![0.0; rows * hw];
    let mut d_cols = vec![0.0; rows * hw];

    for b in 0..s.n {
        let g_item = grad_out.item(b);
        let g_mat = ArrayView2::from_shape((layer.c_out(), hw), g_item).expect("grad buffer");
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += g_item[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }

        gather_columns(x.item(b), s.h, s.w, &shifts, &mut cols);
        let cols_mat = ArrayView2::from_shape((rows, hw), &cols[..]).expect("column buffer");
        let mut dw_mat = ArrayViewMut2::from_shape((layer.c_out(), rows), d_weights.data_mut())
            .expect("weight grad buffer");
        general_mat_mul(1.0, &g_mat, &cols_mat.t(), 1.0, &mut dw_mat);

        let mut dc_mat =
            ArrayViewMut2::from_shape((rows, hw), &mut d_cols[..]).expect("column grad buffer");
        general_mat_mul(1.0, &w_mat.t(), &g_mat, 0.0, &mut dc_mat);

        let x_item = x.item(b);
        let dx_item = d_input.item_mut(b);
        for (c, taps) in shifts.iter().enumerate() {
            let plane = &x_item[c * hw..(c + 1) * hw];
            let d_plane = &mut dx_item[c * hw..(c + 1) * hw];
            for (ki, &row) in taps.iter().enumerate() {
                for (kj, &col) in taps.iter().enumerate() {
                    let idx = (c * k + ki) * k + kj;
                    d_dilation[c] += scatter_plane(
                        plane,
                        s.h,
                        s.w,
                        row,
                        col,
                        &d_cols[idx * hw..(idx + 1) * hw],
                        d_plane,
                    );
                }
            }
        }
    }

    Ok(LayerGradients {
        d_weights,
        d_bias,
        d_dilation,
        d_input,
    })
}
