//! Central finite-difference gradient oracle.
//!
//! [`fd_gradient`] only ever evaluates the scalar function it is handed, so it
//! shares no code path with the analytic backward passes it is used to check.

use std::fmt;

use crate::conv::{backward, forward, ConvLayerState, DilationVector};
use crate::error::{Error, Result};
use crate::net::{softmax_xent, LabelMap, Net};
use crate::rng::Stream;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Elements whose absolute error is at or below this pass regardless of their
/// relative error.
pub const ABS_FLOOR: f64 = 1e-8;
/// Minimum distance of every tap's fractional offset from the integer lattice.
pub const LATTICE_GUARD: f64 = 0.05;

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every `i`.
pub fn fd_gradient<F>(mut f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = f(&probe);
        probe[i] = theta[i] - step;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "function is not finite around parameter {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Error summary for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    pub pass: bool,
}

/// Compares analytic against numeric values element-wise.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|)`; it is taken
/// as zero when `|a - n| <= abs_floor`.
pub fn compare(
    name: &str,
    analytic: &[f64],
    numeric: &[f64],
    tolerance: f64,
    abs_floor: f64,
) -> Result<TensorReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Shape(format!(
            "{name}: {} analytic vs {} numeric values",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = if abs <= abs_floor {
            0.0
        } else {
            abs / a.abs().max(n.abs())
        };
        if !abs.is_finite() || !rel.is_finite() {
            return Err(Error::Oracle(format!("{name}[{i}] is not finite")));
        }
        max_abs = max_abs.max(abs);
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some(i);
        }
    }
    Ok(TensorReport {
        name: name.to_string(),
        elements: analytic.len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
        pass: max_rel < tolerance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn new(tensors: Vec<TensorReport>, tolerance: f64) -> Self {
        let pass = tensors.iter().all(|t| t.pass);
        Self {
            tensors,
            tolerance,
            pass,
        }
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub const CSV_HEADER: &'static str =
        "tensor,elements,max_rel_error,max_abs_error,worst_index,pass";

    /// One CSV row per parameter tensor, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for t in &self.tensors {
            out.push_str(&format!(
                "{},{},{:.6e},{:.6e},{},{}\n",
                t.name,
                t.elements,
                t.max_rel_error,
                t.max_abs_error,
                t.worst_index.map_or(String::new(), |i| i.to_string()),
                t.pass
            ));
        }
        out
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>14} {:>14} {:>8}  status",
            "tensor", "elements", "max rel err", "max abs err", "worst"
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<12} {:>8} {:>14.3e} {:>14.3e} {:>8}  {}",
                t.name,
                t.elements,
                t.max_rel_error,
                t.max_abs_error,
                t.worst_index.map_or("-".to_string(), |i| i.to_string()),
                if t.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} (tolerance {:e})",
            if self.pass { "pass" } else { "FAIL" },
            self.tolerance
        )
    }
}

/// Shape and dilations of a single-layer gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheckConfig {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub dilations: Vec<f64>,
}

impl Default for LayerCheckConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            c_in: 2,
            c_out: 2,
            kernel: 3,
            height: 6,
            width: 6,
            dilations: vec![1.3, 2.4],
        }
    }
}

/// Rejects dilations for which some tap offset `i * d` lies within
/// [`LATTICE_GUARD`] of an integer, where the interpolant has a kink.
pub fn check_lattice(dilations: &[f64], radius: usize) -> Result<()> {
    for (c, &d) in dilations.iter().enumerate() {
        for i in 1..=radius {
            let t = i as f64 * d;
            let frac = t - t.floor();
            if !(LATTICE_GUARD..=1.0 - LATTICE_GUARD).contains(&frac) {
                return Err(Error::Precondition(format!(
                    "channel {c}: tap offset {i}*{d} = {t} is within {LATTICE_GUARD} of an integer"
                )));
            }
        }
    }
    Ok(())
}

impl LayerCheckConfig {
    /// Samples a configuration with `C_in, C_out` in 1..=4, `K` in {1, 3, 5},
    /// spatial extents in 5..=9 and lattice-guarded dilations in `[1.1, 3.9]`.
    pub fn random(seed: u64) -> Self {
        let mut rng = Stream::new(seed);
        let c_in = rng.range_inclusive(1, 4);
        let c_out = rng.range_inclusive(1, 4);
        let kernel = [1, 3, 5][rng.range_inclusive(0, 2)];
        let height = rng.range_inclusive(5, 9);
        let width = rng.range_inclusive(5, 9);
        let radius = (kernel - 1) / 2;
        let dilations = (0..c_in)
            .map(|_| loop {
                let d = rng.uniform(1.1, 3.9);
                if check_lattice(&[d], radius).is_ok() {
                    break d;
                }
            })
            .collect();
        Self {
            batch: 1,
            c_in,
            c_out,
            kernel,
            height,
            width,
            dilations,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.c_in {
            return Err(Error::Argument(format!(
                "{} dilations for {} input channels",
                self.dilations.len(),
                self.c_in
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Argument("kernel size must be odd".into()));
        }
        check_lattice(&self.dilations, (self.kernel - 1) / 2)
    }
}

/// Random layer, input and output gradient for a check, all derived from `seed`.
pub struct LayerFixture {
    pub layer: ConvLayerState,
    pub input: Tensor4,
    pub grad_out: Tensor4,
}

impl LayerFixture {
    pub fn new(cfg: &LayerCheckConfig, seed: u64) -> Result<Self> {
        let (lo, hi) = cfg
            .dilations
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let dilation = DilationVector::new(cfg.dilations.clone(), lo, hi)?;
        let weights = Tensor4::fill_random(
            Shape4::new(cfg.c_out, cfg.c_in, cfg.kernel, cfg.kernel),
            seed,
            -1.0,
            1.0,
        )?;
        let bias = Tensor4::fill_random(Shape4::new(1, 1, 1, cfg.c_out), seed ^ 0xb1a5, -1.0, 1.0)?
            .into_vec();
        let layer = ConvLayerState::new(weights, bias, dilation)?;
        let input = Tensor4::fill_random(
            Shape4::new(cfg.batch, cfg.c_in, cfg.height, cfg.width),
            seed.wrapping_add(1),
            -1.0,
            1.0,
        )?;
        let grad_out = Tensor4::fill_random(
            Shape4::new(cfg.batch, cfg.c_out, cfg.height, cfg.width),
            seed.wrapping_add(2),
            -1.0,
            1.0,
        )?;
        Ok(Self {
            layer,
            input,
            grad_out,
        })
    }

    /// The scalar `sum(grad_out * forward(input, layer))`.
    pub fn loss(&self, input: &Tensor4, layer: &ConvLayerState) -> f64 {
        forward(input, layer)
            .and_then(|y| y.dot(&self.grad_out))
            .unwrap_or(f64::NAN)
    }
}

/// Checks all four analytic gradients of one layer against central differences.
pub fn check_layer(
    cfg: &LayerCheckConfig,
    seed: u64,
    tolerance: f64,
    step: f64,
) -> Result<GradReport> {
    cfg.validate()?;
    let fx = LayerFixture::new(cfg, seed)?;
    let analytic = backward(&fx.input, &fx.layer, &fx.grad_out)?;

    let numeric_weights = fd_gradient(
        |theta| {
            let mut l = fx.layer.clone();
            l.weights_mut().copy_from_slice(theta);
            fx.loss(&fx.input, &l)
        },
        fx.layer.weights().data(),
        step,
    )?;
    let numeric_bias = fd_gradient(
        |theta| {
            let mut l = fx.layer.clone();
            l.bias_mut().copy_from_slice(theta);
            fx.loss(&fx.input, &l)
        },
        fx.layer.bias(),
        step,
    )?;
    let numeric_dilation = fd_gradient(
        |theta| {
            let mut l = fx.layer.clone();
            l.dilation_mut().values_mut().copy_from_slice(theta);
            fx.loss(&fx.input, &l)
        },
        fx.layer.dilation().values(),
        step,
    )?;
    let numeric_input = fd_gradient(
        |theta| {
            let mut x = fx.input.clone();
            x.data_mut().copy_from_slice(theta);
            fx.loss(&x, &fx.layer)
        },
        fx.input.data(),
        step,
    )?;

    let tensors = vec![
        compare(
            "weights",
            analytic.d_weights.data(),
            &numeric_weights,
            tolerance,
            ABS_FLOOR,
        )?,
        compare("bias", &analytic.d_bias, &numeric_bias, tolerance, ABS_FLOOR)?,
        compare(
            "dilation",
            &analytic.d_dilation,
            &numeric_dilation,
            tolerance,
            ABS_FLOOR,
        )?,
        compare(
            "input",
            analytic.d_input.data(),
            &numeric_input,
            tolerance,
            ABS_FLOOR,
        )?,
    ];
    Ok(GradReport::new(tensors, tolerance))
}

/// Checks every parameter gradient of a whole network, for the scalar loss
/// `softmax_xent(net(x), labels)`, against central differences. Dilations are
/// checked for learnable layers only; fixed ones usually sit on the lattice.
pub fn check_net(
    net: &Net,
    x: &Tensor4,
    labels: &LabelMap,
    ignore_label: u8,
    tolerance: f64,
    step: f64,
) -> Result<GradReport> {
    let loss_of = |n: &Net| -> f64 {
        n.predict_logits(x)
            .and_then(|l| softmax_xent(&l, labels, ignore_label))
            .map_or(f64::NAN, |o| o.loss)
    };
    let (logits, cache) = net.forward(x)?;
    let out = softmax_xent(&logits, labels, ignore_label)?;
    let analytic = net.backward(&cache, &out.grad_logits)?;

    let mut tensors = Vec::new();
    for (li, grads) in analytic.iter().enumerate() {
        let state = &net.convs()[li].state;
        let numeric_w = fd_gradient(
            |t| {
                let mut n = net.clone();
                n.convs_mut()[li].state.weights_mut().copy_from_slice(t);
                loss_of(&n)
            },
            state.weights().data(),
            step,
        )?;
        let numeric_b = fd_gradient(
            |t| {
                let mut n = net.clone();
                n.convs_mut()[li].state.bias_mut().copy_from_slice(t);
                loss_of(&n)
            },
            state.bias(),
            step,
        )?;
        tensors.push(compare(
            &format!("conv{li}.weights"),
            grads.d_weights.data(),
            &numeric_w,
            tolerance,
            ABS_FLOOR,
        )?);
        tensors.push(compare(
            &format!("conv{li}.bias"),
            &grads.d_bias,
            &numeric_b,
            tolerance,
            ABS_FLOOR,
        )?);
        if net.convs()[li].learnable {
            let numeric_d = fd_gradient(
                |t| {
                    let mut n = net.clone();
                    n.convs_mut()[li]
                        .state
                        .dilation_mut()
                        .values_mut()
                        .copy_from_slice(t);
                    loss_of(&n)
                },
                state.dilation().values(),
                step,
            )?;
            tensors.push(compare(
                &format!("conv{li}.dilation"),
                &grads.d_dilation,
                &numeric_d,
                tolerance,
                ABS_FLOOR,
            )?);
        }
    }
    Ok(GradReport::new(tensors, tolerance))
}
