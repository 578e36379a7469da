//! A small fully-convolutional segmentation network built from fractional
//! dilated convolutions, ReLU and a per-pixel softmax cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::conv::{
    backward, forward, init_dilations, ConvLayerState, DilationInit, DilationVector,
    LayerGradients,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_IGNORE_LABEL: u8 = 255;

/// Dilation behaviour of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationMode {
    /// Every channel uses this dilation and it is never updated.
    Fixed(f64),
    /// Per-channel dilations trained by the optimizer and kept in `range`.
    Learnable { init: InitMode, range: (f64, f64) },
}

/// Initialization of learnable dilations as written in a network description.
/// Uniform draws are seeded from the network seed and the layer position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Constant(f64),
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: DilationMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl NetSpec {
    /// 3x3 conv(3→w), ReLU, two 3x3 dilated convs(w→w) each followed by ReLU,
    /// then a 1x1 conv(w→classes). The dilated pair uses `dilations`.
    pub fn mini_largefov(num_classes: usize, width: usize, dilations: [DilationMode; 2]) -> Self {
        let conv = |c_in, c_out, kernel, dilation| {
            LayerSpec::Conv(ConvSpec {
                c_in,
                c_out,
                kernel,
                dilation,
            })
        };
        Self {
            layers: vec![
                conv(3, width, 3, DilationMode::Fixed(1.0)),
                LayerSpec::Relu,
                conv(width, width, 3, dilations[0]),
                LayerSpec::Relu,
                conv(width, width, 3, dilations[1]),
                LayerSpec::Relu,
                conv(width, num_classes, 1, DilationMode::Fixed(1.0)),
            ],
            num_classes,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Conv(c) => Some(c),
            LayerSpec::Relu => None,
        })
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.convs().next().map(|c| c.c_in)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Construction(m));
        let convs: Vec<&ConvSpec> = self.convs().collect();
        if convs.is_empty() {
            return err("network has no convolution".into());
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Conv(_))) {
            return err("network must end with a convolution".into());
        }
        for (i, c) in convs.iter().enumerate() {
            if c.c_in == 0 || c.c_out == 0 {
                return err(format!("conv {i} has a zero channel count"));
            }
            if c.kernel % 2 == 0 {
                return err(format!("conv {i} has even kernel size {}", c.kernel));
            }
            match c.dilation {
                DilationMode::Fixed(d) if !(d > 0.0 && d.is_finite()) => {
                    return err(format!("conv {i} has invalid fixed dilation {d}"));
                }
                DilationMode::Learnable { init, range: (lo, hi) } => {
                    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                        return err(format!("conv {i} has invalid dilation range [{lo}, {hi}]"));
                    }
                    if let InitMode::Constant(v) = init {
                        if !(v >= lo && v <= hi) {
                            return err(format!(
                                "conv {i} initial dilation {v} outside [{lo}, {hi}]"
                            ));
                        }
                    }
                }
                _ => {}
            }
            if let Some(next) = convs.get(i + 1) {
                if next.c_in != c.c_out {
                    return err(format!(
                        "conv {i} outputs {} channels but conv {} expects {}",
                        c.c_out,
                        i + 1,
                        next.c_in
                    ));
                }
            }
        }
        let last = convs[convs.len() - 1];
        if last.kernel != 1 || last.c_out != self.num_classes {
            return err(format!(
                "final layer must be a 1x1 conv to {} classes",
                self.num_classes
            ));
        }
        Ok(())
    }
}

/// A convolution of the network together with whether its dilations train.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConv {
    pub state: ConvLayerState,
    pub learnable: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Conv(usize),
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    spec: NetSpec,
    convs: Vec<NetConv>,
    stages: Vec<Stage>,
    version: u64,
}

/// Activations recorded by [`Net::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    inputs: Vec<Tensor4>,
}

impl Net {
    /// Builds a network with He-uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// with `fan_in = C_in*K*K`, and zero biases. Conv `i` draws its weights from
    /// sub-stream `2i` of `seed` and uniform dilations from sub-stream `2i + 1`.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut stages = Vec::new();
        for layer in &spec.layers {
            match layer {
                LayerSpec::Relu => stages.push(Stage::Relu),
                LayerSpec::Conv(c) => {
                    let i = convs.len() as u64;
                    let fan_in = (c.c_in * c.kernel * c.kernel) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let weights = Tensor4::fill_random(
                        Shape4::new(c.c_out, c.c_in, c.kernel, c.kernel),
                        derive_seed(seed, 2 * i),
                        -bound,
                        bound,
                    )?;
                    let (dilation, learnable) = match c.dilation {
                        DilationMode::Fixed(d) => (DilationVector::fixed(d, c.c_in)?, false),
                        DilationMode::Learnable { init, range } => {
                            let init = match init {
                                InitMode::Constant(v) => DilationInit::Constant(v),
                                InitMode::Uniform => {
                                    DilationInit::Uniform(derive_seed(seed, 2 * i + 1))
                                }
                            };
                            (init_dilations(init, range, c.c_in)?, true)
                        }
                    };
                    let state = ConvLayerState::new(weights, vec![0.0; c.c_out], dilation)?;
                    stages.push(Stage::Conv(convs.len()));
                    convs.push(NetConv { state, learnable });
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            convs,
            stages,
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn convs(&self) -> &[NetConv] {
        &self.convs
    }

    /// Mutable access to the parameters. Invalidates outstanding forward caches.
    pub fn convs_mut(&mut self) -> &mut [NetConv] {
        self.version += 1;
        &mut self.convs
    }

    /// Number of learnable dilation factors over all layers.
    pub fn dilation_parameter_count(&self) -> usize {
        self.convs
            .iter()
            .filter(|c| c.learnable)
            .map(|c| c.state.dilation().len())
            .sum()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ForwardCache)> {
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            let next = match stage {
                Stage::Conv(i) => forward(&cur, &self.convs[*i].state)?,
                Stage::Relu => {
                    let mut t = cur.clone();
                    t.map_inplace(|v| v.max(0.0));
                    t
                }
            };
            inputs.push(cur);
            cur = next;
        }
        Ok((
            cur,
            ForwardCache {
                version: self.version,
                inputs,
            },
        ))
    }

    /// Logits only, without keeping intermediate activations.
    pub fn predict_logits(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = match stage {
                Stage::Conv(i) => forward(&cur, &self.convs[*i].state)?,
                Stage::Relu => {
                    cur.map_inplace(|v| v.max(0.0));
                    cur
                }
            };
        }
        Ok(cur)
    }

    /// Gradients of every convolution, in layer order. ReLU passes gradient
    /// only where its input was strictly positive.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor4) -> Result<Vec<LayerGradients>> {
        if cache.version != self.version || cache.inputs.len() != self.stages.len() {
            return Err(Error::State(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        let mut grads: Vec<Option<LayerGradients>> = vec![None; self.convs.len()];
        let mut g = grad_logits.clone();
        for (stage, input) in self.stages.iter().zip(&cache.inputs).rev() {
            match stage {
                Stage::Conv(i) => {
                    let lg = backward(input, &self.convs[*i].state, &g)?;
                    g = lg.d_input.clone();
                    grads[*i] = Some(lg);
                }
                Stage::Relu => {
                    for (gv, xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every conv visited")).collect())
    }
}

/// Per-pixel class labels for a batch, `(n, h, w)` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Shape(format!(
                "label map ({n}, {h}, {w}) needs {} values, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(Self { n, h, w, data })
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Mean cross-entropy over non-ignored pixels.
    pub loss: f64,
    pub grad_logits: Tensor4,
    pub valid_count: usize,
    /// Set when every pixel carried the ignore label.
    pub all_ignored: bool,
}

/// Per-pixel softmax cross-entropy averaged over non-ignored pixels.
pub fn softmax_xent(logits: &Tensor4, labels: &LabelMap, ignore_label: u8) -> Result<LossOutput> {
    let s = logits.shape();
    if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
        return Err(Error::Shape(format!(
            "labels ({}, {}, {}) vs logits {}",
            labels.n, labels.h, labels.w, s
        )));
    }
    let k = s.c;
    let hw = s.plane();
    let mut grad = Tensor4::zeros(s)?;
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut probs = vec![0.0; k];
    for b in 0..s.n {
        let item = logits.item(b);
        let g_item = grad.item_mut(b);
        for p in 0..hw {
            let label = labels.data[b * hw + p];
            if label == ignore_label {
                continue;
            }
            if label as usize >= k {
                return Err(Error::Argument(format!(
                    "label {label} outside {k} classes"
                )));
            }
            let max = (0..k).map(|c| item[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                probs[c] = (item[c * hw + p] - max).exp();
                z += probs[c];
            }
            let logit_label = item[label as usize * hw + p];
            total += z.ln() + max - logit_label;
            for c in 0..k {
                g_item[c * hw + p] = probs[c] / z;
            }
            g_item[label as usize * hw + p] -= 1.0;
            valid += 1;
        }
    }
    if valid == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad_logits: grad,
            valid_count: 0,
            all_ignored: true,
        });
    }
    grad.scale(1.0 / valid as f64);
    Ok(LossOutput {
        loss: total / valid as f64,
        grad_logits: grad,
        valid_count: valid,
        all_ignored: false,
    })
}

/// Softmax probabilities over the channel axis.
pub fn softmax(logits: &Tensor4) -> Tensor4 {
    let s = logits.shape();
    let hw = s.plane();
    let mut out = logits.clone();
    for b in 0..s.n {
        let item = out.item_mut(b);
        for p in 0..hw {
            let max = (0..s.c).map(|c| item[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (item[c * hw + p] - max).exp();
                item[c * hw + p] = e;
                z += e;
            }
            for c in 0..s.c {
                item[c * hw + p] /= z;
            }
        }
    }
    out
}

/// Arg-max class per pixel, ties resolved towards the lower class index.
pub fn predict_labels(logits: &Tensor4) -> LabelMap {
    let s = logits.shape();
    let hw = s.plane();
    let mut data = Vec::with_capacity(s.n * hw);
    for b in 0..s.n {
        let item = logits.item(b);
        for p in 0..hw {
            let mut best = 0;
            for c in 1..s.c {
                if item[c * hw + p] > item[best * hw + p] {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap {
        n: s.n,
        h: s.h,
        w: s.w,
        data,
    }
}
