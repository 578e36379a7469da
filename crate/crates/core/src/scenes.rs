//! Synthetic multi-scale segmentation scenes.
//!
//! Every class paints its objects with an oriented sinusoidal texture tinted by
//! a class color. Two "scale twins" share color and texture exactly and differ
//! only in object size, so telling them apart needs spatial context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LabelMap, DEFAULT_IGNORE_LABEL};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{Shape4, Tensor4};

pub const SCENE_MAGIC: &[u8] = b"FDSEG1\n";
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Disc,
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub color: [f64; 3],
    /// Texture frequency in cycles per pixel.
    pub frequency: f64,
    /// Stripe orientation in degrees.
    pub orientation: f64,
    /// Object side length (or diameter) range in pixels. Ignored for class 0.
    pub scale: (usize, usize),
    pub shape: ShapeKind,
    /// Relative frequency with which objects of this class are drawn.
    pub weight: f64,
}

impl ClassStyle {
    fn same_texture(&self, other: &ClassStyle) -> bool {
        self.color == other.color
            && self.frequency == other.frequency
            && self.orientation == other.orientation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// One style per class; class 0 is the background.
    pub classes: Vec<ClassStyle>,
    pub objects: (usize, usize),
    /// Texture amplitude around mid-gray.
    pub amplitude: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    /// Empty pixels kept between objects.
    pub gap: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let style = |color, frequency, orientation, scale, shape, weight| ClassStyle {
            color,
            frequency,
            orientation,
            scale,
            shape,
            weight,
        };
        let twin = [0.9, 0.45, 0.3];
        Self {
            height: 64,
            width: 64,
            classes: vec![
                style([0.55, 0.55, 0.55], 0.05, 0.0, (0, 0), ShapeKind::Any, 0.0),
                style(twin, 0.12, 45.0, (8, 16), ShapeKind::Any, 0.45),
                style(twin, 0.12, 45.0, (28, 40), ShapeKind::Any, 0.2),
                style([0.3, 0.8, 0.4], 0.1, 90.0, (6, 14), ShapeKind::Rect, 0.2),
                style([0.35, 0.45, 0.9], 0.15, 0.0, (8, 18), ShapeKind::Disc, 0.15),
            ],
            objects: (5, 9),
            amplitude: 0.3,
            noise: 0.1,
            gap: 2,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Pairs of object classes with identical texture.
    pub fn scale_twins(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 1..self.classes.len() {
            for b in a + 1..self.classes.len() {
                if self.classes[a].same_texture(&self.classes[b]) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        let k = self.classes.len();
        if !(3..=DEFAULT_IGNORE_LABEL as usize).contains(&k) {
            return bad(format!("need between 3 and 255 classes, got {k}"));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.objects.0 > self.objects.1 {
            return bad("objects range is inverted".into());
        }
        if !(0.0..=0.5).contains(&self.amplitude) || !(0.0..=0.5).contains(&self.noise) {
            return bad("amplitude and noise must lie in [0, 0.5]".into());
        }
        let mut total_weight = 0.0;
        for (c, s) in self.classes.iter().enumerate() {
            if s.color.iter().any(|v| !(0.0..=1.0).contains(v)) || !s.frequency.is_finite() {
                return bad(format!("class {c}: color must lie in [0, 1] and frequency be finite"));
            }
            if c > 0 {
                if s.scale.0 == 0 || s.scale.0 > s.scale.1 || s.scale.1 > self.height.min(self.width) {
                    return bad(format!("class {c}: scale range {:?} invalid", s.scale));
                }
                if !(s.weight >= 0.0 && s.weight.is_finite()) {
                    return bad(format!("class {c}: weight must be non-negative"));
                }
                total_weight += s.weight;
            }
        }
        if total_weight <= 0.0 {
            return bad("at least one object class needs positive weight".into());
        }
        if self.scale_twins().is_empty() {
            return bad("no two object classes share a texture".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Channel-major `(3, h, w)`.
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Placed {
    class: usize,
    disc: bool,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Placed {
    fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.h || x >= self.x0 + self.w {
            return false;
        }
        if !self.disc {
            return true;
        }
        let r = self.h as f64 / 2.0;
        let dy = y as f64 + 0.5 - (self.y0 as f64 + r);
        let dx = x as f64 + 0.5 - (self.x0 as f64 + r);
        dy * dy + dx * dx <= r * r
    }

    fn overlaps(&self, other: &Placed, gap: usize) -> bool {
        self.y0 < other.y0 + other.h + gap
            && other.y0 < self.y0 + self.h + gap
            && self.x0 < other.x0 + other.w + gap
            && other.x0 < self.x0 + self.w + gap
    }
}

const PLACEMENT_TRIES: usize = 20;

fn pick_class(spec: &SceneSpec, rng: &mut Stream) -> usize {
    let total: f64 = spec.classes[1..].iter().map(|s| s.weight).sum();
    let mut t = rng.next_f64() * total;
    for (c, s) in spec.classes.iter().enumerate().skip(1) {
        if t < s.weight {
            return c;
        }
        t -= s.weight;
    }
    spec.classes.len() - 1
}

fn texture(style: &ClassStyle, amplitude: f64, phase: f64, y: usize, x: usize) -> f64 {
    let theta = style.orientation.to_radians();
    let s = x as f64 * theta.cos() + y as f64 * theta.sin();
    0.5 + amplitude * (std::f64::consts::TAU * style.frequency * s + phase).sin()
}

/// Renders scene `index`; a pure function of `(spec, index)`.
pub fn generate(spec: &SceneSpec, index: u64) -> LabeledScene {
    let (h, w) = (spec.height, spec.width);
    let mut rng = Stream::new(derive_seed(spec.seed, index));
    let n_obj = rng.range_inclusive(spec.objects.0, spec.objects.1);
    let mut placed: Vec<Placed> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = pick_class(spec, &mut rng);
        let style = &spec.classes[class];
        let disc = match style.shape {
            ShapeKind::Rect => false,
            ShapeKind::Disc => true,
            ShapeKind::Any => rng.bernoulli(0.5),
        };
        let side = rng.range_inclusive(style.scale.0, style.scale.1);
        let other = if disc {
            side
        } else {
            rng.range_inclusive(style.scale.0, style.scale.1)
        };
        for _ in 0..PLACEMENT_TRIES {
            let cand = Placed {
                class,
                disc,
                y0: rng.range_inclusive(0, h - side),
                x0: rng.range_inclusive(0, w - other),
                h: side,
                w: other,
            };
            if placed.iter().all(|p| !p.overlaps(&cand, spec.gap)) {
                placed.push(cand);
                break;
            }
        }
    }
    let phases: Vec<f64> = std::iter::once(rng.uniform(0.0, std::f64::consts::TAU))
        .chain(placed.iter().map(|_| rng.uniform(0.0, std::f64::consts::TAU)))
        .collect();

    let mut labels = vec![0u8; h * w];
    let mut owner = vec![usize::MAX; h * w];
    for (o, p) in placed.iter().enumerate() {
        for y in p.y0..p.y0 + p.h {
            for x in p.x0..p.x0 + p.w {
                if p.contains(y, x) {
                    labels[y * w + x] = p.class as u8;
                    owner[y * w + x] = o;
                }
            }
        }
    }
    let mut image = vec![0f32; IMAGE_CHANNELS * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (style, phase) = match owner[i] {
                usize::MAX => (&spec.classes[0], phases[0]),
                o => (&spec.classes[placed[o].class], phases[o + 1]),
            };
            let t = texture(style, spec.amplitude, phase, y, x);
            for c in 0..IMAGE_CHANNELS {
                let v = style.color[c] * t + rng.uniform(-spec.noise, spec.noise);
                image[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    LabeledScene {
        height: h,
        width: w,
        num_classes: spec.num_classes(),
        image,
        labels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: std::ops::Range<u64>,
    pub val: std::ops::Range<u64>,
    pub test: std::ops::Range<u64>,
}

impl Split {
    pub fn named(&self) -> [(&'static str, std::ops::Range<u64>); 3] {
        [
            ("train", self.train.clone()),
            ("val", self.val.clone()),
            ("test", self.test.clone()),
        ]
    }
}

/// Consecutive, disjoint scene index ranges.
pub fn make_split(counts: SplitCounts) -> Result<Split> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::Argument("every split needs at least one scene".into()));
    }
    let a = counts.train as u64;
    let b = a + counts.val as u64;
    let c = b + counts.test as u64;
    Ok(Split {
        train: 0..a,
        val: a..b,
        test: b..c,
    })
}

/// Crops `patch × patch` at `(y0, x0)` and optionally mirrors horizontally.
pub fn crop_flip(scene: &LabeledScene, y0: usize, x0: usize, patch: usize, flip: bool) -> Result<LabeledScene> {
    if patch == 0 || y0 + patch > scene.height || x0 + patch > scene.width {
        return Err(Error::Argument(format!(
            "patch {patch} at ({y0}, {x0}) does not fit a {}x{} scene",
            scene.height, scene.width
        )));
    }
    let (h, w) = (scene.height, scene.width);
    let src_x = |x: usize| if flip { x0 + patch - 1 - x } else { x0 + x };
    let mut image = Vec::with_capacity(IMAGE_CHANNELS * patch * patch);
    for c in 0..IMAGE_CHANNELS {
        for y in 0..patch {
            let row = c * h * w + (y0 + y) * w;
            image.extend((0..patch).map(|x| scene.image[row + src_x(x)]));
        }
    }
    let mut labels = Vec::with_capacity(patch * patch);
    for y in 0..patch {
        labels.extend((0..patch).map(|x| scene.labels[(y0 + y) * w + src_x(x)]));
    }
    Ok(LabeledScene {
        height: patch,
        width: patch,
        num_classes: scene.num_classes,
        image,
        labels,
    })
}

/// Random crop plus a coin-flip horizontal mirror, drawn from `seed`.
pub fn augment(scene: &LabeledScene, patch: usize, seed: u64) -> Result<LabeledScene> {
    if patch == 0 || patch > scene.height.min(scene.width) {
        return Err(Error::Argument(format!(
            "patch {patch} larger than scene {}x{}",
            scene.height, scene.width
        )));
    }
    let mut rng = Stream::new(seed);
    let y0 = rng.range_inclusive(0, scene.height - patch);
    let x0 = rng.range_inclusive(0, scene.width - patch);
    let flip = rng.bernoulli(0.5);
    crop_flip(scene, y0, x0, patch, flip)
}

/// Stacks equally sized scenes into an `(n, 3, h, w)` batch and its labels.
pub fn stack(scenes: &[LabeledScene]) -> Result<(Tensor4, LabelMap)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(scenes.len() * IMAGE_CHANNELS * h * w);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape("scenes in a batch differ in size".into()));
        }
        data.extend(s.image.iter().map(|&v| v as f64));
        labels.extend_from_slice(&s.labels);
    }
    let n = scenes.len();
    Ok((
        Tensor4::from_vec(Shape4::new(n, IMAGE_CHANNELS, h, w), data)?,
        LabelMap::new(n, h, w, labels)?,
    ))
}

pub fn encode(scene: &LabeledScene) -> Vec<u8> {
    let header = format!(
        "{} {} {} {}\n",
        scene.height, scene.width, IMAGE_CHANNELS, scene.num_classes
    );
    let mut out = Vec::with_capacity(SCENE_MAGIC.len() + header.len() + scene.image.len() * 4 + scene.labels.len());
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(header.as_bytes());
    for v in &scene.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&scene.labels);
    out
}

/// Parses an encoded scene; `source` names the origin in error messages.
pub fn decode(bytes: &[u8], source: &str) -> Result<LabeledScene> {
    let fail = |m: &str| Error::Parse(format!("{source}: {m}"));
    let rest = bytes
        .strip_prefix(SCENE_MAGIC)
        .ok_or_else(|| fail("missing FDSEG1 magic"))?;
    let eol = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fail("unterminated header line"))?;
    let header = std::str::from_utf8(&rest[..eol]).map_err(|_| fail("header is not ASCII"))?;
    let fields: Vec<usize> = header
        .split(' ')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fail("malformed header"))?;
    let [h, w, c, k] = fields[..] else {
        return Err(fail("header needs four fields"));
    };
    if c != IMAGE_CHANNELS || h == 0 || w == 0 || !(1..=DEFAULT_IGNORE_LABEL as usize).contains(&k) {
        return Err(fail("unsupported header values"));
    }
    let body = &rest[eol + 1..];
    let n_img = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(c))
        .ok_or_else(|| fail("header dimensions overflow"))?;
    if body.len() != n_img * 4 + h * w {
        return Err(fail(&format!("expected {} payload bytes, found {}", n_img * 4 + h * w, body.len())));
    }
    let (img, lab) = body.split_at(n_img * 4);
    let image = img
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let labels = lab.to_vec();
    if labels.iter().any(|&l| l as usize >= k && l != DEFAULT_IGNORE_LABEL) {
        return Err(fail("label out of range"));
    }
    Ok(LabeledScene {
        height: h,
        width: w,
        num_classes: k,
        image,
        labels,
    })
}
