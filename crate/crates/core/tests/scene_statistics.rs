//! Measurements over generated batches of default scenes.

use fracdil_core::scenes::generate;
use fracdil_core::SceneSpec;

/// 4-connected components of `class` in a label map, as pixel lists.
fn components(labels: &[u8], h: usize, w: usize, class: u8) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] != class {
            continue;
        }
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        out.push(pixels);
    }
    out
}

fn interior(labels: &[u8], h: usize, w: usize, p: usize) -> bool {
    let (y, x) = (p / w, p % w);
    y > 0
        && x > 0
        && y + 1 < h
        && x + 1 < w
        && [p - w, p + w, p - 1, p + 1].iter().all(|&q| labels[q] == labels[p])
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: [f64; 3],
    sq: [f64; 3],
    objects: usize,
    area: f64,
}

impl Moments {
    fn mean(&self, c: usize) -> f64 {
        self.sum[c] / self.n
    }

    fn var(&self, c: usize) -> f64 {
        self.sq[c] / self.n - self.mean(c).powi(2)
    }
}

#[test]
fn scale_twins_share_texture_statistics_but_not_area() {
    let spec = SceneSpec::default();
    let twins = spec.scale_twins();
    assert_eq!(twins.len(), 1);
    let (small, large) = twins[0];
    let (h, w) = (spec.height, spec.width);
    let mut stats = [Moments::default(), Moments::default()];
    let mut index = 0;
    while stats.iter().any(|m| m.objects < 1000) {
        let s = generate(&spec, index);
        index += 1;
        for (m, class) in stats.iter_mut().zip([small, large]) {
            for obj in components(&s.labels, h, w, class as u8) {
                m.objects += 1;
                m.area += obj.len() as f64;
                for &p in obj.iter().filter(|&&p| interior(&s.labels, h, w, p)) {
                    m.n += 1.0;
                    for c in 0..3 {
                        let v = s.image[c * h * w + p] as f64;
                        m.sum[c] += v;
                        m.sq[c] += v * v;
                    }
                }
            }
        }
    }
    let [a, b] = &stats;
    for c in 0..3 {
        let dm = (a.mean(c) - b.mean(c)).abs() / b.mean(c);
        let dv = (a.var(c) - b.var(c)).abs() / b.var(c);
        assert!(dm < 0.02, "channel {c}: means {} vs {}", a.mean(c), b.mean(c));
        assert!(dv < 0.02, "channel {c}: variances {} vs {}", a.var(c), b.var(c));
    }
    let ratio = (b.area / b.objects as f64) / (a.area / a.objects as f64);
    assert!(ratio >= 4.0, "mean object area ratio {ratio}");
}

#[test]
fn every_class_covers_one_percent_over_500_scenes() {
    let spec = SceneSpec::default();
    let k = spec.num_classes();
    let mut counts = vec![0usize; k];
    for i in 0..500 {
        for &l in &generate(&spec, i).labels {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for (c, &n) in counts.iter().enumerate() {
        let share = n as f64 / total as f64;
        assert!(share >= 0.01, "class {c} covers {share:.4}");
    }
}
