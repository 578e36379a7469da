//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fracdil_cli::ablation::{ablation, AblationRow};
use fracdil_cli::commands::gen_data;
use fracdil_cli::config::RunConfig;
use fracdil_cli::train::{train, TrainOptions};
use fracdil_core::conv::{backward, forward, forward_integer, ConvLayerState, DilationVector};
use fracdil_core::gradcheck::{check_layer, LayerCheckConfig, DEFAULT_STEP};
use fracdil_core::optim::{sgd_update, TrainConfig};
use fracdil_core::{poly_lr, ConfusionMatrix, Shape4, Stream, Tensor4};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_layer(rng: &mut Stream, c_in: usize, c_out: usize, k: usize, d: Vec<f64>) -> ConvLayerState {
    let w = Tensor4::fill_random(Shape4::new(c_out, c_in, k, k), rng.next_u64(), -1.0, 1.0).unwrap();
    let b = (0..c_out).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    ConvLayerState::new(w, b, DilationVector::new(d, lo, hi).unwrap()).unwrap()
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    let mut failed = Vec::new();
    let configs = 24;
    for i in 0..configs {
        let cfg = LayerCheckConfig::random(1000 + i);
        let report = check_layer(&cfg, 2000 + i, 1e-6, DEFAULT_STEP).unwrap();
        worst = worst.max(report.max_rel_error());
        for t in &report.tensors {
            worst_abs = worst_abs.max(t.max_abs_error);
        }
        if !report.pass {
            failed.push(i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!(
            "{configs} configs, worst abs err {worst_abs:.2e}, worst rel err above the 1e-8 floor {worst:.2e}, failing {failed:?}, {secs:.1}s (< 60s)"
        ),
    )
}

fn integer_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(77);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let c_in = rng.range_inclusive(1, 4);
        let c_out = rng.range_inclusive(1, 4);
        let k = [1, 3, 5][rng.range_inclusive(0, 2)];
        let d: Vec<usize> = (0..c_in).map(|_| rng.range_inclusive(1, 4)).collect();
        let layer = random_layer(&mut rng, c_in, c_out, k, d.iter().map(|&v| v as f64).collect());
        let h = rng.range_inclusive(5, 12);
        let w = rng.range_inclusive(5, 12);
        let x = Tensor4::fill_random(Shape4::new(2, c_in, h, w), rng.next_u64(), -1.0, 1.0).unwrap();
        let a = forward(&x, &layer).unwrap();
        let b = forward_integer(&x, &layer, &d).unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 5.0,
        format!("10 configs, max |diff| {worst:.2e} (<= 1e-12), {secs:.2}s (< 5s)"),
    )
}

fn adjointness() -> Outcome {
    let mut rng = Stream::new(91);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let c_in = rng.range_inclusive(1, 4);
        let c_out = rng.range_inclusive(1, 4);
        let k = [1, 3, 5][rng.range_inclusive(0, 2)];
        let d = (0..c_in).map(|_| rng.uniform(1.0, 4.0)).collect();
        let layer = random_layer(&mut rng, c_in, c_out, k, d);
        let (h, w) = (rng.range_inclusive(5, 9), rng.range_inclusive(5, 9));
        let x = Tensor4::fill_random(Shape4::new(2, c_in, h, w), rng.next_u64(), -1.0, 1.0).unwrap();
        let g = Tensor4::fill_random(Shape4::new(2, c_out, h, w), rng.next_u64(), -1.0, 1.0).unwrap();
        let mut y = forward(&x, &layer).unwrap();
        // strip the bias to get the linear part
        for n in 0..2 {
            for (c, &b) in layer.bias().iter().enumerate() {
                y.plane_mut(n, c).iter_mut().for_each(|v| *v -= b);
            }
        }
        let lhs = g.dot(&y).unwrap();
        let rhs = backward(&x, &layer, &g).unwrap().d_input.dot(&x).unwrap();
        worst = worst.max((lhs - rhs).abs());
    }
    outcome(worst <= 1e-8, format!("10 configs, max |<g,Ax> - <A'g,x>| {worst:.2e} (<= 1e-8)"))
}

fn optimizer_schedule() -> Outcome {
    let cfg = TrainConfig {
        base_lr: 1e-3,
        max_iter: 20000,
        power: 0.9,
        ..TrainConfig::default()
    };
    // 1e-3 * 0.5^0.9 to 20 digits
    let half = 5.358867312681466e-4;
    let lr = [0, 10000, 20000].map(|i| poly_lr(i, &cfg).unwrap());
    let sched_ok = lr[0] == 1e-3 && (lr[1] - half).abs() <= 1e-15 && lr[2] == 0.0;

    let (mut p, mut v) = (vec![1.0], vec![0.0]);
    sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
    let first = (v[0], p[0]);
    sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
    let second = (v[0], p[0]);
    // the hand trace, evaluated in the same f64 operation order
    let v1 = 0.9 * 0.0 - 0.1 * 0.5;
    let p1 = 1.0 + v1;
    let v2 = 0.9 * v1 - 0.1 * 0.5;
    let p2 = p1 + v2;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    let trace_ok = first == (v1, p1)
        && second == (v2, p2)
        && close(first.0, -0.05)
        && close(first.1, 0.95)
        && close(second.0, -0.095)
        && close(second.1, 0.855);
    outcome(
        sched_ok && trace_ok,
        format!(
            "poly_lr {:?}, steps (v,p) {first:?} -> {second:?}",
            lr
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let m = ConfusionMatrix::from_counts(&[vec![3, 1], vec![1, 5]]).unwrap().compute().unwrap();
    let expect = [
        8.0 / 10.0,
        (3.0 / 4.0 + 5.0 / 6.0) / 2.0,
        (3.0 / 5.0 + 5.0 / 7.0) / 2.0,
        (4.0 * 3.0 / 5.0 + 6.0 * 5.0 / 7.0) / 10.0,
    ];
    let got = [m.pixel_acc, m.cls_acc, m.mean_iou, m.fw_iou];
    let hand = got.iter().zip(expect).all(|(g, e)| (g - e).abs() <= 1e-9);
    let printed = [0.8, 0.791667, 0.657143, 0.668571];
    let rounded = got.iter().zip(printed).all(|(g, e)| (g - e).abs() <= 5e-7);

    let perfect = ConfusionMatrix::from_counts(&[vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]])
        .unwrap()
        .compute()
        .unwrap();
    let perfect_ok = [perfect.pixel_acc, perfect.cls_acc, perfect.mean_iou, perfect.fw_iou] == [1.0; 4];
    let none = ConfusionMatrix::from_counts(&[vec![0, 2], vec![3, 0]]).unwrap().compute().unwrap();
    let none_ok = none.pixel_acc == 0.0 && none.mean_iou == 0.0;
    // uniform confusion over k classes: accuracies 1/k, every iou 1/(2k-1)
    let k = 4;
    let chance = ConfusionMatrix::from_counts(&vec![vec![5; k]; k]).unwrap().compute().unwrap();
    let chance_ok = chance.pixel_acc == 0.25 && chance.cls_acc == 0.25 && (chance.mean_iou - 1.0 / 7.0).abs() <= 1e-15;
    outcome(
        hand && rounded && perfect_ok && none_ok && chance_ok,
        format!(
            "[[3,1],[1,5]] -> {:.6} {:.6} {:.6} {:.6}; perfect {perfect_ok}, no-diagonal {none_ok}, chance {chance_ok}",
            got[0], got[1], got[2], got[3]
        ),
    )
}

fn best<'a>(rows: impl Iterator<Item = &'a AblationRow>) -> Option<&'a AblationRow> {
    rows.max_by(|a, b| a.metrics.mean_iou.total_cmp(&b.metrics.mean_iou))
}

fn trend(cfg: &RunConfig, rows: &[AblationRow], elapsed: Duration) -> Outcome {
    let mut wins = 0;
    let mut margins = Vec::new();
    let mut parts = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let of_seed = || rows.iter().filter(move |r| r.seed == seed);
        let fixed = best(of_seed().filter(|r| r.model.starts_with("fixed_") && r.model != "fixed_learned_mean"));
        // the learnable model is the constant-init one; uniform init is reported only
        let learned = of_seed().find(|r| r.model == "learned_constant");
        let (Some(f), Some(l)) = (fixed, learned) else {
            return outcome(false, format!("seed {seed}: missing rows"));
        };
        let margin = l.metrics.mean_iou - f.metrics.mean_iou;
        if margin > 0.0 {
            wins += 1;
        }
        margins.push(margin);
        parts.push(format!(
            "s{seed}: {} {:.4} vs {} {:.4}",
            l.model, l.metrics.mean_iou, f.model, f.metrics.mean_iou
        ));
    }
    let avg = margins.iter().sum::<f64>() / margins.len() as f64;
    let iters_equal = rows.len() == 7 * cfg.ablation.seeds.len() && rows.iter().all(|r| r.iters == cfg.train.max_iter);
    let mins = elapsed.as_secs_f64() / 60.0;
    outcome(
        wins * 3 >= 2 * margins.len() && avg >= 0.005 && iters_equal && mins < 30.0,
        format!(
            "{}; wins {wins}/{}, mean margin {:+.2} IoU points (>= +0.5), {mins:.1} min (< 30)",
            parts.join("; "),
            margins.len(),
            100.0 * avg
        ),
    )
}

fn trained_net(cfg: &RunConfig, seed: u64, model: &str) -> fracdil_core::Net {
    let path = cfg.out_dir.join(format!("seed{seed}")).join(model).join("checkpoint.fdckpt");
    fracdil_cli::checkpoint::Checkpoint::load(&path).unwrap().restore(None).unwrap().0
}

/// Per-layer means of the exported dilations.
fn layer_means(net: &fracdil_core::Net) -> Vec<f64> {
    let rows = fracdil_cli::train::export_dilations(net);
    let mut layers: Vec<usize> = rows.iter().map(|r| r.0).collect();
    layers.dedup();
    layers
        .iter()
        .map(|&l| {
            let v: Vec<f64> = rows.iter().filter(|r| r.0 == l).map(|r| r.2).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

/// Constant versus uniform init: exported per-layer means within 15%.
/// Reported alongside the criteria, not counted among them.
fn init_agreement(cfg: &RunConfig) -> String {
    let mut ok = true;
    let mut parts = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let a = layer_means(&trained_net(cfg, seed, "learned_constant"));
        let b = layer_means(&trained_net(cfg, seed, "learned_uniform"));
        for (x, y) in a.iter().zip(&b) {
            ok &= (x - y).abs() <= 0.15 * x.max(*y);
            parts.push(format!("{x:.2}/{y:.2}"));
        }
    }
    format!(
        "{} constant vs uniform init layer means within 15%: {}",
        if ok { "met" } else { "NOT met" },
        parts.join(" ")
    )
}

fn spread(cfg: &RunConfig, rows: &[AblationRow]) -> Outcome {
    let (lo, hi) = cfg.ablation.range;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in rows.iter().filter(|r| r.model == "learned_constant") {
        let net = trained_net(cfg, r.seed, &r.model);
        let in_range = fracdil_cli::train::export_dilations(&net)
            .iter()
            .all(|&(_, _, d)| (lo..=hi).contains(&d));
        let spread_ok = r.layer_std.iter().all(|&s| s > 0.1);
        ok &= in_range && spread_ok;
        let stds: Vec<String> = r.layer_std.iter().map(|s| format!("{s:.3}")).collect();
        parts.push(format!("s{} std [{}] in range {in_range}", r.seed, stds.join(", ")));
    }
    outcome(ok && !parts.is_empty(), format!("learned_constant: {} (std > 0.1)", parts.join("; ")))
}

fn overhead() -> Outcome {
    let mut rng = Stream::new(5);
    let (c, k) = (16, 3);
    let x = Tensor4::fill_random(Shape4::new(8, c, 64, 64), 1, -1.0, 1.0).unwrap();
    let frac: Vec<f64> = (0..c).map(|_| rng.uniform(1.1, 3.9)).collect();
    let ints: Vec<usize> = frac.iter().map(|d| d.round() as usize).collect();
    let layer = random_layer(&mut rng, c, c, k, frac);
    let time = |f: &dyn Fn()| {
        f();
        (0..5)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let t_frac = time(&|| {
        std::hint::black_box(forward(&x, &layer).unwrap());
    });
    let t_int = time(&|| {
        std::hint::black_box(forward_integer(&x, &layer, &ints).unwrap());
    });
    let ratio = t_frac / t_int;
    outcome(
        ratio <= 3.0,
        format!(
            "8x16x64x64, K=3: fractional {:.2} ms, integer {:.2} ms, ratio {ratio:.2} (<= 3)",
            1e3 * t_frac,
            1e3 * t_int
        ),
    )
}

fn reproducibility(base: &RunConfig, root: &Path) -> Outcome {
    let mut cfg = base.clone();
    cfg.run_id = "resume".into();
    cfg.train.max_iter = 60;
    cfg.eval_interval = 20;
    cfg.deterministic = true;
    let full_dir = root.join("resume_full");
    let part_dir = root.join("resume_part");
    let quiet = |resume: Option<PathBuf>, stop_after| TrainOptions {
        resume,
        stop_after,
        quiet: true,
    };
    cfg.out_dir = full_dir.clone();
    train(&cfg, &quiet(None, None)).unwrap();
    cfg.out_dir = part_dir.clone();
    let mid = train(&cfg, &quiet(None, Some(30))).unwrap();
    train(&cfg, &quiet(Some(mid.checkpoint), None)).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same_metrics = read(&full_dir, "metrics.csv") == read(&part_dir, "metrics.csv");
    let same_trace = read(&full_dir, "dilation_trace.csv") == read(&part_dir, "dilation_trace.csv");
    let rows = String::from_utf8(read(&full_dir, "metrics.csv")).unwrap().lines().count() - 1;
    outcome(
        same_metrics && same_trace && rows == 3,
        format!("60 iters, stop at 30 and resume: metrics.csv identical {same_metrics} ({rows} rows), trace identical {same_trace}"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 gradient exactness", gradient_exactness());
    report("2 integer equivalence", integer_equivalence());
    report("3 adjointness", adjointness());
    report("4 optimizer and schedule", optimizer_schedule());
    report("5 metrics oracle", metrics_oracle());

    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.json");
    let tmp = tempfile::TempDir::new().unwrap();
    let mut cfg = RunConfig::load(&conf).unwrap();
    cfg.data.dir = tmp.path().join("data");
    cfg.out_dir = tmp.path().join("ablation");
    gen_data(&cfg).unwrap();

    report("8 overhead bound", overhead());
    report("9 resume reproducibility", reproducibility(&cfg, tmp.path()));

    let start = Instant::now();
    let rows = ablation(&cfg, true).unwrap();
    let elapsed = start.elapsed();
    for r in &rows {
        println!("     {}", r.csv());
    }
    report("6 trend reproduction", trend(&cfg, &rows, elapsed));
    report("7 dilation spread", spread(&cfg, &rows));
    println!("NOTE {}", init_agreement(&cfg));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
