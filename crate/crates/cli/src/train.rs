//! Training and evaluation loops.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fracdil_core::net::{predict_labels, softmax_xent, Net};
use fracdil_core::rng::{derive_seed, Stream};
use fracdil_core::scenes::{augment, stack, LabeledScene};
use fracdil_core::{poly_lr, sgd_step, ConfusionMatrix, Metrics, MomentumState, DEFAULT_IGNORE_LABEL};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{check_descriptor, load_split};
use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: &str = "run_id,iter,pixel_acc,cls_acc,mean_iou,fw_iou";
const NET_KEY: u64 = 0x6e6574;
const BATCH_KEY: u64 = 0x6261746368;
const EVAL_BATCH: usize = 10;

/// Scene ids and augmentation seeds of one training batch.
pub fn batch_plan(seed: u64, iter: usize, batch: usize, pool: usize) -> Vec<(usize, u64)> {
    let mut rng = Stream::new(derive_seed(derive_seed(seed, BATCH_KEY), iter as u64));
    (0..batch)
        .map(|_| (rng.range_inclusive(0, pool - 1), rng.next_u64()))
        .collect()
}

pub fn metrics_row(run_id: &str, iter: usize, m: &Metrics) -> String {
    format!(
        "{run_id},{iter},{},{},{},{}",
        m.pixel_acc, m.cls_acc, m.mean_iou, m.fw_iou
    )
}

/// Confusion-matrix metrics of `net` over whole scenes.
pub fn evaluate(net: &Net, scenes: &[LabeledScene]) -> CliResult<Metrics> {
    let mut cm = ConfusionMatrix::new(net.num_classes())?;
    for chunk in scenes.chunks(EVAL_BATCH) {
        let (x, labels) = stack(chunk)?;
        let pred = predict_labels(&net.predict_logits(&x)?);
        cm.accumulate(&pred.data, &labels.data, DEFAULT_IGNORE_LABEL)?;
    }
    Ok(cm.compute()?)
}

/// Hidden convolutions with a spatial kernel: the ones whose dilation matters.
/// The stem sees the image at unit dilation and is left out.
pub fn dilated_layers(net: &Net) -> Vec<usize> {
    (1..net.convs().len())
        .filter(|&i| net.convs()[i].state.kernel() > 1)
        .collect()
}

fn trace_header(net: &Net) -> String {
    let mut cols = vec!["iter".to_string()];
    for i in dilated_layers(net) {
        for c in 0..net.convs()[i].state.c_in() {
            cols.push(format!("conv{i}_c{c}"));
        }
    }
    cols.join(",")
}

fn trace_row(net: &Net, iter: usize) -> String {
    let mut row = iter.to_string();
    for i in dilated_layers(net) {
        for d in net.convs()[i].state.dilation().values() {
            row.push(',');
            row.push_str(&d.to_string());
        }
    }
    row
}

pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many completed iterations.
    pub stop_after: Option<usize>,
    pub quiet: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: Net,
    pub iter: usize,
    pub last_metrics: Option<Metrics>,
    pub checkpoint: PathBuf,
}

struct Appender {
    path: PathBuf,
    file: fs::File,
}

impl Appender {
    /// Creates the file with `header`, or appends to it when `resume` is set.
    fn open(path: PathBuf, header: &str, resume: bool) -> CliResult<Self> {
        let file = if resume {
            OpenOptions::new().append(true).open(&path)
        } else {
            fs::File::create(&path)
        };
        let mut a = Self {
            file: file.map_err(|e| CliError::io(&path, e))?,
            path,
        };
        if !resume {
            a.line(header)?;
        }
        Ok(a)
    }

    fn line(&mut self, s: &str) -> CliResult<()> {
        writeln!(self.file, "{s}").map_err(|e| CliError::io(&self.path, e))
    }
}

/// Runs the full training loop described by `cfg` into `cfg.out_dir`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainOutcome> {
    let t = &cfg.train;
    let spec = cfg.net_spec();
    check_descriptor(&cfg.data.dir, &cfg.data.scene, cfg.data.split)?;
    let k = spec.num_classes;
    let train_set = load_split(&cfg.data.dir, "train", k)?;
    let val_set = load_split(&cfg.data.dir, "val", k)?;
    if let Some(s) = train_set.iter().find(|s| s.height.min(s.width) < t.patch_size) {
        return Err(CliError::Config(format!(
            "patch_size {} exceeds a {}x{} training scene",
            t.patch_size, s.height, s.width
        )));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;

    let (mut net, mut momentum, start) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.seed != t.seed {
                return Err(CliError::Runtime(format!(
                    "{}: checkpoint seed {} differs from configured seed {}",
                    path.display(),
                    ck.seed,
                    t.seed
                )));
            }
            let (net, m) = ck.restore(Some(&spec))?;
            (net, m, ck.iter as usize)
        }
        None => {
            let net = Net::build(&spec, derive_seed(t.seed, NET_KEY))?;
            let m = MomentumState::new(&net);
            (net, m, 0)
        }
    };
    let resuming = opts.resume.is_some();
    let mut metrics_out = Appender::open(cfg.out_dir.join("metrics.csv"), METRICS_HEADER, resuming)?;
    let mut trace_out = Appender::open(cfg.out_dir.join("dilation_trace.csv"), &trace_header(&net), resuming)?;
    if !resuming {
        trace_out.line(&trace_row(&net, 0))?;
    }

    let end = opts.stop_after.map_or(t.max_iter, |s| s.min(t.max_iter));
    let mut last_metrics = None;
    for iter in start..end {
        let lr = poly_lr(iter, t)?;
        let plan = batch_plan(t.seed, iter, t.batch_size, train_set.len());
        let crops = plan
            .iter()
            .map(|&(i, s)| augment(&train_set[i], t.patch_size, s))
            .collect::<fracdil_core::Result<Vec<_>>>()?;
        let (x, labels) = stack(&crops)?;
        let (logits, cache) = net.forward(&x)?;
        let loss = softmax_xent(&logits, &labels, DEFAULT_IGNORE_LABEL)?;
        if !loss.loss.is_finite() {
            let ids: Vec<usize> = plan.iter().map(|p| p.0).collect();
            return Err(CliError::Runtime(format!(
                "non-finite loss at iteration {iter} (batch id {iter}, train scenes {ids:?})"
            )));
        }
        let grads = net.backward(&cache, &loss.grad_logits)?;
        sgd_step(&mut net, &grads, &mut momentum, lr, t)?;
        let done = iter + 1;
        trace_out.line(&trace_row(&net, done))?;
        if done % cfg.eval_interval == 0 || done == t.max_iter {
            let m = evaluate(&net, &val_set)?;
            metrics_out.line(&metrics_row(&cfg.run_id, done, &m))?;
            if !opts.quiet {
                eprintln!(
                    "[{}] iter {done}/{} loss {:.4} val mIoU {:.4}",
                    cfg.run_id, t.max_iter, loss.loss, m.mean_iou
                );
            }
            last_metrics = Some(m);
        }
    }
    let iter = end.max(start);
    let checkpoint = cfg.checkpoint_path();
    Checkpoint::capture(&net, &momentum, iter as u64, t.seed).save(&checkpoint)?;
    Ok(TrainOutcome {
        net,
        iter,
        last_metrics,
        checkpoint,
    })
}

/// Evaluates a checkpoint on `cfg.eval_split` and returns the CSV row.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> CliResult<(Metrics, String)> {
    let ck = Checkpoint::load(checkpoint)?;
    let (net, _) = ck.restore(Some(&cfg.net_spec()))?;
    let scenes = load_split(&cfg.data.dir, &cfg.eval_split, net.num_classes())?;
    let m = evaluate(&net, &scenes)?;
    Ok((m, metrics_row(&cfg.run_id, ck.iter as usize, &m)))
}

/// `(layer, channel, dilation)` rows of every traced layer.
pub fn export_dilations(net: &Net) -> Vec<(usize, usize, f64)> {
    let mut rows = Vec::new();
    for i in dilated_layers(net) {
        for (c, &d) in net.convs()[i].state.dilation().values().iter().enumerate() {
            rows.push((i, c, d));
        }
    }
    rows
}
