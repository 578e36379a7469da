//! Fixed-versus-learned dilation ablation.

use std::fs;
use std::time::Instant;

use fracdil_core::net::{DilationMode, InitMode};
use fracdil_core::Metrics;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::train::{dilated_layers, train, TrainOptions};

pub const SUMMARY_HEADER: &str = "seed,model,dilations,iters,pixel_acc,cls_acc,mean_iou,fw_iou";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub model: String,
    pub dilations: [DilationMode; 2],
    pub iters: usize,
    pub metrics: Metrics,
    /// Per-layer sample std of the dilations after training.
    pub layer_std: Vec<f64>,
    pub seconds: f64,
}

impl AblationRow {
    pub fn learned(&self) -> bool {
        self.model.starts_with("learned")
    }

    fn describe(&self) -> String {
        let d: Vec<String> = self
            .dilations
            .iter()
            .map(|m| match m {
                DilationMode::Fixed(d) => format!("{d}"),
                DilationMode::Learnable { init: InitMode::Constant(v), range } => {
                    format!("learn({v};{}-{})", range.0, range.1)
                }
                DilationMode::Learnable { init: InitMode::Uniform, range } => {
                    format!("learn(uniform;{}-{})", range.0, range.1)
                }
            })
            .collect();
        d.join(" ")
    }

    pub fn csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.model,
            self.describe(),
            self.iters,
            m.pixel_acc,
            m.cls_acc,
            m.mean_iou,
            m.fw_iou
        )
    }
}

fn run_one(base: &RunConfig, seed: u64, model: &str, dilations: [DilationMode; 2], quiet: bool) -> CliResult<AblationRow> {
    let mut cfg = base.clone();
    cfg.run_id = format!("s{seed}_{model}");
    cfg.train.seed = seed;
    cfg.net.dilations = dilations;
    cfg.out_dir = base.out_dir.join(format!("seed{seed}")).join(model);
    cfg.checkpoint = None;
    let start = Instant::now();
    let out = train(&cfg, &TrainOptions { resume: None, stop_after: None, quiet: true })?;
    let metrics = out
        .last_metrics
        .ok_or_else(|| CliError::Runtime(format!("{}: no evaluation recorded", cfg.run_id)))?;
    let layer_std = dilated_layers(&out.net)
        .into_iter()
        .map(|i| out.net.convs()[i].state.dilation().sample_std())
        .collect();
    let row = AblationRow {
        seed,
        model: model.to_string(),
        dilations,
        iters: out.iter,
        metrics,
        layer_std,
        seconds: start.elapsed().as_secs_f64(),
    };
    if !quiet {
        eprintln!("{}  ({:.1}s, mIoU {:.4})", row.csv(), row.seconds, row.metrics.mean_iou);
    }
    Ok(row)
}

/// Trains every configuration for every seed and writes `ablation_summary.csv`.
pub fn ablation(base: &RunConfig, quiet: bool) -> CliResult<Vec<AblationRow>> {
    let a = &base.ablation;
    if a.seeds.is_empty() || a.fixed.is_empty() {
        return Err(CliError::Config("ablation needs seeds and fixed dilations".into()));
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| CliError::io(&base.out_dir, e))?;
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        for &d in &a.fixed {
            let mode = DilationMode::Fixed(d);
            rows.push(run_one(base, seed, &format!("fixed_{d}"), [mode, mode], quiet)?);
        }
        let constant = DilationMode::Learnable {
            init: InitMode::Constant(a.constant_init),
            range: a.range,
        };
        let uniform = DilationMode::Learnable {
            init: InitMode::Uniform,
            range: a.range,
        };
        rows.push(run_one(base, seed, "learned_constant", [constant, constant], quiet)?);
        rows.push(run_one(base, seed, "learned_uniform", [uniform, uniform], quiet)?);
        let ck = Checkpoint::load(
            &base.out_dir.join(format!("seed{seed}")).join("learned_constant").join("checkpoint.fdckpt"),
        )?;
        let (learned, _) = ck.restore(None)?;
        let means: Vec<f64> = dilated_layers(&learned)
            .into_iter()
            .map(|i| learned.convs()[i].state.dilation().mean())
            .collect();
        let refit = [DilationMode::Fixed(means[0]), DilationMode::Fixed(means[1])];
        rows.push(run_one(base, seed, "fixed_learned_mean", refit, quiet)?);
    }
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let path = base.out_dir.join("ablation_summary.csv");
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
