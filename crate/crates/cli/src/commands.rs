//! Subcommand bodies shared by the binary and the integration tests.

use std::fs;
use std::path::Path;

use fracdil_core::gradcheck::{check_layer, GradReport, LayerCheckConfig};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::materialize;
use crate::error::{CliError, CliResult};
use crate::train::export_dilations;

pub const EXPORT_HEADER: &str = "layer,channel,dilation";

pub fn gen_data(cfg: &RunConfig) -> CliResult<usize> {
    materialize(&cfg.data.dir, &cfg.data.scene, cfg.data.split)
}

/// The default layer configuration followed by `random_configs` random ones.
pub fn gradcheck(cfg: &RunConfig) -> CliResult<Vec<(String, GradReport)>> {
    let g = &cfg.gradcheck;
    let mut cases = vec![("default".to_string(), LayerCheckConfig::default(), g.seed)];
    for i in 0..g.random_configs as u64 {
        let seed = g.seed.wrapping_add(i + 1);
        cases.push((format!("random{i}"), LayerCheckConfig::random(seed), seed));
    }
    cases
        .into_iter()
        .map(|(name, layer, seed)| Ok((name, check_layer(&layer, seed, g.tolerance, g.step)?)))
        .collect()
}

pub fn gradcheck_csv(reports: &[(String, GradReport)]) -> String {
    let mut out = format!("config,{}\n", GradReport::CSV_HEADER);
    for (name, r) in reports {
        for line in r.to_csv().lines().skip(1) {
            out.push_str(&format!("{name},{line}\n"));
        }
    }
    out
}

pub fn export_csv(checkpoint: &Path) -> CliResult<String> {
    let (net, _) = Checkpoint::load(checkpoint)?.restore(None)?;
    let mut out = format!("{EXPORT_HEADER}\n");
    for (layer, channel, d) in export_dilations(&net) {
        out.push_str(&format!("{layer},{channel},{d}\n"));
    }
    Ok(out)
}

pub fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
