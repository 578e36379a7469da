//! Materialized datasets: one FDSEG1 file per scene plus one manifest per split.

use std::fs;
use std::path::{Path, PathBuf};

use fracdil_core::scenes::{decode, encode, generate, make_split, LabeledScene, SceneSpec, SplitCounts};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const DESCRIPTOR: &str = "dataset.json";

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    scene: SceneSpec,
    split: SplitCounts,
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.txt"))
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if fs::read(path).map(|old| old == bytes).unwrap_or(false) {
        return Ok(());
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes every scene, the three manifests and a descriptor echoing the spec.
/// Returns the number of scene files.
pub fn materialize(dir: &Path, spec: &SceneSpec, counts: SplitCounts) -> CliResult<usize> {
    let split = make_split(counts).map_err(|e| CliError::Config(e.to_string()))?;
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| CliError::io(&scene_dir, e))?;
    let mut written = 0;
    for (name, range) in split.named() {
        let mut manifest = String::new();
        for index in range {
            let rel = format!("scenes/scene_{index:05}.fdseg");
            write_if_changed(&dir.join(&rel), &encode(&generate(spec, index)))?;
            manifest.push_str(&rel);
            manifest.push('\n');
            written += 1;
        }
        write_if_changed(&manifest_path(dir, name), manifest.as_bytes())?;
    }
    let desc = Descriptor {
        scene: spec.clone(),
        split: counts,
    };
    let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    write_if_changed(&dir.join(DESCRIPTOR), json.as_bytes())?;
    Ok(written)
}

pub fn read_scene(path: &Path) -> CliResult<LabeledScene> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode(&bytes, &path.display().to_string())?)
}

/// Loads the scenes listed in a split manifest. Paths are relative to `dir`.
pub fn load_split(dir: &Path, split: &str, num_classes: usize) -> CliResult<Vec<LabeledScene>> {
    let manifest = manifest_path(dir, split);
    let text = fs::read_to_string(&manifest).map_err(|e| {
        CliError::Runtime(format!(
            "{}: {e} (materialize the dataset with gen-data first)",
            manifest.display()
        ))
    })?;
    let mut scenes = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let path = dir.join(line.trim());
        let scene = read_scene(&path)?;
        if scene.num_classes != num_classes {
            return Err(CliError::Runtime(format!(
                "{}: scene has {} classes, network expects {num_classes}",
                path.display(),
                scene.num_classes
            )));
        }
        scenes.push(scene);
    }
    if scenes.is_empty() {
        return Err(CliError::Runtime(format!("{}: empty manifest", manifest.display())));
    }
    Ok(scenes)
}

/// Fails when a materialized dataset was produced from a different spec.
pub fn check_descriptor(dir: &Path, spec: &SceneSpec, counts: SplitCounts) -> CliResult<()> {
    let path = dir.join(DESCRIPTOR);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(());
    };
    let desc: Descriptor = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if desc.scene != *spec || desc.split != counts {
        return Err(CliError::Runtime(format!(
            "{}: dataset was generated from a different scene spec or split",
            path.display()
        )));
    }
    Ok(())
}
