use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{IkdError, LadderConfig, LadderModels, LadderReport};
use crate::model::{checkpoint_save, Model};

/// Files excluded from the manifest because they vary between identical runs
/// (or are the manifest itself).
const UNHASHED: &[&str] = &["manifest.json", "timings.csv"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config: LadderConfig,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IkdError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn save_model(dir: &Path, rel: &str, model: &Model) -> Result<(), IkdError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    checkpoint_save(model, &path)?;
    Ok(())
}

/// Writes checkpoints, fitted maps, `report.json` and `timings.csv` under
/// `dir`. Call [`write_manifest`] once every other output is in place.
pub fn write_run(dir: &Path, report: &LadderReport, m0: &Model, models: &LadderModels) -> Result<(), IkdError> {
    fs::create_dir_all(dir)?;
    save_model(dir, "models/M0.ikdp", m0)?;
    for (method, ms) in &models.runs {
        for m in ms {
            save_model(dir, &format!("models/{method}/{}.ikdp", m.id), m)?;
        }
    }
    for (method, c) in &report.base.calibrated {
        write_json(&dir.join(format!("maps/{method}/M0_posthoc.json")), &c.map)?;
    }
    let mut timings = String::from("method,step,student,wall_time_s\n");
    for run in &report.runs {
        for s in &run.steps {
            if let Some(map) = &s.fitted_map {
                write_json(&dir.join(format!("maps/{}/{}_loss.json", run.method, s.student_id)), map)?;
            }
            if let Some(c) = &s.calibrated {
                write_json(&dir.join(format!("maps/{}/{}_posthoc.json", run.method, s.student_id)), &c.map)?;
            }
            timings.push_str(&format!("{},{},{},{:.3}\n", run.method, s.step, s.student_id, s.wall_time));
        }
    }
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("timings.csv"), timings)?;
    Ok(())
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// Hashes every file under `dir` into `manifest.json`.
pub fn write_manifest(dir: &Path, config: &LadderConfig) -> Result<Manifest, IkdError> {
    let mut paths = Vec::new();
    collect(dir, dir, &mut paths)?;
    let mut names: Vec<String> = paths
        .iter()
        .map(|p| p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/"))
        .filter(|p| !UNHASHED.contains(&p.as_str()))
        .collect();
    names.sort();
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let bytes = fs::read(dir.join(&name))?;
        files.push(ManifestEntry { bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)), path: name });
    }
    let manifest = Manifest { config: config.clone(), seed: config.seed, files };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
