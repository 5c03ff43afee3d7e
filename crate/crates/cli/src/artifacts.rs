//! Sidecar metadata and file helpers shared by the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use latentwire::edgewire::{decode_frame, encode_frame, LatentFrame};
use serde::{Deserialize, Serialize};

use crate::config::read_file;

/// Written next to every artifact as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: String,
    pub config_hash: String,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(artifact: &Path, meta: &Meta) -> anyhow::Result<PathBuf> {
    let path = meta_path(artifact);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn read_meta(artifact: &Path) -> anyhow::Result<Meta> {
    let path = meta_path(artifact);
    let text = read_file(&path, "metadata sidecar")?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Labels and event groups carried by a latent file's sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentExtra {
    pub patient_id: String,
    pub latent_dim: usize,
    pub precision: String,
    pub labels: Vec<u8>,
    pub groups: Vec<u32>,
}

pub fn encode_latent_file(frames: &[LatentFrame]) -> Vec<u8> {
    frames.iter().flat_map(encode_frame).collect()
}

/// Splits a latent file into its encoded frames, validating each.
pub fn split_latent_file(bytes: &[u8]) -> anyhow::Result<Vec<(LatentFrame, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (frame, used) = decode_frame(&bytes[pos..]).with_context(|| format!("frame at byte {pos}"))?;
        out.push((frame, bytes[pos..pos + used].to_vec()));
        pos += used;
    }
    Ok(out)
}

pub fn read_latents(path: &Path) -> anyhow::Result<(Vec<LatentFrame>, LatentExtra)> {
    let bytes = read_file(path, "run `latentwire compress` first")?;
    let frames: Vec<LatentFrame> = split_latent_file(&bytes)?.into_iter().map(|(f, _)| f).collect();
    let meta = read_meta(path)?;
    let extra: LatentExtra = serde_json::from_value(meta.extra).context("latent metadata")?;
    if extra.labels.len() != frames.len() || extra.groups.len() != frames.len() {
        bail!(
            "latent metadata lists {} labels for {} frames",
            extra.labels.len(),
            frames.len()
        );
    }
    Ok((frames, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentwire::quant::Precision;

    #[test]
    fn latent_file_splits_back_into_frames() {
        let frames: Vec<LatentFrame> = (0..3)
            .map(|i| LatentFrame::new("p", i, Precision::F16, &[i as f32; 5]).unwrap())
            .collect();
        let bytes = encode_latent_file(&frames);
        let parts = split_latent_file(&bytes).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[2].0, frames[2]);
        assert_eq!(parts.iter().map(|p| p.1.len()).sum::<usize>(), bytes.len());
        assert!(split_latent_file(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn meta_path_appends_suffix() {
        assert_eq!(meta_path(Path::new("a/b.lwlf")), PathBuf::from("a/b.lwlf.meta.json"));
    }
}
