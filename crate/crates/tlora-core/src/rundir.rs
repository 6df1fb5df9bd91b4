//! Run-directory layout and weight persistence.
//!
//! A finished run directory contains:
//!
//! ```text
//! run/
//!   config.json            resolved configuration, seeds, dataset fingerprint
//!   dataset.tsv            the exact training data (synthetic runs persist it)
//!   metrics.csv            epoch, train_loss, val_loss, val_acc, per-site columns
//!   model.bin              base weights, flat 64-bit little-endian floats
//!   model_manifest.json    parameter name -> shape, offset
//!   weights/
//!     manifest.json        adapter layout: site, method, r, component shapes/offsets
//!     epoch_000.bin ...    all adapter components per persisted epoch
//!   reports/               written later by analyze/compare
//! ```
//!
//! Weight files are raw little-endian f64 streams addressed by their JSON
//! manifests, so they stay byte-reproducible and trivially parseable.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterSet, Method, SiteMetrics};
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ── Flat weight files ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the flat file, in f64 elements.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub entries: Vec<ManifestEntry>,
    pub total_len: u64,
}

fn write_f64_stream<'a, W: Write>(
    out: &mut W,
    chunks: impl Iterator<Item = &'a [f64]>,
) -> std::io::Result<()> {
    for chunk in chunks {
        for v in chunk {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_f64_file(path: &Path, expected_len: u64) -> Result<Vec<f64>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected_bytes = expected_len * 8;
    if bytes.len() as u64 != expected_bytes {
        return Err(Error::Data(format!(
            "corrupt weights file {}: expected {expected_bytes} bytes, got {} (first bad offset {})",
            path.display(),
            bytes.len(),
            bytes.len().min(expected_bytes as usize)
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))
}

// ── Base-model persistence ────────────────────────────────────────────────

pub fn model_bin_path(dir: &Path) -> PathBuf {
    dir.join("model.bin")
}

pub fn model_manifest_path(dir: &Path) -> PathBuf {
    dir.join("model_manifest.json")
}

/// Persist every base parameter as one flat f64 file plus a manifest.
pub fn write_model(dir: &Path, model: &EncoderModel) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            offset,
        });
        offset += p.value.numel() as u64;
        blocks.push((p.name.clone(), p.value.shape.clone(), p.value.data.clone()));
    });
    let manifest = WeightsManifest {
        entries,
        total_len: offset,
    };
    let bin_path = model_bin_path(dir);
    let f = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(f);
    write_f64_stream(&mut w, blocks.iter().map(|(_, _, d)| d.as_slice()))
        .map_err(|e| Error::io(&bin_path, e))?;
    w.flush().map_err(|e| Error::io(&bin_path, e))?;
    write_json(&model_manifest_path(dir), &manifest)
}

/// Load the persisted base weights back as named tensors.
pub fn read_model_weights(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest: WeightsManifest = read_json(&model_manifest_path(dir))?;
    let data = read_f64_file(&model_bin_path(dir), manifest.total_len)?;
    let mut out = BTreeMap::new();
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let t = Tensor::new(data[start..start + numel].to_vec(), e.shape.clone())?;
        out.insert(e.name.clone(), t);
    }
    Ok(out)
}

// ── Adapter persistence ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterSiteEntry {
    pub site: String,
    pub method: Method,
    pub r: usize,
    /// Component label ("a", "b", "c", "alpha" / "down", "up") -> shape.
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Component label -> offset into each epoch file, in f64 elements.
    pub offsets: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub method: Method,
    pub rank: usize,
    pub sites: Vec<AdapterSiteEntry>,
    pub total_len: u64,
}

pub fn weights_dir(dir: &Path) -> PathBuf {
    dir.join("weights")
}

pub fn adapter_manifest_path(dir: &Path) -> PathBuf {
    weights_dir(dir).join("manifest.json")
}

pub fn epoch_bin_path(dir: &Path, epoch: usize) -> PathBuf {
    weights_dir(dir).join(format!("epoch_{epoch:03}.bin"))
}

/// Describe the epoch-file layout of an adapter set.
pub fn adapter_manifest(set: &AdapterSet) -> AdapterManifest {
    let mut sites = Vec::new();
    let mut offset = 0u64;
    for sa in set.sites() {
        let mut shapes = BTreeMap::new();
        let mut offsets = BTreeMap::new();
        for (label, p) in sa.components() {
            shapes.insert(label.to_string(), p.value.shape.clone());
            offsets.insert(label.to_string(), offset);
            offset += p.value.numel() as u64;
        }
        sites.push(AdapterSiteEntry {
            site: sa.site().to_string(),
            method: set.method,
            r: set.rank,
            shapes,
            offsets,
        });
    }
    AdapterManifest {
        method: set.method,
        rank: set.rank,
        sites,
        total_len: offset,
    }
}

pub fn write_adapter_manifest(dir: &Path, set: &AdapterSet) -> Result<AdapterManifest> {
    let m = adapter_manifest(set);
    std::fs::create_dir_all(weights_dir(dir)).map_err(|e| Error::io(weights_dir(dir), e))?;
    write_json(&adapter_manifest_path(dir), &m)?;
    Ok(m)
}

pub fn read_adapter_manifest(dir: &Path) -> Result<AdapterManifest> {
    read_json(&adapter_manifest_path(dir))
}

/// Persist every adapter component (fixed and trainable alike) for one epoch.
pub fn write_adapter_epoch(dir: &Path, set: &AdapterSet, epoch: usize) -> Result<()> {
    let path = epoch_bin_path(dir, epoch);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for sa in set.sites() {
        write_f64_stream(&mut w, sa.components().iter().map(|(_, p)| p.value.data.as_slice()))
            .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Load one epoch's adapter components keyed by (site, component label).
pub fn read_adapter_epoch(
    dir: &Path,
    manifest: &AdapterManifest,
    epoch: usize,
) -> Result<BTreeMap<(String, String), Tensor>> {
    let path = epoch_bin_path(dir, epoch);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing weights for epoch {epoch}"),
            ),
        ));
    }
    let data = read_f64_file(&path, manifest.total_len)?;
    let mut out = BTreeMap::new();
    for site in &manifest.sites {
        for (label, shape) in &site.shapes {
            let offset = site.offsets[label] as usize;
            let numel: usize = shape.iter().product();
            let t = Tensor::new(data[offset..offset + numel].to_vec(), shape.clone())?;
            out.insert((site.site.clone(), label.clone()), t);
        }
    }
    Ok(out)
}

/// Sorted epoch indices that have a persisted weights file.
pub fn list_epochs(dir: &Path) -> Result<Vec<usize>> {
    let wd = weights_dir(dir);
    let mut out = Vec::new();
    let rd = std::fs::read_dir(&wd).map_err(|e| Error::io(&wd, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(&wd, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".bin"))
        {
            if let Ok(e) = num.parse::<usize>() {
                out.push(e);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

// ── Metrics CSV ───────────────────────────────────────────────────────────

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

/// Streaming metrics writer; one row per epoch, flushed as it goes so a
/// diverged run still leaves a usable file behind.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    n_sites: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, site_names: &[String]) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        let mut header = String::from("epoch,train_loss,val_loss,val_acc");
        for s in site_names {
            for metric in ["b_norm", "alpha", "a_norm", "c_norm"] {
                header.push_str(&format!(",{metric}.{s}"));
            }
        }
        header.push('\n');
        out.write_all(header.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out,
            path: path.to_path_buf(),
            n_sites: site_names.len(),
        })
    }

    pub fn write_row(
        &mut self,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        val_acc: f64,
        sites: &[(String, SiteMetrics)],
    ) -> Result<()> {
        if sites.len() != self.n_sites {
            return Err(Error::Usage(format!(
                "metrics row has {} sites, header has {}",
                sites.len(),
                self.n_sites
            )));
        }
        let mut row = format!("{epoch},{train_loss},{val_loss},{val_acc}");
        for (_, m) in sites {
            row.push_str(&format!(",{},{},{},{}", m.b_norm, m.alpha, m.a_norm, m.c_norm));
        }
        row.push('\n');
        self.out
            .write_all(row.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Parsed metrics.csv.
#[derive(Clone, Debug)]
pub struct MetricsTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let headers: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty metrics file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|e| {
                    Error::Data(format!("{} line {}: bad number '{v}': {e}", path.display(), i + 2))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != headers.len() {
            return Err(Error::Data(format!(
                "{} line {}: {} fields, header has {}",
                path.display(),
                i + 2,
                row.len(),
                headers.len()
            )));
        }
        rows.push(row);
    }
    Ok(MetricsTable { headers, rows })
}

// ── Run manifest (config.json) ────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    /// "synth" or "tsv".
    pub kind: String,
    pub synth: Option<SynthSpec>,
    pub tsv_path: Option<String>,
    /// SHA-256 of the dataset TSV bytes; compare refuses mismatches.
    pub fingerprint_sha256: String,
}

/// The resolved, self-describing run configuration. Together with the tool
/// version it reproduces the run byte-for-byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// "tlora", "lora" or "frozen".
    pub method: String,
    pub rank: Option<usize>,
    pub seed: u64,
    /// Derived per-component seeds, recorded for transparency.
    pub seed_derivations: BTreeMap<String, u64>,
    pub dataset: DatasetInfo,
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub train: TrainConfig,
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.json")
}

pub fn write_config(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&config_path(dir), manifest)
}

pub fn read_config(dir: &Path) -> Result<RunManifest> {
    read_json(&config_path(dir))
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join("dataset.tsv")
}

pub fn reports_dir(dir: &Path) -> PathBuf {
    dir.join("reports")
}

/// Marker dropped while a directory is being written; its absence certifies
/// a complete run.
pub fn incomplete_marker(dir: &Path) -> PathBuf {
    dir.join(".incomplete")
}

pub fn mark_incomplete(dir: &Path) -> Result<()> {
    let p = incomplete_marker(dir);
    std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))
}

pub fn clear_incomplete(dir: &Path) -> Result<()> {
    let p = incomplete_marker(dir);
    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))
}

/// Convenience bundle for loading a finished run.
pub struct RunData {
    pub dir: PathBuf,
    pub config: RunManifest,
    pub adapter_manifest: Option<AdapterManifest>,
    pub epochs: Vec<usize>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = read_config(dir)?;
        let (adapter_manifest, epochs) = if config.adapter.is_some() {
            (Some(read_adapter_manifest(dir)?), list_epochs(dir)?)
        } else {
            (None, Vec::new())
        };
        Ok(RunData {
            dir: dir.to_path_buf(),
            config,
            adapter_manifest,
            epochs,
        })
    }

    pub fn epoch_weights(&self, epoch: usize) -> Result<BTreeMap<(String, String), Tensor>> {
        let manifest = self.adapter_manifest.as_ref().ok_or_else(|| {
            Error::Usage("run has no adapters (frozen method)".into())
        })?;
        read_adapter_epoch(&self.dir, manifest, epoch)
    }

    pub fn final_epoch(&self) -> Option<usize> {
        self.epochs.last().copied()
    }

    /// Fixed LoRA scale α₀/r of this run; 1.0 for TLoRA/frozen runs.
    pub fn lora_scaling(&self) -> f64 {
        match &self.config.adapter {
            Some(a) if a.method == Method::Lora => a.effective_lora_alpha() / a.rank as f64,
            _ => 1.0,
        }
    }

    /// Dense per-site updates at one epoch.
    pub fn delta_ws(&self, epoch: usize) -> Result<Vec<(String, Tensor)>> {
        let manifest = self
            .adapter_manifest
            .as_ref()
            .ok_or_else(|| Error::Usage("run has no adapters (frozen method)".into()))?;
        let weights = self.epoch_weights(epoch)?;
        delta_w_from_weights(manifest, &weights, self.lora_scaling())
    }
}

/// Materialized dense updates per site at one epoch, reconstructed from
/// persisted components. `lora_scaling` is the fixed α₀/r of the run (unused
/// for TLoRA, whose α is itself a persisted component).
pub fn delta_w_from_weights(
    manifest: &AdapterManifest,
    weights: &BTreeMap<(String, String), Tensor>,
    lora_scaling: f64,
) -> Result<Vec<(String, Tensor)>> {
    use crate::tensor::matops;
    let mut out = Vec::new();
    for site in &manifest.sites {
        let get = |label: &str| -> Result<&Tensor> {
            weights.get(&(site.site.clone(), label.to_string())).ok_or_else(|| {
                Error::Data(format!("site {} missing component '{label}'", site.site))
            })
        };
        let delta = match site.method {
            Method::Tlora => {
                let a = get("a")?;
                let b = get("b")?;
                let c = get("c")?;
                let alpha = get("alpha")?.data[0];
                let (d, r) = (a.shape[0], a.shape[1]);
                let k = c.shape[1];
                let bc = matops::mm(&b.data, &c.data, r, r, k);
                let mut abc = matops::mm(&a.data, &bc, d, r, k);
                for v in &mut abc {
                    *v *= alpha;
                }
                Tensor::new(abc, vec![d, k])?
            }
            Method::Lora => {
                let down = get("down")?;
                let up = get("up")?;
                let (d, r) = (up.shape[0], up.shape[1]);
                let k = down.shape[1];
                let mut ud = matops::mm(&up.data, &down.data, d, r, k);
                for v in &mut ud {
                    *v *= lora_scaling;
                }
                Tensor::new(ud, vec![d, k])?
            }
        };
        out.push((site.site.clone(), delta));
    }
    Ok(out)
}

/// Create the run directory skeleton (fails if the directory exists and is
/// non-empty).
pub fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            return Err(Error::Usage(format!(
                "run directory {} already exists and is not empty",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(weights_dir(dir)).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach_adapters, AdaptedModel, Method};
    use crate::model::{build_model, ModelConfig};

    fn tlora_model() -> AdaptedModel {
        let mut m = build_model(&ModelConfig::toy(16), 5).unwrap();
        m.freeze_all();
        let mut cfg = AdapterConfig::new(Method::Tlora);
        cfg.rank = 2;
        attach_adapters(m, &cfg, 6).unwrap()
    }

    #[test]
    fn model_weights_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&ModelConfig::toy(16), 3).unwrap();
        write_model(dir.path(), &m).unwrap();
        let loaded = read_model_weights(dir.path()).unwrap();
        let mut checked = 0;
        m.visit_params(&mut |p| {
            let t = &loaded[&p.name];
            assert!(t.bits_eq(&p.value), "{} differs", p.name);
            checked += 1;
        });
        assert_eq!(checked, loaded.len());
    }

    #[test]
    fn adapter_epoch_roundtrip_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let adapted = tlora_model();
        let set = adapted.adapters.as_ref().unwrap();
        let manifest = write_adapter_manifest(dir.path(), set).unwrap();
        write_adapter_epoch(dir.path(), set, 0).unwrap();
        write_adapter_epoch(dir.path(), set, 3).unwrap();
        assert_eq!(list_epochs(dir.path()).unwrap(), vec![0, 3]);

        let loaded = read_adapter_epoch(dir.path(), &manifest, 0).unwrap();
        for sa in set.sites() {
            for (label, p) in sa.components() {
                let t = &loaded[&(sa.site().to_string(), label.to_string())];
                assert!(t.bits_eq(&p.value));
            }
        }
    }

    #[test]
    fn truncated_weights_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let adapted = tlora_model();
        let set = adapted.adapters.as_ref().unwrap();
        let manifest = write_adapter_manifest(dir.path(), set).unwrap();
        write_adapter_epoch(dir.path(), set, 0).unwrap();
        let path = epoch_bin_path(dir.path(), 0);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = read_adapter_epoch(dir.path(), &manifest, 0).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }

    #[test]
    fn missing_epoch_names_the_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let adapted = tlora_model();
        let set = adapted.adapters.as_ref().unwrap();
        let manifest = write_adapter_manifest(dir.path(), set).unwrap();
        let err = read_adapter_epoch(dir.path(), &manifest, 7).unwrap_err();
        assert!(err.to_string().contains("epoch 7"), "{err}");
    }

    #[test]
    fn metrics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let sites = vec!["layer0.q".to_string(), "layer0.v".to_string()];
        let mut w = MetricsWriter::create(&path, &sites).unwrap();
        let m = SiteMetrics {
            b_norm: 0.0,
            alpha: 1.0,
            a_norm: 2.5,
            c_norm: 1.25,
        };
        w.write_row(
            0,
            0.6931471805599453,
            0.7,
            0.5,
            &[("layer0.q".into(), m.clone()), ("layer0.v".into(), m)],
        )
        .unwrap();
        drop(w);
        let table = read_metrics(&path).unwrap();
        assert_eq!(table.headers.len(), 4 + 2 * 4);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.column("train_loss").unwrap(), vec![0.6931471805599453]);
        assert_eq!(table.column("alpha.layer0.v").unwrap(), vec![1.0]);
    }

    #[test]
    fn sha256_reference_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
