//! On-disk exchange formats: ability/difficulty tables and the ensemble
//! manifest.
//!
//! Floats are written with Rust's shortest-round-trip formatting, so a write
//! followed by a read reproduces every value bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::LayerSpec;

fn write_kv_csv(path: &Path, header: &str, map: &BTreeMap<u32, f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "{header}").map_err(io_err)?;
    for (id, value) in map {
        writeln!(out, "{id},{value}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn read_kv_csv(path: &Path, header: &str) -> Result<BTreeMap<u32, f64>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == header => {}
        Some((_, first)) => {
            return Err(Error::parse(1, format!("expected header {header:?}, got {first:?}")));
        }
        None => return Err(Error::parse(1, format!("empty file, expected header {header:?}"))),
    }
    let mut map = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let (id_text, value_text) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(line_no, format!("expected id,value, got {line:?}")))?;
        let id: u32 = id_text
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad id {id_text:?}")))?;
        let value: f64 = value_text
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad value {value_text:?}")))?;
        if !value.is_finite() {
            return Err(Error::parse(line_no, format!("non-finite value {value_text:?}")));
        }
        if map.insert(id, value).is_some() {
            return Err(Error::parse(line_no, format!("duplicate id {id}")));
        }
    }
    Ok(map)
}

/// Writes one `student_id,ability` row per student, ascending by id.
pub fn write_abilities_csv(path: &Path, abilities: &BTreeMap<u32, f64>) -> Result<()> {
    write_kv_csv(path, "student_id,ability", abilities)
}

/// Reads a file produced by [`write_abilities_csv`].
pub fn read_abilities_csv(path: &Path) -> Result<BTreeMap<u32, f64>> {
    read_kv_csv(path, "student_id,ability")
}

/// Writes one `question_id,difficulty` row per question, ascending by id.
pub fn write_difficulties_csv(path: &Path, difficulties: &BTreeMap<u32, f64>) -> Result<()> {
    write_kv_csv(path, "question_id,difficulty", difficulties)
}

/// Reads a file produced by [`write_difficulties_csv`].
pub fn read_difficulties_csv(path: &Path) -> Result<BTreeMap<u32, f64>> {
    read_kv_csv(path, "question_id,difficulty")
}

/// A saved ensemble: the layer spec plus one checkpoint path per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleManifest {
    pub spec: LayerSpec,
    /// Checkpoint file per layer. Relative paths are resolved against the
    /// manifest's directory when read back.
    pub model_paths: Vec<PathBuf>,
}

/// Writes the ensemble manifest as `key=value` lines: the layer-spec scalars,
/// per-layer means and variances, and one checkpoint path per layer. Paths
/// are written as given; keep them relative to the manifest's directory for
/// a relocatable bundle.
pub fn write_manifest(path: &Path, spec: &LayerSpec, model_paths: &[PathBuf]) -> Result<()> {
    spec.validate()?;
    if model_paths.len() != spec.n_layers {
        return Err(Error::contract(format!(
            "{} checkpoint paths for {} layers",
            model_paths.len(),
            spec.n_layers
        )));
    }
    let mut text = String::new();
    text.push_str(&format!("n_layers={}\n", spec.n_layers));
    text.push_str(&format!("tau={}\n", spec.tau));
    text.push_str(&format!("mu_a={}\n", spec.mu_a));
    text.push_str(&format!("sigma_a_sq={}\n", spec.sigma_a_sq));
    for (i, mu) in spec.mu.iter().enumerate() {
        text.push_str(&format!("mu.{i}={mu}\n"));
    }
    for (i, var) in spec.sigma_sq.iter().enumerate() {
        text.push_str(&format!("sigma_sq.{i}={var}\n"));
    }
    for (i, p) in model_paths.iter().enumerate() {
        let p = p
            .to_str()
            .ok_or_else(|| Error::contract(format!("checkpoint path {i} is not valid UTF-8")))?;
        text.push_str(&format!("model.{i}={p}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a manifest written by [`write_manifest`], resolving relative
/// checkpoint paths against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<EnsembleManifest> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(line_no, format!("expected key=value, got {line:?}")))?;
        if pairs.insert(key, (line_no, value)).is_some() {
            return Err(Error::parse(line_no, format!("duplicate key {key:?}")));
        }
    }

    let mut take = |key: &str| -> Result<(usize, &str)> {
        pairs
            .remove(key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing key {key:?}")))
    };
    let parse_f64 = |key: &str, (line_no, value): (usize, &str)| -> Result<f64> {
        value
            .parse::<f64>()
            .map_err(|_| Error::parse(line_no, format!("bad number for {key}: {value:?}")))
    };

    let (line_no, n_layers_text) = take("n_layers")?;
    let n_layers: usize = n_layers_text
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad layer count {n_layers_text:?}")))?;
    let tau = parse_f64("tau", take("tau")?)?;
    let mu_a = parse_f64("mu_a", take("mu_a")?)?;
    let sigma_a_sq = parse_f64("sigma_a_sq", take("sigma_a_sq")?)?;

    let mut mu = Vec::with_capacity(n_layers);
    let mut sigma_sq = Vec::with_capacity(n_layers);
    let mut model_paths = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        mu.push(parse_f64(&format!("mu.{i}"), take(&format!("mu.{i}"))?)?);
        sigma_sq.push(parse_f64(&format!("sigma_sq.{i}"), take(&format!("sigma_sq.{i}"))?)?);
        let (_, p) = take(&format!("model.{i}"))?;
        model_paths.push(PathBuf::from(p));
    }
    if let Some((key, (line_no, _))) = pairs.iter().next() {
        return Err(Error::parse(*line_no, format!("unknown key {key:?}")));
    }

    let spec = LayerSpec { n_layers, tau, mu_a, sigma_a_sq, mu, sigma_sq };
    spec.validate()?;

    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let model_paths = model_paths
        .into_iter()
        .map(|p| if p.is_absolute() { p } else { base.join(p) })
        .collect();
    Ok(EnsembleManifest { spec, model_paths })
}
