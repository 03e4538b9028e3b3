//! Checkpoint persistence.
//!
//! Layout: magic bytes `LANA`; 32-bit little-endian format version; 64-bit
//! little-endian byte length followed by UTF-8 metadata text (key=value
//! lines: the model shape, the ablation flags, and optional layer
//! statistics); then one record per tensor — 64-bit name length and UTF-8
//! name, 32-bit rank, one 64-bit extent per axis, and the raw 64-bit
//! little-endian float payload — until the file ends. Floats round-trip bit
//! for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AblationFlags, LanaHyper, LanaParams};
use crate::tensor::Array;

pub const MAGIC: [u8; 4] = *b"LANA";
pub const VERSION: u32 = 1;

const MAX_METADATA_BYTES: u64 = 1 << 24;
const MAX_NAME_BYTES: u64 = 4096;
const MAX_RANK: u32 = 8;
const MAX_TENSOR_ELEMS: u64 = 1 << 31;

/// Position of one model within a stack of ability layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMeta {
    pub index: usize,
    pub mu: f64,
    pub sigma_sq: f64,
}

/// Everything needed to rebuild and route a model besides its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub hyper: LanaHyper,
    pub flags: AblationFlags,
    pub layer: Option<LayerMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: LanaParams,
}

fn meta_to_text(meta: &CheckpointMeta) -> String {
    let h = &meta.hyper;
    let mut out = String::new();
    out.push_str(&format!("d_model={}\n", h.d_model));
    out.push_str(&format!("n_heads={}\n", h.n_heads));
    out.push_str(&format!("n_encoder_layers={}\n", h.n_encoder_layers));
    out.push_str(&format!("n_decoder_layers={}\n", h.n_decoder_layers));
    out.push_str(&format!("seq_len={}\n", h.seq_len));
    out.push_str(&format!("d_piv={}\n", h.d_piv));
    out.push_str(&format!("n_questions={}\n", h.n_questions));
    out.push_str(&format!("dropout={}\n", h.dropout));
    out.push_str(&format!("no_bm={}\n", meta.flags.no_bm));
    out.push_str(&format!("no_pma={}\n", meta.flags.no_pma));
    out.push_str(&format!("no_pcffn={}\n", meta.flags.no_pcffn));
    if let Some(layer) = &meta.layer {
        out.push_str(&format!("layer_index={}\n", layer.index));
        out.push_str(&format!("layer_mu={}\n", layer.mu));
        out.push_str(&format!("layer_sigma_sq={}\n", layer.sigma_sq));
    }
    out
}

fn meta_from_text(text: &str) -> Result<CheckpointMeta> {
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("metadata line {line:?} is not key=value")))?;
        if fields.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate metadata key {key:?}")));
        }
    }
    let mut take = |key: &str| -> Result<String> {
        fields
            .remove(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata is missing {key:?}")))
    };
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key}={value:?} does not parse")))
    }

    let hyper = LanaHyper {
        d_model: parse("d_model", &take("d_model")?)?,
        n_heads: parse("n_heads", &take("n_heads")?)?,
        n_encoder_layers: parse("n_encoder_layers", &take("n_encoder_layers")?)?,
        n_decoder_layers: parse("n_decoder_layers", &take("n_decoder_layers")?)?,
        seq_len: parse("seq_len", &take("seq_len")?)?,
        d_piv: parse("d_piv", &take("d_piv")?)?,
        n_questions: parse("n_questions", &take("n_questions")?)?,
        dropout: parse("dropout", &take("dropout")?)?,
    };
    let flags = AblationFlags {
        no_bm: parse("no_bm", &take("no_bm")?)?,
        no_pma: parse("no_pma", &take("no_pma")?)?,
        no_pcffn: parse("no_pcffn", &take("no_pcffn")?)?,
    };
    let layer = match (
        fields.remove("layer_index"),
        fields.remove("layer_mu"),
        fields.remove("layer_sigma_sq"),
    ) {
        (None, None, None) => None,
        (Some(i), Some(mu), Some(s)) => Some(LayerMeta {
            index: parse("layer_index", &i)?,
            mu: parse("layer_mu", &mu)?,
            sigma_sq: parse("layer_sigma_sq", &s)?,
        }),
        _ => {
            return Err(Error::Checkpoint(
                "layer metadata must give index, mu, and sigma_sq together".into(),
            ))
        }
    };
    if let Some(extra) = fields.keys().next() {
        return Err(Error::Checkpoint(format!("unknown metadata key {extra:?}")));
    }
    Ok(CheckpointMeta { hyper, flags, layer })
}

/// Writes `params` with its metadata to `path`, replacing any existing file.
pub fn save_checkpoint(params: &LanaParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let io_err = |source| Error::Io { path: path.display().to_string(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);

    put(&MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    let text = meta_to_text(meta);
    put(&(text.len() as u64).to_le_bytes())?;
    put(text.as_bytes())?;
    for (name, tensor) in params.iter() {
        put(&(name.len() as u64).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(tensor.rank() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            put(&(dim as u64).to_le_bytes())?;
        }
        for &x in tensor.data() {
            put(&x.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Checkpoint(format!("file ends in the middle of {what}"))
            } else {
                Error::Io { path: self.path.display().to_string(), source: e }
            }
        })
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// A name length of 0 bytes read (clean EOF) ends the tensor stream.
    fn next_name_len(&mut self) -> Result<Option<u64>> {
        let mut b = [0u8; 8];
        match self.inner.read(&mut b) {
            Ok(0) => return Ok(None),
            Ok(mut n) => {
                while n < 8 {
                    match self.inner.read(&mut b[n..]) {
                        Ok(0) => {
                            return Err(Error::Checkpoint(
                                "file ends in the middle of a tensor name length".into(),
                            ))
                        }
                        Ok(k) => n += k,
                        Err(e) => {
                            return Err(Error::Io {
                                path: self.path.display().to_string(),
                                source: e,
                            })
                        }
                    }
                }
            }
            Err(e) => return Err(Error::Io { path: self.path.display().to_string(), source: e }),
        }
        Ok(Some(u64::from_le_bytes(b)))
    }
}

/// Reads a checkpoint back, verifying the magic, the version, and that the
/// stored tensors exactly match what the recorded configuration expects.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let mut r = Reader { inner: BufReader::new(file), path };

    let mut magic = [0u8; 4];
    r.exact(&mut magic, "the magic bytes")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}; this is not a checkpoint file"
        )));
    }
    let version = r.u32("the format version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let meta_len = r.u64("the metadata length")?;
    if meta_len > MAX_METADATA_BYTES {
        return Err(Error::Checkpoint(format!("metadata length {meta_len} is implausible")));
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    r.exact(&mut meta_bytes, "the metadata text")?;
    let text = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Checkpoint("metadata is not valid UTF-8".into()))?;
    let meta = meta_from_text(&text)?;

    let mut map = BTreeMap::new();
    while let Some(name_len) = r.next_name_len()? {
        if name_len == 0 || name_len > MAX_NAME_BYTES {
            return Err(Error::Checkpoint(format!("tensor name length {name_len} is implausible")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.exact(&mut name_bytes, "a tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("a tensor name is not valid UTF-8".into()))?;
        let rank = r.u32(&format!("the rank of {name:?}"))?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor {name:?} claims rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for axis in 0..rank {
            let dim = r.u64(&format!("axis {axis} of {name:?}"))?;
            numel = numel
                .checked_mul(dim)
                .filter(|&n| n <= MAX_TENSOR_ELEMS)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor {name:?} claims an implausible size"))
                })?;
            shape.push(dim as usize);
        }
        let mut payload = vec![0u8; (numel as usize) * 8];
        r.exact(&mut payload, &format!("the payload of {name:?}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), Array::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("tensor {name:?} appears twice")));
        }
    }

    let params = LanaParams::from_map(&meta.hyper, &meta.flags, map)?;
    Ok(Checkpoint { meta, params })
}
