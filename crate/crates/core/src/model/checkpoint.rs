//! Self-contained checkpoints: a JSON header line (kind, encoder config,
//! vocabulary, parameter manifest) followed by raw little-endian f64 data
//! in manifest order. Round-trips are bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::math::Param;
use super::{EncoderConfig, QaModel, SelectorModel};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

const FORMAT: &str = "evqa-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Qa,
    Selector,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: CheckpointKind,
    config: EncoderConfig,
    vocab: Vec<String>,
    params: Vec<ParamMeta>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    params: &[(String, &Param)],
) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        kind,
        config: cfg.clone(),
        vocab: Vec::from(vocab.clone()),
        params: params
            .iter()
            .map(|(n, p)| ParamMeta { name: n.clone(), rows: p.v.nrows(), cols: p.v.ncols() })
            .collect(),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let head =
        serde_json::to_string(&header).map_err(|e| bad(path, format!("header encode: {e}")))?;
    w.write_all(head.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for (_, p) in params {
        for &v in p.v.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub enum LoadedModel {
    Qa(Box<QaModel>, Vocabulary),
    Selector(Box<SelectorModel>, Vocabulary),
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad(path, "missing header line"))?;
    let header: Header = serde_json::from_slice(&raw[..nl])
        .map_err(|e| bad(path, format!("header decode: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(path, format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(path, format!("unsupported version {}", header.version)));
    }
    let vocab = Vocabulary::from(header.vocab);
    if header.config.vocab_size != vocab.len() {
        return Err(bad(path, "config vocab_size does not match embedded vocabulary"));
    }

    let data = &raw[nl + 1..];
    let expected: usize = header.params.iter().map(|m| m.rows * m.cols * 8).sum();
    if data.len() != expected {
        return Err(bad(path, format!("expected {expected} data bytes, found {}", data.len())));
    }

    let fill = |params: &mut [(String, &mut Param)]| -> Result<()> {
        if params.len() != header.params.len() {
            return Err(bad(path, "parameter count mismatch"));
        }
        let mut off = 0usize;
        for (meta, (name, p)) in header.params.iter().zip(params.iter_mut()) {
            if &meta.name != name {
                return Err(bad(path, format!("parameter order mismatch at `{}`", meta.name)));
            }
            if (meta.rows, meta.cols) != (p.v.nrows(), p.v.ncols()) {
                return Err(bad(path, format!("shape mismatch for `{}`", meta.name)));
            }
            for v in p.v.iter_mut() {
                let mut b = [0u8; 8];
                b.copy_from_slice(&data[off..off + 8]);
                *v = f64::from_le_bytes(b);
                off += 8;
            }
        }
        Ok(())
    };

    match header.kind {
        CheckpointKind::Qa => {
            let mut model = QaModel::new(&header.config, 0)?;
            fill(&mut model.params_mut())?;
            model.zero_grad();
            Ok(LoadedModel::Qa(Box::new(model), vocab))
        }
        CheckpointKind::Selector => {
            let mut model = SelectorModel::new(&header.config, 0)?;
            fill(&mut model.params_mut())?;
            model.zero_grad();
            Ok(LoadedModel::Selector(Box::new(model), vocab))
        }
    }
}
