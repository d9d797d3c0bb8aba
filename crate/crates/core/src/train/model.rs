//! Versioned binary model container: tree hash, backbone shape,
//! parameters, and plane weights.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::backbone::{BackboneShape, ToyBackbone};
use crate::fusion::PlaneWeights;
use crate::hierarchy::LabelTree;

const MAGIC: &[u8; 4] = b"BPMD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    BadVersion(u32),
    #[error("model was trained on a different tree (hash mismatch)")]
    TreeHashMismatch,
    #[error("model file is truncated or inconsistent")]
    Truncated,
}

/// SHA-256 of the tree's canonical serialization.
pub fn tree_hash(tree: &LabelTree) -> [u8; 32] {
    let digest = Sha256::digest(tree.canonical_text().as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn save_model(
    path: impl AsRef<Path>,
    backbone: &ToyBackbone,
    weights: &PlaneWeights,
    tree: &LabelTree,
) -> Result<(), ModelIoError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&tree_hash(tree));
    buf.extend_from_slice(&(backbone.shape.kernel as u32).to_le_bytes());
    buf.extend_from_slice(&(backbone.shape.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(backbone.shape.n_nodes as u32).to_le_bytes());
    for p in &backbone.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    for p in &weights.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| ModelIoError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&buf).map_err(|e| ModelIoError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Load a model and check it against the tree it will be applied with.
pub fn load_model(
    path: impl AsRef<Path>,
    tree: &LabelTree,
) -> Result<(ToyBackbone, PlaneWeights), ModelIoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelIoError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    if bytes.len() < 4 + 4 + 32 + 12 {
        return Err(ModelIoError::Truncated);
    }
    if &bytes[0..4] != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ModelIoError::BadVersion(version));
    }
    if bytes[8..40] != tree_hash(tree) {
        return Err(ModelIoError::TreeHashMismatch);
    }
    let kernel = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
    let n_nodes = u32::from_le_bytes(bytes[48..52].try_into().unwrap()) as usize;
    let shape = BackboneShape::new(kernel, channels, n_nodes);
    let need = 52 + (shape.param_count() + 3) * 8;
    if bytes.len() != need {
        return Err(ModelIoError::Truncated);
    }
    let mut values = bytes[52..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params: Vec<f64> = values.by_ref().take(shape.param_count()).collect();
    let wp: Vec<f64> = values.collect();
    Ok((
        ToyBackbone { shape, params },
        PlaneWeights {
            params: [wp[0], wp[1], wp[2]],
        },
    ))
}
