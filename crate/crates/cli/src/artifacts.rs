//! On-disk artifacts passed between commands.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use textseg::checkpoint::Checkpoint;
use textseg::labelcodec::{decode_gt, encode_gt, LabelMap, LabelMode};
use textseg::models::{Architecture, Model};
use textseg::{Error, Result, Tensor};

pub const MODEL_FILE: &str = "model.json";
pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const IOU_TABLE: &str = "iou_table.txt";
pub const IOU_REPORT: &str = "iou_report.jsonl";

const PROB_MAGIC: &[u8; 8] = b"TSPROB01";

pub fn pred_file(id: &str) -> String {
    format!("{id}_pred.png")
}

pub fn prob_file(id: &str) -> String {
    format!("{id}_prob.bin")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `TSPROB01`, then C, H, W as little-endian u32, then C·H·W f32 values.
pub fn prob_to_bytes(probs: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = probs.nchw()?;
    if n != 1 {
        return Err(Error::Shape(format!("probability maps hold one sample, got {n}")));
    }
    let mut out = Vec::with_capacity(20 + 4 * probs.len());
    out.extend_from_slice(PROB_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in probs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn prob_from_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let bad = |what: &str| Error::Usage(format!("{}: {what}", origin.display()));
    if bytes.len() < 20 || &bytes[..8] != PROB_MAGIC {
        return Err(bad("not a probability map"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if bytes.len() != 20 + 4 * c * h * w {
        return Err(bad("truncated probability map"));
    }
    let data = bytes[20..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Tensor::from_vec(&[1, c, h, w], data)
}

pub fn read_probs(path: &Path) -> Result<Tensor<f32>> {
    prob_from_bytes(&read_file(path)?, path)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    encode_gt(labels)
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_gt(&textseg::datasynth::read_rgb(path)?, LabelMode::Four)
}

pub fn write_model(dir: &Path, arch: &Architecture) -> Result<()> {
    let json = serde_json::to_string_pretty(arch).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join(MODEL_FILE), json.as_bytes())
}

/// The architecture sidecar and best checkpoint of a training run.
pub fn load_model(run: &Path) -> Result<Model<f32>> {
    let path = run.join(MODEL_FILE);
    let text = read_file(&path)?;
    let arch: Architecture = serde_json::from_slice(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut model = Model::new(&arch, 0)?;
    Checkpoint::load(&run.join(BEST_CHECKPOINT))?.load_into(model.store_mut())?;
    Ok(model)
}
