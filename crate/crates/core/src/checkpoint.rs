//! Portable checkpoint files.
//!
//! Layout: the 8-byte magic `ILFCKPT1`, a little-endian `u64` header length,
//! the JSON header, then zero padding and the little-endian `f32` arrays.
//! Every array starts at a 64-byte aligned absolute file offset recorded in
//! the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::ilf::FeedbackState;
use crate::numerics::Tensor;
use crate::schedule::LoopRange;

pub const MAGIC: &[u8; 8] = b"ILFCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const FEEDBACK_PREFIX: &str = "feedback.";
/// Feedback checkpoints record the backbone parameter hash under this key.
pub const BACKBONE_HASH_KEY: &str = "backbone_params_sha256";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: BTreeMap<String, Tensor>,
}

fn align(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of any serializable config, via its JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

/// Hash over parameter names, shapes and values.
pub fn params_hash(params: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Serializes `arrays` (name order preserved) to bytes.
pub fn encode(config_hash: &str, meta: BTreeMap<String, String>, arrays: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    if let Some((name, _)) = arrays.iter().find(|(n, _)| !seen.insert(n.as_str())) {
        return Err(Error::invalid(format!("duplicate array name {name}")));
    }
    let mut header = Header {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        meta,
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: 0,
            })
            .collect(),
    };
    // offsets are absolute, so the header length and offsets are solved together
    let mut payload_start = 0;
    let json = loop {
        let mut at = payload_start;
        for (entry, (_, t)) in header.arrays.iter_mut().zip(arrays) {
            entry.offset = at;
            at = align(at + 4 * t.numel() as u64);
        }
        let json = serde_json::to_vec(&header).expect("header serializes");
        let needed = align(16 + json.len() as u64);
        if needed == payload_start {
            break json;
        }
        payload_start = needed;
    };
    let mut out = Vec::with_capacity(payload_start as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (entry, (_, t)) in header.arrays.iter().zip(arrays) {
        out.resize(entry.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..hend as usize]).map_err(|e| format_err(path, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.arrays.len());
    let mut arrays = BTreeMap::new();
    for e in &header.arrays {
        if e.dtype != "f32" {
            return Err(format_err(path, format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset % ALIGN != 0 || e.offset < hend {
            return Err(format_err(path, format!("{}: misplaced offset {}", e.name, e.offset)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| format_err(path, format!("{}: shape overflows", e.name)))?;
        let end = numel
            .checked_mul(4)
            .and_then(|n| n.checked_add(e.offset))
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| format_err(path, format!("{}: truncated payload", e.name)))?;
        spans.push((e.offset, end, &e.name));
        let data = bytes[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if arrays.insert(e.name.clone(), Tensor::new(&e.shape, data)?).is_some() {
            return Err(format_err(path, format!("duplicate array {}", e.name)));
        }
    }
    spans.sort_unstable();
    if let Some(w) = spans.windows(2).find(|w| w[0].1 > w[1].0) {
        return Err(format_err(path, format!("arrays {} and {} overlap", w[0].2, w[1].2)));
    }
    Ok(Checkpoint { header, arrays })
}

pub fn save(
    path: &Path,
    config_hash: &str,
    meta: BTreeMap<String, String>,
    arrays: &[(String, &Tensor)],
) -> Result<()> {
    let bytes = encode(config_hash, meta, arrays)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}

fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

/// Copies `prefix`-named arrays into `params`, requiring an exact name and
/// shape match in both directions.
fn restore(ckpt: &Checkpoint, prefix: &str, params: Vec<(String, &mut Tensor)>, path: &Path) -> Result<()> {
    let expected = params.len();
    for (name, p) in params {
        let key = format!("{prefix}{name}");
        let src = ckpt
            .arrays
            .get(&key)
            .ok_or_else(|| format_err(path, format!("missing array {key}")))?;
        if src.shape() != p.shape() {
            return Err(format_err(
                path,
                format!("{key}: shape {:?}, expected {:?}", src.shape(), p.shape()),
            ));
        }
        p.data_mut().copy_from_slice(src.data());
    }
    let present = ckpt.arrays.keys().filter(|k| k.starts_with(prefix)).count();
    if present != expected {
        return Err(format_err(
            path,
            format!("{present} {prefix}* arrays, expected {expected}"),
        ));
    }
    Ok(())
}

pub fn backbone_params_hash(backbone: &Backbone) -> String {
    params_hash(&backbone.named_params())
}

pub fn save_backbone(path: &Path, backbone: &Backbone, meta: BTreeMap<String, String>) -> Result<()> {
    save(
        path,
        &config_hash(&backbone.config),
        meta,
        &prefixed(BACKBONE_PREFIX, backbone.named_params()),
    )
}

/// Loads a backbone saved for exactly `config`. The result is frozen.
pub fn load_backbone(path: &Path, config: &BackboneConfig) -> Result<Backbone> {
    let ckpt = load(path)?;
    if ckpt.header.config_hash != config_hash(config) {
        return Err(Error::CheckpointMismatch(format!(
            "{} was written for a different backbone config",
            path.display()
        )));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut backbone = Backbone::new(config.clone(), &mut rng)?;
    restore(&ckpt, BACKBONE_PREFIX, backbone.named_params_mut(), path)?;
    backbone.set_trainable(false);
    Ok(backbone)
}

fn feedback_config_hash(config: &BackboneConfig, loop_range: LoopRange) -> String {
    config_hash(&(config, loop_range))
}

pub fn save_feedback(
    path: &Path,
    fs: &FeedbackState,
    backbone: &Backbone,
    mut meta: BTreeMap<String, String>,
) -> Result<()> {
    meta.insert(BACKBONE_HASH_KEY.into(), backbone_params_hash(backbone));
    meta.insert("loop_start".into(), fs.loop_range.start.to_string());
    meta.insert("loop_end".into(), fs.loop_range.end.to_string());
    save(
        path,
        &feedback_config_hash(&backbone.config, fs.loop_range),
        meta,
        &prefixed(FEEDBACK_PREFIX, fs.named_params()),
    )
}

/// Loads feedback parameters trained on exactly this `backbone`: both the
/// config and the recorded backbone parameter hash must match.
pub fn load_feedback(path: &Path, backbone: &Backbone, loop_range: LoopRange) -> Result<FeedbackState> {
    let ckpt = load(path)?;
    if ckpt.header.config_hash != feedback_config_hash(&backbone.config, loop_range) {
        return Err(Error::CheckpointMismatch(format!(
            "{} was written for a different backbone config or loop",
            path.display()
        )));
    }
    let recorded = ckpt.header.meta.get(BACKBONE_HASH_KEY).map(String::as_str);
    if recorded != Some(backbone_params_hash(backbone).as_str()) {
        return Err(Error::CheckpointMismatch(format!(
            "{} was trained on different backbone weights",
            path.display()
        )));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut fs = FeedbackState::new(backbone, loop_range, &mut rng)?;
    restore(&ckpt, FEEDBACK_PREFIX, fs.named_params_mut(), path)?;
    Ok(fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_backbone, rng, tiny_config};

    fn bits(params: &[(String, &Tensor)]) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        params
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn encode_layout_is_aligned_and_decodes() {
        let a = Tensor::new(&[3], vec![1.0, -0.0, f32::MIN_POSITIVE]).unwrap();
        let b = Tensor::zeros(&[2, 5]);
        let c = Tensor::zeros(&[0]);
        let bytes = encode(
            "h",
            BTreeMap::new(),
            &[("a".into(), &a), ("b".into(), &b), ("c".into(), &c)],
        )
        .unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let ck = decode(&bytes, Path::new("x")).unwrap();
        assert!(ck.header.arrays.iter().all(|e| e.offset % 64 == 0));
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert!(ck.header.arrays[0].offset >= 16 + hlen);
        assert_eq!(ck.arrays["a"].data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(ck.arrays["b"].shape(), &[2, 5]);
        assert_eq!(ck.arrays["c"].numel(), 0);
    }

    #[test]
    fn backbone_round_trip_is_bitwise() {
        let bb = random_backbone(tiny_config(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        save_backbone(&path, &bb, BTreeMap::new()).unwrap();
        let back = load_backbone(&path, &bb.config).unwrap();
        assert_eq!(bits(&back.named_params()), bits(&bb.named_params()));
        let other = BackboneConfig {
            n_blocks: 5,
            ..bb.config.clone()
        };
        assert!(matches!(
            load_backbone(&path, &other),
            Err(Error::CheckpointMismatch(_))
        ));
        let again = dir.path().join("bb2.ckpt");
        save_backbone(&again, &back, BTreeMap::new()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn feedback_round_trip_checks_backbone_weights() {
        let bb = random_backbone(tiny_config(), 2);
        let lr = LoopRange::new(1, 2, 4).unwrap();
        let mut f = FeedbackState::new(&bb, lr, &mut rng(3)).unwrap();
        f.scales.data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fb.ckpt");
        save_feedback(&path, &f, &bb, BTreeMap::new()).unwrap();
        let back = load_feedback(&path, &bb, lr).unwrap();
        assert_eq!(bits(&back.named_params()), bits(&f.named_params()));
        let mut changed = bb.clone();
        changed.final_b.data_mut()[0] += 1.0;
        assert!(matches!(
            load_feedback(&path, &changed, lr),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(matches!(
            load_feedback(&path, &bb, LoopRange::new(0, 2, 4).unwrap()),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Tensor::ones(&[4]);
        let good = encode("h", BTreeMap::new(), &[("t".into(), &t)]).unwrap();
        let p = Path::new("bad.ckpt");
        assert!(decode(b"NOTACKPT", p).is_err());
        assert!(decode(&good[..good.len() - 1], p).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        assert!(encode("h", BTreeMap::new(), &[("t".into(), &t), ("t".into(), &t)]).is_err());
    }

    #[test]
    fn overlapping_arrays_are_rejected() {
        let t = Tensor::ones(&[32]);
        let bytes = encode("h", BTreeMap::new(), &[("a".into(), &t), ("b".into(), &t)]).unwrap();
        let ck = decode(&bytes, Path::new("x")).unwrap();
        let mut header = ck.header.clone();
        header.arrays[1].offset = header.arrays[0].offset;
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.resize(header.arrays[0].offset as usize + 256, 0);
        assert!(decode(&forged, Path::new("x")).is_err());
    }
}
