//! Feature files, trial lists, fixed-length shaping and synthetic data.

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BONAFIDE, SPOOF};
use crate::{Error, Result};

pub use synth::{synth_generate, write_dataset, Artifact, SynthDataset, SynthSpec};

/// Default number of frames per utterance: 66 800 samples at a 320-sample
/// frame stride.
pub const DEFAULT_T_FIXED: usize = 208;

pub const FEATURE_MAGIC: &[u8; 6] = b"MBFT1\0";
const FEATURE_HEADER: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }

    /// Logit / label index.
    pub fn class(self) -> usize {
        match self {
            Key::Bonafide => BONAFIDE,
            Key::Spoof => SPOOF,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            other => Err(Error::Data(format!("unknown key {other:?}"))),
        }
    }
}

/// One labelled utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub key: Key,
    /// `T × F` frames.
    pub features: Array2<f32>,
}

pub type Dataset = Vec<Utterance>;

pub fn encode_features(x: &Array2<f32>) -> Result<Vec<u8>> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let (t, f) = x.dim();
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::DimOverflow {
            rows: t as u64,
            cols: f as u64,
        })
    };
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * x.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&dim(t)?.to_le_bytes());
    out.extend_from_slice(&dim(f)?.to_le_bytes());
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<Array2<f32>> {
    if buf.len() < FEATURE_MAGIC.len() || &buf[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: "MBFT1\\0" });
    }
    if buf.len() < FEATURE_HEADER {
        return Err(Error::Truncated {
            expected: FEATURE_HEADER as u64,
            found: buf.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let (t, f) = (u64::from(word(6)), u64::from(word(10)));
    let overflow = Error::DimOverflow { rows: t, cols: f };
    let payload = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FEATURE_HEADER as u64))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(overflow)?;
    if (buf.len() as u64) < payload {
        return Err(Error::Truncated {
            expected: payload,
            found: buf.len() as u64,
        });
    }
    if (buf.len() as u64) > payload {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after a {t}x{f} payload",
            buf.len() as u64 - payload
        )));
    }
    let data: Vec<f32> = buf[FEATURE_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((t as usize, f as usize), data)
        .map_err(|e| Error::Malformed(e.to_string()))
}

pub fn write_features(path: &Path, x: &Array2<f32>) -> Result<()> {
    let bytes = encode_features(x).map_err(|e| e.at_path(path))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&buf).map_err(|e| e.at_path(path))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub id: String,
    pub key: Key,
}

/// Parses `SPK UTT - ATTACK KEY` lines: the second field is the utterance
/// id and the last one the key.  Blank lines are skipped.
pub fn parse_protocol(text: &str) -> Result<Vec<ProtocolEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(Error::Protocol {
                line: line_no,
                detail: format!("expected at least 3 fields, found {}", fields.len()),
            });
        }
        let token = fields[fields.len() - 1];
        let key = token.parse::<Key>().map_err(|_| Error::UnknownKey {
            line: line_no,
            token: token.to_string(),
        })?;
        let id = fields[1].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Protocol {
                line: line_no,
                detail: format!("duplicate utterance id {id:?}"),
            });
        }
        out.push(ProtocolEntry { id, key });
    }
    Ok(out)
}

/// Formats entries in the five-field layout; `attacks` supplies the fourth
/// field (`-` when absent).
pub fn format_protocol(entries: &[ProtocolEntry], attacks: &[&str]) -> String {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let attack = attacks.get(i).copied().unwrap_or("-");
            format!("SYN {} - {attack} {}\n", e.id, e.key)
        })
        .collect()
}

pub fn read_protocol(path: &Path) -> Result<Vec<ProtocolEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol(&text).map_err(|e| Error::Format {
        path: path.into(),
        detail: e.to_string(),
    })
}

/// Parses `<utt_id> <relative feature path>` lines.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [id, path] => {
                if !seen.insert(id.to_string()) {
                    return Err(Error::Data(format!(
                        "manifest line {}: duplicate utterance id {id:?}",
                        i + 1
                    )));
                }
                out.push((id.to_string(), PathBuf::from(path)));
            }
            _ => {
                return Err(Error::Data(format!(
                    "manifest line {}: expected `<utt_id> <path>`, found {} fields",
                    i + 1,
                    fields.len()
                )))
            }
        }
    }
    Ok(out)
}

pub fn format_manifest(entries: &[(String, PathBuf)]) -> String {
    entries
        .iter()
        .map(|(id, p)| format!("{id} {}\n", p.display()))
        .collect()
}

/// Reads every feature file listed in a manifest.  Paths are relative to
/// the manifest's directory.
pub fn read_manifest_features(manifest: &Path) -> Result<Vec<(String, Array2<f32>)>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries = parse_manifest(&text).map_err(|e| Error::Format {
        path: manifest.into(),
        detail: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    entries
        .into_iter()
        .map(|(id, rel)| Ok((id, read_features(&base.join(rel))?)))
        .collect()
}

/// Joins a manifest with a protocol into a labelled dataset, in manifest
/// order.
pub fn load_dataset(manifest: &Path, protocol: &Path) -> Result<Dataset> {
    let keys: std::collections::HashMap<String, Key> = read_protocol(protocol)?
        .into_iter()
        .map(|e| (e.id, e.key))
        .collect();
    read_manifest_features(manifest)?
        .into_iter()
        .map(|(id, features)| {
            let key = *keys.get(&id).ok_or_else(|| Error::Format {
                path: protocol.into(),
                detail: format!("no key for utterance {id:?}"),
            })?;
            Ok(Utterance { id, key, features })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Random crop start drawn from the seed.
    Train { seed: u64 },
    /// Crops start at frame 0.
    Eval,
}

/// Shapes `x` to exactly `t_fixed` frames: long inputs are cropped, short
/// ones repeat-tiled.
pub fn crop_or_pad(x: &Array2<f32>, t_fixed: usize, mode: CropMode) -> Array2<f32> {
    let t = x.nrows();
    assert!(t >= 1 && t_fixed >= 1, "crop_or_pad needs at least one frame");
    if t == t_fixed {
        return x.clone();
    }
    if t > t_fixed {
        let start = match mode {
            CropMode::Train { seed } => ChaCha8Rng::seed_from_u64(seed).gen_range(0..=t - t_fixed),
            CropMode::Eval => 0,
        };
        return x.slice(s![start..start + t_fixed, ..]).to_owned();
    }
    let rows: Vec<usize> = (0..t_fixed).map(|i| i % t).collect();
    x.select(ndarray::Axis(0), &rows)
}
