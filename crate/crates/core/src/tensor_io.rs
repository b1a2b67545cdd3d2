//! Portable checkpoint container and the module naming taxonomy.
//!
//! File layout (version 1, little-endian):
//!
//! ```text
//! bytes 0..8          ASCII magic "HTSRCKPT"
//! bytes 8..12         u32 manifest length Lm
//! bytes 12..12+Lm     UTF-8 JSON manifest
//! remainder           raw f32 payload
//! ```
//!
//! The manifest maps each tensor name to `{dtype, shape, offset, length}` with
//! offsets relative to the start of the payload. Free-form metadata lives under
//! the reserved `__metadata__` key as a string-to-string map.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"HTSRCKPT";
const HEADER_LEN: usize = 12;
const METADATA_KEY: &str = "__metadata__";

/// The seven transformer projections plus a catch-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    AttQ,
    AttK,
    AttV,
    AttO,
    MlpGate,
    MlpUp,
    MlpDown,
    Other,
}

impl ModuleKind {
    /// The projection kinds, in canonical per-layer order.
    pub const PROJECTIONS: [ModuleKind; 7] = [
        ModuleKind::AttQ,
        ModuleKind::AttK,
        ModuleKind::AttV,
        ModuleKind::AttO,
        ModuleKind::MlpGate,
        ModuleKind::MlpUp,
        ModuleKind::MlpDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::AttQ => "att.q",
            ModuleKind::AttK => "att.k",
            ModuleKind::AttV => "att.v",
            ModuleKind::AttO => "att.o",
            ModuleKind::MlpGate => "mlp.gate",
            ModuleKind::MlpUp => "mlp.up",
            ModuleKind::MlpDown => "mlp.down",
            ModuleKind::Other => "other",
        }
    }

    /// Parses a projection suffix. `"other"` is not accepted here: it is the
    /// fallback for names that do not match the grammar, not a name itself.
    pub fn from_suffix(s: &str) -> Option<Self> {
        Self::PROJECTIONS.iter().copied().find(|k| k.as_str() == s)
    }

    pub fn is_projection(self) -> bool {
        self != ModuleKind::Other
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ModuleKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ModuleKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "other" {
            return Ok(ModuleKind::Other);
        }
        ModuleKind::from_suffix(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown module kind `{s}`")))
    }
}

/// Identity of one parameter tensor: `layers.{i}.{kind}` for projections,
/// anything else for `Other`.
///
/// Ordering is (layer, kind, raw name), which puts a model's modules in
/// layer-major canonical order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleId {
    pub layer_index: usize,
    pub kind: ModuleKind,
    pub raw_name: String,
}

impl ModuleId {
    pub fn projection(layer_index: usize, kind: ModuleKind) -> Self {
        let raw_name = format!("layers.{layer_index}.{}", kind.as_str());
        ModuleId { layer_index, kind, raw_name }
    }

    pub fn other(name: impl Into<String>) -> Self {
        ModuleId { layer_index: 0, kind: ModuleKind::Other, raw_name: name.into() }
    }

    pub fn format(&self) -> String {
        match self.kind {
            ModuleKind::Other => self.raw_name.clone(),
            kind => format!("layers.{}.{}", self.layer_index, kind.as_str()),
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw_name)
    }
}

impl Serialize for ModuleId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw_name)
    }
}

impl<'de> Deserialize<'de> for ModuleId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(parse_module_name(&String::deserialize(d)?))
    }
}

/// Total parser for module names. Layer indices must be canonical decimals
/// (no sign, no leading zeros) so that parsing and formatting round-trip.
pub fn parse_module_name(raw_name: &str) -> ModuleId {
    let parsed = raw_name.strip_prefix("layers.").and_then(|rest| {
        let (index, suffix) = rest.split_once('.')?;
        let canonical = !index.is_empty()
            && index.bytes().all(|b| b.is_ascii_digit())
            && (index == "0" || !index.starts_with('0'));
        if !canonical {
            return None;
        }
        let layer = index.parse::<usize>().ok()?;
        let kind = ModuleKind::from_suffix(suffix)?;
        Some((layer, kind))
    });
    match parsed {
        Some((layer_index, kind)) => {
            ModuleId { layer_index, kind, raw_name: raw_name.to_string() }
        }
        None => ModuleId::other(raw_name),
    }
}

/// A named dense row-major matrix stored at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub id: ModuleId,
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(id: ModuleId, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 || rows.checked_mul(cols) != Some(values.len()) {
            return Err(TensorError::Shape { name: id.raw_name, rows, cols, len: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { name: id.raw_name, index });
        }
        Ok(WeightMatrix { id, rows, cols, values })
    }

    /// Rounds f64 values to storage precision.
    pub fn from_f64(id: ModuleId, rows: usize, cols: usize, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(id, rows, cols, values.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor `{name}`: shape {rows}x{cols} does not match {len} values")]
    Shape { name: String, rows: usize, cols: usize, len: usize },
    #[error("tensor `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(String),
    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("manifest regions overlap: `{0}` and `{1}`")]
    Overlap(String, String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    dtype: String,
    shape: [usize; 2],
    offset: u64,
    length: u64,
}

/// Matrices plus free-form metadata, as stored in one file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<WeightMatrix>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn get(&self, raw_name: &str) -> Option<&WeightMatrix> {
        self.entries.iter().find(|e| e.id.raw_name == raw_name)
    }
}

/// Serializes entries into the version-1 byte layout.
pub fn encode_checkpoint(
    entries: &[WeightMatrix],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>, TensorError> {
    let mut manifest = serde_json::Map::new();
    let mut meta = metadata.clone();
    meta.insert("format_version".into(), "1".into());
    manifest.insert(METADATA_KEY.into(), serde_json::to_value(&meta).expect("string map"));

    let mut payload = Vec::with_capacity(entries.iter().map(|e| e.values.len() * 4).sum());
    for entry in entries {
        let name = &entry.id.raw_name;
        if name == METADATA_KEY || manifest.contains_key(name) {
            return Err(TensorError::DuplicateName(name.clone()));
        }
        if let Some(index) = entry.values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { name: name.clone(), index });
        }
        let offset = payload.len() as u64;
        for v in &entry.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let record = ManifestEntry {
            dtype: "f32".into(),
            shape: [entry.rows, entry.cols],
            offset,
            length: payload.len() as u64 - offset,
        };
        manifest.insert(name.clone(), serde_json::to_value(record).expect("plain struct"));
    }

    let json = serde_json::to_vec(&Value::Object(manifest)).expect("json map");
    let manifest_len = u32::try_from(json.len())
        .map_err(|_| TensorError::Manifest("manifest exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_checkpoint(
    entries: &[WeightMatrix],
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<(), TensorError> {
    let bytes = encode_checkpoint(entries, metadata)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

/// Parses the version-1 byte layout. Every manifest region is checked for
/// bounds and pairwise disjointness before any tensor is materialized.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TensorError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        return Err(TensorError::Truncated(format!("{} byte file has no header", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| TensorError::Truncated(format!("manifest of {manifest_len} bytes runs past end of file")))?;
    let manifest: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| TensorError::Manifest(e.to_string()))?;
    let payload = &bytes[manifest_end..];

    let mut metadata = BTreeMap::new();
    let mut records = Vec::with_capacity(manifest.len());
    for (name, value) in manifest {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| TensorError::Manifest(format!("metadata: {e}")))?;
            continue;
        }
        let record: ManifestEntry = serde_json::from_value(value)
            .map_err(|e| TensorError::Manifest(format!("entry `{name}`: {e}")))?;
        records.push((name, record));
    }
    match metadata.remove("format_version").as_deref() {
        Some("1") | None => {}
        Some(other) => return Err(TensorError::UnsupportedVersion(other.to_string())),
    }

    for (name, r) in &records {
        if r.dtype != "f32" {
            return Err(TensorError::UnsupportedDtype { name: name.clone(), dtype: r.dtype.clone() });
        }
        let expected = (r.shape[0] as u64).checked_mul(r.shape[1] as u64).and_then(|c| c.checked_mul(4));
        if expected != Some(r.length) {
            return Err(TensorError::Manifest(format!(
                "entry `{name}`: shape {:?} needs {:?} bytes but length is {}",
                r.shape, expected, r.length
            )));
        }
        let end = r.offset.checked_add(r.length);
        if end.is_none_or(|end| end > payload.len() as u64) {
            return Err(TensorError::Truncated(format!(
                "entry `{name}` spans [{}, {}+{}) but payload has {} bytes",
                r.offset,
                r.offset,
                r.length,
                payload.len()
            )));
        }
    }

    // Sort by offset once; a region overlaps another iff it overlaps its successor.
    let mut by_offset: Vec<&(String, ManifestEntry)> = records.iter().collect();
    by_offset.sort_by_key(|(name, r)| (r.offset, name.clone()));
    for pair in by_offset.windows(2) {
        let (a, ra) = pair[0];
        let (b, rb) = pair[1];
        if ra.length > 0 && rb.length > 0 && ra.offset + ra.length > rb.offset {
            return Err(TensorError::Overlap(a.clone(), b.clone()));
        }
    }

    // Materialize in payload order so that write/read preserves entry order.
    let mut entries = Vec::with_capacity(records.len());
    for (name, r) in by_offset {
        let start = r.offset as usize;
        let region = &payload[start..start + r.length as usize];
        let values = region
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(WeightMatrix::new(parse_module_name(name), r.shape[0], r.shape[1], values)?);
    }
    Ok(Checkpoint { entries, metadata })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TensorError> {
    decode_checkpoint(&fs::read(path)?)
}
