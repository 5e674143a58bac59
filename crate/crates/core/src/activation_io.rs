//! The `PROBEAK1` activation container and the layer manifest.
//!
//! One file holds one (layer, split) activation matrix. Layout, all integers
//! little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PROBEAK1"
//! 8       4     format_version (u32, = 1)
//! 12      8     n_samples (u64)
//! 20      8     n_features (u64)
//! 28      8     n_classes (u64)
//! 36      4     flags (u32): bit 0 = network_preds present, bit 1 = test split
//! 40      4     layer_id byte length L (u32)
//! 44      L     layer_id, UTF-8
//! 44+L    4np   data, row-major f32
//!         2n    labels, u16
//!         2n    network_preds, u16 (only when flag bit 0 is set)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"PROBEAK1";
pub const FORMAT_VERSION: u32 = 1;

pub const FLAG_NETWORK_PREDS: u32 = 1;
pub const FLAG_TEST_SPLIT: u32 = 1 << 1;

/// Size of the fixed part of the header, before the layer id bytes.
pub const FIXED_HEADER_LEN: u64 = 44;

pub type Label = u16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected \"PROBEAK1\", found {found:?}")]
    BadMagic { found: [u8; 8] },
    #[error("version mismatch: expected {FORMAT_VERSION}, found {found}")]
    VersionMismatch { found: u32 },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, file has {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("trailing bytes: expected {expected} bytes, file has {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("label {label} at row {row} is >= n_classes ({n_classes})")]
    LabelOutOfRange {
        row: usize,
        label: Label,
        n_classes: usize,
    },
    #[error("network prediction {label} at row {row} is >= n_classes ({n_classes})")]
    PredOutOfRange {
        row: usize,
        label: Label,
        n_classes: usize,
    },
    #[error("non-finite data at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid activation set: {0}")]
    Invalid(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One layer's activations for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub layer_id: String,
    pub split: Split,
    pub n_classes: usize,
    /// `n_samples x n_features`, one flattened sample per row.
    pub data: Array2<f32>,
    pub labels: Vec<Label>,
    pub network_preds: Option<Vec<Label>>,
}

impl ActivationSet {
    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    /// Checks every invariant of the set.
    pub fn validate(&self) -> Result<(), FormatError> {
        let (n, p) = self.data.dim();
        if n == 0 || p == 0 {
            return Err(FormatError::Invalid(format!("empty matrix ({n}x{p})")));
        }
        if self.n_classes < 2 || self.n_classes > Label::MAX as usize + 1 {
            return Err(FormatError::Invalid(format!(
                "n_classes must be in [2, 65536], got {}",
                self.n_classes
            )));
        }
        if self.layer_id.len() > u32::MAX as usize {
            return Err(FormatError::Invalid("layer_id too long".into()));
        }
        if self.labels.len() != n {
            return Err(FormatError::Invalid(format!(
                "labels length {} != n_samples {n}",
                self.labels.len()
            )));
        }
        for (row, &label) in self.labels.iter().enumerate() {
            if label as usize >= self.n_classes {
                return Err(FormatError::LabelOutOfRange {
                    row,
                    label,
                    n_classes: self.n_classes,
                });
            }
        }
        if let Some(preds) = &self.network_preds {
            if preds.len() != n {
                return Err(FormatError::Invalid(format!(
                    "network_preds length {} != n_samples {n}",
                    preds.len()
                )));
            }
            for (row, &label) in preds.iter().enumerate() {
                if label as usize >= self.n_classes {
                    return Err(FormatError::PredOutOfRange {
                        row,
                        label,
                        n_classes: self.n_classes,
                    });
                }
            }
        }
        check_finite(&self.data)
    }

    pub fn header(&self) -> ActivationSetHeader {
        let mut flags = 0;
        if self.network_preds.is_some() {
            flags |= FLAG_NETWORK_PREDS;
        }
        if self.split == Split::Test {
            flags |= FLAG_TEST_SPLIT;
        }
        ActivationSetHeader {
            magic: *MAGIC,
            format_version: FORMAT_VERSION,
            n_samples: self.n_samples() as u64,
            n_features: self.n_features() as u64,
            n_classes: self.n_classes as u64,
            flags,
            layer_id: self.layer_id.clone(),
        }
    }
}

fn check_finite(data: &Array2<f32>) -> Result<(), FormatError> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        let p = data.ncols();
        return Err(FormatError::NonFinite {
            row: pos / p,
            col: pos % p,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationSetHeader {
    pub magic: [u8; 8],
    pub format_version: u32,
    pub n_samples: u64,
    pub n_features: u64,
    pub n_classes: u64,
    pub flags: u32,
    pub layer_id: String,
}

impl ActivationSetHeader {
    pub fn has_network_preds(&self) -> bool {
        self.flags & FLAG_NETWORK_PREDS != 0
    }

    pub fn split(&self) -> Split {
        if self.flags & FLAG_TEST_SPLIT != 0 {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Byte offset where the data matrix starts.
    pub fn payload_offset(&self) -> u64 {
        FIXED_HEADER_LEN + self.layer_id.len() as u64
    }

    pub fn payload_len(&self) -> u64 {
        let n = self.n_samples;
        let mut len = n * self.n_features * 4 + n * 2;
        if self.has_network_preds() {
            len += n * 2;
        }
        len
    }

    pub fn file_len(&self) -> u64 {
        self.payload_offset() + self.payload_len()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.magic)?;
        w.write_u32::<LittleEndian>(self.format_version)?;
        w.write_u64::<LittleEndian>(self.n_samples)?;
        w.write_u64::<LittleEndian>(self.n_features)?;
        w.write_u64::<LittleEndian>(self.n_classes)?;
        w.write_u32::<LittleEndian>(self.flags)?;
        w.write_u32::<LittleEndian>(self.layer_id.len() as u32)?;
        w.write_all(self.layer_id.as_bytes())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        let eof = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                FormatError::TruncatedHeader
            } else {
                FormatError::Io {
                    path: PathBuf::new(),
                    source: e,
                }
            }
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        let format_version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if format_version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: format_version,
            });
        }
        let n_samples = r.read_u64::<LittleEndian>().map_err(eof)?;
        let n_features = r.read_u64::<LittleEndian>().map_err(eof)?;
        let n_classes = r.read_u64::<LittleEndian>().map_err(eof)?;
        let flags = r.read_u32::<LittleEndian>().map_err(eof)?;
        let id_len = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut id = vec![0u8; id_len as usize];
        r.read_exact(&mut id).map_err(eof)?;
        let layer_id = String::from_utf8(id)
            .map_err(|_| FormatError::Invalid("layer_id is not valid UTF-8".into()))?;
        if n_samples == 0 || n_features == 0 {
            return Err(FormatError::Invalid(format!(
                "empty matrix ({n_samples}x{n_features})"
            )));
        }
        if !(2..=Label::MAX as u64 + 1).contains(&n_classes) {
            return Err(FormatError::Invalid(format!(
                "n_classes must be in [2, 65536], got {n_classes}"
            )));
        }
        n_samples
            .checked_mul(n_features)
            .and_then(|np| np.checked_mul(4))
            .ok_or_else(|| FormatError::Invalid("matrix size overflows u64".into()))?;
        Ok(ActivationSetHeader {
            magic,
            format_version,
            n_samples,
            n_features,
            n_classes,
            flags,
            layer_id,
        })
    }
}

fn with_path(path: &Path) -> impl Fn(FormatError) -> FormatError + '_ {
    move |e| match e {
        FormatError::Io { source, .. } => FormatError::io(path, source),
        other => other,
    }
}

pub fn write_activation_set(set: &ActivationSet, path: &Path) -> Result<(), FormatError> {
    set.validate()?;
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FormatError::io(path, e);
    set.header().write_to(&mut w).map_err(io)?;
    for v in set.data.iter() {
        w.write_f32::<LittleEndian>(*v).map_err(io)?;
    }
    for &l in &set.labels {
        w.write_u16::<LittleEndian>(l).map_err(io)?;
    }
    if let Some(preds) = &set.network_preds {
        for &l in preds {
            w.write_u16::<LittleEndian>(l).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn open_checked(path: &Path) -> Result<(BufReader<File>, ActivationSetHeader), FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let actual = file.metadata().map_err(|e| FormatError::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let header = ActivationSetHeader::read_from(&mut r).map_err(with_path(path))?;
    let expected = header.file_len();
    if actual < expected {
        return Err(FormatError::TruncatedPayload { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes { expected, actual });
    }
    Ok((r, header))
}

/// Reads and checks the header only; the payload is never touched.
pub fn validate_header(path: &Path) -> Result<ActivationSetHeader, FormatError> {
    open_checked(path).map(|(_, h)| h)
}

/// Reads a full activation set. The matrix is decoded straight into its final
/// buffer.
pub fn read_activation_set(path: &Path) -> Result<ActivationSet, FormatError> {
    let (mut r, header) = open_checked(path)?;
    let n = header.n_samples as usize;
    let p = header.n_features as usize;
    let expected = header.file_len();
    let truncated = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::TruncatedPayload {
                expected,
                actual: 0,
            }
        } else {
            FormatError::io(path, e)
        }
    };

    let mut data = vec![0f32; n * p];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(truncated)?;
    let mut labels = vec![0u16; n];
    r.read_u16_into::<LittleEndian>(&mut labels)
        .map_err(truncated)?;
    let network_preds = if header.has_network_preds() {
        let mut preds = vec![0u16; n];
        r.read_u16_into::<LittleEndian>(&mut preds)
            .map_err(truncated)?;
        Some(preds)
    } else {
        None
    };

    let set = ActivationSet {
        layer_id: header.layer_id.clone(),
        split: header.split(),
        n_classes: header.n_classes as usize,
        data: Array2::from_shape_vec((n, p), data).expect("shape matches buffer"),
        labels,
        network_preds,
    };
    set.validate()?;
    Ok(set)
}

/// One entry of the layer manifest, in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: String,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub dim: usize,
    /// Free-form note on where the activations were tapped (e.g. post-ReLU).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_point: Option<String>,
}

/// Sidecar JSON manifest listing layer files in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerEntry>,
    /// Test accuracy of the network the activations were taken from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| FormatError::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if manifest.layers.is_empty() {
            return Err(FormatError::Manifest {
                path: path.to_path_buf(),
                message: "no layers listed".into(),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| FormatError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn train_path(&self, layer: usize) -> PathBuf {
        self.resolve(&self.layers[layer].train_path)
    }

    pub fn test_path(&self, layer: usize) -> PathBuf {
        self.resolve(&self.layers[layer].test_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_set() -> ActivationSet {
        ActivationSet {
            layer_id: "block1".into(),
            split: Split::Train,
            n_classes: 2,
            data: array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            labels: vec![0, 1],
            network_preds: None,
        }
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pak");
        let set = small_set();
        write_activation_set(&set, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let header_len = FIXED_HEADER_LEN + "block1".len() as u64;
        assert_eq!(len, header_len + 24 + 4);
        assert_eq!(set.header().payload_offset(), header_len);
        assert_eq!(read_activation_set(&path).unwrap(), set);
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = small_set();
        set.data[[1, 2]] = f32::NAN;
        let err = write_activation_set(&set, &dir.path().join("x")).unwrap_err();
        assert!(err.to_string().contains("non-finite data"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pak");
        write_activation_set(&small_set(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        std::fs::write(&path, bytes).unwrap();
        let err = read_activation_set(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pak");
        write_activation_set(&small_set(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 2;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            validate_header(&path),
            Err(FormatError::VersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn empty_file_is_truncated_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        std::fs::write(&path, b"").unwrap();
        let err = validate_header(&path).unwrap_err();
        assert_eq!(err.to_string(), "truncated header");
    }

    #[test]
    fn label_out_of_range_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pak");
        write_activation_set(&small_set(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 2] = 7;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_activation_set(&path),
            Err(FormatError::LabelOutOfRange {
                row: 1,
                label: 7,
                ..
            })
        ));
    }

    #[test]
    fn preds_flag_and_split_in_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pak");
        let mut set = small_set();
        set.network_preds = Some(vec![1, 1]);
        set.split = Split::Test;
        write_activation_set(&set, &path).unwrap();
        let h = validate_header(&path).unwrap();
        assert!(h.has_network_preds());
        assert_eq!(h.flags & FLAG_NETWORK_PREDS, 1);
        assert_eq!(h.split(), Split::Test);
        assert_eq!(h.n_samples, 2);
        assert_eq!(h.n_features, 3);
        assert_eq!(read_activation_set(&path).unwrap(), set);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        let mut set = small_set();
        set.labels = vec![0];
        assert!(set.validate().is_err());
        let mut set = small_set();
        set.labels = vec![0, 2];
        assert!(matches!(
            set.validate(),
            Err(FormatError::LabelOutOfRange { .. })
        ));
        let mut set = small_set();
        set.network_preds = Some(vec![0]);
        assert!(set.validate().is_err());
        let mut set = small_set();
        set.n_classes = 1;
        assert!(set.validate().is_err());
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            layers: vec![LayerEntry {
                layer_id: "maxpool".into(),
                train_path: "maxpool.train.pak".into(),
                test_path: "/abs/maxpool.test.pak".into(),
                dim: 16384,
                tap_point: Some("post-ReLU".into()),
            }],
            network_accuracy: Some(0.925),
            n_classes: Some(10),
            base_dir: PathBuf::new(),
        };
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.layers, manifest.layers);
        assert_eq!(loaded.train_path(0), dir.path().join("maxpool.train.pak"));
        assert_eq!(loaded.test_path(0), PathBuf::from("/abs/maxpool.test.pak"));
    }
}
