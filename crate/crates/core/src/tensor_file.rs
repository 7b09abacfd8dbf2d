//! JSON-manifest tensor files with row-major little-endian `f32` payloads.
//!
//! ```json
//! {"dtype": "f32le", "axes": ["head", "height", "width", "sequence"],
//!  "dims": [2, 4, 4, 7], "data_file": "attn.bin"}
//! ```
//!
//! Small tensors may carry `"data": [..]` inline instead of `data_file`.
//! A relative `data_file` is resolved against the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported dtype {0:?}")]
    Dtype(String),
    #[error("axes/dims length mismatch: {axes} axes, {dims} dims")]
    Rank { axes: usize, dims: usize },
    #[error("dims {dims:?} describe {expected} elements, found {found}")]
    Size {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("payload length {0} is not a multiple of 4")]
    Payload(usize),
    #[error("manifest needs exactly one of data or data_file")]
    Source,
}

impl TensorFileError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "Io",
            Self::Manifest(_) => "MalformedManifest",
            Self::Dtype(_) => "UnsupportedDtype",
            Self::Rank { .. } => "RankMismatch",
            Self::Size { .. } => "SizeMismatch",
            Self::Payload(_) => "MalformedPayload",
            Self::Source => "MissingData",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorManifest {
    pub dtype: String,
    pub axes: Vec<String>,
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f32>>,
}

impl TensorManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self, TensorFileError> {
        let manifest: Self =
            serde_json::from_slice(bytes).map_err(|e| TensorFileError::Manifest(e.to_string()))?;
        if manifest.dtype != DTYPE_F32LE {
            return Err(TensorFileError::Dtype(manifest.dtype));
        }
        if manifest.axes.len() != manifest.dims.len() {
            return Err(TensorFileError::Rank {
                axes: manifest.axes.len(),
                dims: manifest.dims.len(),
            });
        }
        if manifest.data.is_some() == manifest.data_file.is_some() {
            return Err(TensorFileError::Source);
        }
        Ok(manifest)
    }

    /// Element count implied by `dims`, `None` on overflow.
    pub fn element_count(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

/// A decoded tensor: declared axes, dims and row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub axes: Vec<String>,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(axes: Vec<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorFileError> {
        if axes.len() != dims.len() {
            return Err(TensorFileError::Rank {
                axes: axes.len(),
                dims: dims.len(),
            });
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorFileError::Manifest("dims overflow".into()))?;
        if expected != data.len() {
            return Err(TensorFileError::Size {
                dims,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { axes, dims, data })
    }

    /// A rank-1 tensor with a single `channel` axis.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            axes: vec!["channel".into()],
            dims: vec![data.len()],
            data,
        }
    }

    /// Decodes a manifest whose data is inline, or whose `data_file`
    /// contents are supplied in `payload`.
    pub fn from_parts(manifest: TensorManifest, payload: Option<&[u8]>) -> Result<Self, TensorFileError> {
        let data = match (manifest.data, payload) {
            (Some(inline), _) => inline,
            (None, Some(bytes)) => decode_f32le(bytes)?,
            (None, None) => return Err(TensorFileError::Source),
        };
        Self::new(manifest.axes, manifest.dims, data)
    }

    pub fn read(manifest_path: &Path) -> Result<Self, TensorFileError> {
        let bytes = fs::read(manifest_path).map_err(|source| TensorFileError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest = TensorManifest::from_json(&bytes)?;
        let payload = match &manifest.data_file {
            Some(rel) => {
                let path = manifest_path
                    .parent()
                    .map(|dir| dir.join(rel))
                    .unwrap_or_else(|| PathBuf::from(rel));
                Some(fs::read(&path).map_err(|source| TensorFileError::Io { path, source })?)
            }
            None => None,
        };
        Self::from_parts(manifest, payload.as_deref())
    }

    /// Writes the manifest and, unless `inline`, a sibling `.bin` payload.
    pub fn write(&self, manifest_path: &Path, inline: bool) -> Result<(), TensorFileError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TensorFileError::Io { path, source }
        };
        let mut manifest = TensorManifest {
            dtype: DTYPE_F32LE.into(),
            axes: self.axes.clone(),
            dims: self.dims.clone(),
            data_file: None,
            data: None,
        };
        if inline {
            manifest.data = Some(self.data.clone());
        } else {
            let bin_path = manifest_path.with_extension("bin");
            let name = bin_path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| TensorFileError::Manifest("non-utf8 payload path".into()))?
                .to_string();
            atomic_write(&bin_path, &encode_f32le(&self.data)).map_err(io_err(&bin_path))?;
            manifest.data_file = Some(name);
        }
        let json = crate::json::to_canonical_string(&manifest)
            .map_err(|e| TensorFileError::Manifest(e.to_string()))?;
        atomic_write(manifest_path, format!("{json}\n").as_bytes()).map_err(io_err(manifest_path))
    }
}

pub fn encode_f32le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32le(bytes: &[u8]) -> Result<Vec<f32>, TensorFileError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(TensorFileError::Payload(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write-temp-then-rename in the target's directory.
pub fn atomic_write(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_manifest() {
        let json = br#"{"dtype":"f32le","axes":["channel"],"dims":[3],"data":[1.0,2.0,3.5]}"#;
        let m = TensorManifest::from_json(json).unwrap();
        let t = TensorFile::from_parts(m, None).unwrap();
        assert_eq!(t.data, vec![1.0, 2.0, 3.5]);
    }

    #[test]
    fn manifest_errors() {
        let bad_dtype = br#"{"dtype":"f16","axes":["c"],"dims":[1],"data":[1.0]}"#;
        assert_eq!(TensorManifest::from_json(bad_dtype).unwrap_err().code(), "UnsupportedDtype");
        let rank = br#"{"dtype":"f32le","axes":["a","b"],"dims":[1],"data":[1.0]}"#;
        assert_eq!(TensorManifest::from_json(rank).unwrap_err().code(), "RankMismatch");
        let both = br#"{"dtype":"f32le","axes":["a"],"dims":[1],"data":[1.0],"data_file":"x"}"#;
        assert_eq!(TensorManifest::from_json(both).unwrap_err().code(), "MissingData");
        let size = br#"{"dtype":"f32le","axes":["a"],"dims":[2],"data":[1.0]}"#;
        let m = TensorManifest::from_json(size).unwrap();
        assert_eq!(TensorFile::from_parts(m, None).unwrap_err().code(), "SizeMismatch");
        assert_eq!(decode_f32le(&[0, 0, 0]).unwrap_err().code(), "MalformedPayload");
    }

    #[test]
    fn binary_write_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = TensorFile::new(
            vec!["height".into(), "width".into()],
            vec![2, 2],
            vec![0.25, -1.5, 3.0, f32::MIN_POSITIVE],
        )
        .unwrap();
        t.write(&path, false).unwrap();
        assert!(dir.path().join("t.bin").exists());
        assert_eq!(TensorFile::read(&path).unwrap(), t);
        t.write(&path, true).unwrap();
        assert_eq!(TensorFile::read(&path).unwrap(), t);
    }
}
