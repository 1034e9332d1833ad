//! Portable tensor files and dataset manifests.
//!
//! A tensor file is laid out as:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `LEMO`                            |
//! | 2     | version, `u16` little-endian, always 1  |
//! | 1     | dtype, `0` = `f32` little-endian        |
//! | 1     | rank `ndim`                             |
//! | 4·n   | dims, `u32` little-endian each          |
//! | 4·Πd  | payload, `f32` little-endian, row-major |
//!
//! Rank 2 files hold matrices (and masks / score grids as `H×W`), rank 3
//! files hold channel-major `D×H×W` feature maps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Label, StreamFrame};
use crate::tensor::{Matrix, Tensor3};

pub const MAGIC: &[u8; 4] = b"LEMO";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
const FIXED_HEADER: usize = 8;

/// Contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Matrix(Matrix),
    Tensor3(Tensor3),
}

impl TensorData {
    pub fn dims(&self) -> Vec<u32> {
        match self {
            TensorData::Matrix(m) => vec![m.rows() as u32, m.cols() as u32],
            TensorData::Tensor3(t) => {
                let (d, h, w) = t.shape();
                vec![d as u32, h as u32, w as u32]
            }
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            TensorData::Matrix(m) => m.as_slice(),
            TensorData::Tensor3(t) => t.as_slice(),
        }
    }

    pub fn into_matrix(self) -> Option<Matrix> {
        match self {
            TensorData::Matrix(m) => Some(m),
            TensorData::Tensor3(_) => None,
        }
    }

    pub fn into_tensor3(self) -> Option<Tensor3> {
        match self {
            TensorData::Tensor3(t) => Some(t),
            TensorData::Matrix(_) => None,
        }
    }
}

impl From<Matrix> for TensorData {
    fn from(m: Matrix) -> Self {
        TensorData::Matrix(m)
    }
}

impl From<Tensor3> for TensorData {
    fn from(t: Tensor3) -> Self {
        TensorData::Tensor3(t)
    }
}

/// Serializes `data` into the tensor file byte layout.
pub fn encode_tensor(data: &TensorData) -> Vec<u8> {
    let dims = data.dims();
    let values = data.values();
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for d in &dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes a tensor file. Non-finite entries are rejected before anything
/// touches the filesystem.
pub fn write_tensor(path: impl AsRef<Path>, data: &TensorData) -> Result<()> {
    let path = path.as_ref();
    if let Some(pos) = data.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            context: format!("tensor entry {pos} destined for {}", path.display()),
        });
    }
    let bytes = encode_tensor(data);
    let tmp = path.with_extension("lemo.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < FIXED_HEADER {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype {}", bytes[6])));
    }
    let ndim = usize::from(bytes[7]);
    let header = FIXED_HEADER + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated dims".into()));
    }
    let dims: Vec<usize> = bytes[FIXED_HEADER..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((dims, header))
}

/// Inverse of [`encode_tensor`].
pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<TensorData> {
    let (dims, header) = parse_header(path, bytes)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * count {
        return Err(bad(format!(
            "payload is {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            4 * count
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    match dims.as_slice() {
        [r, c] => Ok(TensorData::Matrix(Matrix::from_vec(*r, *c, values)?)),
        [d, h, w] => Ok(TensorData::Tensor3(Tensor3::from_vec(*d, *h, *w, values)?)),
        // A leading batch axis of one is accepted from exporters.
        [1, d, h, w] => Ok(TensorData::Tensor3(Tensor3::from_vec(*d, *h, *w, values)?)),
        other => Err(bad(format!("unsupported rank {}", other.len()))),
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Reads and validates only the header, returning the dims.
pub fn read_tensor_dims(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read as _;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; FIXED_HEADER + 4 * 255];
    let mut filled = 0;
    loop {
        let n = f.read(&mut head[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
        if filled == head.len() {
            break;
        }
    }
    let (dims, header) = parse_header(path, &head[..filled])?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    if len != header + 4 * dims.iter().product::<usize>() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("file is {len} bytes, inconsistent with dims {dims:?}"),
        });
    }
    Ok(dims)
}

/// Which part of the protocol a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train-stream")]
    TrainStream,
    #[serde(rename = "test")]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Pre-fused feature tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    /// Per-scale feature tensors, largest first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_paths: Option<Vec<String>>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Image size the masks are stored at, `(height, width)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_hw: Option<(u32, u32)>,
    pub records: Vec<ManifestRecord>,
    /// Exporter metadata, carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(orig_hw: Option<(u32, u32)>, records: Vec<ManifestRecord>) -> Self {
        Self {
            orig_hw,
            records,
            meta: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Record indices of the training stream, in file order.
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::TrainStream)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Loads record `idx` into a frame.
    pub fn load_frame(&self, idx: usize) -> Result<StreamFrame> {
        let rec = self
            .records
            .get(idx)
            .ok_or_else(|| Error::Validation(format!("no record {idx}")))?;
        let paths: Vec<&String> = match (&rec.scale_paths, &rec.feature_path) {
            (Some(s), _) if !s.is_empty() => s.iter().collect(),
            (_, Some(f)) => vec![f],
            _ => return Err(Error::Validation(format!("record {idx} has no features"))),
        };
        let scales = paths
            .into_iter()
            .map(|p| {
                let path = self.resolve(p);
                read_tensor(&path)?.into_tensor3().ok_or_else(|| Error::Format {
                    path,
                    reason: "expected a D×H×W feature tensor".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frame = StreamFrame::new(scales, rec.label, idx);
        if let Some(m) = &rec.mask_path {
            let path = self.resolve(m);
            let mask = read_tensor(&path)?.into_matrix().ok_or_else(|| Error::Format {
                path,
                reason: "expected an H×W mask".into(),
            })?;
            frame.mask = Some(mask);
        }
        Ok(frame)
    }

    fn validate(&self, pixel_metrics: bool) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("manifest has no records".into()));
        }
        for (i, rec) in self.records.iter().enumerate() {
            let mut paths: Vec<&String> = Vec::new();
            match (&rec.feature_path, &rec.scale_paths) {
                (None, None) => {
                    return Err(Error::Validation(format!(
                        "record {i}: needs feature_path or scale_paths"
                    )))
                }
                (_, Some(s)) if s.is_empty() => {
                    return Err(Error::Validation(format!("record {i}: empty scale_paths")))
                }
                (f, s) => {
                    paths.extend(f.iter());
                    paths.extend(s.iter().flatten());
                }
            }
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "record {i}: cannot resolve {}",
                        full.display()
                    )));
                }
            }
            match &rec.mask_path {
                Some(m) => {
                    let full = self.resolve(m);
                    if !full.is_file() {
                        return Err(Error::Validation(format!(
                            "record {i}: cannot resolve mask {}",
                            full.display()
                        )));
                    }
                    let (h, w) = self.orig_hw.ok_or_else(|| {
                        Error::Validation("masks present but orig_hw is not declared".into())
                    })?;
                    let dims = read_tensor_dims(&full)?;
                    if dims != [h as usize, w as usize] {
                        return Err(Error::Validation(format!(
                            "record {i}: mask dims {dims:?} differ from orig_hw ({h}, {w})"
                        )));
                    }
                }
                None => {
                    if pixel_metrics && rec.split == Split::Test && rec.label.is_anomalous() {
                        return Err(Error::Validation(format!(
                            "record {i}: anomalous test record has no mask_path"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Writes the manifest as pretty JSON, replacing any existing file.
pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)
        .and_then(|()| fs::rename(&tmp, path))
        .map_err(|e| Error::io(path, e))
}

/// Writes frames as one tensor file per scale plus masks and a manifest
/// under `dir`, in the layout an offline feature exporter produces.
/// Returns the manifest path.
pub fn export_frames<'a>(
    dir: impl AsRef<Path>,
    frames: impl IntoIterator<Item = (&'a StreamFrame, Split)>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    let mut orig_hw = None;
    for (n, (frame, split)) in frames.into_iter().enumerate() {
        let mut scale_paths = Vec::with_capacity(frame.scales.len());
        for (s, t) in frame.scales.iter().enumerate() {
            let name = format!("f{n:05}_s{s}.lemo");
            write_tensor(dir.join(&name), &TensorData::Tensor3(t.clone()))?;
            scale_paths.push(name);
        }
        let mask_path = match &frame.mask {
            Some(m) => {
                let hw = (m.rows() as u32, m.cols() as u32);
                if *orig_hw.get_or_insert(hw) != hw {
                    return Err(Error::Dimension(format!(
                        "frame {n}: mask {}x{} differs from earlier masks",
                        hw.0, hw.1
                    )));
                }
                let name = format!("f{n:05}_mask.lemo");
                write_tensor(dir.join(&name), &TensorData::Matrix(m.clone()))?;
                Some(name)
            }
            None => None,
        };
        records.push(ManifestRecord {
            feature_path: None,
            scale_paths: Some(scale_paths),
            label: frame.label,
            mask_path,
            split,
        });
    }
    let path = dir.join("manifest.json");
    save_manifest(&path, &Manifest::new(orig_hw, records))?;
    Ok(path)
}

/// Loads a manifest and checks every invariant up front. Relative paths are
/// resolved against the manifest's directory. With `pixel_metrics`, every
/// anomalous test record must carry a mask.
pub fn load_manifest(path: impl AsRef<Path>, pixel_metrics: bool) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    manifest.validate(pixel_metrics)?;
    Ok(manifest)
}
