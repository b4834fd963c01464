//! Binary container for models, tracker state and datasets.
//!
//! ```text
//! magic      8 bytes  "DMOECKPT"
//! version    u32      1
//! manifest   u64 length, then that many bytes of UTF-8 JSON (sorted keys)
//! count      u32      number of tensors
//! tensor     repeated `count` times:
//!   name     u32 length, then UTF-8 bytes
//!   dtype    u8       0 = f64, 1 = u8
//!   rows     u64
//!   cols     u64
//!   data     rows * cols values, row-major (f64 as 8 bytes each)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::balance::AssignmentTracker;
use crate::data::{to_pixel, InputLayout, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelKind};
use crate::numeric::{Matrix, Rng};

pub const MAGIC: &[u8; 8] = b"DMOECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Matrix),
    U8 { rows: usize, cols: usize, bytes: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            TensorData::F64(m) => m.shape(),
            TensorData::U8 { rows, cols, .. } => (*rows, *cols),
        }
    }

    /// Values as `f64`; bytes are returned unscaled.
    pub fn to_matrix(&self) -> Matrix {
        match self {
            TensorData::F64(m) => m.clone(),
            TensorData::U8 { rows, cols, bytes } => {
                Matrix::from_vec(*rows, *cols, bytes.iter().map(|&b| b as f64).collect()).expect("shape")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub data: TensorData,
}

/// A JSON manifest plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(manifest: Value) -> Self {
        Container {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push(Tensor {
            name: name.into(),
            data: TensorData::F64(m),
        });
    }

    pub fn push_u8(&mut self, name: impl Into<String>, rows: usize, cols: usize, bytes: Vec<u8>) {
        assert_eq!(rows * cols, bytes.len(), "u8 tensor shape");
        self.tensors.push(Tensor {
            name: name.into(),
            data: TensorData::U8 { rows, cols, bytes },
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.data)
    }

    fn require(&self, name: &str) -> Result<&TensorData> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("container has no tensor named {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("json value");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            let (rows, cols) = t.data.shape();
            out.push(match t.data {
                TensorData::F64(_) => 0,
                TensorData::U8 { .. } => 1,
            });
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            match &t.data {
                TensorData::F64(m) => {
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::U8 { bytes, .. } => out.extend_from_slice(bytes),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Data("not a checkpoint container (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported container version {version}")));
        }
        let len = r.u64("manifest length")? as usize;
        let manifest: Value = serde_json::from_slice(r.take(len, "manifest")?)
            .map_err(|e| Error::Data(format!("manifest is not valid JSON: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Data(format!("tensor name at offset {} is not UTF-8", r.pos)))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            let rows = r.u64("rows")? as usize;
            let cols = r.u64("cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Data(format!("tensor {name:?} shape overflows")))?;
            let data = match dtype {
                0 => {
                    let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &name)?;
                    let values = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    TensorData::F64(Matrix::from_vec(rows, cols, values)?)
                }
                1 => TensorData::U8 {
                    rows,
                    cols,
                    bytes: r.take(n, &name)?.to_vec(),
                },
                d => return Err(Error::Data(format!("tensor {name:?} has unknown dtype {d}"))),
            };
            tensors.push(Tensor { name, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(Container { manifest, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Container> {
        let path = path.as_ref();
        Container::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data(format!("container truncated reading {what} at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Where a checkpoint was taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    /// 1 while constrained, 2 after the constraint is lifted, 0 before training.
    pub phase: u8,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

/// A model with its optional tracker, training position and free-form config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tracker: Option<AssignmentTracker>,
    pub progress: Progress,
    pub config: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackerMeta {
    margin: f64,
    active: bool,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    kind: ModelKind,
    arch: Architecture,
    progress: Progress,
    tracker: Option<TrackerMeta>,
    config: Value,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let manifest = ModelManifest {
            format: "model".into(),
            kind: self.model.kind,
            arch: self.model.arch,
            progress: self.progress.clone(),
            tracker: self.tracker.as_ref().map(|t| TrackerMeta {
                margin: t.margin(),
                active: t.is_active(),
                steps: (0..t.layers()).map(|l| t.layer_steps(l)).collect(),
            }),
            config: self.config.clone(),
        };
        let mut c = Container::new(serde_json::to_value(manifest).expect("manifest"));
        for (name, m) in self.model.named_params() {
            c.push_f64(name, m.clone());
        }
        if let Some(t) = &self.tracker {
            for l in 0..t.layers() {
                let (sums, comps) = t.raw_totals(l);
                c.push_f64(format!("tracker.layer{}.sum", l + 1), Matrix::row_vector(&sums));
                c.push_f64(format!("tracker.layer{}.comp", l + 1), Matrix::row_vector(&comps));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Checkpoint> {
        let manifest: ModelManifest = serde_json::from_value(c.manifest.clone())
            .map_err(|e| Error::Data(format!("bad model manifest: {e}")))?;
        if manifest.format != "model" {
            return Err(Error::Data(format!("container holds a {:?}, not a model", manifest.format)));
        }
        let mut model = Model::build(manifest.kind, manifest.arch, &mut Rng::new(0))?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let m = match c.require(name)? {
                TensorData::F64(m) => m,
                TensorData::U8 { .. } => return Err(Error::Data(format!("parameter {name:?} is not f64"))),
            };
            if m.shape() != p.shape() {
                return Err(Error::Data(format!(
                    "parameter {name:?} is {:?}, model expects {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            *p = m.clone();
        }
        let tracker = match manifest.tracker {
            None => None,
            Some(meta) => {
                let mut layers = Vec::new();
                for l in 0..meta.steps.len() {
                    let sums = c.require(&format!("tracker.layer{}.sum", l + 1))?.to_matrix();
                    let comps = c.require(&format!("tracker.layer{}.comp", l + 1))?.to_matrix();
                    layers.push((sums.into_vec(), comps.into_vec()));
                }
                Some(AssignmentTracker::from_raw(layers, meta.steps, meta.margin, meta.active)?)
            }
        };
        Ok(Checkpoint {
            model,
            tracker,
            progress: manifest.progress,
            config: manifest.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_container(&Container::read(path)?)
    }
}

/// Datasets are stored with `u8` inputs when every value is an exact pixel
/// level `k / 255`, and as `f64` otherwise.
pub fn dataset_container(ds: &LabeledDataset, meta: Value) -> Container {
    let pixels = ds
        .inputs
        .data()
        .iter()
        .all(|&v| to_pixel(v) as f64 / 255.0 == v);
    let mut c = Container::new(json!({
        "format": "dataset",
        "classes": ds.classes,
        "layout": ds.layout,
        "examples": ds.len(),
        "dim": ds.dim(),
        "pixels": pixels,
        "meta": meta,
    }));
    let (n, d) = ds.inputs.shape();
    if pixels {
        c.push_u8("inputs", n, d, ds.inputs.data().iter().map(|&v| to_pixel(v)).collect());
    } else {
        c.push_f64("inputs", ds.inputs.clone());
    }
    let labels: Vec<f64> = ds.labels.iter().map(|&y| y as f64).collect();
    c.push_f64("labels", Matrix::from_vec(n, 1, labels).expect("shape"));
    if let Some(off) = &ds.offsets {
        let flat = off.iter().flat_map(|&(dx, dy)| [dx as f64, dy as f64]).collect();
        c.push_f64("offsets", Matrix::from_vec(n, 2, flat).expect("shape"));
    }
    c
}

pub fn dataset_from_container(c: &Container) -> Result<LabeledDataset> {
    let m = &c.manifest;
    if m.get("format").and_then(Value::as_str) != Some("dataset") {
        return Err(Error::Data("container does not hold a dataset".into()));
    }
    let classes = m
        .get("classes")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Data("dataset manifest lacks classes".into()))? as usize;
    let layout: InputLayout = serde_json::from_value(m.get("layout").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Data(format!("bad dataset layout: {e}")))?;
    let inputs = match c.require("inputs")? {
        TensorData::F64(m) => m.clone(),
        u8s @ TensorData::U8 { .. } => u8s.to_matrix().map(|v| v / 255.0),
    };
    let labels = c
        .require("labels")?
        .to_matrix()
        .into_vec()
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let mut ds = LabeledDataset::new(inputs, labels, classes, layout)?;
    if let Some(off) = c.get("offsets") {
        let off = off.to_matrix();
        if off.rows() != ds.len() || off.cols() != 2 {
            return Err(Error::Data("offsets tensor does not match the dataset".into()));
        }
        ds.offsets = Some(off.row_iter().map(|r| (r[0] as i32, r[1] as i32)).collect());
    }
    Ok(ds)
}

pub fn save_dataset(ds: &LabeledDataset, meta: Value, path: impl AsRef<Path>) -> Result<()> {
    dataset_container(ds, meta).write(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    dataset_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;

    fn trained_tracker() -> AssignmentTracker {
        let mut t = AssignmentTracker::new(&[3, 2], 0.5).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let a = rng.uniform(0.0, 1.0);
            let b = rng.uniform(0.0, 1.0 - a);
            t.update_totals(0, &[a, b, 1.0 - a - b]);
            t.update_totals(1, &[a, 1.0 - a]);
        }
        t
    }

    #[test]
    fn container_layout_is_as_documented() {
        let mut c = Container::new(json!({"b": 1, "a": [2]}));
        c.push_f64("w", Matrix::from_rows(&[[1.5, -2.0]]).unwrap());
        c.push_u8("p", 1, 3, vec![0, 7, 255]);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"DMOECKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + mlen], br#"{"a":[2],"b":1}"#);
        let mut p = 20 + mlen;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 2);
        p += 4;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 1);
        assert_eq!(bytes[p + 4], b'w');
        assert_eq!(bytes[p + 5], 0);
        assert_eq!(u64::from_le_bytes(bytes[p + 6..p + 14].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[p + 14..p + 22].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[p + 22..p + 30].try_into().unwrap()), 1.5);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 7, 255]);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let mut c = Container::new(json!({}));
        c.push_f64("w", Matrix::identity(3));
        let bytes = c.to_bytes();
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Data(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Container::from_bytes(&long).is_err());
    }

    #[test]
    fn every_model_kind_round_trips_bit_exactly() {
        let arch = Architecture::two_layer(12, 4, LayerSpec::new(3, 5, 4), LayerSpec::new(2, 6, 3));
        for kind in ModelKind::ALL {
            let model = Model::build(kind, arch, &mut Rng::new(21)).unwrap();
            let ckpt = Checkpoint {
                tracker: Some(trained_tracker()).filter(|_| model.gate_widths().len() == 2),
                model,
                progress: Progress { phase: 1, epoch: 3, step: 77 },
                config: json!({"lr": 0.1, "seed": 5}),
            };
            let bytes = ckpt.to_container().to_bytes();
            let back = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, ckpt, "{kind}");
            assert_eq!(back.to_container().to_bytes(), bytes);
        }
    }

    #[test]
    fn restored_tracker_keeps_accumulating_identically() {
        let mut a = trained_tracker();
        a.lift();
        let ckpt = Checkpoint {
            model: Model::build(
                ModelKind::Dmoe,
                Architecture::two_layer(4, 2, LayerSpec::new(3, 2, 2), LayerSpec::new(2, 2, 2)),
                &mut Rng::new(1),
            )
            .unwrap(),
            tracker: Some(a.clone()),
            progress: Progress::default(),
            config: Value::Null,
        };
        let mut b = Checkpoint::from_container(&ckpt.to_container()).unwrap().tracker.unwrap();
        assert!(!b.is_active());
        for k in 0..100 {
            let v = 0.01 * k as f64;
            a.update_totals(1, &[v, 1.0 - v]);
            b.update_totals(1, &[v, 1.0 - v]);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let arch = Architecture::one_layer(6, 3, LayerSpec::new(2, 4, 2));
        let model = Model::build(ModelKind::OneLayer, arch, &mut Rng::new(2)).unwrap();
        let mut c = Checkpoint {
            model,
            tracker: None,
            progress: Progress::default(),
            config: Value::Null,
        }
        .to_container();
        c.tensors[0].data = TensorData::F64(Matrix::zeros(1, 1));
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Data(_))));
        c.tensors.remove(0);
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Data(_))));
    }

    #[test]
    fn datasets_round_trip_with_pixels_and_offsets() {
        let pixels: Vec<f64> = (0..2 * 9).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let mut img = LabeledDataset::new(
            Matrix::from_vec(2, 9, pixels).unwrap(),
            vec![3, 0],
            10,
            InputLayout::Image { height: 3, width: 3 },
        )
        .unwrap();
        img.offsets = Some(vec![(-4, 2), (0, 4)]);
        let c = dataset_container(&img, json!({"seed": 1}));
        assert!(matches!(c.get("inputs"), Some(TensorData::U8 { .. })));
        assert_eq!(dataset_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap(), img);

        let speech = crate::data::synth_monophone(12, 4).unwrap();
        let c = dataset_container(&speech, Value::Null);
        assert!(matches!(c.get("inputs"), Some(TensorData::F64(_))));
        assert_eq!(dataset_from_container(&c).unwrap(), speech);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ds.ckpt");
        let ds = crate::data::synth_monophone(5, 1).unwrap();
        save_dataset(&ds, Value::Null, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert!(matches!(load_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
