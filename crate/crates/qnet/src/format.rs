//! Model container format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "QNET" | version u16 | dtype u8 (0=f32, 1=f16, 2=i8)
//! graph_json_len u32 | graph JSON (layers, metadata, activation params)
//! blob_count u32
//! per blob:
//!   name_len u32 | name ("layer/param")
//!   rank u32 | dims u32 x rank
//!   elem u8 (0=f32, 1=f16, 2=i8, 3=i32)
//!   elem==2 only: axis i32 (-1 = per-tensor) | nscales u32 |
//!                 scales f32 x nscales | zero_point i32
//!   payload (dims product x element size)
//! ```
//!
//! Blobs appear in graph order, parameters within a layer in plan order.
//! Serialization is canonical: saving a loaded model reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, LayerKind, WeightStore};
use crate::quant::{
    ActQuant, F16Blob, F16Tensor, QuantLayer, QuantScale, QuantizedModel, QuantizedTensor,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QNET";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            "i8" => Ok(DType::I8),
            other => Err(format!("unknown dtype {other:?} (expected f32, f16 or i8)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic: not a QNET container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u16),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("graph description: {0}")]
    Json(#[from] serde_json::Error),
    #[error("blob {name:?} does not match the graph: {reason}")]
    BlobMismatch { name: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A model at one of the three storage widths.
#[derive(Debug, Clone)]
pub enum Model {
    F32 { graph: Graph, weights: WeightStore },
    F16 { graph: Graph, weights: F16Blob },
    I8(QuantizedModel),
}

impl Model {
    pub fn dtype(&self) -> DType {
        match self {
            Model::F32 { .. } => DType::F32,
            Model::F16 { .. } => DType::F16,
            Model::I8(_) => DType::I8,
        }
    }

    pub fn graph(&self) -> &Graph {
        match self {
            Model::F32 { graph, .. } => graph,
            Model::F16 { graph, .. } => graph,
            Model::I8(m) => &m.graph,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    graph: Graph,
    #[serde(skip_serializing_if = "Option::is_none")]
    activation_quant: Option<BTreeMap<String, ActQuant>>,
}

fn graph_json(graph: &Graph, act: Option<&BTreeMap<String, ActQuant>>) -> Vec<u8> {
    let doc = GraphDoc {
        graph: graph.clone(),
        activation_quant: act.cloned(),
    };
    serde_json::to_vec(&doc).expect("graph serializes")
}

/// Fixed container bytes before the blobs: header plus graph JSON.
pub fn header_overhead(graph: &Graph) -> usize {
    4 + 2 + 1 + 4 + graph_json(graph, None).len() + 4
}

/// Bytes a blob spends on name, dims and element tag.
pub fn blob_header_len(layer: &str, param: &str, rank: usize) -> usize {
    4 + layer.len() + 1 + param.len() + 4 + 4 * rank + 1
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn name(&mut self, layer: &str, param: &str) {
        let name = format!("{layer}/{param}");
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
    }

    fn dims(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
    }
}

fn encode_header(w: &mut Writer, dtype: DType, json: &[u8]) {
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(dtype.tag());
    w.u32(json.len() as u32);
    w.bytes(json);
}

/// Serializes a model to bytes in its canonical form.
pub fn encode_model(model: &Model) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::new();
    match model {
        Model::F32 { graph, weights } => {
            let json = graph_json(graph, None);
            encode_header(&mut w, DType::F32, &json);
            let plan = graph.parameter_plan()?;
            w.u32(plan.len() as u32);
            for p in &plan {
                let t = weights.require(&p.layer, p.param)?;
                w.name(&p.layer, p.param);
                w.dims(t.shape());
                w.u8(0);
                for &x in t.data() {
                    w.f32(x);
                }
            }
        }
        Model::F16 { graph, weights } => {
            let json = graph_json(graph, None);
            encode_header(&mut w, DType::F16, &json);
            let plan = graph.parameter_plan()?;
            w.u32(plan.len() as u32);
            for p in &plan {
                let t = weights
                    .tensors
                    .get(&p.layer)
                    .and_then(|m| m.get(p.param))
                    .ok_or_else(|| GraphError::MissingWeight {
                        layer: p.layer.clone(),
                        param: p.param,
                    })?;
                w.name(&p.layer, p.param);
                w.dims(&t.shape);
                w.u8(1);
                for &b in &t.bits {
                    w.u16(b);
                }
            }
        }
        Model::I8(m) => {
            let json = graph_json(&m.graph, Some(&m.activations));
            encode_header(&mut w, DType::I8, &json);
            let mut blobs = 0u32;
            for l in m.graph.layers() {
                if let Some(ql) = m.weights.get(&l.name) {
                    blobs += 1 + ql.bias.is_some() as u32;
                }
            }
            w.u32(blobs);
            for l in m.graph.layers() {
                let Some(ql) = m.weights.get(&l.name) else {
                    continue;
                };
                let param = if matches!(l.kind, LayerKind::Dense { .. }) {
                    "weight"
                } else {
                    "kernel"
                };
                w.name(&l.name, param);
                w.dims(&ql.kernel.shape);
                w.u8(2);
                match &ql.kernel.scale {
                    QuantScale::PerTensor(s) => {
                        w.i32(-1);
                        w.u32(1);
                        w.f32(*s);
                    }
                    QuantScale::PerChannel { axis, scales } => {
                        w.i32(*axis as i32);
                        w.u32(scales.len() as u32);
                        for &s in scales {
                            w.f32(s);
                        }
                    }
                }
                w.i32(ql.kernel.zero_point);
                w.bytes(&ql.kernel.data.iter().map(|&c| c as u8).collect::<Vec<u8>>());
                if let Some(bias) = &ql.bias {
                    w.name(&l.name, "bias");
                    w.dims(&[bias.len()]);
                    w.u8(3);
                    for &b in bias {
                        w.i32(b);
                    }
                }
            }
        }
    }
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &'static str) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct RawBlob {
    layer: String,
    param: String,
    shape: Vec<usize>,
    elem: u8,
    qparams: Option<(i32, Vec<f32>, i32)>,
    payload: Vec<u8>,
}

fn decode_blob(r: &mut Reader) -> Result<RawBlob, FormatError> {
    let name_len = r.u32("blob name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "blob name")?.to_vec())
        .map_err(|_| FormatError::Truncated("blob name utf8"))?;
    let (layer, param) = name
        .rsplit_once('/')
        .ok_or(FormatError::Truncated("blob name separator"))?;
    let rank = r.u32("blob rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("blob dim")? as usize);
    }
    let elem = r.u8("blob element tag")?;
    let qparams = if elem == 2 {
        let axis = r.i32("quant axis")?;
        let nscales = r.u32("scale count")? as usize;
        let mut scales = Vec::with_capacity(nscales);
        for _ in 0..nscales {
            scales.push(r.f32("scale")?);
        }
        let zp = r.i32("zero point")?;
        Some((axis, scales, zp))
    } else {
        None
    };
    let count: usize = shape.iter().product();
    let width = match elem {
        0 | 3 => 4,
        1 => 2,
        2 => 1,
        other => return Err(FormatError::BadDtype(other)),
    };
    let payload = r.take(count * width, "blob payload")?.to_vec();
    Ok(RawBlob {
        layer: layer.to_string(),
        param: param.to_string(),
        shape,
        elem,
        qparams,
        payload,
    })
}

/// Parses a model container from bytes.
pub fn decode_model(bytes: &[u8]) -> Result<Model, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or(FormatError::BadDtype(tag))?;
    let json_len = r.u32("graph length")? as usize;
    let doc: GraphDoc = serde_json::from_slice(r.take(json_len, "graph json")?)?;
    let graph = doc.graph;
    let blob_count = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        blobs.push(decode_blob(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Truncated("trailing bytes"));
    }

    match dtype {
        DType::F32 => {
            let mut ws = WeightStore::new();
            for b in blobs {
                if b.elem != 0 {
                    return Err(FormatError::BlobMismatch {
                        name: format!("{}/{}", b.layer, b.param),
                        reason: "f32 container holds non-f32 blob".into(),
                    });
                }
                let data: Vec<f32> = b
                    .payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t =
                    Tensor::new(b.shape.clone(), data).map_err(|e| FormatError::BlobMismatch {
                        name: format!("{}/{}", b.layer, b.param),
                        reason: e.to_string(),
                    })?;
                ws.insert(&b.layer, &b.param, t);
            }
            check_plan_coverage(&graph, |layer, param| {
                ws.get(layer, param).map(Tensor::shape)
            })?;
            Ok(Model::F32 { graph, weights: ws })
        }
        DType::F16 => {
            let mut blob_store = F16Blob::default();
            for b in blobs {
                if b.elem != 1 {
                    return Err(FormatError::BlobMismatch {
                        name: format!("{}/{}", b.layer, b.param),
                        reason: "f16 container holds non-f16 blob".into(),
                    });
                }
                let bits: Vec<u16> = b
                    .payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                blob_store.tensors.entry(b.layer).or_default().insert(
                    b.param,
                    F16Tensor {
                        shape: b.shape,
                        bits,
                    },
                );
            }
            check_plan_coverage(&graph, |layer, param| {
                blob_store
                    .tensors
                    .get(layer)
                    .and_then(|m| m.get(param))
                    .map(|t| t.shape.as_slice())
            })?;
            Ok(Model::F16 {
                graph,
                weights: blob_store,
            })
        }
        DType::I8 => {
            let activations = doc.activation_quant.ok_or(FormatError::Truncated(
                "i8 container missing activation parameters",
            ))?;
            let mut weights: BTreeMap<String, QuantLayer> = BTreeMap::new();
            for b in blobs {
                match b.elem {
                    2 => {
                        let (axis, scales, zp) = b.qparams.expect("elem 2 carries qparams");
                        let scale = if axis < 0 {
                            QuantScale::PerTensor(scales[0])
                        } else {
                            QuantScale::PerChannel {
                                axis: axis as usize,
                                scales,
                            }
                        };
                        let data: Vec<i8> = b.payload.iter().map(|&x| x as i8).collect();
                        weights
                            .entry(b.layer.clone())
                            .or_insert_with(|| QuantLayer {
                                kernel: QuantizedTensor {
                                    shape: vec![1],
                                    data: vec![0],
                                    scale: QuantScale::PerTensor(1.0),
                                    zero_point: 0,
                                },
                                bias: None,
                            })
                            .kernel = QuantizedTensor {
                            shape: b.shape,
                            data,
                            scale,
                            zero_point: zp,
                        };
                    }
                    3 => {
                        let data: Vec<i32> = b
                            .payload
                            .chunks_exact(4)
                            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                            .collect();
                        weights
                            .entry(b.layer.clone())
                            .or_insert_with(|| QuantLayer {
                                kernel: QuantizedTensor {
                                    shape: vec![1],
                                    data: vec![0],
                                    scale: QuantScale::PerTensor(1.0),
                                    zero_point: 0,
                                },
                                bias: None,
                            })
                            .bias = Some(data);
                    }
                    other => {
                        return Err(FormatError::BlobMismatch {
                            name: format!("{}/{}", b.layer, b.param),
                            reason: format!("unexpected element tag {other} in i8 container"),
                        })
                    }
                }
            }
            Ok(Model::I8(QuantizedModel {
                graph,
                weights,
                activations,
            }))
        }
    }
}

fn check_plan_coverage<'a>(
    graph: &Graph,
    lookup: impl Fn(&str, &str) -> Option<&'a [usize]>,
) -> Result<(), FormatError> {
    for p in graph.parameter_plan()? {
        match lookup(&p.layer, p.param) {
            None => {
                return Err(FormatError::BlobMismatch {
                    name: format!("{}/{}", p.layer, p.param),
                    reason: "missing from container".into(),
                })
            }
            Some(shape) if shape != p.shape => {
                return Err(FormatError::BlobMismatch {
                    name: format!("{}/{}", p.layer, p.param),
                    reason: format!("shape {:?} does not match plan {:?}", shape, p.shape),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Writes bytes through a temp file and rename, so outputs are replaced
/// atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io_err = |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("qnet.tmp");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), FormatError> {
    let bytes = encode_model(model)?;
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<Model, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_model(&bytes)
}
