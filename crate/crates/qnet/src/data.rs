//! Dataset manifests, image buffers and codecs, bbox cropping, bilinear
//! resize, per-architecture preprocessing, and the four augmentations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        source: serde_json::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("record {path:?}: bbox ({x}, {y}, {w}, {h}) exceeds image {iw}x{ih}")]
    BboxOutOfBounds {
        path: String,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        iw: u32,
        ih: u32,
    },
}

/// 8-bit RGB image, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1);
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at fractional coordinates with edge replication.
    fn sample(&self, fy: f32, fx: f32) -> [f32; 3] {
        let clamp = |v: f32, hi: usize| v.max(0.0).min((hi - 1) as f32);
        let fy = clamp(fy, self.height);
        let fx = clamp(fx, self.width);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let dy = fy - y0 as f32;
        let dx = fx - x0 as f32;
        let mut out = [0.0f32; 3];
        let (p00, p01) = (self.pixel(y0, x0), self.pixel(y0, x1));
        let (p10, p11) = (self.pixel(y1, x0), self.pixel(y1, x1));
        for c in 0..3 {
            let top = p00[c] as f32 * (1.0 - dx) + p01[c] as f32 * dx;
            let bot = p10[c] as f32 * (1.0 - dx) + p11[c] as f32 * dx;
            out[c] = top * (1.0 - dy) + bot * dy;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => self.encode_ppm(),
            _ => self.encode_png().map_err(|reason| DataError::Decode {
                path: path.display().to_string(),
                reason,
            })?,
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        fs::write(path, bytes).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let decode_err = |reason: String| DataError::Decode {
            path: path.display().to_string(),
            reason,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Self::decode_ppm(&bytes).map_err(decode_err),
            Some("png") => Self::decode_png(&bytes).map_err(decode_err),
            other => Err(decode_err(format!(
                "unsupported image extension {other:?} (png and ppm only)"
            ))),
        }
    }

    fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    fn decode_ppm(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0usize;
        let mut token = || -> Result<String, String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated ppm header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a P6 ppm".into());
        }
        let width: usize = token()?.parse().map_err(|_| "bad width")?;
        let height: usize = token()?.parse().map_err(|_| "bad height")?;
        let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
        if maxval != 255 {
            return Err("only maxval 255 supported".into());
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err("truncated ppm payload".into());
        }
        Ok(Self {
            height,
            width,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    fn encode_png(&self) -> Result<Vec<u8>, String> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| e.to_string())?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| e.to_string())?;
        }
        Ok(out)
    }

    fn decode_png(bytes: &[u8]) -> Result<Self, String> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or("png too large")?];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => buf[..w * h * 4]
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
            other => return Err(format!("unsupported png color type {other:?}")),
        };
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train/val/test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    pub split: Split,
}

/// Ordered sample records plus the class list (sorted unique labels).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub classes: Vec<String>,
}

impl Manifest {
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        let mut classes: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
        classes.sort();
        classes.dedup();
        Self { records, classes }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// One JSON object per line.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut f = fs::File::create(path).map_err(io_err)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)
                .map_err(|e| DataError::Manifest { line: 0, source: e })?;
            f.write_all(b"\n").map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = fs::File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord =
                serde_json::from_str(&line).map_err(|source| DataError::Manifest {
                    line: i + 1,
                    source,
                })?;
            records.push(r);
        }
        // splits must be disjoint by path
        let mut seen: std::collections::HashMap<&str, Split> = Default::default();
        for r in &records {
            if let Some(prev) = seen.insert(r.path.as_str(), r.split) {
                if prev != r.split {
                    return Err(DataError::Usage(format!(
                        "path {:?} appears in both {prev:?} and {:?} splits",
                        r.path, r.split
                    )));
                }
            }
        }
        Ok(Self::from_records(records))
    }
}

/// Seed-deterministic stratified split. Within every class, records shuffle
/// and partition by the given ratios; each record lands in exactly one split.
pub fn split_manifest(
    mut records: Vec<SampleRecord>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Manifest, DataError> {
    if records.is_empty() {
        return Err(DataError::Usage("cannot split an empty record list".into()));
    }
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Usage(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    use rand::seq::SliceRandom;
    let mut by_class: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label.clone()).or_default().push(i);
    }
    for (label, mut idxs) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(runtime::derive_seed(
            seed,
            &[runtime::fnv1a(label.as_bytes())],
        ));
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        let n_train = ((ratios.0 * n as f64).round() as usize).min(n);
        let n_val = ((ratios.1 * n as f64).round() as usize).min(n - n_train);
        for (pos, &i) in idxs.iter().enumerate() {
            records[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(Manifest::from_records(records))
}

/// Exact sub-rectangle copy of the record's bbox.
pub fn crop_to_bbox(image: &ImageBuffer, record: &SampleRecord) -> Result<ImageBuffer, DataError> {
    let bbox = record.bbox.ok_or_else(|| {
        DataError::Usage(format!("record {:?} has no bbox to crop to", record.path))
    })?;
    let (x, y, w, h) = (
        bbox.x as usize,
        bbox.y as usize,
        bbox.width as usize,
        bbox.height as usize,
    );
    if w == 0 || h == 0 || x + w > image.width || y + h > image.height {
        return Err(DataError::BboxOutOfBounds {
            path: record.path.clone(),
            x: bbox.x,
            y: bbox.y,
            w: bbox.width,
            h: bbox.height,
            iw: image.width as u32,
            ih: image.height as u32,
        });
    }
    let mut out = ImageBuffer::new(h, w);
    for row in 0..h {
        let src = ((y + row) * image.width + x) * 3;
        let dst = row * w * 3;
        out.data[dst..dst + w * 3].copy_from_slice(&image.data[src..src + w * 3]);
    }
    Ok(out)
}

/// Bilinear resize with half-pixel-centered sampling. Resizing to the input
/// size is the identity, byte-exact.
pub fn resize_bilinear(image: &ImageBuffer, target: (usize, usize)) -> ImageBuffer {
    let (th, tw) = target;
    assert!(th >= 1 && tw >= 1);
    if th == image.height && tw == image.width {
        return image.clone();
    }
    let sy = image.height as f32 / th as f32;
    let sx = image.width as f32 / tw as f32;
    let mut out = ImageBuffer::new(th, tw);
    for y in 0..th {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..tw {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            let p = image.sample(fy, fx);
            out.set_pixel(
                y,
                x,
                [(p[0] + 0.5) as u8, (p[1] + 0.5) as u8, (p[2] + 0.5) as u8],
            );
        }
    }
    out
}

/// ImageNet mean RGB values used by the ResNet preprocessing scheme.
pub const IMAGENET_MEAN_RGB: [f32; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessScheme {
    /// f32 = value - ImageNet mean per channel.
    ResnetMeanSubtract,
    /// f32 = value / 127.5 - 1, mapping into [-1, 1].
    MobilenetUnitRange,
}

impl PreprocessScheme {
    /// The scheme an architecture expects.
    pub fn for_architecture(arch: &str) -> Self {
        match arch {
            "resnet50" => PreprocessScheme::ResnetMeanSubtract,
            _ => PreprocessScheme::MobilenetUnitRange,
        }
    }
}

/// Maps an image (already at model resolution) to a [1, H, W, 3] tensor.
pub fn preprocess(image: &ImageBuffer, scheme: PreprocessScheme) -> Tensor {
    let data: Vec<f32> = match scheme {
        PreprocessScheme::ResnetMeanSubtract => image
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f32 - IMAGENET_MEAN_RGB[i % 3])
            .collect(),
        PreprocessScheme::MobilenetUnitRange => {
            image.data.iter().map(|&v| v as f32 / 127.5 - 1.0).collect()
        }
    };
    Tensor::new(vec![1, image.height, image.width, 3], data).unwrap()
}

pub fn flip_horizontal(image: &ImageBuffer) -> ImageBuffer {
    let mut out = ImageBuffer::new(image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            out.set_pixel(y, x, image.pixel(y, image.width - 1 - x));
        }
    }
    out
}

/// Augmentation selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentOps {
    pub hflip: bool,
    pub random_crop: bool,
    pub random_zoom: bool,
    pub random_rotate: bool,
}

impl AugmentOps {
    pub fn all() -> Self {
        Self {
            hflip: true,
            random_crop: true,
            random_zoom: true,
            random_rotate: true,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }
}

/// Seed-deterministic augmentation. Output dims equal input dims; the label
/// is untouched by contract. hflip fires with p = 0.5, crops keep at least
/// 80% of each dim, zoom is in [0.9, 1.1], rotation in [-15, +15] degrees
/// with edge-replicate fill.
pub fn augment(image: &ImageBuffer, ops: AugmentOps, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.height, image.width);
    let mut img = image.clone();

    if ops.hflip && rng.random_bool(0.5) {
        img = flip_horizontal(&img);
    }
    if ops.random_crop {
        let fy: f32 = rng.random_range(0.8..=1.0);
        let fx: f32 = rng.random_range(0.8..=1.0);
        let ch = ((h as f32 * fy) as usize).max(1);
        let cw = ((w as f32 * fx) as usize).max(1);
        let oy = rng.random_range(0..=(h - ch));
        let ox = rng.random_range(0..=(w - cw));
        let rec = SampleRecord {
            path: String::new(),
            label: String::new(),
            bbox: Some(BBox {
                x: ox as u32,
                y: oy as u32,
                width: cw as u32,
                height: ch as u32,
            }),
            split: Split::Train,
        };
        let cropped = crop_to_bbox(&img, &rec).expect("crop window is in bounds");
        img = resize_bilinear(&cropped, (h, w));
    }
    if ops.random_zoom {
        let z: f32 = rng.random_range(0.9..=1.1);
        let src = img.clone();
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        for y in 0..h {
            for x in 0..w {
                let fy = cy + (y as f32 - cy) / z;
                let fx = cx + (x as f32 - cx) / z;
                let p = src.sample(fy, fx);
                img.set_pixel(
                    y,
                    x,
                    [(p[0] + 0.5) as u8, (p[1] + 0.5) as u8, (p[2] + 0.5) as u8],
                );
            }
        }
    }
    if ops.random_rotate {
        let deg: f32 = rng.random_range(-15.0..=15.0);
        let rad = deg.to_radians();
        let (sin, cos) = rad.sin_cos();
        let src = img.clone();
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        for y in 0..h {
            for x in 0..w {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                // inverse rotation maps output pixels back onto the source
                let fy = cy + dy * cos - dx * sin;
                let fx = cx + dy * sin + dx * cos;
                let p = src.sample(fy, fx);
                img.set_pixel(
                    y,
                    x,
                    [(p[0] + 0.5) as u8, (p[1] + 0.5) as u8, (p[2] + 0.5) as u8],
                );
            }
        }
    }
    img
}

/// Images decoded to model resolution plus integer labels, ready for the
/// trainer and evaluator.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Decodes one split of a manifest, cropping to bbox when present, resizing
/// to `resolution`. Paths resolve relative to the manifest's directory.
pub fn load_split(
    manifest_path: &Path,
    split: Split,
    resolution: usize,
    crop: bool,
) -> Result<LoadedDataset, DataError> {
    let manifest = Manifest::load(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let records: Vec<&SampleRecord> = manifest.split(split).collect();
    let decoded = runtime::par_map(records.len(), |i| -> Result<ImageBuffer, DataError> {
        let r = records[i];
        let mut img = ImageBuffer::load(&base.join(&r.path))?;
        if crop && r.bbox.is_some() {
            img = crop_to_bbox(&img, r)?;
        }
        Ok(resize_bilinear(&img, (resolution, resolution)))
    });
    let mut images = Vec::with_capacity(records.len());
    for d in decoded {
        images.push(d?);
    }
    let labels = records
        .iter()
        .map(|r| {
            manifest
                .class_index(&r.label)
                .expect("labels come from the class list")
        })
        .collect();
    Ok(LoadedDataset {
        images,
        labels,
        classes: manifest.classes.clone(),
    })
}
