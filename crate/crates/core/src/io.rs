//! File formats: AFK1 feature binaries, PGM masks, PPM images, vocabulary
//! files, TSV dataset manifests, checkpoints and key=value configs.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::backbone::{SceneObject, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::mask::LabelGrid;
use crate::optim::Adam;
use crate::params::{ParamKind, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::v2c::{FeatureSequence, Vocabulary};

pub const FEATURE_MAGIC: &[u8; 4] = b"AFK1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFKC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian reader over an in-memory file that reports byte offsets.
struct ByteReader<'a> {
    path: &'a Path,
    cur: Cursor<&'a [u8]>,
}

impl<'a> ByteReader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, cur: Cursor::new(bytes) }
    }

    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.offset(), msg)
    }

    fn truncated(&self, what: &str) -> Error {
        self.err(format!("file truncated while reading {what}"))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.truncated(what))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.truncated(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.truncated(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| self.truncated(what))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.cur.read_f64::<LittleEndian>().map_err(|_| self.truncated(what))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.offset();
        let raw = self.bytes(n, what)?;
        String::from_utf8(raw).map_err(|_| Error::format(self.path, start, format!("{what} is not UTF-8")))
    }

    fn floats(&mut self, n: usize, dtype: Dtype, what: &str) -> Result<Vec<f64>> {
        let width = dtype.width();
        let remaining = self.cur.get_ref().len() as u64 - self.offset();
        if (n as u64).saturating_mul(width) > remaining {
            return Err(self.err(format!("{what}: need {n} values, only {remaining} bytes left")));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(match dtype {
                Dtype::F64 => self.f64(what)?,
                Dtype::F32 => self.cur.read_f32::<LittleEndian>().map_err(|_| self.truncated(what))? as f64,
            });
        }
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.offset() as usize != self.cur.get_ref().len() {
            return Err(self.err("trailing bytes after end of data"));
        }
        Ok(())
    }
}

/// Writes `[rows, cols]` features as little-endian f32 after the AFK1 header.
pub fn save_feature_file(path: &Path, features: &FeatureSequence) -> Result<()> {
    let t = features.tensor();
    let mut buf = Vec::with_capacity(12 + 4 * t.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.write_u32::<LittleEndian>(features.frames() as u32).expect("vec write");
    buf.write_u32::<LittleEndian>(features.dim() as u32).expect("vec write");
    for &v in t.data() {
        buf.write_f32::<LittleEndian>(v as f32).expect("vec write");
    }
    write_file(path, &buf)
}

pub fn load_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(path, &bytes);
    let magic = r.bytes(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {magic:?}, expected AFK1")));
    }
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, 4, format!("empty feature matrix {rows}x{cols}")));
    }
    let data = r.floats(rows * cols, Dtype::F32, "feature values")?;
    r.expect_end()?;
    FeatureSequence::new(Tensor::new(vec![rows, cols], data)?)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, 0, other.to_string()),
    }
}

fn encode_pnm(path: &Path, data: &[u8], w: usize, h: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| image_error(path, e))?;
    write_file(path, &buf)
}

fn decode_pnm(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_file(path)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).map_err(|e| image_error(path, e))
}

/// Binary PGM whose gray level is the label id.
pub fn save_mask(path: &Path, grid: &LabelGrid) -> Result<()> {
    encode_pnm(
        path,
        grid.labels(),
        grid.width(),
        grid.height(),
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

pub fn load_mask(path: &Path) -> Result<LabelGrid> {
    match decode_pnm(path)? {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            LabelGrid::new(h as usize, w as usize, img.into_raw())
        }
        other => Err(Error::format(path, 0, format!("expected 8-bit graymap, got {:?}", other.color()))),
    }
}

/// Binary PPM from a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::dim("save_rgb", image.shape(), &[3, 0, 0]));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            raw.push((image.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode_pnm(path, &raw, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = decode_pnm(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// One token per line; the line number is the token id.
pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| Error::format(path, 0, e.to_string()))
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub features: PathBuf,
    pub command: String,
    pub action: String,
    pub bbox: Option<BoundingBox>,
    pub mask: Option<PathBuf>,
}

/// Tab-separated records: `id, features, command, action[, x1,y1,x2,y2, mask]`.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

fn line_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').map(move |l| {
        let start = offset;
        offset += l.len() as u64;
        (start, l.trim_end_matches(['\n', '\r']))
    })
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (offset, line) in line_offsets(&text) {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format(path, offset, msg);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 && f.len() != 6 {
                return Err(bad(format!("expected 4 or 6 tab-separated fields, got {}", f.len())));
            }
            if !ids.insert(f[0].to_string()) {
                return Err(bad(format!("duplicate id {:?}", f[0])));
            }
            let resolve = |p: &str| -> Result<PathBuf> {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(bad(format!("referenced file {} does not exist", full.display())));
                }
                Ok(full)
            };
            let (bbox, mask) = if f.len() == 6 {
                let c: Vec<f64> = f[4]
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad box {:?}", f[4])))?;
                if c.len() != 4 {
                    return Err(bad(format!("box needs 4 coordinates, got {}", c.len())));
                }
                let b = BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))?;
                (Some(b), Some(resolve(f[5])?))
            } else {
                (None, None)
            };
            records.push(ManifestRecord {
                id: f[0].to_string(),
                features: resolve(f[1])?,
                command: f[2].to_string(),
                action: f[3].to_string(),
                bbox,
                mask,
            });
        }
        Ok(Self { records })
    }

    /// Writes paths relative to `path`'s directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}", r.id, rel(&r.features), r.command, r.action));
            if let (Some(b), Some(m)) = (&r.bbox, &r.mask) {
                out.push_str(&format!("\t{},{},{},{}\t{}", b.x1, b.y1, b.x2, b.y2, rel(m)));
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    /// Seeded shuffle, then the first `round(train_fraction · n)` records train.
    pub fn split(&self, seed: u64, train_fraction: f64) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::param(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        SeededRng::new(seed).shuffle(&mut order);
        let n_train = (train_fraction * order.len() as f64).round() as usize;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.records[i].clone()).collect();
        Ok((pick(&order[..n_train]), pick(&order[n_train..])))
    }
}

/// Storage precision of checkpoint tensors. Only `F64` round-trips exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> u64 {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Parameters, optimizer state and run metadata. `meta` is free-form text
/// (the CLI stores model configuration JSON there).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub dtype: Dtype,
    pub meta: String,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

fn put_floats(buf: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    for &v in values {
        match dtype {
            Dtype::F64 => buf.write_f64::<LittleEndian>(v),
            Dtype::F32 => buf.write_f32::<LittleEndian>(v as f32),
        }
        .expect("vec write");
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    buf.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        buf.write_u64::<LittleEndian>(self.seed).expect("vec write");
        buf.write_u64::<LittleEndian>(self.step).expect("vec write");
        buf.push(self.dtype.tag());
        put_str(&mut buf, &self.meta);
        buf.write_u32::<LittleEndian>(self.params.len() as u32).expect("vec write");
        for id in self.params.ids() {
            put_str(&mut buf, self.params.name(id));
            buf.push(match self.params.kind(id) {
                ParamKind::Weight => 0,
                ParamKind::Bias => 1,
            });
            let t = self.params.get(id);
            buf.write_u32::<LittleEndian>(t.ndim() as u32).expect("vec write");
            for &d in t.shape() {
                buf.write_u32::<LittleEndian>(d as u32).expect("vec write");
            }
            put_floats(&mut buf, t.data(), self.dtype);
        }
        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                    buf.write_f64::<LittleEndian>(v).expect("vec write");
                }
                buf.write_u64::<LittleEndian>(opt.step).expect("vec write");
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_floats(&mut buf, m, self.dtype);
                    put_floats(&mut buf, v, self.dtype);
                }
            }
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, 4, format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let dtype = match r.u8("dtype")? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            t => return Err(Error::format(path, r.offset() - 1, format!("unknown dtype tag {t}"))),
        };
        let meta = r.string("metadata")?;
        let n = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let at = r.offset();
            let name = r.string("parameter name")?;
            let kind = match r.u8("parameter kind")? {
                0 => ParamKind::Weight,
                1 => ParamKind::Bias,
                k => return Err(Error::format(path, r.offset() - 1, format!("unknown parameter kind {k}"))),
            };
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.u32("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = r.floats(len, dtype, &name)?;
            params
                .add(name, Tensor::new(shape, data)?, kind)
                .map_err(|e| Error::format(path, at, e.to_string()))?;
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let hyper: Vec<f64> = (0..4).map(|_| r.f64("optimizer settings")).collect::<Result<_>>()?;
                let opt_step = r.u64("optimizer step")?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for t in params.values() {
                    m.push(r.floats(t.len(), dtype, "first moment")?);
                    v.push(r.floats(t.len(), dtype, "second moment")?);
                }
                Some(Adam {
                    lr: hyper[0],
                    beta1: hyper[1],
                    beta2: hyper[2],
                    eps: hyper[3],
                    step: opt_step,
                    m,
                    v,
                })
            }
            f => return Err(Error::format(path, r.offset() - 1, format!("bad optimizer flag {f}"))),
        };
        r.expect_end()?;
        Ok(Self {
            seed,
            step,
            dtype,
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }

    /// Copies every stored parameter into `store`, matching by name. The
    /// sets of names and all shapes must agree.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for id in self.params.ids() {
            let name = self.params.name(id);
            let target = store
                .id(name)
                .ok_or_else(|| Error::contract(format!("model has no parameter {name}")))?;
            store.set(target, self.params.get(id).clone())?;
        }
        Ok(())
    }
}

/// Plain `key = value` lines; `#` starts a comment line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValueConfig {
    pub entries: BTreeMap<String, String>,
}

impl KeyValueConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (offset, line) in line_offsets(text) {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, offset, format!("expected key=value, got {line:?}")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
        Self::parse(path, &text)
    }

    /// Typed lookup; `Ok(None)` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::param(format!("config value {key}={v:?} does not parse"))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }
}

pub const SCENE_INDEX: &str = "scenes.tsv";

/// Writes [`SCENE_INDEX`] plus a PPM image and a PGM label map per scene.
/// Index lines hold `id, image, labels, objects`, objects being
/// `class:x1,y1,x2,y2` items joined by `;`. Images are stored as bytes.
pub fn save_scene_set(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    let mut index = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let (img, lab) = (format!("scene_{i:04}.ppm"), format!("labels_{i:04}.pgm"));
        save_rgb(&dir.join(&img), &s.image)?;
        save_mask(&dir.join(&lab), &s.labels)?;
        let objs: Vec<String> = s
            .objects
            .iter()
            .map(|o| format!("{}:{},{},{},{}", o.class_id, o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2))
            .collect();
        index.push_str(&format!("scene_{i:04}\t{img}\t{lab}\t{}\n", objs.join(";")));
    }
    write_file(&dir.join(SCENE_INDEX), index.as_bytes())
}

pub fn load_scene_set(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let path = dir.join(SCENE_INDEX);
    let bytes = read_file(&path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(&path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
    let mut scenes = Vec::new();
    for (offset, line) in line_offsets(&text) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(&path, offset, msg);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        let image = load_rgb(&dir.join(f[1]))?;
        let labels = load_mask(&dir.join(f[2]))?;
        if image.shape()[1..] != [labels.height(), labels.width()] {
            return Err(bad("image and label map sizes differ".into()));
        }
        let mut objects = Vec::new();
        for item in f[3].split(';').filter(|s| !s.is_empty()) {
            let parsed = item.split_once(':').and_then(|(c, b)| {
                let class_id = c.parse::<usize>().ok()?;
                let v: Vec<f64> = b.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
                (v.len() == 4).then_some((class_id, v))
            });
            let (class_id, v) = parsed.ok_or_else(|| bad(format!("bad object {item:?}")))?;
            let bbox = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(e.to_string()))?;
            objects.push(SceneObject { bbox, class_id });
        }
        scenes.push(SyntheticScene { image, objects, labels });
    }
    Ok(scenes)
}
