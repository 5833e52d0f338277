//! On-disk formats.
//!
//! `.fbag` (all integers and floats little-endian):
//!
//! ```text
//! header   "FBAG" | version u8 = 1 | dim u32 | class_count u32 (0 = unknown) | bag_count u64
//! per bag  id_len u16 | id UTF-8 | label u32 (1-based, 0xFFFFFFFF = none) | n u32
//!          | has_positions u8 | n·dim f32 | [n·2 f32]
//! ```
//!
//! `.ml3w`:
//!
//! ```text
//! "ML3W" | version u8 = 1 | d u32 | k u32 | c u32 | q f64 (+inf for ∞) | lambda f64
//! | has_stats u8 | [mean d×f64 | std d×f64] | weights c×k×d f32 (class, prototype, dim)
//! ```
//!
//! The jsonl variant of the bag format holds one header object followed by one
//! bag per line, floats printed at f32 precision.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBag, StandardizationStats};
use crate::error::{invalid_input, Error, Result};
use crate::ml3::{PrototypeTensor, SmoothnessQ};

pub const BAG_MAGIC: &[u8; 4] = b"FBAG";
pub const MODEL_MAGIC: &[u8; 4] = b"ML3W";
pub const FORMAT_VERSION: u8 = 1;
pub const UNLABELED: u32 = u32::MAX;
/// Bytes in the `.fbag` header.
pub const BAG_HEADER_LEN: u64 = 21;
/// Bytes in the fixed part of the `.ml3w` header.
pub const MODEL_HEADER_LEN: u64 = 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BagFileHeader {
    pub dim: u32,
    pub class_count: u32,
    pub bag_count: u64,
}

/// Serialized size of one bag record.
pub fn bag_record_len(bag: &FeatureBag) -> u64 {
    let n = bag.len() as u64;
    let pos = if bag.positions.is_some() { 8 * n } else { 0 };
    2 + bag.image_id.len() as u64 + 4 + 4 + 1 + 4 * n * bag.dim() as u64 + pos
}

fn format_err<T>(offset: u64, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, message: message.into() })
}

/// Reader that tracks its byte offset for error messages.
struct Tracked<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Tracked<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return format_err(
                        start + read as u64,
                        format!("truncated {what}: expected {} bytes, found {read}", buf.len()),
                    )
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; count * 4];
        self.fill(&mut raw, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }
}

fn write_f32s<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> io::Result<()> {
    for v in values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit in u32")))
}

/// Writes the binary bag format.
pub fn write_bags_to<W: Write>(out: &mut W, dataset: &Dataset) -> Result<()> {
    out.write_all(BAG_MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    out.write_all(&to_u32(dataset.dim(), "dimension")?.to_le_bytes())?;
    out.write_all(&to_u32(dataset.class_count(), "class count")?.to_le_bytes())?;
    out.write_all(&(dataset.len() as u64).to_le_bytes())?;
    for bag in dataset.bags() {
        let id = bag.image_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidInput(format!("image id of {} bytes is too long", id.len())))?;
        out.write_all(&id_len.to_le_bytes())?;
        out.write_all(id)?;
        let label = match bag.label {
            Some(y) => to_u32(y + 1, "label")?,
            None => UNLABELED,
        };
        out.write_all(&label.to_le_bytes())?;
        out.write_all(&to_u32(bag.len(), "patch count")?.to_le_bytes())?;
        out.write_all(&[u8::from(bag.positions.is_some())])?;
        write_f32s(out, bag.patches.iter().copied())?;
        if let Some(pos) = &bag.positions {
            write_f32s(out, pos.iter().copied())?;
        }
    }
    Ok(())
}

pub fn write_bags(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_bags_to(&mut out, dataset)?;
    out.flush()?;
    Ok(())
}

/// Streaming reader over a binary bag file, one bag at a time.
pub struct BagReader<R> {
    src: Tracked<R>,
    header: BagFileHeader,
    remaining: u64,
}

impl<R: Read> BagReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut src = Tracked::new(reader);
        let magic = src.bytes::<4>("magic")?;
        if &magic != BAG_MAGIC {
            return format_err(0, format!("bad magic {magic:?}, expected \"FBAG\""));
        }
        let version = src.u8("version")?;
        if version != FORMAT_VERSION {
            return format_err(4, format!("unsupported version {version}"));
        }
        let dim = src.u32("dimension")?;
        let class_count = src.u32("class count")?;
        let bag_count = src.u64("bag count")?;
        if dim == 0 {
            return format_err(5, "dimension is zero");
        }
        Ok(Self {
            src,
            header: BagFileHeader { dim, class_count, bag_count },
            remaining: bag_count,
        })
    }

    pub fn header(&self) -> BagFileHeader {
        self.header
    }

    fn next_bag(&mut self) -> Result<FeatureBag> {
        let start = self.src.offset;
        let id_len = self.src.u16("image id length")? as usize;
        let mut id = vec![0u8; id_len];
        self.src.fill(&mut id, "image id")?;
        let image_id = String::from_utf8(id).map_err(|_| Error::Format {
            offset: start + 2,
            message: "image id is not UTF-8".into(),
        })?;
        let label_at = self.src.offset;
        let label = match self.src.u32("label")? {
            UNLABELED => None,
            0 => return format_err(label_at, "label 0 is invalid (labels are 1-based)"),
            y if self.header.class_count > 0 && y > self.header.class_count => {
                return format_err(
                    label_at,
                    format!("label {y} exceeds class count {}", self.header.class_count),
                )
            }
            y => Some(y as usize - 1),
        };
        let n_at = self.src.offset;
        let n = self.src.u32("patch count")? as usize;
        if n == 0 {
            return format_err(n_at, format!("bag '{image_id}' has no patches"));
        }
        let flag_at = self.src.offset;
        let has_positions = match self.src.u8("positions flag")? {
            0 => false,
            1 => true,
            other => return format_err(flag_at, format!("invalid positions flag {other}")),
        };
        let d = self.header.dim as usize;
        let patches = Array2::from_shape_vec((n, d), self.src.f32s(n * d, "patch payload")?).expect("sized");
        let positions = if has_positions {
            Some(Array2::from_shape_vec((n, 2), self.src.f32s(n * 2, "position payload")?).expect("sized"))
        } else {
            None
        };
        FeatureBag::new(image_id, label, patches, positions)
    }
}

impl<R: Read> Iterator for BagReader<R> {
    type Item = Result<FeatureBag>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let item = self.next_bag();
        if item.is_err() {
            self.remaining = 0;
        }
        Some(item)
    }
}

/// Reads a binary bag stream into memory.
pub fn read_bags_from<R: Read>(reader: R) -> Result<Dataset> {
    let mut bags_reader = BagReader::new(reader)?;
    let header = bags_reader.header();
    let bags = bags_reader.by_ref().collect::<Result<Vec<_>>>()?;
    let trailing = bags_reader.src.inner.read(&mut [0u8; 1])?;
    if trailing != 0 {
        return format_err(bags_reader.src.offset, "trailing bytes after the last bag");
    }
    let class_count = if header.class_count == 0 {
        bags.iter().filter_map(|b| b.label).max().map_or(0, |y| y + 1)
    } else {
        header.class_count as usize
    };
    Dataset::new(header.dim as usize, class_count, bags)
}

pub fn read_bags(path: &Path) -> Result<Dataset> {
    read_bags_from(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BagFormat {
    #[default]
    Bin,
    Jsonl,
}

impl BagFormat {
    /// `.jsonl` / `.json` extensions select jsonl.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => BagFormat::Jsonl,
            _ => BagFormat::Bin,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: u8,
    dim: usize,
    class_count: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonlBag {
    image_id: String,
    /// 1-based.
    label: Option<usize>,
    patches: Vec<Vec<f32>>,
    positions: Option<Vec<Vec<f32>>>,
}

fn rows_f32(m: &Array2<f64>) -> Vec<Vec<f32>> {
    m.rows().into_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect()
}

fn matrix_from_rows(rows: Vec<Vec<f32>>, width: usize, line: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * width);
    for row in rows {
        if row.len() != width {
            return format_err(line as u64, format!("line {line}: row of length {} (expected {width})", row.len()));
        }
        flat.extend(row.into_iter().map(f64::from));
    }
    Ok(Array2::from_shape_vec((n, width), flat).expect("sized"))
}

pub fn write_jsonl_to<W: Write>(out: &mut W, dataset: &Dataset) -> Result<()> {
    let header = JsonlHeader {
        format: "fbag-jsonl".into(),
        version: FORMAT_VERSION,
        dim: dataset.dim(),
        class_count: dataset.class_count(),
    };
    serde_json::to_writer(&mut *out, &header).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    for bag in dataset.bags() {
        let rec = JsonlBag {
            image_id: bag.image_id.clone(),
            label: bag.label.map(|y| y + 1),
            patches: rows_f32(&bag.patches),
            positions: bag.positions.as_ref().map(rows_f32),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses jsonl; error offsets are 1-based line numbers.
pub fn read_jsonl_from<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: JsonlHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?)
            .map_err(|e| Error::Format { offset: 1, message: format!("line 1: bad header: {e}") })?,
        None => return format_err(0, "empty jsonl file"),
    };
    if header.version != FORMAT_VERSION {
        return format_err(1, format!("line 1: unsupported version {}", header.version));
    }
    let mut ds = Dataset::new(header.dim, header.class_count, Vec::new())?;
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlBag = serde_json::from_str(&line)
            .map_err(|e| Error::Format { offset: lineno as u64, message: format!("line {lineno}: {e}") })?;
        let label = match rec.label {
            Some(0) => return format_err(lineno as u64, format!("line {lineno}: label 0 is invalid")),
            other => other.map(|y| y - 1),
        };
        let patches = matrix_from_rows(rec.patches, header.dim, lineno)?;
        let positions = rec.positions.map(|p| matrix_from_rows(p, 2, lineno)).transpose()?;
        ds.push(FeatureBag::new(rec.image_id, label, patches, positions)?)?;
    }
    Ok(ds)
}

/// Writes `dataset` in the requested format.
pub fn write_dataset(path: &Path, dataset: &Dataset, format: BagFormat) -> Result<()> {
    match format {
        BagFormat::Bin => write_bags(path, dataset),
        BagFormat::Jsonl => {
            let mut out = BufWriter::new(File::create(path)?);
            write_jsonl_to(&mut out, dataset)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Reads either bag format, detected from the first bytes.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = BufReader::new(File::open(path)?);
    let head = reader.fill_buf()?;
    if head.first() == Some(&b'{') {
        read_jsonl_from(reader)
    } else {
        read_bags_from(reader)
    }
}

/// A persisted prototype model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub weights: PrototypeTensor,
    pub stats: Option<StandardizationStats>,
}

pub fn model_file_len(d: usize, k: usize, c: usize, with_stats: bool) -> u64 {
    MODEL_HEADER_LEN + if with_stats { 16 * d as u64 } else { 0 } + 4 * (d * k * c) as u64
}

pub fn write_model_to<W: Write>(out: &mut W, w: &PrototypeTensor, stats: Option<&StandardizationStats>) -> Result<()> {
    let (c, k, d) = w.weights.dim();
    if let Some(s) = stats {
        if s.dim() != d {
            return invalid_input(format!("standardization has dimension {}, model has {d}", s.dim()));
        }
    }
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&[FORMAT_VERSION])?;
    for v in [d, k, c] {
        out.write_all(&to_u32(v, "model dimension")?.to_le_bytes())?;
    }
    out.write_all(&w.q.value().to_le_bytes())?;
    out.write_all(&w.lambda.to_le_bytes())?;
    out.write_all(&[u8::from(stats.is_some())])?;
    if let Some(s) = stats {
        for v in s.mean.iter().chain(&s.std) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    write_f32s(out, w.weights.iter().copied())?;
    Ok(())
}

pub fn write_model(path: &Path, w: &PrototypeTensor, stats: Option<&StandardizationStats>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model_to(&mut out, w, stats)?;
    out.flush()?;
    Ok(())
}

pub fn read_model_from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    let mut src = Tracked::new(bytes);
    let magic = src.bytes::<4>("magic")?;
    if &magic != MODEL_MAGIC {
        return format_err(0, format!("bad magic {magic:?}, expected \"ML3W\""));
    }
    let version = src.u8("version")?;
    if version != FORMAT_VERSION {
        return format_err(4, format!("unsupported version {version}"));
    }
    let d = src.u32("d")? as usize;
    let k = src.u32("k")? as usize;
    let c = src.u32("c")? as usize;
    if d == 0 || k == 0 || c == 0 {
        return format_err(5, format!("zero model dimension (d={d}, k={k}, c={c})"));
    }
    let q_raw = src.f64("q")?;
    let q = SmoothnessQ::new(q_raw).map_err(|_| Error::Format { offset: 17, message: format!("invalid q {q_raw}") })?;
    let lambda = src.f64("lambda")?;
    let has_stats = match src.u8("stats flag")? {
        0 => false,
        1 => true,
        other => return format_err(33, format!("invalid stats flag {other}")),
    };
    let expected = model_file_len(d, k, c, has_stats);
    if bytes.len() as u64 != expected {
        return format_err(
            bytes.len().min(expected as usize) as u64,
            format!("model payload length mismatch: expected {expected} bytes, found {}", bytes.len()),
        );
    }
    let stats = if has_stats {
        let mean = (0..d).map(|_| src.f64("mean")).collect::<Result<Vec<_>>>()?;
        let std = (0..d).map(|_| src.f64("std")).collect::<Result<Vec<_>>>()?;
        Some(StandardizationStats { mean, std })
    } else {
        None
    };
    let weights = Array3::from_shape_vec((c, k, d), src.f32s(c * k * d, "weights")?).expect("sized");
    let weights = PrototypeTensor::new(weights, q, lambda)
        .map_err(|e| Error::Format { offset: src.offset, message: e.to_string() })?;
    Ok(ModelFile { weights, stats })
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    read_model_from_bytes(&std::fs::read(path)?)
}

/// Which kind of model a file holds, from its magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Prototypes,
    /// A bag container whose labeled bags form the class supports.
    Supports,
}

pub fn sniff_model(path: &Path) -> Result<ModelKind> {
    let mut magic = [0u8; 4];
    File::open(path)?.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        message: format!("{} is too short to be a model", path.display()),
    })?;
    match &magic {
        m if m == MODEL_MAGIC => Ok(ModelKind::Prototypes),
        m if m == BAG_MAGIC => Ok(ModelKind::Supports),
        m => format_err(0, format!("unknown model magic {m:?}")),
    }
}

pub fn write_stats(path: &Path, stats: &StandardizationStats) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, stats).map_err(io::Error::from)?;
    out.flush()?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<StandardizationStats> {
    let stats: StandardizationStats =
        serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(io::Error::from)?;
    if stats.mean.len() != stats.std.len() {
        return invalid_input("standardization mean and std lengths differ");
    }
    Ok(stats)
}
