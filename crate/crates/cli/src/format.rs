//! Little-endian binary formats for datasets (`CCNS`) and checkpoints (`CCNW`).
//!
//! Writers go through a temporary file in the target directory and rename it
//! into place, so a reader never sees a half-written file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ccn_core::cylinder::PadMode;
use ccn_core::synthcam::{Dataset, Sample};
use ccn_core::tensor::Tensor;
use ccn_core::trainer::{Architecture, HeadMode, Model, NamedTensor};

pub const DATASET_MAGIC: &[u8; 4] = b"CCNS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCNW";
pub const DATASET_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

/// Bit pattern written for an unannotated azimuth.
pub const UNANNOTATED_BITS: u32 = 0x7fc0_0000;

pub const DATASET_HEADER_LEN: u64 = 16;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("byte {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("byte {offset}: file ends inside {what}")]
    Truncated { offset: u64, what: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] ccn_core::Error),
}

fn malformed<T>(offset: u64, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError::Malformed { offset, message: message.into() })
}

/// Counts bytes consumed so errors can name an offset.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), FormatError> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => return Err(FormatError::Truncated { offset: self.offset + done as u64, what: what.into() }),
                Ok(n) => done += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.bytes(what)?))
    }

    fn at_end(&mut self) -> Result<bool, FormatError> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Writes `path` atomically: the bytes land in a sibling temporary file
/// which is renamed over the target once complete.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_samples: u32,
    pub image_size: u16,
    pub n_classes: u16,
    pub n_views: u16,
}

impl DatasetHeader {
    pub fn record_len(&self) -> u64 {
        let px = u64::from(self.image_size) * u64::from(self.image_size);
        px * 4 + 2 + 4 + 16
    }
}

/// Yields samples one record at a time after validating the header.
pub struct DatasetReader<R> {
    cursor: Cursor<R>,
    header: DatasetHeader,
    read: u32,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<Self, FormatError> {
        let mut cursor = Cursor::new(inner);
        let magic = cursor.bytes::<4>("the magic number")?;
        if &magic != DATASET_MAGIC {
            return malformed(0, format!("bad magic {magic:?}, expected \"CCNS\""));
        }
        let version = cursor.u16("the version")?;
        if version != DATASET_VERSION {
            return malformed(4, format!("unsupported dataset version {version}"));
        }
        let n_samples = cursor.u32("the sample count")?;
        let image_size = cursor.u16("the image size")?;
        let n_classes = cursor.u16("the class count")?;
        let n_views = cursor.u16("the view count")?;
        if image_size == 0 {
            return malformed(10, "image size is zero");
        }
        if n_views == 0 || n_views % 2 != 0 {
            return malformed(14, format!("view count {n_views} is not a positive even number"));
        }
        Ok(Self { cursor, header: DatasetHeader { n_samples, image_size, n_classes, n_views }, read: 0 })
    }

    pub fn header(&self) -> DatasetHeader {
        self.header
    }

    /// Byte offset of the next unread byte.
    pub fn offset(&self) -> u64 {
        self.cursor.offset
    }

    fn record(&mut self) -> Result<Sample, FormatError> {
        let h = self.header;
        let i = self.read;
        let start = self.cursor.offset;
        let px = usize::from(h.image_size) * usize::from(h.image_size);
        let what = format!("record {i}");
        let mut raw = vec![0u8; px * 4];
        self.cursor.fill(&mut raw, &what)?;
        let image: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(j) = image.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return malformed(start + 4 * j as u64, format!("record {i}: pixel {j} is {} (outside [0, 1])", image[j]));
        }
        let label_at = self.cursor.offset;
        let label = self.cursor.u16(&what)?;
        if label > h.n_classes {
            return malformed(label_at, format!("record {i}: label {label} exceeds class count {}", h.n_classes));
        }
        let az_at = self.cursor.offset;
        let az = self.cursor.f32(&what)?;
        let azimuth = if az.is_nan() {
            if az.to_bits() != UNANNOTATED_BITS {
                return malformed(az_at, format!("record {i}: non-canonical NaN azimuth {:#010x}", az.to_bits()));
            }
            None
        } else if !(az.is_finite() && f64::from(az) > -std::f64::consts::PI && f64::from(az) <= std::f64::consts::PI) {
            return malformed(az_at, format!("record {i}: azimuth {az} outside (-pi, pi]"));
        } else if label == 0 {
            return malformed(az_at, format!("record {i}: background crop carries an azimuth"));
        } else {
            Some(az)
        };
        let box_at = self.cursor.offset;
        let mut bbox = [0f32; 4];
        for b in &mut bbox {
            *b = self.cursor.f32(&what)?;
        }
        if bbox.iter().any(|v| !v.is_finite()) || bbox[2] <= 0.0 || bbox[3] <= 0.0 {
            return malformed(box_at, format!("record {i}: invalid box {bbox:?}"));
        }
        Ok(Sample { image, label, azimuth, bbox })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Sample, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.header.n_samples {
            return None;
        }
        let r = self.record();
        // a broken record ends the stream
        self.read = if r.is_ok() { self.read + 1 } else { self.header.n_samples };
        Some(r)
    }
}

/// Reads a whole dataset, rejecting trailing bytes.
pub fn read_dataset_from(inner: impl Read) -> Result<Dataset, FormatError> {
    let mut reader = DatasetReader::new(inner)?;
    let h = reader.header();
    let mut samples = Vec::with_capacity(h.n_samples.min(1 << 20) as usize);
    for s in reader.by_ref() {
        samples.push(s?);
    }
    if !reader.cursor.at_end()? {
        return malformed(reader.offset(), format!("trailing bytes after {} records", h.n_samples));
    }
    Ok(Dataset {
        image_size: usize::from(h.image_size),
        n_classes: usize::from(h.n_classes),
        n_views: usize::from(h.n_views),
        samples,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, FormatError> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

fn header_for(data: &Dataset) -> Result<DatasetHeader, FormatError> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| FormatError::Malformed { offset: 0, message: format!("{what} {v} does not fit in 16 bits") })
    };
    Ok(DatasetHeader {
        n_samples: u32::try_from(data.len())
            .map_err(|_| FormatError::Malformed { offset: 0, message: "more than 2^32 samples".into() })?,
        image_size: narrow(data.image_size, "image size")?,
        n_classes: narrow(data.n_classes, "class count")?,
        n_views: narrow(data.n_views, "view count")?,
    })
}

pub fn write_dataset_to(w: &mut dyn Write, data: &Dataset) -> Result<(), FormatError> {
    data.validate()?;
    let h = header_for(data)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&h.n_samples.to_le_bytes())?;
    w.write_all(&h.image_size.to_le_bytes())?;
    w.write_all(&h.n_classes.to_le_bytes())?;
    w.write_all(&h.n_views.to_le_bytes())?;
    let mut buf = Vec::with_capacity(h.record_len() as usize);
    for s in &data.samples {
        buf.clear();
        for p in &s.image {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf.extend_from_slice(&s.label.to_le_bytes());
        let az = s.azimuth.map_or(UNANNOTATED_BITS, f32::to_bits);
        buf.extend_from_slice(&az.to_le_bytes());
        for b in &s.bbox {
            buf.extend_from_slice(&b.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn dataset_bytes(data: &Dataset) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    write_dataset_to(&mut out, data)?;
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), FormatError> {
    // serialise first so validation errors never touch the filesystem
    let bytes = dataset_bytes(data)?;
    write_atomic(path, |w| w.write_all(&bytes))?;
    Ok(())
}

// ------------------------------------------------------------- checkpoints

fn head_code(mode: HeadMode) -> u8 {
    match mode {
        HeadMode::Ccn => 0,
        HeadMode::Baseline => 1,
    }
}

fn pad_code(mode: PadMode) -> u8 {
    match mode {
        PadMode::Wrap => 0,
        PadMode::Flip => 1,
    }
}

pub fn write_checkpoint_to(w: &mut dyn Write, model: &Model) -> Result<(), FormatError> {
    let a = model.arch;
    let word = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| FormatError::Malformed { offset: 0, message: format!("{what} {v} does not fit in 32 bits") })
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (v, what) in [(a.k, "k"), (a.n_views, "n_views"), (a.n_classes, "n_classes"), (a.ch_in, "ch_in"), (a.ch_out, "ch_out")] {
        w.write_all(&word(v, what)?.to_le_bytes())?;
    }
    w.write_all(&[head_code(a.head_mode), pad_code(a.pad_mode)])?;
    w.write_all(&word(model.params.len(), "tensor count")?.to_le_bytes())?;
    for p in &model.params {
        w.write_all(&word(p.name.len(), "name length")?.to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let dims = p.tensor.shape();
        w.write_all(&word(dims.len(), "rank")?.to_le_bytes())?;
        for &d in dims {
            w.write_all(&word(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.data().len() * 8);
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    write_checkpoint_to(&mut out, model)?;
    Ok(out)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<(), FormatError> {
    let bytes = checkpoint_bytes(model)?;
    write_atomic(path, |w| w.write_all(&bytes))?;
    Ok(())
}

/// Longest tensor name accepted on read.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

pub fn read_checkpoint_from(inner: impl Read) -> Result<Model, FormatError> {
    let mut c = Cursor::new(inner);
    let magic = c.bytes::<4>("the magic number")?;
    if &magic != CHECKPOINT_MAGIC {
        return malformed(0, format!("bad magic {magic:?}, expected \"CCNW\""));
    }
    let version = c.u16("the version")?;
    if version != CHECKPOINT_VERSION {
        return malformed(4, format!("unsupported checkpoint version {version}"));
    }
    let mut dims5 = [0usize; 5];
    for d in &mut dims5 {
        *d = c.u32("the architecture block")? as usize;
    }
    let [k, n_views, n_classes, ch_in, ch_out] = dims5;
    let head_at = c.offset;
    let head_mode = match c.u8("the architecture block")? {
        0 => HeadMode::Ccn,
        1 => HeadMode::Baseline,
        other => return malformed(head_at, format!("unknown head mode code {other}")),
    };
    let pad_mode = match c.u8("the architecture block")? {
        0 => PadMode::Wrap,
        1 => PadMode::Flip,
        other => return malformed(head_at + 1, format!("unknown pad mode code {other}")),
    };
    let arch = Architecture { k, n_views, n_classes, ch_in, ch_out, head_mode, pad_mode };
    if let Err(e) = arch.validate() {
        return malformed(6, format!("invalid architecture: {e}"));
    }
    let count = c.u32("the tensor count")?;
    let mut params = Vec::new();
    for t in 0..count {
        let what = format!("tensor {t}");
        let len_at = c.offset;
        let name_len = c.u32(&what)?;
        if name_len > MAX_NAME_LEN {
            return malformed(len_at, format!("tensor {t}: name length {name_len} is implausible"));
        }
        let mut name = vec![0u8; name_len as usize];
        c.fill(&mut name, &what)?;
        let name = String::from_utf8(name).or_else(|_| malformed(len_at + 4, format!("tensor {t}: name is not UTF-8")))?;
        let rank_at = c.offset;
        let rank = c.u32(&what)?;
        if rank > MAX_RANK {
            return malformed(rank_at, format!("tensor {name}: rank {rank} is implausible"));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(c.u32(&what)? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(numel) = numel.filter(|&n| n <= (1 << 28)) else {
            return malformed(rank_at, format!("tensor {name}: shape {shape:?} is too large"));
        };
        let mut raw = vec![0u8; numel * 8];
        c.fill(&mut raw, &what)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        params.push(NamedTensor { name, tensor: Tensor::new(shape, data)? });
    }
    if !c.at_end()? {
        return malformed(c.offset, format!("trailing bytes after {count} tensors"));
    }
    Ok(Model::from_named(arch, params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Model, FormatError> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}
