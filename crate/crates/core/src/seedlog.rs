//! Seed logs: a training run as its `(seed, proj_grad)` records.
//!
//! # `.zolog` layout
//!
//! Little-endian, no padding. Header (60 bytes):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `ZOLG` |
//! | 4  | 2 | version (1) |
//! | 6  | 2 | flags; bit 0 set when `proj_grad` is stored as f64 |
//! | 8  | 8 | master seed |
//! | 16 | 8 | schema hash of the trained selection |
//! | 24 | 8 | ε (f64) |
//! | 32 | 8 | η (f64) |
//! | 40 | 4 | q |
//! | 44 | 1 | combine: 0 accumulate, 1 mean |
//! | 45 | 1 | sampler: 0 full, 1 low-rank, 2 low-rank normalized |
//! | 46 | 1 | parameter element width in bytes (4 or 8) |
//! | 47 | 1 | reserved (0) |
//! | 48 | 4 | low-rank rank (0 for full) |
//! | 52 | 8 | record count |
//!
//! Then `record count` records of `seed u64` followed by `proj_grad` as f32
//! (12 bytes per record) or f64 (16 bytes), in execution order: step-major,
//! query-minor.

use std::io::{Read, Seek, SeekFrom, Write};

use serde::Serialize;

use crate::error::{Result, ZoError};
use crate::optimizer::{apply_query, effective_lr, Combine, ZoConfig};
use crate::param_store::{ElementWidth, ParamSet, Selection};
use crate::sampler::SamplerKind;

pub const MAGIC: &[u8; 4] = b"ZOLG";
pub const VERSION: u16 = 1;
pub const HEADER_SIZE: usize = 60;
const FLAG_F64_GRAD: u16 = 1;
const COUNT_OFFSET: u64 = 52;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeedLogHeader {
    pub master_seed: u64,
    pub schema_hash: u64,
    pub epsilon: f64,
    pub lr: f64,
    pub q: u32,
    pub combine: Combine,
    pub sampler: SamplerKind,
    pub param_width: ElementWidth,
    pub grad_width: ElementWidth,
    pub record_count: u64,
}

impl SeedLogHeader {
    pub fn for_run(config: &ZoConfig, selection: &Selection, param_width: ElementWidth) -> Self {
        Self {
            master_seed: config.master_seed,
            schema_hash: selection.schema_hash(),
            epsilon: config.epsilon,
            lr: config.lr,
            q: config.q as u32,
            combine: config.combine,
            sampler: config.sampler,
            param_width,
            grad_width: config.grad_precision,
            record_count: 0,
        }
    }

    pub fn record_size(&self) -> usize {
        8 + self.grad_width.bytes()
    }

    pub fn effective_lr(&self) -> f64 {
        effective_lr(self.lr, self.q.max(1) as usize, self.combine)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&VERSION.to_le_bytes());
        let flags = if self.grad_width == ElementWidth::F64 { FLAG_F64_GRAD } else { 0 };
        b[6..8].copy_from_slice(&flags.to_le_bytes());
        b[8..16].copy_from_slice(&self.master_seed.to_le_bytes());
        b[16..24].copy_from_slice(&self.schema_hash.to_le_bytes());
        b[24..32].copy_from_slice(&self.epsilon.to_le_bytes());
        b[32..40].copy_from_slice(&self.lr.to_le_bytes());
        b[40..44].copy_from_slice(&self.q.to_le_bytes());
        b[44] = match self.combine {
            Combine::Accumulate => 0,
            Combine::Mean => 1,
        };
        let (code, rank) = match self.sampler {
            SamplerKind::Full => (0, 0),
            SamplerKind::LowRank { rank, normalize: false } => (1, rank as u32),
            SamplerKind::LowRank { rank, normalize: true } => (2, rank as u32),
        };
        b[45] = code;
        b[46] = self.param_width.bytes() as u8;
        b[48..52].copy_from_slice(&rank.to_le_bytes());
        b[52..60].copy_from_slice(&self.record_count.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_SIZE {
            if b.len() >= 4 && &b[0..4] != MAGIC {
                return Err(ZoError::Corrupt("bad seed-log magic".into()));
            }
            return Err(ZoError::Truncated(format!("seed-log header is {} of {HEADER_SIZE} bytes", b.len())));
        }
        if &b[0..4] != MAGIC {
            return Err(ZoError::Corrupt("bad seed-log magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes(b[i..i + 2].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(ZoError::Version { found: version, expected: VERSION });
        }
        let flags = u16_at(6);
        if flags & !FLAG_F64_GRAD != 0 {
            return Err(ZoError::Corrupt(format!("unknown seed-log flags {flags:#06x}")));
        }
        let combine = match b[44] {
            0 => Combine::Accumulate,
            1 => Combine::Mean,
            c => return Err(ZoError::Corrupt(format!("unknown combine code {c}"))),
        };
        let rank = u32_at(48) as usize;
        let sampler = match b[45] {
            0 => SamplerKind::Full,
            1 => SamplerKind::LowRank { rank, normalize: false },
            2 => SamplerKind::LowRank { rank, normalize: true },
            c => return Err(ZoError::Corrupt(format!("unknown sampler code {c}"))),
        };
        sampler.validate().map_err(|e| ZoError::Corrupt(e.to_string()))?;
        let param_width = ElementWidth::from_code(b[46])?;
        let epsilon = f64::from_le_bytes(b[24..32].try_into().unwrap());
        if !(epsilon > 0.0) {
            return Err(ZoError::Corrupt(format!("epsilon {epsilon} in header")));
        }
        Ok(Self {
            master_seed: u64_at(8),
            schema_hash: u64_at(16),
            epsilon,
            lr: f64::from_le_bytes(b[32..40].try_into().unwrap()),
            q: u32_at(40),
            combine,
            sampler,
            param_width,
            grad_width: if flags & FLAG_F64_GRAD != 0 { ElementWidth::F64 } else { ElementWidth::F32 },
            record_count: u64_at(52),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub seed: u64,
    pub proj_grad: f64,
}

/// An in-memory seed log.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedLog {
    header: SeedLogHeader,
    records: Vec<LogRecord>,
}

impl SeedLog {
    pub fn new(header: SeedLogHeader) -> Self {
        Self { header: SeedLogHeader { record_count: 0, ..header }, records: Vec::new() }
    }

    pub fn header(&self) -> &SeedLogHeader {
        &self.header
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record, rounding `proj_grad` to the header's precision.
    pub fn push(&mut self, record: LogRecord) {
        let proj_grad = match self.header.grad_width {
            ElementWidth::F32 => f64::from(record.proj_grad as f32),
            ElementWidth::F64 => record.proj_grad,
        };
        self.records.push(LogRecord { proj_grad, ..record });
        self.header.record_count = self.records.len() as u64;
    }

    /// The first `n` records.
    pub fn prefix(&self, n: usize) -> SeedLog {
        let records = self.records[..n.min(self.records.len())].to_vec();
        let header = SeedLogHeader { record_count: records.len() as u64, ..self.header };
        SeedLog { header, records }
    }

    pub fn byte_len(&self) -> usize {
        HEADER_SIZE + self.records.len() * self.header.record_size()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.header.to_bytes())?;
        for r in &self.records {
            write_record(&mut w, self.header.grad_width, r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = Vec::with_capacity(HEADER_SIZE);
        (&mut r).take(HEADER_SIZE as u64).read_to_end(&mut head)?;
        let header = SeedLogHeader::from_bytes(&head)?;
        let size = header.record_size();
        let mut records = Vec::with_capacity(header.record_count.min(1 << 24) as usize);
        let mut buf = [0u8; 16];
        for i in 0..header.record_count {
            read_exact_or_truncated(&mut r, &mut buf[..size], || {
                format!("seed log promises {} records, ended at {i}", header.record_count)
            })?;
            let seed = u64::from_le_bytes(buf[0..8].try_into().unwrap());
            let proj_grad = match header.grad_width {
                ElementWidth::F32 => f64::from(f32::from_le_bytes(buf[8..12].try_into().unwrap())),
                ElementWidth::F64 => f64::from_le_bytes(buf[8..16].try_into().unwrap()),
            };
            records.push(LogRecord { seed, proj_grad });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ZoError::Corrupt("trailing bytes after the last record".into()));
        }
        Ok(Self { header, records })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    fn check(&self, params: &ParamSet, selection: &Selection) -> Result<()> {
        selection.check(params)?;
        if selection.schema_hash() != self.header.schema_hash {
            return Err(ZoError::SchemaMismatch(format!(
                "log was written for schema {:#018x}, selection has {:#018x}",
                self.header.schema_hash,
                selection.schema_hash()
            )));
        }
        Ok(())
    }

    /// Applies every record in order, the same stage-2 update live training
    /// uses. With an empty log this is the identity.
    pub fn replay(&self, params: &mut ParamSet, selection: &Selection) -> Result<()> {
        self.check(params, selection)?;
        let h = &self.header;
        let lr = h.effective_lr();
        for r in &self.records {
            apply_query(params, selection, r.seed, r.proj_grad, lr, h.epsilon, h.sampler)?;
        }
        Ok(())
    }

    /// Undoes [`replay`](Self::replay): records in reverse order with the
    /// update negated.
    pub fn revert(&self, params: &mut ParamSet, selection: &Selection) -> Result<()> {
        self.check(params, selection)?;
        let h = &self.header;
        let lr = -h.effective_lr();
        for r in self.records.iter().rev() {
            apply_query(params, selection, r.seed, r.proj_grad, lr, h.epsilon, h.sampler)?;
        }
        Ok(())
    }

    pub fn inspect(&self) -> LogSummary {
        let n = self.records.len();
        let grads = self.records.iter().map(|r| r.proj_grad);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum, mut sum_abs, mut sum_sq) = (0.0, 0.0, 0.0);
        for g in grads {
            min = min.min(g);
            max = max.max(g);
            sum += g;
            sum_abs += g.abs();
            sum_sq += g * g;
        }
        let nf = n.max(1) as f64;
        LogSummary {
            header: self.header,
            records: n as u64,
            steps: if self.header.q == 0 { 0 } else { n as u64 / u64::from(self.header.q) },
            bytes: self.byte_len() as u64,
            mean_proj_grad: sum / nf,
            mean_abs_proj_grad: sum_abs / nf,
            rms_proj_grad: (sum_sq / nf).sqrt(),
            min_proj_grad: if n == 0 { 0.0 } else { min },
            max_proj_grad: if n == 0 { 0.0 } else { max },
        }
    }
}

fn write_record<W: Write>(w: &mut W, width: ElementWidth, r: &LogRecord) -> Result<()> {
    w.write_all(&r.seed.to_le_bytes())?;
    match width {
        ElementWidth::F32 => w.write_all(&(r.proj_grad as f32).to_le_bytes())?,
        ElementWidth::F64 => w.write_all(&r.proj_grad.to_le_bytes())?,
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], msg: impl FnOnce() -> String) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(ZoError::Truncated(msg())),
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogSummary {
    pub header: SeedLogHeader,
    pub records: u64,
    pub steps: u64,
    pub bytes: u64,
    pub mean_proj_grad: f64,
    pub mean_abs_proj_grad: f64,
    pub rms_proj_grad: f64,
    pub min_proj_grad: f64,
    pub max_proj_grad: f64,
}

impl std::fmt::Display for LogSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let h = &self.header;
        writeln!(f, "format        zolog v{VERSION}")?;
        writeln!(f, "master seed   {:#018x}", h.master_seed)?;
        writeln!(f, "schema hash   {:#018x}", h.schema_hash)?;
        writeln!(f, "epsilon       {}", h.epsilon)?;
        writeln!(f, "lr            {}", h.lr)?;
        writeln!(f, "q             {}", h.q)?;
        writeln!(f, "combine       {:?}", h.combine)?;
        writeln!(f, "sampler       {:?}", h.sampler)?;
        writeln!(f, "param width   {} bytes", h.param_width.bytes())?;
        writeln!(f, "grad width    {} bytes", h.grad_width.bytes())?;
        writeln!(f, "records       {}", self.records)?;
        writeln!(f, "steps         {}", self.steps)?;
        writeln!(f, "file size     {} bytes", self.bytes)?;
        writeln!(f, "proj_grad     mean {:.6e}  mean|.| {:.6e}  rms {:.6e}", self.mean_proj_grad, self.mean_abs_proj_grad, self.rms_proj_grad)?;
        write!(f, "              min {:.6e}  max {:.6e}", self.min_proj_grad, self.max_proj_grad)
    }
}

/// Streams records to a seekable sink and patches the header's record count
/// in [`finalize`](Self::finalize).
#[derive(Debug)]
pub struct SeedLogWriter<W: Write + Seek> {
    inner: W,
    header: SeedLogHeader,
    count: u64,
    finalized: bool,
}

impl<W: Write + Seek> SeedLogWriter<W> {
    pub fn create(mut inner: W, header: SeedLogHeader) -> Result<Self> {
        let header = SeedLogHeader { record_count: 0, ..header };
        inner.write_all(&header.to_bytes())?;
        Ok(Self { inner, header, count: 0, finalized: false })
    }

    pub fn append(&mut self, record: LogRecord) -> Result<()> {
        if self.finalized {
            return Err(ZoError::Usage("append after finalize".into()));
        }
        write_record(&mut self.inner, self.header.grad_width, &record)?;
        self.count += 1;
        Ok(())
    }

    pub fn append_all(&mut self, log: &SeedLog) -> Result<()> {
        log.records().iter().try_for_each(|r| self.append(*r))
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Writes the final record count and flushes. Later appends fail.
    pub fn finalize(&mut self) -> Result<()> {
        if self.finalized {
            return Ok(());
        }
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(self.start_offset(end) + COUNT_OFFSET))?;
        self.inner.write_all(&self.count.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        self.finalized = true;
        Ok(())
    }

    fn start_offset(&self, end: u64) -> u64 {
        end - HEADER_SIZE as u64 - self.count * self.header.record_size() as u64
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.finalize()?;
        Ok(self.inner)
    }
}

/// Writes `log` to a file at `path`.
pub fn save(log: &SeedLog, path: impl AsRef<std::path::Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = SeedLogWriter::create(std::io::BufWriter::new(file), *log.header())?;
    w.append_all(log)?;
    w.finalize()
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<SeedLog> {
    SeedLog::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn header() -> SeedLogHeader {
        SeedLogHeader {
            master_seed: 7,
            schema_hash: 0xABCD,
            epsilon: 1e-3,
            lr: 0.01,
            q: 4,
            combine: Combine::Accumulate,
            sampler: SamplerKind::lowrank(3),
            param_width: ElementWidth::F64,
            grad_width: ElementWidth::F32,
            record_count: 0,
        }
    }

    #[test]
    fn header_is_sixty_bytes_and_roundtrips() {
        let h = SeedLogHeader { record_count: 12, ..header() };
        let b = h.to_bytes();
        assert_eq!(b.len(), 60);
        assert_eq!(SeedLogHeader::from_bytes(&b).unwrap(), h);
        let m = SeedLogHeader { combine: Combine::Mean, sampler: SamplerKind::Full, grad_width: ElementWidth::F64, ..h };
        assert_eq!(SeedLogHeader::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn record_layout_is_fixed() {
        let mut log = SeedLog::new(header());
        log.push(LogRecord { seed: 0x0102_0304_0506_0708, proj_grad: 1.5 });
        let b = log.to_bytes();
        assert_eq!(b.len(), 72);
        assert_eq!(&b[60..68], &0x0102_0304_0506_0708u64.to_le_bytes());
        assert_eq!(&b[68..72], &1.5f32.to_le_bytes());
        assert_eq!(&b[52..60], &1u64.to_le_bytes());
    }

    #[test]
    fn writer_patches_count_and_rejects_late_appends() {
        let mut w = SeedLogWriter::create(Cursor::new(Vec::new()), header()).unwrap();
        for i in 0..5 {
            w.append(LogRecord { seed: i, proj_grad: i as f64 * 0.25 }).unwrap();
        }
        w.finalize().unwrap();
        let err = w.append(LogRecord { seed: 9, proj_grad: 0.0 }).unwrap_err();
        assert!(matches!(err, ZoError::Usage(_)));
        let bytes = w.into_inner().unwrap().into_inner();
        let log = SeedLog::from_bytes(&bytes).unwrap();
        assert_eq!(log.len(), 5);
        assert_eq!(log.records()[3], LogRecord { seed: 3, proj_grad: 0.75 });
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut log = SeedLog::new(header());
        log.push(LogRecord { seed: 1, proj_grad: 2.0 });
        let bytes = log.to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(SeedLog::from_bytes(&bad), Err(ZoError::Corrupt(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(SeedLog::from_bytes(&v), Err(ZoError::Version { found: 9, .. })));
        assert!(matches!(SeedLog::from_bytes(&bytes[..65]), Err(ZoError::Truncated(_))));
        assert!(matches!(SeedLog::from_bytes(&bytes[..30]), Err(ZoError::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(SeedLog::from_bytes(&long), Err(ZoError::Corrupt(_))));
    }

    #[test]
    fn summary_statistics() {
        let mut log = SeedLog::new(SeedLogHeader { q: 2, ..header() });
        for (i, g) in [1.0, -3.0, 0.5, 2.0].into_iter().enumerate() {
            log.push(LogRecord { seed: i as u64, proj_grad: g });
        }
        let s = log.inspect();
        assert_eq!((s.records, s.steps), (4, 2));
        assert_eq!(s.mean_abs_proj_grad, 6.5 / 4.0);
        assert_eq!((s.min_proj_grad, s.max_proj_grad), (-3.0, 2.0));
        assert!(s.to_string().contains("records       4"));
    }
}
