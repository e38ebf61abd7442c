//! Reader and writer for the `.d2ht` trace container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `"D2HT"` |
//! | 4  | 2 | version (`1`) |
//! | 6  | 2 | flags: bit0 embedding layer, bit1 final-row attention, bit2 col-mean attention, bit3 label |
//! | 8  | 24 | `n_layers`, `t_gen`, `prompt_len`, `hidden_dim`, `n_heads`, `vocab_size` (`u32` each) |
//! | 32 | 4 | temperature (`f32`) |
//! | 36 | 1 | label (0 unknown, 1 correct, 2 hallucinated) |
//! | 37 | 7 | reserved, zero |
//!
//! The header is followed by the payload: every stored hidden matrix in
//! ascending layer order (row-major `f32`), the final-row attention vectors
//! then the col-mean attention vectors when flagged (`t_gen` `f32` per layer
//! `1..=L`), `t_gen` logit summaries (`max_prob`, `max_prob_temp`, `entropy`,
//! `energy` as `f32`), and a `u32`-length-prefixed UTF-8 metadata string. The
//! metadata string is the trace id, optionally followed by `'\n'` and a JSON
//! object. A CRC32 (IEEE) of the payload closes the file.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::FormatError;
use crate::record::Label;
use crate::trace::{validate_trace, AttnReduction, Matrix, TokenLogitSummary, Trace, TraceMeta};

pub const MAGIC: [u8; 4] = *b"D2HT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 44;
pub const EXTENSION: &str = "d2ht";

const FLAG_EMBEDDING: u16 = 1 << 0;
const FLAG_FINAL_ROW: u16 = 1 << 1;
const FLAG_COL_MEAN: u16 = 1 << 2;
const FLAG_LABEL: u16 = 1 << 3;
const KNOWN_FLAGS: u16 = FLAG_EMBEDDING | FLAG_FINAL_ROW | FLAG_COL_MEAN | FLAG_LABEL;

/// Serializes a trace into a byte vector. Rejects invalid traces.
pub fn encode_trace(trace: &Trace<f32>) -> Result<Vec<u8>, FormatError> {
    let violations = validate_trace(trace);
    if !violations.is_empty() {
        return Err(FormatError::InvalidTrace(violations));
    }
    let meta = &trace.meta;
    let u32_field = |name: &str, v: usize| {
        u32::try_from(v).map_err(|_| FormatError::InvalidHeader(format!("{name} exceeds u32")))
    };

    let mut flags = 0u16;
    if meta.has_embedding_layer {
        flags |= FLAG_EMBEDDING;
    }
    if meta.attn_reduction.has_final_row() {
        flags |= FLAG_FINAL_ROW;
    }
    if meta.attn_reduction.has_col_mean() {
        flags |= FLAG_COL_MEAN;
    }
    if meta.label.is_some() {
        flags |= FLAG_LABEL;
    }

    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len(meta).unwrap_or(0) + 64);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    for (name, v) in [
        ("n_layers", meta.n_layers),
        ("t_gen", meta.t_gen),
        ("prompt_len", meta.prompt_len),
        ("hidden_dim", meta.hidden_dim),
        ("n_heads", meta.n_heads),
        ("vocab_size", meta.vocab_size),
    ] {
        buf.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
    }
    buf.extend_from_slice(&meta.temperature.to_le_bytes());
    buf.push(meta.label.map_or(0, Label::code));
    buf.extend_from_slice(&[0u8; 7]);
    debug_assert_eq!(buf.len(), HEADER_LEN);

    let mut put = |v: f32| buf.extend_from_slice(&v.to_le_bytes());
    for m in &trace.hidden {
        m.as_slice().iter().copied().for_each(&mut put);
    }
    for layers in [&trace.attn_final_row, &trace.attn_col_mean]
        .into_iter()
        .flatten()
    {
        layers.iter().flatten().copied().for_each(&mut put);
    }
    for s in &trace.logit_summaries {
        [s.max_prob, s.max_prob_temp, s.entropy, s.energy]
            .into_iter()
            .for_each(&mut put);
    }

    let mut metadata = meta.trace_id.clone();
    if let Some(extra) = &trace.extra {
        metadata.push('\n');
        metadata.push_str(extra);
    }
    buf.extend_from_slice(&u32_field("metadata length", metadata.len())?.to_le_bytes());
    buf.extend_from_slice(metadata.as_bytes());

    let crc = crc32fast::hash(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes a trace to `sink`, returning the number of bytes written.
///
/// Nothing is written when the trace fails validation.
pub fn write_trace<W: Write>(trace: &Trace<f32>, mut sink: W) -> Result<u64, FormatError> {
    let bytes = encode_trace(trace)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len() as u64)
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &Trace<f32>) -> Result<u64, FormatError> {
    let bytes = encode_trace(trace)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len() as u64)
}

/// Reads one trace from `source`, consuming it to the end.
pub fn read_trace<R: Read>(mut source: R) -> Result<Trace<f32>, FormatError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Trace<f32>, FormatError> {
    decode_trace(&fs::read(path)?)
}

/// Bytes between the header and the metadata length prefix.
fn payload_len(meta: &TraceMeta) -> Option<usize> {
    let hidden = meta
        .stored_layers()
        .checked_mul(meta.t_gen)?
        .checked_mul(meta.hidden_dim)?;
    let attn_vectors = usize::from(meta.attn_reduction.has_final_row())
        + usize::from(meta.attn_reduction.has_col_mean());
    let attn = attn_vectors
        .checked_mul(meta.n_layers)?
        .checked_mul(meta.t_gen)?;
    let summaries = meta.t_gen.checked_mul(4)?;
    hidden
        .checked_add(attn)?
        .checked_add(summaries)?
        .checked_mul(4)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::UnexpectedEof {
                offset: self.bytes.len(),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::UnexpectedEof {
            offset: self.bytes.len(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a complete `.d2ht` image.
pub fn decode_trace(bytes: &[u8]) -> Result<Trace<f32>, FormatError> {
    let magic_seen = &bytes[..bytes.len().min(4)];
    if magic_seen != &MAGIC[..magic_seen.len()] {
        return Err(FormatError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 0 };
    cur.take(4)?;
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let flags = cur.u16()?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = cur.u32()? as usize;
    }
    let [n_layers, t_gen, prompt_len, hidden_dim, n_heads, vocab_size] = dims;
    let temperature = cur.f32()?;
    let label_code = cur.take(1)?[0];
    let reserved = cur.take(7)?;

    if reserved.iter().any(|&b| b != 0) {
        return Err(FormatError::InvalidHeader(
            "reserved bytes are not zero".into(),
        ));
    }
    if flags & !KNOWN_FLAGS != 0 {
        return Err(FormatError::InvalidHeader(format!(
            "unknown flag bits {flags:#06x}"
        )));
    }
    let label = if flags & FLAG_LABEL != 0 {
        Some(Label::from_code(label_code).ok_or_else(|| {
            FormatError::InvalidHeader(format!("invalid label code {label_code}"))
        })?)
    } else if label_code != 0 {
        return Err(FormatError::InvalidHeader(
            "label byte set without label flag".into(),
        ));
    } else {
        None
    };

    let mut meta = TraceMeta {
        n_layers,
        has_embedding_layer: flags & FLAG_EMBEDDING != 0,
        t_gen,
        prompt_len,
        hidden_dim,
        n_heads,
        vocab_size,
        temperature,
        attn_reduction: AttnReduction::from_parts(
            flags & FLAG_FINAL_ROW != 0,
            flags & FLAG_COL_MEAN != 0,
        ),
        trace_id: String::new(),
        label,
    };

    // Structure first, so truncation reports an offset; then the checksum,
    // before any payload value is interpreted.
    let data_len = payload_len(&meta)
        .ok_or_else(|| FormatError::InvalidHeader("dimensions overflow".into()))?;
    let mut probe = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    probe.take(data_len)?;
    let meta_len = probe.u32()? as usize;
    probe.take(meta_len)?;
    let crc_offset = probe.pos;
    let stored_crc = probe.u32()?;
    if probe.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: probe.pos,
            count: bytes.len() - probe.pos,
        });
    }
    let actual_crc = crc32fast::hash(&bytes[HEADER_LEN..crc_offset]);
    if actual_crc != stored_crc {
        return Err(FormatError::CorruptPayload {
            expected: stored_crc,
            found: actual_crc,
        });
    }

    let hidden = (0..meta.stored_layers())
        .map(|_| {
            cur.f32s(t_gen * hidden_dim)
                .map(|v| Matrix::from_vec(t_gen, hidden_dim, v))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut read_attn = |present: bool| -> Result<Option<Vec<Vec<f32>>>, FormatError> {
        if !present {
            return Ok(None);
        }
        (0..n_layers)
            .map(|_| cur.f32s(t_gen))
            .collect::<Result<_, _>>()
            .map(Some)
    };
    let attn_final_row = read_attn(meta.attn_reduction.has_final_row())?;
    let attn_col_mean = read_attn(meta.attn_reduction.has_col_mean())?;
    let logit_summaries = (0..t_gen)
        .map(|_| {
            Ok(TokenLogitSummary {
                max_prob: cur.f32()?,
                max_prob_temp: cur.f32()?,
                entropy: cur.f32()?,
                energy: cur.f32()?,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let meta_len = cur.u32()? as usize;
    let metadata = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|e| FormatError::InvalidMetadata(e.to_string()))?;
    let (trace_id, extra) = match metadata.split_once('\n') {
        Some((id, extra)) => (id.to_owned(), Some(extra.to_owned())),
        None => (metadata.to_owned(), None),
    };
    meta.trace_id = trace_id;

    let trace = Trace {
        meta,
        hidden,
        attn_final_row,
        attn_col_mean,
        logit_summaries,
        extra,
    };
    let violations = validate_trace(&trace);
    if !violations.is_empty() {
        return Err(FormatError::InvalidTrace(violations));
    }
    Ok(trace)
}

/// `*.d2ht` files in `dir`, sorted by file name.
pub fn list_trace_files(dir: impl AsRef<Path>) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == EXTENSION) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// A decode failure for one file of a trace directory.
#[derive(Debug)]
pub struct DirError {
    pub path: PathBuf,
    pub error: FormatError,
}

impl std::fmt::Display for DirError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.error)
    }
}

impl std::error::Error for DirError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Lazy reader over a directory of traces, decoding one file per step.
///
/// In strict mode the first decode failure is yielded as an error and ends
/// the iteration. Otherwise failing files are skipped and collected in
/// [`TraceDir::errors`].
pub struct TraceDir {
    files: std::vec::IntoIter<PathBuf>,
    strict: bool,
    done: bool,
    errors: Vec<DirError>,
}

pub fn open_trace_dir(path: impl AsRef<Path>, strict: bool) -> std::io::Result<TraceDir> {
    Ok(TraceDir {
        files: list_trace_files(path)?.into_iter(),
        strict,
        done: false,
        errors: Vec::new(),
    })
}

impl TraceDir {
    pub fn errors(&self) -> &[DirError] {
        &self.errors
    }
}

impl Iterator for TraceDir {
    type Item = Result<(PathBuf, Trace<f32>), DirError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        for path in self.files.by_ref() {
            match read_trace_file(&path) {
                Ok(t) => return Some(Ok((path, t))),
                Err(error) if self.strict => {
                    self.done = true;
                    return Some(Err(DirError { path, error }));
                }
                Err(error) => self.errors.push(DirError { path, error }),
            }
        }
        self.done = true;
        None
    }
}
