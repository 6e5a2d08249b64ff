//! Activation dump files.
//!
//! A dump holds one `[B, S, D]` activation tensor for a single
//! `(layer, step, tag)`. Binary layout, all integers little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `NRV1`                  |
//! | 4      | 4    | version (u32, currently 1)    |
//! | 8      | 4    | dtype (u32: 0 = f32, 1 = f64) |
//! | 12     | 4    | B (u32)                       |
//! | 16     | 4    | S (u32)                       |
//! | 20     | 4    | D (u32)                       |
//! | 24     | 4    | layer (u32)                   |
//! | 28     | 8    | step (u64)                    |
//! | 36     | 1    | tag (u8: 0 = pre, 1 = post)   |
//! | 37     | 27   | reserved, written as zero     |
//!
//! The payload follows immediately: `B·S·D` values, row-major, batch-major
//! then sequence, so token `(b, s)` lands on row `b·S + s`.
//!
//! Hand-written fixtures may use the CSV fallback instead: an optional
//! literal `B,S,D,layer,step,tag` line, one line of those values, then
//! `B·S` lines of `D` comma-separated numbers.

use std::fmt;
use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

pub const MAGIC: [u8; 4] = *b"NRV1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

const CSV_FIELD_NAMES: [&str; 6] = ["B", "S", "D", "layer", "step", "tag"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Which side of the nonlinearity a tensor was captured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Pre,
    Post,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Pre => "pre",
            Tag::Post => "post",
        }
    }

    fn code(self) -> u8 {
        match self {
            Tag::Pre => 0,
            Tag::Post => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Tag::Pre),
            1 => Ok(Tag::Post),
            other => Err(Error::Format(format!("unknown tag code {other}"))),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" | "0" => Ok(Tag::Pre),
            "post" | "1" => Ok(Tag::Post),
            other => Err(Error::Format(format!("unknown tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub dtype: Dtype,
    pub batch: u32,
    pub seq_len: u32,
    pub feature_dim: u32,
    pub layer: u32,
    pub step: u64,
    pub tag: Tag,
}

impl DumpHeader {
    pub fn new(
        dtype: Dtype,
        batch: u32,
        seq_len: u32,
        feature_dim: u32,
        layer: u32,
        step: u64,
        tag: Tag,
    ) -> Self {
        DumpHeader {
            version: VERSION,
            dtype,
            batch,
            seq_len,
            feature_dim,
            layer,
            step,
            tag,
        }
    }

    /// `B·S`, or `None` on overflow.
    pub fn tokens(&self) -> Option<u64> {
        (self.batch as u64).checked_mul(self.seq_len as u64)
    }

    /// Declared payload size in bytes, or `None` on overflow.
    pub fn payload_len(&self) -> Option<u64> {
        self.tokens()?
            .checked_mul(self.feature_dim as u64)?
            .checked_mul(self.dtype.size() as u64)
    }

    fn validate(&self) -> Result<()> {
        if self.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {} (reader supports {VERSION})",
                self.version
            )));
        }
        if self.batch == 0 || self.seq_len == 0 || self.feature_dim == 0 {
            return Err(Error::Format(format!(
                "empty tensor shape [{}, {}, {}]",
                self.batch, self.seq_len, self.feature_dim
            )));
        }
        if self.payload_len().is_none() {
            return Err(Error::Format("declared payload size overflows".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.dtype.code().to_le_bytes());
        out[12..16].copy_from_slice(&self.batch.to_le_bytes());
        out[16..20].copy_from_slice(&self.seq_len.to_le_bytes());
        out[20..24].copy_from_slice(&self.feature_dim.to_le_bytes());
        out[24..28].copy_from_slice(&self.layer.to_le_bytes());
        out[28..36].copy_from_slice(&self.step.to_le_bytes());
        out[36] = self.tag.code();
        out
    }

    /// Parses and validates the fixed-size header at the start of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let header = DumpHeader {
            version: u32_at(4),
            dtype: Dtype::from_code(u32_at(8))?,
            batch: u32_at(12),
            seq_len: u32_at(16),
            feature_dim: u32_at(20),
            layer: u32_at(24),
            step: u64::from_le_bytes(bytes[28..36].try_into().unwrap()),
            tag: Tag::from_code(bytes[36])?,
        };
        header.validate()?;
        Ok(header)
    }
}

/// A flattened `[B·S, D]` token-sample matrix.
///
/// Rows may be a subset of the originally captured tokens (after
/// sub-sampling); `row_ids` then records which source rows were kept, and
/// the header still describes the source tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBatch {
    header: DumpHeader,
    data: Vec<f64>,
    row_ids: Vec<usize>,
}

impl ActivationBatch {
    /// Builds a full batch (`N = B·S`) from row-major values.
    pub fn new(header: DumpHeader, data: Vec<f64>) -> Result<Self> {
        header.validate()?;
        let d = header.feature_dim as usize;
        let n = header
            .tokens()
            .and_then(|t| usize::try_from(t).ok())
            .ok_or_else(|| arg("token count overflows"))?;
        if n.checked_mul(d) != Some(data.len()) {
            return Err(arg(format!(
                "data length {} does not match {n} x {d}",
                data.len()
            )));
        }
        check_finite(&data, d)?;
        Ok(ActivationBatch {
            header,
            data,
            row_ids: (0..n).collect(),
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.header.feature_dim as usize
    }

    /// Row-major `n_rows × dim` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// Source-row index of each row (identity for an unsampled batch).
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn is_full(&self) -> bool {
        self.header.tokens() == Some(self.row_ids.len() as u64)
    }

    /// Sequence position of row `i`.
    pub fn position_of_row(&self, i: usize) -> usize {
        self.row_ids[i] % self.header.seq_len as usize
    }

    /// Row holding token `(b, s)` of the source tensor, for full batches.
    pub fn row_of(&self, b: usize, s: usize) -> usize {
        b * self.header.seq_len as usize + s
    }

    /// Sub-batch made of the given rows, in the order supplied.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut row_ids = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.n_rows() {
                return Err(arg(format!(
                    "row index {r} out of range for batch with {} rows",
                    self.n_rows()
                )));
            }
            data.extend_from_slice(self.row(r));
            row_ids.push(self.row_ids[r]);
        }
        Ok(ActivationBatch {
            header: self.header,
            data,
            row_ids,
        })
    }

    /// Reinterprets a full batch's tokens as `[batch, seq_len]`.
    pub fn reshaped(mut self, batch: u32, seq_len: u32) -> Result<Self> {
        if !self.is_full() {
            return Err(arg("only full batches can be reshaped"));
        }
        if (batch as u64).checked_mul(seq_len as u64) != self.header.tokens() {
            return Err(arg(format!(
                "cannot reshape {} tokens into [{batch}, {seq_len}]",
                self.n_rows()
            )));
        }
        self.header.batch = batch;
        self.header.seq_len = seq_len;
        Ok(self)
    }

    /// Rounds values through `dtype` so the in-memory batch equals what a
    /// dump of that dtype stores.
    pub fn to_dtype(mut self, dtype: Dtype) -> Self {
        if dtype == Dtype::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self.header.dtype = dtype;
        self
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn with_meta(mut self, layer: u32, step: u64, tag: Tag) -> Self {
        self.header.layer = layer;
        self.header.step = step;
        self.header.tag = tag;
        self
    }
}

fn check_finite(data: &[f64], d: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            row: i / d,
            col: i % d,
        }),
        None => Ok(()),
    }
}

/// Decodes a binary dump held in memory.
pub fn decode_dump(bytes: &[u8]) -> Result<ActivationBatch> {
    let header = DumpHeader::decode(bytes)?;
    // validated: cannot overflow
    let expected = HEADER_LEN as u64 + header.payload_len().unwrap();
    let found = bytes.len() as u64;
    if found != expected {
        return Err(Error::Truncated { expected, found });
    }
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    ActivationBatch::new(header, data)
}

/// Encodes a full batch in the binary format, converting values to the
/// header's dtype.
pub fn encode_dump(batch: &ActivationBatch) -> Result<Vec<u8>> {
    if !batch.is_full() {
        return Err(arg(format!(
            "cannot write a sub-sampled batch ({} of {} rows) as a dump",
            batch.n_rows(),
            batch.header.tokens().unwrap_or(0)
        )));
    }
    let header = batch.header;
    let mut out = Vec::with_capacity(HEADER_LEN + batch.data.len() * header.dtype.size());
    out.extend_from_slice(&header.encode());
    match header.dtype {
        Dtype::F32 => batch
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => batch
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses the CSV fixture format.
pub fn parse_csv_dump(text: &str) -> Result<ActivationBatch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let mut next_record = || -> Result<Option<csv::StringRecord>> {
        for rec in records.by_ref() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            return Ok(Some(rec));
        }
        Ok(None)
    };

    let mut meta = next_record()?.ok_or_else(|| Error::Format("empty CSV dump".into()))?;
    if meta.len() == CSV_FIELD_NAMES.len()
        && meta
            .iter()
            .zip(CSV_FIELD_NAMES)
            .all(|(a, b)| a.eq_ignore_ascii_case(b))
    {
        meta =
            next_record()?.ok_or_else(|| Error::Format("CSV dump has no header values".into()))?;
    }
    if meta.len() != CSV_FIELD_NAMES.len() {
        return Err(Error::Format(format!(
            "CSV header must have 6 fields (B,S,D,layer,step,tag), found {}",
            meta.len()
        )));
    }
    let field = |i: usize| -> Result<u64> {
        meta[i].parse::<u64>().map_err(|_| {
            Error::Format(format!(
                "CSV header field {} = {:?} is not an integer",
                CSV_FIELD_NAMES[i], &meta[i]
            ))
        })
    };
    let small = |i: usize| -> Result<u32> {
        u32::try_from(field(i)?).map_err(|_| {
            Error::Format(format!(
                "CSV header field {} out of range",
                CSV_FIELD_NAMES[i]
            ))
        })
    };
    let header = DumpHeader::new(
        Dtype::F64,
        small(0)?,
        small(1)?,
        small(2)?,
        small(3)?,
        field(4)?,
        meta[5].parse()?,
    );
    header.validate()?;
    let n = header.tokens().unwrap();
    let d = header.feature_dim as usize;

    let mut data = Vec::new();
    let mut rows = 0u64;
    while let Some(rec) = next_record()? {
        if rows == n {
            return Err(Error::Format(format!(
                "CSV dump has more than {n} data rows"
            )));
        }
        if rec.len() != d {
            return Err(Error::Format(format!(
                "CSV row {rows} has {} values, expected {d}",
                rec.len()
            )));
        }
        for (col, f) in rec.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                Error::Format(format!(
                    "CSV row {rows} column {col}: {f:?} is not a number"
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: rows as usize,
                    col,
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Format(format!(
            "CSV dump has {rows} data rows, expected {n}"
        )));
    }
    ActivationBatch::new(header, data)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_csv_path(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a binary dump, or a CSV fixture when the file has a `.csv`
/// extension and lacks the binary magic.
pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(&MAGIC) || !is_csv_path(path) {
        return decode_dump(&bytes);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{} is not valid UTF-8", path.display())))?;
    parse_csv_dump(&text)
}

/// Reads only the header of a dump (first line for CSV fixtures).
pub fn read_header(path: impl AsRef<Path>) -> Result<DumpHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    file.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(io_err(path))?;
    if head.starts_with(&MAGIC) || !is_csv_path(path) {
        return DumpHeader::decode(&head);
    }
    // CSV headers are tiny but the file may not be; the full parse also
    // validates the payload, which discovery wants anyway.
    Ok(read_dump(path)?.header)
}

pub fn write_dump(batch: &ActivationBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dump(batch)?;
    fs::write(path, bytes).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLabel {
    Early,
    Middle,
    Late,
    Index(usize),
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupLabel::Early => f.write_str("early"),
            GroupLabel::Middle => f.write_str("middle"),
            GroupLabel::Late => f.write_str("late"),
            GroupLabel::Index(i) => write!(f, "g{i}"),
        }
    }
}

/// Rows whose sequence positions fall in `positions`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionGroup {
    pub label: GroupLabel,
    pub positions: Range<usize>,
    pub row_indices: Vec<usize>,
}

/// Splits `[0, S)` into `n_groups` contiguous ranges whose sizes differ by
/// at most one (earlier groups are larger) and assigns each row to the
/// range containing its position. Three groups are labelled early, middle
/// and late.
pub fn stratify_by_position(
    batch: &ActivationBatch,
    n_groups: usize,
) -> Result<Vec<PositionGroup>> {
    let s = batch.header.seq_len as usize;
    if n_groups == 0 || n_groups > s {
        return Err(arg(format!(
            "n_groups must be in 1..={s} for sequence length {s}, got {n_groups}"
        )));
    }
    let base = s / n_groups;
    let extra = s % n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    let mut start = 0;
    for g in 0..n_groups {
        let len = base + usize::from(g < extra);
        let label = match (n_groups, g) {
            (3, 0) => GroupLabel::Early,
            (3, 1) => GroupLabel::Middle,
            (3, 2) => GroupLabel::Late,
            _ => GroupLabel::Index(g),
        };
        groups.push(PositionGroup {
            label,
            positions: start..start + len,
            row_indices: Vec::new(),
        });
        start += len;
    }
    // position -> group lookup
    let mut owner = vec![0usize; s];
    for (g, grp) in groups.iter().enumerate() {
        owner[grp.positions.clone()].fill(g);
    }
    for row in 0..batch.n_rows() {
        groups[owner[batch.position_of_row(row)]]
            .row_indices
            .push(row);
    }
    Ok(groups)
}
