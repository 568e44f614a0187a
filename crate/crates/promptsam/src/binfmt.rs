//! APK archive and DEX file parsing.
//!
//! An APK is a ZIP archive; we walk the central directory and pull out every
//! root-level `classes*.dex` entry in multidex order. A DEX file is split
//! into its three coarse sections: the fixed 112-byte header, the ids region
//! `[112, data_off)`, and the data region `[data_off, data_off + data_size)`.

use std::io::Read;

use flate2::read::DeflateDecoder;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BinfmtError {
    #[error("not a ZIP archive: {0}")]
    NotAnArchive(String),
    #[error("archive contains no classes*.dex entries")]
    NoDexEntries,
    #[error("bad DEX magic")]
    BadMagic,
    #[error("truncated DEX: header declares {declared} bytes, got {actual}")]
    Truncated { declared: usize, actual: usize },
    #[error("inconsistent DEX spans: data_off={data_off}, data_size={data_size}, len={len}")]
    InconsistentSpans {
        data_off: usize,
        data_size: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, BinfmtError>;

/// Byte span as (offset, length).
pub type Span = (usize, usize);

pub const DEX_HEADER_LEN: usize = 112;

/// The three coarse DEX regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    Header,
    Ids,
    Data,
}

/// Archive contents plus the ordered multidex name list.
#[derive(Debug)]
pub struct ApkEntryList {
    pub entries: Vec<(String, Vec<u8>)>,
    /// `classes.dex` first, then `classes2.dex`, `classes3.dex`, ...
    pub dex_names: Vec<String>,
}

impl ApkEntryList {
    pub fn entry(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    /// DEX payloads in multidex order.
    pub fn dex_bytes(&self) -> Vec<&[u8]> {
        self.dex_names
            .iter()
            .filter_map(|n| self.entry(n))
            .collect()
    }
}

/// Parsed DEX byte stream with section spans.
#[derive(Debug, Clone)]
pub struct DexModel {
    pub raw: Vec<u8>,
    pub header_span: Span,
    pub ids_span: Span,
    pub data_span: Span,
    pub declared_file_size: usize,
}

impl DexModel {
    pub fn span(&self, kind: SectionKind) -> Span {
        match kind {
            SectionKind::Header => self.header_span,
            SectionKind::Ids => self.ids_span,
            SectionKind::Data => self.data_span,
        }
    }
}

/// Exact byte slice of the requested section.
pub fn section_bytes(model: &DexModel, kind: SectionKind) -> &[u8] {
    let (off, len) = model.span(kind);
    &model.raw[off..off + len]
}

/// Extract all entries from an APK (ZIP) archive and identify the multidex
/// set. Only stored and DEFLATE entries are supported.
pub fn extract_dex_entries(apk_bytes: &[u8]) -> Result<ApkEntryList> {
    if apk_bytes.len() < 4 || &apk_bytes[..4] != b"PK\x03\x04" {
        return Err(BinfmtError::NotAnArchive("missing local header magic".into()));
    }
    let entries = read_zip_entries(apk_bytes)?;

    // (multidex index, name); classes.dex is index 1
    let mut dex: Vec<(u32, String)> = entries
        .iter()
        .filter_map(|(name, _)| multidex_index(name).map(|i| (i, name.clone())))
        .collect();
    dex.sort_by_key(|(i, _)| *i);
    if dex.is_empty() {
        return Err(BinfmtError::NoDexEntries);
    }
    Ok(ApkEntryList {
        entries,
        dex_names: dex.into_iter().map(|(_, n)| n).collect(),
    })
}

/// `classes.dex` -> 1, `classesN.dex` -> N (root-level names only).
fn multidex_index(name: &str) -> Option<u32> {
    let rest = name.strip_prefix("classes")?.strip_suffix(".dex")?;
    if rest.is_empty() {
        Some(1)
    } else if rest.chars().all(|c| c.is_ascii_digit()) && !rest.starts_with('0') {
        let n: u32 = rest.parse().ok()?;
        (n >= 2).then_some(n)
    } else {
        None
    }
}

/// Parse a DEX byte stream into its header/ids/data spans.
pub fn parse_dex(bytes: &[u8]) -> Result<DexModel> {
    if bytes.len() < DEX_HEADER_LEN {
        return Err(BinfmtError::Truncated {
            declared: DEX_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != b"dex\n" || bytes[7] != 0 {
        return Err(BinfmtError::BadMagic);
    }
    match &bytes[4..7] {
        b"035" | b"037" | b"038" | b"039" => {}
        _ => return Err(BinfmtError::BadMagic),
    }
    let u32_at = |off: usize| -> usize {
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let declared_file_size = u32_at(32);
    if declared_file_size > bytes.len() {
        return Err(BinfmtError::Truncated {
            declared: declared_file_size,
            actual: bytes.len(),
        });
    }
    let data_size = u32_at(104);
    let data_off = u32_at(108);
    if data_off < DEX_HEADER_LEN || data_off + data_size > bytes.len() {
        return Err(BinfmtError::InconsistentSpans {
            data_off,
            data_size,
            len: bytes.len(),
        });
    }
    Ok(DexModel {
        raw: bytes.to_vec(),
        header_span: (0, DEX_HEADER_LEN),
        ids_span: (DEX_HEADER_LEN, data_off - DEX_HEADER_LEN),
        data_span: (data_off, data_size),
        declared_file_size,
    })
}

// --- minimal ZIP reader -----------------------------------------------------

const EOCD_SIG: u32 = 0x0605_4b50;
const CDIR_SIG: u32 = 0x0201_4b50;
const LOCAL_SIG: u32 = 0x0403_4b50;

fn read_zip_entries(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let eocd = find_eocd(bytes)?;
    let total = u16_at(bytes, eocd + 10)? as usize;
    let cd_off = u32_at(bytes, eocd + 16)? as usize;

    let mut entries = Vec::with_capacity(total);
    let mut pos = cd_off;
    for _ in 0..total {
        if u32_at(bytes, pos)? != CDIR_SIG {
            return Err(BinfmtError::NotAnArchive(
                "bad central directory record".into(),
            ));
        }
        let method = u16_at(bytes, pos + 10)?;
        let csize = u32_at(bytes, pos + 20)? as usize;
        let usize_ = u32_at(bytes, pos + 24)? as usize;
        let nlen = u16_at(bytes, pos + 28)? as usize;
        let xlen = u16_at(bytes, pos + 30)? as usize;
        let clen = u16_at(bytes, pos + 32)? as usize;
        let lho = u32_at(bytes, pos + 42)? as usize;
        let name = slice(bytes, pos + 46, nlen)?;
        let name = String::from_utf8_lossy(name).into_owned();
        pos += 46 + nlen + xlen + clen;

        if u32_at(bytes, lho)? != LOCAL_SIG {
            return Err(BinfmtError::NotAnArchive("bad local header".into()));
        }
        let lnlen = u16_at(bytes, lho + 26)? as usize;
        let lxlen = u16_at(bytes, lho + 28)? as usize;
        let data = slice(bytes, lho + 30 + lnlen + lxlen, csize)?;
        let payload = match method {
            0 => data.to_vec(),
            8 => {
                let mut out = Vec::with_capacity(usize_);
                DeflateDecoder::new(data)
                    .read_to_end(&mut out)
                    .map_err(|e| BinfmtError::NotAnArchive(format!("bad deflate stream: {e}")))?;
                out
            }
            m => {
                return Err(BinfmtError::NotAnArchive(format!(
                    "unsupported compression method {m}"
                )))
            }
        };
        entries.push((name, payload));
    }
    Ok(entries)
}

fn find_eocd(bytes: &[u8]) -> Result<usize> {
    // EOCD is at most 22 + 65535 comment bytes from the end.
    let start = bytes.len().saturating_sub(22 + 65_535);
    let mut pos = bytes.len().checked_sub(22).ok_or_else(|| {
        BinfmtError::NotAnArchive("too short for end-of-central-directory".into())
    })?;
    loop {
        if u32_at(bytes, pos)? == EOCD_SIG {
            return Ok(pos);
        }
        if pos == start {
            return Err(BinfmtError::NotAnArchive(
                "end-of-central-directory not found".into(),
            ));
        }
        pos -= 1;
    }
}

fn slice(bytes: &[u8], off: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(off..off + len)
        .ok_or_else(|| BinfmtError::NotAnArchive("truncated central directory".into()))
}

fn u16_at(bytes: &[u8], off: usize) -> Result<u16> {
    Ok(u16::from_le_bytes(slice(bytes, off, 2)?.try_into().unwrap()))
}

fn u32_at(bytes: &[u8], off: usize) -> Result<u32> {
    Ok(u32::from_le_bytes(slice(bytes, off, 4)?.try_into().unwrap()))
}
