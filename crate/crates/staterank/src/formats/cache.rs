//! `SCR1` document-state cache.
//!
//! ```text
//! "SCR1" | version u16 | flags u16 | fingerprint u64 | L u16 | H u16 | S u16
//! | d_model u32 | emb_dim u32 | k_sel u16 | k_sel × layer u16 | dtype u8 | entry count u64
//! | offset table: per entry (id length u32 | UTF-8 id | absolute offset u64)
//! | entries | CRC32
//! ```
//!
//! An entry is `token_count u64`, then `emb_dim` embedding values (flag bit 0
//! is set exactly when `emb_dim > 0`), then for each selected layer `H·S·S` matrix values (head
//! major, row major) followed by the two `d_model` token-shift carries.
//! Every entry therefore has the same size, so the file length follows from
//! the header alone.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use staterank_core::embedder::Embedding;
use staterank_core::rwkv::{LayerState, ModelWeights, StateStack};
use staterank_core::state_store::CacheEntry;
use staterank_core::tensor::{Matrix, Vector};

use super::{verify_crc, Decoder, Dtype, Encoder};
use crate::error::{Error, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"SCR1";
pub const VERSION: u16 = 1;
pub const FLAG_EMBEDDINGS: u16 = 1;
/// Bytes before the layer list: magic through k_sel.
const FIXED_PREFIX: usize = 4 + 2 + 2 + 8 + 2 + 2 + 2 + 4 + 4 + 2;

/// Shape and encoding shared by every entry of one cache file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLayout {
    pub fingerprint: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub d_model: usize,
    pub layers: Vec<usize>,
    pub dtype: Dtype,
    /// Width of stored embeddings; 0 when the cache holds none.
    pub embedding_dim: usize,
}

impl CacheLayout {
    /// Full-depth layout for states produced by `model`.
    pub fn for_model(model: &ModelWeights, dtype: Dtype, embedding_dim: usize) -> Self {
        let c = model.config();
        CacheLayout {
            fingerprint: model.fingerprint(),
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            head_size: c.head_size,
            d_model: c.d_model,
            layers: (0..c.n_layers).collect(),
            dtype,
            embedding_dim,
        }
    }

    fn values_per_layer(&self) -> usize {
        self.n_heads * self.head_size * self.head_size + 2 * self.d_model
    }

    /// Size in bytes of one entry.
    pub fn entry_len(&self) -> u64 {
        8 + ((self.embedding_dim + self.layers.len() * self.values_per_layer()) * self.dtype.bytes()) as u64
    }

    fn flags(&self) -> u16 {
        if self.embedding_dim > 0 {
            FLAG_EMBEDDINGS
        } else {
            0
        }
    }
}

/// Parsed header plus offset table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheHeader {
    pub layout: CacheLayout,
    pub index: Vec<(String, u64)>,
}

impl CacheHeader {
    /// Bytes from the start of the file to the first entry.
    pub fn header_len(&self) -> u64 {
        let table: usize = self.index.iter().map(|(id, _)| 4 + id.len() + 8).sum();
        (FIXED_PREFIX + 2 * self.layout.layers.len() + 1 + 8 + table) as u64
    }

    /// Exact file length implied by the header.
    pub fn expected_file_len(&self) -> u64 {
        self.header_len() + self.index.len() as u64 * self.layout.entry_len() + 4
    }
}

fn check_entry(layout: &CacheLayout, e: &CacheEntry) -> Result<()> {
    let bad = |msg: String| Err(Error::Data(format!("cache entry '{}': {msg}", e.doc_id)));
    if e.doc_id.is_empty() {
        return bad("empty doc_id".into());
    }
    if e.state.fingerprint() != layout.fingerprint {
        return bad(format!(
            "state fingerprint {:#x} differs from cache {:#x}",
            e.state.fingerprint(),
            layout.fingerprint
        ));
    }
    if e.state.layer_indices() != layout.layers.as_slice() || e.state.n_layers() != layout.n_layers {
        return bad(format!(
            "state holds layers {:?}, cache stores {:?}",
            e.state.layer_indices(),
            layout.layers
        ));
    }
    for st in e.state.states() {
        if st.n_heads() != layout.n_heads || st.head_size() != layout.head_size || st.tm_shift.dim() != layout.d_model {
            return bad("state shape differs from cache layout".into());
        }
    }
    match (&e.embedding, layout.embedding_dim) {
        (None, 0) => Ok(()),
        (Some(_), 0) => bad("embedding present but cache stores none".into()),
        (None, _) => bad("missing embedding".into()),
        (Some(emb), n) if emb.values.dim() == n => Ok(()),
        (Some(emb), n) => bad(format!("embedding width {} differs from {n}", emb.values.dim())),
    }
}

/// Encode a whole cache in memory.
pub fn encode_cache(layout: &CacheLayout, entries: &[CacheEntry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for e in entries {
        check_entry(layout, e)?;
        if !seen.insert(e.doc_id.as_str()) {
            return Err(Error::Data(format!("duplicate doc_id '{}'", e.doc_id)));
        }
    }
    let narrow = |x: usize, what: &str| -> Result<u16> {
        u16::try_from(x).map_err(|_| Error::Data(format!("{what} {x} does not fit the cache header")))
    };
    let mut header = CacheHeader {
        layout: layout.clone(),
        index: entries.iter().map(|e| (e.doc_id.clone(), 0)).collect(),
    };
    let first = header.header_len();
    for (i, slot) in header.index.iter_mut().enumerate() {
        slot.1 = first + i as u64 * layout.entry_len();
    }

    let mut enc = Encoder::default();
    enc.bytes(MAGIC);
    enc.u16(VERSION);
    enc.u16(layout.flags());
    enc.u64(layout.fingerprint);
    enc.u16(narrow(layout.n_layers, "layer count")?);
    enc.u16(narrow(layout.n_heads, "head count")?);
    enc.u16(narrow(layout.head_size, "head size")?);
    let wide = |x: usize, what: &str| -> Result<u32> {
        u32::try_from(x).map_err(|_| Error::Data(format!("{what} {x} does not fit the cache header")))
    };
    enc.u32(wide(layout.d_model, "d_model")?);
    enc.u32(wide(layout.embedding_dim, "embedding width")?);
    enc.u16(narrow(layout.layers.len(), "selected layer count")?);
    for &l in &layout.layers {
        enc.u16(narrow(l, "layer index")?);
    }
    enc.u8(layout.dtype.code());
    enc.u64(entries.len() as u64);
    for (id, off) in &header.index {
        enc.u32(id.len() as u32);
        enc.bytes(id.as_bytes());
        enc.u64(*off);
    }
    debug_assert_eq!(enc.buf.len() as u64, first);
    for e in entries {
        enc.u64(e.token_count);
        if let Some(emb) = &e.embedding {
            enc.values(layout.dtype, &emb.values);
        }
        for st in e.state.states() {
            for m in &st.wkv {
                enc.values(layout.dtype, m.data());
            }
            enc.values(layout.dtype, &st.tm_shift);
            enc.values(layout.dtype, &st.cm_shift);
        }
    }
    let bytes = enc.finish();
    debug_assert_eq!(bytes.len() as u64, header.expected_file_len());
    Ok(bytes)
}

/// Write `entries` to `path` atomically. Returns the file size.
pub fn write_cache(path: &Path, layout: &CacheLayout, entries: &[CacheEntry]) -> Result<u64> {
    let bytes = encode_cache(layout, entries)?;
    fsio::write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

fn parse_header(d: &mut Decoder<'_>, path: &Path) -> Result<CacheHeader> {
    if d.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected SCR1"));
    }
    let version = d.u16()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported cache version {version}")));
    }
    let flags = d.u16()?;
    if flags & !FLAG_EMBEDDINGS != 0 {
        return Err(Error::format(path, format!("unknown flags {flags:#x}")));
    }
    let fingerprint = d.u64()?;
    let n_layers = d.u16()? as usize;
    let n_heads = d.u16()? as usize;
    let head_size = d.u16()? as usize;
    let d_model = d.u32()? as usize;
    let embedding_dim = d.u32()? as usize;
    if (flags & FLAG_EMBEDDINGS != 0) != (embedding_dim > 0) {
        return Err(Error::format(path, "embedding flag disagrees with embedding width"));
    }
    let k = d.u16()? as usize;
    let layers = (0..k).map(|_| d.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    if layers.windows(2).any(|w| w[0] >= w[1]) || layers.iter().any(|&l| l >= n_layers) {
        return Err(Error::format(path, "invalid layer list"));
    }
    let dtype = Dtype::from_code(d.u8()?).ok_or_else(|| Error::format(path, "unknown dtype"))?;
    let count = d.u64()?;
    let mut index = Vec::new();
    for _ in 0..count {
        let n = d.u32()? as usize;
        let id = std::str::from_utf8(d.take(n)?)
            .map_err(|_| Error::format(path, "doc_id is not UTF-8"))?
            .to_string();
        index.push((id, d.u64()?));
    }
    Ok(CacheHeader {
        layout: CacheLayout {
            fingerprint,
            n_layers,
            n_heads,
            head_size,
            d_model,
            layers,
            dtype,
            embedding_dim,
        },
        index,
    })
}

fn parse_entry(d: &mut Decoder<'_>, layout: &CacheLayout, doc_id: &str, path: &Path) -> Result<CacheEntry> {
    let token_count = d.u64()?;
    let embedding = if layout.embedding_dim > 0 {
        Some(Embedding {
            values: Vector::from(d.values(layout.dtype, layout.embedding_dim)?),
            normalized: true,
        })
    } else {
        None
    };
    let s = layout.head_size;
    let mut states = Vec::with_capacity(layout.layers.len());
    for _ in &layout.layers {
        let wkv = (0..layout.n_heads)
            .map(|_| Matrix::from_vec(s, s, d.values(layout.dtype, s * s)?).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        let tm_shift = Vector::from(d.values(layout.dtype, layout.d_model)?);
        let cm_shift = Vector::from(d.values(layout.dtype, layout.d_model)?);
        states.push(LayerState {
            wkv,
            tm_shift,
            cm_shift,
        });
    }
    let state = StateStack::new(
        layout.n_layers,
        layout.layers.clone(),
        states,
        layout.fingerprint,
        token_count,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(CacheEntry {
        doc_id: doc_id.to_string(),
        state,
        embedding,
        token_count,
    })
}

/// Read and verify a whole cache file.
pub fn read_cache(path: &Path) -> Result<(CacheHeader, Vec<CacheEntry>)> {
    let bytes = fsio::read(path)?;
    let body = verify_crc(&bytes, path)?;
    let mut d = Decoder::new(body, path);
    let header = parse_header(&mut d, path)?;
    if header.expected_file_len() != bytes.len() as u64 {
        return Err(Error::format(path, "file length disagrees with header"));
    }
    let mut entries = Vec::with_capacity(header.index.len());
    for (id, off) in &header.index {
        if *off != d.pos() as u64 {
            return Err(Error::format(path, format!("offset of '{id}' is inconsistent")));
        }
        entries.push(parse_entry(&mut d, &header.layout, id, path)?);
    }
    Ok((header, entries))
}

/// Point reads through the offset table; only the header and the requested
/// entries are read. The trailing checksum is not verified here.
pub struct CacheReader {
    path: PathBuf,
    file: File,
    header: CacheHeader,
    offsets: HashMap<String, u64>,
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(&file);
        let io = |e| Error::io(path, e);
        let mut prefix = vec![0u8; FIXED_PREFIX];
        r.read_exact(&mut prefix)
            .map_err(|_| Error::format(path, "truncated header"))?;
        let k = u16::from_le_bytes([prefix[FIXED_PREFIX - 2], prefix[FIXED_PREFIX - 1]]) as usize;
        let mut rest = vec![0u8; 2 * k + 1 + 8];
        r.read_exact(&mut rest)
            .map_err(|_| Error::format(path, "truncated header"))?;
        let count = u64::from_le_bytes(rest[rest.len() - 8..].try_into().unwrap());
        let mut head = prefix;
        head.extend_from_slice(&rest);
        for _ in 0..count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)
                .map_err(|_| Error::format(path, "truncated offset table"))?;
            let n = u32::from_le_bytes(len) as usize;
            let mut rec = vec![0u8; n + 8];
            r.read_exact(&mut rec)
                .map_err(|_| Error::format(path, "truncated offset table"))?;
            head.extend_from_slice(&len);
            head.extend_from_slice(&rec);
        }
        drop(r);
        let header = parse_header(&mut Decoder::new(&head, path), path)?;
        let len = file.metadata().map_err(io)?.len();
        if len != header.expected_file_len() {
            return Err(Error::format(path, "file length disagrees with header"));
        }
        let offsets = header.index.iter().cloned().collect();
        Ok(CacheReader {
            path: path.to_path_buf(),
            file,
            header,
            offsets,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.offsets.contains_key(doc_id)
    }

    pub fn get(&mut self, doc_id: &str) -> Result<CacheEntry> {
        let off = *self
            .offsets
            .get(doc_id)
            .ok_or_else(|| Error::NotFound(doc_id.to_string()))?;
        let n = self.header.layout.entry_len() as usize;
        let mut buf = vec![0u8; n];
        self.file
            .seek(SeekFrom::Start(off))
            .map_err(|e| Error::io(&self.path, e))?;
        self.file.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        parse_entry(
            &mut Decoder::new(&buf, &self.path),
            &self.header.layout,
            doc_id,
            &self.path,
        )
    }
}

/// Single point read. With `model`, the stored fingerprint must match it.
pub fn read_entry(path: &Path, doc_id: &str, model: Option<&ModelWeights>) -> Result<CacheEntry> {
    let mut r = CacheReader::open(path)?;
    if let Some(m) = model {
        let found = r.header().layout.fingerprint;
        if found != m.fingerprint() {
            return Err(staterank_core::Error::FingerprintMismatch {
                expected: m.fingerprint(),
                found,
            }
            .into());
        }
    }
    r.get(doc_id)
}
