//! Persistence and task switching: one frozen base artifact shared by every
//! downstream task, plus small per-task adapters that carry only adapted
//! scales. Switching tasks rewrites scale tensors and nothing else.
//!
//! Three little-endian container formats share one layout — a magic tag, a
//! format version, and a section table of `(tag, offset, length, crc32)`
//! entries followed by the section payloads in table order:
//!
//! - `PQAB` — quantized base: architecture + quantizer config (JSON), packed
//!   integer codes, zero-points, initial scales, biases, and (for
//!   transformers) embedding and norm tensors. Scales and dense tensors are
//!   stored as f32, which is lossless because persisted nets are
//!   single-precision (every parameter already sits on the f32 grid).
//! - `PQAD` — task adapter: the base's code fingerprint (CRC32 of the `CODE`
//!   section), a task name, and the absolute adapted scales as f32. Storing
//!   absolute scales rather than deltas avoids a subtract/re-add rounding
//!   trip; the delta is always recoverable from the base's initial scales.
//!   Adapter files have a fixed 128-byte preamble
//!   ([`ADAPTER_HEADER_BYTES`]), so the file size is exactly
//!   `128 + 4 × scale_count`.
//! - `PQDN` — dense checkpoint: architecture (JSON) plus every parameter as
//!   f64, used for unquantized nets (inputs to quantization; outputs of
//!   dense training runs).
//!
//! Every section is CRC32-checked on load, and corruption errors name the
//! section. See FORMATS.md for the byte-level layout.

use crate::error::{Error, Result};
use crate::model::{ArchSpec, Block, Linear, LinKind, MlpNet, Mode, Net, TfNet};
use crate::pack::PackedIntMatrix;
use crate::quant::{QuantConfig, ScalePrecision, ScaleSet};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC_BASE: [u8; 4] = *b"PQAB";
pub const MAGIC_ADAPTER: [u8; 4] = *b"PQAD";
pub const MAGIC_DENSE: [u8; 4] = *b"PQDN";

/// Fixed adapter preamble: 12-byte container header, two 24-byte table
/// entries, and the 68-byte `META` section. Everything after it is the
/// scale payload (4 bytes per scale).
pub const ADAPTER_HEADER_BYTES: u64 = 12 + 2 * 24 + META_LEN as u64;

const HEADER_LEN: usize = 12; // magic + version + section count
const TABLE_ENTRY_LEN: usize = 24; // tag + offset u64 + len u64 + crc32
const META_LEN: usize = 68; // fingerprint u32 + name length u8 + name[63]
const TASK_NAME_MAX: usize = 63;

// ---------------------------------------------------------------------------
// CRC32 (IEEE 802.3, reflected, polynomial 0xEDB88320)
// ---------------------------------------------------------------------------

fn crc32_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

/// CRC32 checksum as used in PNG/gzip (check value: `"123456789"` →
/// `0xCBF43926`).
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---------------------------------------------------------------------------
// Little-endian encoding helpers
// ---------------------------------------------------------------------------

#[derive(Default)]
struct LeWriter {
    buf: Vec<u8>,
}

impl LeWriter {
    fn new() -> Self {
        LeWriter::default()
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v);
        }
    }
    fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct LeReader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> LeReader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        LeReader { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "section {}: truncated (needed {n} bytes at offset {}, have {})",
                self.section,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!(
                "section {}: {} unexpected trailing byte(s)",
                self.section,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Container read/write
// ---------------------------------------------------------------------------

fn write_container(magic: [u8; 4], sections: &[([u8; 4], Vec<u8>)]) -> Vec<u8> {
    let table_end = HEADER_LEN + TABLE_ENTRY_LEN * sections.len();
    let total: usize = table_end + sections.iter().map(|(_, b)| b.len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut offset = table_end as u64;
    for (tag, bytes) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32(bytes).to_le_bytes());
        offset += bytes.len() as u64;
    }
    for (_, bytes) in sections {
        out.extend_from_slice(bytes);
    }
    out
}

struct Container<'a> {
    sections: Vec<([u8; 4], &'a [u8])>,
}

impl<'a> Container<'a> {
    /// Parse and CRC-verify every section of a container file.
    fn parse(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        let kind = String::from_utf8_lossy(&magic).into_owned();
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity(format!(
                "file truncated: {} bytes is shorter than the {kind} header",
                bytes.len()
            )));
        }
        if bytes[..4] != magic {
            return Err(Error::Integrity(format!(
                "not a {kind} file (magic {:?})",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported {kind} format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let table_end = HEADER_LEN + TABLE_ENTRY_LEN * count;
        if bytes.len() < table_end {
            return Err(Error::Integrity(
                "file truncated inside the section table".into(),
            ));
        }
        let mut sections = Vec::with_capacity(count);
        for i in 0..count {
            let e = &bytes[HEADER_LEN + i * TABLE_ENTRY_LEN..HEADER_LEN + (i + 1) * TABLE_ENTRY_LEN];
            let tag: [u8; 4] = e[..4].try_into().unwrap();
            let offset = u64::from_le_bytes(e[4..12].try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(e[12..20].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(e[20..24].try_into().unwrap());
            let name = String::from_utf8_lossy(&tag).into_owned();
            let end = offset.checked_add(len).ok_or_else(|| {
                Error::Integrity(format!("section {name}: offset overflow"))
            })?;
            if offset < table_end || end > bytes.len() {
                return Err(Error::Integrity(format!(
                    "file truncated: section {name} ({offset}..{end}) exceeds file of {} bytes",
                    bytes.len()
                )));
            }
            let body = &bytes[offset..end];
            if crc32(body) != crc {
                return Err(Error::Integrity(format!(
                    "section {name}: checksum mismatch"
                )));
            }
            sections.push((tag, body));
        }
        Ok(Container { sections })
    }

    fn section(&self, tag: [u8; 4]) -> Result<&'a [u8]> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, b)| *b)
            .ok_or_else(|| {
                Error::Integrity(format!(
                    "missing section {}",
                    String::from_utf8_lossy(&tag)
                ))
            })
    }

    fn has(&self, tag: [u8; 4]) -> bool {
        self.sections.iter().any(|(t, _)| *t == tag)
    }
}

/// The four-character magic of the file at `path` (for format dispatch).
pub fn file_magic(path: &Path) -> Result<[u8; 4]> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Integrity(format!(
            "{}: too short to hold a format tag",
            path.display()
        )));
    }
    Ok(bytes[..4].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Canonical walks over a net
// ---------------------------------------------------------------------------

/// Quantized linears in canonical order, or an error if any layer is not
/// quantized.
fn quant_parts(net: &Net) -> Result<Vec<(&PackedIntMatrix, &ScaleSet, &Vec<f64>)>> {
    net.linears()
        .iter()
        .map(|l| match &l.kind {
            LinKind::Quant { packed, scales } => Ok((packed, scales, &l.bias)),
            _ => Err(Error::Config(
                "net is not quantized; only quantized nets are saved as bases".into(),
            )),
        })
        .collect()
}

fn require_single(net: &Net, what: &str) -> Result<()> {
    if net.precision() != ScalePrecision::Single {
        return Err(Error::Config(format!(
            "{what} stores tensors as f32 and requires a single-precision net"
        )));
    }
    Ok(())
}

/// Expected (n, m) of every quantizable linear, in canonical order.
fn expected_shapes(arch: &ArchSpec) -> Vec<(usize, usize)> {
    match arch {
        ArchSpec::Mlp { dims } => {
            (1..dims.len()).map(|i| (dims[i], dims[i - 1])).collect()
        }
        ArchSpec::Transformer { dim, blocks, ffn, .. } => {
            let mut v = Vec::with_capacity(blocks * 6);
            for _ in 0..*blocks {
                v.extend_from_slice(&[
                    (*dim, *dim),
                    (*dim, *dim),
                    (*dim, *dim),
                    (*dim, *dim),
                    (*ffn, *dim),
                    (*dim, *ffn),
                ]);
            }
            v
        }
    }
}

// ---------------------------------------------------------------------------
// Section encoders
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BaseArch {
    arch: ArchSpec,
    qcfg: QuantConfig,
}

#[derive(Serialize, Deserialize)]
struct DenseArch {
    arch: ArchSpec,
    precision: ScalePrecision,
}

fn encode_code_section(parts: &[(&PackedIntMatrix, &ScaleSet, &Vec<f64>)]) -> Vec<u8> {
    let mut w = LeWriter::new();
    for (packed, _, _) in parts {
        w.u32(packed.n as u32);
        w.u32(packed.m as u32);
        w.u32(packed.bits);
        w.u32(packed.words.len() as u32);
        for &word in &packed.words {
            w.u32(word);
        }
    }
    w.buf
}

fn encode_zpts_section(parts: &[(&PackedIntMatrix, &ScaleSet, &Vec<f64>)]) -> Vec<u8> {
    let mut w = LeWriter::new();
    for (_, scales, _) in parts {
        w.u32(scales.n as u32);
        w.u32(scales.groups as u32);
        w.u32(scales.group_cols as u32);
        w.buf.extend_from_slice(&scales.z);
    }
    w.buf
}

fn encode_scl_section(parts: &[(&PackedIntMatrix, &ScaleSet, &Vec<f64>)]) -> Vec<u8> {
    let mut w = LeWriter::new();
    for (_, scales, _) in parts {
        w.u32(scales.n as u32);
        w.u32(scales.groups as u32);
        w.u32(scales.group_cols as u32);
        w.f32_slice(&scales.s);
    }
    w.buf
}

fn encode_bias_section(parts: &[(&PackedIntMatrix, &ScaleSet, &Vec<f64>)]) -> Vec<u8> {
    let mut w = LeWriter::new();
    for (_, _, bias) in parts {
        w.u32(bias.len() as u32);
        w.f32_slice(bias);
    }
    w.buf
}

fn encode_embd_section(t: &TfNet) -> Vec<u8> {
    let mut w = LeWriter::new();
    w.u32(t.vocab as u32);
    w.u32(t.ctx as u32);
    w.u32(t.dim as u32);
    w.f32_slice(&t.tok_emb);
    w.f32_slice(&t.pos_emb);
    w.f32_slice(&t.lm_head);
    w.buf
}

fn encode_norm_section(t: &TfNet) -> Vec<u8> {
    let mut w = LeWriter::new();
    w.u32(t.nblocks as u32);
    w.u32(t.dim as u32);
    for b in &t.blocks {
        w.f32_slice(&b.ln1_g);
        w.f32_slice(&b.ln1_b);
        w.f32_slice(&b.ln2_g);
        w.f32_slice(&b.ln2_b);
    }
    w.f32_slice(&t.lnf_g);
    w.f32_slice(&t.lnf_b);
    w.buf
}

// ---------------------------------------------------------------------------
// Base artifact
// ---------------------------------------------------------------------------

/// CRC32 of the base's packed-code section — the fingerprint adapters carry
/// to guarantee they are only ever applied to the base they were trained
/// against.
pub fn base_fingerprint(net: &Net) -> Result<u32> {
    let parts = quant_parts(net)?;
    Ok(crc32(&encode_code_section(&parts)))
}

/// Serialize a quantized single-precision net as a `PQAB` base artifact.
pub fn save_base(net: &Net, path: &Path) -> Result<()> {
    require_single(net, "a base artifact")?;
    if net.mode() != Mode::Peqa {
        return Err(Error::Config(
            "only nets with frozen quantized codes are saved as bases".into(),
        ));
    }
    let parts = quant_parts(net)?;
    let qcfg = net.qcfg().ok_or_else(|| {
        Error::Config("quantized net carries no quantizer config".into())
    })?;
    let arch_json = serde_json::to_vec(&BaseArch { arch: net.arch(), qcfg })
        .map_err(|e| Error::Config(format!("architecture serialization failed: {e}")))?;

    let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![
        (*b"ARCH", arch_json),
        (*b"CODE", encode_code_section(&parts)),
        (*b"ZPTS", encode_zpts_section(&parts)),
        (*b"SCL0", encode_scl_section(&parts)),
        (*b"BIAS", encode_bias_section(&parts)),
    ];
    if let Net::Tf(t) = net {
        sections.push((*b"EMBD", encode_embd_section(t)));
        sections.push((*b"NORM", encode_norm_section(t)));
    }
    fs::write(path, write_container(MAGIC_BASE, &sections))?;
    Ok(())
}

fn decode_packed(buf: &[u8], shapes: &[(usize, usize)]) -> Result<Vec<PackedIntMatrix>> {
    let mut r = LeReader::new(buf, "CODE");
    let mut out = Vec::with_capacity(shapes.len());
    for &(n, m) in shapes {
        let (fn_, fm, bits, nwords) =
            (r.u32()? as usize, r.u32()? as usize, r.u32()?, r.u32()? as usize);
        if (fn_, fm) != (n, m) {
            return Err(Error::Integrity(format!(
                "section CODE: layer shape {fn_}×{fm} does not match architecture {n}×{m}"
            )));
        }
        let packed = PackedIntMatrix {
            n,
            m,
            bits,
            words: r
                .take(nwords * 4)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if !matches!(bits, 2 | 3 | 4 | 8) || packed.words.len() != n * packed.words_per_row() {
            return Err(Error::Integrity(format!(
                "section CODE: inconsistent packed layer ({n}×{m}, {bits} bits, {nwords} words)"
            )));
        }
        out.push(packed);
    }
    r.finish()?;
    Ok(out)
}

fn decode_scale_sets(
    zbuf: &[u8],
    sbuf: &[u8],
    shapes: &[(usize, usize)],
) -> Result<Vec<ScaleSet>> {
    let mut zr = LeReader::new(zbuf, "ZPTS");
    let mut sr = LeReader::new(sbuf, "SCL0");
    let mut out = Vec::with_capacity(shapes.len());
    for &(n, m) in shapes {
        let (zn, zg, zc) = (zr.u32()? as usize, zr.u32()? as usize, zr.u32()? as usize);
        let (sn, sg, sc) = (sr.u32()? as usize, sr.u32()? as usize, sr.u32()? as usize);
        if (zn, zg, zc) != (sn, sg, sc) || zn != n || zg * zc != m {
            return Err(Error::Integrity(format!(
                "sections ZPTS/SCL0: scale shape {zn}×{zg} (g={zc}) inconsistent with layer {n}×{m}"
            )));
        }
        let z = zr.take(n * zg)?.to_vec();
        let s = sr.f32_vec(n * sg)?;
        out.push(ScaleSet { n, groups: zg, group_cols: zc, s, z });
    }
    zr.finish()?;
    sr.finish()?;
    Ok(out)
}

fn decode_biases(buf: &[u8], shapes: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
    let mut r = LeReader::new(buf, "BIAS");
    let mut out = Vec::with_capacity(shapes.len());
    for &(n, _) in shapes {
        let fn_ = r.u32()? as usize;
        if fn_ != n {
            return Err(Error::Integrity(format!(
                "section BIAS: length {fn_} does not match layer output {n}"
            )));
        }
        out.push(r.f32_vec(n)?);
    }
    r.finish()?;
    Ok(out)
}

/// Load a `PQAB` base artifact back into a quantized net. The result's
/// forward pass is bit-identical to the net that was saved.
pub fn load_base(path: &Path) -> Result<Net> {
    let bytes = fs::read(path)?;
    let c = Container::parse(&bytes, MAGIC_BASE)?;
    let meta: BaseArch = serde_json::from_slice(c.section(*b"ARCH")?)
        .map_err(|e| Error::Integrity(format!("section ARCH: invalid JSON: {e}")))?;
    meta.arch.validate()?;
    let shapes = expected_shapes(&meta.arch);
    let packed = decode_packed(c.section(*b"CODE")?, &shapes)?;
    let scales = decode_scale_sets(c.section(*b"ZPTS")?, c.section(*b"SCL0")?, &shapes)?;
    let biases = decode_biases(c.section(*b"BIAS")?, &shapes)?;

    let mut linears: Vec<Linear> = packed
        .into_iter()
        .zip(scales)
        .zip(biases)
        .map(|((p, s), bias)| Linear {
            n: p.n,
            m: p.m,
            kind: LinKind::Quant { packed: p, scales: s },
            bias,
        })
        .collect();

    match &meta.arch {
        ArchSpec::Mlp { dims } => {
            if c.has(*b"EMBD") || c.has(*b"NORM") {
                return Err(Error::Integrity(
                    "feed-forward base carries transformer sections".into(),
                ));
            }
            Ok(Net::Mlp(MlpNet {
                dims: dims.clone(),
                layers: linears,
                mode: Mode::Peqa,
                precision: ScalePrecision::Single,
                qcfg: Some(meta.qcfg),
            }))
        }
        ArchSpec::Transformer { vocab, ctx, dim, blocks, heads, ffn } => {
            let (vocab, ctx, dim, nblocks, heads, ffn) =
                (*vocab, *ctx, *dim, *blocks, *heads, *ffn);
            let mut er = LeReader::new(c.section(*b"EMBD")?, "EMBD");
            let (ev, ec, ed) = (er.u32()? as usize, er.u32()? as usize, er.u32()? as usize);
            if (ev, ec, ed) != (vocab, ctx, dim) {
                return Err(Error::Integrity(format!(
                    "section EMBD: dims {ev}/{ec}/{ed} do not match architecture {vocab}/{ctx}/{dim}"
                )));
            }
            let tok_emb = er.f32_vec(vocab * dim)?;
            let pos_emb = er.f32_vec(ctx * dim)?;
            let lm_head = er.f32_vec(vocab * dim)?;
            er.finish()?;

            let mut nr = LeReader::new(c.section(*b"NORM")?, "NORM");
            let (nb, nd) = (nr.u32()? as usize, nr.u32()? as usize);
            if (nb, nd) != (nblocks, dim) {
                return Err(Error::Integrity(format!(
                    "section NORM: dims {nb}/{nd} do not match architecture {nblocks}/{dim}"
                )));
            }
            let mut blocks_v = Vec::with_capacity(nblocks);
            let mut rest = linears.drain(..);
            for _ in 0..nblocks {
                let ln1_g = nr.f32_vec(dim)?;
                let ln1_b = nr.f32_vec(dim)?;
                let ln2_g = nr.f32_vec(dim)?;
                let ln2_b = nr.f32_vec(dim)?;
                blocks_v.push(Block {
                    ln1_g,
                    ln1_b,
                    wq: rest.next().unwrap(),
                    wk: rest.next().unwrap(),
                    wv: rest.next().unwrap(),
                    wo: rest.next().unwrap(),
                    ln2_g,
                    ln2_b,
                    fc1: rest.next().unwrap(),
                    fc2: rest.next().unwrap(),
                });
            }
            drop(rest);
            let lnf_g = nr.f32_vec(dim)?;
            let lnf_b = nr.f32_vec(dim)?;
            nr.finish()?;
            Ok(Net::Tf(TfNet {
                vocab,
                ctx,
                dim,
                nblocks,
                heads,
                ffn,
                tok_emb,
                pos_emb,
                blocks: blocks_v,
                lnf_g,
                lnf_b,
                lm_head,
                mode: Mode::Peqa,
                precision: ScalePrecision::Single,
                qcfg: Some(meta.qcfg),
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Dense checkpoints
// ---------------------------------------------------------------------------

fn dense_tensors(net: &Net) -> Result<Vec<&Vec<f64>>> {
    let mut out: Vec<&Vec<f64>> = Vec::new();
    fn push_linear<'a>(l: &'a Linear, out: &mut Vec<&'a Vec<f64>>) -> Result<()> {
        match &l.kind {
            LinKind::Dense { w } => {
                out.push(w);
                out.push(&l.bias);
                Ok(())
            }
            _ => Err(Error::Config(
                "net is quantized; dense checkpoints hold unquantized nets only".into(),
            )),
        }
    }
    match net {
        Net::Mlp(m) => {
            for l in &m.layers {
                push_linear(l, &mut out)?;
            }
        }
        Net::Tf(t) => {
            out.push(&t.tok_emb);
            out.push(&t.pos_emb);
            for b in &t.blocks {
                out.push(&b.ln1_g);
                out.push(&b.ln1_b);
                for l in [&b.wq, &b.wk, &b.wv, &b.wo] {
                    push_linear(l, &mut out)?;
                }
                out.push(&b.ln2_g);
                out.push(&b.ln2_b);
                for l in [&b.fc1, &b.fc2] {
                    push_linear(l, &mut out)?;
                }
            }
            out.push(&t.lnf_g);
            out.push(&t.lnf_b);
            out.push(&t.lm_head);
        }
    }
    Ok(out)
}

/// Serialize a dense (unquantized) net as a `PQDN` checkpoint with full
/// f64 parameters.
pub fn save_dense(net: &Net, path: &Path) -> Result<()> {
    if net.mode() != Mode::Full {
        return Err(Error::Config(
            "only dense nets are saved as dense checkpoints".into(),
        ));
    }
    let arch_json = serde_json::to_vec(&DenseArch {
        arch: net.arch(),
        precision: net.precision(),
    })
    .map_err(|e| Error::Config(format!("architecture serialization failed: {e}")))?;
    let mut w = LeWriter::new();
    for t in dense_tensors(net)? {
        w.f64_slice(t);
    }
    let sections = vec![(*b"ARCH", arch_json), (*b"DENS", w.buf)];
    fs::write(path, write_container(MAGIC_DENSE, &sections))?;
    Ok(())
}

/// Load a `PQDN` dense checkpoint.
pub fn load_dense(path: &Path) -> Result<Net> {
    let bytes = fs::read(path)?;
    let c = Container::parse(&bytes, MAGIC_DENSE)?;
    let meta: DenseArch = serde_json::from_slice(c.section(*b"ARCH")?)
        .map_err(|e| Error::Integrity(format!("section ARCH: invalid JSON: {e}")))?;
    meta.arch.validate()?;
    // Template net with the right shapes, then overwrite every tensor.
    let mut net = Net::dense_init(&meta.arch, 0, meta.precision)?;
    let mut r = LeReader::new(c.section(*b"DENS")?, "DENS");
    fn fill(dst: &mut Vec<f64>, r: &mut LeReader<'_>) -> Result<()> {
        *dst = r.f64_vec(dst.len())?;
        Ok(())
    }
    fn fill_linear(l: &mut Linear, r: &mut LeReader<'_>) -> Result<()> {
        match &mut l.kind {
            LinKind::Dense { w } => {
                *w = r.f64_vec(w.len())?;
                l.bias = r.f64_vec(l.bias.len())?;
                Ok(())
            }
            _ => unreachable!("dense_init builds dense linears"),
        }
    }
    {
        match &mut net {
            Net::Mlp(m) => {
                for l in &mut m.layers {
                    fill_linear(l, &mut r)?;
                }
            }
            Net::Tf(t) => {
                fill(&mut t.tok_emb, &mut r)?;
                fill(&mut t.pos_emb, &mut r)?;
                for b in &mut t.blocks {
                    fill(&mut b.ln1_g, &mut r)?;
                    fill(&mut b.ln1_b, &mut r)?;
                    for l in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                        fill_linear(l, &mut r)?;
                    }
                    fill(&mut b.ln2_g, &mut r)?;
                    fill(&mut b.ln2_b, &mut r)?;
                    for l in [&mut b.fc1, &mut b.fc2] {
                        fill_linear(l, &mut r)?;
                    }
                }
                fill(&mut t.lnf_g, &mut r)?;
                fill(&mut t.lnf_b, &mut r)?;
                fill(&mut t.lm_head, &mut r)?;
            }
        }
    }
    r.finish()?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Task adapters
// ---------------------------------------------------------------------------

/// A task's adapted scales, ready to swap into the matching base.
#[derive(Clone, Debug)]
pub struct TaskAdapter {
    pub version: u32,
    /// CRC32 of the base's `CODE` section.
    pub fingerprint: u32,
    pub task: String,
    /// Absolute adapted scales (s₀+Δs), canonical layer order.
    pub scales: Vec<f64>,
}

/// Serialize the net's current scales as a `PQAD` adapter for `base`.
/// The net must hold exactly the base's codes (checked by fingerprint).
pub fn save_adapter(net: &Net, base: &Net, task: &str, path: &Path) -> Result<()> {
    require_single(net, "an adapter")?;
    if task.is_empty() || task.len() > TASK_NAME_MAX {
        return Err(Error::Config(format!(
            "task name must be 1..={TASK_NAME_MAX} bytes, got {}",
            task.len()
        )));
    }
    let fp = base_fingerprint(net)?;
    let base_fp = base_fingerprint(base)?;
    if fp != base_fp {
        return Err(Error::Config(format!(
            "net codes (fingerprint {fp:08x}) were not derived from this base ({base_fp:08x})"
        )));
    }
    let scales = net.scale_values()?;

    let mut meta = LeWriter::new();
    meta.u32(fp);
    meta.buf.push(task.len() as u8);
    meta.buf.extend_from_slice(task.as_bytes());
    meta.buf.resize(META_LEN, 0);

    let mut scl = LeWriter::new();
    scl.f32_slice(&scales);

    let sections = vec![(*b"META", meta.buf), (*b"SCLS", scl.buf)];
    fs::write(path, write_container(MAGIC_ADAPTER, &sections))?;
    Ok(())
}

/// Load a `PQAD` task adapter.
pub fn load_adapter(path: &Path) -> Result<TaskAdapter> {
    let bytes = fs::read(path)?;
    let c = Container::parse(&bytes, MAGIC_ADAPTER)?;
    let meta = c.section(*b"META")?;
    if meta.len() != META_LEN {
        return Err(Error::Integrity(format!(
            "section META: {} bytes, expected {META_LEN}",
            meta.len()
        )));
    }
    let fingerprint = u32::from_le_bytes(meta[..4].try_into().unwrap());
    let name_len = meta[4] as usize;
    if name_len == 0 || name_len > TASK_NAME_MAX {
        return Err(Error::Integrity(format!(
            "section META: task name length {name_len} out of range"
        )));
    }
    let task = std::str::from_utf8(&meta[5..5 + name_len])
        .map_err(|_| Error::Integrity("section META: task name is not UTF-8".into()))?
        .to_string();
    if meta[5 + name_len..].iter().any(|&b| b != 0) {
        return Err(Error::Integrity(
            "section META: nonzero padding after task name".into(),
        ));
    }
    let scl = c.section(*b"SCLS")?;
    if scl.len() % 4 != 0 {
        return Err(Error::Integrity(format!(
            "section SCLS: length {} is not a multiple of 4",
            scl.len()
        )));
    }
    let mut r = LeReader::new(scl, "SCLS");
    let scales = r.f32_vec(scl.len() / 4)?;
    r.finish()?;
    Ok(TaskAdapter { version: FORMAT_VERSION, fingerprint, task, scales })
}

/// Swap the adapter's scales into the net. Only scale tensors change: the
/// adapter must carry the net's own code fingerprint, and every non-scale
/// tensor is checksum-verified to be untouched afterwards. Cost is linear
/// in the scale count, independent of the packed code bytes.
pub fn switch_task(net: &mut Net, adapter: &TaskAdapter) -> Result<()> {
    let fp = base_fingerprint(net)?;
    if fp != adapter.fingerprint {
        return Err(Error::Integrity(format!(
            "adapter {:?} was built for a different base (fingerprint {:08x}, net has {:08x})",
            adapter.task, adapter.fingerprint, fp
        )));
    }
    let before: Vec<(String, u64)> = net
        .param_checksums()
        .into_iter()
        .filter(|(name, _)| !name.ends_with(".s"))
        .collect();
    net.set_scale_values(&adapter.scales)?;
    let after: Vec<(String, u64)> = net
        .param_checksums()
        .into_iter()
        .filter(|(name, _)| !name.ends_with(".s"))
        .collect();
    if before != after {
        return Err(Error::Integrity(
            "task switch touched a non-scale tensor".into(),
        ));
    }
    Ok(())
}
