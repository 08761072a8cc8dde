//! Block-framed binary log written by the acquisition device.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! file    = HEADER { FRAME | SYNC | AUX } TRAILER
//! block   = type:u8 length:u24 payload[length] crc32:u32     (crc over type, length, payload)
//! HEADER  0x01  "DCM1" version:u8=1 channels:u8 rate_hz:u16 adc_bits:u8=24 lsb:u32 labels
//! FRAME   0x02  frame_count:u16 then frame_count x channels x i24 codes, channel-interleaved
//! SYNC    0x03  sample_index:u64 unix_time_ns:u64
//! AUX     0x04  subtype:u8 (1 imu, 2 audio, 3 light) opaque payload
//! TRAILER 0xFF  total_frames:u64
//! ```
//!
//! `lsb` is the converter step in picovolts. `labels` is one length-prefixed
//! (u8) UTF-8 string per channel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::warn;

use super::{DeviceMeta, Derivation, GapMarker, SignalChunk, SignalError, DCM_ADC_BITS, MAX_CHANNELS};
use crate::time::Timestamp;

const MAGIC: &[u8; 4] = b"DCM1";
const VERSION: u8 = 1;
const MAX_BLOCK_PAYLOAD: usize = (1 << 24) - 1;
const MAX_FRAMES_PER_BLOCK: usize = u16::MAX as usize;
const CODE_MAX: i32 = (1 << 23) - 1;
const CODE_MIN: i32 = -(1 << 23);
const PICOVOLTS_PER_MICROVOLT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BlockType {
    Header = 0x01,
    Frame = 0x02,
    Sync = 0x03,
    Aux = 0x04,
    Trailer = 0xFF,
}

impl BlockType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0x01 => Some(BlockType::Header),
            0x02 => Some(BlockType::Frame),
            0x03 => Some(BlockType::Sync),
            0x04 => Some(BlockType::Aux),
            0xFF => Some(BlockType::Trailer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    Imu,
    Audio,
    Light,
    Other(u8),
}

impl AuxKind {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => AuxKind::Imu,
            2 => AuxKind::Audio,
            3 => AuxKind::Light,
            n => AuxKind::Other(n),
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            AuxKind::Imu => 1,
            AuxKind::Audio => 2,
            AuxKind::Light => 3,
            AuxKind::Other(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DcmItem {
    Chunk(SignalChunk),
    Gap(GapMarker),
    Aux { kind: AuxKind, at: Timestamp, payload: Vec<u8> },
}

fn to_code(bytes: &[u8]) -> i32 {
    let raw = u32::from(bytes[0]) | u32::from(bytes[1]) << 8 | u32::from(bytes[2]) << 16;
    // sign-extend from bit 23
    ((raw << 8) as i32) >> 8
}

fn from_code(code: i32) -> [u8; 3] {
    let b = code.to_le_bytes();
    [b[0], b[1], b[2]]
}

/// Step size actually stored in the file, in microvolts.
fn stored_lsb(lsb_microvolts: f64) -> Result<(u32, f64), SignalError> {
    let pv = (lsb_microvolts * PICOVOLTS_PER_MICROVOLT).round();
    if !(pv >= 1.0 && pv <= u32::MAX as f64) {
        return Err(SignalError::InvalidMeta(format!(
            "lsb {lsb_microvolts} uV not representable in picovolts"
        )));
    }
    Ok((pv as u32, pv / PICOVOLTS_PER_MICROVOLT))
}

pub struct DcmReader<R: Read = BufReader<File>> {
    input: R,
    meta: DeviceMeta,
    offset: u64,
    next_index: u64,
    seq: u64,
    start_unix_ns: Option<u64>,
    include_aux: bool,
    finished: bool,
    trailer_frames: Option<u64>,
}

impl DcmReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SignalError> {
        let path: PathBuf = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| SignalError::io(&path, e))?;
        DcmReader::new(BufReader::new(file))
    }
}

impl<R: Read> DcmReader<R> {
    /// Reads and validates the HEADER block.
    pub fn new(mut input: R) -> Result<Self, SignalError> {
        let mut head = [0u8; 4];
        if read_up_to(&mut input, &mut head).unwrap_or(0) < 4 {
            return Err(SignalError::BadMagic(head.to_vec()));
        }
        if head[0] != BlockType::Header as u8 {
            return Err(SignalError::BadMagic(head.to_vec()));
        }
        let len = u32::from_le_bytes([head[1], head[2], head[3], 0]) as usize;
        let mut payload = vec![0u8; len];
        let mut crc = [0u8; 4];
        if read_up_to(&mut input, &mut payload).unwrap_or(0) < len
            || read_up_to(&mut input, &mut crc).unwrap_or(0) < 4
        {
            return Err(SignalError::TruncatedBlock { offset: 0 });
        }
        if payload.len() < 4 || &payload[..4] != MAGIC {
            return Err(SignalError::BadMagic(payload.iter().take(4).copied().collect()));
        }
        if block_crc(&head, &payload) != u32::from_le_bytes(crc) {
            return Err(SignalError::BadCrc { offset: 0 });
        }
        let meta = parse_header(&payload)?;
        Ok(DcmReader {
            input,
            meta,
            offset: (4 + len + 4) as u64,
            next_index: 0,
            seq: 0,
            start_unix_ns: None,
            include_aux: false,
            finished: false,
            trailer_frames: None,
        })
    }

    /// Yield AUX blocks instead of skipping them.
    pub fn with_aux(mut self, include: bool) -> Self {
        self.include_aux = include;
        self
    }

    pub fn meta(&self) -> &DeviceMeta {
        &self.meta
    }

    /// Wall-clock time of the first SYNC block, if any.
    pub fn start_unix_ns(&self) -> Option<u64> {
        self.start_unix_ns
    }

    pub fn trailer_frames(&self) -> Option<u64> {
        self.trailer_frames
    }

    fn time_of(&self, index: u64) -> Timestamp {
        Timestamp::ZERO.at_frame(index, self.meta.sample_rate)
    }

    fn read_block(&mut self) -> Result<Option<(u8, Vec<u8>, bool)>, SignalError> {
        let offset = self.offset;
        let mut head = [0u8; 4];
        let got = read_up_to(&mut self.input, &mut head).map_err(|_| SignalError::TruncatedBlock { offset })?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 {
            return Err(SignalError::TruncatedBlock { offset });
        }
        let len = u32::from_le_bytes([head[1], head[2], head[3], 0]) as usize;
        let mut payload = vec![0u8; len];
        let mut crc = [0u8; 4];
        if read_up_to(&mut self.input, &mut payload).unwrap_or(0) < len
            || read_up_to(&mut self.input, &mut crc).unwrap_or(0) < 4
        {
            return Err(SignalError::TruncatedBlock { offset });
        }
        self.offset += (8 + len) as u64;
        let crc_ok = block_crc(&head, &payload) == u32::from_le_bytes(crc);
        Ok(Some((head[0], payload, crc_ok)))
    }

    fn frame_gap(&mut self, frames: u64, reason: String) -> DcmItem {
        let at = self.time_of(self.next_index);
        self.next_index += frames;
        DcmItem::Gap(GapMarker { at, missing_frames: frames.max(1), reason })
    }

    fn decode_frames(&mut self, payload: &[u8]) -> Result<DcmItem, SignalError> {
        let ch = self.meta.channel_count;
        let declared = if payload.len() >= 2 { u16::from_le_bytes([payload[0], payload[1]]) as usize } else { 0 };
        let body = payload.get(2..).unwrap_or(&[]);
        if declared == 0 || body.len() != declared * ch * 3 {
            let frames = if declared > 0 { declared } else { body.len() / (ch * 3) };
            warn!("frame block at offset {} is inconsistent; skipping {frames} frames", self.offset);
            return Ok(self.frame_gap(frames as u64, "inconsistent frame block".into()));
        }
        let lsb = self.meta.lsb_microvolts;
        let mut samples = vec![0.0; declared * ch];
        for (f, frame) in body.chunks_exact(ch * 3).enumerate() {
            for (c, code) in frame.chunks_exact(3).enumerate() {
                samples[c * declared + f] = to_code(code) as f64 * lsb;
            }
        }
        let start = self.time_of(self.next_index);
        let chunk = SignalChunk::from_flat(start, self.meta.sample_rate, self.seq, ch, samples)?;
        self.seq += 1;
        self.next_index += declared as u64;
        Ok(DcmItem::Chunk(chunk))
    }

    fn next_item(&mut self) -> Result<Option<DcmItem>, SignalError> {
        loop {
            let Some((kind, payload, crc_ok)) = self.read_block()? else {
                return Err(SignalError::TruncatedBlock { offset: self.offset });
            };
            match BlockType::from_u8(kind) {
                Some(BlockType::Frame) => {
                    if crc_ok {
                        return self.decode_frames(&payload).map(Some);
                    }
                    let ch = self.meta.channel_count;
                    let declared = if payload.len() >= 2 { u16::from_le_bytes([payload[0], payload[1]]) as usize } else { 0 };
                    let frames = if payload.len() == 2 + declared * ch * 3 {
                        declared
                    } else {
                        payload.len().saturating_sub(2) / (ch * 3)
                    };
                    warn!("bad crc on frame block; {frames} frames lost");
                    return Ok(Some(self.frame_gap(frames as u64, "bad crc".into())));
                }
                Some(BlockType::Sync) => {
                    if !crc_ok || payload.len() != 16 {
                        warn!("skipping corrupt sync block at offset {}", self.offset);
                        continue;
                    }
                    let index = u64::from_le_bytes(payload[0..8].try_into().unwrap());
                    let unix = u64::from_le_bytes(payload[8..16].try_into().unwrap());
                    if self.start_unix_ns.is_none() {
                        self.start_unix_ns = Some(unix.saturating_sub(self.time_of(index).nanos()));
                    }
                    if index > self.next_index {
                        let missing = index - self.next_index;
                        return Ok(Some(self.frame_gap(missing, "sync discontinuity".into())));
                    }
                    if index < self.next_index {
                        warn!("sync block points backwards ({index} < {}); ignored", self.next_index);
                    }
                }
                Some(BlockType::Aux) => {
                    if !crc_ok || payload.is_empty() {
                        warn!("skipping corrupt aux block");
                        continue;
                    }
                    if self.include_aux {
                        return Ok(Some(DcmItem::Aux {
                            kind: AuxKind::from_u8(payload[0]),
                            at: self.time_of(self.next_index),
                            payload: payload[1..].to_vec(),
                        }));
                    }
                }
                Some(BlockType::Trailer) => {
                    if crc_ok && payload.len() == 8 {
                        let total = u64::from_le_bytes(payload[..8].try_into().unwrap());
                        if total != self.next_index {
                            warn!("trailer reports {total} frames, stream had {}", self.next_index);
                        }
                        self.trailer_frames = Some(total);
                    } else {
                        warn!("corrupt trailer block");
                    }
                    return Ok(None);
                }
                Some(BlockType::Header) => warn!("duplicate header block ignored"),
                None => warn!("unknown block type {kind:#04x} at offset {}; skipped", self.offset),
            }
        }
    }
}

impl<R: Read> Iterator for DcmReader<R> {
    type Item = Result<DcmItem, SignalError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        match self.next_item() {
            Ok(Some(item)) => Some(Ok(item)),
            Ok(None) => {
                self.finished = true;
                None
            }
            Err(e) => {
                self.finished = true;
                Some(Err(e))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DcmLog {
    pub meta: DeviceMeta,
    pub chunks: Vec<SignalChunk>,
    pub gaps: Vec<GapMarker>,
    pub start_unix_ns: Option<u64>,
}

/// Reads a whole log into memory.
pub fn read_dcm_log(path: impl AsRef<Path>) -> Result<DcmLog, SignalError> {
    let mut reader = DcmReader::open(path)?;
    let mut chunks = Vec::new();
    let mut gaps = Vec::new();
    for item in reader.by_ref() {
        match item? {
            DcmItem::Chunk(c) => chunks.push(c),
            DcmItem::Gap(g) => gaps.push(g),
            DcmItem::Aux { .. } => {}
        }
    }
    Ok(DcmLog { meta: reader.meta.clone(), chunks, gaps, start_unix_ns: reader.start_unix_ns })
}

pub struct DcmWriter<W: Write = BufWriter<File>> {
    out: W,
    meta: DeviceMeta,
    lsb: f64,
    next_index: u64,
}

impl DcmWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, meta: &DeviceMeta, start_unix_ns: u64) -> Result<Self, SignalError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| SignalError::io(path, e))?;
        DcmWriter::new(BufWriter::new(file), meta, start_unix_ns)
    }
}

impl<W: Write> DcmWriter<W> {
    /// Writes the HEADER block and an initial SYNC at sample 0.
    pub fn new(out: W, meta: &DeviceMeta, start_unix_ns: u64) -> Result<Self, SignalError> {
        meta.validate()?;
        if meta.adc_bits != DCM_ADC_BITS {
            return Err(SignalError::InvalidMeta(format!("adc_bits {} (log stores 24-bit codes)", meta.adc_bits)));
        }
        let rate = meta.sample_rate;
        if rate.fract() != 0.0 || rate > u16::MAX as f64 {
            return Err(SignalError::InvalidMeta(format!("sample rate {rate} is not an integer in u16 range")));
        }
        let (lsb_pv, lsb) = stored_lsb(meta.lsb_microvolts)?;
        let mut payload = Vec::with_capacity(64);
        payload.extend_from_slice(MAGIC);
        payload.push(VERSION);
        payload.push(meta.channel_count as u8);
        payload.extend_from_slice(&(rate as u16).to_le_bytes());
        payload.push(DCM_ADC_BITS);
        payload.extend_from_slice(&lsb_pv.to_le_bytes());
        for label in &meta.channel_labels {
            let bytes = label.as_bytes();
            let n = bytes.len().min(u8::MAX as usize);
            payload.push(n as u8);
            payload.extend_from_slice(&bytes[..n]);
        }
        let mut meta = meta.clone();
        meta.lsb_microvolts = lsb;
        let mut w = DcmWriter { out, meta, lsb, next_index: 0 };
        w.block(BlockType::Header, &payload)?;
        w.sync(0, start_unix_ns)?;
        Ok(w)
    }

    fn block(&mut self, kind: BlockType, payload: &[u8]) -> Result<(), SignalError> {
        debug_assert!(payload.len() <= MAX_BLOCK_PAYLOAD);
        let len = (payload.len() as u32).to_le_bytes();
        let head = [kind as u8, len[0], len[1], len[2]];
        let crc = block_crc(&head, payload);
        let io = |e| SignalError::io("<dcm writer>", e);
        self.out.write_all(&head).map_err(io)?;
        self.out.write_all(payload).map_err(io)?;
        self.out.write_all(&crc.to_le_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn sync(&mut self, sample_index: u64, unix_time_ns: u64) -> Result<(), SignalError> {
        let mut p = [0u8; 16];
        p[..8].copy_from_slice(&sample_index.to_le_bytes());
        p[8..].copy_from_slice(&unix_time_ns.to_le_bytes());
        self.next_index = self.next_index.max(sample_index);
        self.block(BlockType::Sync, &p)
    }

    pub fn aux(&mut self, kind: AuxKind, data: &[u8]) -> Result<(), SignalError> {
        let mut p = Vec::with_capacity(data.len() + 1);
        p.push(kind.to_u8());
        p.extend_from_slice(data);
        self.block(BlockType::Aux, &p)
    }

    /// Quantizes and appends a chunk. A chunk starting after the current
    /// position is preceded by a SYNC block marking the discontinuity.
    pub fn write_chunk(&mut self, chunk: &SignalChunk) -> Result<(), SignalError> {
        let ch = self.meta.channel_count;
        if chunk.channels() != ch {
            return Err(SignalError::InvalidChunk(format!("{} channels, log has {ch}", chunk.channels())));
        }
        let index = (chunk.start.as_secs_f64() * self.meta.sample_rate).round() as u64;
        if index > self.next_index {
            self.sync(index, 0)?;
        }
        // quantize everything first so an over-range sample leaves the file untouched
        let frames = chunk.frames();
        let mut codes = Vec::with_capacity(frames * ch);
        for f in 0..frames {
            for c in 0..ch {
                let v = chunk.sample(c, f);
                let code = (v / self.lsb).round();
                if !(code >= CODE_MIN as f64 && code <= CODE_MAX as f64) {
                    return Err(SignalError::OverRange { channel: c, value: v, lsb: self.lsb });
                }
                codes.push(code as i32);
            }
        }
        for block in codes.chunks(MAX_FRAMES_PER_BLOCK * ch) {
            let n = block.len() / ch;
            let mut p = Vec::with_capacity(2 + block.len() * 3);
            p.extend_from_slice(&(n as u16).to_le_bytes());
            for &code in block {
                p.extend_from_slice(&from_code(code));
            }
            self.block(BlockType::Frame, &p)?;
            self.next_index += n as u64;
        }
        Ok(())
    }

    /// Writes the TRAILER and flushes.
    pub fn finish(mut self) -> Result<W, SignalError> {
        let total = self.next_index.to_le_bytes();
        self.block(BlockType::Trailer, &total)?;
        self.out.flush().map_err(|e| SignalError::io("<dcm writer>", e))?;
        Ok(self.out)
    }
}

pub fn write_dcm_log<'a>(
    meta: &DeviceMeta,
    chunks: impl IntoIterator<Item = &'a SignalChunk>,
    path: impl AsRef<Path>,
) -> Result<(), SignalError> {
    let mut w = DcmWriter::create(path, meta, 0)?;
    for chunk in chunks {
        w.write_chunk(chunk)?;
    }
    w.finish()?;
    Ok(())
}

fn block_crc(head: &[u8; 4], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(head);
    h.update(payload);
    h.finalize()
}

fn read_up_to(input: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn parse_header(p: &[u8]) -> Result<DeviceMeta, SignalError> {
    let bad = |m: &str| SignalError::MalformedHeader(m.to_string());
    if p.len() < 13 {
        return Err(bad("header payload too short"));
    }
    if p[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", p[4])));
    }
    let channels = p[5] as usize;
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(bad(&format!("channel count {channels}")));
    }
    let rate = u16::from_le_bytes([p[6], p[7]]);
    if rate == 0 {
        return Err(bad("zero sample rate"));
    }
    if p[8] != DCM_ADC_BITS {
        return Err(bad(&format!("adc_bits {}", p[8])));
    }
    let lsb_pv = u32::from_le_bytes([p[9], p[10], p[11], p[12]]);
    if lsb_pv == 0 {
        return Err(bad("zero lsb"));
    }
    let mut labels = Vec::with_capacity(channels);
    let mut rest = &p[13..];
    for c in 0..channels {
        let (&n, tail) = rest.split_first().ok_or_else(|| bad(&format!("label {c} missing")))?;
        let n = n as usize;
        if tail.len() < n {
            return Err(bad(&format!("label {c} truncated")));
        }
        labels.push(String::from_utf8_lossy(&tail[..n]).into_owned());
        rest = &tail[n..];
    }
    Ok(DeviceMeta {
        channel_count: channels,
        sample_rate: rate as f64,
        adc_bits: DCM_ADC_BITS,
        lsb_microvolts: lsb_pv as f64 / PICOVOLTS_PER_MICROVOLT,
        channel_labels: labels,
        derivation: vec![Derivation::Raw; channels],
    })
}
