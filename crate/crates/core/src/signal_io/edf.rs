//! Minimal reader for continuous EDF recordings.
//!
//! EDF+ annotation signals are skipped. Signals are grouped by sampling rate and
//! each group is exposed as its own stream.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use super::{DeviceMeta, Derivation, SignalChunk, SignalError, MAX_CHANNELS};
use crate::time::Timestamp;

const FIXED_HEADER: usize = 256;
const PER_SIGNAL_HEADER: usize = 256;
/// Far above any real recording; keeps a corrupt header from forcing a huge allocation.
const MAX_RECORD_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignalHeader {
    pub label: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub samples_per_record: usize,
}

impl EdfSignalHeader {
    /// Digital code to physical value in the header's unit.
    ///
    /// Written as an interpolation so that the digital extremes map exactly onto
    /// the physical extremes.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let span = (self.digital_max - self.digital_min) as f64;
        let t = (digital as i32 - self.digital_min) as f64 / span;
        self.physical_min * (1.0 - t) + self.physical_max * t
    }

    /// Factor converting the header's physical unit to microvolts.
    pub fn microvolt_factor(&self) -> f64 {
        match self.physical_dimension.trim() {
            "V" => 1e6,
            "mV" => 1e3,
            "nV" => 1e-3,
            // uV, µV and unitless channels pass through
            _ => 1.0,
        }
    }

    fn is_annotation(&self) -> bool {
        self.label.trim() == "EDF Annotations"
    }
}

/// Signals sharing one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfStream {
    pub meta: DeviceMeta,
    pub signals: Vec<usize>,
}

pub struct EdfReader {
    path: PathBuf,
    input: BufReader<File>,
    signals: Vec<EdfSignalHeader>,
    streams: Vec<EdfStream>,
    record_duration: f64,
    declared_records: Option<u64>,
    record_bytes: usize,
    next_record: u64,
    done: bool,
}

impl EdfReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SignalError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| SignalError::io(&path, e))?;
        let mut input = BufReader::new(file);

        let mut fixed = [0u8; FIXED_HEADER];
        input
            .read_exact(&mut fixed)
            .map_err(|_| SignalError::MalformedHeader("file shorter than the 256-byte header".into()))?;
        let header_bytes: usize = parse_field(&fixed[184..192], "header bytes")?;
        let declared: i64 = parse_field(&fixed[236..244], "number of records")?;
        let record_duration: f64 = parse_field(&fixed[244..252], "record duration")?;
        let ns: usize = parse_field(&fixed[252..256], "number of signals")?;
        if ns == 0 {
            return Err(SignalError::MalformedHeader("zero signals".into()));
        }
        if header_bytes != FIXED_HEADER + PER_SIGNAL_HEADER * ns {
            return Err(SignalError::MalformedHeader(format!(
                "header size {header_bytes} does not match {ns} signals"
            )));
        }
        if !(record_duration > 0.0) {
            return Err(SignalError::InconsistentRates(format!("record duration {record_duration} <= 0")));
        }
        let declared_records = match declared {
            -1 => None,
            n if n >= 0 => Some(n as u64),
            n => return Err(SignalError::MalformedHeader(format!("number of records {n}"))),
        };

        let mut block = vec![0u8; PER_SIGNAL_HEADER * ns];
        input
            .read_exact(&mut block)
            .map_err(|_| SignalError::MalformedHeader("signal headers truncated".into()))?;
        let signals = parse_signal_headers(&block, ns)?;
        let record_bytes: usize = signals.iter().map(|s| s.samples_per_record.saturating_mul(2)).fold(0, usize::saturating_add);
        if record_bytes > MAX_RECORD_BYTES {
            return Err(SignalError::MalformedHeader(format!("data record of {record_bytes} bytes")));
        }
        let streams = group_streams(&signals, record_duration)?;

        Ok(EdfReader {
            path,
            input,
            signals,
            streams,
            record_duration,
            declared_records,
            record_bytes,
            next_record: 0,
            done: false,
        })
    }

    pub fn signals(&self) -> &[EdfSignalHeader] {
        &self.signals
    }

    pub fn streams(&self) -> &[EdfStream] {
        &self.streams
    }

    pub fn record_duration(&self) -> f64 {
        self.record_duration
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads the next data record and returns one chunk per stream.
    ///
    /// Yields `None` at a clean end of file; a partial record (or fewer records
    /// than the header declares) yields `TruncatedRecord` once and then `None`.
    pub fn next_record(&mut self) -> Option<Result<Vec<SignalChunk>, SignalError>> {
        if self.done {
            return None;
        }
        if self.declared_records == Some(self.next_record) {
            self.done = true;
            return None;
        }
        let mut buf = vec![0u8; self.record_bytes];
        let got = match read_up_to(&mut self.input, &mut buf) {
            Ok(n) => n,
            Err(e) => {
                self.done = true;
                return Some(Err(SignalError::io(&self.path, e)));
            }
        };
        if got == 0 && self.declared_records.is_none() {
            self.done = true;
            return None;
        }
        if got < self.record_bytes {
            self.done = true;
            return Some(Err(SignalError::TruncatedRecord {
                record: self.next_record,
                expected: self.record_bytes,
                got,
            }));
        }

        let mut offsets = Vec::with_capacity(self.signals.len());
        let mut off = 0;
        for s in &self.signals {
            offsets.push(off);
            off += s.samples_per_record * 2;
        }
        let start = Timestamp::from_secs_f64(self.next_record as f64 * self.record_duration);
        let mut chunks = Vec::with_capacity(self.streams.len());
        for stream in &self.streams {
            let rows: Vec<Vec<f64>> = stream
                .signals
                .iter()
                .map(|&si| {
                    let s = &self.signals[si];
                    let k = s.microvolt_factor();
                    buf[offsets[si]..offsets[si] + s.samples_per_record * 2]
                        .chunks_exact(2)
                        .map(|b| s.to_physical(i16::from_le_bytes([b[0], b[1]])) * k)
                        .collect()
                })
                .collect();
            match SignalChunk::new(start, stream.meta.sample_rate, self.next_record, rows) {
                Ok(c) => chunks.push(c),
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        self.next_record += 1;
        Some(Ok(chunks))
    }

    /// Iterator over one stream's chunks.
    pub fn into_stream(self, index: usize) -> EdfChunks {
        EdfChunks { reader: self, index }
    }
}

pub struct EdfChunks {
    reader: EdfReader,
    index: usize,
}

impl EdfChunks {
    pub fn meta(&self) -> &DeviceMeta {
        &self.reader.streams[self.index].meta
    }
}

impl Iterator for EdfChunks {
    type Item = Result<SignalChunk, SignalError>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.index;
        self.reader
            .next_record()
            .map(|r| r.map(|mut chunks| chunks.swap_remove(index)))
    }
}

/// Opens `path` and returns the stream with the highest sampling rate.
pub fn read_edf(path: impl AsRef<Path>) -> Result<(DeviceMeta, EdfChunks), SignalError> {
    let reader = EdfReader::open(path)?;
    let index = reader
        .streams()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.meta.sample_rate.total_cmp(&b.1.meta.sample_rate).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| SignalError::MalformedHeader("no data signals".into()))?;
    let meta = reader.streams()[index].meta.clone();
    Ok((meta, reader.into_stream(index)))
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

fn ascii(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim().to_string()
}

fn parse_field<T: std::str::FromStr>(bytes: &[u8], what: &str) -> Result<T, SignalError> {
    let text = ascii(bytes);
    text.parse()
        .map_err(|_| SignalError::MalformedHeader(format!("{what}: {text:?}")))
}

fn parse_signal_headers(block: &[u8], ns: usize) -> Result<Vec<EdfSignalHeader>, SignalError> {
    // Fields are stored column-wise: all labels, then all transducers, ...
    let mut cursor = 0;
    let mut column = |width: usize| -> Vec<&[u8]> {
        let col = (0..ns).map(|i| &block[cursor + i * width..cursor + (i + 1) * width]).collect();
        cursor += width * ns;
        col
    };
    let labels = column(16);
    let _transducer = column(80);
    let dims = column(8);
    let pmin = column(8);
    let pmax = column(8);
    let dmin = column(8);
    let dmax = column(8);
    let _prefilter = column(80);
    let spr = column(8);

    (0..ns)
        .map(|i| {
            let s = EdfSignalHeader {
                label: ascii(labels[i]),
                physical_dimension: ascii(dims[i]),
                physical_min: parse_field(pmin[i], "physical minimum")?,
                physical_max: parse_field(pmax[i], "physical maximum")?,
                digital_min: parse_field(dmin[i], "digital minimum")?,
                digital_max: parse_field(dmax[i], "digital maximum")?,
                samples_per_record: parse_field(spr[i], "samples per record")?,
            };
            if s.digital_max <= s.digital_min {
                return Err(SignalError::MalformedHeader(format!("signal {i}: digital max <= digital min")));
            }
            if s.physical_max == s.physical_min || !s.physical_min.is_finite() || !s.physical_max.is_finite() {
                return Err(SignalError::MalformedHeader(format!("signal {i}: degenerate physical range")));
            }
            if s.samples_per_record == 0 {
                return Err(SignalError::MalformedHeader(format!("signal {i}: zero samples per record")));
            }
            Ok(s)
        })
        .collect()
}

fn group_streams(signals: &[EdfSignalHeader], duration: f64) -> Result<Vec<EdfStream>, SignalError> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in signals.iter().enumerate() {
        if s.is_annotation() {
            continue;
        }
        match groups.iter_mut().find(|(spr, _)| *spr == s.samples_per_record) {
            Some((_, members)) => members.push(i),
            None => groups.push((s.samples_per_record, vec![i])),
        }
    }
    groups
        .into_iter()
        .map(|(spr, members)| {
            if members.len() > MAX_CHANNELS {
                return Err(SignalError::InvalidMeta(format!(
                    "{} signals at one rate exceed the {MAX_CHANNELS}-channel limit",
                    members.len()
                )));
            }
            let first = &signals[members[0]];
            let lsb = (first.physical_max - first.physical_min).abs()
                / (first.digital_max - first.digital_min) as f64
                * first.microvolt_factor();
            let meta = DeviceMeta {
                channel_count: members.len(),
                sample_rate: spr as f64 / duration,
                adc_bits: 16,
                lsb_microvolts: lsb,
                channel_labels: members.iter().map(|&i| signals[i].label.clone()).collect(),
                derivation: vec![Derivation::Raw; members.len()],
            };
            Ok(EdfStream { meta, signals: members })
        })
        .collect()
}
