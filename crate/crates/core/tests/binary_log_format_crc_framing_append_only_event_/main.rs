//! Framing properties of the two append-only formats: the binary device log
//! and the newline-delimited session event journal.

use std::f64::consts::PI;
use std::io::Cursor;

use proptest::prelude::*;
use sleeploop::session::{parse_event_log, reconstruct, EventKind, EventLog, SessionEvent};
use sleeploop::signal_io::{DcmItem, DcmReader, DcmWriter, DeviceMeta, SignalChunk, SignalError};
use sleeploop::staging::SleepStage;
use sleeploop::time::Timestamp;

const CODE_MAX: i32 = (1 << 23) - 1;
const CODE_MIN: i32 = -(1 << 23);

fn meta(channels: usize, rate: f64) -> DeviceMeta {
    DeviceMeta::dcm(channels, rate)
}

/// Chunks whose samples sit exactly on the code grid of `lsb`.
fn coded_chunks(codes: &[Vec<i32>], channels: usize, lsb: f64, rate: f64) -> Vec<SignalChunk> {
    let mut frame = 0u64;
    codes
        .iter()
        .enumerate()
        .map(|(seq, block)| {
            let frames = block.len() / channels;
            // block is frame-major; chunks are channel-major
            let mut data = vec![Vec::with_capacity(frames); channels];
            for f in 0..frames {
                for (c, row) in data.iter_mut().enumerate() {
                    row.push(block[f * channels + c] as f64 * lsb);
                }
            }
            let chunk = SignalChunk::new(Timestamp::ZERO.at_frame(frame, rate), rate, seq as u64, data).unwrap();
            frame += frames as u64;
            chunk
        })
        .collect()
}

fn write(meta: &DeviceMeta, chunks: &[SignalChunk]) -> Vec<u8> {
    let mut w = DcmWriter::new(Vec::new(), meta, 1_700_000_000_000_000_000).unwrap();
    for c in chunks {
        w.write_chunk(c).unwrap();
    }
    w.finish().unwrap()
}

fn read_all(bytes: &[u8]) -> (DeviceMeta, Vec<Result<DcmItem, SignalError>>) {
    let reader = DcmReader::new(Cursor::new(bytes)).unwrap();
    let meta = reader.meta().clone();
    (meta, reader.collect())
}

/// Independent walk over the block framing: returns every frame code in file order.
fn oracle_codes(bytes: &[u8], channels: usize) -> Vec<i32> {
    let mut codes = Vec::new();
    let mut at = 0;
    while at + 4 <= bytes.len() {
        let kind = bytes[at];
        let len = bytes[at + 1] as usize | (bytes[at + 2] as usize) << 8 | (bytes[at + 3] as usize) << 16;
        let payload = &bytes[at + 4..at + 4 + len];
        let stored = u32::from_le_bytes(bytes[at + 4 + len..at + 8 + len].try_into().unwrap());
        assert_eq!(crc32fast::hash(&bytes[at..at + 4 + len]), stored, "crc over header+payload");
        if kind == 0x02 {
            let n = u16::from_le_bytes([payload[0], payload[1]]) as usize;
            assert_eq!(payload.len(), 2 + n * channels * 3);
            for b in payload[2..].chunks_exact(3) {
                let raw = b[0] as i32 | (b[1] as i32) << 8 | (b[2] as i32) << 16;
                codes.push(if raw & 0x80_0000 != 0 { raw - (1 << 24) } else { raw });
            }
        }
        at += 8 + len;
    }
    assert_eq!(at, bytes.len(), "blocks tile the file");
    codes
}

fn codes_strategy() -> impl Strategy<Value = (usize, Vec<Vec<i32>>)> {
    (1usize..=16).prop_flat_map(|ch| {
        let code = prop_oneof![
            4 => CODE_MIN..=CODE_MAX,
            1 => Just(CODE_MIN),
            1 => Just(CODE_MAX),
            1 => Just(0),
            1 => Just(-1),
        ];
        let block = (1usize..40).prop_flat_map(move |frames| prop::collection::vec(code.clone(), frames * ch));
        (Just(ch), prop::collection::vec(block, 0..6))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dcm_codes_roundtrip_bit_exact((ch, blocks) in codes_strategy(), rate in prop::sample::select(vec![100.0, 250.0, 256.0, 500.0])) {
        let m = meta(ch, rate);
        let lsb = m.lsb_microvolts;
        let chunks = coded_chunks(&blocks, ch, lsb, rate);
        let bytes = write(&m, &chunks);

        let expected: Vec<i32> = blocks.iter().flatten().copied().collect();
        prop_assert_eq!(oracle_codes(&bytes, ch), expected);

        let (read_meta, items) = read_all(&bytes);
        prop_assert_eq!(read_meta.channel_count, ch);
        prop_assert_eq!(read_meta.lsb_microvolts, lsb);
        let got: Vec<SignalChunk> = items
            .into_iter()
            .map(|i| match i.unwrap() {
                DcmItem::Chunk(c) => c,
                other => panic!("unexpected item {other:?}"),
            })
            .collect();
        prop_assert_eq!(got.len(), chunks.len());
        for (a, b) in got.iter().zip(&chunks) {
            prop_assert_eq!(a.start, b.start);
            prop_assert_eq!(a.frames(), b.frames());
            for c in 0..ch {
                for f in 0..a.frames() {
                    prop_assert_eq!((a.sample(c, f) / lsb).round() as i32, (b.sample(c, f) / lsb).round() as i32);
                    prop_assert_eq!(a.sample(c, f).to_bits(), b.sample(c, f).to_bits());
                }
            }
        }
    }

    #[test]
    fn dcm_truncation_never_panics_and_keeps_a_prefix((ch, blocks) in codes_strategy(), cut in any::<prop::sample::Index>()) {
        let m = meta(ch, 250.0);
        let chunks = coded_chunks(&blocks, ch, m.lsb_microvolts, 250.0);
        let bytes = write(&m, &chunks);
        let cut = cut.index(bytes.len() + 1);
        let Ok(reader) = DcmReader::new(Cursor::new(&bytes[..cut])) else { return Ok(()) };
        let mut good = Vec::new();
        let mut errors = 0;
        for item in reader {
            match item {
                Ok(DcmItem::Chunk(c)) => good.push(c),
                Ok(_) => {}
                Err(_) => errors += 1,
            }
        }
        prop_assert!(errors <= 1);
        prop_assert!(good.len() <= chunks.len());
        for (a, b) in good.iter().zip(&chunks) {
            prop_assert_eq!(a, b);
        }
        if cut < bytes.len() {
            prop_assert_eq!(errors, 1, "a cut file must report truncation");
        }
    }

    #[test]
    fn dcm_fuzzed_bytes_never_panic(seed_file in codes_strategy(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)) {
        let (ch, blocks) = seed_file;
        let m = meta(ch, 250.0);
        let mut bytes = write(&m, &coded_chunks(&blocks, ch, m.lsb_microvolts, 250.0));
        for (i, v) in flips {
            let i = i.index(bytes.len());
            bytes[i] ^= v | 1;
        }
        if let Ok(reader) = DcmReader::new(Cursor::new(&bytes)) {
            for item in reader.take(10_000) {
                let _ = item;
            }
        }
    }

    #[test]
    fn event_log_prefix_survives_any_cut(notes in prop::collection::vec("[ -~é]{0,40}", 1..20), cut in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        let mut log = EventLog::create(&path).unwrap();
        let mut written: Vec<SessionEvent> = Vec::new();
        for (i, text) in notes.iter().enumerate() {
            let kind = if i % 3 == 1 {
                EventKind::StageChange { epoch_index: i as u64, from: None, to: SleepStage::N2, confidence: 0.1 * i as f64 }
            } else {
                EventKind::OperatorNote { text: text.clone() }
            };
            written.push(log.append(Timestamp::from_secs_f64(i as f64 * 0.5), kind).unwrap());
        }
        drop(log);
        let bytes = std::fs::read(&path).unwrap();
        let cut = cut.index(bytes.len() + 1);
        let contents = parse_event_log(&String::from_utf8_lossy(&bytes[..cut]));
        // records whose text fits in the cut; a missing final newline alone does not damage a record
        let complete = bytes.iter().enumerate().filter(|(p, b)| **b == b'\n' && *p <= cut).count();
        prop_assert_eq!(&contents.events[..], &written[..complete]);
        prop_assert_eq!(reconstruct(&contents.events), reconstruct(&written[..complete]));
    }

    #[test]
    fn event_log_corruption_stops_at_damaged_record(count in 2usize..15, at in any::<prop::sample::Index>(), v in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        let mut log = EventLog::create(&path).unwrap();
        let written: Vec<SessionEvent> = (0..count)
            .map(|i| log.append(Timestamp::from_secs_f64(i as f64), EventKind::OperatorNote { text: format!("note {i}") }).unwrap())
            .collect();
        drop(log);
        let mut bytes = std::fs::read(&path).unwrap();
        let i = at.index(bytes.len());
        let damaged_line = bytes[..i].iter().filter(|b| **b == b'\n').count();
        bytes[i] ^= v;
        let contents = parse_event_log(&String::from_utf8_lossy(&bytes));
        // everything before the damaged record is kept intact
        prop_assert!(contents.events.len() >= damaged_line.min(count));
        prop_assert_eq!(&contents.events[..damaged_line.min(count)], &written[..damaged_line.min(count)]);
        prop_assert!(contents.events.len() <= count);
        for e in &contents.events {
            prop_assert!(written.contains(e));
        }
    }
}

#[test]
fn sine_roundtrip_within_half_lsb() {
    let m = meta(2, 250.0);
    let lsb = m.lsb_microvolts;
    let x: Vec<f64> = (0..2500).map(|i| 100.0 * (2.0 * PI * 1.0 * i as f64 / 250.0).sin()).collect();
    let y: Vec<f64> = x.iter().map(|v| -v * 0.5).collect();
    let chunk = SignalChunk::new(Timestamp::ZERO, 250.0, 0, vec![x.clone(), y.clone()]).unwrap();
    let bytes = write(&m, &[chunk]);
    let (_, items) = read_all(&bytes);
    let mut got = [Vec::new(), Vec::new()];
    for item in items {
        if let DcmItem::Chunk(c) = item.unwrap() {
            got[0].extend_from_slice(c.channel(0));
            got[1].extend_from_slice(c.channel(1));
        }
    }
    assert_eq!(got[0].len(), 2500);
    for (a, b) in got[0].iter().zip(&x).chain(got[1].iter().zip(&y)) {
        assert!((a - b).abs() <= lsb / 2.0 + 1e-12, "{a} vs {b}");
    }
}

#[test]
fn over_range_sample_is_rejected() {
    let m = meta(1, 250.0);
    let chunk = SignalChunk::new(Timestamp::ZERO, 250.0, 0, vec![vec![0.0, 1e9, 0.0]]).unwrap();
    let mut w = DcmWriter::new(Vec::new(), &m, 0).unwrap();
    assert!(matches!(w.write_chunk(&chunk), Err(SignalError::OverRange { channel: 0, .. })));
}

#[test]
fn empty_stream_is_a_valid_file() {
    let bytes = write(&meta(3, 250.0), &[]);
    let reader = DcmReader::new(Cursor::new(&bytes)).unwrap();
    let mut reader = reader;
    assert!(reader.by_ref().next().is_none());
    assert_eq!(reader.trailer_frames(), Some(0));
    assert!(oracle_codes(&bytes, 3).is_empty());
}

#[test]
fn corrupt_frame_block_becomes_a_gap() {
    let m = meta(1, 250.0);
    let blocks: Vec<Vec<i32>> = (0..3).map(|b| (0..50).map(|i| b * 1000 + i).collect()).collect();
    let chunks = coded_chunks(&blocks, 1, m.lsb_microvolts, 250.0);
    let mut bytes = write(&m, &chunks);
    // locate the second FRAME block with the oracle's framing and flip a payload byte
    let mut at = 0;
    let mut frame_blocks = 0;
    loop {
        let len = bytes[at + 1] as usize | (bytes[at + 2] as usize) << 8 | (bytes[at + 3] as usize) << 16;
        if bytes[at] == 0x02 {
            frame_blocks += 1;
            if frame_blocks == 2 {
                bytes[at + 10] ^= 0x40;
                break;
            }
        }
        at += 8 + len;
    }
    let (_, items) = read_all(&bytes);
    let items: Vec<DcmItem> = items.into_iter().map(Result::unwrap).collect();
    assert_eq!(items.len(), 3);
    assert_eq!(items[0], DcmItem::Chunk(chunks[0].clone()));
    match &items[1] {
        DcmItem::Gap(g) => {
            assert_eq!(g.missing_frames, 50);
            assert_eq!(g.at, chunks[1].start);
        }
        other => panic!("expected gap, got {other:?}"),
    }
    match &items[2] {
        DcmItem::Chunk(c) => {
            assert_eq!(c.start, chunks[2].start);
            assert_eq!(c.channel(0), chunks[2].channel(0));
        }
        other => panic!("expected chunk, got {other:?}"),
    }
}

#[test]
fn discontinuous_chunk_is_read_back_as_gap() {
    let m = meta(1, 250.0);
    let a = SignalChunk::new(Timestamp::ZERO, 250.0, 0, vec![vec![0.0; 25]]).unwrap();
    let b = SignalChunk::new(Timestamp::ZERO.at_frame(75, 250.0), 250.0, 1, vec![vec![0.0; 25]]).unwrap();
    let bytes = write(&m, &[a, b.clone()]);
    let (_, items) = read_all(&bytes);
    let items: Vec<DcmItem> = items.into_iter().map(Result::unwrap).collect();
    assert!(matches!(&items[1], DcmItem::Gap(g) if g.missing_frames == 50));
    assert!(matches!(&items[2], DcmItem::Chunk(c) if c.start == b.start));
}
