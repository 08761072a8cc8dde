//! EDF reader checked against a small reference writer that lays out the
//! header exactly as the format describes.

use std::io::Write;
use std::path::Path;

use proptest::prelude::*;
use sleeploop::signal_io::{read_edf, EdfReader, SignalError};

#[derive(Clone, Debug)]
struct RefSignal {
    label: String,
    dim: String,
    pmin: String,
    pmax: String,
    dmin: i32,
    dmax: i32,
    spr: usize,
}

impl RefSignal {
    fn eeg(label: &str, spr: usize) -> Self {
        RefSignal {
            label: label.into(),
            dim: "uV".into(),
            pmin: "-3276.8".into(),
            pmax: "3276.7".into(),
            dmin: -32768,
            dmax: 32767,
            spr,
        }
    }

    /// Physical value of a code, by the affine map through the two header points.
    fn physical(&self, d: i16) -> f64 {
        let (pmin, pmax): (f64, f64) = (self.pmin.parse().unwrap(), self.pmax.parse().unwrap());
        pmin + (d as i32 - self.dmin) as f64 * (pmax - pmin) / (self.dmax - self.dmin) as f64
    }
}

fn field(out: &mut Vec<u8>, text: &str, width: usize) {
    assert!(text.len() <= width, "{text:?} wider than {width}");
    out.extend_from_slice(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - text.len()));
}

/// `records[r][s]` holds the digital samples of signal `s` in record `r`.
fn edf_bytes(signals: &[RefSignal], records: &[Vec<Vec<i16>>], declared: Option<i64>, duration: &str) -> Vec<u8> {
    let ns = signals.len();
    let mut out = Vec::new();
    field(&mut out, "0", 8);
    field(&mut out, "X X X X", 80);
    field(&mut out, "Startdate 01-JAN-2024 X X X", 80);
    field(&mut out, "01.01.24", 8);
    field(&mut out, "22.00.00", 8);
    field(&mut out, &(256 + 256 * ns).to_string(), 8);
    field(&mut out, "", 44);
    field(&mut out, &declared.unwrap_or(records.len() as i64).to_string(), 8);
    field(&mut out, duration, 8);
    field(&mut out, &ns.to_string(), 4);
    assert_eq!(out.len(), 256);
    let columns: [(usize, &dyn Fn(&RefSignal) -> String); 10] = [
        (16, &|s| s.label.clone()),
        (80, &|_| String::new()),
        (8, &|s| s.dim.clone()),
        (8, &|s| s.pmin.clone()),
        (8, &|s| s.pmax.clone()),
        (8, &|s| s.dmin.to_string()),
        (8, &|s| s.dmax.to_string()),
        (80, &|_| "HP:0.1Hz".into()),
        (8, &|s| s.spr.to_string()),
        (32, &|_| String::new()),
    ];
    for (width, f) in columns {
        for s in signals {
            field(&mut out, &f(s), width);
        }
    }
    assert_eq!(out.len(), 256 * (ns + 1));
    for record in records {
        for (s, samples) in signals.iter().zip(record) {
            assert_eq!(samples.len(), s.spr);
            for v in samples {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn save(dir: &Path, bytes: &[u8]) -> std::path::PathBuf {
    save_as(dir, "rec.edf", bytes)
}

fn save_as(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::File::create(&path).unwrap().write_all(bytes).unwrap();
    path
}

fn ramp_records(signals: &[RefSignal], count: usize) -> Vec<Vec<Vec<i16>>> {
    (0..count)
        .map(|r| {
            signals
                .iter()
                .enumerate()
                .map(|(s, sig)| (0..sig.spr).map(|i| ((r * 7919 + s * 104_729 + i * 31) % 65_536) as u16 as i16).collect())
                .collect()
        })
        .collect()
}

#[test]
fn two_signals_250_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let signals = vec![RefSignal::eeg("EEG Fpz-Cz", 250), RefSignal::eeg("EEG Pz-Oz", 250)];
    let records = ramp_records(&signals, 4);
    let path = save(dir.path(), &edf_bytes(&signals, &records, None, "1"));
    let (meta, chunks) = read_edf(&path).unwrap();
    assert_eq!(meta.sample_rate, 250.0);
    assert_eq!(meta.channel_count, 2);
    assert_eq!(meta.channel_labels, ["EEG Fpz-Cz", "EEG Pz-Oz"]);
    assert!((meta.lsb_microvolts - 0.1).abs() < 1e-12);
    let chunks: Vec<_> = chunks.map(Result::unwrap).collect();
    assert_eq!(chunks.len(), 4);
    for (r, chunk) in chunks.iter().enumerate() {
        assert_eq!(chunk.start.as_secs_f64(), r as f64);
        assert_eq!(chunk.frames(), 250);
        for (s, sig) in signals.iter().enumerate() {
            for (i, &d) in records[r][s].iter().enumerate() {
                let want = sig.physical(d);
                assert!((chunk.sample(s, i) - want).abs() <= 1e-9, "{} vs {want}", chunk.sample(s, i));
            }
        }
    }
}

#[test]
fn stream_selection_skips_annotations_and_picks_fastest_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut ann = RefSignal::eeg("EDF Annotations", 60);
    ann.dim = String::new();
    let mut emg = RefSignal::eeg("EMG", 100);
    emg.dim = "mV".into();
    emg.pmin = "-5".into();
    emg.pmax = "5".into();
    let signals = vec![emg.clone(), RefSignal::eeg("EEG C3", 512), ann, RefSignal::eeg("EEG C4", 512)];
    let records = ramp_records(&signals, 3);
    let path = save(dir.path(), &edf_bytes(&signals, &records, None, "2"));

    let reader = EdfReader::open(&path).unwrap();
    assert_eq!(reader.streams().len(), 2);
    let emg_stream = &reader.streams()[0];
    assert_eq!(emg_stream.meta.sample_rate, 50.0);
    assert!((emg_stream.meta.lsb_microvolts - 10.0 / 65535.0 * 1000.0).abs() < 1e-9);

    let (meta, chunks) = read_edf(&path).unwrap();
    assert_eq!(meta.sample_rate, 256.0);
    assert_eq!(meta.channel_labels, ["EEG C3", "EEG C4"]);
    let chunks: Vec<_> = chunks.map(Result::unwrap).collect();
    assert_eq!(chunks.len(), 3);
    assert_eq!(chunks[2].start.as_secs_f64(), 4.0);
    assert!((chunks[1].sample(1, 5) - signals[3].physical(records[1][3][5])).abs() < 1e-9);
}

#[test]
fn millivolt_signals_are_scaled_to_microvolts() {
    let dir = tempfile::tempdir().unwrap();
    let mut sig = RefSignal::eeg("EEG", 10);
    sig.dim = "mV".into();
    sig.pmin = "-1".into();
    sig.pmax = "1".into();
    sig.dmin = -1000;
    sig.dmax = 1000;
    let records = vec![vec![vec![-1000, -500, 0, 500, 1000, 1, -1, 250, -250, 999]]];
    let path = save(dir.path(), &edf_bytes(std::slice::from_ref(&sig), &records, None, "1"));
    let (_, chunks) = read_edf(&path).unwrap();
    let chunk = chunks.map(Result::unwrap).next().unwrap();
    assert_eq!(chunk.sample(0, 0), -1000.0);
    assert_eq!(chunk.sample(0, 4), 1000.0);
    assert!((chunk.sample(0, 3) - 500.0).abs() < 1e-9);
}

#[test]
fn unknown_record_count_reads_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let signals = vec![RefSignal::eeg("EEG", 250)];
    let records = ramp_records(&signals, 5);
    let path = save(dir.path(), &edf_bytes(&signals, &records, Some(-1), "1"));
    let (_, chunks) = read_edf(&path).unwrap();
    assert_eq!(chunks.map(Result::unwrap).count(), 5);
}

#[test]
fn truncation_at_every_byte_never_panics() {
    let dir = tempfile::tempdir().unwrap();
    let signals = vec![RefSignal::eeg("A", 25), RefSignal::eeg("B", 25)];
    let records = ramp_records(&signals, 3);
    let bytes = edf_bytes(&signals, &records, None, "0.1");
    let header = 256 * 3;
    let record_len = 100;
    for cut in 0..bytes.len() {
        let path = save_as(dir.path(), &format!("cut{cut}.edf"), &bytes[..cut]);
        let Ok(reader) = EdfReader::open(&path) else {
            assert!(cut < header, "header intact at {cut} but open failed");
            continue;
        };
        let results: Vec<_> = reader.into_stream(0).collect();
        let whole = (cut - header) / record_len;
        assert_eq!(results.len(), whole + 1, "cut {cut}");
        assert!(results[..whole].iter().all(Result::is_ok));
        match results.last().unwrap() {
            Err(SignalError::TruncatedRecord { record, .. }) => assert_eq!(*record as usize, whole),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn malformed_headers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = edf_bytes(&[RefSignal::eeg("EEG", 250)], &ramp_records(&[RefSignal::eeg("EEG", 250)], 1), None, "1");

    let mut zero_duration = good.clone();
    zero_duration[244..252].copy_from_slice(b"0       ");
    assert!(matches!(EdfReader::open(save(dir.path(), &zero_duration)), Err(SignalError::InconsistentRates(_))));

    let mut wrong_size = good.clone();
    wrong_size[184..192].copy_from_slice(b"1024    ");
    assert!(matches!(EdfReader::open(save(dir.path(), &wrong_size)), Err(SignalError::MalformedHeader(_))));

    let mut not_a_number = good.clone();
    not_a_number[252..256].copy_from_slice(b"x   ");
    assert!(matches!(EdfReader::open(save(dir.path(), &not_a_number)), Err(SignalError::MalformedHeader(_))));

    let mut flat_digital = good;
    // digital max column starts after labels, transducer, dim, pmin, pmax, dmin
    let at = 256 + 16 + 80 + 8 + 8 + 8 + 8;
    flat_digital[at..at + 8].copy_from_slice(b"-32768  ");
    assert!(matches!(EdfReader::open(save(dir.path(), &flat_digital)), Err(SignalError::MalformedHeader(_))));
}

fn decimal(tenths: i32) -> String {
    format!("{:.1}", tenths as f64 / 10.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn linear_map_is_endpoint_exact(
        lo in -999_999i32..999_999,
        span in 1i32..999_999,
        dmin in -32768i32..32000,
        dspan in 1i32..65535,
        inner in prop::collection::vec(any::<i16>(), 8),
    ) {
        let dmax = (dmin + dspan).min(32767);
        prop_assume!(dmax > dmin);
        let sig = RefSignal {
            label: "EEG".into(),
            dim: "uV".into(),
            pmin: decimal(lo),
            pmax: decimal(lo + span),
            dmin,
            dmax,
            spr: 10,
        };
        let mut samples = vec![dmin as i16, dmax as i16];
        samples.extend(inner.iter().map(|&d| d.clamp(dmin as i16, dmax as i16)));
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), &edf_bytes(std::slice::from_ref(&sig), &[vec![samples.clone()]], None, "1"));
        let (_, chunks) = read_edf(&path).unwrap();
        let chunk = chunks.map(Result::unwrap).next().unwrap();
        let pmin: f64 = sig.pmin.parse().unwrap();
        let pmax: f64 = sig.pmax.parse().unwrap();
        prop_assert_eq!(chunk.sample(0, 0), pmin);
        prop_assert_eq!(chunk.sample(0, 1), pmax);
        for (i, &d) in samples.iter().enumerate().skip(2) {
            let want = sig.physical(d);
            prop_assert!((chunk.sample(0, i) - want).abs() <= 1e-9 * pmax.abs().max(pmin.abs()).max(1.0));
            prop_assert!(chunk.sample(0, i) >= pmin.min(pmax) && chunk.sample(0, i) <= pmin.max(pmax));
        }
    }

    #[test]
    fn fuzzed_files_never_panic(flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..12), cut in any::<prop::sample::Index>()) {
        let signals = vec![RefSignal::eeg("A", 50), RefSignal::eeg("B", 25)];
        let mut bytes = edf_bytes(&signals, &ramp_records(&signals, 3), None, "0.2");
        for (i, v) in flips {
            let i = i.index(bytes.len());
            bytes[i] = v;
        }
        let cut = cut.index(bytes.len() + 1);
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), &bytes[..cut]);
        if let Ok(reader) = EdfReader::open(&path) {
            let streams = reader.streams().len();
            for stream in 0..streams {
                let reader = EdfReader::open(&path).unwrap();
                for item in reader.into_stream(stream).take(1000) {
                    let _ = item;
                }
            }
        }
    }
}
