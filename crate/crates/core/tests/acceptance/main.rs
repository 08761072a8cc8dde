//! Acceptance run: one PASS/FAIL line per criterion, with the measured numbers.
//!
//! Exits non-zero when a criterion fails, except those listed in
//! `KNOWN_UNATTAINABLE`, which are still run and still reported as FAIL.

use std::f64::consts::PI;
use std::io::{Cursor, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleeploop::dsp::{band_power, design_bandpass, Band, BandSpec, EpochAccumulator, EPOCH_SECS};
use sleeploop::msgbus::ReplaySpeed;
use sleeploop::session::{
    read_event_log, run_headless, EventKind, RunOptions, SessionConfig, SessionSummary, SourceConfig,
};
use sleeploop::signal_io::{read_edf, DcmItem, DcmReader, DcmWriter, DeviceMeta, SignalChunk};
use sleeploop::staging::{detect_sleep_onset, smooth_hypnogram, RuleBasedStager, SleepStage};
use sleeploop::subject_sim::{NightPlan, StimResponseModel, SubjectSim};
use sleeploop::swdetect::{event_locked_average, AStimConfig, SlowWaveDetector, StimMode, MISSED_DEADLINE};
use sleeploop::thermal::{ThermalMode, ThermalPhase, ThermalPlant};
use sleeploop::time::Timestamp;
use SleepStage::*;

/// Criteria whose failure is analysed and accepted; see the decisions ledger.
const KNOWN_UNATTAINABLE: &[&str] = &["thermal-yoking"];

type Verdict = (bool, String);

/// Runs a session; the directory holding its files lives as long as the returned guard.
fn session(cfg: SessionConfig, record: bool) -> (tempfile::TempDir, SessionSummary) {
    let dir = tempfile::tempdir().expect("temp dir");
    let opts = RunOptions { record_channel: record.then_some(0) };
    let s = run_headless(cfg, dir.path(), opts).expect("session runs");
    (dir, s)
}

fn stim_timing() -> Verdict {
    let started = Instant::now();
    let cfg = SessionConfig::simulated("accept-timing", NightPlan::single(N3, 3600.0, 101), ReplaySpeed::Unlimited);
    let want_len = (0.050 * cfg.astim.audio_rate as f64).round() as usize;
    let (_dir, s) = session(cfg, false);
    let wall = started.elapsed().as_secs_f64();
    let delivered: Vec<_> = s.stims.iter().filter(|e| !e.is_missed()).collect();
    let exact = delivered.iter().all(|e| e.scheduled_time.nanos() - e.crossing_time.nanos() == 400_000_000);
    let errors: Vec<f64> = delivered.iter().filter_map(|e| e.error_secs()).collect();
    let max_err = errors.iter().copied().fold(0.0, f64::max);
    let within_20 = errors.iter().all(|&e| (0.0..=MISSED_DEADLINE.as_secs_f64()).contains(&e));
    let frac_5 = errors.iter().filter(|&&e| e <= 0.005).count() as f64 / errors.len().max(1) as f64;
    let bursts_ok = s.audio_lengths.len() == delivered.len() && s.audio_lengths.iter().all(|&n| n == want_len);
    let pass = !delivered.is_empty() && exact && within_20 && frac_5 >= 0.95 && bursts_ok && wall <= 60.0;
    (
        pass,
        format!(
            "{} delivered, {} missed, delay exact={exact}, max error {:.3} ms, {:.1}% <= 5 ms, bursts {} x {want_len} samples ok={bursts_ok}, {wall:.1} s wall",
            delivered.len(),
            s.stims.len() - delivered.len(),
            max_err * 1e3,
            frac_5 * 100.0,
            s.audio_lengths.len()
        ),
    )
}

fn detector() -> Verdict {
    let rate = 250.0;
    let cfg = AStimConfig::default();
    let gain = design_bandpass(&cfg.detect_band, rate).unwrap().response(1.0).norm();
    let run = |x: &[f64], stage: &dyn Fn(usize) -> SleepStage| {
        let mut det = SlowWaveDetector::new(&cfg, rate).unwrap();
        x.iter()
            .enumerate()
            .filter_map(|(k, &v)| det.push(Timestamp::ZERO.at_frame(k as u64, rate), v, stage(k)).1)
            .map(|t| t.as_secs_f64())
            .collect::<Vec<f64>>()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for amp in [60.0, 75.0, 100.0, 150.0, 200.0] {
        for p in 0..8 {
            let phi = p as f64 * PI / 4.0;
            let x: Vec<f64> = (0..(40.0 * rate) as usize).map(|k| amp * (2.0 * PI * k as f64 / rate + phi).sin()).collect();
            let base = (PI + (-cfg.threshold / (amp * gain)).asin() - phi) / (2.0 * PI);
            for t in run(&x, &|_| N3).into_iter().filter(|&t| t > 12.0) {
                let n = (t - base).round();
                worst = worst.max((t - (base + n)).abs());
                checked += 1;
            }
        }
    }
    let zero = run(&vec![0.0; (600.0 * rate) as usize], &|_| N3).len();
    let wave: Vec<f64> = (0..(120.0 * rate) as usize).map(|k| 120.0 * (2.0 * PI * k as f64 / rate).sin()).collect();
    let segment = (10.0 * rate) as usize;
    let alternating = |k: usize| if (k / segment) % 2 == 0 { W } else { N3 };
    let mut det = SlowWaveDetector::new(&cfg, rate).unwrap();
    let mut in_wake = 0;
    for (k, &v) in wave.iter().enumerate() {
        if det.push(Timestamp::ZERO.at_frame(k as u64, rate), v, alternating(k)).1.is_some() && alternating(k) == W {
            in_wake += 1;
        }
    }
    let pass = checked > 0 && worst <= 1.0 / rate && zero == 0 && in_wake == 0;
    (pass, format!("{checked} crossings, worst error {:.4} ms (limit 4 ms), {zero} on zero input, {in_wake} during W", worst * 1e3))
}

/// One-sided power in `band` from a direct DFT, uV^2.
fn dft_band_power(x: &[f64], rate: f64, band: Band) -> f64 {
    let n = x.len();
    (1..n / 2)
        .filter(|&k| (band.low..=band.high).contains(&(k as f64 * rate / n as f64)))
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i % n) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            2.0 * (re * re + im * im) / (n * n) as f64
        })
        .sum()
}

fn swa() -> Verdict {
    let rate = 250.0;
    let x: Vec<f64> = (0..(30.0 * rate) as usize).map(|k| 75.0 * (2.0 * PI * k as f64 / rate).sin()).collect();
    let oracle = dft_band_power(&x, rate, Band::SWA);
    let got = band_power(&x, rate, Band::SWA).unwrap();
    let rel = (got - oracle).abs() / oracle;
    let pass = (oracle - 2812.5).abs() / 2812.5 < 0.05 && (got - 2812.5).abs() / 2812.5 < 0.05 && rel < 0.05;
    (pass, format!("computed {got:.1} uV^2, direct DFT {oracle:.1}, expected 2812.5, deviation {:.2}%", rel * 100.0))
}

fn closed_loop_boost() -> Verdict {
    let plan = NightPlan::typical(17, 600.0, 3.0 * 3600.0);
    let run = |mode: StimMode| {
        let mut cfg = SessionConfig::simulated(format!("accept-boost-{mode:?}"), plan.clone(), ReplaySpeed::Unlimited);
        cfg.astim.mode = mode;
        if let SourceConfig::SimulatedSubject { response, .. } = &mut cfg.source {
            *response = StimResponseModel { boost_factor: 1.2, ..StimResponseModel::default() };
        }
        let (_dir, s) = session(cfg, true);
        let rec = s.recording.as_ref().expect("recording");
        let avg = event_locked_average(&rec.samples, rec.start, rec.sample_rate, &s.stims, [-1.0, 2.0], &BandSpec::SWA).unwrap();
        let cond = if mode == StimMode::Active { avg.active } else { avg.sham };
        cond.map(|c| (c.count, c.summary.auc)).unwrap_or((0, 0.0))
    };
    let (na, auc_a) = run(StimMode::Active);
    let (ns, auc_s) = run(StimMode::Sham);
    let spread = na.abs_diff(ns) as f64 / na.max(ns).max(1) as f64;
    let pass = auc_a > auc_s && na >= 50 && ns >= 50 && spread <= 0.10;
    (pass, format!("active {na} events AUC {auc_a:.2} uV*s, sham {ns} events AUC {auc_s:.2} uV*s, count spread {:.1}%", spread * 100.0))
}

fn first_ramp(s: &SessionSummary) -> Option<f64> {
    let log = read_event_log(&s.events_path()).expect("event log");
    log.events.iter().find_map(|e| match e.kind {
        EventKind::ThermalPhaseChange { to: ThermalPhase::Ramping, .. } => Some(e.at.as_secs_f64()),
        _ => None,
    })
}

/// Returns (yoking verdict, fixed-delay verdict).
fn thermal_sweep() -> (Verdict, Verdict) {
    let mut yoked_ok = true;
    let mut fixed_ok = true;
    let mut yoked = Vec::new();
    let mut fixed = Vec::new();
    for (i, latency) in [300.0, 900.0, 1800.0, 3600.0].into_iter().enumerate() {
        let plan = NightPlan::typical(60 + i as u64, latency, 3600.0);
        for mode in [ThermalMode::StageYoked, ThermalMode::FixedDelay { delay: 1200.0 }] {
            let mut cfg = SessionConfig::simulated(format!("accept-thermal-{i}"), plan.clone(), ReplaySpeed::Unlimited);
            cfg.thermal.mode = mode;
            let tick = cfg.thermal.tick;
            let ramp = first_ramp(&session(cfg, false).1);
            match mode {
                ThermalMode::StageYoked => {
                    let lag = ramp.map(|r| r - latency);
                    yoked_ok &= lag.is_some_and(|l| (0.0..=EPOCH_SECS + tick).contains(&l));
                    yoked.push(format!("SOL {latency:.0}: lag {}", lag.map_or("none".into(), |l| format!("{l:.0} s"))));
                }
                ThermalMode::FixedDelay { delay } => {
                    fixed_ok &= ramp == Some(delay);
                    fixed.push(format!(
                        "SOL {latency:.0}: start {} ({:+.0} s vs onset)",
                        ramp.map_or("none".into(), |r| format!("{r:.0} s")),
                        ramp.unwrap_or(f64::NAN) - latency
                    ));
                }
            }
        }
    }
    (
        (yoked_ok, format!("StageYoked ramp vs true onset, limit 31 s: {}", yoked.join(", "))),
        (fixed_ok, format!("FixedDelay(1200 s): {}", fixed.join(", "))),
    )
}

fn plant() -> Verdict {
    let mut worst = 0.0f64;
    for (start, cmd, tau) in [(27.0, 20.0, 300.0), (20.0, 27.0, 300.0), (33.5, 18.25, 1234.5), (27.0, 27.0, 60.0)] {
        for parts in [1usize, 7, 300] {
            let mut p = ThermalPlant::new(start, tau);
            for _ in 0..parts {
                p.step(cmd, tau / parts as f64);
            }
            worst = worst.max((p.temp - (cmd + (start - cmd) / std::f64::consts::E)).abs());
        }
    }
    (worst <= 1e-9, format!("worst deviation from closed form {worst:.2e} C (limit 1e-9)"))
}

fn reference_smooth(raw: &[SleepStage]) -> Vec<SleepStage> {
    let mut out: Vec<SleepStage> = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let v = if i < 2 {
            raw[i]
        } else {
            let w = &raw[i - 2..=i];
            SleepStage::ALL.into_iter().find(|s| w.iter().filter(|x| *x == s).count() >= 2).unwrap_or(out[i - 1])
        };
        out.push(v);
    }
    out
}

fn stager() -> Verdict {
    let stager = RuleBasedStager::default();
    let mut per_night = Vec::new();
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in 0..10u64 {
        let plan = NightPlan::typical(500 + seed, 600.0 + 120.0 * seed as f64, 6.0 * 3600.0);
        let truth = plan.ground_truth();
        let mut acc = EpochAccumulator::new(250.0, EPOCH_SECS, Timestamp::ZERO);
        let mut hits = 0;
        let mut n = 0;
        for chunk in SubjectSim::new(plan, StimResponseModel::NONE).unwrap() {
            for &x in chunk.channel(0) {
                if let Some(f) = acc.push_sample(x) {
                    if let Some(t) = truth.get(f.epoch_index as usize) {
                        hits += usize::from(stager.classify(&f).stage == t.stage);
                        n += 1;
                    }
                }
            }
        }
        per_night.push(hits as f64 / n as f64);
        agree += hits;
        total += n;
    }
    let pooled = agree as f64 / total as f64;
    let worst = per_night.iter().copied().fold(1.0, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut violations = 0;
    for _ in 0..100_000 {
        let len: usize = rng.random_range(0..60);
        let raw: Vec<SleepStage> = (0..len).map(|_| SleepStage::ALL[rng.random_range(0..5)]).collect();
        let smoothed = smooth_hypnogram(&raw);
        let ok = smoothed == reference_smooth(&raw)
            && (0..len).all(|i| raw[i.saturating_sub(2)..=i].contains(&smoothed[i]) || (i > 0 && smoothed[i] == smoothed[i - 1]))
            && detect_sleep_onset(&smoothed).is_none_or(|o| smoothed[o.onset_epoch as usize] != W);
        violations += usize::from(!ok);
    }
    let pass = pooled >= 0.90 && worst >= 0.90 && violations == 0;
    (
        pass,
        format!(
            "agreement {:.1}% over {total} epochs of 10 nights (worst night {:.1}%), smoothing violations {violations} / 100000",
            pooled * 100.0,
            worst * 100.0
        ),
    )
}

fn edf_file(dir: &Path, name: &str, header: &[(f64, f64, i16, i16)], samples: &[Vec<i16>]) -> std::path::PathBuf {
    let field = |out: &mut Vec<u8>, s: &str, w: usize| {
        out.extend_from_slice(s.as_bytes());
        out.extend(std::iter::repeat_n(b' ', w - s.len()));
    };
    let ns = header.len();
    let spr = samples[0].len();
    let mut out = Vec::new();
    for (s, w) in [("0", 8), ("X", 80), ("X", 80), ("01.01.24", 8), ("22.00.00", 8)] {
        field(&mut out, s, w);
    }
    field(&mut out, &(256 * (ns + 1)).to_string(), 8);
    field(&mut out, "", 44);
    for (s, w) in [("1", 8), ("1", 8)] {
        field(&mut out, s, w);
    }
    field(&mut out, &ns.to_string(), 4);
    let per_signal = |f: &dyn Fn(usize, &(f64, f64, i16, i16)) -> String| header.iter().enumerate().map(|(i, h)| f(i, h)).collect::<Vec<_>>();
    let columns = [
        (16, per_signal(&|i, _| format!("EEG{i}"))),
        (80, per_signal(&|_, _| String::new())),
        (8, per_signal(&|_, _| "uV".into())),
        (8, per_signal(&|_, h| h.0.to_string())),
        (8, per_signal(&|_, h| h.1.to_string())),
        (8, per_signal(&|_, h| h.2.to_string())),
        (8, per_signal(&|_, h| h.3.to_string())),
        (80, per_signal(&|_, _| String::new())),
        (8, per_signal(&|_, _| spr.to_string())),
        (32, per_signal(&|_, _| String::new())),
    ];
    for (w, values) in &columns {
        for v in values {
            field(&mut out, v, *w);
        }
    }
    for s in samples {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(name);
    std::fs::File::create(&path).unwrap().write_all(&out).unwrap();
    path
}

fn formats() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0f0);
    let (lo, hi) = (-(1i32 << 23), (1i32 << 23) - 1);

    // device log: random valid streams, codes bit-exact
    let mut streams = 0;
    let mut mismatches = 0;
    let mut last_bytes = Vec::new();
    for _ in 0..300 {
        let ch = rng.random_range(1..=16);
        let meta = DeviceMeta::dcm(ch, 250.0);
        let lsb = meta.lsb_microvolts;
        let mut frame = 0u64;
        let mut codes = Vec::new();
        let chunks: Vec<SignalChunk> = (0..rng.random_range(1..6))
            .map(|seq| {
                let frames = rng.random_range(1..200);
                let data: Vec<Vec<f64>> = (0..ch)
                    .map(|_| {
                        (0..frames)
                            .map(|_| match rng.random_range(0..8) {
                                0 => lo,
                                1 => hi,
                                _ => rng.random_range(lo..=hi),
                            })
                            .inspect(|&c| codes.push(c))
                            .map(|c| c as f64 * lsb)
                            .collect()
                    })
                    .collect();
                let c = SignalChunk::new(Timestamp::ZERO.at_frame(frame, 250.0), 250.0, seq, data).unwrap();
                frame += frames as u64;
                c
            })
            .collect();
        let mut w = DcmWriter::new(Vec::new(), &meta, 0).unwrap();
        chunks.iter().for_each(|c| w.write_chunk(c).unwrap());
        let bytes = w.finish().unwrap();
        let mut back = Vec::new();
        for item in DcmReader::new(Cursor::new(&bytes)).unwrap() {
            if let Ok(DcmItem::Chunk(c)) = item {
                back.extend((0..c.channels()).flat_map(|k| c.channel(k).to_vec()));
            }
        }
        let want: Vec<f64> = chunks.iter().flat_map(|c| (0..c.channels()).flat_map(|k| c.channel(k).to_vec())).collect();
        let same = back.len() == want.len()
            && back.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits() && (a / lsb).round() == (b / lsb).round());
        mismatches += usize::from(!same);
        streams += 1;
        last_bytes = bytes;
    }

    // every prefix of a device log
    let mut panics = 0;
    for cut in 0..=last_bytes.len() {
        let r = catch_unwind(AssertUnwindSafe(|| {
            if let Ok(reader) = DcmReader::new(Cursor::new(&last_bytes[..cut])) {
                reader.for_each(drop);
            }
        }));
        panics += usize::from(r.is_err());
    }

    // EDF header linear map at the digital extremes
    let dir = tempfile::tempdir().unwrap();
    let mut endpoint_misses = 0;
    for i in 0..200 {
        let lo_tenths = rng.random_range(-99_999..0);
        let pmin = lo_tenths as f64 / 10.0;
        let pmax = (lo_tenths + rng.random_range(1..99_999)) as f64 / 10.0;
        let dmin = rng.random_range(-32768..0) as i16;
        let dmax = rng.random_range(1..=32767) as i16;
        let path = edf_file(dir.path(), &format!("map{i}.edf"), &[(pmin, pmax, dmin, dmax)], &[vec![dmin, dmax, 0, dmin]]);
        let (_, mut chunks) = read_edf(&path).unwrap();
        let c = chunks.next().unwrap().unwrap();
        endpoint_misses += usize::from(c.sample(0, 0) != pmin || c.sample(0, 1) != pmax || c.sample(0, 3) != pmin);
    }

    // every prefix of an EDF file
    let full = edf_file(dir.path(), "full.edf", &[(-3276.8, 3276.7, -32768, 32767); 2], &[vec![1, 2, 3, 4], vec![5, 6, 7, 8]]);
    let bytes = std::fs::read(&full).unwrap();
    for cut in 0..=bytes.len() {
        let path = dir.path().join(format!("cut{cut}.edf"));
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let r = catch_unwind(|| {
            if let Ok((_, chunks)) = read_edf(&path) {
                chunks.for_each(drop);
            }
        });
        panics += usize::from(r.is_err());
    }
    let pass = mismatches == 0 && endpoint_misses == 0 && panics == 0;
    (
        pass,
        format!(
            "{streams} device-log streams with {mismatches} code mismatches, {endpoint_misses}/200 EDF endpoint misses, {panics} panics over {} truncations",
            last_bytes.len() + bytes.len() + 2
        ),
    )
}

fn determinism() -> Verdict {
    let plan = NightPlan::typical(23, 600.0, 3600.0);
    let run = || {
        let (_dir, s) = session(SessionConfig::simulated("accept-determinism", plan.clone(), ReplaySpeed::Unlimited), false);
        std::fs::read(s.events_path()).expect("event log")
    };
    let (a, b) = (run(), run());
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    (a == b && !a.is_empty(), format!("{} vs {} bytes, {lines} events, identical={}", a.len(), b.len(), a == b))
}

fn throughput() -> Verdict {
    let plan = NightPlan::typical(31, 900.0, 8.0 * 3600.0 - 900.0);
    let (_dir, s) = session(SessionConfig::simulated("accept-throughput", plan, ReplaySpeed::Unlimited), false);
    let factor = s.graph_secs / s.wall_secs;
    let channels = SubjectSim::meta().channel_count;
    (
        factor >= 50.0 && s.graph_secs >= 8.0 * 3600.0 - 1.0,
        format!("{:.0} s of {channels}-channel data in {:.1} s wall, {factor:.0}x real time (limit 50x)", s.graph_secs, s.wall_secs),
    )
}

fn main() {
    let groups: Vec<Box<dyn Fn() -> Vec<(&'static str, Verdict)>>> = vec![
        Box::new(|| vec![("stim-timing", stim_timing())]),
        Box::new(|| vec![("detector", detector())]),
        Box::new(|| vec![("swa", swa())]),
        Box::new(|| vec![("closed-loop-boost", closed_loop_boost())]),
        Box::new(|| {
            let (yoked, fixed) = thermal_sweep();
            vec![("thermal-yoking", yoked), ("thermal-fixed-delay", fixed)]
        }),
        Box::new(|| vec![("plant", plant())]),
        Box::new(|| vec![("stager-calibration", stager())]),
        Box::new(|| vec![("formats", formats())]),
        Box::new(|| vec![("replay-determinism", determinism())]),
        Box::new(|| vec![("throughput", throughput())]),
    ];
    let mut failed = Vec::new();
    let mut passed = 0;
    for group in &groups {
        for (name, (pass, detail)) in group() {
            println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
            if pass {
                passed += 1;
            } else {
                failed.push(name);
            }
        }
    }
    let unexpected = failed.iter().filter(|n| !KNOWN_UNATTAINABLE.contains(n)).count();
    println!("{passed} passed, {} failed ({} known unattainable)", failed.len(), failed.len() - unexpected);
    if unexpected > 0 {
        std::process::exit(1);
    }
}
