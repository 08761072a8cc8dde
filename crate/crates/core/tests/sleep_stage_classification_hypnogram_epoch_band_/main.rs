//! Staging chain: rule-based stager, smoothing, onset and the hypnogram text format.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleeploop::dsp::{epoch_features, EpochFeatures, EPOCH_SECS};
use sleeploop::staging::{
    detect_sleep_onset, parse_hypnogram, smooth_hypnogram, write_hypnogram, HypnogramRecord, OnsetDetector,
    RuleBasedStager, SleepStage, StageDecision, Stager, StagingPipeline,
};
use sleeploop::subject_sim::{synth_stage_eeg, NightPlan, StimResponseModel, SubjectSim};
use sleeploop::thermal::{LineSink, ThermalConfig, ThermalMode, ThermalPhase, ThermalTask};
use sleeploop::time::Timestamp;
use SleepStage::*;

fn stage() -> impl Strategy<Value = SleepStage> {
    prop::sample::select(SleepStage::ALL.to_vec())
}

/// Straight-line majority vote used as the reference smoother.
fn reference_smooth(raw: &[SleepStage]) -> Vec<SleepStage> {
    let mut out: Vec<SleepStage> = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let v = if i < 2 {
            raw[i]
        } else {
            let w = &raw[i - 2..=i];
            let winner = SleepStage::ALL.into_iter().find(|s| w.iter().filter(|x| *x == s).count() >= 2);
            winner.unwrap_or(out[i - 1])
        };
        out.push(v);
    }
    out
}

fn reference_onset(smoothed: &[SleepStage]) -> Option<u64> {
    smoothed.windows(2).position(|w| w[0] != W && w[1] != W).map(|i| i as u64)
}

#[test]
fn smoothing_invariants_hold_on_100k_random_hypnograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..100_000 {
        let len = rng.random_range(0..40);
        let raw: Vec<SleepStage> = (0..len).map(|_| SleepStage::ALL[rng.random_range(0..5)]).collect();
        let smoothed = smooth_hypnogram(&raw);
        assert_eq!(smoothed, reference_smooth(&raw), "{raw:?}");
        for i in 0..smoothed.len() {
            let lo = i.saturating_sub(2);
            let in_window = raw[lo..=i].contains(&smoothed[i]);
            let is_prev = i > 0 && smoothed[i] == smoothed[i - 1];
            assert!(in_window || is_prev, "index {i} of {raw:?} -> {smoothed:?}");
        }
        let onset = detect_sleep_onset(&smoothed);
        assert_eq!(onset.map(|o| o.onset_epoch), reference_onset(&smoothed));
        if let Some(o) = onset {
            assert_ne!(smoothed[o.onset_epoch as usize], W);
            assert_eq!(o.onset_time.as_secs_f64(), o.onset_epoch as f64 * EPOCH_SECS);
        }
    }
}

proptest! {
    #[test]
    fn onset_fires_at_most_once(stages in prop::collection::vec(stage(), 0..80)) {
        let mut d = OnsetDetector::new();
        let fired: Vec<u64> = stages.iter().enumerate().filter_map(|(i, &s)| d.push(i as u64, s)).collect();
        prop_assert!(fired.len() <= 1);
        for &e in &fired {
            prop_assert_ne!(stages[e as usize], W);
            prop_assert_ne!(stages[e as usize + 1], W);
        }
        prop_assert_eq!(fired.first().copied(), reference_onset(&stages));
    }

    #[test]
    fn hypnogram_text_roundtrip(stages in prop::collection::vec((stage(), 0u32..=10_000), 0..60)) {
        let records: Vec<HypnogramRecord> = stages
            .iter()
            .enumerate()
            .map(|(i, &(stage, c))| HypnogramRecord { epoch_index: i as u64 * 2, stage, confidence: c as f64 / 10_000.0 })
            .collect();
        let mut text = Vec::new();
        write_hypnogram(&mut text, &records).unwrap();
        let text = String::from_utf8(text).unwrap();
        prop_assert_eq!(text.lines().count(), records.len());
        let back = parse_hypnogram(&text).unwrap();
        prop_assert_eq!(back, records);
    }
}

#[test]
fn hypnogram_rejects_bad_lines() {
    assert!(parse_hypnogram("0\tN2\t0.5\n1\tN9\t0.5\n").is_err());
    assert!(parse_hypnogram("0\tN2\t1.5\n").is_err());
    assert!(parse_hypnogram("3\tN2\t0.5\n2\tN2\t0.5\n").is_err());
    assert!(parse_hypnogram("0 N2 0.5\n").is_err());
    assert_eq!(parse_hypnogram("0\tREM\t0.25\n\n").unwrap()[0].stage, Rem);
}

#[test]
fn synthesized_stages_are_classified() {
    let stager = RuleBasedStager::default();
    for (stage, seed) in [(N3, 1), (W, 2), (N3, 3), (W, 4)] {
        let chunks = synth_stage_eeg(stage, 120.0, seed).unwrap();
        let features = epoch_features(&chunks, 0, EPOCH_SECS);
        assert_eq!(features.len(), 4);
        for f in &features {
            let d = stager.classify(f);
            assert_eq!(d.stage, stage, "seed {seed}: {f:?}");
            assert!((0.0..=1.0).contains(&d.confidence));
        }
    }
}

#[test]
fn identical_features_give_identical_hypnograms() {
    let plan = NightPlan::typical(11, 600.0, 1800.0);
    let chunks: Vec<_> = SubjectSim::new(plan, StimResponseModel::NONE).unwrap().collect();
    let features = epoch_features(&chunks, 0, EPOCH_SECS);
    let run = || {
        let mut p = StagingPipeline::new(Box::new(RuleBasedStager::default()), Timestamp::ZERO);
        features.iter().cloned().map(|f| p.push(f)).map(|(e, o)| (e.stage_raw, e.stage_smoothed, e.confidence.to_bits(), o)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Replays a fixed script regardless of the features.
struct ScriptedStager {
    script: Vec<SleepStage>,
    next: usize,
}

impl Stager for ScriptedStager {
    fn classify_epoch(&mut self, _features: &EpochFeatures) -> StageDecision {
        let stage = self.script[self.next % self.script.len()];
        self.next += 1;
        StageDecision { stage, confidence: 0.75 }
    }
}

#[test]
fn stub_stager_drives_the_thermal_loop() {
    let script = vec![W, W, W, N1, W, W, N2, N2, N3, N3, N3, N3, N3, N3];
    let mut pipeline = StagingPipeline::new(Box::new(ScriptedStager { script: script.clone(), next: 0 }), Timestamp::ZERO);
    let cfg = ThermalConfig { mode: ThermalMode::StageYoked, ..ThermalConfig::default() };
    let mut thermal = ThermalTask::new(cfg, Timestamp::ZERO, Box::new(LineSink::new(Vec::new()))).unwrap();

    let mut ramp_at = None;
    let mut onset_at = None;
    for (i, _) in script.iter().enumerate() {
        let start = Timestamp::from_secs_f64(i as f64 * EPOCH_SECS);
        let features = EpochFeatures {
            epoch_index: i as u64,
            epoch_start: start,
            band_powers: Default::default(),
            sigma_power: 0.0,
            total_power: 0.0,
            rms: 0.0,
            quality_flagged: false,
        };
        let (epoch, onset) = pipeline.push(features);
        assert_eq!(epoch.stage_raw, script[i]);
        let now = epoch.epoch_end();
        if let Some(o) = &onset {
            onset_at = Some(o.onset_epoch);
        }
        let (state, changes) = thermal.tick(now, Some(&epoch), onset.as_ref()).unwrap();
        if changes.iter().any(|c| c.to == ThermalPhase::Ramping) {
            ramp_at.get_or_insert(now);
            assert_eq!(state.phase, ThermalPhase::Ramping);
        }
    }
    let smoothed = smooth_hypnogram(&script);
    let want = reference_onset(&smoothed).unwrap();
    assert_eq!(onset_at, Some(want));
    // onset is confirmed at the end of the second sleep epoch
    assert_eq!(ramp_at, Some(Timestamp::from_secs_f64((want + 2) as f64 * EPOCH_SECS)));
}
