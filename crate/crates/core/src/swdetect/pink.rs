use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SwError;
use crate::msgbus::{BusPayload, PayloadKind};
use crate::time::Timestamp;

const ROWS: usize = 16;
const RAMP_SECS: f64 = 0.005;

/// Audio emitted on "audio/out" for one Active stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioBurst {
    pub seq: u64,
    pub at: Timestamp,
    pub audio_rate: u32,
    pub samples: Vec<f32>,
}

impl BusPayload for AudioBurst {
    const KIND: PayloadKind = PayloadKind::AudioBurst;
}

/// Voss-McCartney generator: row `k` is redrawn every `2^k` samples.
pub struct PinkNoise {
    rng: ChaCha8Rng,
    rows: Vec<f64>,
    sum: f64,
    counter: u64,
}

impl PinkNoise {
    pub fn new(seed: u64) -> Self {
        Self::with_rows(seed, ROWS)
    }

    /// `rows` sets the lowest octave: row `rows - 1` changes every `2^(rows-1)` samples.
    pub fn with_rows(seed: u64, rows: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<f64> = (0..rows.max(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum = rows.iter().sum();
        PinkNoise { rng, rows, sum, counter: 0 }
    }

    /// Standard deviation of [`next_sample`](Self::next_sample) output.
    pub fn std_dev(&self) -> f64 {
        ((self.rows.len() + 1) as f64 / 3.0).sqrt()
    }

    #[inline]
    pub fn next_sample(&mut self) -> f64 {
        self.counter = self.counter.wrapping_add(1);
        let row = self.counter.trailing_zeros() as usize;
        if row < self.rows.len() {
            let v = self.rng.random_range(-1.0..1.0);
            self.sum += v - self.rows[row];
            self.rows[row] = v;
        }
        let white: f64 = self.rng.random_range(-1.0..1.0);
        self.sum + white
    }

    /// Ramped burst scaled so its peak equals `level`.
    pub fn burst(&mut self, duration: f64, audio_rate: u32, level: f64) -> Vec<f32> {
        let n = (duration * audio_rate as f64).round() as usize;
        let mut x: Vec<f64> = (0..n).map(|_| self.next_sample()).collect();
        let mean = x.iter().sum::<f64>() / n.max(1) as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        let ramp = ((RAMP_SECS * audio_rate as f64).round() as usize).min(n / 2);
        for i in 0..ramp {
            let g = 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / ramp as f64).cos());
            x[i] *= g;
            x[n - 1 - i] *= g;
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // f32 rounding must not push the peak over `level`.
        let scale = if peak > 0.0 { level / peak * (1.0 - 1e-6) } else { 0.0 };
        x.into_iter().map(|v| (v * scale) as f32).collect()
    }
}

pub fn gen_pink_noise(duration: f64, audio_rate: u32, level: f64, seed: u64) -> Result<Vec<f32>, SwError> {
    if !(duration > 0.0) || audio_rate == 0 {
        return Err(SwError::InvalidConfig(format!("cannot generate {duration} s at {audio_rate} Hz")));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(SwError::InvalidConfig(format!("level {level} must lie in (0, 1]")));
    }
    Ok(PinkNoise::new(seed).burst(duration, audio_rate, level))
}
