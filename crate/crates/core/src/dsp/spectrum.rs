use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Band, DspError};

/// Segment length in seconds for Welch averaging.
pub const WELCH_SEGMENT_SECS: f64 = 4.0;

/// Averaged one-sided power spectral density in uV^2/Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    pub df: f64,
    pub density: Vec<f64>,
}

impl Psd {
    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.df
    }

    /// Sum of density x df over bins with `low <= f <= high`.
    pub fn band_power(&self, band: Band) -> f64 {
        self.bins(band).map(|k| self.density[k] * self.df).sum()
    }

    pub fn bins(&self, band: Band) -> impl Iterator<Item = usize> + '_ {
        // bin centers are exact multiples of df; guard against rounding at the edges
        let tol = self.df * 1e-9;
        (0..self.density.len()).filter(move |&k| {
            let f = self.frequency(k);
            f >= band.low - tol && f <= band.high + tol
        })
    }
}

/// Welch estimator: 4 s Hann segments, 50% overlap, per-segment mean removal.
pub struct Welch {
    sample_rate: f64,
    segment: usize,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Welch {
    pub fn new(sample_rate: f64, segment: usize) -> Self {
        let segment = segment.max(2);
        // periodic Hann
        let window: Vec<f64> = (0..segment)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / segment as f64).cos())
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(segment);
        Welch { sample_rate, segment, window, window_power, fft, scratch: vec![Complex64::default(); segment] }
    }

    pub fn for_window(sample_rate: f64, window_len: usize) -> Self {
        let seg = ((WELCH_SEGMENT_SECS * sample_rate).round() as usize).min(window_len);
        Self::new(sample_rate, seg)
    }

    pub fn segment_len(&self) -> usize {
        self.segment
    }

    pub fn psd(&mut self, x: &[f64]) -> Psd {
        let n = self.segment;
        let bins = n / 2 + 1;
        let mut acc = vec![0.0; bins];
        let step = n - n / 2;
        let mut count = 0usize;
        let mut start = 0;
        while start + n <= x.len() {
            let seg = &x[start..start + n];
            let mean = seg.iter().sum::<f64>() / n as f64;
            for (i, (s, w)) in seg.iter().zip(&self.window).enumerate() {
                self.scratch[i] = Complex64::new((s - mean) * w, 0.0);
            }
            self.fft.process(&mut self.scratch);
            for (k, a) in acc.iter_mut().enumerate() {
                *a += self.scratch[k].norm_sqr();
            }
            count += 1;
            start += step;
        }
        let scale = 1.0 / (self.sample_rate * self.window_power * count.max(1) as f64);
        for (k, a) in acc.iter_mut().enumerate() {
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            *a *= scale * one_sided;
        }
        Psd { df: self.sample_rate / n as f64, density: acc }
    }
}

/// Mean power of `window` within `band`, in uV^2.
///
/// Requires at least `2 / band.low` seconds of data.
pub fn band_power(window: &[f64], sample_rate: f64, band: Band) -> Result<f64, DspError> {
    band.validate(sample_rate)?;
    let needed = (2.0 / band.low * sample_rate).ceil() as usize;
    if window.len() < needed || window.len() < 2 {
        return Err(DspError::WindowTooShort { needed, got: window.len() });
    }
    Ok(Welch::for_window(sample_rate, window.len()).psd(window).band_power(band))
}
