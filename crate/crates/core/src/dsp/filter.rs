use std::f64::consts::PI;

use num_complex::Complex64;

use super::{BandSpec, DspError};
use crate::signal_io::SignalChunk;

/// Second-order section, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn poly_at(c: &[f64; 3], z1: Complex64) -> (Complex64, Complex64) {
        // value and sum of k * c_k * z^-k, for the group-delay formula
        let z2 = z1 * z1;
        let v = c[0] + z1 * c[1] + z2 * c[2];
        let d = z1 * c[1] + z2 * (2.0 * c[2]);
        (v, d)
    }

    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        Self::poly_at(&self.b, z1).0 / Self::poly_at(&self.a, z1).0
    }

    /// Group delay in samples at normalized angular frequency `omega`.
    fn group_delay(&self, omega: f64) -> f64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let (bv, bd) = Self::poly_at(&self.b, z1);
        let (av, ad) = Self::poly_at(&self.a, z1);
        (bd / bv).re - (ad / av).re
    }

    fn is_stable(&self) -> bool {
        let (a1, a2) = (self.a[1], self.a[2]);
        a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }
}

/// Causal IIR filter realized as cascaded second-order sections, with
/// independent state per channel.
#[derive(Debug, Clone)]
pub struct IirFilter {
    sections: Vec<Biquad>,
    sample_rate: f64,
    /// Frequency at which the passband phase is exactly zero.
    phase_reference_hz: f64,
    state: Vec<Vec<[f64; 2]>>,
}

impl IirFilter {
    fn new(sections: Vec<Biquad>, sample_rate: f64, phase_reference_hz: f64) -> Result<Self, DspError> {
        if let Some(i) = sections.iter().position(|s| !s.is_stable()) {
            return Err(DspError::UnstableDesign(format!("section {i} has a pole on or outside the unit circle")));
        }
        Ok(IirFilter { sections, sample_rate, phase_reference_hz, state: Vec::new() })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    fn ensure_channels(&mut self, channels: usize) {
        if self.state.len() < channels {
            self.state.resize(channels, vec![[0.0; 2]; self.sections.len()]);
        }
    }

    /// Filters one sample of `channel` (transposed direct form II).
    #[inline]
    pub fn process_sample(&mut self, channel: usize, x: f64) -> f64 {
        self.ensure_channels(channel + 1);
        let st = &mut self.state[channel];
        let mut v = x;
        for (s, z) in self.sections.iter().zip(st.iter_mut()) {
            let y = s.b[0] * v + z[0];
            z[0] = s.b[1] * v - s.a[1] * y + z[1];
            z[1] = s.b[2] * v - s.a[2] * y;
            v = y;
        }
        v
    }

    pub fn process_slice(&mut self, channel: usize, data: &mut [f64]) {
        for x in data.iter_mut() {
            *x = self.process_sample(channel, *x);
        }
    }

    /// Filters every channel of `chunk`; state carries over to the next call.
    pub fn filter_chunk(&mut self, chunk: &SignalChunk) -> Result<SignalChunk, DspError> {
        if (chunk.sample_rate - self.sample_rate).abs() > 1e-9 {
            return Err(DspError::RateMismatch { expected: self.sample_rate, got: chunk.sample_rate });
        }
        let mut out = chunk.clone();
        self.ensure_channels(chunk.channels());
        for c in 0..chunk.channels() {
            self.process_slice(c, out.channel_mut(c));
        }
        Ok(out)
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate;
        self.sections.iter().map(|s| s.response(omega)).product()
    }

    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    /// Group delay in seconds.
    pub fn group_delay(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate;
        self.sections.iter().map(|s| s.group_delay(omega)).sum::<f64>() / self.sample_rate
    }

    /// Unwrapped phase in radians, anchored at the zero-phase reference frequency.
    pub fn phase(&self, freq_hz: f64) -> f64 {
        let steps = 2000;
        let f0 = self.phase_reference_hz;
        let mut phase = 0.0;
        let mut prev = self.response(f0).arg();
        for i in 1..=steps {
            let f = f0 + (freq_hz - f0) * i as f64 / steps as f64;
            let cur = self.response(f).arg();
            let mut d = cur - prev;
            while d > PI {
                d -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
            }
            phase += d;
            prev = cur;
        }
        phase
    }

    /// Delay in seconds experienced by a sinusoid at `freq_hz`.
    pub fn phase_delay(&self, freq_hz: f64) -> f64 {
        -self.phase(freq_hz) / (2.0 * PI * freq_hz)
    }
}

fn butterworth_prototype(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .collect()
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

fn bilinear(p: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + p) / (k - p)
}

/// Groups digital poles into conjugate pairs (or pairs of real poles).
fn pair_poles(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    let eps = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > eps).collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut real: Vec<Complex64> = poles.iter().copied().filter(|p| p.im.abs() <= eps).collect();
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut pairs: Vec<(Complex64, Complex64)> = complex.into_iter().map(|p| (p, p.conj())).collect();
    for pair in real.chunks(2) {
        pairs.push((pair[0], *pair.get(1).unwrap_or(&Complex64::new(0.0, 0.0))));
    }
    pairs
}

fn denominator((p, q): (Complex64, Complex64)) -> [f64; 3] {
    [1.0, -(p + q).re, (p * q).re]
}

/// Butterworth band-pass of total order `spec.order` (`order / 2` prototype poles).
pub fn design_bandpass(spec: &BandSpec, sample_rate: f64) -> Result<IirFilter, DspError> {
    spec.validate(sample_rate)?;
    let n = spec.order / 2;
    let fs = sample_rate;
    let wl = prewarp(spec.low, fs);
    let wh = prewarp(spec.high, fs);
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    let mut analog = Vec::with_capacity(2 * n);
    for p in butterworth_prototype(n) {
        let s = p * (bw / 2.0);
        let d = (s * s - w0 * w0).sqrt();
        analog.push(s + d);
        analog.push(s - d);
    }
    let digital: Vec<Complex64> = analog.iter().map(|&p| bilinear(p, fs)).collect();

    // n zeros at s = 0 map to z = 1, n zeros at infinity map to z = -1
    let k2 = 2.0 * fs;
    let mut gain = Complex64::new(bw.powi(n as i32), 0.0);
    for _ in 0..n {
        gain *= k2;
    }
    for &p in &analog {
        gain /= k2 - p;
    }

    let mut sections: Vec<Biquad> = pair_poles(&digital)
        .into_iter()
        .map(|pair| Biquad { b: [1.0, 0.0, -1.0], a: denominator(pair) })
        .collect();
    for b in sections[0].b.iter_mut() {
        *b *= gain.re;
    }
    let center_hz = fs / PI * (w0 / (2.0 * fs)).atan();
    IirFilter::new(sections, fs, center_hz)
}

/// Butterworth low-pass of the given order.
pub fn design_lowpass(cutoff_hz: f64, order: usize, sample_rate: f64) -> Result<IirFilter, DspError> {
    if !(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0) || order == 0 {
        return Err(DspError::InvalidBand(format!("low-pass cutoff {cutoff_hz} Hz, order {order} at {sample_rate} Hz")));
    }
    let fs = sample_rate;
    let wc = prewarp(cutoff_hz, fs);
    let analog: Vec<Complex64> = butterworth_prototype(order).into_iter().map(|p| p * wc).collect();
    let digital: Vec<Complex64> = analog.iter().map(|&p| bilinear(p, fs)).collect();
    let k2 = 2.0 * fs;
    let mut gain = Complex64::new(wc.powi(order as i32), 0.0);
    for &p in &analog {
        gain /= k2 - p;
    }
    let mut sections: Vec<Biquad> = Vec::new();
    for (p, q) in pair_poles(&digital) {
        if q == Complex64::new(0.0, 0.0) && p.im.abs() <= 1e-12 {
            sections.push(Biquad { b: [1.0, 1.0, 0.0], a: [1.0, -p.re, 0.0] });
        } else {
            sections.push(Biquad { b: [1.0, 2.0, 1.0], a: denominator((p, q)) });
        }
    }
    for b in sections[0].b.iter_mut() {
        *b *= gain.re;
    }
    IirFilter::new(sections, fs, 0.0)
}
