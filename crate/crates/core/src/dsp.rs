//! EMG and wrench preprocessing: trimming, force baseline removal, Butterworth
//! band-pass, rectification, RMS envelopes and per-muscle normalization.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmgRecord, SampledSeries, WrenchRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Prototype order; a band-pass design has twice as many poles.
    pub order: usize,
    pub sample_rate_hz: f64,
    /// Forward-backward application (no phase shift, squared magnitude).
    pub zero_phase: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            low_hz: 30.0,
            high_hz: 450.0,
            order: 4,
            sample_rate_hz: 1000.0,
            zero_phase: true,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(Error::InvalidParameter(format!(
                "band-pass needs 0 < low < high < fs/2, got low={} high={} fs={}",
                self.low_hz, self.high_hz, self.sample_rate_hz
            )));
        }
        if self.order == 0 || self.order > 12 {
            return Err(Error::InvalidParameter(format!(
                "filter order must be in 1..=12, got {}",
                self.order
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    pub window: usize,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        EnvelopeSpec { window: 400 }
    }
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2)
            / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    /// Steady-state transposed direct-form II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        // (I - A^T) z = B with A the companion matrix of the denominator.
        let (m00, m01, m10, m11) = (1.0 + a1, -1.0, a2, 1.0);
        let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
        let det = m00 * m11 - m01 * m10;
        [(r0 * m11 - m01 * r1) / det, (m00 * r1 - m10 * r0) / det]
    }
}

/// Butterworth band-pass as cascaded biquads (bilinear transform with
/// pre-warped band edges, unit gain at the geometric centre frequency).
pub fn butterworth_bandpass(spec: &FilterSpec) -> Result<Vec<Biquad>> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let n = spec.order;
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(spec.low_hz), warp(spec.high_hz));
    let bw = wh - wl;
    let w0_sq = wl * wh;

    let mut poles = Vec::with_capacity(2 * n);
    for k in 1..=n {
        let theta = PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let half = proto * (bw / 2.0);
        let root = (half * half - w0_sq).sqrt();
        for s in [half + root, half - root] {
            let two_fs = Complex64::new(2.0 * fs, 0.0);
            poles.push((two_fs + s) / (two_fs - s));
        }
    }

    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= 1e-12).map(|p| p.re).collect();
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);

    // Every section carries one zero at z = 1 and one at z = -1.
    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    for pair in real.chunks(2) {
        let (p, q) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(p + q), p * q],
        });
    }

    let wc = 2.0 * (w0_sq.sqrt() / (2.0 * fs)).atan();
    let z_inv = Complex64::from_polar(1.0, -wc);
    let gain: f64 = sections.iter().map(|s| s.response(z_inv)).product::<Complex64>().norm();
    for b in sections[0].b.iter_mut() {
        *b /= gain;
    }
    Ok(sections)
}

/// Magnitude response of a cascade at `freq_hz`.
pub fn cascade_magnitude(sections: &[Biquad], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / sample_rate_hz);
    sections
        .iter()
        .map(|s| s.response(z_inv))
        .product::<Complex64>()
        .norm()
}

fn filter_section(section: &Biquad, x: &mut [f64], state: [f64; 2]) {
    let [b0, b1, b2] = section.b;
    let [_, a1, a2] = section.a;
    let [mut z0, mut z1] = state;
    for v in x.iter_mut() {
        let xin = *v;
        let y = b0 * xin + z0;
        z0 = b1 * xin - a1 * y + z1;
        z1 = b2 * xin - a2 * y;
        *v = y;
    }
}

/// Causal cascade filtering in place, starting from `x0 ×` step steady state.
fn sosfilt(sections: &[Biquad], x: &mut [f64], x0: Option<f64>) {
    let mut scale = x0.unwrap_or(0.0);
    for s in sections {
        let zi = s.step_state();
        filter_section(s, x, [zi[0] * scale, zi[1] * scale]);
        let num: f64 = s.b.iter().sum();
        let den: f64 = s.a.iter().sum();
        scale *= num / den;
    }
}

/// Forward-backward filtering with odd-reflection padding.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let first = ext[0];
    sosfilt(sections, &mut ext, Some(first));
    ext.reverse();
    let first = ext[0];
    sosfilt(sections, &mut ext, Some(first));
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

pub fn filter_signal(sections: &[Biquad], x: &[f64], zero_phase: bool) -> Vec<f64> {
    if zero_phase {
        filtfilt(sections, x)
    } else {
        let mut y = x.to_vec();
        sosfilt(sections, &mut y, None);
        y
    }
}

pub fn bandpass_filter(emg: &EmgRecord, spec: &FilterSpec) -> Result<EmgRecord> {
    let sections = butterworth_bandpass(spec)?;
    let series = emg.map_channels(|_, c| filter_signal(&sections, c, spec.zero_phase))?;
    EmgRecord::new(series)
}

pub fn rectify(emg: &EmgRecord) -> Result<EmgRecord> {
    EmgRecord::new(emg.map_channels(|_, c| c.iter().map(|v| v.abs()).collect())?)
}

/// Centered moving RMS; the window is clipped (not padded) at the edges.
///
/// For an even window `w` the samples `[i - w/2, i + (w-1)/2]` are used.
pub fn rms_envelope(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let window = window.max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v * v;
        prefix.push(acc);
    }
    let back = window / 2;
    let fwd = (window - 1) / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(n - 1);
            let sum = (prefix[hi + 1] - prefix[lo]).max(0.0);
            (sum / (hi + 1 - lo) as f64).sqrt()
        })
        .collect()
}

pub fn moving_rms(emg: &EmgRecord, spec: &EnvelopeSpec) -> Result<EmgRecord> {
    if spec.window == 0 {
        return Err(Error::InvalidParameter("RMS window must be at least 1".into()));
    }
    EmgRecord::new(emg.map_channels(|_, c| rms_envelope(c, spec.window))?)
}

/// Band-pass, rectify and smooth one trial's raw EMG.
pub fn emg_envelope(emg: &EmgRecord, filter: &FilterSpec, envelope: &EnvelopeSpec) -> Result<EmgRecord> {
    let filtered = bandpass_filter(emg, filter)?;
    moving_rms(&rectify(&filtered)?, envelope)
}

/// Divides each muscle channel by its maximum over all of one participant's
/// envelopes. Returns the normalized envelopes and the per-muscle maxima.
pub fn normalize_per_muscle(envelopes: &[EmgRecord]) -> Result<(Vec<EmgRecord>, Vec<f64>)> {
    let first = envelopes
        .first()
        .ok_or_else(|| Error::InsufficientData("normalization needs at least one trial".into()))?;
    let channels = first.channel_count();
    let mut maxima = vec![0.0_f64; channels];
    for env in envelopes {
        for (m, c) in maxima.iter_mut().zip(env.channels()) {
            *m = c.iter().fold(*m, |acc, v| acc.max(v.abs()));
        }
    }
    if let Some(i) = maxima.iter().position(|&m| m <= 0.0) {
        return Err(Error::Degenerate(format!(
            "muscle channel {} has zero maximum activation",
            first.labels()[i]
        )));
    }
    let normalized = envelopes
        .iter()
        .map(|env| {
            let s = env.map_channels(|i, c| c.iter().map(|v| (v.abs() / maxima[i]).min(1.0)).collect())?;
            EmgRecord::new(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((normalized, maxima))
}

/// Keeps samples with `start <= t <= end`.
pub fn trim_to_game_window(series: &SampledSeries, start: f64, end: f64) -> Result<SampledSeries> {
    if !(start < end) {
        return Err(Error::InvalidParameter(format!(
            "trim window start {start} must precede end {end}"
        )));
    }
    let ts = series.timestamps();
    let trimmed = series.select_rows(|i| ts[i] >= start && ts[i] <= end);
    if trimmed.is_empty() {
        return Err(Error::EmptyWindow { start, end });
    }
    Ok(trimmed)
}

/// Subtracts constant per-axis force offsets (Fx, Fy, Fz); torques pass through.
pub fn baseline_correct_forces(wrench: &WrenchRecord, offsets: [f64; 3]) -> Result<WrenchRecord> {
    let series = wrench.map_channels(|i, c| {
        if i < 3 {
            c.iter().map(|v| v - offsets[i]).collect()
        } else {
            c.to_vec()
        }
    })?;
    WrenchRecord::new(series)
}
