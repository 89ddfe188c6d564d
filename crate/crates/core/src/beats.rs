//! Beat tracking: positive spectral flux on the log-mel spectrogram, tempo
//! from the onset autocorrelation, dynamic-programming beat placement, and
//! quantisation of beat times to video frames.

use serde::{Deserialize, Serialize};

use crate::audio::{LogMel, Stft, Waveform, HOP, N_FFT, SAMPLE_RATE};
use crate::error::{param_err, Result};

/// Inter-beat deviation penalty of the beat placement DP.
pub const TIGHTNESS: f64 = 100.0;
pub const MIN_BPM: f64 = 60.0;
pub const MAX_BPM: f64 = 180.0;
/// Dynamic range kept below the loudest bin, in log10 power (80 dB).
const DYNAMIC_RANGE: f32 = 8.0;

const FINE_FFT: usize = 128;
const FINE_HOP: usize = 32;

/// Per-frame binary beat indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BeatVector {
    bits: Vec<u8>,
}

impl BeatVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(param_err!("beat vector entries must be 0 or 1, got {b}"));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    /// Ones at `frames`, which must lie in `0..len`.
    pub fn from_frames(len: usize, frames: &[usize]) -> Result<Self> {
        let mut bits = vec![0; len];
        for &f in frames {
            *bits
                .get_mut(f)
                .ok_or_else(|| param_err!("beat frame {f} outside 0..{len}"))? = 1;
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn beat_frames(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Frames `start..start+len`, zero-filled past the end.
    pub fn window(&self, start: usize, len: usize) -> BeatVector {
        let bits = (start..start + len)
            .map(|i| self.bits.get(i).copied().unwrap_or(0))
            .collect();
        BeatVector { bits }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.bits).expect("u8 array serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl TryFrom<Vec<u8>> for BeatVector {
    type Error = crate::error::Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<BeatVector> for Vec<u8> {
    fn from(b: BeatVector) -> Self {
        b.bits
    }
}

/// Onset strength per log-mel frame (frame `i` centred on sample `i·HOP`).
pub fn onset_envelope(w: &Waveform) -> Result<Vec<f64>> {
    let spec = LogMel::new().compute(w)?;
    let top = spec
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(f32::NEG_INFINITY, f32::max);
    let bottom = top - DYNAMIC_RANGE;
    let mut flux = positive_flux(
        spec.iter().map(|r| r.iter().map(|&v| v.max(bottom)).collect()),
        bottom,
    );
    // Frames whose window runs off the end see the signal cut off abruptly,
    // which leaks broadband energy and reads as a spurious onset.
    for (i, v) in flux.iter_mut().enumerate() {
        if i * HOP + N_FFT / 2 > w.len() {
            *v = 0.0;
        }
    }
    Ok(flux)
}

/// Σ max(0, S[n] − S[n−1]) with the floor standing in for S[−1].
fn positive_flux(rows: impl Iterator<Item = Vec<f32>>, floor: f32) -> Vec<f64> {
    let mut prev: Option<Vec<f32>> = None;
    rows.map(|row| {
        let flux: f64 = match &prev {
            Some(p) => row.iter().zip(p).map(|(a, b)| (a - b).max(0.0) as f64).sum(),
            None => row.iter().map(|a| (a - floor).max(0.0) as f64).sum(),
        };
        prev = Some(row);
        flux
    })
    .collect()
}

/// Dominant beat period in envelope frames, searched over 60–180 BPM.
pub fn estimate_period(onset: &[f64], frame_rate: f64) -> Option<f64> {
    let min_lag = (frame_rate * 60.0 / MAX_BPM).floor().max(1.0) as usize;
    let max_lag = (frame_rate * 60.0 / MIN_BPM).ceil() as usize;
    if onset.len() <= min_lag {
        return None;
    }
    let max_lag = max_lag.min(onset.len() - 1);
    let ac = |lag: usize| -> f64 { onset.iter().zip(&onset[lag..]).map(|(a, b)| a * b).sum() };
    // Log-normal tempo prior centred on 120 BPM, one octave wide.
    let weight = |lag: f64| {
        let bpm = 60.0 * frame_rate / lag;
        (-0.5 * (bpm / 120.0).log2().powi(2)).exp()
    };
    let scores: Vec<(usize, f64)> = (min_lag..=max_lag).map(|l| (l, ac(l) * weight(l as f64))).collect();
    let (best_idx, &(best_lag, best)) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?;
    if best <= 0.0 {
        return None;
    }
    let mut period = best_lag as f64;
    if best_idx > 0 && best_idx + 1 < scores.len() {
        let (a, b, c) = (scores[best_idx - 1].1, best, scores[best_idx + 1].1);
        let denom = a - 2.0 * b + c;
        if denom.abs() > f64::EPSILON {
            period += (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    Some(period)
}

/// Ellis-style DP: each beat maximises onset strength minus a log-squared
/// penalty on its deviation from the period. Returns envelope frame indices.
pub fn track_beats(onset: &[f64], period: f64, tightness: f64) -> Vec<usize> {
    let n = onset.len();
    if n == 0 || period <= 0.0 {
        return Vec::new();
    }
    let mut score = vec![0f64; n];
    let mut back: Vec<Option<usize>> = vec![None; n];
    let lo = (period / 2.0).round().max(1.0) as usize;
    let hi = (2.0 * period).round() as usize;
    for t in 0..n {
        let mut best: Option<(usize, f64)> = None;
        if t >= lo {
            let first = t.saturating_sub(hi);
            for tau in first..=t - lo {
                let dev = ((t - tau) as f64 / period).ln();
                let s = score[tau] - tightness * dev * dev;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((tau, s));
                }
            }
        }
        match best {
            Some((tau, s)) if s > 0.0 => {
                score[t] = onset[t] + s;
                back[t] = Some(tau);
            }
            _ => score[t] = onset[t],
        }
    }

    // The chain ends on the latest strong onset peak whose cumulative score
    // is competitive. Score maxima alone are not used: between onsets the
    // score ridges on the predecessor's value and can out-score real beats.
    let strongest = onset.iter().copied().fold(0.0, f64::max);
    let peaks: Vec<usize> = (0..n)
        .filter(|&t| {
            let left = t == 0 || onset[t] > onset[t - 1];
            let right = t + 1 == n || onset[t] >= onset[t + 1];
            left && right && onset[t] >= 0.25 * strongest
        })
        .collect();
    if peaks.is_empty() {
        return Vec::new();
    }
    let mut vals: Vec<f64> = peaks.iter().map(|&t| score[t]).collect();
    vals.sort_by(f64::total_cmp);
    let median = vals[vals.len() / 2];
    let Some(&last) = peaks.iter().rev().find(|&&t| score[t] >= 0.5 * median) else {
        return Vec::new();
    };

    let mut beats = vec![last];
    let mut cur = last;
    while let Some(prev) = back[cur] {
        beats.push(prev);
        cur = prev;
    }
    beats.reverse();
    trim_weak(&beats, onset)
}

/// Drops leading and trailing beats whose onset is below half the RMS onset
/// over all beats.
fn trim_weak(beats: &[usize], onset: &[f64]) -> Vec<usize> {
    let strength = |t: usize| {
        let a = t.saturating_sub(1);
        let b = (t + 1).min(onset.len() - 1);
        onset[a..=b].iter().copied().fold(0.0, f64::max)
    };
    let rms = (beats.iter().map(|&t| strength(t).powi(2)).sum::<f64>() / beats.len().max(1) as f64).sqrt();
    let thresh = 0.5 * rms;
    let first = beats.iter().position(|&t| strength(t) >= thresh);
    let last = beats.iter().rposition(|&t| strength(t) >= thresh);
    match (first, last) {
        (Some(a), Some(b)) => beats[a..=b].to_vec(),
        _ => Vec::new(),
    }
}

/// High-resolution flux (2 ms hop) used to place each coarse beat to within a
/// few milliseconds.
fn fine_onsets(samples: &[f32]) -> Vec<f64> {
    let stft = Stft::new(FINE_FFT, FINE_HOP);
    let power = stft.power(samples);
    let logs: Vec<Vec<f32>> = power
        .iter()
        .map(|r| r.iter().map(|&p| p.max(1e-20).log10()).collect())
        .collect();
    let top = logs
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(f32::NEG_INFINITY, f32::max);
    let bottom = top - DYNAMIC_RANGE;
    positive_flux(
        logs.into_iter().map(|r| r.into_iter().map(|v| v.max(bottom)).collect()),
        bottom,
    )
}

/// Beat times in seconds.
pub fn beat_times(w: &Waveform) -> Result<Vec<f64>> {
    let onset = onset_envelope(w)?;
    let peak = onset.iter().copied().fold(0.0, f64::max);
    if peak <= 1e-9 {
        return Ok(Vec::new());
    }
    let mean = onset.iter().sum::<f64>() / onset.len() as f64;
    let std = (onset.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / onset.len() as f64).sqrt();
    let norm: Vec<f64> = onset.iter().map(|v| v / std.max(1e-12)).collect();

    let frame_rate = SAMPLE_RATE as f64 / HOP as f64;
    let Some(period) = estimate_period(&norm, frame_rate) else {
        return Ok(Vec::new());
    };
    let coarse = track_beats(&norm, period, TIGHTNESS);

    let fine = fine_onsets(w.samples());
    // A flux peak in coarse frame n comes from an event somewhere inside that
    // frame's analysis window; the fine flux inside the window locates it.
    // An event first enters a fine frame in the last quarter of its window,
    // i.e. ~3/8 of a window after the frame centre.
    let fine_lead = (FINE_FFT * 3 / 8) as f64;
    Ok(coarse
        .into_iter()
        .map(|n| {
            let center = (n * HOP) as isize;
            let lo = ((center - N_FFT as isize * 3 / 4).max(0) as usize) / FINE_HOP;
            let hi = (((center + N_FFT as isize / 2).max(0) as usize) / FINE_HOP).min(fine.len() - 1);
            let j = (lo..=hi)
                .max_by(|&a, &b| fine[a].total_cmp(&fine[b]).then(b.cmp(&a)))
                .unwrap_or(lo);
            ((j * FINE_HOP) as f64 + fine_lead) / SAMPLE_RATE as f64
        })
        .collect())
}

/// Nearest frame index for time `t`; exact half-way ties round down.
pub fn quantize_to_frame(t: f64, fps: f64) -> i64 {
    (t * fps - 0.5).ceil() as i64
}

/// Binary beat vector of length `frames` at `fps`.
pub fn extract_beats(w: &Waveform, fps: f64, frames: usize) -> Result<BeatVector> {
    if !(fps > 0.0) || frames == 0 {
        return Err(param_err!("need fps > 0 and frames >= 1, got fps={fps} frames={frames}"));
    }
    let needed = frames as f64 / fps;
    // One sample of slack for durations that are not whole sample counts.
    if w.duration_s() + 1.0 / (SAMPLE_RATE as f64) < needed || w.len() < N_FFT {
        return Err(param_err!(
            "waveform of {:.3} s is shorter than {frames} frames at {fps} fps ({needed:.3} s)",
            w.duration_s()
        ));
    }
    let mut bits = vec![0u8; frames];
    for t in beat_times(w)? {
        let f = quantize_to_frame(t, fps);
        if (0..frames as i64).contains(&f) {
            bits[f as usize] = 1;
        }
    }
    Ok(BeatVector { bits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clicks(bpm: f64, seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let mut s = vec![0f32; n];
        let mut k = 0;
        loop {
            let start = (k as f64 * 60.0 / bpm * SAMPLE_RATE as f64).round() as usize;
            if start >= n {
                break;
            }
            for i in 0..80 {
                if start + i < n {
                    let sign = if (i * 7919) % 3 == 0 { -1.0 } else { 1.0 };
                    s[start + i] = sign * 0.9 * (-(i as f32) / 20.0).exp();
                }
            }
            k += 1;
        }
        Waveform::new(s)
    }

    #[test]
    fn quantize_ties_round_down() {
        assert_eq!(quantize_to_frame(0.5 / 12.0, 12.0), 0);
        assert_eq!(quantize_to_frame(0.51 / 12.0, 12.0), 1);
        assert_eq!(quantize_to_frame(1.5 / 12.0, 12.0), 1);
        assert_eq!(quantize_to_frame(0.0, 12.0), 0);
    }

    #[test]
    fn click_track_grid() {
        let b = extract_beats(&clicks(120.0, 4.0), 12.0, 48).unwrap();
        assert_eq!(b.beat_frames(), (0..48).step_by(6).collect::<Vec<_>>());
        let b = extract_beats(&clicks(60.0, 4.0), 12.0, 24).unwrap();
        assert_eq!(b.beat_frames(), vec![0, 12]);
    }

    #[test]
    fn silence_has_no_beats() {
        let b = extract_beats(&Waveform::silence(4.0), 12.0, 48).unwrap();
        assert!(b.bits().iter().all(|&x| x == 0));
    }

    #[test]
    fn short_waveform_is_rejected() {
        assert!(extract_beats(&Waveform::silence(1.0), 12.0, 48).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let b = BeatVector::from_frames(8, &[0, 6]).unwrap();
        assert_eq!(b.to_json(), "[1,0,0,0,0,0,1,0]");
        assert_eq!(BeatVector::from_json("[1,0,0,0,0,0,1,0]").unwrap(), b);
        assert!(BeatVector::from_json("[0,2]").is_err());
        assert!(BeatVector::new(vec![0, 1, 3]).is_err());
    }

    #[test]
    fn period_of_click_train() {
        let env = onset_envelope(&clicks(120.0, 4.0)).unwrap();
        let p = estimate_period(&env, SAMPLE_RATE as f64 / HOP as f64).unwrap();
        assert!((p - 31.25).abs() < 1.0, "{p}");
    }
}
