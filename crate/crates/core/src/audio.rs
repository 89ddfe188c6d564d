//! Mono 16 kHz waveforms, PCM16 WAV I/O, and the log-mel front end shared by
//! the music encoder and the beat tracker.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{param_err, Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 64;
/// Log-mel floor, in log10 units of power.
pub const LOG_FLOOR: f32 = -10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples }
    }

    pub fn silence(duration_s: f64) -> Self {
        Self::new(vec![0.0; seconds_to_samples(duration_s)])
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Samples in `[start_s, start_s + span_s)`, zero-padded past the end.
    pub fn segment(&self, start_s: f64, span_s: f64) -> Waveform {
        let start = seconds_to_samples(start_s);
        let n = seconds_to_samples(span_s);
        let samples = (start..start + n)
            .map(|i| self.samples.get(i).copied().unwrap_or(0.0))
            .collect();
        Waveform { samples }
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
        for &s in &self.samples {
            w.write_sample(pcm16(s)).map_err(|e| wav_err(path, e))?;
        }
        w.finalize().map_err(|e| wav_err(path, e))
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut r = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
        let spec = r.spec();
        if spec.channels != 1
            || spec.sample_rate != SAMPLE_RATE
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::format(
                path,
                format!(
                    "expected PCM16 mono {SAMPLE_RATE} Hz, got {} ch {} Hz {}-bit {:?}",
                    spec.channels, spec.sample_rate, spec.bits_per_sample, spec.sample_format
                ),
            ));
        }
        let samples = r
            .samples::<i16>()
            .map(|s| s.map(|v| (v as f32 / 32767.0).max(-1.0)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_err(path, e))?;
        Ok(Self { samples })
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    }
}

fn pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn seconds_to_samples(s: f64) -> usize {
    (s * SAMPLE_RATE as f64).round().max(0.0) as usize
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `0..=sr/2`, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f32>> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let m_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Short-time power spectra with a periodic Hann window.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let window = (0..n_fft)
            .map(|i| {
                let s = (std::f64::consts::PI * i as f64 / n_fft as f64).sin();
                (s * s) as f32
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            n_fft,
            hop,
            window,
            fft,
        }
    }

    /// Frame count for centred framing: `1 + n / hop`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    /// Power spectra of centred frames: frame `i` is centred on sample
    /// `i·hop`, with zero padding of `n_fft/2` on both sides.
    pub fn power(&self, samples: &[f32]) -> Vec<Vec<f32>> {
        let half = self.n_fft / 2;
        let n_frames = self.frame_count(samples.len());
        let mut buf = vec![Complex::new(0f32, 0f32); self.n_fft];
        let mut out = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let center = (f * self.hop) as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = center - half as isize + i as isize;
                let v = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex::new(v * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..=half].iter().map(|c| c.norm_sqr()).collect());
        }
        out
    }
}

/// Log-mel spectrogram, `frames × N_MELS`, in log10 power floored at
/// [`LOG_FLOOR`].
pub struct LogMel {
    stft: Stft,
    filters: Vec<Vec<f32>>,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        Self {
            stft: Stft::new(N_FFT, HOP),
            filters: mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE),
        }
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        self.stft.frame_count(n_samples)
    }

    pub fn compute(&self, w: &Waveform) -> Result<Vec<[f32; N_MELS]>> {
        if w.len() < N_FFT {
            return Err(param_err!(
                "waveform of {} samples is shorter than one {N_FFT}-sample window",
                w.len()
            ));
        }
        let floor = 10f32.powf(LOG_FLOOR);
        Ok(self
            .stft
            .power(w.samples())
            .into_iter()
            .map(|spec| {
                let mut row = [0f32; N_MELS];
                for (m, filt) in self.filters.iter().enumerate() {
                    let e: f32 = filt.iter().zip(&spec).map(|(a, b)| a * b).sum();
                    row[m] = e.max(floor).log10();
                }
                row
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_for_four_seconds() {
        let mel = LogMel::new();
        assert_eq!(mel.frame_count(64_000), 251);
        let spec = mel.compute(&Waveform::silence(4.0)).unwrap();
        assert_eq!(spec.len(), 251);
        assert!(spec.iter().all(|r| r.iter().all(|&v| v == LOG_FLOOR)));
    }

    #[test]
    fn tone_lands_in_one_band_region() {
        let n = 16_000;
        let tone: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 16_000.0).sin())
            .collect();
        let spec = LogMel::new().compute(&Waveform::new(tone)).unwrap();
        let row = spec[30];
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let filters = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE);
        // 1 kHz is bin 64 of the 1024-point FFT.
        assert!(filters[peak][64] > 0.0);
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(LogMel::new().compute(&Waveform::new(vec![0.0; 100])).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new((0..1000).map(|i| ((i % 200) as f32 / 100.0) - 1.0).collect());
        w.write_wav(&p).unwrap();
        let back = Waveform::read_wav(&p).unwrap();
        assert_eq!(back.len(), 1000);
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn segment_pads_with_zeros() {
        let w = Waveform::new(vec![1.0; 100]);
        let s = w.segment(80.0 / 16_000.0, 40.0 / 16_000.0);
        assert_eq!(s.len(), 40);
        assert_eq!(s.samples()[19], 1.0);
        assert_eq!(s.samples()[20], 0.0);
    }
}
