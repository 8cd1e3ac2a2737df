//! Acoustic feature frontend: log-mel extraction, per-speaker mean/variance
//! normalization, and left-context stacking with frame-rate reduction.
//!
//! Mel filterbank conventions (fixed so that other implementations can
//! reproduce the features):
//!
//! * periodic Hann window, no pre-emphasis, no dithering;
//! * power spectrum of a zero-padded FFT (size = next power of two ≥ window);
//! * HTK mel scale `2595 · log10(1 + f/700)`, `n_mels + 2` equally spaced
//!   mel points spanning `[0, sr/2]`;
//! * triangular weights evaluated at each FFT bin frequency;
//! * natural log of the mel energy, floored at `log_floor` (default 1e-10).

mod featfile;
mod manifest;

pub use featfile::{decode_features, encode_features, read_features, write_features, FEAT_MAGIC};
pub use manifest::{Manifest, SourceKind, UtteranceRecord};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;
pub const DEFAULT_VAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Reads a PCM or float WAV file; multi-channel audio is averaged to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let fmt_err = |e: hound::Error| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let mut reader = hound::WavReader::open(path).map_err(fmt_err)?;
        let spec = reader.spec();
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(fmt_err)?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(fmt_err)?
            }
        };
        let ch = spec.channels.max(1) as usize;
        let samples = interleaved
            .chunks(ch)
            .map(|c| c.iter().sum::<f64>() / ch as f64)
            .collect();
        Waveform::new(samples, spec.sample_rate)
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

/// A `T × d` feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Array2<f64>,
    frame_rate: f64,
}

impl FeatureMatrix {
    /// Rejects non-finite values and zero-width features. Zero frames are
    /// representable (see [`FeatureMatrix::ensure_nonempty`]).
    pub fn new(frames: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if frames.ncols() == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::invalid(format!("bad frame rate {frame_rate}")));
        }
        if let Some((idx, _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature frame {} dim {}", idx.0, idx.1)));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn ensure_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::invalid(format!("{what}: feature matrix has no frames")))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStats {
    pub speaker_id: String,
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub frame_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self { n_mels: 80, win_ms: 25.0, hop_ms: 10.0, log_floor: DEFAULT_LOG_FLOOR }
    }
}

impl LogMelConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self, sample_rate: u32) -> usize {
        self.win_samples(sample_rate).next_power_of_two()
    }

    /// `1 + floor((len − win) / hop)` in samples, `None` when shorter than a window.
    pub fn num_frames(&self, n_samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.win_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        (n_samples >= win && win > 0 && hop > 0).then(|| 1 + (n_samples - win) / hop)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Left edge, center and right edge (Hz) of every triangular filter.
pub fn mel_filter_edges(n_mels: usize, sample_rate: u32) -> Vec<(f64, f64, f64)> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    pts.windows(3).map(|w| (w[0], w[1], w[2])).collect()
}

pub fn triangle_weight((lo, center, hi): (f64, f64, f64), f: f64) -> f64 {
    if f <= lo || f >= hi {
        0.0
    } else if f <= center {
        (f - lo) / (center - lo)
    } else {
        (hi - f) / (hi - center)
    }
}

/// `n_mels × (n_fft/2 + 1)` weight matrix.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let edges = mel_filter_edges(n_mels, sample_rate);
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        triangle_weight(edges[m], k as f64 * sample_rate as f64 / n_fft as f64)
    })
}

pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn extract_logmel(w: &Waveform, cfg: &LogMelConfig) -> Result<FeatureMatrix> {
    let sr = w.sample_rate;
    let n_frames = cfg.num_frames(w.samples.len(), sr).ok_or_else(|| {
        Error::invalid(format!(
            "waveform of {:.2} ms is shorter than one {} ms window",
            w.duration_ms(),
            cfg.win_ms
        ))
    })?;
    if cfg.n_mels == 0 {
        return Err(Error::invalid("n_mels must be at least 1"));
    }
    let win = cfg.win_samples(sr);
    let hop = cfg.hop_samples(sr);
    let n_fft = cfg.n_fft(sr);
    let window = hann_window(win);
    let fbank = mel_filterbank(cfg.n_mels, n_fft, sr);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut out = Array2::<f64>::zeros((n_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = Array1::<f64>::zeros(n_fft / 2 + 1);
    for t in 0..n_frames {
        let frame = &w.samples[t * hop..t * hop + win];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (&x, &wv)) in frame.iter().zip(&window).enumerate() {
            buf[i].re = x * wv;
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let energies = fbank.dot(&power);
        for (o, e) in out.row_mut(t).iter_mut().zip(energies.iter()) {
            *o = e.max(cfg.log_floor).ln();
        }
    }
    FeatureMatrix::new(out, 1000.0 / cfg.hop_ms)
}

/// Streaming per-speaker moments, merged with Chan's parallel update so
/// partial accumulators can be combined in any fixed order.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: Array1::zeros(dim), m2: Array1::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, frames: &Array2<f64>) -> Result<()> {
        if frames.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "speaker stats dim {} vs frames dim {}",
                self.dim(),
                frames.ncols()
            )));
        }
        if frames.nrows() == 0 {
            return Ok(());
        }
        let n = frames.nrows();
        let mean = frames.mean_axis(Axis(0)).expect("nonempty");
        let m2 = frames
            .rows()
            .into_iter()
            .fold(Array1::zeros(self.dim()), |acc: Array1<f64>, r| {
                let d = &r - &mean;
                acc + &d * &d
            });
        self.merge(&MomentAccumulator { count: n, mean, m2 })
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::shape("merging accumulators of different dims"));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean = &self.mean + &(&delta * (nb / n));
        self.m2 = &self.m2 + &other.m2 + &(&delta * &delta * (na * nb / n));
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self, speaker_id: &str) -> Option<SpeakerStats> {
        (self.count > 0).then(|| SpeakerStats {
            speaker_id: speaker_id.to_string(),
            mean: self.mean.clone(),
            variance: self.m2.mapv(|v| (v / self.count as f64).max(0.0)),
            frame_count: self.count,
        })
    }
}

/// Per-speaker mean and biased variance, sorted by speaker id. Speakers with
/// no frames are dropped with a warning.
pub fn accumulate_speaker_stats<'a, I>(feats: I) -> Result<Vec<SpeakerStats>>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureMatrix)>,
{
    let mut acc: BTreeMap<&str, MomentAccumulator> = BTreeMap::new();
    for (spk, f) in feats {
        acc.entry(spk)
            .or_insert_with(|| MomentAccumulator::new(f.dim()))
            .add(f.frames())?;
    }
    Ok(acc
        .into_iter()
        .filter_map(|(spk, a)| {
            let stats = a.finish(spk);
            if stats.is_none() {
                log::warn!("speaker {spk} has no frames; excluded from normalization stats");
            }
            stats
        })
        .collect())
}

pub fn normalize(f: &FeatureMatrix, s: &SpeakerStats) -> Result<FeatureMatrix> {
    normalize_with_eps(f, s, DEFAULT_VAR_EPS)
}

pub fn normalize_with_eps(f: &FeatureMatrix, s: &SpeakerStats, eps_var: f64) -> Result<FeatureMatrix> {
    if s.mean.len() != f.dim() || s.variance.len() != f.dim() {
        return Err(Error::shape(format!(
            "speaker {} stats have dim {}, features have dim {}",
            s.speaker_id,
            s.mean.len(),
            f.dim()
        )));
    }
    let inv_std = s.variance.mapv(|v| 1.0 / (v + eps_var).sqrt());
    let out = (f.frames() - &s.mean) * &inv_std;
    FeatureMatrix::new(out, f.frame_rate())
}

/// Output frame `t'` is the concatenation of input frames
/// `factor·t' − left ..= factor·t'`, oldest first; indices before the start
/// repeat frame 0. Produces `ceil(T / factor)` frames of width `(left+1)·d`.
pub fn stack_and_downsample(f: &FeatureMatrix, left: usize, factor: usize) -> Result<FeatureMatrix> {
    if factor == 0 {
        return Err(Error::invalid("downsampling factor must be at least 1"));
    }
    f.ensure_nonempty("stack_and_downsample")?;
    let (t_in, d) = (f.len(), f.dim());
    let t_out = t_in.div_ceil(factor);
    let mut out = Array2::<f64>::zeros((t_out, (left + 1) * d));
    for t in 0..t_out {
        let anchor = t * factor;
        for j in 0..=left {
            let src = (anchor + j).saturating_sub(left);
            out.slice_mut(s![t, j * d..(j + 1) * d])
                .assign(&f.frames().row(src));
        }
    }
    FeatureMatrix::new(out, f.frame_rate() / factor as f64)
}
