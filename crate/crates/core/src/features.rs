//! Audio front end: STFT magnitudes, a semi-logarithmic filterbank, log
//! compression and fixed-context snippets.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output bins of the filterbank.
pub const N_BINS: usize = 144;
/// Frames of context in one snippet (centre ± 5).
pub const CONTEXT_FRAMES: usize = 11;
const HALF_CONTEXT: usize = CONTEXT_FRAMES / 2;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty input signal")]
    EmptyInput,
    #[error("cannot fit {bins} filterbank bins between {f_min} Hz and {f_max} Hz")]
    InfeasibleLayout { bins: usize, f_min: f64, f_max: f64 },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("wav must be mono, found {0} channels")]
    NotMono(u16),
    #[error("unsupported wav sample format: {0}")]
    UnsupportedFormat(String),
    #[error("wav sample rate {found} Hz does not match configured {expected} Hz")]
    SampleRateMismatch { found: u32, expected: u32 },
}

/// Front-end constants. Defaults: 22050 Hz, 2048-point FFT, 50 fps
/// (hop 441), A0 up to Nyquist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub fps: u32,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub bins_per_semitone: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 2048,
            fps: 50,
            f_min: 27.5,
            f_max: None,
            bins_per_semitone: 2,
        }
    }
}

impl FeatureConfig {
    /// Hop size in samples; the sample rate must be a multiple of the frame
    /// rate so feature frames line up with target frames exactly.
    pub fn hop(&self) -> Result<usize, FeatureError> {
        if self.fps == 0 || self.sample_rate == 0 || !self.sample_rate.is_multiple_of(self.fps) {
            return Err(FeatureError::InvalidConfig(format!(
                "sample rate {} is not a multiple of {} fps",
                self.sample_rate, self.fps
            )));
        }
        Ok((self.sample_rate / self.fps) as usize)
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        self.hop()?;
        if self.n_fft < 2 || !self.n_fft.is_multiple_of(2) {
            return Err(FeatureError::InvalidConfig(format!(
                "n_fft must be even, got {}",
                self.n_fft
            )));
        }
        if self.bins_per_semitone == 0 {
            return Err(FeatureError::InvalidConfig(
                "bins_per_semitone must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hann-windowed magnitude STFT. Frame `t` is centred on sample `t·hop`,
/// with zeros outside the signal; there are `ceil(len / hop)` frames and
/// `n_fft/2 + 1` bins.
pub fn stft_magnitude(
    samples: &[f32],
    n_fft: usize,
    hop: usize,
) -> Result<Array2<f64>, FeatureError> {
    if samples.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    if hop == 0 || n_fft == 0 {
        return Err(FeatureError::InvalidConfig(
            "hop and n_fft must be positive".into(),
        ));
    }
    let frames = samples.len().div_ceil(hop);
    let bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let rows: Vec<Vec<f64>> = (0..frames)
        .into_par_iter()
        .map(|t| {
            let start = (t * hop) as isize - half;
            let mut buf: Vec<Complex<f64>> = (0..n_fft)
                .map(|n| {
                    let i = start + n as isize;
                    let x = if i >= 0 && (i as usize) < samples.len() {
                        samples[i as usize] as f64
                    } else {
                        0.0
                    };
                    Complex::new(x * window[n], 0.0)
                })
                .collect();
            fft.process(&mut buf);
            buf[..bins].iter().map(|c| c.norm()).collect()
        })
        .collect();
    let mut out = Array2::zeros((frames, bins));
    for (t, row) in rows.into_iter().enumerate() {
        out.row_mut(t).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

/// Semi-logarithmic filterbank: one-hot pass-through of STFT bins at low
/// frequencies, triangular filters with centres spaced by `2^(1/(12·bps))`
/// above the crossover.
#[derive(Clone, Debug)]
pub struct Filterbank {
    /// `(n_fft/2 + 1) × n_bins`.
    pub weights: Array2<f64>,
    /// First STFT bin whose log-spacing gap reaches one STFT bin width.
    pub crossover_bin: usize,
    /// Number of leading one-hot (linear) output bins.
    pub linear_bins: usize,
    /// Centre frequencies of the logarithmic filters.
    pub log_centers: Vec<f64>,
}

pub fn build_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_bins: usize,
    bins_per_semitone: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Filterbank, FeatureError> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min > 0.0 && f_min < f_max && f_max <= nyquist) || n_bins == 0 || bins_per_semitone == 0
    {
        return Err(FeatureError::InvalidConfig(format!(
            "need 0 < f_min < f_max <= {nyquist}, got {f_min}..{f_max}"
        )));
    }
    let infeasible = || FeatureError::InfeasibleLayout {
        bins: n_bins,
        f_min,
        f_max,
    };
    let stft_bins = n_fft / 2 + 1;
    let df = sample_rate as f64 / n_fft as f64;
    let ratio = 2f64.powf(1.0 / (12.0 * bins_per_semitone as f64));
    let crossover_bin = (1.0 / (ratio - 1.0)).ceil() as usize;
    let first_bin = (f_min / df).ceil() as usize;

    let (linear_bins, log_start) = if first_bin < crossover_bin {
        (crossover_bin - first_bin, crossover_bin as f64 * df)
    } else {
        (0, f_min)
    };
    if linear_bins > n_bins {
        return Err(infeasible());
    }
    let log_bins = n_bins - linear_bins;
    // The upper edge of the last triangle must stay inside the band.
    if log_bins > 0 && log_start * ratio.powi(log_bins as i32) > f_max {
        return Err(infeasible());
    }

    let mut weights = Array2::zeros((stft_bins, n_bins));
    for j in 0..linear_bins {
        weights[[first_bin + j, j]] = 1.0;
    }
    let log_centers: Vec<f64> = (0..log_bins)
        .map(|i| log_start * ratio.powi(i as i32))
        .collect();
    for (i, &c) in log_centers.iter().enumerate() {
        let col = linear_bins + i;
        let lo = c / ratio;
        let hi = c * ratio;
        for k in 0..stft_bins {
            let f = k as f64 * df;
            let w = if f > lo && f < c {
                (f - lo) / (c - lo)
            } else if f >= c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            weights[[k, col]] = w;
        }
        if weights.column(col).iter().all(|&w| w == 0.0) {
            let nearest = ((c / df).round() as usize).min(stft_bins - 1);
            weights[[nearest, col]] = 1.0;
        }
    }
    Ok(Filterbank {
        weights,
        crossover_bin,
        linear_bins,
        log_centers,
    })
}

/// Element-wise `ln(1 + x)`.
pub fn log_compress(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(f64::ln_1p)
}

/// Log-magnitude, log-frequency spectrogram, `T × 144`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogFreqSpectrogram {
    pub frames: Array2<f32>,
    pub fps: u32,
    pub sample_rate: u32,
}

impl LogFreqSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Full front end for a mono signal.
pub fn compute_spectrogram(
    samples: &[f32],
    config: &FeatureConfig,
) -> Result<LogFreqSpectrogram, FeatureError> {
    config.validate()?;
    let hop = config.hop()?;
    let mags = stft_magnitude(samples, config.n_fft, hop)?;
    let fb = build_filterbank(
        config.sample_rate,
        config.n_fft,
        N_BINS,
        config.bins_per_semitone,
        config.f_min,
        config.f_max(),
    )?;
    let filtered = mags.dot(&fb.weights);
    let frames = log_compress(&filtered).mapv(|v| v as f32);
    Ok(LogFreqSpectrogram {
        frames,
        fps: config.fps,
        sample_rate: config.sample_rate,
    })
}

/// One model input: 11 context frames × 144 bins around `center_frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSnippet {
    pub values: Array2<f32>,
    pub center_frame: usize,
}

/// Rows `t-5 ..= t+5`; rows outside the spectrogram are zero.
pub fn extract_snippet(spec: &LogFreqSpectrogram, t: usize) -> FeatureSnippet {
    let mut values = Array2::zeros((CONTEXT_FRAMES, N_BINS));
    write_snippet(
        spec.frames.view(),
        t,
        values.as_slice_mut().expect("contiguous"),
    );
    FeatureSnippet {
        values,
        center_frame: t,
    }
}

/// Row-major snippet for frame `t` written into `out` (length 11·144).
pub fn write_snippet(frames: ArrayView2<'_, f32>, t: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), CONTEXT_FRAMES * N_BINS);
    let total = frames.nrows() as isize;
    for (r, row) in out.chunks_mut(N_BINS).enumerate() {
        let src = t as isize + r as isize - HALF_CONTEXT as isize;
        if src >= 0 && src < total {
            let view = frames.slice(s![src as usize, ..]);
            for (o, &v) in row.iter_mut().zip(view.iter()) {
                *o = v;
            }
        } else {
            row.fill(0.0);
        }
    }
}

/// Mono samples and sample rate of a 16-bit PCM or 32-bit float WAV file.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32), FeatureError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FeatureError::NotMono(spec.channels));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().collect::<Result<Vec<_>, _>>()?
        }
        (fmt, bits) => {
            return Err(FeatureError::UnsupportedFormat(format!(
                "{fmt:?} {bits}-bit"
            )));
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Reads a WAV and checks it against the configured sample rate.
pub fn read_wav_checked(path: &Path, config: &FeatureConfig) -> Result<Vec<f32>, FeatureError> {
    let (samples, sr) = read_wav(path)?;
    if sr != config.sample_rate {
        return Err(FeatureError::SampleRateMismatch {
            found: sr,
            expected: config.sample_rate,
        });
    }
    Ok(samples)
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
