//! Pieces of aligned spectrogram and targets, and minibatch assembly.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

use crate::autodiff::{derive_seed, RunRng};
use crate::features::{
    compute_spectrogram, read_wav_checked, write_snippet, FeatureConfig, FeatureError,
    CONTEXT_FRAMES, N_BINS,
};
use crate::midi_io::{load_groundtruth, write_smf, MidiError, Note, SustainEvent};
use crate::models::{Task, NUM_KEYS};
use crate::synth::{generate_performance, render_audio, SynthConfig, SynthError};
use crate::targets::{derive_targets, required_frames, FrameTargets, TargetError};

pub const SNIPPET_LEN: usize = CONTEXT_FRAMES * N_BINS;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Targets(#[from] TargetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("synth sample rate {synth} Hz differs from feature sample rate {features} Hz")]
    SampleRate { synth: u32, features: u32 },
    #[error("no .mid/.wav pairs found in {0}")]
    NoPairs(PathBuf),
}

/// One recording: a `T × 144` spectrogram and targets with the same `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    pub name: String,
    pub spectrogram: Array2<f32>,
    pub targets: FrameTargets,
}

impl Piece {
    /// Computes features and targets. When the groundtruth runs past the
    /// audio the spectrogram is padded with silent (zero) frames.
    pub fn from_audio(
        name: impl Into<String>,
        samples: &[f32],
        notes: &[Note],
        sustain: &[SustainEvent],
        features: &FeatureConfig,
    ) -> Result<Self, DatasetError> {
        let spec = compute_spectrogram(samples, features)?;
        let frames = spec.num_frames().max(required_frames(notes, features.fps));
        let mut spectrogram = Array2::zeros((frames, N_BINS));
        spectrogram
            .slice_mut(s![..spec.num_frames(), ..])
            .assign(&spec.frames);
        let targets = derive_targets(notes, sustain, features.fps, frames)?;
        Ok(Self {
            name: name.into(),
            spectrogram,
            targets,
        })
    }

    pub fn frames(&self) -> usize {
        self.spectrogram.nrows()
    }
}

/// Framewise targets for a batch, row-major `[N, 88]` (sustain `[N]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchTargets {
    pub batch: usize,
    pub onset: Vec<f32>,
    pub intermediate: Vec<f32>,
    pub offset: Vec<f32>,
    pub velocity: Vec<f32>,
    pub sustain: Vec<f32>,
}

impl BatchTargets {
    pub fn task(&self, task: Task) -> &[f32] {
        match task {
            Task::Onset => &self.onset,
            Task::Intermediate => &self.intermediate,
            Task::Offset => &self.offset,
            Task::Velocity => &self.velocity,
            Task::Sustain => &self.sustain,
        }
    }

    fn clear(&mut self) {
        self.batch = 0;
        self.onset.clear();
        self.intermediate.clear();
        self.offset.clear();
        self.velocity.clear();
        self.sustain.clear();
    }
}

/// A collection of pieces addressed by a flat frame index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pieces: Vec<Piece>,
    index: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(pieces: Vec<Piece>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .flat_map(|(p, piece)| (0..piece.frames()).map(move |f| (p, f)))
            .collect();
        Self { pieces, index }
    }

    /// `pieces` random performances of `config.duration` seconds each;
    /// piece `i` is generated from a seed derived from `config.seed` and `i`.
    pub fn synthetic(
        config: &SynthConfig,
        pieces: usize,
        features: &FeatureConfig,
    ) -> Result<Self, DatasetError> {
        if config.sample_rate != features.sample_rate {
            return Err(DatasetError::SampleRate {
                synth: config.sample_rate,
                features: features.sample_rate,
            });
        }
        let mut out = Vec::with_capacity(pieces);
        for i in 0..pieces {
            let piece_config = SynthConfig {
                seed: derive_seed(config.seed, i as u64),
                ..config.clone()
            };
            let perf = generate_performance(&piece_config)?;
            let audio = render_audio(&perf.timed_events(), config.sample_rate);
            out.push(Piece::from_audio(
                format!("synth-{i:03}"),
                &audio,
                &perf.notes,
                &perf.sustain,
                features,
            )?);
        }
        Ok(Self::new(out))
    }

    /// Every `<name>.mid` with a sibling `<name>.wav`, in name order.
    pub fn from_dir(dir: &Path, features: &FeatureConfig) -> Result<Self, DatasetError> {
        let io = |source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut mids: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|e| e == "mid") && p.with_extension("wav").is_file()
            })
            .collect();
        mids.sort();
        if mids.is_empty() {
            return Err(DatasetError::NoPairs(dir.to_path_buf()));
        }
        let mut pieces = Vec::with_capacity(mids.len());
        for mid in mids {
            let bytes = std::fs::read(&mid).map_err(|source| DatasetError::Io {
                path: mid.clone(),
                source,
            })?;
            let gt = load_groundtruth(&bytes).map_err(|source| DatasetError::Midi {
                path: mid.clone(),
                source,
            })?;
            let audio = read_wav_checked(&mid.with_extension("wav"), features)?;
            let name = mid
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            pieces.push(Piece::from_audio(
                name,
                &audio,
                &gt.notes,
                &gt.sustain,
                features,
            )?);
        }
        Ok(Self::new(pieces))
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Total number of frames over all pieces.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Appends snippets of the given flat frame indices to `inputs`
    /// (`[N, 11, 144]` row-major) and their targets to `targets`.
    pub fn fill_batch(&self, frames: &[usize], inputs: &mut Vec<f32>, targets: &mut BatchTargets) {
        inputs.clear();
        inputs.resize(frames.len() * SNIPPET_LEN, 0.0);
        targets.clear();
        targets.batch = frames.len();
        for (i, &flat) in frames.iter().enumerate() {
            let (p, f) = self.index[flat];
            let piece = &self.pieces[p];
            write_snippet(
                piece.spectrogram.view(),
                f,
                &mut inputs[i * SNIPPET_LEN..(i + 1) * SNIPPET_LEN],
            );
            let t = &piece.targets;
            targets.onset.extend(t.onset.row(f).iter());
            targets.intermediate.extend(t.intermediate.row(f).iter());
            targets.offset.extend(t.offset.row(f).iter());
            targets.velocity.extend(t.velocity.row(f).iter());
            targets.sustain.push(t.sustain[f]);
        }
        debug_assert_eq!(targets.onset.len(), frames.len() * NUM_KEYS);
    }

    /// Writes each synthetic piece as `<name>.mid` plus `<name>.wav`.
    pub fn write_synthetic(
        dir: &Path,
        config: &SynthConfig,
        pieces: usize,
    ) -> Result<Vec<PathBuf>, DatasetError> {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut written = Vec::new();
        for i in 0..pieces {
            let piece_config = SynthConfig {
                seed: derive_seed(config.seed, i as u64),
                ..config.clone()
            };
            let perf = generate_performance(&piece_config)?;
            let audio = render_audio(&perf.timed_events(), config.sample_rate);
            let mid = dir.join(format!("synth-{i:03}.mid"));
            let bytes = write_smf(perf.ticks_per_quarter, std::slice::from_ref(&perf.events));
            std::fs::write(&mid, bytes).map_err(|source| DatasetError::Io {
                path: mid.clone(),
                source,
            })?;
            crate::features::write_wav_pcm16(
                &mid.with_extension("wav"),
                &audio,
                config.sample_rate,
            )?;
            written.push(mid);
        }
        Ok(written)
    }
}

/// Endless seeded stream of minibatch frame indices: each epoch visits
/// every frame once in a fresh random order.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    rng: RunRng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(frames: usize, seed: u64) -> Self {
        Self {
            rng: RunRng::seed_from_u64(seed),
            order: (0..frames).collect(),
            pos: frames,
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
