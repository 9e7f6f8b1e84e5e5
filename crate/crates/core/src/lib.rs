//! Multitask framewise piano transcription.
//!
//! Derives five framewise prediction targets (onsets, intermediate frames,
//! offsets, velocity, sustain pedal) from MIDI groundtruth, computes
//! log-frequency spectrogram snippets from audio, trains hard-sharing and
//! cross-stitch convolutional networks on a weighted multitask objective,
//! and evaluates framewise F1 and R².

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod gradcheck;
pub mod midi_io;
pub mod models;
pub mod synth;
pub mod targets;
pub mod training;
