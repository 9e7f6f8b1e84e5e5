//! Framewise prediction targets derived from corrected notes and pedal
//! events, and their binary dump format.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

use crate::midi_io::{sustain_value_at, Note, SustainEvent, LOWEST_KEY};
use crate::models::NUM_KEYS;

pub const TARGETS_MAGIC: &[u8; 4] = b"MTGT";

/// Slack added before flooring so that times computed from ticks land on
/// the frame they were meant to start.
const QUANTIZE_GUARD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("maximum filter length must be odd, got {0}")]
    EvenLength(usize),
    #[error("note ends in frame {frame} but only {frames} frames are available")]
    FrameOverflow { frame: usize, frames: usize },
    #[error("malformed target file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Frame index of `time`: `floor(time * fps)`.
pub fn quantize(time: f64, fps: u32) -> usize {
    (time * f64::from(fps) + QUANTIZE_GUARD).floor().max(0.0) as usize
}

/// Running maximum along the time axis with a centred window of odd
/// `length`; the window is clipped at the edges.
pub fn max_filter_time(m: ArrayView2<'_, f32>, length: usize) -> Result<Array2<f32>, TargetError> {
    if length.is_multiple_of(2) {
        return Err(TargetError::EvenLength(length));
    }
    let h = (length - 1) / 2;
    let frames = m.nrows();
    let mut out = m.to_owned();
    for t in 0..frames {
        let lo = t.saturating_sub(h);
        let hi = (t + h).min(frames.saturating_sub(1));
        let mut row = out.row_mut(t);
        for s in lo..=hi {
            for (o, &v) in row.iter_mut().zip(m.row(s)) {
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub onset: Array2<f32>,
    pub intermediate: Array2<f32>,
    pub offset: Array2<f32>,
    pub velocity: Array2<f32>,
    pub sustain: Array1<f32>,
    pub fps: u32,
}

impl FrameTargets {
    pub fn zeros(frames: usize, fps: u32) -> Self {
        Self {
            onset: Array2::zeros((frames, NUM_KEYS)),
            intermediate: Array2::zeros((frames, NUM_KEYS)),
            offset: Array2::zeros((frames, NUM_KEYS)),
            velocity: Array2::zeros((frames, NUM_KEYS)),
            sustain: Array1::zeros(frames),
            fps,
        }
    }

    pub fn frames(&self) -> usize {
        self.sustain.len()
    }

    /// Rows `start..end` of every target.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        use ndarray::s;
        Self {
            onset: self.onset.slice(s![start..end, ..]).to_owned(),
            intermediate: self.intermediate.slice(s![start..end, ..]).to_owned(),
            offset: self.offset.slice(s![start..end, ..]).to_owned(),
            velocity: self.velocity.slice(s![start..end, ..]).to_owned(),
            sustain: self.sustain.slice(s![start..end]).to_owned(),
            fps: self.fps,
        }
    }
}

/// Smallest frame count that holds every note's offset frame with one
/// frame to spare for widening.
pub fn required_frames(notes: &[Note], fps: u32) -> usize {
    notes
        .iter()
        .map(|n| quantize(n.offset, fps) + 2)
        .max()
        .unwrap_or(0)
}

/// Builds the five targets. Onsets, offsets and velocities are marked at a
/// single frame and widened to three; intermediate frames run from the
/// onset frame up to (excluding) the offset frame, or just the onset frame
/// for notes shorter than a frame. Sustain is the held pedal value at the
/// start of each frame, scaled to `[0, 1]`.
pub fn derive_targets(
    notes: &[Note],
    sustain: &[SustainEvent],
    fps: u32,
    frames: usize,
) -> Result<FrameTargets, TargetError> {
    let mut t = FrameTargets::zeros(frames, fps);
    for n in notes {
        let k = usize::from(n.key - LOWEST_KEY);
        let a = quantize(n.onset, fps);
        let b = quantize(n.offset, fps);
        if b >= frames {
            return Err(TargetError::FrameOverflow { frame: b, frames });
        }
        t.onset[[a, k]] = 1.0;
        t.offset[[b, k]] = 1.0;
        let vel = f32::from(n.velocity) / 127.0;
        if vel > t.velocity[[a, k]] {
            t.velocity[[a, k]] = vel;
        }
        for f in a..b.max(a + 1) {
            t.intermediate[[f, k]] = 1.0;
        }
    }
    t.onset = max_filter_time(t.onset.view(), 3)?;
    t.offset = max_filter_time(t.offset.view(), 3)?;
    t.velocity = max_filter_time(t.velocity.view(), 3)?;
    for (f, s) in t.sustain.iter_mut().enumerate() {
        *s = f32::from(sustain_value_at(sustain, f as f64 / f64::from(fps))) / 127.0;
    }
    Ok(t)
}

/// Little-endian dump: magic, `u32` frames, keys and fps, then the onset,
/// intermediate, offset, velocity and sustain blocks as `f32`.
pub fn write_targets(t: &FrameTargets, mut w: impl Write) -> Result<(), TargetError> {
    let mut buf = Vec::with_capacity(16 + 4 * (4 * NUM_KEYS + 1) * t.frames());
    buf.extend_from_slice(TARGETS_MAGIC);
    for v in [t.frames() as u32, NUM_KEYS as u32, t.fps] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for m in [&t.onset, &t.intermediate, &t.offset, &t.velocity] {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in t.sustain.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_targets(mut r: impl Read) -> Result<FrameTargets, TargetError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != TARGETS_MAGIC {
        return Err(TargetError::Format("missing MTGT header".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (frames, keys, fps) = (word(4) as usize, word(8) as usize, word(12));
    if keys != NUM_KEYS {
        return Err(TargetError::Format(format!(
            "expected {NUM_KEYS} keys, found {keys}"
        )));
    }
    let expected = frames
        .checked_mul(4 * keys + 1)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(TargetError::Format(format!(
            "{} bytes do not hold {frames} frames",
            bytes.len()
        )));
    }
    let mut floats = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut block = || -> Array2<f32> {
        Array2::from_shape_vec(
            (frames, keys),
            floats.by_ref().take(frames * keys).collect(),
        )
        .expect("sized")
    };
    let onset = block();
    let intermediate = block();
    let offset = block();
    let velocity = block();
    let sustain = Array1::from_iter(floats);
    Ok(FrameTargets {
        onset,
        intermediate,
        offset,
        velocity,
        sustain,
        fps,
    })
}
