//! Standard MIDI File ingestion: note tuples, sustain pedal events and
//! sustain-based offset correction.

mod smf;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use smf::{
    parse_smf, read_vlq, ticks_to_seconds, write_smf, write_vlq, Smf, DEFAULT_TEMPO_US, VLQ_MAX,
};

pub const LOWEST_KEY: u8 = 21;
pub const HIGHEST_KEY: u8 = 108;
pub const SUSTAIN_CONTROLLER: u8 = 64;
pub const DEFAULT_SUSTAIN_THRESHOLD: u8 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("variable-length quantity at byte {offset} does not terminate within 4 bytes")]
    UnterminatedVlq { offset: usize },
    #[error("input truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported file: {0}")]
    UnsupportedFormat(String),
    #[error("malformed event at byte {offset}: {reason}")]
    BadEvent { offset: usize, reason: String },
    #[error("key {key} at {time:.3}s is outside the piano range")]
    KeyOutOfRange { key: u8, time: f64 },
}

impl MidiError {
    fn shifted(self, base: usize) -> Self {
        match self {
            MidiError::UnterminatedVlq { offset } => MidiError::UnterminatedVlq {
                offset: offset + base,
            },
            MidiError::Truncated { offset } => MidiError::Truncated {
                offset: offset + base,
            },
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MidiMessage {
    NoteOn {
        channel: u8,
        key: u8,
        velocity: u8,
    },
    NoteOff {
        channel: u8,
        key: u8,
        velocity: u8,
    },
    ControlChange {
        channel: u8,
        controller: u8,
        value: u8,
    },
    Tempo {
        us_per_quarter: u32,
    },
    EndOfTrack,
    /// Anything else, kept as its raw bytes (status included) so a writer
    /// can reproduce it.
    Other(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MidiEvent {
    pub delta_ticks: u32,
    pub message: MidiMessage,
}

impl MidiEvent {
    pub fn new(delta_ticks: u32, message: MidiMessage) -> Self {
        Self {
            delta_ticks,
            message,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimedEvent {
    pub tick: u64,
    pub seconds: f64,
    pub event: MidiEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub key: u8,
    pub onset: f64,
    pub offset: f64,
    pub velocity: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SustainEvent {
    pub time: f64,
    pub value: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoteWarning {
    /// A note-on that never saw a matching release.
    DanglingNoteOn { key: u8, channel: u8, time: f64 },
    /// A release with no open note-on.
    UnmatchedNoteOff { key: u8, channel: u8, time: f64 },
    /// Press and release at the same instant.
    ZeroLength { key: u8, time: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractedNotes {
    pub notes: Vec<Note>,
    pub warnings: Vec<NoteWarning>,
}

fn time_ordered(events: &[TimedEvent]) -> Vec<&TimedEvent> {
    let mut v: Vec<&TimedEvent> = events.iter().collect();
    v.sort_by(|a, b| a.seconds.total_cmp(&b.seconds));
    v
}

/// Pairs note-ons with releases first-in first-out per (key, channel).
pub fn extract_notes(events: &[TimedEvent]) -> Result<ExtractedNotes, MidiError> {
    let mut open: BTreeMap<(u8, u8), VecDeque<(f64, u8)>> = BTreeMap::new();
    let mut out = ExtractedNotes::default();
    for e in time_ordered(events) {
        let time = e.seconds;
        let (channel, key, on_velocity) = match e.event.message {
            MidiMessage::NoteOn {
                channel,
                key,
                velocity,
            } if velocity > 0 => (channel, key, Some(velocity)),
            MidiMessage::NoteOn { channel, key, .. }
            | MidiMessage::NoteOff { channel, key, .. } => (channel, key, None),
            _ => continue,
        };
        match on_velocity {
            Some(velocity) => {
                if !(LOWEST_KEY..=HIGHEST_KEY).contains(&key) {
                    return Err(MidiError::KeyOutOfRange { key, time });
                }
                open.entry((key, channel))
                    .or_default()
                    .push_back((time, velocity));
            }
            None => match open.get_mut(&(key, channel)).and_then(|q| q.pop_front()) {
                Some((onset, velocity)) if time > onset => out.notes.push(Note {
                    key,
                    onset,
                    offset: time,
                    velocity,
                }),
                Some((onset, _)) => out
                    .warnings
                    .push(NoteWarning::ZeroLength { key, time: onset }),
                None => out
                    .warnings
                    .push(NoteWarning::UnmatchedNoteOff { key, channel, time }),
            },
        }
    }
    for ((key, channel), queue) in open {
        for (time, _) in queue {
            out.warnings
                .push(NoteWarning::DanglingNoteOn { key, channel, time });
        }
    }
    out.notes
        .sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.key.cmp(&b.key)));
    Ok(out)
}

/// Controller 64 changes on any channel, in time order.
pub fn extract_sustain(events: &[TimedEvent]) -> Vec<SustainEvent> {
    time_ordered(events)
        .into_iter()
        .filter_map(|e| match e.event.message {
            MidiMessage::ControlChange {
                controller: SUSTAIN_CONTROLLER,
                value,
                ..
            } => Some(SustainEvent {
                time: e.seconds,
                value,
            }),
            _ => None,
        })
        .collect()
}

/// Value of the most recent sustain event at or before `time`, or 0.
pub fn sustain_value_at(sustain: &[SustainEvent], time: f64) -> u8 {
    let idx = sustain.partition_point(|s| s.time <= time);
    if idx == 0 {
        0
    } else {
        sustain[idx - 1].value
    }
}

/// Extends releases that happen while the pedal is down to the moment the
/// pedal comes up. An extension stops early where the same key is struck
/// again, but never before the original release.
pub fn apply_sustain_correction(
    notes: &[Note],
    sustain: &[SustainEvent],
    threshold: u8,
) -> Vec<Note> {
    if sustain.is_empty() {
        return notes.to_vec();
    }
    let end_of_piece = notes
        .iter()
        .map(|n| n.offset)
        .chain(sustain.iter().map(|s| s.time))
        .fold(0.0f64, f64::max);
    let mut onsets_by_key: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for n in notes {
        onsets_by_key.entry(n.key).or_default().push(n.onset);
    }
    for v in onsets_by_key.values_mut() {
        v.sort_by(f64::total_cmp);
    }
    notes
        .iter()
        .map(|n| {
            if sustain_value_at(sustain, n.offset) <= threshold {
                return *n;
            }
            let after = sustain.partition_point(|s| s.time <= n.offset);
            let release = sustain[after..]
                .iter()
                .find(|s| s.value <= threshold)
                .map_or(end_of_piece, |s| s.time);
            let onsets = &onsets_by_key[&n.key];
            let restrike = onsets[onsets.partition_point(|&o| o <= n.onset)..]
                .first()
                .copied();
            let extended = restrike.map_or(release, |r| release.min(r));
            Note {
                offset: extended.max(n.offset),
                ..*n
            }
        })
        .collect()
}

/// Groundtruth as used for target derivation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Groundtruth {
    pub notes: Vec<Note>,
    pub sustain: Vec<SustainEvent>,
    pub warnings: Vec<NoteWarning>,
}

/// Parses a file and returns sustain-corrected notes plus pedal events.
pub fn load_groundtruth(bytes: &[u8]) -> Result<Groundtruth, MidiError> {
    let smf = parse_smf(bytes)?;
    let events = smf.merged();
    let extracted = extract_notes(&events)?;
    let sustain = extract_sustain(&events);
    Ok(Groundtruth {
        notes: apply_sustain_correction(&extracted.notes, &sustain, DEFAULT_SUSTAIN_THRESHOLD),
        sustain,
        warnings: extracted.warnings,
    })
}
