//! Seeded random piano-like performances (notes plus sustain pedal) and an
//! additive renderer for them.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::RunRng;
use crate::midi_io::{
    apply_sustain_correction, extract_notes, extract_sustain, ticks_to_seconds, MidiEvent,
    MidiMessage, Note, SustainEvent, TimedEvent, DEFAULT_SUSTAIN_THRESHOLD, DEFAULT_TEMPO_US,
    HIGHEST_KEY, LOWEST_KEY, SUSTAIN_CONTROLLER,
};

pub const TICKS_PER_QUARTER: u16 = 480;
/// Ticks per second at the default tempo.
pub const TICKS_PER_SECOND: f64 = TICKS_PER_QUARTER as f64 * 1e6 / DEFAULT_TEMPO_US as f64;

pub const PARTIALS: usize = 6;
/// Silence appended after the last event so releases can ring out.
pub const RELEASE_TAIL_SECONDS: f64 = 0.5;
pub const PEAK_LEVEL: f32 = 0.9;

const MIN_NOTE_SECONDS: f64 = 0.1;
const MAX_NOTE_SECONDS: f64 = 2.0;
const ATTACK_SECONDS: f64 = 0.005;
const RELEASE_SECONDS: f64 = 0.06;
/// Time constant and share of the fast initial drop after the hammer strike.
const STRIKE_SECONDS: f64 = 0.08;
const STRIKE_SHARE: f64 = 0.6;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub duration: f64,
    pub polyphony_max: usize,
    /// Expected note starts per second.
    pub note_rate: f64,
    /// Chance that a pedal segment starts at each pedal decision point.
    pub sustain_prob: f64,
    pub key_range: (u8, u8),
    pub velocity_range: (u8, u8),
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 30.0,
            polyphony_max: 4,
            note_rate: 4.0,
            sustain_prob: 0.3,
            key_range: (LOWEST_KEY, HIGHEST_KEY),
            velocity_range: (30, 127),
            sample_rate: 22050,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.polyphony_max == 0 {
            return bad("polyphony_max must be at least 1");
        }
        if !(self.note_rate >= 0.0 && self.note_rate.is_finite()) {
            return bad("note_rate must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.sustain_prob) {
            return bad("sustain_prob must lie in [0, 1]");
        }
        let (lo, hi) = self.key_range;
        if lo < LOWEST_KEY || hi > HIGHEST_KEY || lo > hi {
            return bad("key_range must lie within 21..=108");
        }
        let (vlo, vhi) = self.velocity_range;
        if vlo == 0 || vhi > 127 || vlo > vhi {
            return bad("velocity_range must lie within 1..=127");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        Ok(())
    }
}

/// A generated piece: a single MIDI track plus its groundtruth.
#[derive(Clone, Debug, PartialEq)]
pub struct Performance {
    pub ticks_per_quarter: u16,
    /// Delta-timed events of the single track, ending with end-of-track at
    /// the configured duration.
    pub events: Vec<MidiEvent>,
    /// Sustain-corrected notes.
    pub notes: Vec<Note>,
    pub sustain: Vec<SustainEvent>,
    pub duration: f64,
}

impl Performance {
    pub fn timed_events(&self) -> Vec<TimedEvent> {
        timed(&self.events)
    }
}

/// Absolute timing of a delta-timed track at the default tempo.
pub fn timed(events: &[MidiEvent]) -> Vec<TimedEvent> {
    let mut tick = 0u64;
    events
        .iter()
        .map(|e| {
            tick += u64::from(e.delta_ticks);
            TimedEvent {
                tick,
                seconds: ticks_to_seconds(tick, DEFAULT_TEMPO_US, TICKS_PER_QUARTER),
                event: e.clone(),
            }
        })
        .collect()
}

fn to_ticks(seconds: f64) -> u64 {
    (seconds * TICKS_PER_SECOND).round() as u64
}

/// Random performance. Note starts follow a Poisson process (skipped while
/// `polyphony_max` keys sound), keys and velocities are uniform, durations
/// log-uniform in `[0.1, 2]` s. Pedal segments press with values above 64
/// and may include mid-segment changes on either side of the threshold.
/// Everything ends by `duration`.
pub fn generate_performance(config: &SynthConfig) -> Result<Performance, SynthError> {
    config.validate()?;
    let mut rng = RunRng::seed_from_u64(config.seed);
    let end = to_ticks(config.duration);
    // (tick, order, message); order puts releases before presses at a tick
    let mut raw: Vec<(u64, u8, MidiMessage)> = Vec::new();

    if config.note_rate > 0.0 {
        let gaps = Exp::new(config.note_rate).expect("positive rate");
        let mut sounding: Vec<(u64, u8)> = Vec::new();
        let mut t = gaps.sample(&mut rng);
        let latest_start = config.duration - MIN_NOTE_SECONDS;
        while t < latest_start {
            let start = to_ticks(t);
            sounding.retain(|&(off, _)| off > start);
            if sounding.len() < config.polyphony_max {
                let key = rng.gen_range(config.key_range.0..=config.key_range.1);
                let velocity = rng.gen_range(config.velocity_range.0..=config.velocity_range.1);
                let log_len = rng.gen_range(MIN_NOTE_SECONDS.ln()..=MAX_NOTE_SECONDS.ln());
                let stop = to_ticks((t + log_len.exp()).min(config.duration));
                if stop > start && !sounding.iter().any(|&(_, k)| k == key) {
                    sounding.push((stop, key));
                    raw.push((
                        start,
                        1,
                        MidiMessage::NoteOn {
                            channel: 0,
                            key,
                            velocity,
                        },
                    ));
                    raw.push((
                        stop,
                        0,
                        MidiMessage::NoteOff {
                            channel: 0,
                            key,
                            velocity: 64,
                        },
                    ));
                }
            }
            t += gaps.sample(&mut rng);
        }
    }

    if config.sustain_prob > 0.0 {
        let cc = |value: u8| MidiMessage::ControlChange {
            channel: 0,
            controller: SUSTAIN_CONTROLLER,
            value,
        };
        let mut t = rng.gen_range(0.0..1.0);
        while t < config.duration - 0.2 {
            if rng.gen_bool(config.sustain_prob) {
                let hold = rng.gen_range(0.5..3.0f64).min(config.duration - t);
                let press = to_ticks(t);
                let release = to_ticks(t + hold);
                let threshold = DEFAULT_SUSTAIN_THRESHOLD;
                raw.push((
                    press,
                    1,
                    cc(if rng.gen_bool(0.2) {
                        threshold + 1
                    } else {
                        rng.gen_range(threshold + 1..=127)
                    }),
                ));
                if rng.gen_bool(0.3) {
                    // a mid-segment change, sometimes a dip to exactly the
                    // threshold (pedal reads as up)
                    let mid = press + (release - press) / 2;
                    let value = if rng.gen_bool(0.5) {
                        threshold
                    } else {
                        rng.gen_range(threshold + 1..=127)
                    };
                    raw.push((mid, 2, cc(value)));
                }
                raw.push((
                    release,
                    0,
                    cc(if rng.gen_bool(0.2) {
                        threshold
                    } else {
                        rng.gen_range(0..=threshold)
                    }),
                ));
                t += hold;
            }
            t += rng.gen_range(0.5..2.0);
        }
    }

    raw.sort_by_key(|&(tick, order, _)| (tick, order));
    let mut events = Vec::with_capacity(raw.len() + 1);
    let mut last = 0u64;
    for (tick, _, message) in raw {
        events.push(MidiEvent::new((tick - last) as u32, message));
        last = tick;
    }
    events.push(MidiEvent::new(
        (end.max(last) - last) as u32,
        MidiMessage::EndOfTrack,
    ));

    let timed_events = timed(&events);
    let extracted = extract_notes(&timed_events).expect("keys are generated in range");
    let sustain = extract_sustain(&timed_events);
    let notes = apply_sustain_correction(&extracted.notes, &sustain, DEFAULT_SUSTAIN_THRESHOLD);
    Ok(Performance {
        ticks_per_quarter: TICKS_PER_QUARTER,
        events,
        notes,
        sustain,
        duration: config.duration,
    })
}

pub fn key_frequency(key: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(key) - 69.0) / 12.0)
}

/// Slow decay time constant while a note is held (lower keys ring longer).
fn sustain_decay_seconds(key: u8) -> f64 {
    3.0 - 2.0 * (f64::from(key) - f64::from(LOWEST_KEY)) / f64::from(HIGHEST_KEY - LOWEST_KEY)
}

/// Held-note envelope: a fast drop after the strike on top of a slow decay.
fn held_envelope(t: f64, tau: f64) -> f64 {
    STRIKE_SHARE * (-t / STRIKE_SECONDS).exp() + (1.0 - STRIKE_SHARE) * (-t / tau).exp()
}

/// Additive rendering of time-ordered events. Each sustain-corrected note
/// sounds 6 harmonics with 1/h amplitudes scaled by velocity/127, a short
/// attack, a two-stage decay up to its (corrected) offset and a fast
/// one after. The result spans the last event plus a release tail and is
/// scaled so its peak is 0.9 (silence stays silence).
pub fn render_audio(events: &[TimedEvent], sample_rate: u32) -> Vec<f32> {
    let end = events.iter().map(|e| e.seconds).fold(0.0, f64::max);
    let len = (end * f64::from(sample_rate)).ceil() as usize
        + (RELEASE_TAIL_SECONDS * f64::from(sample_rate)).ceil() as usize;
    let mut out = vec![0f64; len];
    let sustain = extract_sustain(events);
    let notes = match extract_notes(events) {
        Ok(n) => apply_sustain_correction(&n.notes, &sustain, DEFAULT_SUSTAIN_THRESHOLD),
        Err(_) => Vec::new(),
    };
    let sr = f64::from(sample_rate);
    let nyquist = sr / 2.0;
    for n in &notes {
        let f0 = key_frequency(n.key);
        let amp = f64::from(n.velocity) / 127.0;
        let tau = sustain_decay_seconds(n.key);
        let start = (n.onset * sr).round() as usize;
        let stop = (n.offset * sr).round() as usize;
        let ring = (10.0 * RELEASE_SECONDS * sr) as usize;
        let hold = (stop - start.min(stop)) as f64 / sr;
        let level_at_stop = held_envelope(hold, tau);
        for (i, o) in out
            .iter_mut()
            .enumerate()
            .skip(start)
            .take((stop + ring).saturating_sub(start))
        {
            let t = (i - start) as f64 / sr;
            let attack = (t / ATTACK_SECONDS).min(1.0);
            let env = if i < stop {
                held_envelope(t, tau)
            } else {
                level_at_stop * (-(t - hold) / RELEASE_SECONDS).exp()
            };
            let mut v = 0.0;
            for h in 1..=PARTIALS {
                let f = f0 * h as f64;
                if f >= nyquist * 0.95 {
                    break;
                }
                v += (std::f64::consts::TAU * f * t).sin() / h as f64;
            }
            *o += amp * attack * env * v;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let gain = if peak > 0.0 {
        f64::from(PEAK_LEVEL) / peak
    } else {
        0.0
    };
    out.into_iter().map(|v| (v * gain) as f32).collect()
}
