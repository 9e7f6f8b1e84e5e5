//! Standard MIDI File container: header/track chunks, variable-length
//! quantities, running status and the tempo map.

use super::{MidiError, MidiEvent, MidiMessage, TimedEvent};

/// Tempo assumed before the first tempo meta event (120 bpm).
pub const DEFAULT_TEMPO_US: u32 = 500_000;

/// Largest value a 4-byte VLQ can carry.
pub const VLQ_MAX: u32 = (1 << 28) - 1;

/// Decodes the variable-length quantity starting at `pos`, returning the
/// value and the position after its last byte.
pub fn read_vlq(bytes: &[u8], pos: usize) -> Result<(u32, usize), MidiError> {
    let mut value: u32 = 0;
    for i in 0..4 {
        let Some(&b) = bytes.get(pos + i) else {
            return Err(MidiError::Truncated { offset: pos + i });
        };
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok((value, pos + i + 1));
        }
    }
    Err(MidiError::UnterminatedVlq { offset: pos })
}

pub fn write_vlq(value: u32, out: &mut Vec<u8>) {
    assert!(value <= VLQ_MAX, "VLQ value {value} exceeds 28 bits");
    let mut groups = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        groups[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { groups[i] | 0x80 } else { groups[i] });
    }
}

/// A parsed file: events per track with absolute timing.
#[derive(Clone, Debug, PartialEq)]
pub struct Smf {
    pub format: u16,
    pub ticks_per_quarter: u16,
    pub tracks: Vec<Vec<TimedEvent>>,
}

impl Smf {
    /// All tracks merged into one time-ordered list (stable by track).
    pub fn merged(&self) -> Vec<TimedEvent> {
        let mut all: Vec<TimedEvent> = self.tracks.iter().flatten().cloned().collect();
        all.sort_by_key(|e| e.tick);
        all
    }

    /// Raw per-track events without timing, as the writer consumes them.
    pub fn raw_tracks(&self) -> Vec<Vec<MidiEvent>> {
        self.tracks
            .iter()
            .map(|t| t.iter().map(|e| e.event.clone()).collect())
            .collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(MidiError::Truncated {
                offset: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let s = self.take(2)?;
        Ok(u16::from_be_bytes([s[0], s[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let s = self.take(4)?;
        Ok(u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let (v, next) = read_vlq(self.bytes, self.pos)?;
        self.pos = next;
        Ok(v)
    }
}

fn data_byte(b: u8, offset: usize) -> Result<u8, MidiError> {
    if b & 0x80 != 0 {
        return Err(MidiError::BadEvent {
            offset,
            reason: format!("status byte {b:#04x} where data byte expected"),
        });
    }
    Ok(b)
}

fn parse_track(data: &[u8], base: usize) -> Result<Vec<MidiEvent>, MidiError> {
    let mut cur = Cursor {
        bytes: data,
        pos: 0,
    };
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    while cur.pos < data.len() {
        let delta_ticks = cur.vlq().map_err(|e| e.shifted(base))?;
        let at = base + cur.pos;
        let first = cur.u8().map_err(|e| e.shifted(base))?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    return Err(MidiError::BadEvent {
                        offset: at,
                        reason: "running status without a previous status byte".into(),
                    })
                }
            }
        };
        let message = match status {
            0xFF => {
                running = None;
                let kind = cur.u8().map_err(|e| e.shifted(base))?;
                let len = cur.vlq().map_err(|e| e.shifted(base))? as usize;
                let payload = cur.take(len).map_err(|e| e.shifted(base))?;
                match (kind, len) {
                    (0x51, 3) => MidiMessage::Tempo {
                        us_per_quarter: u32::from_be_bytes([0, payload[0], payload[1], payload[2]]),
                    },
                    (0x2F, 0) => MidiMessage::EndOfTrack,
                    _ => {
                        let mut raw = vec![0xFF, kind];
                        write_vlq(len as u32, &mut raw);
                        raw.extend_from_slice(payload);
                        MidiMessage::Other(raw)
                    }
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq().map_err(|e| e.shifted(base))? as usize;
                let payload = cur.take(len).map_err(|e| e.shifted(base))?;
                let mut raw = vec![status];
                write_vlq(len as u32, &mut raw);
                raw.extend_from_slice(payload);
                MidiMessage::Other(raw)
            }
            0xF1..=0xFE => {
                return Err(MidiError::BadEvent {
                    offset: at,
                    reason: format!("system message {status:#04x} inside a track"),
                });
            }
            _ => {
                running = Some(status);
                let kind = status & 0xF0;
                let channel = status & 0x0F;
                let n_data = if matches!(kind, 0xC0 | 0xD0) { 1 } else { 2 };
                let mut d = [0u8; 2];
                let mut filled = 0;
                if let Some(b) = first_data {
                    d[0] = b;
                    filled = 1;
                }
                while filled < n_data {
                    let off = base + cur.pos;
                    d[filled] = data_byte(cur.u8().map_err(|e| e.shifted(base))?, off)?;
                    filled += 1;
                }
                match kind {
                    0x80 => MidiMessage::NoteOff {
                        channel,
                        key: d[0],
                        velocity: d[1],
                    },
                    0x90 => MidiMessage::NoteOn {
                        channel,
                        key: d[0],
                        velocity: d[1],
                    },
                    0xB0 => MidiMessage::ControlChange {
                        channel,
                        controller: d[0],
                        value: d[1],
                    },
                    _ => MidiMessage::Other(
                        std::iter::once(status)
                            .chain(d[..n_data].iter().copied())
                            .collect(),
                    ),
                }
            }
        };
        events.push(MidiEvent {
            delta_ticks,
            message,
        });
    }
    Ok(events)
}

/// Parses a format 0 or 1 file with metrical time division. Events keep
/// file order per track; absolute ticks come from summed deltas and seconds
/// from the tempo map of all tracks.
pub fn parse_smf(bytes: &[u8]) -> Result<Smf, MidiError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(4)
        .map_err(|_| MidiError::BadHeader("file shorter than a header".into()))?;
    if magic != b"MThd" {
        return Err(MidiError::BadHeader("missing MThd".into()));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::BadHeader(format!("header length {header_len}")));
    }
    let format = cur.u16()?;
    let ntracks = cur.u16()?;
    let division = cur.u16()?;
    cur.take(header_len - 6)?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format!("SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::BadHeader("zero ticks per quarter".into()));
    }

    let mut raw_tracks = Vec::with_capacity(ntracks as usize);
    while raw_tracks.len() < ntracks as usize && cur.pos < bytes.len() {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let base = cur.pos;
        let body = cur.take(len)?;
        if id == b"MTrk" {
            raw_tracks.push(parse_track(body, base)?);
        }
        // alien chunks are skipped
    }
    if raw_tracks.len() < ntracks as usize {
        return Err(MidiError::Truncated {
            offset: bytes.len(),
        });
    }

    let tempo = TempoMap::from_tracks(&raw_tracks, division);
    let tracks = raw_tracks
        .into_iter()
        .map(|events| {
            let mut tick = 0u64;
            events
                .into_iter()
                .map(|event| {
                    tick += u64::from(event.delta_ticks);
                    TimedEvent {
                        tick,
                        seconds: tempo.seconds(tick),
                        event,
                    }
                })
                .collect()
        })
        .collect();
    Ok(Smf {
        format,
        ticks_per_quarter: division,
        tracks,
    })
}

/// Duration of `ticks` at a constant tempo.
pub fn ticks_to_seconds(ticks: u64, us_per_quarter: u32, ticks_per_quarter: u16) -> f64 {
    ticks as f64 * f64::from(us_per_quarter) / f64::from(ticks_per_quarter) / 1e6
}

/// Piecewise-linear tick → seconds map.
struct TempoMap {
    tpq: u16,
    // (tick, seconds at tick, µs per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn from_tracks(tracks: &[Vec<MidiEvent>], tpq: u16) -> Self {
        let mut changes: Vec<(u64, u32)> = Vec::new();
        for track in tracks {
            let mut tick = 0u64;
            for e in track {
                tick += u64::from(e.delta_ticks);
                if let MidiMessage::Tempo { us_per_quarter } = e.message {
                    changes.push((tick, us_per_quarter));
                }
            }
        }
        changes.sort_by_key(|c| c.0);
        let mut segments = vec![(0u64, 0.0, DEFAULT_TEMPO_US)];
        for (tick, us) in changes {
            let &(t0, s0, us0) = segments.last().expect("non-empty");
            let s = s0 + ticks_to_seconds(tick - t0, us0, tpq);
            if tick == t0 {
                segments.pop();
            }
            segments.push((tick, s, us.max(1)));
        }
        Self { tpq, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, us) = self.segments[idx];
        s0 + ticks_to_seconds(tick - t0, us, self.tpq)
    }
}

/// Serialises tracks of delta-timed events. Every channel message carries
/// an explicit status byte.
pub fn write_smf(ticks_per_quarter: u16, tracks: &[Vec<MidiEvent>]) -> Vec<u8> {
    let format: u16 = if tracks.len() <= 1 { 0 } else { 1 };
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&format.to_be_bytes());
    out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    for track in tracks {
        let mut body = Vec::new();
        for e in track {
            write_vlq(e.delta_ticks, &mut body);
            match &e.message {
                MidiMessage::NoteOff {
                    channel,
                    key,
                    velocity,
                } => {
                    body.extend_from_slice(&[0x80 | (channel & 0x0F), key & 0x7F, velocity & 0x7F])
                }
                MidiMessage::NoteOn {
                    channel,
                    key,
                    velocity,
                } => {
                    body.extend_from_slice(&[0x90 | (channel & 0x0F), key & 0x7F, velocity & 0x7F])
                }
                MidiMessage::ControlChange {
                    channel,
                    controller,
                    value,
                } => body.extend_from_slice(&[
                    0xB0 | (channel & 0x0F),
                    controller & 0x7F,
                    value & 0x7F,
                ]),
                MidiMessage::Tempo { us_per_quarter } => {
                    let b = us_per_quarter.to_be_bytes();
                    body.extend_from_slice(&[0xFF, 0x51, 0x03, b[1], b[2], b[3]]);
                }
                MidiMessage::EndOfTrack => body.extend_from_slice(&[0xFF, 0x2F, 0x00]),
                MidiMessage::Other(raw) => body.extend_from_slice(raw),
            }
        }
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    out
}
