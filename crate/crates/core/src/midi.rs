//! Standard MIDI File ingestion, sustain-pedal offset elongation, and
//! note export.
//!
//! The parser reads format 0 and 1 files: running status, variable-length
//! deltas, tempo maps, note-on with velocity 0 as note-off. Sustain pedal
//! (CC64) crossings at value 64 open and close `PedalInterval`s. The
//! writer emits format 0 at 480 ticks per quarter and a fixed 120 bpm, so
//! one tick is 1/960 s.

use crate::error::Error;
use crate::noterep::NoteEvent;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Span during which the sustain pedal is held down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedalInterval {
    pub press_time: f64,
    pub release_time: f64,
}

impl PedalInterval {
    pub fn new(press_time: f64, release_time: f64) -> Result<Self> {
        if !(release_time > press_time && press_time >= 0.0) {
            return Err(Error::range(format!(
                "pedal interval [{press_time}, {release_time}] must have release > press >= 0"
            )));
        }
        Ok(PedalInterval {
            press_time,
            release_time,
        })
    }

    pub fn contains_offset(&self, t: f64) -> bool {
        self.press_time <= t && t < self.release_time
    }
}

/// One performance: notes sorted by (onset, pitch), sorted non-overlapping
/// pedal intervals, and total duration in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub notes: Vec<NoteEvent>,
    pub pedals: Vec<PedalInterval>,
    pub duration: f64,
}

impl Performance {
    pub fn new(mut notes: Vec<NoteEvent>, pedals: Vec<PedalInterval>, duration: f64) -> Result<Self> {
        notes.sort_by(|a, b| {
            (a.onset_time, a.pitch, a.offset_time)
                .partial_cmp(&(b.onset_time, b.pitch, b.offset_time))
                .expect("note times are finite")
        });
        for n in &notes {
            if n.offset_time > duration {
                return Err(Error::range(format!(
                    "note offset {} exceeds performance duration {duration}",
                    n.offset_time
                )));
            }
        }
        for w in pedals.windows(2) {
            if w[1].press_time < w[0].release_time {
                return Err(Error::range(format!(
                    "pedal intervals overlap: [{}, {}] then [{}, {}]",
                    w[0].press_time, w[0].release_time, w[1].press_time, w[1].release_time
                )));
            }
        }
        Ok(Performance {
            notes,
            pedals,
            duration,
        })
    }

    pub fn empty() -> Self {
        Performance {
            notes: Vec::new(),
            pedals: Vec::new(),
            duration: 0.0,
        }
    }
}

/// Recoverable oddities found while parsing; counts, not errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// Note-ons still open at end of track, closed at the track end.
    pub dangling_note_ons: usize,
    /// Note-off without a matching note-on.
    pub orphan_note_offs: usize,
    /// Notes whose on and off land on the same instant; dropped.
    pub zero_length_notes: usize,
    /// Pedal still down at end of track, released at the track end.
    pub unclosed_pedals: usize,
    /// Notes outside the 88-key range; dropped.
    pub out_of_range_notes: usize,
}

impl ParseWarnings {
    pub fn total(&self) -> usize {
        self.dangling_note_ons
            + self.orphan_note_offs
            + self.zero_length_notes
            + self.unclosed_pedals
            + self.out_of_range_notes
    }
}

impl std::fmt::Display for ParseWarnings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "dangling note-ons: {}, orphan note-offs: {}, zero-length notes: {}, \
             unclosed pedals: {}, out-of-range notes: {}",
            self.dangling_note_ons,
            self.orphan_note_offs,
            self.zero_length_notes,
            self.unclosed_pedals,
            self.out_of_range_notes
        )
    }
}

const DEFAULT_TEMPO: u32 = 500_000; // microseconds per quarter note, 120 bpm
const WRITE_TPQ: u16 = 480;
/// Ticks per second at the fixed write tempo.
const WRITE_TICKS_PER_SEC: f64 = WRITE_TPQ as f64 * 1_000_000.0 / DEFAULT_TEMPO as f64;

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::MidiParse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes([
            self.u8()?,
            self.u8()?,
            self.u8()?,
            self.u8()?,
        ]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!("chunk claims {n} bytes past end of data")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Variable-length quantity, at most 4 bytes.
    fn vlq(&mut self) -> Result<u32> {
        let mut value: u32 = 0;
        for i in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                break;
            }
        }
        Err(self.err("variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Debug, Clone, Copy)]
enum TrackEvent {
    Tempo(u32),
    NoteOff { pitch: u8 },
    NoteOn { pitch: u8, velocity: u8 },
    Sustain { value: u8 },
    EndOfTrack,
}

impl TrackEvent {
    /// Merge priority at equal ticks: tempo first so it applies to
    /// same-tick events, then note-offs and releases so same-tick
    /// restarts pair up.
    fn priority(&self) -> u8 {
        match self {
            TrackEvent::Tempo(_) => 0,
            TrackEvent::NoteOff { .. } => 1,
            TrackEvent::Sustain { .. } => 2,
            TrackEvent::NoteOn { .. } => 3,
            TrackEvent::EndOfTrack => 4,
        }
    }
}

fn parse_track(r: &mut Reader, out: &mut Vec<(u64, TrackEvent)>) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    loop {
        let delta = r.vlq()? as u64;
        tick += delta;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            if first < 0xf0 {
                running_status = Some(first);
            }
            first
        } else {
            // data byte: reuse running status and rewind one byte
            r.pos -= 1;
            running_status.ok_or_else(|| r.err("data byte without running status"))?
        };
        match status {
            0xff => {
                let meta_type = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                running_status = None;
                match meta_type {
                    0x2f => {
                        out.push((tick, TrackEvent::EndOfTrack));
                        return Ok(());
                    }
                    0x51 => {
                        if data.len() != 3 {
                            return Err(r.err("tempo meta event must carry 3 bytes"));
                        }
                        let us = ((data[0] as u32) << 16) | ((data[1] as u32) << 8) | data[2] as u32;
                        out.push((tick, TrackEvent::Tempo(us)));
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
                running_status = None;
            }
            _ => {
                let kind = status & 0xf0;
                match kind {
                    0x80 => {
                        let pitch = r.u8()? & 0x7f;
                        let _vel = r.u8()?;
                        out.push((tick, TrackEvent::NoteOff { pitch }));
                    }
                    0x90 => {
                        let pitch = r.u8()? & 0x7f;
                        let velocity = r.u8()? & 0x7f;
                        if velocity == 0 {
                            out.push((tick, TrackEvent::NoteOff { pitch }));
                        } else {
                            out.push((tick, TrackEvent::NoteOn { pitch, velocity }));
                        }
                    }
                    0xb0 => {
                        let controller = r.u8()? & 0x7f;
                        let value = r.u8()? & 0x7f;
                        if controller == 64 {
                            out.push((tick, TrackEvent::Sustain { value }));
                        }
                    }
                    0xa0 | 0xe0 => {
                        r.u8()?;
                        r.u8()?;
                    }
                    0xc0 | 0xd0 => {
                        r.u8()?;
                    }
                    _ => return Err(r.err(format!("unknown status byte 0x{status:02x}"))),
                }
            }
        }
    }
}

/// Parse an SMF (format 0 or 1) into a `Performance` plus warning counts.
///
/// All channels are merged; only note and CC64 messages contribute. The
/// tempo map converts ticks to seconds. Same-pitch note-ons pair with
/// note-offs first-in first-out.
pub fn parse_midi(bytes: &[u8]) -> Result<(Performance, ParseWarnings)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != b"MThd" {
        return Err(Error::MidiParse {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err("header chunk shorter than 6 bytes"));
    }
    let format = r.u16()?;
    let n_tracks = r.u16()? as usize;
    let division = r.u16()?;
    r.take(header_len - 6)?;
    if format > 1 {
        return Err(r.err(format!("unsupported SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(r.err("SMPTE time division is not supported"));
    }
    if division == 0 {
        return Err(r.err("time division must be positive"));
    }

    let mut events: Vec<(u64, TrackEvent)> = Vec::new();
    for _ in 0..n_tracks {
        if r.take(4)? != b"MTrk" {
            return Err(Error::MidiParse {
                offset: r.pos - 4,
                message: "expected MTrk chunk".into(),
            });
        }
        let len = r.u32()? as usize;
        let track_end = r.pos + len;
        if track_end > bytes.len() {
            return Err(r.err("track length exceeds file size"));
        }
        parse_track(&mut r, &mut events)?;
        if r.pos != track_end {
            // trust the end-of-track event, but do not read past the chunk
            if r.pos > track_end {
                return Err(r.err("track events overrun the declared chunk length"));
            }
            r.pos = track_end;
        }
    }

    events.sort_by_key(|&(tick, ev)| (tick, ev.priority()));

    // tick -> seconds with the tempo map
    let tpq = division as f64;
    let mut warnings = ParseWarnings::default();
    let mut notes: Vec<NoteEvent> = Vec::new();
    let mut pedals: Vec<PedalInterval> = Vec::new();
    let mut open_notes: Vec<std::collections::VecDeque<(f64, u8)>> =
        vec![std::collections::VecDeque::new(); 128];
    let mut pedal_down: Option<f64> = None;
    let mut us_per_qn = DEFAULT_TEMPO;
    let mut last_tick: u64 = 0;
    let mut last_sec: f64 = 0.0;
    let mut end_sec: f64 = 0.0;

    for &(tick, ev) in &events {
        let sec = last_sec + (tick - last_tick) as f64 * us_per_qn as f64 / (1e6 * tpq);
        last_tick = tick;
        last_sec = sec;
        end_sec = end_sec.max(sec);
        match ev {
            TrackEvent::Tempo(us) => us_per_qn = us.max(1),
            TrackEvent::NoteOn { pitch, velocity } => {
                open_notes[pitch as usize].push_back((sec, velocity));
            }
            TrackEvent::NoteOff { pitch } => match open_notes[pitch as usize].pop_front() {
                Some((onset, velocity)) => {
                    push_note(&mut notes, &mut warnings, pitch, onset, sec, velocity);
                }
                None => warnings.orphan_note_offs += 1,
            },
            TrackEvent::Sustain { value } => {
                if value >= 64 {
                    if pedal_down.is_none() {
                        pedal_down = Some(sec);
                    }
                } else if let Some(press) = pedal_down.take() {
                    if sec > press {
                        pedals.push(PedalInterval {
                            press_time: press,
                            release_time: sec,
                        });
                    }
                }
            }
            TrackEvent::EndOfTrack => {}
        }
    }

    for pitch in 0..128u8 {
        while let Some((onset, velocity)) = open_notes[pitch as usize].pop_front() {
            warnings.dangling_note_ons += 1;
            push_note(&mut notes, &mut warnings, pitch, onset, end_sec, velocity);
        }
    }
    if let Some(press) = pedal_down {
        warnings.unclosed_pedals += 1;
        if end_sec > press {
            pedals.push(PedalInterval {
                press_time: press,
                release_time: end_sec,
            });
        }
    }

    let perf = Performance::new(notes, pedals, end_sec)?;
    Ok((perf, warnings))
}

fn push_note(
    notes: &mut Vec<NoteEvent>,
    warnings: &mut ParseWarnings,
    pitch: u8,
    onset: f64,
    offset: f64,
    velocity: u8,
) {
    if offset <= onset {
        warnings.zero_length_notes += 1;
        return;
    }
    match NoteEvent::new(pitch, onset, offset, velocity.max(1)) {
        Ok(n) => notes.push(n),
        Err(_) => warnings.out_of_range_notes += 1,
    }
}

/// Extend note offsets held by the sustain pedal.
///
/// A note whose offset lies inside a pedal interval (press inclusive,
/// release exclusive) rings until the pedal release, the next strike of
/// the same pitch, or the end of the performance, whichever comes first.
/// Offsets never move earlier; onsets, pitches, and velocities are
/// untouched. Applying this twice changes nothing.
pub fn elongate_offsets(perf: &Performance) -> Performance {
    // next strike per note: smallest same-pitch onset after this onset
    let mut by_pitch: Vec<Vec<f64>> = vec![Vec::new(); 128];
    for n in &perf.notes {
        by_pitch[n.pitch as usize].push(n.onset_time);
    }
    for v in &mut by_pitch {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    let notes = perf
        .notes
        .iter()
        .map(|n| {
            let inside = perf
                .pedals
                .iter()
                .find(|p| p.contains_offset(n.offset_time));
            let Some(pedal) = inside else {
                return *n;
            };
            let onsets = &by_pitch[n.pitch as usize];
            let next_strike = onsets
                .iter()
                .copied()
                .find(|&o| o > n.onset_time)
                .unwrap_or(f64::INFINITY);
            let target = pedal
                .release_time
                .min(next_strike)
                .min(perf.duration);
            NoteEvent {
                offset_time: n.offset_time.max(target),
                ..*n
            }
        })
        .collect();
    Performance::new(notes, perf.pedals.clone(), perf.duration)
        .expect("elongation keeps offsets within duration")
}

fn push_vlq(out: &mut Vec<u8>, value: u64) {
    let mut buf = [0u8; 8];
    let mut i = 0;
    let mut v = value;
    loop {
        buf[i] = (v & 0x7f) as u8;
        v >>= 7;
        i += 1;
        if v == 0 {
            break;
        }
    }
    while i > 1 {
        i -= 1;
        out.push(buf[i] | 0x80);
    }
    out.push(buf[0]);
}

#[derive(Debug, Clone, Copy)]
enum WriteEvent {
    NoteOff(u8),
    SustainOff,
    SustainOn,
    NoteOn(u8, u8),
}

impl WriteEvent {
    fn priority(&self) -> u8 {
        match self {
            WriteEvent::NoteOff(_) => 0,
            WriteEvent::SustainOff => 1,
            WriteEvent::SustainOn => 2,
            WriteEvent::NoteOn(..) => 3,
        }
    }

    fn bytes(&self) -> [u8; 3] {
        match *self {
            WriteEvent::NoteOff(p) => [0x80, p, 64],
            WriteEvent::SustainOff => [0xb0, 64, 0],
            WriteEvent::SustainOn => [0xb0, 64, 127],
            WriteEvent::NoteOn(p, v) => [0x90, p, v],
        }
    }
}

fn assemble_smf(mut events: Vec<(u64, WriteEvent)>, end_tick: u64) -> Vec<u8> {
    events.sort_by_key(|&(tick, ev)| (tick, ev.priority()));

    let mut track: Vec<u8> = Vec::new();
    // fixed tempo so tick timing is self-describing
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&DEFAULT_TEMPO.to_be_bytes()[1..]);
    let mut cursor = 0u64;
    for (tick, ev) in events {
        push_vlq(&mut track, tick - cursor);
        cursor = tick;
        track.extend_from_slice(&ev.bytes());
    }
    push_vlq(&mut track, end_tick.saturating_sub(cursor));
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

fn note_ticks(n: &NoteEvent) -> (u64, u64) {
    let on = (n.onset_time * WRITE_TICKS_PER_SEC).round() as u64;
    let off = (n.offset_time * WRITE_TICKS_PER_SEC).round() as u64;
    // zero-length after quantization would be dropped on re-parse
    (on, off.max(on + 1))
}

/// Serialize notes as a format 0 SMF at 480 ticks per quarter, 120 bpm.
///
/// Re-parsing reproduces the note set with timing within half a tick
/// (about 0.5 ms); notes shorter than a tick are stretched to one tick.
pub fn write_midi(notes: &[NoteEvent]) -> Vec<u8> {
    let mut events = Vec::with_capacity(notes.len() * 2);
    let mut end_tick = 0u64;
    for n in notes {
        let (on, off) = note_ticks(n);
        events.push((on, WriteEvent::NoteOn(n.pitch, n.velocity)));
        events.push((off, WriteEvent::NoteOff(n.pitch)));
        end_tick = end_tick.max(off);
    }
    assemble_smf(events, end_tick)
}

/// Serialize a full performance, pedal intervals included, so a re-parse
/// followed by `elongate_offsets` reproduces the elongated note set.
pub fn write_performance(perf: &Performance) -> Vec<u8> {
    let mut events = Vec::with_capacity(perf.notes.len() * 2 + perf.pedals.len() * 2);
    let mut end_tick = (perf.duration * WRITE_TICKS_PER_SEC).round() as u64;
    for n in &perf.notes {
        let (on, off) = note_ticks(n);
        events.push((on, WriteEvent::NoteOn(n.pitch, n.velocity)));
        events.push((off, WriteEvent::NoteOff(n.pitch)));
        end_tick = end_tick.max(off);
    }
    for p in &perf.pedals {
        let press = (p.press_time * WRITE_TICKS_PER_SEC).round() as u64;
        let release = (p.release_time * WRITE_TICKS_PER_SEC).round() as u64;
        events.push((press, WriteEvent::SustainOn));
        events.push((release.max(press + 1), WriteEvent::SustainOff));
        end_tick = end_tick.max(release.max(press + 1));
    }
    assemble_smf(events, end_tick)
}
