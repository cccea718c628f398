//! Note-state representations and conversion from note events to
//! frame-level state rolls.
//!
//! A note on one key moves through phases: it starts (onset), rings
//! (sustain), may be struck again while still ringing under the pedal
//! (re-onset), and stops (offset). Each representation keeps a subset of
//! those phases as distinct per-frame states; `encode_states` rasterizes
//! a performance onto the frame grid under the chosen representation.

use crate::error::Error;
use crate::Result;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Number of piano keys / roll columns in the full-size setting.
pub const N_KEYS: usize = 88;
/// Lowest MIDI pitch on the 88-key piano (A0).
pub const MIDI_PITCH_MIN: u8 = 21;
/// Highest MIDI pitch on the 88-key piano (C8).
pub const MIDI_PITCH_MAX: u8 = 108;

/// One note: key, time span in seconds, strike velocity.
///
/// Velocity is carried through from MIDI for fidelity but is not used by
/// the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// MIDI pitch in `[21, 108]`.
    pub pitch: u8,
    pub onset_time: f64,
    pub offset_time: f64,
    /// MIDI velocity in `[1, 127]`.
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset_time: f64, offset_time: f64, velocity: u8) -> Result<Self> {
        if !(MIDI_PITCH_MIN..=MIDI_PITCH_MAX).contains(&pitch) {
            return Err(Error::range(format!(
                "pitch {pitch} outside the 88-key range [{MIDI_PITCH_MIN}, {MIDI_PITCH_MAX}]"
            )));
        }
        if !(onset_time >= 0.0 && offset_time > onset_time) {
            return Err(Error::range(format!(
                "note times must satisfy 0 <= onset < offset, got [{onset_time}, {offset_time}]"
            )));
        }
        if !(1..=127).contains(&velocity) {
            return Err(Error::range(format!("velocity {velocity} outside [1, 127]")));
        }
        Ok(NoteEvent {
            pitch,
            onset_time,
            offset_time,
            velocity,
        })
    }

    /// Key index `p` in `[0, 87]` (pitch 21 maps to 0).
    pub fn key_index(&self) -> usize {
        (self.pitch - MIDI_PITCH_MIN) as usize
    }

    pub fn duration(&self) -> f64 {
        self.offset_time - self.onset_time
    }
}

/// Uniform frame grid: `hop / sample_rate` seconds per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub sample_rate: u32,
    /// Samples per frame hop.
    pub hop: u32,
    pub n_frames: usize,
}

impl FrameGrid {
    pub fn new(sample_rate: u32, hop: u32, n_frames: usize) -> Result<Self> {
        if sample_rate == 0 || hop == 0 {
            return Err(Error::config("sample_rate and hop must be positive"));
        }
        Ok(FrameGrid {
            sample_rate,
            hop,
            n_frames,
        })
    }

    /// Seconds per frame; 512/16000 gives 32 ms exactly.
    pub fn frame_duration(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Frame index containing time `t`: `floor(t * sample_rate / hop)`.
    pub fn frame_of(&self, t: f64) -> usize {
        (t * self.sample_rate as f64 / self.hop as f64).floor() as usize
    }

    /// Start time of frame `f`.
    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 * self.frame_duration()
    }

    /// Grid covering `duration` seconds: `1 + floor(duration * sr / hop)`
    /// frames, the same count the feature extractor produces for audio of
    /// that length.
    pub fn for_duration(sample_rate: u32, hop: u32, duration: f64) -> Result<Self> {
        if sample_rate == 0 || hop == 0 {
            return Err(Error::config("sample_rate and hop must be positive"));
        }
        let n = 1 + (duration * sample_rate as f64 / hop as f64).floor() as usize;
        FrameGrid::new(sample_rate, hop, n)
    }
}

/// Semantic label of one frame-level state, across all representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateLabel {
    Off,
    /// Binary-only: any sounding frame.
    On,
    Onset,
    Sustain,
    Reonset,
    Offset,
}

impl StateLabel {
    pub fn name(&self) -> &'static str {
        match self {
            StateLabel::Off => "off",
            StateLabel::On => "on",
            StateLabel::Onset => "onset",
            StateLabel::Sustain => "sustain",
            StateLabel::Reonset => "re-onset",
            StateLabel::Offset => "offset",
        }
    }

    /// Whether the key is sounding during a frame with this label.
    pub fn is_sounding(&self) -> bool {
        matches!(
            self,
            StateLabel::On | StateLabel::Onset | StateLabel::Sustain | StateLabel::Reonset
        )
    }

    /// Whether this label starts a note.
    pub fn starts_note(&self) -> bool {
        matches!(self, StateLabel::On | StateLabel::Onset | StateLabel::Reonset)
    }
}

/// The five note-state representations.
///
/// State index 0 is always `off` and index 1 is always the note-starting
/// state (`on` or `onset`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// `[off, on]`
    Binary,
    /// `[off, onset, sustain]`
    Three,
    /// `[off, onset, sustain, offset]`
    FourOffset,
    /// `[off, onset, sustain, re-onset]`
    FourReonset,
    /// `[off, onset, sustain, re-onset, offset]`
    Five,
}

impl Representation {
    pub const ALL: [Representation; 5] = [
        Representation::Binary,
        Representation::Three,
        Representation::FourOffset,
        Representation::FourReonset,
        Representation::Five,
    ];

    /// Ordered state list for this representation.
    pub fn state_set(&self) -> &'static [StateLabel] {
        use StateLabel::*;
        match self {
            Representation::Binary => &[Off, On],
            Representation::Three => &[Off, Onset, Sustain],
            Representation::FourOffset => &[Off, Onset, Sustain, Offset],
            Representation::FourReonset => &[Off, Onset, Sustain, Reonset],
            Representation::Five => &[Off, Onset, Sustain, Reonset, Offset],
        }
    }

    /// Ordered state names, matching `state_set`.
    pub fn state_names(&self) -> Vec<&'static str> {
        self.state_set().iter().map(|s| s.name()).collect()
    }

    /// Number of states `S`.
    pub fn n_states(&self) -> usize {
        self.state_set().len()
    }

    pub fn label_of(&self, index: usize) -> Option<StateLabel> {
        self.state_set().get(index).copied()
    }

    pub fn index_of(&self, label: StateLabel) -> Option<usize> {
        self.state_set().iter().position(|&s| s == label)
    }

    /// Project a full (Five-semantics) label into this representation:
    /// `re-onset` degrades to `onset`, `offset` to `off`, and every
    /// sounding label to `on` under Binary.
    pub fn project(&self, label: StateLabel) -> StateLabel {
        use StateLabel::*;
        match self {
            Representation::Binary => {
                if label.is_sounding() || label == Onset {
                    On
                } else {
                    Off
                }
            }
            Representation::Three => match label {
                Reonset => Onset,
                Offset => Off,
                On => Onset,
                other => other,
            },
            Representation::FourOffset => match label {
                Reonset => Onset,
                On => Onset,
                other => other,
            },
            Representation::FourReonset => match label {
                Offset => Off,
                On => Onset,
                other => other,
            },
            Representation::Five => match label {
                On => Onset,
                other => other,
            },
        }
    }

    /// Whether state index `i` marks a sounding frame.
    pub fn is_sounding(&self, index: usize) -> bool {
        self.label_of(index).map_or(false, |l| l.is_sounding())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Representation::Binary => "binary",
            Representation::Three => "three",
            Representation::FourOffset => "four-offset",
            Representation::FourReonset => "four-reonset",
            Representation::Five => "five",
        }
    }

    /// Stable one-byte code used by the binary dump formats.
    pub fn code(&self) -> u8 {
        match self {
            Representation::Binary => 0,
            Representation::Three => 1,
            Representation::FourOffset => 2,
            Representation::FourReonset => 3,
            Representation::Five => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Representation> {
        Representation::ALL.iter().copied().find(|r| r.code() == code)
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "2" => Ok(Representation::Binary),
            "three" | "3" => Ok(Representation::Three),
            "four-offset" | "four_offset" | "4o" => Ok(Representation::FourOffset),
            "four-reonset" | "four_reonset" | "4r" => Ok(Representation::FourReonset),
            "five" | "5" => Ok(Representation::Five),
            other => Err(Error::config(format!(
                "unknown representation '{other}' (expected binary|three|four-offset|four-reonset|five)"
            ))),
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-frame, per-key state indices under one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRoll {
    pub grid: FrameGrid,
    pub rep: Representation,
    /// `T x n_keys`, entries in `[0, S)`.
    pub states: Array2<u8>,
}

impl StateRoll {
    pub fn new(grid: FrameGrid, rep: Representation, states: Array2<u8>) -> Result<Self> {
        if states.nrows() != grid.n_frames {
            return Err(Error::shape(format!(
                "roll has {} rows but grid has {} frames",
                states.nrows(),
                grid.n_frames
            )));
        }
        let s = rep.n_states() as u8;
        if states.iter().any(|&v| v >= s) {
            return Err(Error::range(format!(
                "state index out of range for {} ({} states)",
                rep.name(),
                s
            )));
        }
        Ok(StateRoll { grid, rep, states })
    }

    pub fn zeros(grid: FrameGrid, rep: Representation, n_keys: usize) -> Self {
        StateRoll {
            grid,
            rep,
            states: Array2::zeros((grid.n_frames, n_keys)),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_keys(&self) -> usize {
        self.states.ncols()
    }

    pub fn label_at(&self, frame: usize, key: usize) -> StateLabel {
        self.rep
            .label_of(self.states[[frame, key]] as usize)
            .expect("roll entries are valid state indices")
    }

    /// Check the temporal validity invariants: `sustain` only continues a
    /// sounding state, and `offset` only terminates one.
    pub fn validate_transitions(&self) -> Result<()> {
        use StateLabel::*;
        for key in 0..self.n_keys() {
            let mut prev = Off;
            for frame in 0..self.n_frames() {
                let cur = self.label_at(frame, key);
                match cur {
                    Sustain if !matches!(prev, Onset | Reonset | Sustain) => {
                        return Err(Error::range(format!(
                            "sustain at frame {frame}, key {key} follows {}",
                            prev.name()
                        )));
                    }
                    Offset if !matches!(prev, Onset | Reonset | Sustain | Offset) => {
                        return Err(Error::range(format!(
                            "offset at frame {frame}, key {key} follows {}",
                            prev.name()
                        )));
                    }
                    _ => {}
                }
                prev = cur;
            }
        }
        Ok(())
    }

    /// Count of frames labeled `re-onset`.
    pub fn n_reonsets(&self) -> usize {
        match self.rep.index_of(StateLabel::Reonset) {
            Some(idx) => self.states.iter().filter(|&&v| v as usize == idx).count(),
            None => 0,
        }
    }
}

/// Rasterize a performance onto `grid` under `rep`, producing a roll with
/// `n_keys` columns.
///
/// Notes must already be pedal-elongated (see `midi::elongate_offsets`).
/// Same-key overlaps are truncated at the next strike, which is what
/// produces `re-onset` labels. Notes that quantize to zero length keep
/// their onset frame. A note whose offset quantizes exactly to the frame
/// past the end of the grid sustains through the last frame and drops the
/// offset label.
pub fn encode_states(
    perf: &crate::midi::Performance,
    rep: Representation,
    grid: FrameGrid,
    n_keys: usize,
) -> Result<StateRoll> {
    let t_max = grid.n_frames;
    // Quantize and bucket per key.
    let mut per_key: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_keys];
    for note in &perf.notes {
        let key = note.key_index();
        if key >= n_keys {
            return Err(Error::range(format!(
                "note pitch {} (key {key}) outside the {n_keys}-key roll",
                note.pitch
            )));
        }
        let a = grid.frame_of(note.onset_time);
        let b = grid.frame_of(note.offset_time);
        if a >= t_max || b > t_max {
            return Err(Error::range(format!(
                "note [{}, {}] quantizes to frames [{a}, {b}] outside grid of {t_max}",
                note.onset_time, note.offset_time
            )));
        }
        per_key[key].push((a, b));
    }

    let mut roll = StateRoll::zeros(grid, rep, n_keys);
    for (key, notes) in per_key.iter_mut().enumerate() {
        notes.sort_unstable();
        // Most recent note starting strictly before the current one. Notes
        // that quantize to the same onset never make each other a re-onset.
        let mut last_distinct: Option<usize> = None;
        for i in 0..notes.len() {
            let (a, b) = notes[i];
            if i > 0 && notes[i - 1].0 < a {
                last_distinct = Some(i - 1);
            }
            let next_a = notes.get(i + 1).map(|&(na, _)| na);
            // Truncate at the next strike on the same key.
            let end = match next_a {
                Some(na) if na < b => na,
                _ => b,
            };
            // junction: an earlier note is still sounding at frame a - 1,
            // i.e. the last distinct predecessor reaches this onset frame
            let junction_in = last_distinct.is_some_and(|j| notes[j].1 >= a);
            let start_label = if junction_in {
                StateLabel::Reonset
            } else {
                StateLabel::Onset
            };
            set_label(&mut roll, a, key, start_label);
            for f in (a + 1)..end {
                set_label(&mut roll, f, key, StateLabel::Sustain);
            }
            // Offset label only when the note has interior length, fits the
            // grid, and no later note strikes the same frame.
            let next_starts_here = next_a == Some(end);
            if end > a && end < t_max && !next_starts_here {
                set_label(&mut roll, end, key, StateLabel::Offset);
            }
        }
    }
    Ok(roll)
}

fn set_label(roll: &mut StateRoll, frame: usize, key: usize, label: StateLabel) {
    let projected = roll.rep.project(label);
    let idx = roll
        .rep
        .index_of(projected)
        .expect("projection lands inside the representation");
    roll.states[[frame, key]] = idx as u8;
}

/// Ordered state names of a representation.
///
/// Thin wrapper kept as a named operation so callers do not depend on the
/// enum layout.
pub fn state_set(rep: Representation) -> Vec<&'static str> {
    rep.state_names()
}

/// Binary roll format: magic, sample_rate u32, hop u32, T u32, n_keys
/// u32, rep code u8, n_states u8, then T*n_keys row-major state bytes.
/// All integers little-endian.
pub const ROLL_MAGIC: &[u8; 8] = b"KRSROLL1";

impl StateRoll {
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        use crate::dump;
        dump::write_magic(w, ROLL_MAGIC)?;
        dump::write_u32(w, self.grid.sample_rate)?;
        dump::write_u32(w, self.grid.hop)?;
        dump::write_u32(w, self.grid.n_frames as u32)?;
        dump::write_u32(w, self.n_keys() as u32)?;
        dump::write_u8(w, self.rep.code())?;
        dump::write_u8(w, self.rep.n_states() as u8)?;
        let data = self
            .states
            .as_slice()
            .expect("roll storage is contiguous row-major");
        w.write_all(data)?;
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<StateRoll> {
        use crate::dump;
        dump::expect_magic(r, ROLL_MAGIC, "state roll")?;
        let sample_rate = dump::read_u32(r)?;
        let hop = dump::read_u32(r)?;
        let n_frames = dump::read_u32(r)? as usize;
        let n_keys = dump::read_u32(r)? as usize;
        let code = dump::read_u8(r)?;
        let n_states = dump::read_u8(r)?;
        let rep = Representation::from_code(code)
            .ok_or_else(|| Error::format("state roll", format!("unknown rep code {code}")))?;
        if n_states as usize != rep.n_states() {
            return Err(Error::format(
                "state roll",
                format!("state count {n_states} does not match {}", rep.name()),
            ));
        }
        let mut data = vec![0u8; n_frames * n_keys];
        r.read_exact(&mut data)?;
        let states = Array2::from_shape_vec((n_frames, n_keys), data)
            .map_err(|e| Error::shape(e.to_string()))?;
        StateRoll::new(FrameGrid::new(sample_rate, hop, n_frames)?, rep, states)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<StateRoll> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        StateRoll::read_from(&mut f)
    }

    /// Sparse CSV view: one row per frame/key cell that is not `off`,
    /// columns `frame,pitch,state`. Pitch is the MIDI number (key 0 is 21).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,pitch,state\n");
        for f in 0..self.n_frames() {
            for k in 0..self.n_keys() {
                let label = self.label_at(f, k);
                if label != StateLabel::Off {
                    out.push_str(&format!(
                        "{f},{},{}\n",
                        k as u8 + MIDI_PITCH_MIN,
                        label.name()
                    ));
                }
            }
        }
        out
    }
}
