//! Decoding: per-frame state distributions to state rolls, and state
//! rolls to note lists.
//!
//! Greedy decoding takes the per-(frame, pitch) argmax. The pitch-wise
//! beam refines low-confidence spots: wherever the second-best state's
//! probability clears a threshold, the top-2 states of that pitch over a
//! short lookahead window are enumerated and rescored under the
//! autoregressive model (other pitches held fixed), and the best-scoring
//! path is committed. Note extraction follows the state rules: a note
//! opens on a note-starting label after silence, closes on off/offset,
//! and a re-onset closes and reopens in the same frame.

use crate::error::Error;
use crate::Result;
use crate::features::FeatureMatrix;
use crate::model::{acoustic_forward_seq, ar_step, ModelParams, RecurrentState};
use crate::noterep::{
    FrameGrid, NoteEvent, Representation, StateLabel, StateRoll, MIDI_PITCH_MIN, N_KEYS,
};
use crate::scalar::{argmax_tie_low, Scalar};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Per-frame, per-pitch distributions over note states.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor<T: Scalar> {
    pub grid: FrameGrid,
    pub rep: Representation,
    /// frames x pitches x states
    pub probs: Array3<T>,
}

impl<T: Scalar> ProbTensor<T> {
    /// Validates shape against the grid and representation, that every
    /// entry lies in [0, 1], and that each (frame, pitch) row sums to 1
    /// within 1e-6.
    pub fn new(grid: FrameGrid, rep: Representation, probs: Array3<T>) -> Result<Self> {
        let (t, _p, s) = probs.dim();
        if t != grid.n_frames {
            return Err(Error::shape(format!(
                "tensor has {t} frames but grid has {}",
                grid.n_frames
            )));
        }
        if s != rep.n_states() {
            return Err(Error::shape(format!(
                "tensor has {s} states but representation {} has {}",
                rep.name(),
                rep.n_states()
            )));
        }
        for (idx, row) in probs.rows().into_iter().enumerate() {
            let mut sum = 0.0f64;
            for &v in row.iter() {
                let vf = v.to_f64().unwrap();
                if !(0.0..=1.0).contains(&vf) {
                    return Err(Error::range(format!(
                        "probability {vf} outside [0, 1] in row {idx}"
                    )));
                }
                sum += vf;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::range(format!("row {idx} sums to {sum}, not 1")));
            }
        }
        Ok(ProbTensor { grid, rep, probs })
    }

    pub fn n_frames(&self) -> usize {
        self.probs.dim().0
    }

    pub fn n_pitches(&self) -> usize {
        self.probs.dim().1
    }

    /// Most probable state at (frame, pitch) and its probability; ties
    /// resolve to the lowest state index.
    pub fn argmax_conf(&self, t: usize, p: usize) -> (usize, f64) {
        let row = self.probs.index_axis(ndarray::Axis(0), t);
        let row = row.index_axis(ndarray::Axis(0), p);
        let idx = argmax_tie_low(row.iter().cloned());
        (idx, row[idx].to_f64().unwrap())
    }

    /// State indices at (frame, pitch), ordered by descending
    /// probability with ties toward lower indices.
    fn states_by_prob(&self, t: usize, p: usize) -> Vec<usize> {
        let s = self.rep.n_states();
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| {
            self.probs[[t, p, b]]
                .partial_cmp(&self.probs[[t, p, a]])
                .unwrap()
                .then(a.cmp(&b))
        });
        order
    }
}

/// Binary tensor format: magic, sample_rate u32, hop u32, T u32, P u32,
/// rep code u8, n_states u8, then T*P*S probabilities as little-endian
/// f32 in row-major order.
pub const PROB_MAGIC: &[u8; 8] = b"KRPROB1\0";

impl<T: Scalar> ProbTensor<T> {
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        use crate::dump;
        dump::write_magic(w, PROB_MAGIC)?;
        dump::write_u32(w, self.grid.sample_rate)?;
        dump::write_u32(w, self.grid.hop)?;
        dump::write_u32(w, self.n_frames() as u32)?;
        dump::write_u32(w, self.n_pitches() as u32)?;
        dump::write_u8(w, self.rep.code())?;
        dump::write_u8(w, self.rep.n_states() as u8)?;
        let flat: Vec<f32> = self
            .probs
            .iter()
            .map(|v| v.to_f64().unwrap() as f32)
            .collect();
        dump::write_f32s(w, &flat)
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self> {
        use crate::dump;
        dump::expect_magic(r, PROB_MAGIC, "prob tensor")?;
        let sample_rate = dump::read_u32(r)?;
        let hop = dump::read_u32(r)?;
        let t = dump::read_u32(r)? as usize;
        let p = dump::read_u32(r)? as usize;
        let code = dump::read_u8(r)?;
        let rep = Representation::from_code(code)
            .ok_or_else(|| Error::format("prob tensor", format!("unknown rep code {code}")))?;
        let s = dump::read_u8(r)? as usize;
        if s != rep.n_states() {
            return Err(Error::format(
                "prob tensor",
                format!("state count {s} does not match rep {}", rep.name()),
            ));
        }
        let flat = dump::read_f32s(r, t * p * s)?;
        let probs = Array3::from_shape_vec((t, p, s), flat)
            .expect("shape matches length")
            .mapv(|v| crate::scalar::fr::<T>(v as f64));
        ProbTensor::new(FrameGrid::new(sample_rate, hop, t)?, rep, probs)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

/// Per-cell argmax with ties toward the lowest state index.
pub fn greedy_decode<T: Scalar>(pt: &ProbTensor<T>) -> StateRoll {
    let (t_max, p_max, _) = pt.probs.dim();
    let states = Array2::from_shape_fn((t_max, p_max), |(t, p)| {
        pt.argmax_conf(t, p).0 as u8
    });
    StateRoll::new(pt.grid, pt.rep, states).expect("argmax indices are valid states")
}

/// Pitch-wise beam search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamParams {
    /// a (frame, pitch) triggers refinement when its second-best state
    /// probability strictly exceeds this
    pub trigger_threshold: f64,
    /// window length in frames
    pub lookahead: usize,
    /// candidate states per frame inside a window
    pub states_per_frame: usize,
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams {
            trigger_threshold: 0.2,
            lookahead: 5,
            states_per_frame: 2,
        }
    }
}

impl BeamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.trigger_threshold > 0.0 && self.trigger_threshold <= 0.5) {
            return Err(Error::config(
                "trigger_threshold must lie in (0, 0.5]; above 0.5 no row could ever trigger",
            ));
        }
        if self.lookahead == 0 {
            return Err(Error::config("lookahead must be >= 1"));
        }
        if self.states_per_frame < 2 {
            return Err(Error::config("states_per_frame must be >= 2"));
        }
        Ok(())
    }
}

/// Greedy decoding with pitch-wise beam refinement.
///
/// Frames are scanned in ascending order, pitches ascending within a
/// frame. When the second-best probability at (t, p) exceeds the
/// threshold, the `states_per_frame` most probable states of pitch p at
/// each window frame t..t+lookahead-1 (truncated at the sequence end)
/// are enumerated; every combination is scored by the summed
/// log-probability of pitch p's chosen states under a teacher-forced
/// rerun of the model over the window, with all other pitches fixed to
/// the current working roll. The best path (ties toward the greedy one)
/// is committed and frozen: frames it covers are no longer trigger
/// points for that pitch, and later triggers never rewrite it. Cells
/// where no trigger fires keep their greedy values.
///
/// Each window is rescored from the recurrent state accumulated along
/// the working roll up to the trigger frame; commits do not rewrite
/// probability history.
pub fn beam_decode<T: Scalar>(
    pt: &ProbTensor<T>,
    bp: &BeamParams,
    params: &ModelParams<T>,
    features: &FeatureMatrix<T>,
) -> Result<StateRoll> {
    bp.validate()?;
    let cfg = &params.config;
    if cfg.rep != pt.rep {
        return Err(Error::RepMismatch {
            expected: pt.rep.name().into(),
            got: cfg.rep.name().into(),
        });
    }
    if cfg.n_pitches != pt.n_pitches() {
        return Err(Error::shape("model and tensor pitch counts differ"));
    }
    if features.grid != pt.grid {
        return Err(Error::shape("feature grid does not match tensor"));
    }
    let (t_max, p_max, s) = pt.probs.dim();
    let mut roll = greedy_decode(pt);
    let h_a = acoustic_forward_seq(params, features.values.view())?;
    let mut state = RecurrentState::initial(cfg);
    let mut frozen_until = vec![0usize; p_max];
    let k = bp.states_per_frame.min(s);

    for t in 0..t_max {
        for p in 0..p_max {
            if t < frozen_until[p] {
                continue;
            }
            let order = pt.states_by_prob(t, p);
            let second = pt.probs[[t, p, order[1]]].to_f64().unwrap();
            if second <= bp.trigger_threshold {
                continue;
            }
            let win = bp.lookahead.min(t_max - t);
            let choices: Vec<Vec<usize>> = (0..win)
                .map(|w| pt.states_by_prob(t + w, p)[..k].to_vec())
                .collect();

            let score = |digits: &[usize]| -> Result<f64> {
                let mut st = state.clone();
                let mut total = 0.0f64;
                for w in 0..win {
                    let frame = ar_step(params, h_a.row(t + w), &mut st)?;
                    let chosen = choices[w][digits[w]];
                    total += frame[[p, chosen]].to_f64().unwrap().max(1e-12).ln();
                    let mut feed: Vec<u8> =
                        (0..p_max).map(|q| roll.states[[t + w, q]]).collect();
                    feed[p] = chosen as u8;
                    st.set_prev_states(&feed);
                }
                Ok(total)
            };

            // digits all-zero is the greedy path; it wins ties because
            // replacements require a strictly better score
            let mut digits = vec![0usize; win];
            let mut best_digits = digits.clone();
            let mut best_score = score(&digits)?;
            loop {
                // next combination in mixed radix, least significant last
                let mut pos = win;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    digits[pos] += 1;
                    if digits[pos] < choices[pos].len() {
                        break;
                    }
                    digits[pos] = 0;
                }
                if digits.iter().all(|&d| d == 0) {
                    break;
                }
                let sc = score(&digits)?;
                if sc > best_score {
                    best_score = sc;
                    best_digits = digits.clone();
                }
            }
            for w in 0..win {
                roll.states[[t + w, p]] = choices[w][best_digits[w]] as u8;
            }
            frozen_until[p] = t + win;
        }
        // advance the shared recurrent state through the now-final frame
        ar_step(params, h_a.row(t), &mut state)?;
        let feed: Vec<u8> = (0..p_max).map(|q| roll.states[[t, q]]).collect();
        state.set_prev_states(&feed);
    }
    Ok(roll)
}

/// Note rules over a state roll.
///
/// Per pitch column: a note opens at the first note-starting label
/// (onset, on, or re-onset) after a non-sounding stretch and closes at
/// the first off or offset; its interval is [open frame, close frame) in
/// frame-start times. A re-onset or onset while a note is open closes
/// the running note and opens a new one at that frame. A sustain with no
/// open note is ignored, an offset with no open note is a no-op, and a
/// note still open at the end of the roll closes at the final frame
/// boundary. Velocity is fixed at 64.
pub fn states_to_notes(roll: &StateRoll) -> Result<Vec<NoteEvent>> {
    if roll.n_keys() > N_KEYS {
        return Err(Error::shape(format!(
            "roll has {} keys; at most {N_KEYS} supported",
            roll.n_keys()
        )));
    }
    let fd = roll.grid.frame_duration();
    let t_max = roll.grid.n_frames;
    let mut notes: Vec<NoteEvent> = Vec::new();
    for key in 0..roll.n_keys() {
        let pitch = MIDI_PITCH_MIN + key as u8;
        let close = |a: usize, b: usize, notes: &mut Vec<NoteEvent>| -> Result<()> {
            notes.push(NoteEvent::new(pitch, a as f64 * fd, b as f64 * fd, 64)?);
            Ok(())
        };
        let mut open: Option<usize> = None;
        for t in 0..t_max {
            let label = roll.label_at(t, key);
            match open {
                None => {
                    if label.starts_note() {
                        open = Some(t);
                    }
                }
                Some(a) => match label {
                    StateLabel::Off | StateLabel::Offset => {
                        close(a, t, &mut notes)?;
                        open = None;
                    }
                    StateLabel::Onset | StateLabel::Reonset => {
                        close(a, t, &mut notes)?;
                        open = Some(t);
                    }
                    StateLabel::On | StateLabel::Sustain => {}
                },
            }
        }
        if let Some(a) = open {
            close(a, t_max, &mut notes)?;
        }
    }
    notes.sort_by(|a, b| {
        a.onset_time
            .partial_cmp(&b.onset_time)
            .unwrap()
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset_time.partial_cmp(&b.offset_time).unwrap())
    });
    Ok(notes)
}

/// Decoded notes as CSV with header `onset_s,offset_s,pitch`.
pub fn notes_csv(notes: &[NoteEvent]) -> String {
    let mut out = String::from("onset_s,offset_s,pitch\n");
    for n in notes {
        out.push_str(&format!(
            "{:.6},{:.6},{}\n",
            n.onset_time, n.offset_time, n.pitch
        ));
    }
    out
}
