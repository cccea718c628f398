//! Frame-level and note-level transcription scores plus confidence
//! calibration.
//!
//! Note metrics follow the reference evaluation semantics: candidate
//! pairs must agree on pitch and fall inside the tolerance windows
//! (boundaries inclusive), then a maximum bipartite matching picks the
//! pairing; precision divides by estimated notes, recall by reference
//! notes. Offset matching additionally requires the offset error within
//! `max(50 ms, 20% of the reference duration)`.

use crate::decode::ProbTensor;
use crate::error::Error;
use crate::noterep::{NoteEvent, StateRoll};
use crate::scalar::Scalar;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Precision / recall / F1 triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRF {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PRF {
    /// Build from counts; empty denominators give 0 by convention.
    pub fn from_counts(matched: usize, n_est: usize, n_ref: usize) -> PRF {
        let precision = if n_est == 0 {
            0.0
        } else {
            matched as f64 / n_est as f64
        };
        let recall = if n_ref == 0 {
            0.0
        } else {
            matched as f64 / n_ref as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PRF {
            precision,
            recall,
            f1,
        }
    }
}

impl std::fmt::Display for PRF {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "P {:.4} R {:.4} F1 {:.4}",
            self.precision, self.recall, self.f1
        )
    }
}

/// Frame scores: a (frame, key) cell is positive when its state sounds.
pub fn frame_metrics(reference: &StateRoll, estimate: &StateRoll) -> Result<PRF> {
    if reference.grid != estimate.grid {
        return Err(Error::shape(format!(
            "frame grids differ: {:?} vs {:?}",
            reference.grid, estimate.grid
        )));
    }
    if reference.rep != estimate.rep {
        return Err(Error::RepMismatch {
            expected: reference.rep.name().into(),
            got: estimate.rep.name().into(),
        });
    }
    if reference.n_keys() != estimate.n_keys() {
        return Err(Error::shape(format!(
            "key counts differ: {} vs {}",
            reference.n_keys(),
            estimate.n_keys()
        )));
    }
    let rep = reference.rep;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (r, e) in reference.states.iter().zip(estimate.states.iter()) {
        let r_pos = rep.is_sounding(*r as usize);
        let e_pos = rep.is_sounding(*e as usize);
        match (e_pos, r_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(PRF::from_counts(tp, tp + fp, tp + fn_))
}

/// Maximum bipartite matching size via augmenting paths.
/// `adj[i]` lists the right-side candidates of left node `i`.
fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        visited: &mut [bool],
        owner: &mut [usize],
    ) -> bool {
        for &v in &adj[u] {
            if !visited[v] {
                visited[v] = true;
                if owner[v] == usize::MAX || augment(owner[v], adj, visited, owner) {
                    owner[v] = u;
                    return true;
                }
            }
        }
        false
    }

    let mut owner = vec![usize::MAX; n_right];
    let mut matched = 0;
    for u in 0..adj.len() {
        let mut visited = vec![false; n_right];
        if augment(u, adj, &mut visited, &mut owner) {
            matched += 1;
        }
    }
    matched
}

fn count_note_matches(
    reference: &[NoteEvent],
    estimate: &[NoteEvent],
    feasible: impl Fn(&NoteEvent, &NoteEvent) -> bool,
) -> usize {
    // pitch partitions the graph; match within each pitch group
    let mut est_by_pitch: std::collections::HashMap<u8, Vec<usize>> =
        std::collections::HashMap::new();
    for (j, e) in estimate.iter().enumerate() {
        est_by_pitch.entry(e.pitch).or_default().push(j);
    }
    let mut total = 0;
    let mut ref_by_pitch: std::collections::HashMap<u8, Vec<usize>> =
        std::collections::HashMap::new();
    for (i, r) in reference.iter().enumerate() {
        ref_by_pitch.entry(r.pitch).or_default().push(i);
    }
    for (pitch, ref_idx) in ref_by_pitch {
        let Some(est_idx) = est_by_pitch.get(&pitch) else {
            continue;
        };
        let adj: Vec<Vec<usize>> = ref_idx
            .iter()
            .map(|&i| {
                est_idx
                    .iter()
                    .enumerate()
                    .filter(|&(_, &j)| feasible(&reference[i], &estimate[j]))
                    .map(|(local, _)| local)
                    .collect()
            })
            .collect();
        total += max_matching(&adj, est_idx.len());
    }
    total
}

/// Onset scores: a pair is feasible when pitches match and onsets differ
/// by at most `tol` seconds (inclusive).
pub fn note_onset_metrics(reference: &[NoteEvent], estimate: &[NoteEvent], tol: f64) -> PRF {
    let matched = count_note_matches(reference, estimate, |r, e| {
        (r.onset_time - e.onset_time).abs() <= tol
    });
    PRF::from_counts(matched, estimate.len(), reference.len())
}

/// Onset+offset scores: additionally the offset must fall within
/// `max(onset_tol, 0.2 * reference duration)` (inclusive).
pub fn note_offset_metrics(reference: &[NoteEvent], estimate: &[NoteEvent], onset_tol: f64) -> PRF {
    let matched = count_note_matches(reference, estimate, |r, e| {
        let off_tol = onset_tol.max(0.2 * r.duration());
        (r.onset_time - e.onset_time).abs() <= onset_tol
            && (r.offset_time - e.offset_time).abs() <= off_tol
    });
    PRF::from_counts(matched, estimate.len(), reference.len())
}

/// Unweighted mean of piece scores; F1 is averaged directly, not
/// recomputed from the averaged P and R.
pub fn piecewise_average(per_piece: &[PRF]) -> Result<PRF> {
    if per_piece.is_empty() {
        return Err(Error::input("cannot average zero pieces"));
    }
    let n = per_piece.len() as f64;
    Ok(PRF {
        precision: per_piece.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: per_piece.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: per_piece.iter().map(|p| p.f1).sum::<f64>() / n,
    })
}

/// Two-column CSV block of named scores.
pub fn metrics_csv(rows: &[(&str, PRF)]) -> String {
    let mut out = String::from("metric,precision,recall,f1\n");
    for (name, prf) in rows {
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6}\n",
            prf.precision, prf.recall, prf.f1
        ));
    }
    out
}

pub const N_CALIBRATION_BINS: usize = 20;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Reliability table: predictions bucketed into 20 equal confidence bins
/// over [0, 1], with the expected calibration error summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
    pub total: usize,
    pub ece: f64,
}

#[derive(Default, Clone, Copy)]
struct BinAcc {
    count: usize,
    conf_sum: f64,
    correct: usize,
}

fn finish_bins(acc: &[BinAcc; N_CALIBRATION_BINS]) -> CalibrationTable {
    let total: usize = acc.iter().map(|b| b.count).sum();
    let bins: Vec<CalibrationBin> = acc
        .iter()
        .map(|b| CalibrationBin {
            count: b.count,
            mean_confidence: if b.count > 0 {
                b.conf_sum / b.count as f64
            } else {
                0.0
            },
            accuracy: if b.count > 0 {
                b.correct as f64 / b.count as f64
            } else {
                0.0
            },
        })
        .collect();
    let ece = if total == 0 {
        0.0
    } else {
        bins.iter()
            .zip(acc)
            .map(|(b, raw)| {
                raw.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs()
            })
            .sum()
    };
    CalibrationTable { bins, total, ece }
}

fn bin_of(confidence: f64) -> usize {
    ((confidence * N_CALIBRATION_BINS as f64) as usize).min(N_CALIBRATION_BINS - 1)
}

/// Bucket every (frame, key) prediction by its confidence (the max state
/// probability) and measure per-bin accuracy against the reference roll.
pub fn calibration<T: Scalar>(pt: &ProbTensor<T>, reference: &StateRoll) -> Result<CalibrationTable> {
    check_tensor_roll(pt, reference)?;
    let mut acc = [BinAcc::default(); N_CALIBRATION_BINS];
    for t in 0..pt.n_frames() {
        for p in 0..pt.n_pitches() {
            let (pred, conf) = pt.argmax_conf(t, p);
            let b = &mut acc[bin_of(conf)];
            b.count += 1;
            b.conf_sum += conf;
            if pred == reference.states[[t, p]] as usize {
                b.correct += 1;
            }
        }
    }
    Ok(finish_bins(&acc))
}

/// Calibration split by the predicted state, exposing which states the
/// model is over- or under-confident about. Returns one table per state
/// index of the representation.
pub fn calibration_by_predicted_state<T: Scalar>(
    pt: &ProbTensor<T>,
    reference: &StateRoll,
) -> Result<Vec<CalibrationTable>> {
    check_tensor_roll(pt, reference)?;
    let s = pt.rep.n_states();
    let mut accs = vec![[BinAcc::default(); N_CALIBRATION_BINS]; s];
    for t in 0..pt.n_frames() {
        for p in 0..pt.n_pitches() {
            let (pred, conf) = pt.argmax_conf(t, p);
            let b = &mut accs[pred][bin_of(conf)];
            b.count += 1;
            b.conf_sum += conf;
            if pred == reference.states[[t, p]] as usize {
                b.correct += 1;
            }
        }
    }
    Ok(accs.iter().map(finish_bins).collect())
}

fn check_tensor_roll<T: Scalar>(pt: &ProbTensor<T>, reference: &StateRoll) -> Result<()> {
    if pt.grid != reference.grid {
        return Err(Error::shape("probability tensor and roll grids differ"));
    }
    if pt.rep != reference.rep {
        return Err(Error::RepMismatch {
            expected: reference.rep.name().into(),
            got: pt.rep.name().into(),
        });
    }
    if pt.n_pitches() != reference.n_keys() {
        return Err(Error::shape(format!(
            "pitch counts differ: {} vs {}",
            pt.n_pitches(),
            reference.n_keys()
        )));
    }
    Ok(())
}

impl CalibrationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,count,mean_confidence,accuracy\n");
        let w = 1.0 / N_CALIBRATION_BINS as f64;
        for (i, b) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{i},{:.2},{:.2},{},{:.6},{:.6}\n",
                i as f64 * w,
                (i + 1) as f64 * w,
                b.count,
                b.mean_confidence,
                b.accuracy
            ));
        }
        out.push_str(&format!("# ece,{:.6}\n", self.ece));
        out
    }

    /// Reliability diagram: accuracy bars per confidence bin plus the
    /// perfect-calibration diagonal.
    pub fn to_svg(&self) -> String {
        let size = 440.0;
        let margin = 50.0;
        let plot = size - 2.0 * margin;
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
             viewBox=\"0 0 {size} {size}\">\n"
        ));
        svg.push_str(&format!(
            "  <rect x=\"0\" y=\"0\" width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
        ));
        // axes
        svg.push_str(&format!(
            "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = margin,
            b = size - margin,
            r = size - margin
        ));
        svg.push_str(&format!(
            "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = margin,
            b = size - margin
        ));
        // bars
        let bw = plot / N_CALIBRATION_BINS as f64;
        for (i, bin) in self.bins.iter().enumerate() {
            if bin.count == 0 {
                continue;
            }
            let h = bin.accuracy * plot;
            let x = margin + i as f64 * bw;
            let y = size - margin - h;
            svg.push_str(&format!(
                "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"#5b8db8\" stroke=\"#2f5a80\" stroke-width=\"0.5\"/>\n",
                x,
                y,
                bw - 1.0,
                h
            ));
        }
        // perfect-calibration diagonal
        svg.push_str(&format!(
            "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{m}\" stroke=\"black\" \
             stroke-dasharray=\"6 4\"/>\n",
            m = margin,
            b = size - margin,
            r = size - margin
        ));
        for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
            let x = margin + v * plot;
            let y = size - margin - v * plot;
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{label}</text>\n",
                x,
                size - margin + 16.0
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{label}</text>\n",
                margin - 6.0,
                y + 4.0
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\">confidence</text>\n",
            margin + plot / 2.0 - 32.0,
            size - 10.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" transform=\"rotate(-90 14 {mid})\">accuracy</text>\n",
            14.0,
            margin + plot / 2.0,
            mid = margin + plot / 2.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\">ECE {:.4}</text>\n",
            margin + 8.0,
            margin + 14.0,
            self.ece
        ));
        svg.push_str("</svg>\n");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noterep::{FrameGrid, Representation};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> FrameGrid {
        FrameGrid::new(16000, 512, n).unwrap()
    }

    fn note(pitch: u8, on: f64, off: f64) -> NoteEvent {
        NoteEvent::new(pitch, on, off, 64).unwrap()
    }

    fn random_roll(rng: &mut ChaCha8Rng, rep: Representation, t: usize, k: usize) -> StateRoll {
        let mut roll = StateRoll::zeros(grid(t), rep, k);
        for v in roll.states.iter_mut() {
            *v = rng.gen_range(0..rep.n_states() as u8);
        }
        roll
    }

    #[test]
    fn identical_rolls_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let roll = random_roll(&mut rng, Representation::Five, 30, 8);
        let prf = frame_metrics(&roll, &roll).unwrap();
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 1.0);
        assert_eq!(prf.f1, 1.0);
    }

    #[test]
    fn all_off_estimate_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = random_roll(&mut rng, Representation::Three, 30, 8);
        let empty = StateRoll::zeros(grid(30), Representation::Three, 8);
        let prf = frame_metrics(&reference, &empty).unwrap();
        assert_eq!(prf.precision, 0.0);
        assert_eq!(prf.recall, 0.0);
        assert_eq!(prf.f1, 0.0);
    }

    #[test]
    fn frame_metrics_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rep = Representation::ALL[rng.gen_range(0..5)];
            let reference = random_roll(&mut rng, rep, 24, 6);
            let estimate = random_roll(&mut rng, rep, 24, 6);
            let got = frame_metrics(&reference, &estimate).unwrap();

            // independent oracle over state labels
            let (mut tp, mut fp, mut fnn) = (0i64, 0i64, 0i64);
            for t in 0..24 {
                for k in 0..6 {
                    let r = reference.label_at(t, k).is_sounding();
                    let e = estimate.label_at(t, k).is_sounding();
                    if e && r {
                        tp += 1;
                    } else if e {
                        fp += 1;
                    } else if r {
                        fnn += 1;
                    }
                }
            }
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            assert_eq!(got.precision, p);
            assert_eq!(got.recall, r);
            assert_eq!(got.f1, f);
        }
    }

    #[test]
    fn frame_metrics_rejects_mismatched_inputs() {
        let a = StateRoll::zeros(grid(10), Representation::Five, 4);
        let b = StateRoll::zeros(grid(11), Representation::Five, 4);
        assert!(frame_metrics(&a, &b).is_err());
        let c = StateRoll::zeros(grid(10), Representation::Three, 4);
        assert!(frame_metrics(&a, &c).is_err());
    }

    #[test]
    fn onset_tolerance_boundary_is_inclusive() {
        // dyadic tolerance so the boundary difference is exact in f64
        let reference = vec![note(60, 1.0, 2.0)];
        let hit = vec![note(60, 1.0625, 2.0)];
        let miss = vec![note(60, 1.0626, 2.0)];
        assert_eq!(note_onset_metrics(&reference, &hit, 0.0625).f1, 1.0);
        assert_eq!(note_onset_metrics(&reference, &miss, 0.0625).f1, 0.0);
    }

    #[test]
    fn two_estimates_near_one_reference_match_once() {
        let reference = vec![note(60, 1.0, 2.0)];
        let estimate = vec![note(60, 1.01, 2.0), note(60, 0.99, 2.0)];
        let prf = note_onset_metrics(&reference, &estimate, 0.05);
        assert_eq!(prf.precision, 0.5);
        assert_eq!(prf.recall, 1.0);
    }

    #[test]
    fn offset_window_uses_duration_fraction_with_floor() {
        // 1.0 s duration: 20% = 0.2 s window
        let reference = vec![note(60, 1.0, 2.0)];
        let hit = vec![note(60, 1.0, 2.19)];
        let miss = vec![note(60, 1.0, 2.21)];
        assert_eq!(note_offset_metrics(&reference, &hit, 0.05).f1, 1.0);
        assert_eq!(note_offset_metrics(&reference, &miss, 0.05).f1, 0.0);

        // 0.1 s duration: 20% = 20 ms, but the 50 ms floor applies
        let reference = vec![note(60, 1.0, 1.1)];
        let hit = vec![note(60, 1.0, 1.14)];
        assert_eq!(note_offset_metrics(&reference, &hit, 0.05).f1, 1.0);

        let exact = vec![note(60, 1.0, 1.1)];
        let prf = note_offset_metrics(&reference, &exact, 0.05);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    /// Exhaustive matching oracle: best over all subsets of feasible
    /// pairs, via recursion over reference notes with an estimate bitmask.
    fn brute_force_matches(
        reference: &[NoteEvent],
        estimate: &[NoteEvent],
        feasible: &dyn Fn(&NoteEvent, &NoteEvent) -> bool,
    ) -> usize {
        fn rec(
            i: usize,
            used: u32,
            reference: &[NoteEvent],
            estimate: &[NoteEvent],
            feasible: &dyn Fn(&NoteEvent, &NoteEvent) -> bool,
        ) -> usize {
            if i == reference.len() {
                return 0;
            }
            let mut best = rec(i + 1, used, reference, estimate, feasible);
            for (j, e) in estimate.iter().enumerate() {
                if used & (1 << j) == 0 && feasible(&reference[i], e) {
                    best = best.max(
                        1 + rec(i + 1, used | (1 << j), reference, estimate, feasible),
                    );
                }
            }
            best
        }
        rec(0, 0, reference, estimate, feasible)
    }

    fn random_notes(rng: &mut ChaCha8Rng, n: usize) -> Vec<NoteEvent> {
        (0..n)
            .map(|_| {
                let pitch = rng.gen_range(60..63u8);
                let on = rng.gen_range(0.0..2.0f64);
                let off = on + rng.gen_range(0.05..1.0);
                note(pitch, on, off)
            })
            .collect()
    }

    #[test]
    fn matching_equals_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n_ref = rng.gen_range(0..=8);
            let n_est = rng.gen_range(0..=8);
            let reference = random_notes(&mut rng, n_ref);
            let estimate = random_notes(&mut rng, n_est);
            let tol = 0.1;

            let onset_feasible = |r: &NoteEvent, e: &NoteEvent| {
                r.pitch == e.pitch && (r.onset_time - e.onset_time).abs() <= tol
            };
            let got = note_onset_metrics(&reference, &estimate, tol);
            let expect = brute_force_matches(&reference, &estimate, &onset_feasible);
            let expect_prf = PRF::from_counts(expect, estimate.len(), reference.len());
            assert_eq!(got, expect_prf);

            let offset_feasible = |r: &NoteEvent, e: &NoteEvent| {
                let off_tol = tol.max(0.2 * r.duration());
                r.pitch == e.pitch
                    && (r.onset_time - e.onset_time).abs() <= tol
                    && (r.offset_time - e.offset_time).abs() <= off_tol
            };
            let got = note_offset_metrics(&reference, &estimate, tol);
            let expect = brute_force_matches(&reference, &estimate, &offset_feasible);
            let expect_prf = PRF::from_counts(expect, estimate.len(), reference.len());
            assert_eq!(got, expect_prf);
        }
    }

    #[test]
    fn swapping_ref_and_est_swaps_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n_a = rng.gen_range(0..10);
            let n_b = rng.gen_range(0..10);
            let a = random_notes(&mut rng, n_a);
            let b = random_notes(&mut rng, n_b);
            let fwd = note_onset_metrics(&a, &b, 0.08);
            let rev = note_onset_metrics(&b, &a, 0.08);
            assert_eq!(fwd.precision, rev.recall);
            assert_eq!(fwd.recall, rev.precision);
            assert_eq!(fwd.f1, rev.f1);

            let ra = random_roll(&mut rng, Representation::Five, 20, 5);
            let rb = random_roll(&mut rng, Representation::Five, 20, 5);
            let fwd = frame_metrics(&ra, &rb).unwrap();
            let rev = frame_metrics(&rb, &ra).unwrap();
            assert_eq!(fwd.precision, rev.recall);
            assert_eq!(fwd.recall, rev.precision);
        }
    }

    #[test]
    fn offset_matches_never_exceed_onset_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n_ref = rng.gen_range(0..12);
            let n_est = rng.gen_range(0..12);
            let reference = random_notes(&mut rng, n_ref);
            let estimate = random_notes(&mut rng, n_est);
            let on = note_onset_metrics(&reference, &estimate, 0.05);
            let off = note_offset_metrics(&reference, &estimate, 0.05);
            // equal denominators, so comparing recalls compares match counts
            assert!(off.recall <= on.recall + 1e-12);
            assert!(off.precision <= on.precision + 1e-12);
        }
    }

    #[test]
    fn piecewise_average_is_plain_mean() {
        let single = vec![PRF {
            precision: 0.5,
            recall: 0.25,
            f1: 0.3333,
        }];
        assert_eq!(piecewise_average(&single).unwrap(), single[0]);

        let two = vec![
            PRF {
                precision: 1.0,
                recall: 1.0,
                f1: 0.8,
            },
            PRF {
                precision: 0.0,
                recall: 0.0,
                f1: 0.6,
            },
        ];
        let avg = piecewise_average(&two).unwrap();
        assert!((avg.f1 - 0.7).abs() < 1e-12);

        assert!(piecewise_average(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let many: Vec<PRF> = (0..17)
            .map(|_| {
                let p: f64 = rng.gen_range(0.0..1.0);
                let r: f64 = rng.gen_range(0.0..1.0);
                PRF {
                    precision: p,
                    recall: r,
                    f1: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let avg = piecewise_average(&many).unwrap();
        let mut sp = 0.0;
        let mut sr = 0.0;
        let mut sf = 0.0;
        for prf in &many {
            sp += prf.precision;
            sr += prf.recall;
            sf += prf.f1;
        }
        assert!((avg.precision - sp / 17.0).abs() < 1e-15);
        assert!((avg.recall - sr / 17.0).abs() < 1e-15);
        assert!((avg.f1 - sf / 17.0).abs() < 1e-15);
    }

    fn two_state_tensor(confs: &[f64], g: FrameGrid) -> ProbTensor<f64> {
        let mut probs = Array3::<f64>::zeros((confs.len(), 1, 2));
        for (t, &c) in confs.iter().enumerate() {
            probs[[t, 0, 0]] = 1.0 - c;
            probs[[t, 0, 1]] = c;
        }
        ProbTensor::new(g, Representation::Binary, probs).unwrap()
    }

    #[test]
    fn perfect_predictions_have_zero_ece() {
        let g = grid(50);
        let mut roll = StateRoll::zeros(g, Representation::Binary, 1);
        for t in 0..50 {
            roll.states[[t, 0]] = 1;
        }
        let pt = two_state_tensor(&vec![1.0; 50], g);
        let table = calibration(&pt, &roll).unwrap();
        assert_eq!(table.total, 50);
        assert_eq!(table.bins[19].count, 50);
        assert_eq!(table.bins[19].accuracy, 1.0);
        assert!(table.ece.abs() < 1e-12);
    }

    #[test]
    fn constant_point_nine_confidence_half_right_gives_ece_point_four() {
        let n = 10_000;
        let g = grid(n);
        let mut roll = StateRoll::zeros(g, Representation::Binary, 1);
        // exactly half the predictions correct
        for t in 0..n {
            roll.states[[t, 0]] = if t % 2 == 0 { 1 } else { 0 };
        }
        let pt = two_state_tensor(&vec![0.9; n], g);
        let table = calibration(&pt, &roll).unwrap();
        assert!((table.ece - 0.4).abs() < 1e-9, "ece {}", table.ece);
    }

    #[test]
    fn monte_carlo_calibrated_predictor_has_small_ece() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let g = grid(n);
        let mut confs = Vec::with_capacity(n);
        let mut roll = StateRoll::zeros(g, Representation::Binary, 1);
        for t in 0..n {
            let c: f64 = rng.gen_range(0.5..1.0);
            confs.push(c);
            // correct with probability exactly c
            roll.states[[t, 0]] = if rng.gen_bool(c) { 1 } else { 0 };
        }
        let pt = two_state_tensor(&confs, g);
        let table = calibration(&pt, &roll).unwrap();
        assert!(table.ece <= 0.02, "ece {}", table.ece);
        assert_eq!(table.total, n);
        assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), n);
    }

    #[test]
    fn per_state_breakdown_counts_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g = grid(40);
        let rep = Representation::Five;
        let mut probs = Array3::<f64>::zeros((40, 3, 5));
        for t in 0..40 {
            for p in 0..3 {
                let mut row = [0.0; 5];
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                    sum += *v;
                }
                for (s, v) in row.iter().enumerate() {
                    probs[[t, p, s]] = v / sum;
                }
            }
        }
        let pt = ProbTensor::new(g, rep, probs).unwrap();
        let roll = random_roll(&mut rng, rep, 40, 3);
        let overall = calibration(&pt, &roll).unwrap();
        let by_state = calibration_by_predicted_state(&pt, &roll).unwrap();
        assert_eq!(by_state.len(), 5);
        let sum: usize = by_state.iter().map(|t| t.total).sum();
        assert_eq!(sum, overall.total);
    }

    #[test]
    fn calibration_csv_and_svg_render() {
        let g = grid(10);
        let pt = two_state_tensor(&vec![0.85; 10], g);
        let roll = StateRoll::zeros(g, Representation::Binary, 1);
        let table = calibration(&pt, &roll).unwrap();
        let csv = table.to_csv();
        assert!(csv.starts_with("bin,lo,hi,count,mean_confidence,accuracy\n"));
        assert_eq!(csv.lines().count(), 22); // header + 20 bins + ece line
        let svg = table.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
