//! Synthetic performances with deterministic pseudo-acoustic features.
//!
//! Pieces are generated per pitch as independent strike processes with
//! optional quick restrikes, plus sustain-pedal intervals, which together
//! produce the elongation/re-onset situations the transcriber must learn.
//! Features are rendered directly in a small bin space: each key owns a
//! fixed harmonic template (base bins spaced so harmonics never collide
//! with other keys' base bins), scaled by an exponentially decaying
//! envelope, with a broadband transient on strike frames. Rendering is
//! linear in note contributions before the final log compression.

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::midi::{PedalInterval, Performance};
use crate::noterep::{FrameGrid, NoteEvent, MIDI_PITCH_MIN};
use crate::scalar::{fr, Scalar};
use crate::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Generation and rendering knobs. `seed` fixes both the performance and
/// the rendering noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pitches: usize,
    /// Feature bins; must fit all base template bins.
    pub n_bins: usize,
    pub sample_rate: u32,
    pub hop: u32,
    /// Piece length in seconds.
    pub duration: f64,
    /// Strikes per second per pitch.
    pub strike_rate: f64,
    /// Uniform note duration range in seconds.
    pub dur_range: (f64, f64),
    /// Probability that a note is followed by a quick restrike.
    pub repeat_prob: f64,
    /// Gap range for quick restrikes.
    pub repeat_gap: (f64, f64),
    /// Probability that each candidate pedal window is actually held.
    pub pedal_prob: f64,
    pub pedal_dur: (f64, f64),
    pub pedal_gap: (f64, f64),
    /// Template multiplier on strike frames.
    pub onset_gain: f64,
    /// Flat energy added to every bin on strike frames.
    pub transient_level: f64,
    /// Envelope decay rate per second.
    pub decay: f64,
    /// Envelope floor: sustained notes keep this fraction of peak.
    pub sustain_floor: f64,
    /// Gaussian noise sigma added to linear energy.
    pub noise_level: f64,
    pub log_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pitches: 16,
            n_bins: 64,
            sample_rate: 16_000,
            hop: 512,
            duration: 4.0,
            strike_rate: 0.5,
            dur_range: (0.15, 0.9),
            repeat_prob: 0.35,
            repeat_gap: (0.05, 0.25),
            pedal_prob: 0.7,
            pedal_dur: (0.4, 1.5),
            pedal_gap: (0.05, 0.4),
            onset_gain: 1.5,
            transient_level: 0.1,
            decay: 3.0,
            sustain_floor: 0.35,
            noise_level: 0.01,
            log_floor: 1e-5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pitches == 0 {
            return Err(Error::config("n_pitches must be positive"));
        }
        if base_bin(self.n_pitches - 1) >= self.n_bins {
            return Err(Error::config(format!(
                "n_bins {} too small for {} pitches (top base bin {})",
                self.n_bins,
                self.n_pitches,
                base_bin(self.n_pitches - 1)
            )));
        }
        let ranges = [
            self.dur_range,
            self.repeat_gap,
            self.pedal_dur,
            self.pedal_gap,
        ];
        if ranges.iter().any(|r| !(r.0 > 0.0 && r.1 >= r.0)) {
            return Err(Error::config("duration/gap ranges must be positive and ordered"));
        }
        let levels = [
            self.strike_rate,
            self.onset_gain,
            self.transient_level,
            self.decay,
            self.sustain_floor,
            self.noise_level,
        ];
        if levels.iter().any(|&v| v < 0.0) {
            return Err(Error::config("rates and levels must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) || !(0.0..=1.0).contains(&self.pedal_prob) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.duration <= self.dur_range.0 {
            return Err(Error::config("piece duration too short for a single note"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<FrameGrid> {
        FrameGrid::for_duration(self.sample_rate, self.hop, self.duration)
    }

    /// Stable fingerprint of the full config, for dataset manifests.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:016x}", crate::dump::fnv1a64(&json))
    }
}

/// Base feature bin of a key; spacing 3 with harmonic shifts 17 and 31
/// (both not divisible by 3), so no key's harmonic lands on another key's
/// base bin.
pub fn base_bin(key: usize) -> usize {
    2 + 3 * key
}

/// (bin, amplitude) pairs of a key's template, truncated to `n_bins`.
pub fn template_bins(key: usize, n_bins: usize) -> Vec<(usize, f64)> {
    [(0usize, 1.0), (17, 0.5), (31, 0.25)]
        .into_iter()
        .map(|(shift, amp)| (base_bin(key) + shift, amp))
        .filter(|&(bin, _)| bin < n_bins)
        .collect()
}

/// Envelope `k` frames after the strike.
pub fn envelope(cfg: &SynthConfig, k: usize, frame_duration: f64) -> f64 {
    cfg.sustain_floor + (1.0 - cfg.sustain_floor) * (-cfg.decay * k as f64 * frame_duration).exp()
}

/// Generate a raw performance (pedal not yet applied to offsets).
///
/// Per pitch, strike times follow exponential gaps at `strike_rate`, with
/// probability `repeat_prob` of a quick restrike after each note; a key is
/// never struck while held. Pedal windows alternate hold/gap draws.
/// Identical seeds give identical output.
pub fn gen_performance(cfg: &SynthConfig) -> Result<Performance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut notes: Vec<NoteEvent> = Vec::new();

    for key in 0..cfg.n_pitches {
        let pitch = MIDI_PITCH_MIN + key as u8;
        let mut t = exp_gap(&mut rng, cfg.strike_rate);
        while t + cfg.dur_range.0 < cfg.duration {
            let dur = rng.gen_range(cfg.dur_range.0..=cfg.dur_range.1);
            let off = (t + dur).min(cfg.duration);
            let velocity = rng.gen_range(40..100u8);
            notes.push(NoteEvent::new(pitch, t, off, velocity)?);
            let gap = if rng.gen_bool(cfg.repeat_prob) {
                rng.gen_range(cfg.repeat_gap.0..=cfg.repeat_gap.1)
            } else {
                exp_gap(&mut rng, cfg.strike_rate)
            };
            t = off + gap;
        }
    }

    let mut pedals: Vec<PedalInterval> = Vec::new();
    let mut t = 0.0;
    while t < cfg.duration {
        let gap = rng.gen_range(cfg.pedal_gap.0..=cfg.pedal_gap.1);
        let hold = rng.gen_range(cfg.pedal_dur.0..=cfg.pedal_dur.1);
        let engage = rng.gen_bool(cfg.pedal_prob);
        let press = t + gap;
        let release = (press + hold).min(cfg.duration);
        if engage && release > press && press < cfg.duration {
            pedals.push(PedalInterval::new(press, release)?);
        }
        t = press + hold;
    }

    Performance::new(notes, pedals, cfg.duration)
}

fn exp_gap(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -u.ln() / rate
}

/// Linear (pre-log, pre-noise) energy of a performance: `T x n_bins`.
///
/// Each note contributes its template on frames `[onset, offset)`:
/// `onset_gain` times the template plus a flat `transient_level` on the
/// strike frame, decaying envelope afterwards. Contributions add, so the
/// result is exactly linear in the note list. Notes are expected to be
/// pedal-elongated already; same-pitch spans then never overlap.
pub fn render_energy(perf: &Performance, cfg: &SynthConfig, grid: FrameGrid) -> Result<Array2<f64>> {
    cfg.validate()?;
    let dt = grid.frame_duration();
    let mut energy = Array2::<f64>::zeros((grid.n_frames, cfg.n_bins));
    for note in &perf.notes {
        let key = note.key_index();
        if key >= cfg.n_pitches {
            return Err(Error::range(format!(
                "note pitch {} outside the {}-pitch synth range",
                note.pitch, cfg.n_pitches
            )));
        }
        let a = grid.frame_of(note.onset_time);
        let b = grid.frame_of(note.offset_time);
        if a >= grid.n_frames || b > grid.n_frames {
            return Err(Error::range(format!(
                "note [{}, {}] outside the render grid",
                note.onset_time, note.offset_time
            )));
        }
        let template = template_bins(key, cfg.n_bins);
        // strike frame
        for &(bin, amp) in &template {
            energy[[a, bin]] += amp * cfg.onset_gain;
        }
        for bin in 0..cfg.n_bins {
            energy[[a, bin]] += cfg.transient_level;
        }
        // ring until the frame before the offset frame
        for f in (a + 1)..b {
            let env = envelope(cfg, f - a, dt);
            for &(bin, amp) in &template {
                energy[[f, bin]] += amp * env;
            }
        }
    }
    Ok(energy)
}

/// Log-compressed noisy features. Noise is Gaussian on the linear energy,
/// clamped at zero, drawn from a stream derived from `cfg.seed` but
/// independent of the generation stream.
pub fn render_features<T: Scalar>(
    perf: &Performance,
    cfg: &SynthConfig,
    grid: FrameGrid,
) -> Result<FeatureMatrix<T>> {
    let mut energy = render_energy(perf, cfg, grid)?;
    if cfg.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let normal = Normal::new(0.0, cfg.noise_level)
            .map_err(|e| Error::config(format!("bad noise level: {e}")))?;
        for v in energy.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    let values = energy.mapv(|x| fr::<T>((x + cfg.log_floor).ln()));
    FeatureMatrix::new(grid, values)
}

/// One piece, ready for training: elongated performance, features, and
/// the matching grid.
pub fn gen_piece<T: Scalar>(cfg: &SynthConfig) -> Result<(Performance, FeatureMatrix<T>)> {
    let raw = gen_performance(cfg)?;
    let elongated = crate::midi::elongate_offsets(&raw);
    let grid = cfg.grid()?;
    let feats = render_features::<T>(&elongated, cfg, grid)?;
    Ok((elongated, feats))
}

/// Dataset manifest: which pieces exist, under which seeds, produced by
/// which config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub synth: SynthConfig,
    pub rep: Option<crate::noterep::Representation>,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub seed: u64,
    /// Paths relative to the manifest file.
    pub features: String,
    pub roll: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::elongate_offsets;
    use crate::noterep::{encode_states, Representation};

    #[test]
    fn same_seed_same_performance() {
        let cfg = SynthConfig {
            seed: 1234,
            ..Default::default()
        };
        let a = gen_performance(&cfg).unwrap();
        let b = gen_performance(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.notes.is_empty());
        let fa = render_features::<f32>(&a, &cfg, cfg.grid().unwrap()).unwrap();
        let fb = render_features::<f32>(&b, &cfg, cfg.grid().unwrap()).unwrap();
        assert_eq!(fa.values, fb.values);
    }

    #[test]
    fn no_pedal_means_elongation_is_identity() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                pedal_prob: 0.0,
                seed,
                ..Default::default()
            };
            let perf = gen_performance(&cfg).unwrap();
            assert!(perf.pedals.is_empty());
            assert_eq!(elongate_offsets(&perf), perf);
        }
    }

    #[test]
    fn dense_pedal_produces_reonsets_across_seeds() {
        for seed in 0..100 {
            let cfg = SynthConfig {
                pedal_prob: 1.0,
                repeat_prob: 0.8,
                strike_rate: 0.8,
                seed,
                ..Default::default()
            };
            let perf = elongate_offsets(&gen_performance(&cfg).unwrap());
            let roll = encode_states(
                &perf,
                Representation::Five,
                cfg.grid().unwrap(),
                cfg.n_pitches,
            )
            .unwrap();
            assert!(roll.n_reonsets() >= 1, "seed {seed} produced no re-onsets");
        }
    }

    #[test]
    fn empty_performance_zero_noise_is_all_floor() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            ..Default::default()
        };
        let perf = Performance::new(vec![], vec![], cfg.duration).unwrap();
        let feats = render_features::<f64>(&perf, &cfg, cfg.grid().unwrap()).unwrap();
        let expect = cfg.log_floor.ln();
        for &v in feats.values.iter() {
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn onset_frame_has_peak_energy() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            ..Default::default()
        };
        let grid = cfg.grid().unwrap();
        let note = NoteEvent::new(MIDI_PITCH_MIN + 4, 0.5, 2.5, 80).unwrap();
        let perf = Performance::new(vec![note], vec![], cfg.duration).unwrap();
        let energy = render_energy(&perf, &cfg, grid).unwrap();
        let a = grid.frame_of(0.5);
        let b = grid.frame_of(2.5);
        let total = |f: usize| energy.row(f).sum();
        for f in (a + 1)..b {
            assert!(
                total(a) > total(f),
                "onset frame {a} ({}) not above frame {f} ({})",
                total(a),
                total(f)
            );
        }
    }

    #[test]
    fn render_is_linear_in_notes() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            ..Default::default()
        };
        let grid = cfg.grid().unwrap();
        let n1 = NoteEvent::new(MIDI_PITCH_MIN + 2, 0.4, 1.8, 80).unwrap();
        let n2 = NoteEvent::new(MIDI_PITCH_MIN + 7, 1.0, 2.2, 90).unwrap();
        let both = Performance::new(vec![n1, n2], vec![], cfg.duration).unwrap();
        let solo1 = Performance::new(vec![n1], vec![], cfg.duration).unwrap();
        let solo2 = Performance::new(vec![n2], vec![], cfg.duration).unwrap();
        let e_both = render_energy(&both, &cfg, grid).unwrap();
        let e1 = render_energy(&solo1, &cfg, grid).unwrap();
        let e2 = render_energy(&solo2, &cfg, grid).unwrap();
        let sum = &e1 + &e2;
        assert_eq!(e_both, sum);
    }

    #[test]
    fn harmonics_never_touch_other_base_bins() {
        let cfg = SynthConfig::default();
        let bases: std::collections::HashSet<usize> =
            (0..cfg.n_pitches).map(base_bin).collect();
        for key in 0..cfg.n_pitches {
            for (bin, _) in template_bins(key, cfg.n_bins) {
                if bin != base_bin(key) {
                    assert!(!bases.contains(&bin), "key {key} harmonic at base bin {bin}");
                }
            }
        }
    }

    /// The task must be solvable from the features before any model is
    /// blamed: thresholding each key's base bin on a noiseless render has
    /// to recover the sounding mask almost perfectly.
    #[test]
    fn threshold_detector_clears_frame_f1_floor() {
        for seed in 0..10 {
            let cfg = SynthConfig {
                noise_level: 0.0,
                seed,
                ..Default::default()
            };
            let grid = cfg.grid().unwrap();
            let perf = elongate_offsets(&gen_performance(&cfg).unwrap());
            let energy = render_energy(&perf, &cfg, grid).unwrap();
            let roll = encode_states(&perf, Representation::Five, grid, cfg.n_pitches).unwrap();

            let theta = 0.25;
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for t in 0..grid.n_frames {
                for k in 0..cfg.n_pitches {
                    let pred = energy[[t, base_bin(k)]] >= theta;
                    let truth = roll.rep.is_sounding(roll.states[[t, k]] as usize);
                    match (pred, truth) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            let p = tp as f64 / (tp + fp).max(1) as f64;
            let r = tp as f64 / (tp + fn_).max(1) as f64;
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert!(f1 > 0.9, "seed {seed}: detector F1 {f1} below floor (p={p} r={r})");
        }
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = SynthConfig::default();
        let manifest = DatasetManifest {
            config_hash: cfg.fingerprint(),
            synth: cfg.clone(),
            rep: Some(Representation::Five),
            items: vec![ManifestItem {
                seed: 3,
                features: "piece_0003.feat".into(),
                roll: "piece_0003.roll".into(),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.config_hash, manifest.config_hash);
        assert_eq!(back.synth, cfg);
        assert_eq!(back.items.len(), 1);
        assert_eq!(back.items[0].roll, "piece_0003.roll");
    }
}
