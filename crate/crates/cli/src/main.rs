//! `keyroll`: command-line workflows over the transcription toolkit.
//!
//! Eight subcommands cover the pipeline: `synth` writes a seeded dataset
//! with a JSON manifest, `encode` rasterizes a MIDI file into a state
//! roll, `featurize` turns a WAV into log-mel features, `train` fits a
//! model, `infer` writes per-frame state distributions, `decode` turns
//! distributions back into notes, `eval` prints transcription metrics,
//! and `calib` writes a reliability table with its diagram.
//!
//! Every run resolves its parameters from built-in defaults, then an
//! optional `--config` TOML/JSON overlay, then explicit flags, and logs
//! the resolved values to stderr so runs can be reproduced exactly.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or I/O error.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use keyroll_core::decode::{beam_decode, greedy_decode, notes_csv, states_to_notes};
use keyroll_core::features::{logmel, read_wav, write_config_sidecar};
use keyroll_core::metrics::{
    calibration, calibration_by_predicted_state, frame_metrics, metrics_csv, note_offset_metrics,
    note_onset_metrics, PRF,
};
use keyroll_core::midi::{elongate_offsets, parse_midi, write_performance, ParseWarnings};
use keyroll_core::model::{checkpoint, infer, train, train_from, InferMode, TrainHyper};
use keyroll_core::noterep::{encode_states, StateLabel, N_KEYS};
use keyroll_core::synth::{gen_piece, SynthConfig};
use keyroll_core::{
    BeamParams, Error, FeatureConfig, FeatureMatrix, FrameGrid, ModelConfig, ModelParams,
    ProbTensor, Representation, Result, StateRoll,
};

/// Directory searched for `--config` files that are not found relative
/// to the working directory.
const CONFIG_DIR_VAR: &str = "KEYROLL_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "keyroll", version, about = "piano transcription workflows")]
struct Cli {
    /// TOML or JSON file whose sections (features, synth, model, train,
    /// beam) override built-in defaults; explicit flags win over both
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize a MIDI file into a note-state roll
    Encode(EncodeArgs),
    /// Compute log-mel features from a WAV file
    Featurize(FeaturizeArgs),
    /// Generate a synthetic dataset with a JSON manifest
    Synth(SynthArgs),
    /// Train a model on a synth manifest
    Train(TrainArgs),
    /// Run a model over features, writing state distributions
    Infer(InferArgs),
    /// Turn state distributions into a roll and a note list
    Decode(DecodeArgs),
    /// Compare an estimated MIDI file against a reference
    Eval(EvalArgs),
    /// Reliability table and diagram for state distributions
    Calib(CalibArgs),
}

#[derive(clap::Args)]
struct EncodeArgs {
    /// Input MIDI file
    input: PathBuf,
    /// Note-state representation
    #[arg(long, value_parser = parse_rep, default_value = "five")]
    rep: Representation,
    /// Output roll path (defaults to the input with extension `roll`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump the roll as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    hop: Option<u32>,
}

#[derive(clap::Args)]
struct FeaturizeArgs {
    /// Input WAV file (its sample rate wins over any configured one)
    input: PathBuf,
    /// Output feature path (defaults to the input with extension `feat`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_mels: Option<usize>,
    #[arg(long)]
    fft_size: Option<usize>,
    #[arg(long)]
    hop: Option<u32>,
    #[arg(long)]
    fmin: Option<f64>,
    #[arg(long)]
    fmax: Option<f64>,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Directory for pieces and the manifest
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of pieces; piece i uses seed `seed + i`
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_rep, default_value = "five")]
    rep: Representation,
    #[arg(long)]
    pitches: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    /// Piece length in seconds
    #[arg(long)]
    duration: Option<f64>,
    /// Strikes per second per pitch
    #[arg(long)]
    strike_rate: Option<f64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Manifest written by `synth`
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Start from an existing checkpoint instead of fresh parameters
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Defaults to the manifest's representation
    #[arg(long, value_parser = parse_rep)]
    rep: Option<Representation>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per training segment (0 = whole sequences)
    #[arg(long)]
    segment_frames: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Write the per-step loss curve here
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Output probability tensor path
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct DecodeArgs {
    /// Probability tensor from `infer`
    #[arg(long)]
    probs: PathBuf,
    /// Note list CSV output
    #[arg(long)]
    out: PathBuf,
    /// Also write the decoded state roll here
    #[arg(long)]
    roll_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DecodeMode::Greedy)]
    mode: DecodeMode,
    /// Beam trigger: refine where the second-best state exceeds this
    #[arg(long)]
    beam_threshold: Option<f64>,
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long)]
    states_per_frame: Option<usize>,
    /// Checkpoint; beam mode rescores candidates under this model
    #[arg(long, required_if_eq("mode", "beam"))]
    model: Option<PathBuf>,
    /// Features the tensor was inferred from; required by beam mode
    #[arg(long, required_if_eq("mode", "beam"))]
    features: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Reference MIDI file
    reference: PathBuf,
    /// Estimated MIDI file
    estimate: PathBuf,
    /// Onset tolerance in seconds
    #[arg(long, default_value_t = 0.05)]
    onset_tol: f64,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    hop: Option<u32>,
    /// Also write the table as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CalibArgs {
    /// Probability tensor from `infer`
    #[arg(long)]
    probs: PathBuf,
    /// Reference state roll
    #[arg(long)]
    roll: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_svg: PathBuf,
    /// Also print one ECE line per predicted state
    #[arg(long)]
    by_state: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Preset {
    Toy,
    Full,
    Small,
}

fn parse_rep(s: &str) -> std::result::Result<Representation, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
        format!("unknown representation '{s}' (binary, three, four-offset, four-reonset, five)")
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overlay = match Overlay::load(cli.config.as_deref()) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let run = match cli.cmd {
        Cmd::Encode(a) => cmd_encode(a, &overlay),
        Cmd::Featurize(a) => cmd_featurize(a, &overlay),
        Cmd::Synth(a) => cmd_synth(a, &overlay),
        Cmd::Train(a) => cmd_train(a, &overlay),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Decode(a) => cmd_decode(a, &overlay),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Calib(a) => cmd_calib(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    let code = match e {
        Error::Io(_)
        | Error::Format { .. }
        | Error::MidiParse { .. }
        | Error::Json(_)
        | Error::Config(_) => 2u8,
        _ => 1u8,
    };
    ExitCode::from(code)
}

// ---------------------------------------------------------------- overlay

/// Parsed `--config` file: named sections merged field-wise onto the
/// defaults of the matching parameter struct.
#[derive(Default)]
struct Overlay {
    sections: serde_json::Map<String, serde_json::Value>,
}

const OVERLAY_SECTIONS: [&str; 5] = ["features", "synth", "model", "train", "beam"];

impl Overlay {
    fn load(path: Option<&Path>) -> Result<Overlay> {
        let Some(path) = path else {
            return Ok(Overlay::default());
        };
        let resolved = resolve_config_path(path)?;
        let text = std::fs::read_to_string(&resolved)?;
        let value: serde_json::Value = match resolved.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            Some("toml") => {
                let t: toml::Value = toml::from_str(&text).map_err(|e| {
                    Error::Format {
                        path: resolved.display().to_string(),
                        message: e.to_string(),
                    }
                })?;
                serde_json::to_value(t)?
            }
            _ => {
                return Err(Error::config(format!(
                    "config file {} must end in .toml or .json",
                    resolved.display()
                )))
            }
        };
        let serde_json::Value::Object(sections) = value else {
            return Err(Error::config("config file must be a table of sections"));
        };
        for key in sections.keys() {
            if !OVERLAY_SECTIONS.contains(&key.as_str()) {
                return Err(Error::config(format!(
                    "unknown config section '{key}' (expected one of {})",
                    OVERLAY_SECTIONS.join(", ")
                )));
            }
        }
        Ok(Overlay { sections })
    }

    /// Overlay the named section onto `base`, field by field.
    fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(over) = self.sections.get(name) else {
            return Ok(base);
        };
        let mut merged = serde_json::to_value(&base)?;
        merge_values(&mut merged, over);
        serde_json::from_value(merged).map_err(|e| {
            Error::config(format!("config section '{name}': {e}"))
        })
    }
}

fn merge_values(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_values(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// A `--config` path that does not exist as given is retried under
/// `$KEYROLL_CONFIG_DIR`.
fn resolve_config_path(path: &Path) -> Result<PathBuf> {
    if path.exists() || path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    if let Ok(dir) = std::env::var(CONFIG_DIR_VAR) {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return Ok(candidate);
        }
    }
    Ok(path.to_path_buf())
}

fn log_config<T: Serialize>(cmd: &str, cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(json) => eprintln!("config[{cmd}]: {json}"),
        Err(e) => eprintln!("config[{cmd}]: <unserializable: {e}>"),
    }
}

fn report_warnings(w: &ParseWarnings) {
    for (count, what) in [
        (w.dangling_note_ons, "note-on(s) still open at end of track"),
        (w.orphan_note_offs, "note-off(s) without a matching note-on"),
        (w.zero_length_notes, "zero-length note(s) dropped"),
        (w.unclosed_pedals, "pedal(s) still down at end of track"),
        (w.out_of_range_notes, "note(s) outside the 88-key range dropped"),
    ] {
        if count > 0 {
            eprintln!("warning: {count} {what}");
        }
    }
}

// ------------------------------------------------------------ subcommands

fn cmd_encode(a: EncodeArgs, overlay: &Overlay) -> Result<()> {
    let features: FeatureConfig = overlay.section("features", FeatureConfig::default())?;
    let sample_rate = a.sample_rate.unwrap_or(features.sample_rate);
    let hop = a.hop.unwrap_or(features.hop);
    let out = a.out.unwrap_or_else(|| a.input.with_extension("roll"));
    log_config(
        "encode",
        &serde_json::json!({
            "input": a.input, "out": out, "rep": a.rep,
            "sample_rate": sample_rate, "hop": hop,
        }),
    );

    let bytes = std::fs::read(&a.input)?;
    let (raw, warnings) = parse_midi(&bytes)?;
    report_warnings(&warnings);
    let perf = elongate_offsets(&raw);
    let grid = FrameGrid::for_duration(sample_rate, hop, perf.duration)?;
    let roll = encode_states(&perf, a.rep, grid, N_KEYS)?;

    if a.rep == Representation::Binary {
        // binary cannot mark a strike on an already-sounding key, so
        // pedal-overlapped same-pitch pairs merge into one run
        let five = encode_states(&perf, Representation::Five, grid, N_KEYS)?;
        let merged = count_label(&five, StateLabel::Reonset);
        if merged > 0 {
            eprintln!("warning: {merged} overlapped note(s) merged into sustained runs under binary");
        }
    }

    roll.save(&out)?;
    if let Some(csv) = &a.csv {
        std::fs::write(csv, roll.to_csv())?;
    }
    println!(
        "frames={} notes={} re-onsets={}",
        grid.n_frames,
        perf.notes.len(),
        count_label(&roll, StateLabel::Reonset)
    );
    Ok(())
}

fn count_label(roll: &StateRoll, label: StateLabel) -> usize {
    let (t_max, keys) = roll.states.dim();
    let mut n = 0;
    for t in 0..t_max {
        for k in 0..keys {
            if roll.label_at(t, k) == label {
                n += 1;
            }
        }
    }
    n
}

fn cmd_featurize(a: FeaturizeArgs, overlay: &Overlay) -> Result<()> {
    let mut cfg: FeatureConfig = overlay.section("features", FeatureConfig::default())?;
    if let Some(v) = a.n_mels {
        cfg.n_mels = v;
    }
    if let Some(v) = a.fft_size {
        cfg.fft_size = v;
    }
    if let Some(v) = a.hop {
        cfg.hop = v;
    }
    if let Some(v) = a.fmin {
        cfg.fmin = v;
    }
    if let Some(v) = a.fmax {
        cfg.fmax = v;
    }
    let out = a.out.unwrap_or_else(|| a.input.with_extension("feat"));

    let (samples, sr) = read_wav(&a.input)?;
    cfg.sample_rate = sr;
    log_config(
        "featurize",
        &serde_json::json!({ "input": a.input, "out": out, "features": cfg }),
    );
    let m = logmel::<f32>(&samples, &cfg)?;
    m.save(&out)?;
    write_config_sidecar(&out, &cfg)?;
    println!("frames={} bins={}", m.grid.n_frames, m.values.ncols());
    Ok(())
}

/// Dataset manifest: enough to reload the pieces and re-generate them.
#[derive(Serialize, Deserialize)]
struct Manifest {
    rep: Representation,
    seed: u64,
    count: usize,
    /// Hash of the resolved synth config, for cache invalidation
    config_hash: String,
    synth: SynthConfig,
    pieces: Vec<ManifestPiece>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPiece {
    features: String,
    roll: String,
    midi: String,
    seed: u64,
}

fn cmd_synth(a: SynthArgs, overlay: &Overlay) -> Result<()> {
    let mut cfg: SynthConfig = overlay.section("synth", SynthConfig::default())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.pitches {
        cfg.n_pitches = v;
    }
    if let Some(v) = a.bins {
        cfg.n_bins = v;
    }
    if let Some(v) = a.duration {
        cfg.duration = v;
    }
    if let Some(v) = a.strike_rate {
        cfg.strike_rate = v;
    }
    log_config(
        "synth",
        &serde_json::json!({
            "out_dir": a.out_dir, "count": a.count, "rep": a.rep, "synth": cfg,
        }),
    );

    std::fs::create_dir_all(&a.out_dir)?;
    let base_seed = cfg.seed;
    let mut pieces = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let piece_cfg = SynthConfig {
            seed: base_seed + i as u64,
            ..cfg.clone()
        };
        let (perf, feats) = gen_piece::<f32>(&piece_cfg)?;
        let roll = encode_states(&perf, a.rep, feats.grid, piece_cfg.n_pitches)?;
        let stem = format!("piece-{i:03}");
        let feat_name = format!("{stem}.feat");
        let roll_name = format!("{stem}.roll");
        let midi_name = format!("{stem}.mid");
        feats.save(&a.out_dir.join(&feat_name))?;
        roll.save(&a.out_dir.join(&roll_name))?;
        std::fs::write(a.out_dir.join(&midi_name), write_performance(&perf))?;
        pieces.push(ManifestPiece {
            features: feat_name,
            roll: roll_name,
            midi: midi_name,
            seed: piece_cfg.seed,
        });
    }

    let manifest = Manifest {
        rep: a.rep,
        seed: base_seed,
        count: a.count,
        config_hash: config_hash(&cfg, a.rep)?,
        synth: cfg,
        pieces,
    };
    std::fs::write(
        a.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} piece(s) to {}", a.count, a.out_dir.display());
    Ok(())
}

fn config_hash(cfg: &SynthConfig, rep: Representation) -> Result<String> {
    let mut h = DefaultHasher::new();
    serde_json::to_string(cfg)?.hash(&mut h);
    rep.name().hash(&mut h);
    Ok(format!("{:016x}", h.finish()))
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, dir))
}

fn cmd_train(a: TrainArgs, overlay: &Overlay) -> Result<()> {
    let (manifest, dir) = load_manifest(&a.data)?;
    let rep = a.rep.unwrap_or(manifest.rep);
    let base = match a.preset {
        Preset::Toy => ModelConfig::toy(rep),
        Preset::Full => ModelConfig::full(rep),
        Preset::Small => ModelConfig::small(rep),
    };
    let mut cfg: ModelConfig = overlay.section("model", base)?;
    if a.rep.is_some() {
        cfg.rep = rep;
    }
    if cfg.rep != manifest.rep {
        return Err(Error::RepMismatch {
            expected: cfg.rep.name().into(),
            got: manifest.rep.name().into(),
        });
    }

    let mut hyper: TrainHyper = overlay.section("train", TrainHyper::default())?;
    if let Some(v) = a.steps {
        hyper.steps = v;
    }
    if let Some(v) = a.batch {
        hyper.batch_size = v;
    }
    if let Some(v) = a.lr {
        hyper.lr = v;
    }
    if let Some(v) = a.seed {
        hyper.seed = v;
    }
    if let Some(v) = a.segment_frames {
        hyper.segment_frames = v;
    }
    if let Some(v) = a.checkpoint_every {
        hyper.checkpoint_every = v;
    }
    if let Some(v) = a.checkpoint_dir.clone() {
        hyper.checkpoint_dir = Some(v);
    }
    log_config(
        "train",
        &serde_json::json!({
            "data": a.data, "out": a.out, "init": a.init,
            "model": cfg, "hyper": hyper,
        }),
    );

    let mut dataset = Vec::with_capacity(manifest.pieces.len());
    for piece in &manifest.pieces {
        let feats = FeatureMatrix::<f32>::load(&dir.join(&piece.features))?;
        let roll = StateRoll::load(&dir.join(&piece.roll))?;
        if roll.rep != cfg.rep {
            return Err(Error::RepMismatch {
                expected: cfg.rep.name().into(),
                got: roll.rep.name().into(),
            });
        }
        dataset.push((feats, roll));
    }

    let report = match &a.init {
        Some(path) => {
            let params: ModelParams<f32> = checkpoint::load(path)?;
            if params.config != cfg {
                return Err(Error::config(
                    "checkpoint config does not match the resolved model config",
                ));
            }
            train_from(params, &dataset, &hyper)?
        }
        None => train::<f32>(&cfg, &dataset, &hyper)?,
    };
    checkpoint::save(&a.out, &report.params)?;
    if let Some(path) = &a.loss_csv {
        std::fs::write(path, keyroll_core::model::train::loss_curve_csv(&report.losses))?;
    }
    println!(
        "trained {} step(s), final loss {:.6}, {} parameters -> {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.params.param_count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    log_config(
        "infer",
        &serde_json::json!({ "model": a.model, "features": a.features, "out": a.out }),
    );
    let params: ModelParams<f32> = checkpoint::load(&a.model)?;
    let feats = FeatureMatrix::<f32>::load(&a.features)?;
    let pt = infer(&params, &feats, InferMode::FreeRunning)?;
    pt.save(&a.out)?;
    println!(
        "frames={} pitches={} states={}",
        pt.n_frames(),
        pt.n_pitches(),
        pt.rep.n_states()
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs, overlay: &Overlay) -> Result<()> {
    let mut beam: BeamParams = overlay.section("beam", BeamParams::default())?;
    if let Some(v) = a.beam_threshold {
        beam.trigger_threshold = v;
    }
    if let Some(v) = a.lookahead {
        beam.lookahead = v;
    }
    if let Some(v) = a.states_per_frame {
        beam.states_per_frame = v;
    }
    log_config(
        "decode",
        &serde_json::json!({
            "probs": a.probs, "out": a.out, "roll_out": a.roll_out,
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "beam": if a.mode == DecodeMode::Beam { Some(beam) } else { None },
        }),
    );

    let pt = ProbTensor::<f32>::load(&a.probs)?;
    let roll = match a.mode {
        DecodeMode::Greedy => greedy_decode(&pt),
        DecodeMode::Beam => {
            // clap enforces both flags in beam mode
            let model_path = a.model.as_ref().expect("required_if_eq");
            let feat_path = a.features.as_ref().expect("required_if_eq");
            let params: ModelParams<f32> = checkpoint::load(model_path)?;
            let feats = FeatureMatrix::<f32>::load(feat_path)?;
            beam_decode(&pt, &beam, &params, &feats)?
        }
    };
    let notes = states_to_notes(&roll)?;
    std::fs::write(&a.out, notes_csv(&notes))?;
    if let Some(path) = &a.roll_out {
        roll.save(path)?;
    }
    println!("decoded {} note(s) -> {}", notes.len(), a.out.display());
    Ok(())
}

fn load_midi_notes(path: &Path) -> Result<(Vec<keyroll_core::NoteEvent>, f64)> {
    let bytes = std::fs::read(path)?;
    let (raw, warnings) = parse_midi(&bytes)?;
    report_warnings(&warnings);
    let perf = elongate_offsets(&raw);
    Ok((perf.notes.clone(), perf.duration))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let sample_rate = a.sample_rate.unwrap_or(16_000);
    let hop = a.hop.unwrap_or(512);
    log_config(
        "eval",
        &serde_json::json!({
            "reference": a.reference, "estimate": a.estimate,
            "onset_tol": a.onset_tol, "sample_rate": sample_rate, "hop": hop,
        }),
    );

    let (ref_notes, ref_dur) = load_midi_notes(&a.reference)?;
    let (est_notes, est_dur) = load_midi_notes(&a.estimate)?;
    let grid = FrameGrid::for_duration(sample_rate, hop, ref_dur.max(est_dur))?;
    let to_roll = |notes: &[keyroll_core::NoteEvent], dur: f64| -> Result<StateRoll> {
        let perf = keyroll_core::Performance::new(notes.to_vec(), Vec::new(), dur)?;
        encode_states(&perf, Representation::Five, grid, N_KEYS)
    };
    let common = ref_dur.max(est_dur);
    let frame = frame_metrics(&to_roll(&ref_notes, common)?, &to_roll(&est_notes, common)?)?;
    let onset = note_onset_metrics(&ref_notes, &est_notes, a.onset_tol);
    let offset = note_offset_metrics(&ref_notes, &est_notes, a.onset_tol);

    let rows = [
        ("frame", frame),
        ("note-onset", onset),
        ("note-with-offset", offset),
    ];
    println!("{:<18}{:>11}{:>9}{:>9}", "", "precision", "recall", "f1");
    for (name, prf) in &rows {
        println!(
            "{:<18}{:>11.4}{:>9.4}{:>9.4}",
            name, prf.precision, prf.recall, prf.f1
        );
    }
    if let Some(path) = &a.csv {
        let named: Vec<(&str, PRF)> = rows.iter().map(|(n, p)| (*n, *p)).collect();
        std::fs::write(path, metrics_csv(&named))?;
    }
    Ok(())
}

fn cmd_calib(a: CalibArgs) -> Result<()> {
    log_config(
        "calib",
        &serde_json::json!({
            "probs": a.probs, "roll": a.roll,
            "out_csv": a.out_csv, "out_svg": a.out_svg, "by_state": a.by_state,
        }),
    );
    let pt = ProbTensor::<f32>::load(&a.probs)?;
    let reference = StateRoll::load(&a.roll)?;
    let table = calibration(&pt, &reference)?;
    std::fs::write(&a.out_csv, table.to_csv())?;
    std::fs::write(&a.out_svg, table.to_svg())?;
    println!("ece={:.6} predictions={}", table.ece, table.total);
    if a.by_state {
        let per_state = calibration_by_predicted_state(&pt, &reference)?;
        for (name, t) in pt.rep.state_names().iter().zip(&per_state) {
            println!("state {name}: ece={:.6} predictions={}", t.ece, t.total);
        }
    }
    Ok(())
}
