//! Autoregressive CRNN over per-pitch note states.
//!
//! Per frame: a convolutional front-end summarizes a 7-frame window of
//! log-mel input into an acoustic latent `h_a`; the previous frame's
//! per-pitch state one-hots pass through a shared embedding table, are
//! concatenated with `h_a`, and drive a unidirectional LSTM stack; one
//! softmax head per pitch maps the top hidden vector to a distribution
//! over note states. A config flag removes the feedback path entirely,
//! giving the non-autoregressive ablation.
//!
//! Everything is generic over the scalar type: f32 is the working
//! precision, f64 backs the gradient checks and the bitwise
//! incremental-equals-batch guarantees.

pub mod checkpoint;
pub mod cnn;
pub mod lstm;
pub mod train;

pub use cnn::{Conv2d, Dense};
pub use lstm::LstmLayer;
pub use train::{train, train_from, TrainHyper, TrainReport};

use crate::decode::ProbTensor;
use crate::error::Error;
use crate::Result;
use crate::features::FeatureMatrix;
use crate::noterep::{Representation, StateRoll};
use crate::scalar::{argmax_tie_low, fr, Scalar};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Frames of input feeding each output frame (3 past, current, 3 future).
pub const RECEPTIVE_FIELD: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rep: Representation,
    pub n_pitches: usize,
    pub n_mels: usize,
    pub conv_channels: [usize; 3],
    pub fc_acoustic: usize,
    pub embed_dim: usize,
    pub lstm_width: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub autoregressive: bool,
}

impl ModelConfig {
    /// Full-scale configuration (88 keys, 229 mel bins).
    pub fn full(rep: Representation) -> Self {
        ModelConfig {
            rep,
            n_pitches: 88,
            n_mels: 229,
            conv_channels: [48, 48, 96],
            fc_acoustic: 768,
            embed_dim: 2,
            lstm_width: 768,
            lstm_layers: 2,
            dropout: 0.25,
            autoregressive: true,
        }
    }

    /// Full-scale acoustic stack with the narrower 256-wide LSTM.
    pub fn small(rep: Representation) -> Self {
        ModelConfig {
            lstm_width: 256,
            ..Self::full(rep)
        }
    }

    /// Desk-scale configuration matching the synthetic corpus defaults.
    pub fn toy(rep: Representation) -> Self {
        ModelConfig {
            rep,
            n_pitches: 16,
            n_mels: 64,
            conv_channels: [8, 8, 16],
            fc_acoustic: 64,
            embed_dim: 2,
            lstm_width: 64,
            lstm_layers: 2,
            dropout: 0.0,
            autoregressive: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pitches == 0 {
            return Err(Error::config("n_pitches must be >= 1"));
        }
        if self.n_mels < 4 {
            return Err(Error::config("n_mels must survive two 2x pools"));
        }
        if self.conv_channels.iter().any(|&c| c == 0)
            || self.fc_acoustic == 0
            || self.embed_dim == 0
            || self.lstm_width == 0
            || self.lstm_layers == 0
        {
            return Err(Error::config("all widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.rep.n_states()
    }

    /// Mel bins after the two frequency max-pools.
    pub fn pooled_bins(&self) -> usize {
        self.n_mels / 2 / 2
    }

    /// Width of the flattened conv output entering the acoustic FC.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels[2] * self.pooled_bins()
    }

    /// Width of the LSTM input: acoustic latent, plus the concatenated
    /// per-pitch embeddings when the feedback path is enabled.
    pub fn lstm_input_dim(&self) -> usize {
        let fb = if self.autoregressive {
            self.embed_dim * self.n_pitches
        } else {
            0
        };
        self.fc_acoustic + fb
    }

    /// Analytic parameter count; tests pin this against the summed
    /// tensor sizes of an instantiated model.
    pub fn param_count(&self) -> usize {
        let s = self.n_states();
        let [c1, c2, c3] = self.conv_channels;
        let conv = c1 * 9 + c1 + c2 * (c1 * 9) + c2 + c3 * (c2 * 9) + c3;
        let fc = self.fc_acoustic * self.flat_dim() + self.fc_acoustic;
        let embed = if self.autoregressive {
            s * self.embed_dim
        } else {
            0
        };
        let h = self.lstm_width;
        let mut lstm = 0;
        for layer in 0..self.lstm_layers {
            let input = if layer == 0 { self.lstm_input_dim() } else { h };
            lstm += 4 * h * input + 4 * h * h + 4 * h;
        }
        let heads = self.n_pitches * (s * h + s);
        conv + fc + embed + lstm + heads
    }

    pub fn receptive_field(&self) -> usize {
        RECEPTIVE_FIELD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub convs: Vec<Conv2d<T>>,
    pub fc: Dense<T>,
    /// S x embed_dim, shared across pitches; empty when non-autoregressive
    pub embedding: Array2<T>,
    pub lstm: Vec<LstmLayer<T>>,
    /// n_pitches x S x lstm_width
    pub head_w: Array3<T>,
    /// n_pitches x S
    pub head_b: Array2<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3] = config.conv_channels;
        let s = config.n_states();
        let h = config.lstm_width;
        let embedding = if config.autoregressive {
            Array2::zeros((s, config.embed_dim))
        } else {
            Array2::zeros((0, 0))
        };
        let lstm = (0..config.lstm_layers)
            .map(|l| {
                let input = if l == 0 { config.lstm_input_dim() } else { h };
                LstmLayer::zeros(h, input)
            })
            .collect();
        Ok(ModelParams {
            convs: vec![
                Conv2d::zeros(c1, 1),
                Conv2d::zeros(c2, c1),
                Conv2d::zeros(c3, c2),
            ],
            fc: Dense::zeros(config.fc_acoustic, config.flat_dim()),
            embedding,
            lstm,
            head_w: Array3::zeros((config.n_pitches, s, h)),
            head_b: Array2::zeros((config.n_pitches, s)),
            config: config.clone(),
        })
    }

    /// Seeded initialization: Xavier-uniform weight matrices, zero
    /// biases except the LSTM forget gates (set to 1), small uniform
    /// embedding entries.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // conv kernels: fans counted over the 3x3 patch
        for conv in &mut p.convs {
            let (c_out, c_in, _, _) = conv.w.dim();
            let limit = (6.0 / ((c_in * 9 + c_out * 9) as f64)).sqrt();
            for v in conv.w.iter_mut() {
                *v = fr::<T>(rng.gen_range(-limit..limit));
            }
        }
        {
            let (out, input) = p.fc.w.dim();
            let limit = (6.0 / ((input + out) as f64)).sqrt();
            for v in p.fc.w.iter_mut() {
                *v = fr::<T>(rng.gen_range(-limit..limit));
            }
        }
        for v in p.embedding.iter_mut() {
            *v = fr::<T>(rng.gen_range(-0.1..0.1));
        }
        let h = config.lstm_width;
        for layer in &mut p.lstm {
            let input = layer.input_size();
            let limit_in = (6.0 / ((input + h) as f64)).sqrt();
            for v in layer.w_input.iter_mut() {
                *v = fr::<T>(rng.gen_range(-limit_in..limit_in));
            }
            let limit_h = (6.0 / ((h + h) as f64)).sqrt();
            for v in layer.w_hidden.iter_mut() {
                *v = fr::<T>(rng.gen_range(-limit_h..limit_h));
            }
            // forget-gate block starts life open
            for j in h..2 * h {
                layer.bias[j] = T::one();
            }
        }
        {
            let s = config.n_states();
            let limit = (6.0 / ((h + s) as f64)).sqrt();
            for v in p.head_w.iter_mut() {
                *v = fr::<T>(rng.gen_range(-limit..limit));
            }
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named flat views over every parameter tensor, in a fixed order
    /// shared by the optimizer, the checkpoint format, and the
    /// finite-difference harness.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.w"), conv.w.as_slice().unwrap()));
            out.push((format!("conv{i}.b"), conv.b.as_slice().unwrap()));
        }
        out.push(("fc.w".into(), self.fc.w.as_slice().unwrap()));
        out.push(("fc.b".into(), self.fc.b.as_slice().unwrap()));
        if self.config.autoregressive {
            out.push(("embedding".into(), self.embedding.as_slice().unwrap()));
        }
        for (i, layer) in self.lstm.iter().enumerate() {
            out.push((format!("lstm{i}.w_input"), layer.w_input.as_slice().unwrap()));
            out.push((
                format!("lstm{i}.w_hidden"),
                layer.w_hidden.as_slice().unwrap(),
            ));
            out.push((format!("lstm{i}.bias"), layer.bias.as_slice().unwrap()));
        }
        out.push(("head.w".into(), self.head_w.as_slice().unwrap()));
        out.push(("head.b".into(), self.head_b.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let ar = self.config.autoregressive;
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.w"), conv.w.as_slice_mut().unwrap()));
            out.push((format!("conv{i}.b"), conv.b.as_slice_mut().unwrap()));
        }
        out.push(("fc.w".into(), self.fc.w.as_slice_mut().unwrap()));
        out.push(("fc.b".into(), self.fc.b.as_slice_mut().unwrap()));
        if ar {
            out.push(("embedding".into(), self.embedding.as_slice_mut().unwrap()));
        }
        for (i, layer) in self.lstm.iter_mut().enumerate() {
            out.push((
                format!("lstm{i}.w_input"),
                layer.w_input.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("lstm{i}.w_hidden"),
                layer.w_hidden.as_slice_mut().unwrap(),
            ));
            out.push((format!("lstm{i}.bias"), layer.bias.as_slice_mut().unwrap()));
        }
        out.push(("head.w".into(), self.head_w.as_slice_mut().unwrap()));
        out.push(("head.b".into(), self.head_b.as_slice_mut().unwrap()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Cast every tensor elementwise (f32 checkpoints to f64 test
    /// models and back).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("same config");
        let src = self.tensors();
        for ((name, dst), (sname, s)) in out.tensors_mut().into_iter().zip(src.iter()) {
            debug_assert_eq!(&name, sname);
            for (d, v) in dst.iter_mut().zip(s.iter()) {
                *d = fr::<U>(v.to_f64().unwrap());
            }
        }
        out
    }
}

/// Carry-over between frames: per-layer LSTM hidden and cell vectors
/// plus the previous frame's decoded one-hots.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T: Scalar> {
    pub h: Vec<Array1<T>>,
    pub c: Vec<Array1<T>>,
    /// n_pitches x S; row p is the one-hot of pitch p's previous state
    pub prev_y: Array2<T>,
}

impl<T: Scalar> RecurrentState<T> {
    /// All-zero carries; previous output is "off" on every pitch.
    pub fn initial(config: &ModelConfig) -> Self {
        let h = config.lstm_width;
        let mut prev_y = Array2::zeros((config.n_pitches, config.n_states()));
        for p in 0..config.n_pitches {
            prev_y[[p, 0]] = T::one();
        }
        RecurrentState {
            h: vec![Array1::zeros(h); config.lstm_layers],
            c: vec![Array1::zeros(h); config.lstm_layers],
            prev_y,
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.h.len() != config.lstm_layers
            || self.c.len() != config.lstm_layers
            || self.h.iter().any(|v| v.len() != config.lstm_width)
            || self.c.iter().any(|v| v.len() != config.lstm_width)
        {
            return Err(Error::shape("recurrent state dims do not match config"));
        }
        if self.prev_y.dim() != (config.n_pitches, config.n_states()) {
            return Err(Error::shape("prev_y dims do not match config"));
        }
        for row in self.prev_y.rows() {
            let mut ones = 0usize;
            for &v in row.iter() {
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(Error::input("prev_y entries must be 0 or 1"));
                }
            }
            if ones != 1 {
                return Err(Error::input("each prev_y row must be a one-hot"));
            }
        }
        Ok(())
    }

    /// Overwrite `prev_y` with the one-hot for `states` (one entry per
    /// pitch).
    pub fn set_prev_states(&mut self, states: &[u8]) {
        self.prev_y.fill(T::zero());
        for (p, &s) in states.iter().enumerate() {
            self.prev_y[[p, s as usize]] = T::one();
        }
    }
}

/// LSTM input for one frame: embedded feedback first, acoustic latent
/// second. Shared verbatim by the batched and incremental paths so the
/// two stay bitwise identical.
fn lstm_input<T: Scalar>(
    params: &ModelParams<T>,
    h_a: ArrayView1<T>,
    prev_y: &Array2<T>,
) -> Array1<T> {
    let cfg = &params.config;
    let mut x = Array1::<T>::zeros(cfg.lstm_input_dim());
    let mut k = 0;
    if cfg.autoregressive {
        let emb = prev_y.dot(&params.embedding); // P x E
        for p in 0..cfg.n_pitches {
            for e in 0..cfg.embed_dim {
                x[k] = emb[[p, e]];
                k += 1;
            }
        }
    }
    for &v in h_a.iter() {
        x[k] = v;
        k += 1;
    }
    x
}

/// Per-pitch softmax over head logits for one frame's top hidden vector.
fn head_probs<T: Scalar>(params: &ModelParams<T>, h_top: &Array1<T>) -> Array2<T> {
    let cfg = &params.config;
    let s = cfg.n_states();
    let mut probs = Array2::<T>::zeros((cfg.n_pitches, s));
    for p in 0..cfg.n_pitches {
        let mut row: Vec<T> = (0..s)
            .map(|j| {
                let mut acc = params.head_b[[p, j]];
                for k in 0..cfg.lstm_width {
                    acc += params.head_w[[p, j, k]] * h_top[k];
                }
                acc
            })
            .collect();
        let mx = row.iter().cloned().fold(row[0], |a, b| if b > a { b } else { a });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for (j, v) in row.iter().enumerate() {
            probs[[p, j]] = *v / sum;
        }
    }
    probs
}

/// Advance the recurrent trunk by one frame.
///
/// Consumes `state.prev_y` as the feedback input and updates the hidden
/// and cell carries in place. The caller decides what the next feedback
/// is (greedy one-hot, ground truth, or a beam hypothesis) and writes it
/// back via [`RecurrentState::set_prev_states`] before the next call.
pub fn ar_step<T: Scalar>(
    params: &ModelParams<T>,
    h_a: ArrayView1<T>,
    state: &mut RecurrentState<T>,
) -> Result<Array2<T>> {
    let cfg = &params.config;
    if h_a.len() != cfg.fc_acoustic {
        return Err(Error::shape(format!(
            "acoustic latent has width {}, config wants {}",
            h_a.len(),
            cfg.fc_acoustic
        )));
    }
    state.validate(cfg)?;
    let mut x = lstm_input(params, h_a, &state.prev_y);
    for (l, layer) in params.lstm.iter().enumerate() {
        let (h, c) = lstm::step(layer, &x, &state.h[l], &state.c[l]);
        state.h[l] = h.clone();
        state.c[l] = c;
        x = h;
    }
    Ok(head_probs(params, &x))
}

/// Acoustic front-end on a single 7-frame window (no internal padding;
/// callers supply zero frames at sequence edges). Returns the acoustic
/// latent for the center frame.
pub fn acoustic_forward<T: Scalar>(
    params: &ModelParams<T>,
    window: ArrayView2<T>,
) -> Result<Array1<T>> {
    let cfg = &params.config;
    if window.dim() != (RECEPTIVE_FIELD, cfg.n_mels) {
        return Err(Error::shape(format!(
            "expected a {}x{} window, got {}x{}",
            RECEPTIVE_FIELD,
            cfg.n_mels,
            window.dim().0,
            window.dim().1
        )));
    }
    let mut img = Array3::<T>::zeros((1, RECEPTIVE_FIELD, cfg.n_mels));
    for t in 0..RECEPTIVE_FIELD {
        for f in 0..cfg.n_mels {
            img[[0, t, f]] = window[[t, f]];
        }
    }
    let stack = cnn::ConvStack {
        convs: &params.convs,
        fc: &params.fc,
    };
    let cache = cnn::acoustic_forward_padded(&stack, &img, None);
    debug_assert_eq!(cache.h_a.nrows(), 1);
    Ok(cache.h_a.row(0).to_owned())
}

/// Acoustic latents for a whole sequence: zero-pad three frames per
/// side, run the stack once. Row t equals `acoustic_forward` on the
/// window centered at t.
pub fn acoustic_forward_seq<T: Scalar>(
    params: &ModelParams<T>,
    features: ArrayView2<T>,
) -> Result<Array2<T>> {
    let cfg = &params.config;
    if features.ncols() != cfg.n_mels {
        return Err(Error::shape(format!(
            "features have {} bins, config wants {}",
            features.ncols(),
            cfg.n_mels
        )));
    }
    let stack = cnn::ConvStack {
        convs: &params.convs,
        fc: &params.fc,
    };
    let padded = cnn::pad_time3(features);
    Ok(cnn::acoustic_forward_padded(&stack, &padded, None).h_a)
}

/// Inference feedback regime.
#[derive(Debug, Clone, Copy)]
pub enum InferMode<'a> {
    /// Feed back the greedy argmax one-hot of each frame's output.
    FreeRunning,
    /// Feed back ground-truth states (the training-time forward pass).
    TeacherForced(&'a StateRoll),
}

/// Run the full model over a feature matrix, producing per-frame,
/// per-pitch state distributions. Output at frame t depends on input
/// frames at most t+3 (the centered CNN window); everything else it
/// sees is strictly past.
pub fn infer<T: Scalar>(
    params: &ModelParams<T>,
    features: &FeatureMatrix<T>,
    mode: InferMode,
) -> Result<ProbTensor<T>> {
    let cfg = &params.config;
    let t_max = features.grid.n_frames;
    if let InferMode::TeacherForced(roll) = mode {
        if roll.grid != features.grid {
            return Err(Error::shape("roll grid does not match features"));
        }
        if roll.rep != cfg.rep {
            return Err(Error::RepMismatch {
                expected: cfg.rep.name().into(),
                got: roll.rep.name().into(),
            });
        }
        if roll.states.ncols() != cfg.n_pitches {
            return Err(Error::shape("roll pitch count does not match config"));
        }
    }
    let h_a = acoustic_forward_seq(params, features.values.view())?;
    let s = cfg.n_states();
    let mut probs = Array3::<T>::zeros((t_max, cfg.n_pitches, s));
    let mut state = RecurrentState::initial(cfg);
    for t in 0..t_max {
        let frame = ar_step(params, h_a.row(t), &mut state)?;
        for p in 0..cfg.n_pitches {
            for j in 0..s {
                probs[[t, p, j]] = frame[[p, j]];
            }
        }
        let next: Vec<u8> = match mode {
            InferMode::FreeRunning => (0..cfg.n_pitches)
                .map(|p| argmax_tie_low(frame.row(p).iter().cloned()) as u8)
                .collect(),
            InferMode::TeacherForced(roll) => {
                (0..cfg.n_pitches).map(|p| roll.states[[t, p]]).collect()
            }
        };
        state.set_prev_states(&next);
    }
    ProbTensor::new(features.grid, cfg.rep, probs)
}

/// Cross entropy between predicted distributions and a target roll:
/// the summed negative log-likelihood of the target state at every
/// (frame, pitch), accumulated in f64. `mean` divides by frames x
/// pitches. Probabilities clamp at 1e-12 before the log.
pub fn loss<T: Scalar>(probs: &ProbTensor<T>, targets: &StateRoll, mean: bool) -> Result<f64> {
    if probs.grid != targets.grid {
        return Err(Error::shape("prob tensor and roll grids differ"));
    }
    if probs.rep != targets.rep {
        return Err(Error::RepMismatch {
            expected: probs.rep.name().into(),
            got: targets.rep.name().into(),
        });
    }
    if probs.n_pitches() != targets.states.ncols() {
        return Err(Error::shape("prob tensor and roll pitch counts differ"));
    }
    let (t_max, p_max, _) = probs.probs.dim();
    let mut total = 0.0f64;
    for t in 0..t_max {
        for p in 0..p_max {
            let y = targets.states[[t, p]] as usize;
            total -= clamp_prob(probs.probs[[t, p, y]].to_f64().unwrap()).ln();
        }
    }
    if mean && t_max * p_max > 0 {
        total /= (t_max * p_max) as f64;
    }
    Ok(total)
}

// f64::max would silently replace NaN with the floor; a poisoned
// probability has to stay NaN so divergence checks can see it
fn clamp_prob(p: f64) -> f64 {
    if p.is_nan() {
        f64::NAN
    } else {
        p.max(1e-12)
    }
}

/// Loss and full parameter gradients of one teacher-forced sequence,
/// dropout disabled. One unit of the training step, exposed for custom
/// optimization loops and gradient checks.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    features: &FeatureMatrix<T>,
    roll: &StateRoll,
    mean: bool,
) -> Result<(f64, ModelParams<T>)> {
    if features.grid != roll.grid {
        return Err(Error::shape("roll grid does not match features"));
    }
    let fwd = forward_teacher_forced(params, features.values.view(), roll, None)?;
    Ok(backward_teacher_forced(params, &fwd, roll, mean))
}

/// Everything the backward pass needs from a teacher-forced forward
/// sweep.
pub(crate) struct SeqForward<T: Scalar> {
    acoustic: cnn::AcousticCache<T>,
    steps: Vec<Vec<lstm::StepCache<T>>>,
    prev_ys: Vec<Array2<T>>,
    pub probs: Array3<T>,
}

/// Teacher-forced forward pass over one sequence, keeping caches.
/// Feedback at frame t is the ground-truth state at t-1 ("off" for all
/// pitches at t=0).
pub(crate) fn forward_teacher_forced<T: Scalar>(
    params: &ModelParams<T>,
    features: ArrayView2<T>,
    roll: &StateRoll,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<SeqForward<T>> {
    let cfg = &params.config;
    let t_max = features.nrows();
    if features.ncols() != cfg.n_mels {
        return Err(Error::shape("feature bins do not match config"));
    }
    if roll.states.nrows() != t_max || roll.states.ncols() != cfg.n_pitches {
        return Err(Error::shape("roll dims do not match features/config"));
    }
    if roll.rep != cfg.rep {
        return Err(Error::RepMismatch {
            expected: cfg.rep.name().into(),
            got: roll.rep.name().into(),
        });
    }
    let stack = cnn::ConvStack {
        convs: &params.convs,
        fc: &params.fc,
    };
    let padded = cnn::pad_time3(features);
    let acoustic = cnn::acoustic_forward_padded(&stack, &padded, dropout);
    let s = cfg.n_states();
    let mut probs = Array3::<T>::zeros((t_max, cfg.n_pitches, s));
    let mut steps: Vec<Vec<lstm::StepCache<T>>> = Vec::with_capacity(t_max);
    let mut prev_ys: Vec<Array2<T>> = Vec::with_capacity(t_max);
    let mut h_prev: Vec<Array1<T>> =
        vec![Array1::zeros(cfg.lstm_width); cfg.lstm_layers];
    let mut c_prev: Vec<Array1<T>> =
        vec![Array1::zeros(cfg.lstm_width); cfg.lstm_layers];
    for t in 0..t_max {
        let mut prev_y = Array2::<T>::zeros((cfg.n_pitches, s));
        for p in 0..cfg.n_pitches {
            let st = if t == 0 {
                0
            } else {
                roll.states[[t - 1, p]] as usize
            };
            prev_y[[p, st]] = T::one();
        }
        let mut x = lstm_input(params, acoustic.h_a.row(t), &prev_y);
        let mut frame_steps = Vec::with_capacity(cfg.lstm_layers);
        for (l, layer) in params.lstm.iter().enumerate() {
            let cache = lstm::step_cached(layer, x, h_prev[l].clone(), c_prev[l].clone());
            h_prev[l] = cache.h.clone();
            c_prev[l] = cache.c.clone();
            x = cache.h.clone();
            frame_steps.push(cache);
        }
        let frame_probs = head_probs(params, &x);
        for p in 0..cfg.n_pitches {
            for j in 0..s {
                probs[[t, p, j]] = frame_probs[[p, j]];
            }
        }
        steps.push(frame_steps);
        prev_ys.push(prev_y);
    }
    Ok(SeqForward {
        acoustic,
        steps,
        prev_ys,
        probs,
    })
}

/// Cross-entropy loss and full parameter gradients for one sequence.
/// `mean` scales both by 1/(frames x pitches). Loss accumulates in f64
/// regardless of T.
pub(crate) fn backward_teacher_forced<T: Scalar>(
    params: &ModelParams<T>,
    fwd: &SeqForward<T>,
    roll: &StateRoll,
    mean: bool,
) -> (f64, ModelParams<T>) {
    let cfg = &params.config;
    let (t_max, p_max, s) = fwd.probs.dim();
    let scale_f = if mean { 1.0 / (t_max * p_max) as f64 } else { 1.0 };
    let scale = fr::<T>(scale_f);
    let mut grads = ModelParams::<T>::zeros(cfg).expect("config already validated");
    let mut loss_acc = 0.0f64;

    // softmax + cross entropy collapse to probs - onehot at the logits
    let mut d_h_top: Vec<Array1<T>> = vec![Array1::zeros(cfg.lstm_width); t_max];
    for t in 0..t_max {
        for p in 0..p_max {
            let y = roll.states[[t, p]] as usize;
            loss_acc -= clamp_prob(fwd.probs[[t, p, y]].to_f64().unwrap()).ln();
            for j in 0..s {
                let mut d = fwd.probs[[t, p, j]];
                if j == y {
                    d -= T::one();
                }
                d *= scale;
                if d == T::zero() {
                    continue;
                }
                grads.head_b[[p, j]] += d;
                let h_top = &fwd.steps[t][cfg.lstm_layers - 1].h;
                for k in 0..cfg.lstm_width {
                    grads.head_w[[p, j, k]] += d * h_top[k];
                    d_h_top[t][k] += d * params.head_w[[p, j, k]];
                }
            }
        }
    }
    loss_acc *= scale_f;

    // backpropagate through time, top layer to bottom
    let mut d_h_carry: Vec<Array1<T>> =
        vec![Array1::zeros(cfg.lstm_width); cfg.lstm_layers];
    let mut d_c_carry: Vec<Array1<T>> =
        vec![Array1::zeros(cfg.lstm_width); cfg.lstm_layers];
    let mut d_h_a = Array2::<T>::zeros(fwd.acoustic.h_a.dim());
    for t in (0..t_max).rev() {
        let mut d_from_above = d_h_top[t].clone();
        for l in (0..cfg.lstm_layers).rev() {
            let d_h = &d_h_carry[l] + &d_from_above;
            let (d_x, d_h_prev, d_c_prev) = lstm::step_backward(
                &params.lstm[l],
                &fwd.steps[t][l],
                &d_h,
                &d_c_carry[l],
                &mut grads.lstm[l],
            );
            d_h_carry[l] = d_h_prev;
            d_c_carry[l] = d_c_prev;
            d_from_above = d_x;
        }
        // split the bottom input gradient into feedback and acoustic parts
        let mut k = 0;
        if cfg.autoregressive {
            for p in 0..cfg.n_pitches {
                for e in 0..cfg.embed_dim {
                    let d = d_from_above[k];
                    k += 1;
                    if d == T::zero() {
                        continue;
                    }
                    // prev_y rows are one-hots: only the active state row
                    // of the table sees gradient
                    for st in 0..s {
                        if fwd.prev_ys[t][[p, st]] == T::one() {
                            grads.embedding[[st, e]] += d;
                        }
                    }
                }
            }
        }
        for j in 0..cfg.fc_acoustic {
            d_h_a[[t, j]] = d_from_above[k];
            k += 1;
        }
    }

    let stack = cnn::ConvStack {
        convs: &params.convs,
        fc: &params.fc,
    };
    let mut conv_grads = cnn::AcousticGrads {
        convs: &mut grads.convs,
        fc: &mut grads.fc,
    };
    cnn::acoustic_backward_padded(&stack, &fwd.acoustic, &d_h_a, &mut conv_grads);
    (loss_acc, grads)
}
