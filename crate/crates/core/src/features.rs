//! Log-compressed mel spectrogram features from mono audio.
//!
//! Pipeline: centered STFT (periodic Hann, reflect padding), power
//! spectrum, HTK-mel triangular filterbank, then `ln(x + log_floor)`.
//! Frame count is `1 + floor(len / hop)` so a signal of exactly one hop
//! gets two frames (centers at 0 and hop). All spectral math runs in f64
//! and is cast to the requested scalar at the very end.

use crate::dump;
use crate::error::Error;
use crate::noterep::FrameGrid;
use crate::scalar::{fr, Scalar};
use crate::Result;
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Spectrogram settings. Defaults mirror the transcription setup:
/// 16 kHz audio, 2048-point FFT, 512-sample hop, 229 mel bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: u32,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Additive floor inside the log so silence stays finite.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            fft_size: 2048,
            hop: 512,
            n_mels: 229,
            fmin: 30.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop == 0 {
            return Err(Error::config("sample_rate and hop must be positive"));
        }
        if self.hop as usize > self.fft_size {
            return Err(Error::config(format!(
                "hop {} exceeds fft_size {}",
                self.hop, self.fft_size
            )));
        }
        if self.n_mels < 1 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::config(format!(
                "mel range [{}, {}] must satisfy 0 <= fmin < fmax",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::config(format!(
                "fmax {} exceeds Nyquist {}",
                self.fmax,
                self.sample_rate as f64 / 2.0
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    /// Frame grid for `n_samples` of audio: `1 + floor(n / hop)` frames.
    pub fn grid_for(&self, n_samples: usize) -> FrameGrid {
        FrameGrid {
            sample_rate: self.sample_rate,
            hop: self.hop,
            n_frames: 1 + n_samples / self.hop as usize,
        }
    }
}

/// T x F matrix of per-frame feature values on a frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T: Scalar> {
    pub grid: FrameGrid,
    pub values: Array2<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(grid: FrameGrid, values: Array2<T>) -> Result<Self> {
        if values.nrows() != grid.n_frames {
            return Err(Error::shape(format!(
                "feature matrix has {} rows, grid has {} frames",
                values.nrows(),
                grid.n_frames
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("feature matrix contains non-finite values"));
        }
        Ok(FeatureMatrix { grid, values })
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Periodic Hann window: `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// One-sided power spectrogram: `T x (fft_size/2 + 1)`, frame `t`
/// centered at sample `t * hop` with reflect padding at the edges.
pub fn stft_power(samples: &[f64], cfg: &FeatureConfig) -> Result<(Array2<f64>, FrameGrid)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("cannot compute features of empty audio"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("audio contains non-finite samples"));
    }
    let n = cfg.fft_size;
    let half = n / 2;
    let grid = cfg.grid_for(samples.len());
    let window = hann_window(n);
    let n_bins = half + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut power = Array2::<f64>::zeros((grid.n_frames, n_bins));
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); n];

    for t in 0..grid.n_frames {
        let center = (t * cfg.hop as usize) as isize;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(center - half as isize + j as isize, samples.len());
            *slot = Complex::new(samples[idx] * window[j], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[t, k]] = buf[k].norm_sqr();
        }
    }
    Ok((power, grid))
}

/// Triangular mel filterbank, `n_mels x (fft_size/2 + 1)`, triangles
/// linear in mel with unit peaks.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    let bin_mels: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64))
        .collect();
    for m in 0..cfg.n_mels {
        let left = mel_lo + m as f64 * step;
        let center = left + step;
        let right = center + step;
        for k in 0..n_bins {
            let mel = bin_mels[k];
            let w = if mel <= left || mel >= right {
                0.0
            } else if mel <= center {
                (mel - left) / step
            } else {
                (right - mel) / step
            };
            fb[[m, k]] = w;
        }
    }
    Ok(fb)
}

/// Log-compressed mel spectrogram of mono audio at `cfg.sample_rate`.
pub fn logmel<T: Scalar>(samples: &[f64], cfg: &FeatureConfig) -> Result<FeatureMatrix<T>> {
    let (power, grid) = stft_power(samples, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let mel = power.dot(&fb.t());
    let values = mel.mapv(|x| fr::<T>((x + cfg.log_floor).ln()));
    FeatureMatrix::new(grid, values)
}

/// Read a WAV file as mono f64 in [-1, 1]; channels are averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Write mono f64 samples as 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    for &s in samples {
        // scale matches the reader's 1 << 15 so a round trip stays within
        // half an lsb; the positive rail clips by one step
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    Ok(())
}

/// Binary feature format: magic, sample_rate u32, hop u32, T u32, F u32,
/// then T*F row-major f32 values, all little-endian. The JSON sidecar at
/// `<path>.json` records the `FeatureConfig`.
pub const FEATURE_MAGIC: &[u8; 8] = b"KRFEAT1\0";

impl<T: Scalar> FeatureMatrix<T> {
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        dump::write_magic(w, FEATURE_MAGIC)?;
        dump::write_u32(w, self.grid.sample_rate)?;
        dump::write_u32(w, self.grid.hop)?;
        dump::write_u32(w, self.n_frames() as u32)?;
        dump::write_u32(w, self.n_bins() as u32)?;
        let flat: Vec<f32> = self.values.iter().map(|v| v.to_f32().unwrap()).collect();
        dump::write_f32s(w, &flat)
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self> {
        dump::expect_magic(r, FEATURE_MAGIC, "feature matrix")?;
        let sample_rate = dump::read_u32(r)?;
        let hop = dump::read_u32(r)?;
        let t = dump::read_u32(r)? as usize;
        let f = dump::read_u32(r)? as usize;
        let flat = dump::read_f32s(r, t * f)?;
        let values = Array2::from_shape_vec((t, f), flat.iter().map(|&v| fr::<T>(v as f64)).collect())
            .map_err(|e| Error::shape(e.to_string()))?;
        FeatureMatrix::new(FrameGrid::new(sample_rate, hop, t)?, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn write_config_sidecar(feature_path: &Path, cfg: &FeatureConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(sidecar_path(feature_path), json)?;
    Ok(())
}

pub fn read_config_sidecar(feature_path: &Path) -> Result<FeatureConfig> {
    let text = std::fs::read_to_string(sidecar_path(feature_path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_gives_log_floor_everywhere() {
        let cfg = FeatureConfig::default();
        let samples = vec![0.0f64; 16000];
        let m = logmel::<f64>(&samples, &cfg).unwrap();
        assert_eq!(m.n_frames(), 32); // 1 + floor(16000/512)
        assert_eq!(m.n_bins(), 229);
        let expect = (1e-5f64).ln();
        for &v in m.values.iter() {
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn empty_and_non_finite_inputs_error() {
        let cfg = FeatureConfig::default();
        assert!(logmel::<f64>(&[], &cfg).is_err());
        assert!(logmel::<f64>(&[0.1, f64::NAN, 0.2], &cfg).is_err());
    }

    #[test]
    fn sine_peaks_in_the_analytic_mel_bin() {
        let cfg = FeatureConfig::default();
        let sr = cfg.sample_rate as f64;
        let freq = 440.0;
        let samples: Vec<f64> = (0..16000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
            .collect();
        let m = logmel::<f64>(&samples, &cfg).unwrap();

        // analytic oracle: evaluate each triangle at 440 Hz directly and
        // take the best-responding bin
        let mel_lo = hz_to_mel(cfg.fmin);
        let step = (hz_to_mel(cfg.fmax) - mel_lo) / (cfg.n_mels + 1) as f64;
        let mel_f = hz_to_mel(freq);
        let mut best = (0, f64::MIN);
        for b in 0..cfg.n_mels {
            let left = mel_lo + b as f64 * step;
            let center = left + step;
            let right = center + step;
            let w = if mel_f <= left || mel_f >= right {
                0.0
            } else if mel_f <= center {
                (mel_f - left) / step
            } else {
                (right - mel_f) / step
            };
            if w > best.1 {
                best = (b, w);
            }
        }
        let oracle_bin = best.0;

        // interior frames only: edges see reflect padding
        for t in 3..m.n_frames() - 3 {
            let row = m.values.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, oracle_bin, "frame {t}");
        }
    }

    #[test]
    fn windowed_frame_power_satisfies_parseval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let cfg = FeatureConfig::default();
        let samples: Vec<f64> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (power, _) = stft_power(&samples, &cfg).unwrap();

        // time-domain energy of the same windowed frame, computed directly
        let n = cfg.fft_size;
        let window = hann_window(n);
        let t = 10usize; // interior frame, no padding involved
        let center = t * cfg.hop as usize;
        let time_energy: f64 = (0..n)
            .map(|j| {
                let x = samples[center - n / 2 + j] * window[j];
                x * x
            })
            .sum();

        // one-sided power back to full-spectrum sum
        let mut spec_sum = power[[t, 0]] + power[[t, n / 2]];
        for k in 1..n / 2 {
            spec_sum += 2.0 * power[[t, k]];
        }
        let spec_energy = spec_sum / n as f64;
        assert!(
            (time_energy - spec_energy).abs() / time_energy < 1e-6,
            "time {time_energy} vs spectral {spec_energy}"
        );
    }

    #[test]
    fn one_hop_delay_shifts_interior_frames() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let cfg = FeatureConfig::default();
        let samples: Vec<f64> = (0..8192).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hop = cfg.hop as usize;
        let mut delayed = vec![0.0f64; hop];
        delayed.extend_from_slice(&samples);

        let a = logmel::<f64>(&samples, &cfg).unwrap();
        let b = logmel::<f64>(&delayed, &cfg).unwrap();
        // frames whose fft window stays inside both signals
        let margin = cfg.fft_size / 2 / hop + 1;
        for t in margin..a.n_frames() - margin {
            for k in 0..a.n_bins() {
                assert_eq!(a.values[[t, k]], b.values[[t + 1, k]], "frame {t} bin {k}");
            }
        }
    }

    #[test]
    fn amplitude_gain_never_decreases_output() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let cfg = FeatureConfig::default();
        let samples: Vec<f64> = (0..6000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let scaled: Vec<f64> = samples.iter().map(|&x| 2.0 * x).collect();
        let a = logmel::<f64>(&samples, &cfg).unwrap();
        let b = logmel::<f64>(&scaled, &cfg).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let samples: Vec<f64> = (0..4000)
            .map(|i| 0.6 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin())
            .collect();
        write_wav(&path, &samples, 16000).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn feature_dump_round_trip_with_sidecar() {
        let cfg = FeatureConfig {
            n_mels: 10,
            ..Default::default()
        };
        let samples: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.01).sin()).collect();
        let m = logmel::<f32>(&samples, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        m.save(&path).unwrap();
        write_config_sidecar(&path, &cfg).unwrap();

        let back = FeatureMatrix::<f32>::load(&path).unwrap();
        assert_eq!(back.grid, m.grid);
        assert_eq!(back.values, m.values);
        let cfg_back = read_config_sidecar(&path).unwrap();
        assert_eq!(cfg_back, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = FeatureConfig::default();
        cfg.hop = 4096;
        assert!(cfg.validate().is_err());
        let mut cfg = FeatureConfig::default();
        cfg.n_mels = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = FeatureConfig::default();
        cfg.fmax = 9000.0;
        assert!(cfg.validate().is_err());
    }
}
