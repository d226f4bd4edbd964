//! Units back to audio: centroid lookup, non-negative mel inversion and
//! Griffin-Lim phase reconstruction.
//!
//! The pitch stream is not used; Griffin-Lim has no F0 control.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, Waveform};
use crate::error::{Error, Result};
use crate::features::MelFilterbank;
use crate::features::Spectrogram;
use crate::features::{dct2, log_mel, FeatureConfig, FeatureKind, FeatureSequence, LOG_FLOOR};
use crate::quantizer::{quantize, Codebook};
use crate::streams::{dedup, inflate, EncodedUtterance};

pub const OUTPUT_PEAK: f32 = 0.95;
/// Lower bound on the overlap-add normalizer of the final output,
/// relative to its maximum; keeps the one-frame edges from blowing up.
const OUTPUT_NORM_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub griffin_lim_iters: usize,
    pub nnls_iters: usize,
    pub phase_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            griffin_lim_iters: 60,
            nnls_iters: 50,
            phase_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.griffin_lim_iters == 0 {
            return Err(Error::InvalidConfig("griffin_lim_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear magnitude spectrogram, `n_frames × n_bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitudes {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
}

impl Magnitudes {
    pub fn of(spec: &Spectrogram) -> Self {
        Self {
            n_frames: spec.n_frames,
            n_bins: spec.n_bins,
            data: spec.magnitudes(),
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Spectral convergence `‖|STFT(x)| − M‖ / ‖M‖` after each iteration.
    pub convergence: Vec<f64>,
}

impl GriffinLimOutput {
    pub fn convergence_csv(&self) -> String {
        let mut s = String::from("iteration,spectral_convergence\n");
        for (i, c) in self.convergence.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, c));
        }
        s
    }
}

fn check_log_mel_codebook(cb: &Codebook, cfg: &FeatureConfig) -> Result<()> {
    if cfg.kind != FeatureKind::LogMel || cfg.normalize || cb.fingerprint() != cfg.fingerprint() {
        return Err(Error::FeatureKindMismatch);
    }
    Ok(())
}

/// Inflates `e` and replaces every unit by its centroid.
pub fn units_to_features(e: &EncodedUtterance, cb: &Codebook, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    check_log_mel_codebook(cb, cfg)?;
    if e.k as usize != cb.k() {
        return Err(Error::VocabMismatch {
            expected: cb.k() as u32,
            got: e.k,
        });
    }
    let (units, _) = inflate(e);
    let data = units.units.iter().flat_map(|&u| cb.centroid(u as usize).iter().copied()).collect();
    FeatureSequence::new(data, cb.dim(), e.frame_rate, cb.fingerprint(), "units")
}

/// Per-bin step sizes `1 / (FᵀF·1)_i`. Because `F ≥ 0`, `diag(FᵀF·1)`
/// dominates `FᵀF`, so this diagonal majorizer is a valid (and much better
/// conditioned) replacement for the global `1/L` step. Uncovered bins get 0.
fn diagonal_steps(fb: &MelFilterbank) -> Vec<f64> {
    let mut mel = vec![0.0; fb.n_mels()];
    let mut diag = vec![0.0; fb.n_bins()];
    fb.apply(&vec![1.0; fb.n_bins()], &mut mel);
    fb.apply_transpose(&mel, &mut diag);
    diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect()
}

/// `argmin_{s ≥ 0} ‖F s − m‖²` by accelerated projected gradient.
fn nnls_frame(fb: &MelFilterbank, m: &[f64], steps: &[f64], iters: usize, coverage: &[f64]) -> Vec<f64> {
    let n = fb.n_bins();
    // initial guess: each bin takes the weighted average of its bands
    let mut s = vec![0.0; n];
    fb.apply_transpose(m, &mut s);
    s.iter_mut().zip(coverage).for_each(|(s, &c)| *s = if c > 0.0 { *s / c } else { 0.0 });
    let mut y = s.clone();
    let mut prev = s.clone();
    let mut t = 1.0f64;
    let mut resid = vec![0.0; fb.n_mels()];
    let mut grad = vec![0.0; n];
    for _ in 0..iters {
        fb.apply(&y, &mut resid);
        resid.iter_mut().zip(m).for_each(|(r, m)| *r -= m);
        fb.apply_transpose(&resid, &mut grad);
        for i in 0..n {
            s[i] = (y[i] - steps[i] * grad[i]).max(0.0);
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        for i in 0..n {
            y[i] = (s[i] + momentum * (s[i] - prev[i])).max(0.0);
        }
        prev.copy_from_slice(&s);
        t = t_next;
    }
    s
}

/// Inverts log-mel frames to a non-negative linear magnitude spectrogram.
pub fn mel_to_linear(f: &FeatureSequence, cfg: &FeatureConfig, syn: &SynthesisConfig) -> Result<Magnitudes> {
    if cfg.kind != FeatureKind::LogMel || f.dim() != cfg.n_mels || f.fingerprint() != cfg.fingerprint() {
        return Err(Error::ConfigMismatch(format!(
            "features (dim {}, fingerprint {}) were not produced by the log-mel configuration {}",
            f.dim(),
            f.fingerprint(),
            cfg.fingerprint()
        )));
    }
    let fb = cfg.filterbank()?;
    let steps = diagonal_steps(&fb);
    let mut coverage = vec![0.0; fb.n_bins()];
    fb.apply_transpose(&vec![1.0; fb.n_mels()], &mut coverage);
    let n_bins = fb.n_bins();
    let rows: Vec<Vec<f64>> = f
        .as_slice()
        .par_chunks(f.dim().max(1))
        .map(|frame| {
            let m: Vec<f64> = frame.iter().map(|&v| ((v as f64).exp() - LOG_FLOOR).max(0.0)).collect();
            nnls_frame(&fb, &m, &steps, syn.nnls_iters, &coverage)
        })
        .collect();
    Ok(Magnitudes {
        n_frames: rows.len(),
        n_bins,
        data: rows.into_iter().flatten().collect(),
    })
}

/// Bin weights that make half-spectrum sums equal full-spectrum sums.
fn bin_weights(n_bins: usize, n_fft: usize) -> Vec<f64> {
    (0..n_bins)
        .map(|k| if k == 0 || 2 * k == n_fft { 1.0 } else { 2.0 })
        .collect()
}

/// Griffin-Lim phase reconstruction from seeded random phase.
///
/// Every iteration takes the least-squares inverse STFT, re-analyzes it
/// and keeps the new phase with the target magnitude. The output is
/// peak-normalized to [`OUTPUT_PEAK`]; an all-zero input gives silence.
pub fn griffin_lim(mag: &Magnitudes, cfg: &FeatureConfig, syn: &SynthesisConfig) -> Result<GriffinLimOutput> {
    syn.validate()?;
    let plan = cfg.stft_plan();
    if mag.n_bins != plan.n_bins() {
        return Err(Error::ConfigMismatch(format!(
            "magnitude has {} bins, configuration expects {}",
            mag.n_bins,
            plan.n_bins()
        )));
    }
    if let Some(i) = mag.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonFiniteInput(i / mag.n_bins.max(1)));
    }
    if mag.n_frames == 0 {
        return Ok(GriffinLimOutput {
            waveform: Waveform::new(Vec::new(), cfg.sample_rate)?,
            convergence: Vec::new(),
        });
    }
    let weights = bin_weights(mag.n_bins, cfg.n_fft);
    let norm_m: f64 = mag
        .data
        .iter()
        .enumerate()
        .map(|(i, m)| weights[i % mag.n_bins] * m * m)
        .sum::<f64>()
        .sqrt();
    let silent_len = (mag.n_frames - 1) * plan.hop() + plan.window_len();
    if norm_m == 0.0 {
        return Ok(GriffinLimOutput {
            waveform: Waveform::silence(silent_len, cfg.sample_rate)?,
            convergence: vec![0.0; syn.griffin_lim_iters],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(syn.phase_seed);
    let mut spec = Spectrogram {
        n_frames: mag.n_frames,
        n_bins: mag.n_bins,
        data: mag
            .data
            .iter()
            .map(|&m| Complex::from_polar(m, rng.random::<f64>() * 2.0 * PI))
            .collect(),
    };
    let mut convergence = Vec::with_capacity(syn.griffin_lim_iters);
    for _ in 0..syn.griffin_lim_iters {
        let x = plan.inverse(&spec, 0.0);
        let rebuilt = plan.analyze(&x)?;
        let mut err = 0.0f64;
        for (i, (slot, y)) in spec.data.iter_mut().zip(&rebuilt.data).enumerate() {
            let m = mag.data[i];
            let a = y.norm();
            err += weights[i % mag.n_bins] * (a - m) * (a - m);
            *slot = if a > 0.0 { y * (m / a) } else { Complex::new(m, 0.0) };
        }
        convergence.push(err.sqrt() / norm_m);
    }
    let x = plan.inverse(&spec, OUTPUT_NORM_FLOOR);
    let peak = x.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    let scale = if peak > 0.0 { OUTPUT_PEAK as f64 / peak } else { 0.0 };
    let samples = x.iter().map(|&v| (v * scale) as f32).collect();
    Ok(GriffinLimOutput {
        waveform: Waveform::new(samples, cfg.sample_rate)?,
        convergence,
    })
}

/// Centroid features → mel inversion → Griffin-Lim, trimmed to
/// `total_frames · hop` samples.
pub fn synthesize(
    e: &EncodedUtterance,
    cb: &Codebook,
    cfg: &FeatureConfig,
    syn: &SynthesisConfig,
) -> Result<GriffinLimOutput> {
    let features = units_to_features(e, cb, cfg)?;
    let mag = mel_to_linear(&features, cfg, syn)?;
    let mut out = griffin_lim(&mag, cfg, syn)?;
    let target = e.total_frames() * cfg.hop();
    let mut samples = out.waveform.into_samples();
    samples.resize(target, 0.0);
    out.waveform = Waveform::new(samples, cfg.sample_rate)?;
    Ok(out)
}

/// Audio → units → audio. Input at another sample rate is resampled
/// first; the output is at `cfg.sample_rate`.
pub fn resynthesize(w: &Waveform, cb: &Codebook, cfg: &FeatureConfig, syn: &SynthesisConfig) -> Result<Waveform> {
    check_log_mel_codebook(cb, cfg)?;
    let resampled;
    let w = if w.sample_rate() != cfg.sample_rate {
        resampled = resample(w, cfg.sample_rate)?;
        &resampled
    } else {
        w
    };
    let units = quantize(&log_mel(w, cfg)?, cb)?;
    let e = dedup(&units, None)?;
    Ok(synthesize(&e, cb, cfg, syn)?.waveform)
}

/// Mel-cepstral distance in dB between two log-mel sequences, averaged
/// over the frames they share. Cepstra are DCT-II of the log-mel frames;
/// coefficient 0 (overall gain) is excluded.
pub fn mel_cepstral_distance(a: &FeatureSequence, b: &FeatureSequence, n_coeffs: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let n = a.n_frames().min(b.n_frames());
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let scale = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    let total: f64 = (0..n)
        .map(|t| {
            let ca = dct2(&a.frame(t).iter().map(|&v| v as f64).collect::<Vec<_>>(), n_coeffs + 1);
            let cb = dct2(&b.frame(t).iter().map(|&v| v as f64).collect::<Vec<_>>(), n_coeffs + 1);
            // orthonormal scaling for k ≥ 1
            let norm = (2.0 / a.dim() as f64).sqrt();
            let d: f64 = (1..=n_coeffs).map(|k| ((ca[k] - cb[k]) * norm).powi(2)).sum();
            scale * d.sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::stft;
    use crate::quantizer::TrainingMeta;

    fn cfg() -> FeatureConfig {
        FeatureConfig::hubert_like_50hz()
    }

    fn tone(freq: f64, seconds: f64) -> Waveform {
        let n = (16000.0 * seconds) as usize;
        Waveform::new(
            (0..n).map(|i| (0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32).collect(),
            16000,
        )
        .unwrap()
    }

    fn codebook(rows: &[Vec<f32>]) -> Codebook {
        let dim = rows[0].len();
        Codebook::new(rows.concat(), dim, cfg().fingerprint(), TrainingMeta::default()).unwrap()
    }

    #[test]
    fn one_unit_repeated() {
        let c = cfg();
        let cb = codebook(&[vec![0.0; 40], vec![1.0; 40], vec![2.0; 40]]);
        let e = EncodedUtterance {
            units: vec![1],
            durations: vec![5],
            pitch: vec![None],
            frame_rate: 50.0,
            k: 3,
        };
        let f = units_to_features(&e, &cb, &c).unwrap();
        assert_eq!(f.n_frames(), 5);
        assert!(f.frames().all(|fr| fr == cb.centroid(1)));

        let empty = EncodedUtterance {
            units: vec![],
            durations: vec![],
            pitch: vec![],
            frame_rate: 50.0,
            k: 3,
        };
        assert!(units_to_features(&empty, &cb, &c).unwrap().is_empty());
    }

    #[test]
    fn codebook_must_be_plain_log_mel() {
        let cb = codebook(&[vec![0.0; 40], vec![1.0; 40]]);
        let e = EncodedUtterance {
            units: vec![0],
            durations: vec![1],
            pitch: vec![None],
            frame_rate: 50.0,
            k: 2,
        };
        let mut normalized = cfg();
        normalized.normalize = true;
        assert!(matches!(units_to_features(&e, &cb, &normalized), Err(Error::FeatureKindMismatch)));
        let wrong_k = EncodedUtterance { k: 3, ..e };
        assert!(matches!(units_to_features(&wrong_k, &cb, &cfg()), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn reconstruction_is_nearest_centroid() {
        let c = cfg();
        let w = tone(300.0, 0.5);
        let f = log_mel(&w, &c).unwrap();
        let rows: Vec<Vec<f32>> = (0..6).map(|i| f.frame(i * 3).iter().map(|v| v + i as f32 * 0.1).collect()).collect();
        let cb = codebook(&rows);
        let e = dedup(&quantize(&f, &cb).unwrap(), None).unwrap();
        let rebuilt = units_to_features(&e, &cb, &c).unwrap();
        for (t, frame) in f.frames().enumerate() {
            let (unit, _) = cb.nearest(frame);
            assert_eq!(rebuilt.frame(t), cb.centroid(unit as usize));
        }
        // idempotence at the feature level
        let again = quantize(&rebuilt, &cb).unwrap();
        assert_eq!(again.units, quantize(&f, &cb).unwrap().units);
    }

    fn speech_like() -> Waveform {
        let n = 16000;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / 16000.0;
                let f0 = 140.0 + 20.0 * (2.0 * PI * 3.0 * t).sin();
                (1..30)
                    .map(|h| {
                        let f = h as f64 * f0;
                        let env = (-((f - 700.0) / 300.0).powi(2)).exp() + 0.5 * (-((f - 1800.0) / 400.0).powi(2)).exp() + 0.05;
                        env * (2.0 * PI * f * t).sin() / 8.0
                    })
                    .sum::<f64>() as f32
            })
            .collect();
        Waveform::new(samples, 16000).unwrap()
    }

    #[test]
    fn mel_inversion_fixed_point() {
        let c = cfg();
        let f = log_mel(&speech_like(), &c).unwrap();
        let mag = mel_to_linear(&f, &c, &SynthesisConfig::default()).unwrap();
        assert!(mag.data.iter().all(|&v| v >= 0.0));
        let fb = c.filterbank().unwrap();
        let mut mel = vec![0.0; 40];
        // relative L2 per frame, and per band for bands carrying at least
        // 1% of the frame's peak (the rest sit at the numerical floor)
        let (mut frame_worst, mut band_worst) = (0.0f64, 0.0f64);
        for t in 0..mag.n_frames {
            fb.apply(mag.frame(t), &mut mel);
            let target: Vec<f64> = f.frame(t).iter().map(|&v| (v as f64).exp()).collect();
            let peak = target.iter().cloned().fold(0.0, f64::max);
            let num: f64 = mel.iter().zip(&target).map(|(m, x)| (m - x).powi(2)).sum();
            let den: f64 = target.iter().map(|x| x * x).sum();
            frame_worst = frame_worst.max((num / den).sqrt());
            for (m, x) in mel.iter().zip(&target) {
                if *x >= 0.01 * peak {
                    band_worst = band_worst.max(((m - x) / x).abs());
                }
            }
        }
        assert!(frame_worst < 0.05, "frame error {frame_worst}");
        assert!(band_worst < 0.05, "band error {band_worst}");
    }

    #[test]
    fn silent_frames_invert_to_zero() {
        let c = cfg();
        let floor = (LOG_FLOOR.ln()) as f32;
        let f = FeatureSequence::new(vec![floor; 40 * 3], 40, 50.0, c.fingerprint(), "").unwrap();
        let mag = mel_to_linear(&f, &c, &SynthesisConfig::default()).unwrap();
        assert!(mag.data.iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn single_band_stays_in_support() {
        let c = cfg();
        let fb = c.filterbank().unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        let mut frame = vec![floor; 40];
        frame[17] = 2.0;
        let f = FeatureSequence::new(frame, 40, 50.0, c.fingerprint(), "").unwrap();
        let mag = mel_to_linear(&f, &c, &SynthesisConfig::default()).unwrap();
        let support = fb.filters()[17].bins();
        for (k, &v) in mag.frame(0).iter().enumerate() {
            if !support.contains(&k) {
                assert!(v < 1e-6, "bin {k} = {v}");
            }
        }
        assert!(mag.frame(0).iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn mel_to_linear_rejects_foreign_features() {
        let f = FeatureSequence::new(vec![0.0; 13], 13, 50.0, cfg().fingerprint(), "").unwrap();
        assert!(matches!(
            mel_to_linear(&f, &cfg(), &SynthesisConfig::default()),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn griffin_lim_keeps_sine_frequency() {
        let c = cfg();
        let w = tone(440.0, 1.0);
        let mag = Magnitudes::of(&stft(&w, &c).unwrap());
        let out = griffin_lim(&mag, &c, &SynthesisConfig::default()).unwrap();
        let x = out.waveform.samples();
        assert!(x.iter().all(|v| v.is_finite() && v.abs() <= OUTPUT_PEAK + 1e-6));
        assert!((out.waveform.peak() - OUTPUT_PEAK).abs() < 1e-4);

        // FFT oracle over the interior
        let n = 8192;
        let start = (x.len() - n) / 2;
        let mut buf: Vec<Complex<f64>> = x[start..start + n].iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        let expected = 440.0 * n as f64 / 16000.0;
        assert!((peak as f64 - expected).abs() <= 1.0, "peak bin {peak}, expected {expected}");
    }

    #[test]
    fn griffin_lim_convergence_non_increasing_and_deterministic() {
        let c = cfg();
        let mag = Magnitudes::of(&stft(&speech_like(), &c).unwrap());
        let syn = SynthesisConfig::default();
        let a = griffin_lim(&mag, &c, &syn).unwrap();
        for pair in a.convergence.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{pair:?}");
        }
        assert!(a.convergence.last().unwrap() < &a.convergence[0]);
        let b = griffin_lim(&mag, &c, &syn).unwrap();
        assert_eq!(a.waveform, b.waveform);
        assert!(a.convergence_csv().starts_with("iteration,spectral_convergence\n1,"));
    }

    #[test]
    fn griffin_lim_zero_magnitude_is_silent() {
        let c = cfg();
        let mag = Magnitudes {
            n_frames: 4,
            n_bins: 513,
            data: vec![0.0; 4 * 513],
        };
        let out = griffin_lim(&mag, &c, &SynthesisConfig::default()).unwrap();
        assert_eq!(out.waveform.len(), 3 * 320 + 640);
        assert!(out.waveform.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn resynthesis_duration_and_tone() {
        let c = cfg();
        let w = tone(300.0, 1.0);
        let f = log_mel(&w, &c).unwrap();
        let quiet: Vec<f32> = f.frame(0).iter().map(|v| v - 6.0).collect();
        let cb = codebook(&[f.frame(10).to_vec(), quiet]);
        let out = resynthesize(&w, &cb, &c, &SynthesisConfig::default()).unwrap();
        assert_eq!(out.len(), f.n_frames() * c.hop());
        assert!(out.samples().iter().all(|v| v.is_finite() && v.abs() <= OUTPUT_PEAK + 1e-6));
        let n = 8192;
        let start = (out.len() - n) / 2;
        let mut buf: Vec<Complex<f64>> =
            out.samples()[start..start + n].iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        let hz = peak as f64 * 16000.0 / n as f64;
        assert!((hz - 300.0).abs() <= 30.0, "dominant {hz} Hz");
    }

    #[test]
    fn mcd_properties() {
        let c = cfg();
        let f = log_mel(&speech_like(), &c).unwrap();
        assert_eq!(mel_cepstral_distance(&f, &f, 13).unwrap(), 0.0);
        // gain offset lives in c0 only
        let louder: Vec<f32> = f.as_slice().iter().map(|v| v + 1.5).collect();
        let g = FeatureSequence::new(louder, 40, 50.0, c.fingerprint(), "").unwrap();
        assert!(mel_cepstral_distance(&f, &g, 13).unwrap() < 1e-3);
    }
}
