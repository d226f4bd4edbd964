//! Dense frame-level features: the encoder stage of the pipeline.
//!
//! Natively this computes log-mel or MFCC frames at 50 Hz or 100 Hz.
//! Features produced elsewhere (e.g. by a neural encoder run offline)
//! enter through the TLFT file format in [`tlft`].

mod mel;
mod stft;
pub mod tlft;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mel::{hz_to_mel, mel_to_hz, MelFilter, MelFilterbank};
pub use stft::{frame_count, hann, Spectrogram, StftPlan};
pub use tlft::{export_features, import_features};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Floor added before taking the log of mel energies.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum FeatureKind {
    LogMel,
    Mfcc { n_coeffs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_rate: u32,
    pub n_fft: usize,
    /// Hann window length in samples.
    pub window: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub kind: FeatureKind,
    /// Per-utterance mean/variance normalization of every dimension.
    #[serde(default)]
    pub normalize: bool,
}

impl FeatureConfig {
    /// 16 kHz, 50 frames/s, 40 ms window.
    pub fn hubert_like_50hz() -> Self {
        Self {
            sample_rate: 16000,
            frame_rate: 50,
            n_fft: 1024,
            window: 640,
            n_mels: 40,
            fmin: 0.0,
            fmax: 8000.0,
            kind: FeatureKind::LogMel,
            normalize: false,
        }
    }

    /// 16 kHz, 100 frames/s, 25 ms window.
    pub fn cpc_like_100hz() -> Self {
        Self {
            sample_rate: 16000,
            frame_rate: 100,
            n_fft: 512,
            window: 400,
            n_mels: 40,
            fmin: 0.0,
            fmax: 8000.0,
            kind: FeatureKind::LogMel,
            normalize: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "hubert-like-50hz" => Some(Self::hubert_like_50hz()),
            "cpc-like-100hz" => Some(Self::cpc_like_100hz()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 2] = ["hubert-like-50hz", "cpc-like-100hz"];

    pub fn hop(&self) -> usize {
        (self.sample_rate / self.frame_rate) as usize
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            FeatureKind::LogMel => self.n_mels,
            FeatureKind::Mfcc { n_coeffs } => n_coeffs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.sample_rate == 0 || self.frame_rate == 0 {
            return bad("sample and frame rates must be positive".into());
        }
        if !self.sample_rate.is_multiple_of(self.frame_rate) {
            return bad(format!(
                "frame rate {} does not divide sample rate {}",
                self.frame_rate, self.sample_rate
            ));
        }
        if !self.n_fft.is_power_of_two() || self.window == 0 || self.window > self.n_fft {
            return bad(format!(
                "n_fft {} must be a power of two no smaller than window {}",
                self.n_fft, self.window
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!("need 0 <= fmin < fmax <= sr/2, got [{}, {}]", self.fmin, self.fmax));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if let FeatureKind::Mfcc { n_coeffs } = self.kind {
            if n_coeffs == 0 || n_coeffs > self.n_mels {
                return bad(format!("n_coeffs must be in 1..={}", self.n_mels));
            }
        }
        Ok(())
    }

    /// Hash identifying features computed with this configuration.
    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(self.sample_rate, self.n_fft, self.n_mels, self.fmin, self.fmax)
    }

    pub fn stft_plan(&self) -> StftPlan {
        StftPlan::new(self.n_fft, self.window, self.hop())
    }

    /// Frames produced for a waveform of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        frame_count(len, self.window, self.hop())
    }
}

/// SHA-256 identity of a feature space.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        Fingerprint(out)
    }

    /// Shared by every imported file of the same dimension and frame rate.
    pub fn imported(dim: usize, frame_rate: f64) -> Self {
        Self::of(format!("imported:d={dim}:rate={frame_rate}").as_bytes())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

/// `L × d` matrix of finite feature frames at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f32>,
    dim: usize,
    frame_rate: f64,
    fingerprint: Fingerprint,
    provenance: String,
}

impl FeatureSequence {
    pub fn new(
        data: Vec<f32>,
        dim: usize,
        frame_rate: f64,
        fingerprint: Fingerprint,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidConfig(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid frame rate {frame_rate}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry {
                row: i / dim,
                col: i % dim,
            });
        }
        Ok(Self {
            data,
            dim,
            frame_rate,
            fingerprint,
            provenance: provenance.into(),
        })
    }

    pub fn empty(dim: usize, frame_rate: f64, fingerprint: Fingerprint) -> Self {
        Self {
            data: Vec::new(),
            dim,
            frame_rate,
            fingerprint,
            provenance: String::new(),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

fn check_input(w: &Waveform, cfg: &FeatureConfig) -> Result<()> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::ConfigMismatch(format!(
            "waveform at {} Hz, features configured for {} Hz",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    Ok(())
}

/// Complex STFT of a waveform using the framing in `cfg`.
pub fn stft(w: &Waveform, cfg: &FeatureConfig) -> Result<Spectrogram> {
    check_input(w, cfg)?;
    let signal: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    cfg.stft_plan().analyze(&signal)
}

/// Natural-log mel energies in f64, one `Vec` per frame.
fn log_mel_rows(w: &Waveform, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    let spec = stft(w, cfg)?;
    let fb = cfg.filterbank()?;
    let mut mag = vec![0.0; spec.n_bins];
    Ok((0..spec.n_frames)
        .map(|t| {
            for (m, c) in mag.iter_mut().zip(spec.frame(t)) {
                *m = c.norm();
            }
            let mut row = vec![0.0; fb.n_mels()];
            fb.apply(&mag, &mut row);
            row.iter_mut().for_each(|e| *e = (*e + LOG_FLOOR).ln());
            row
        })
        .collect())
}

fn finish(rows: Vec<Vec<f64>>, cfg: &FeatureConfig, dim: usize) -> Result<FeatureSequence> {
    let mut rows = rows;
    if cfg.normalize {
        normalize_columns(&mut rows, dim);
    }
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    FeatureSequence::new(
        data,
        dim,
        cfg.frame_rate as f64,
        cfg.fingerprint(),
        format!("native:{:?}", cfg.kind),
    )
}

fn normalize_columns(rows: &mut [Vec<f64>], dim: usize) {
    if rows.is_empty() {
        return;
    }
    let n = rows.len() as f64;
    for c in 0..dim {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-12 { var.sqrt().recip() } else { 1.0 };
        rows.iter_mut().for_each(|r| r[c] = (r[c] - mean) * scale);
    }
}

/// `log(F · |STFT| + ε)` with `d = n_mels`.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    if cfg.kind != FeatureKind::LogMel {
        return Err(Error::InvalidConfig("configuration is not log-mel".into()));
    }
    check_input(w, cfg)?;
    let rows = log_mel_rows(w, cfg)?;
    finish(rows, cfg, cfg.n_mels)
}

/// Unnormalized DCT-II of each log-mel frame, keeping the first `n_coeffs`.
pub fn mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    let FeatureKind::Mfcc { n_coeffs } = cfg.kind else {
        return Err(Error::InvalidConfig("configuration is not MFCC".into()));
    };
    check_input(w, cfg)?;
    let rows = log_mel_rows(w, cfg)?
        .into_iter()
        .map(|r| dct2(&r, n_coeffs))
        .collect();
    finish(rows, cfg, n_coeffs)
}

/// Dispatches on `cfg.kind`.
pub fn extract(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    match cfg.kind {
        FeatureKind::LogMel => log_mel(w, cfg),
        FeatureKind::Mfcc { .. } => mfcc(w, cfg),
    }
}

/// `X_k = Σ_n x_n cos(π k (n + ½) / N)` for `k < n_out`.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum()
        })
        .collect()
}
