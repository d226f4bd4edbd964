//! F0 stream: a YIN-style tracker plus per-speaker and prefix-based
//! normalization in the log-Hz domain.
//!
//! Frame `t` of a track is centred at sample `(t + 1) * hop`, so a
//! waveform of `len` samples yields `len / hop - 1` frames. For feature
//! windows between one and three hops long this differs from the feature
//! frame count by at most one, which [`crate::streams::align_pitch`]
//! reconciles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Minimum voiced frames for [`speaker_stats`].
pub const MIN_SPEAKER_VOICED: usize = 10;
/// Minimum voiced frames inside a normalization prefix.
pub const MIN_PREFIX_VOICED: usize = 5;
/// Reference used when no normalization is requested: values are
/// `ln(f0 / 200 Hz)`, which preserves the pitch span.
pub const UNNORMALIZED_REFERENCE_HZ: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub f_lo: f64,
    pub f_hi: f64,
    /// Voicing threshold on the cumulative-mean-normalized difference.
    pub threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            f_lo: 60.0,
            f_hi: 400.0,
            threshold: 0.15,
        }
    }
}

/// Per-frame F0 in Hz; `0.0` marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f32>,
    pub frame_rate: f64,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced(&self) -> impl Iterator<Item = f32> + '_ {
        self.f0.iter().copied().filter(|&f| f > 0.0)
    }

    pub fn voicing_rate(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.voiced().count() as f64 / self.f0.len() as f64
    }

    /// Median of the voiced frames, if any.
    pub fn median_f0(&self) -> Option<f32> {
        let mut v: Vec<f32> = self.voiced().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f32::total_cmp);
        Some(v[v.len() / 2])
    }

    /// JSON lines `{frame, voiced, value}` with value in Hz.
    pub fn write_json_lines(&self, out: impl Write) -> Result<()> {
        write_json_lines(out, self.f0.iter().map(|&f| (f > 0.0).then_some(f)))
    }
}

/// Normalized log-F0 (`ln f0 - reference`) with an explicit voicing mask:
/// `None` marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPitch {
    pub values: Vec<Option<f32>>,
    pub frame_rate: f64,
}

impl NormalizedPitch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voicing_mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_some).collect()
    }

    pub fn write_json_lines(&self, out: impl Write) -> Result<()> {
        write_json_lines(out, self.values.iter().copied())
    }
}

fn write_json_lines(mut out: impl Write, frames: impl Iterator<Item = Option<f32>>) -> Result<()> {
    #[derive(Serialize)]
    struct Line {
        frame: usize,
        voiced: bool,
        value: f32,
    }
    for (frame, v) in frames.enumerate() {
        let line = Line {
            frame,
            voiced: v.is_some(),
            value: v.unwrap_or(0.0),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub mean_log_f0: f64,
    pub std_log_f0: f64,
    pub n_voiced_frames: usize,
}

/// Tracks F0 with a cumulative-mean-normalized difference function.
///
/// Lags cover `[sr/f_hi, sr/f_lo]`. A frame is voiced when the minimum over
/// that range falls below the threshold; the reported period is the first
/// dip below the threshold followed down to its local minimum (the smallest
/// qualifying lag wins, which avoids octave-down errors), refined by
/// parabolic interpolation.
pub fn track_pitch(w: &Waveform, frame_rate: f64, cfg: &PitchConfig) -> Result<PitchTrack> {
    let sr = w.sample_rate() as f64;
    if !(cfg.f_lo >= 40.0 && cfg.f_lo < cfg.f_hi && cfg.f_hi <= sr / 4.0) {
        return Err(Error::InvalidConfig(format!(
            "pitch band [{}, {}] must satisfy 40 <= f_lo < f_hi <= sr/4 = {}",
            cfg.f_lo,
            cfg.f_hi,
            sr / 4.0
        )));
    }
    let hop_f = sr / frame_rate;
    let hop = hop_f.round() as usize;
    if hop == 0 || (hop_f - hop as f64).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "frame rate {frame_rate} does not divide sample rate {sr}"
        )));
    }
    let samples = w.samples();
    if samples.len() < 2 * hop {
        return Err(Error::InputTooShort {
            needed: 2 * hop,
            got: samples.len(),
        });
    }
    let n_frames = samples.len() / hop - 1;
    let tau_min = ((sr / cfg.f_hi).floor() as usize).max(2);
    let tau_max = (sr / cfg.f_lo).ceil() as usize;
    let integration = tau_max;
    let span = integration + tau_max + 1;

    let mut seg = vec![0.0f64; span];
    let mut diff = vec![0.0f64; tau_max + 2];
    let f0 = (0..n_frames)
        .map(|t| {
            let centre = (t + 1) * hop;
            let start = centre as isize - (span / 2) as isize;
            for (j, s) in seg.iter_mut().enumerate() {
                let i = start + j as isize;
                *s = if i >= 0 && (i as usize) < samples.len() {
                    samples[i as usize] as f64
                } else {
                    0.0
                };
            }
            cmnd(&seg, integration, &mut diff);
            frame_f0(&diff, tau_min, tau_max, cfg.threshold)
                .map(|lag| (sr / lag).clamp(cfg.f_lo, cfg.f_hi) as f32)
                .unwrap_or(0.0)
        })
        .collect();
    Ok(PitchTrack { f0, frame_rate })
}

/// Cumulative-mean-normalized difference for lags `0..out.len()`.
fn cmnd(seg: &[f64], integration: usize, out: &mut [f64]) {
    out[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..out.len() {
        let d: f64 = (0..integration)
            .map(|j| {
                let e = seg[j] - seg[j + tau];
                e * e
            })
            .sum();
        running += d;
        out[tau] = if running > 0.0 {
            d * tau as f64 / running
        } else {
            1.0
        };
    }
}

fn frame_f0(d: &[f64], tau_min: usize, tau_max: usize, threshold: f64) -> Option<f64> {
    let range = tau_min..=tau_max;
    let min = range.clone().map(|t| d[t]).fold(f64::INFINITY, f64::min);
    if !(min < threshold) {
        return None;
    }
    let mut tau = range.clone().find(|&t| d[t] < threshold)?;
    while tau < tau_max && d[tau + 1] < d[tau] {
        tau += 1;
    }
    let mut lag = tau as f64;
    if tau > 1 && tau + 1 < d.len() {
        let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
        let denom = a - 2.0 * b + c;
        if denom > 0.0 {
            let shift = 0.5 * (a - c) / denom;
            if shift.abs() < 1.0 {
                lag += shift;
            }
        }
    }
    Some(lag)
}

/// Mean and standard deviation of `ln f0` over the voiced frames of all
/// tracks.
pub fn speaker_stats(tracks: &[PitchTrack]) -> Result<SpeakerStats> {
    let logs: Vec<f64> = tracks
        .iter()
        .flat_map(|t| t.voiced())
        .map(|f| (f as f64).ln())
        .collect();
    log_stats(&logs, MIN_SPEAKER_VOICED)
}

fn log_stats(logs: &[f64], needed: usize) -> Result<SpeakerStats> {
    if logs.len() < needed {
        return Err(Error::InsufficientVoicedFrames {
            needed,
            found: logs.len(),
        });
    }
    // Shifted accumulation: a constant track has a mean exactly equal to
    // its value.
    let n = logs.len() as f64;
    let shift = logs[0];
    let offset = logs.iter().map(|l| l - shift).sum::<f64>() / n;
    let mean = shift + offset;
    let var = logs.iter().map(|l| (l - shift - offset).powi(2)).sum::<f64>() / n;
    Ok(SpeakerStats {
        mean_log_f0: mean,
        std_log_f0: var.sqrt(),
        n_voiced_frames: logs.len(),
    })
}

/// `ln f0 - reference_log_f0` on voiced frames.
pub fn normalize_with_reference(t: &PitchTrack, reference_log_f0: f64) -> NormalizedPitch {
    NormalizedPitch {
        values: t
            .f0
            .iter()
            .map(|&f| (f > 0.0).then(|| ((f as f64).ln() - reference_log_f0) as f32))
            .collect(),
        frame_rate: t.frame_rate,
    }
}

pub fn normalize_per_speaker(t: &PitchTrack, s: &SpeakerStats) -> NormalizedPitch {
    normalize_with_reference(t, s.mean_log_f0)
}

/// Normalizes by the mean log-F0 of the first `prefix_seconds` of the track.
pub fn normalize_prefix(t: &PitchTrack, prefix_seconds: f64) -> Result<NormalizedPitch> {
    let n = ((prefix_seconds * t.frame_rate).ceil().max(0.0) as usize).min(t.len());
    let logs: Vec<f64> = t.f0[..n]
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| (f as f64).ln())
        .collect();
    let stats = log_stats(&logs, MIN_PREFIX_VOICED)?;
    Ok(normalize_with_reference(t, stats.mean_log_f0))
}

/// Log-ratio to a fixed 200 Hz reference, for single-speaker data.
pub fn normalize_none(t: &PitchTrack) -> NormalizedPitch {
    normalize_with_reference(t, UNNORMALIZED_REFERENCE_HZ.ln())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{LN_2, PI};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tone(freq: f64, sr: u32, seconds: f64) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
                .collect(),
            sr,
        )
        .unwrap()
    }

    fn track(f0: &[f32]) -> PitchTrack {
        PitchTrack {
            f0: f0.to_vec(),
            frame_rate: 100.0,
        }
    }

    #[test]
    fn sine_220_tracked() {
        let t = track_pitch(&tone(220.0, 16000, 1.0), 100.0, &PitchConfig::default()).unwrap();
        assert_eq!(t.len(), 99);
        assert!(t.voicing_rate() >= 0.9, "voicing {}", t.voicing_rate());
        let m = t.median_f0().unwrap();
        assert!((m - 220.0).abs() / 220.0 < 0.03, "median {m}");
    }

    #[test]
    fn silence_is_unvoiced() {
        let t = track_pitch(&Waveform::silence(16000, 16000).unwrap(), 50.0, &PitchConfig::default()).unwrap();
        assert!(t.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Waveform::new((0..32000).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap();
        let t = track_pitch(&w, 100.0, &PitchConfig::default()).unwrap();
        assert!(t.voicing_rate() < 0.2, "voicing {}", t.voicing_rate());
    }

    #[test]
    fn resampling_keeps_median() {
        let w = tone(150.0, 16000, 1.0);
        let a = track_pitch(&w, 100.0, &PitchConfig::default()).unwrap().median_f0().unwrap();
        let w8 = crate::audio::resample(&w, 8000).unwrap();
        let b = track_pitch(&w8, 100.0, &PitchConfig::default()).unwrap().median_f0().unwrap();
        assert!((a - b).abs() / a < 0.03, "{a} vs {b}");
    }

    #[test]
    fn voiced_values_inside_band() {
        let cfg = PitchConfig {
            f_lo: 100.0,
            f_hi: 300.0,
            threshold: 0.15,
        };
        let t = track_pitch(&tone(180.0, 16000, 0.5), 100.0, &cfg).unwrap();
        assert!(t.voiced().all(|f| (100.0..=300.0).contains(&f)));
    }

    #[test]
    fn band_and_rate_validation() {
        let w = tone(200.0, 16000, 0.2);
        let bad = PitchConfig {
            f_lo: 30.0,
            ..Default::default()
        };
        assert!(track_pitch(&w, 100.0, &bad).is_err());
        let bad = PitchConfig {
            f_hi: 5000.0,
            ..Default::default()
        };
        assert!(track_pitch(&w, 100.0, &bad).is_err());
        assert!(track_pitch(&w, 70.0, &PitchConfig::default()).is_err());
        assert!(matches!(
            track_pitch(&Waveform::silence(100, 16000).unwrap(), 100.0, &PitchConfig::default()),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn equal_dips_prefer_smaller_lag() {
        let mut d = vec![1.0; 20];
        d[5] = 0.05;
        d[10] = 0.05;
        assert_eq!(frame_f0(&d, 2, 18, 0.15), Some(5.0));
    }

    #[test]
    fn stats_of_constant_track() {
        let s = speaker_stats(&[track(&[200.0; 12])]).unwrap();
        assert!((s.mean_log_f0 - 200f64.ln()).abs() < 1e-6);
        assert!(s.std_log_f0 < 1e-6);
        assert_eq!(s.n_voiced_frames, 12);
    }

    #[test]
    fn stats_log_symmetry() {
        let f0: Vec<f32> = (0..20).map(|i| if i % 2 == 0 { 100.0 } else { 400.0 }).collect();
        let s = speaker_stats(&[track(&f0)]).unwrap();
        assert!((s.mean_log_f0 - 200f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn stats_skip_unvoiced() {
        let f0 = [150.0, 0.0, 160.0, 0.0, 170.0, 180.0, 0.0, 190.0, 200.0, 210.0, 220.0, 0.0, 230.0, 240.0];
        let s = speaker_stats(&[track(&f0[..6]), track(&f0[6..])]).unwrap();
        let voiced: Vec<f64> = f0.iter().filter(|&&f| f > 0.0).map(|&f| (f as f64).ln()).collect();
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        assert_eq!(s.n_voiced_frames, 10);
        assert!((s.mean_log_f0 - mean).abs() < 1e-9);
        assert!(matches!(
            speaker_stats(&[track(&[100.0; 9])]),
            Err(Error::InsufficientVoicedFrames { needed: 10, found: 9 })
        ));
    }

    #[test]
    fn per_speaker_normalization() {
        let s = SpeakerStats {
            mean_log_f0: 180f64.ln(),
            std_log_f0: 0.1,
            n_voiced_frames: 100,
        };
        let n = normalize_per_speaker(&track(&[180.0, 0.0, 180.0]), &s);
        assert_eq!(n.values[1], None);
        assert!(n.values[0].unwrap().abs() < 1e-6);
        let doubled = normalize_per_speaker(&track(&[360.0, 0.0, 90.0]), &s);
        assert!((doubled.values[0].unwrap() as f64 - LN_2).abs() < 1e-6);
        assert!((doubled.values[2].unwrap() as f64 + LN_2).abs() < 1e-6);
        assert_eq!(doubled.voicing_mask(), vec![true, false, true]);
    }

    #[test]
    fn prefix_normalization() {
        let flat = track(&[200.0; 50]);
        let n = normalize_prefix(&flat, 0.1).unwrap();
        assert!(n.values.iter().all(|v| v.unwrap().abs() < 1e-6));

        let mut jump = vec![200.0f32; 20];
        jump.extend([400.0; 20]);
        let n = normalize_prefix(&track(&jump), 0.1).unwrap();
        for v in &n.values[20..] {
            assert!((v.unwrap() as f64 - LN_2).abs() < 1e-6);
        }

        let mut unvoiced_start = vec![0.0f32; 20];
        unvoiced_start.extend([200.0; 20]);
        assert!(matches!(
            normalize_prefix(&track(&unvoiced_start), 0.1),
            Err(Error::InsufficientVoicedFrames { .. })
        ));
    }

    #[test]
    fn prefix_and_speaker_agree_when_means_match() {
        let t = track(&[220.0; 30]);
        let s = speaker_stats(&[t.clone()]).unwrap();
        assert_eq!(normalize_per_speaker(&t, &s), normalize_prefix(&t, 0.1).unwrap());
        let varied = track(&[180.0, 190.0, 0.0, 200.0, 210.0, 220.0, 230.0, 0.0, 240.0, 250.0, 260.0, 270.0]);
        let s = speaker_stats(&[varied.clone()]).unwrap();
        assert_eq!(normalize_per_speaker(&varied, &s), normalize_prefix(&varied, 1.0).unwrap());
    }

    #[test]
    fn json_lines_dump() {
        let n = NormalizedPitch {
            values: vec![Some(0.5), None],
            frame_rate: 50.0,
        };
        let mut out = Vec::new();
        n.write_json_lines(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"frame\":0,\"voiced\":true,\"value\":0.5}\n{\"frame\":1,\"voiced\":false,\"value\":0.0}\n"
        );
    }
}
