//! Seeded source-filter "speech" for tests, benchmarks and demos.
//!
//! A glottal pulse train with intonation drives a cascade of three
//! formant resonators that glide between vowel targets; fricatives are
//! band-passed noise; short closures are silent. Speakers differ by F0,
//! spectral tilt and vocal-tract scale. Every utterance is normalized to
//! the same RMS so loudness carries no speaker information.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::Result;

pub const SAMPLE_RATE: u32 = 16000;
const TARGET_RMS: f64 = 0.05;

/// Ranges of (F1, F2, F3) vowel targets in Hz; each vowel draws its own
/// point so phonetic content forms a continuum rather than a few
/// clusters.
const FORMANT_RANGES: [(f64, f64); 3] = [(250.0, 850.0), (800.0, 2400.0), (2200.0, 3300.0)];
const NEUTRAL_VOWEL: [f64; 3] = [500.0, 1500.0, 2500.0];
const BANDWIDTHS: [f64; 3] = [80.0, 100.0, 130.0];
/// Range of fricative noise centre frequencies.
const FRICATIVE_RANGE: (f64, f64) = (2500.0, 6000.0);
/// Standard deviation of the per-phone log gain.
const PHONE_GAIN_SD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    /// One-pole coefficient of the output tilt filter; larger is darker.
    pub tilt: f64,
    pub formant_scale: f64,
}

/// `n` speakers spread evenly over a narrow range of F0, tilt and
/// vocal-tract scale. Differences are deliberately small next to the
/// phonetic variation inside each utterance.
pub fn speaker_profiles(n: usize) -> Vec<SpeakerProfile> {
    (0..n)
        .map(|i| {
            let x = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            SpeakerProfile {
                f0_hz: 100.0 + 60.0 * x,
                tilt: 0.2 + 0.4 * x,
                formant_scale: 1.0 + 0.04 * (x - 0.5),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phone {
    Vowel([f64; 3]),
    Fricative(f64),
    Closure,
}

/// Klatt resonator with unit DC gain.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64) -> f64 {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bw / fs).exp();
        let b = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let c = -r * r;
        let a = 1.0 - b - c;
        let y = a * x + b * self.y1 + c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Phones with their length in samples and linear gain.
fn phone_sequence(rng: &mut ChaCha8Rng, n_samples: usize) -> Vec<(Phone, usize, f64)> {
    let fs = SAMPLE_RATE as f64;
    let mut out = Vec::new();
    let mut total = 0;
    // lead-in closure so every utterance starts quietly
    let lead = (0.05 * fs) as usize;
    out.push((Phone::Closure, lead, 1.0));
    total += lead;
    let gain = Normal::new(0.0, PHONE_GAIN_SD).unwrap();
    while total < n_samples {
        let r: f64 = rng.random();
        let (phone, lo, hi) = if r < 0.7 {
            (Phone::Vowel(FORMANT_RANGES.map(|(a, b)| rng.random_range(a..b))), 0.08, 0.22)
        } else if r < 0.85 {
            (Phone::Fricative(rng.random_range(FRICATIVE_RANGE.0..FRICATIVE_RANGE.1)), 0.06, 0.15)
        } else {
            (Phone::Closure, 0.04, 0.12)
        };
        if matches!(out.last(), Some((Phone::Closure, ..))) && phone == Phone::Closure {
            continue;
        }
        let len = (rng.random_range(lo..hi) * fs) as usize;
        out.push((phone, len, gain.sample(rng).exp()));
        total += len;
    }
    out
}

/// One utterance of `seconds` length for `speaker`.
pub fn synth_utterance(speaker: &SpeakerProfile, seconds: f64, seed: u64) -> Result<Waveform> {
    let fs = SAMPLE_RATE as f64;
    let n = (seconds * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phones = phone_sequence(&mut rng, n);
    let white = Normal::new(0.0f64, 1.0).unwrap();

    // per-utterance prosody
    let base_f0 = speaker.f0_hz * (0.06 * white.sample(&mut rng)).exp();
    let vibrato_rate = rng.random_range(0.5..1.5);
    let vibrato_phase = rng.random_range(0.0..2.0 * PI);

    let smooth = (-1.0 / (0.015 * fs)).exp();
    let env_smooth = (-1.0 / (0.008 * fs)).exp();
    let mut formants = NEUTRAL_VOWEL.map(|f| f * speaker.formant_scale);
    let (mut voiced_env, mut fric_env, mut amp) = (0.0f64, 0.0f64, 1.0f64);
    let mut resonators = [Resonator::default(); 3];
    let mut fric_res = Resonator::default();
    let mut glottal_lp = 0.0f64;
    let mut tilt_state = 0.0f64;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);

    let mut iter = phones.iter().flat_map(|&(p, len, g)| std::iter::repeat_n((p, g), len));
    for i in 0..n {
        let (phone, gain) = iter.next().unwrap_or((Phone::Closure, 1.0));
        amp = env_smooth * amp + (1.0 - env_smooth) * gain;
        let t = i as f64 / fs;
        let (voice_target, fric_target) = match phone {
            Phone::Vowel(targets) => {
                for (f, target) in formants.iter_mut().zip(targets) {
                    *f = smooth * *f + (1.0 - smooth) * target * speaker.formant_scale;
                }
                (1.0, 0.0)
            }
            Phone::Fricative(_) => (0.0, 1.0),
            Phone::Closure => (0.0, 0.0),
        };
        voiced_env = env_smooth * voiced_env + (1.0 - env_smooth) * voice_target;
        fric_env = env_smooth * fric_env + (1.0 - env_smooth) * fric_target;

        let f0 = base_f0 * (1.0 + 0.08 * (2.0 * PI * vibrato_rate * t + vibrato_phase).sin()) * (1.0 - 0.1 * t / seconds);
        phase += f0 / fs;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        // soften the impulse into a glottal-like pulse
        glottal_lp = 0.9 * glottal_lp + 0.1 * pulse;
        let mut voiced = glottal_lp * voiced_env;
        for (r, (&f, &bw)) in resonators.iter_mut().zip(formants.iter().zip(&BANDWIDTHS)) {
            voiced = r.step(voiced, f, bw);
        }

        let fric = match phone {
            Phone::Fricative(centre) => fric_res.step(white.sample(&mut rng), centre, 1500.0),
            _ => fric_res.step(white.sample(&mut rng), 3500.0, 1500.0),
        } * fric_env
            * 0.3;

        let x = amp * (voiced * 40.0 + fric) + 1e-3 * white.sample(&mut rng);
        tilt_state = (1.0 - speaker.tilt) * x + speaker.tilt * tilt_state;
        out.push(tilt_state);
    }

    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    let gain = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    Waveform::new(out.into_iter().map(|v| (v * gain) as f32).collect(), SAMPLE_RATE)
}

#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub speaker: usize,
    pub index: usize,
    pub waveform: Waveform,
}

impl SynthUtterance {
    /// `spk<speaker>/utt<index>.wav`
    pub fn relative_path(&self) -> String {
        format!("spk{}/utt{:03}.wav", self.speaker, self.index)
    }
}

/// `n_speakers × per_speaker` utterances; utterance seeds derive from
/// `seed`, the speaker and the index, so corpora with different seeds
/// share speakers but not content.
pub fn synth_corpus(n_speakers: usize, per_speaker: usize, seconds: f64, seed: u64) -> Result<Vec<SynthUtterance>> {
    use rayon::prelude::*;
    let profiles = speaker_profiles(n_speakers);
    (0..n_speakers * per_speaker)
        .into_par_iter()
        .map(|j| {
            let (speaker, index) = (j / per_speaker, j % per_speaker);
            let utt_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((speaker as u64) << 32 | index as u64);
            Ok(SynthUtterance {
                speaker,
                index,
                waveform: synth_utterance(&profiles[speaker], seconds, utt_seed)?,
            })
        })
        .collect()
}

/// A steady sine, handy for pitch and vocoder checks.
pub fn tone(freq: f64, seconds: f64, amplitude: f64) -> Result<Waveform> {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    Waveform::new(
        (0..n)
            .map(|i| (amplitude * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect(),
        SAMPLE_RATE,
    )
}
