use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the low-pass kernel on each side of the centre tap,
/// measured at the cutoff frequency. 16 per side gives 32 taps per phase
/// when no anti-aliasing is needed.
const HALF_TAPS: usize = 16;
const KAISER_BETA: f64 = 8.0;
/// Phase tables are precomputed up to this many phases; beyond it the
/// kernel is evaluated per output sample.
const MAX_TABLE_PHASES: u64 = 4096;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`. Equal rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target rate must be positive".into()));
    }
    let source_rate = w.sample_rate();
    if source_rate == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;

    let input = w.samples();
    let out_len =
        ((input.len() as u64 * target_rate as u64 + source_rate as u64 / 2) / source_rate as u64) as usize;

    let cutoff = (up as f64 / down as f64).min(1.0);
    let radius = (HALF_TAPS as f64 / cutoff).ceil() as i64;
    let kernel = Kernel { cutoff, radius };

    let table = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| kernel.taps(p as f64 / up as f64))
            .collect::<Vec<_>>()
    });

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let centre = (pos / up) as i64;
        let phase = pos % up;
        let owned;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = kernel.taps(phase as f64 / up as f64);
                &owned
            }
        };
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let k = centre + j as i64 - radius + 1;
            if k >= 0 && (k as usize) < input.len() {
                acc += h * input[k as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_rate)
}

struct Kernel {
    cutoff: f64,
    radius: i64,
}

impl Kernel {
    /// Taps for input offsets `-radius+1 ..= radius` relative to the sample
    /// just before the output instant, normalized to unit DC gain.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let r = self.radius as f64;
        let mut taps: Vec<f64> = (-self.radius + 1..=self.radius)
            .map(|j| {
                let x = frac - j as f64;
                if x.abs() >= r {
                    0.0
                } else {
                    self.cutoff * sinc(self.cutoff * x) * kaiser(x / r, KAISER_BETA)
                }
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        if sum.abs() > 1e-12 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn kaiser(t: f64, beta: f64) -> f64 {
    let arg = (1.0 - t * t).max(0.0);
    bessel_i0(beta * arg.sqrt()) / bessel_i0(beta)
}

fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rustfft::{num_complex::Complex, FftPlanner};

    use super::*;

    fn tone(freq: f64, sr: u32, len: usize, amp: f64) -> Waveform {
        let s = (0..len)
            .map(|n| (amp * (2.0 * PI * freq * n as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    /// Index of the largest-magnitude FFT bin (oracle for the tone tests).
    fn peak_bin(samples: &[f32]) -> (usize, usize) {
        let n = samples.len();
        let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        (bin, n)
    }

    #[test]
    fn equal_rates_is_identity() {
        let w = tone(300.0, 16000, 1000, 0.3);
        assert_eq!(resample(&w, 16000).unwrap(), w);
    }

    #[test]
    fn halves_length() {
        let w = Waveform::silence(16000, 16000).unwrap();
        let out = resample(&w, 8000).unwrap();
        assert_eq!(out.len(), 8000);
        assert_eq!(out.sample_rate(), 8000);
    }

    #[test]
    fn output_length_rounds() {
        let w = Waveform::silence(1001, 44100).unwrap();
        // 1001 * 16000 / 44100 = 363.17
        assert_eq!(resample(&w, 16000).unwrap().len(), 363);
        let w = Waveform::silence(7, 3).unwrap();
        // 7 * 2 / 3 = 4.67
        assert_eq!(resample(&w, 2).unwrap().len(), 5);
    }

    #[test]
    fn tone_keeps_its_fft_bin() {
        let w = tone(1000.0, 16000, 16000, 0.5);
        let out = resample(&w, 8000).unwrap();
        let (bin, n) = peak_bin(out.samples());
        let expected = 1000.0 * n as f64 / 8000.0;
        assert!((bin as f64 - expected).abs() <= 1.0, "bin {bin} vs {expected}");
        let (bin, n) = peak_bin(resample(&w, 22050).unwrap().samples());
        let expected = 1000.0 * n as f64 / 22050.0;
        assert!((bin as f64 - expected).abs() <= 1.0, "bin {bin} vs {expected}");
    }

    #[test]
    fn tone_amplitude_preserved_in_passband() {
        let w = tone(440.0, 16000, 16000, 0.5);
        let out = resample(&w, 12000).unwrap();
        let interior = &out.samples()[600..out.len() - 600];
        let peak = interior.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 0.01, "peak {peak}");
    }

    #[test]
    fn rejects_zero_target() {
        let w = Waveform::silence(10, 16000).unwrap();
        assert!(resample(&w, 0).is_err());
    }
}
