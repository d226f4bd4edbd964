use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Complex short-time spectrum, `n_frames × n_bins` row-major, where
/// `n_bins = n_fft / 2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Number of analysis frames that fit entirely inside `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        1 + (len - window) / hop
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Planned forward/inverse transforms for one framing geometry.
///
/// Frame `t` covers samples `[t*hop, t*hop + window)`, Hann-weighted and
/// zero-padded to `n_fft`. No padding is added at the signal edges.
#[derive(Clone)]
pub struct StftPlan {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .field("window", &self.window.len())
            .finish()
    }
}

impl StftPlan {
    pub fn new(n_fft: usize, window: usize, hop: usize) -> Self {
        assert!(window <= n_fft && hop > 0 && window > 0);
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(window),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn analyze(&self, signal: &[f64]) -> Result<Spectrogram> {
        let win = self.window.len();
        if signal.len() < win {
            return Err(Error::InputTooShort {
                needed: win,
                got: signal.len(),
            });
        }
        let n_frames = frame_count(signal.len(), win, self.hop);
        let n_bins = self.n_bins();
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = if j < win {
                    Complex::new(signal[start + j] * self.window[j], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..n_bins]);
        }
        Ok(Spectrogram {
            n_frames,
            n_bins,
            data,
        })
    }

    /// Windowed overlap-add inverse.
    ///
    /// Each sample is divided by the summed squared window at that
    /// position, which makes the result the least-squares signal for a
    /// possibly inconsistent spectrogram. `floor` (relative to the largest
    /// window sum) bounds the divisor from below; `0.0` gives the exact
    /// least-squares inverse.
    pub fn inverse(&self, spec: &Spectrogram, floor: f64) -> Vec<f64> {
        assert_eq!(spec.n_bins, self.n_bins());
        let win = self.window.len();
        if spec.n_frames == 0 {
            return Vec::new();
        }
        let len = (spec.n_frames - 1) * self.hop + win;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let n = self.n_fft;
        for t in 0..spec.n_frames {
            let frame = spec.frame(t);
            buf[..frame.len()].copy_from_slice(frame);
            for k in 1..n - frame.len() + 1 {
                buf[n - k] = frame[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for j in 0..win {
                let w = self.window[j];
                out[start + j] += w * buf[j].re / n as f64;
                norm[start + j] += w * w;
            }
        }
        let max_norm = norm.iter().cloned().fold(0.0, f64::max);
        let min_div = floor * max_norm;
        for (x, &d) in out.iter_mut().zip(&norm) {
            let d = d.max(min_div);
            *x = if d > 0.0 { *x / d } else { 0.0 };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(399, 400, 160), 0);
        assert_eq!(frame_count(400, 400, 160), 1);
        assert_eq!(frame_count(80000, 640, 320), 1 + (80000 - 640) / 320);
    }

    #[test]
    fn too_short_is_an_error() {
        let plan = StftPlan::new(512, 400, 160);
        assert!(matches!(
            plan.analyze(&[0.0; 100]),
            Err(Error::InputTooShort { needed: 400, got: 100 })
        ));
    }

    #[test]
    fn overlap_add_reconstructs_interior() {
        let plan = StftPlan::new(1024, 640, 320);
        let x: Vec<f64> = (0..8000).map(|n| (n as f64 * 0.05).sin() + 0.3 * (n as f64 * 0.31).cos()).collect();
        let spec = plan.analyze(&x).unwrap();
        let y = plan.inverse(&spec, 0.0);
        for n in 320..y.len() - 320 {
            assert!((x[n] - y[n]).abs() < 1e-9, "sample {n}");
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let plan = StftPlan::new(1024, 1024, 256);
        let x: Vec<f64> = (0..16000).map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin()).collect();
        let mags = plan.analyze(&x).unwrap();
        for t in 0..mags.n_frames {
            let frame = mags.frame(t);
            let peak = (0..frame.len())
                .max_by(|&a, &b| frame[a].norm().total_cmp(&frame[b].norm()))
                .unwrap();
            assert_eq!(peak, 64);
        }
    }
}
