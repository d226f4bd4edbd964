use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// One triangular filter stored over its non-zero bin range.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilter {
    pub start_bin: usize,
    pub weights: Vec<f64>,
    pub center_hz: f64,
}

impl MelFilter {
    pub fn bins(&self) -> std::ops::Range<usize> {
        self.start_bin..self.start_bin + self.weights.len()
    }
}

/// Triangular HTK-mel filterbank with unit peak height.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_bins: usize,
    filters: Vec<MelFilter>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut filters = Vec::with_capacity(n_mels);
        for band in 0..n_mels {
            let (left, center, right) = (edges[band], edges[band + 1], edges[band + 2]);
            let mut start_bin = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    start_bin.get_or_insert(k);
                    weights.push(w);
                }
            }
            let Some(start_bin) = start_bin else {
                return Err(Error::DegenerateBand { band });
            };
            filters.push(MelFilter {
                start_bin,
                weights,
                center_hz: center,
            });
        }
        Ok(Self { n_bins, filters })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    /// Dense `n_mels × n_bins` matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.n_bins];
                row[f.bins()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    /// `out = F · spectrum`
    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f.weights.iter().zip(&spectrum[f.bins()]).map(|(w, s)| w * s).sum();
        }
    }

    /// `out = Fᵀ · mel`
    pub fn apply_transpose(&self, mel: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (m, f) in mel.iter().zip(&self.filters) {
            for (o, w) in out[f.bins()].iter_mut().zip(&f.weights) {
                *o += w * m;
            }
        }
    }
}
