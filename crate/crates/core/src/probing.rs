//! Speaker probing: how much speaker identity survives quantization.
//!
//! Utterances are pooled to fixed-size vectors and classified with
//! multinomial logistic regression. This stands in for a small
//! Transformer probe; pooling throws away temporal order on purpose.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::quantizer::{quantize, Codebook, UnitSequence};

/// Per-dimension temporal mean and (population) standard deviation,
/// concatenated: `[μ_1..μ_d, σ_1..σ_d]`.
pub fn pool_continuous(f: &FeatureSequence) -> Result<Vec<f64>> {
    if f.is_empty() {
        return Err(Error::EmptySequence);
    }
    let d = f.dim();
    let n = f.n_frames() as f64;
    let mut mean = vec![0.0; d];
    for frame in f.frames() {
        mean.iter_mut().zip(frame).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for frame in f.frames() {
        var.iter_mut()
            .zip(frame)
            .zip(&mean)
            .for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
    }
    mean.extend(var.into_iter().map(|s| (s / n).sqrt()));
    Ok(mean)
}

/// Normalized unit histogram of length K.
pub fn pool_quantized(u: &UnitSequence) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut h = vec![0.0; u.k as usize];
    for &unit in &u.units {
        h[unit as usize] += 1.0;
    }
    let n = u.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.1,
            batch_size: 8,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Mean training cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Linear softmax classifier over standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub n_classes: usize,
    pub dim: usize,
    /// `n_classes × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub meta: ProbeMeta,
}

impl Probe {
    /// All-zero probe: every class scores equal, so it always predicts 0.
    pub fn uniform(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
            input_mean: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            meta: ProbeMeta {
                epochs: 0,
                lr: 0.0,
                seed: 0,
                epoch_losses: Vec::new(),
                final_loss: (n_classes as f64).ln(),
            },
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| self.bias[c] + dot(&self.weights[c * self.dim..(c + 1) * self.dim], z))
            .collect()
    }

    /// Class scores for a raw (unstandardized) input.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.logits(&self.standardize(x)))
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let s = self.scores(x)?;
        Ok(argmax(&s))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    best
}

/// In-place softmax; returns `log Σ exp`.
fn softmax(logits: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter_mut().for_each(|l| *l = (*l - lse).exp());
    lse
}

fn check_examples(x: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if x.len() != labels.len() {
        return Err(Error::InvalidConfig(format!("{} examples but {} labels", x.len(), labels.len())));
    }
    let dim = x.first().map_or(0, Vec::len);
    for (i, v) in x.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
    }
    Ok(dim)
}

/// Softmax regression trained by seeded mini-batch SGD. Inputs are
/// standardized with training-set statistics stored in the probe.
pub fn train_probe(x: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<Probe> {
    let dim = check_examples(x, labels)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("probe needs epochs, batch size and lr > 0".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    let distinct = present.iter().filter(|&&p| p).count();
    if distinct < 2 || distinct != n_classes {
        return Err(Error::DegenerateLabels(distinct));
    }

    let n = x.len() as f64;
    let mut probe = Probe::uniform(n_classes, dim);
    for j in 0..dim {
        let mean = x.iter().map(|v| v[j]).sum::<f64>() / n;
        let var = x.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
        probe.input_mean[j] = mean;
        probe.input_scale[j] = if var > 1e-24 { var.sqrt().recip() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = x.iter().map(|v| probe.standardize(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut grad_w = vec![0.0; n_classes * dim];
    let mut grad_b = vec![0.0; n_classes];
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let mut p = probe.logits(&z[i]);
                softmax(&mut p);
                p[labels[i]] -= 1.0;
                for c in 0..n_classes {
                    grad_b[c] += p[c];
                    for (g, zj) in grad_w[c * dim..(c + 1) * dim].iter_mut().zip(&z[i]) {
                        *g += p[c] * zj;
                    }
                }
            }
            let scale = cfg.lr / batch.len() as f64;
            for (w, g) in probe.weights.iter_mut().zip(&grad_w) {
                *w -= scale * g + cfg.lr * cfg.l2 * *w;
            }
            for (b, g) in probe.bias.iter_mut().zip(&grad_b) {
                *b -= scale * g;
            }
        }
        let loss = z
            .iter()
            .zip(labels)
            .map(|(zi, &l)| {
                let mut logits = probe.logits(zi);
                let target = logits[l];
                softmax(&mut logits) - target
            })
            .sum::<f64>()
            / n;
        losses.push(loss);
    }
    probe.meta = ProbeMeta {
        epochs: cfg.epochs,
        lr: cfg.lr,
        seed: cfg.seed,
        final_loss: *losses.last().unwrap(),
        epoch_losses: losses,
    };
    Ok(probe)
}

/// Fraction of correctly classified examples.
pub fn eval_probe(p: &Probe, x: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_examples(x, labels)?;
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut correct = 0;
    for (v, &l) in x.iter().zip(labels) {
        correct += (p.predict(v)? == l) as usize;
    }
    Ok(correct as f64 / x.len() as f64)
}

pub const MIN_SPEAKERS: usize = 2;
pub const MIN_UTTERANCES_PER_SPEAKER: usize = 10;
pub const TEST_FRACTION: f64 = 0.1;

/// Per-speaker 90/10 split of utterance indices. Every speaker lands on
/// both sides.
pub fn stratified_split(speakers: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_speakers = speakers.iter().max().map_or(0, |&m| m + 1);
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); n_speakers];
    for (i, &s) in speakers.iter().enumerate() {
        by_speaker[s].push(i);
    }
    by_speaker.retain(|v| !v.is_empty());
    if by_speaker.len() < MIN_SPEAKERS {
        return Err(Error::InsufficientData(format!(
            "need at least {MIN_SPEAKERS} speakers, got {}",
            by_speaker.len()
        )));
    }
    if let Some(small) = by_speaker.iter().find(|v| v.len() < MIN_UTTERANCES_PER_SPEAKER) {
        return Err(Error::InsufficientData(format!(
            "speaker {} has {} utterances, need {MIN_UTTERANCES_PER_SPEAKER}",
            speakers[small[0]],
            small.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in by_speaker {
        group.shuffle(&mut rng);
        let n_test = ((group.len() as f64 * TEST_FRACTION).round() as usize).max(1);
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub representation: String,
    pub k: Option<u32>,
    pub accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeTable {
    pub fn accuracy(&self, k: Option<u32>) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.accuracy)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14} {:>5} {:>9}\n", "representation", "K", "accuracy");
        for r in &self.rows {
            let k = r.k.map_or("—".to_string(), |k| k.to_string());
            writeln!(s, "{:<14} {:>5} {:>9.3}", r.representation, k, r.accuracy).unwrap();
        }
        writeln!(
            s,
            "({} train / {} test utterances; pooled logistic-regression probe)",
            self.n_train, self.n_test
        )
        .unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("representation,k,accuracy\n");
        for r in &self.rows {
            let k = r.k.map_or(String::new(), |k| k.to_string());
            writeln!(s, "{},{},{}", r.representation, k, r.accuracy).unwrap();
        }
        s
    }
}

/// One utterance of the probing corpus; `speaker` is a dense class index.
#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub features: FeatureSequence,
    pub speaker: usize,
}

/// Trains one probe on pooled continuous features and one per codebook on
/// unit histograms, all over the same stratified split.
pub fn speaker_probe_experiment(
    corpus: &[LabeledUtterance],
    codebooks: &[Codebook],
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeTable> {
    let speakers: Vec<usize> = corpus.iter().map(|u| u.speaker).collect();
    let (train, test) = stratified_split(&speakers, split_seed)?;
    let rows: Vec<Option<&Codebook>> = std::iter::once(None).chain(codebooks.iter().map(Some)).collect();
    let rows = rows
        .into_par_iter()
        .map(|cb| {
            let pooled = corpus
                .iter()
                .map(|u| match cb {
                    None => pool_continuous(&u.features),
                    Some(cb) => pool_quantized(&quantize(&u.features, cb)?),
                })
                .collect::<Result<Vec<_>>>()?;
            let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                (idx.iter().map(|&i| pooled[i].clone()).collect(), idx.iter().map(|&i| speakers[i]).collect())
            };
            let (x_train, y_train) = pick(&train);
            let (x_test, y_test) = pick(&test);
            let probe = train_probe(&x_train, &y_train, cfg)?;
            Ok(ProbeRow {
                representation: if cb.is_some() { "quantized" } else { "continuous" }.to_string(),
                k: cb.map(|c| c.k() as u32),
                accuracy: eval_probe(&probe, &x_test, &y_test)?,
                final_loss: probe.meta.final_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeTable {
        rows,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::features::Fingerprint;

    fn seq(data: Vec<f32>, dim: usize) -> FeatureSequence {
        FeatureSequence::new(data, dim, 50.0, Fingerprint::default(), "").unwrap()
    }

    fn blobs(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -3.0 } else { 3.0 };
            x.push(vec![centre + noise.sample(&mut rng), noise.sample(&mut rng)]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn pool_continuous_examples() {
        let f = seq(vec![2.0, -1.0, 2.0, -1.0, 2.0, -1.0], 2);
        assert_eq!(pool_continuous(&f).unwrap(), vec![2.0, -1.0, 0.0, 0.0]);
        let f = seq(vec![-1.0, 1.0, 1.0, -1.0], 2);
        assert_eq!(pool_continuous(&f).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(pool_continuous(&seq(vec![], 3)), Err(Error::EmptySequence)));
    }

    #[test]
    fn pool_continuous_matches_column_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, l) = (6, 37);
        let data: Vec<f32> = (0..d * l).map(|_| rng.random_range(-5.0..5.0)).collect();
        let pooled = pool_continuous(&seq(data.clone(), d)).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..l).map(|t| data[t * d + j] as f64).collect();
            let mean = col.iter().sum::<f64>() / l as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64).sqrt();
            assert!((pooled[j] - mean).abs() < 1e-9);
            assert!((pooled[d + j] - std).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_quantized_examples() {
        let u = UnitSequence::new(vec![3; 7], 50.0, 5).unwrap();
        assert_eq!(pool_quantized(&u).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let u = UnitSequence::new(vec![0, 1, 0, 1], 50.0, 2).unwrap();
        assert_eq!(pool_quantized(&u).unwrap(), vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let units: Vec<u32> = (0..500).map(|_| rng.random_range(0..20)).collect();
        let h = pool_quantized(&UnitSequence::new(units.clone(), 50.0, 20).unwrap()).unwrap();
        for k in 0..20u32 {
            let count = units.iter().filter(|&&u| u == k).count();
            assert_eq!(h[k as usize], count as f64 / 500.0);
        }
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (x, y) = blobs(1, 200);
        let p = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(eval_probe(&p, &x, &y).unwrap(), 1.0);
        let losses = &p.meta.epoch_losses;
        assert_eq!(losses.len(), 5);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let (x, _) = blobs(1, 10);
        assert!(matches!(
            train_probe(&x, &[0; 10], &ProbeConfig::default()),
            Err(Error::DegenerateLabels(1))
        ));
        let labels: Vec<usize> = (0..10).map(|i| if i % 2 == 0 { 0 } else { 2 }).collect();
        assert!(matches!(train_probe(&x, &labels, &ProbeConfig::default()), Err(Error::DegenerateLabels(2))));
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(5, 100);
        let cfg = ProbeConfig { seed: 9, ..ProbeConfig::default() };
        assert_eq!(train_probe(&x, &y, &cfg).unwrap(), train_probe(&x, &y, &cfg).unwrap());
    }

    #[test]
    fn uniform_probe_on_random_labels() {
        let c = 4usize;
        let n = 4000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let acc = eval_probe(&Probe::uniform(c, 2), &x, &y).unwrap();
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn eval_errors() {
        let p = Probe::uniform(2, 3);
        assert!(matches!(eval_probe(&p, &[], &[]), Err(Error::EmptySequence)));
        assert!(matches!(
            eval_probe(&p, &[vec![1.0]], &[0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn split_properties() {
        let speakers: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let (train, test) = stratified_split(&speakers, 4).unwrap();
        assert_eq!(train.len() + test.len(), 60);
        assert!(train.iter().all(|i| !test.contains(i)));
        for s in 0..3 {
            assert_eq!(test.iter().filter(|&&i| speakers[i] == s).count(), 2);
        }
        assert_eq!(stratified_split(&speakers, 4).unwrap(), (train.clone(), test.clone()));
        assert_ne!(stratified_split(&speakers, 5).unwrap().1, test);

        assert!(matches!(stratified_split(&[0; 20], 0), Err(Error::InsufficientData(_))));
        let few: Vec<usize> = (0..15).map(|i| (i >= 10) as usize).collect();
        assert!(matches!(stratified_split(&few, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn table_formats() {
        let t = ProbeTable {
            rows: vec![
                ProbeRow { representation: "continuous".into(), k: None, accuracy: 0.99, final_loss: 0.1 },
                ProbeRow { representation: "quantized".into(), k: Some(50), accuracy: 0.5, final_loss: 0.7 },
            ],
            n_train: 9,
            n_test: 1,
        };
        assert_eq!(t.to_csv(), "representation,k,accuracy\ncontinuous,,0.99\nquantized,50,0.5\n");
        let text = t.to_text();
        assert!(text.contains("continuous         —     0.990"), "{text}");
        assert_eq!(t.accuracy(Some(50)), Some(0.5));
    }
}
