//! n-gram language model over deduplicated units, and speech
//! continuation built on it.
//!
//! Token ids `0..K` are units, `K` is end-of-sequence and `K + 1`
//! begin-of-sequence padding. Predicted distributions range over the
//! `K + 1` outcomes units ∪ {EOS}.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, Waveform};
use crate::binio::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::features::{log_mel, FeatureConfig};
use crate::quantizer::{quantize, Codebook};
use crate::streams::{dedup, EncodedUtterance};
use crate::vocoder::{synthesize, SynthesisConfig};

pub const TLLM_MAGIC: &[u8; 4] = b"TLLM";
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;
/// Duration given to sampled units never seen in training.
pub const FALLBACK_DURATION: u32 = 2;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    k: u32,
    smoothing: f64,
    contexts: HashMap<Vec<u32>, ContextCounts>,
    /// Median training duration per unit, 0 when unseen.
    median_durations: Vec<u32>,
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn eos(&self) -> u32 {
        self.k
    }

    pub fn bos(&self) -> u32 {
        self.k + 1
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// Duration for a generated unit: its median training duration, or
    /// [`FALLBACK_DURATION`].
    pub fn duration_for(&self, unit: u32) -> u32 {
        match self.median_durations.get(unit as usize) {
            Some(&d) if d > 0 => d,
            _ => FALLBACK_DURATION,
        }
    }

    /// The last `order − 1` tokens of BOS-padded `history`.
    fn context_of(&self, history: &[u32]) -> Vec<u32> {
        let n = self.order - 1;
        let mut ctx = vec![self.bos(); n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        ctx
    }

    /// `P(next | history)` over the `K + 1` outcomes, where `history`
    /// holds the units emitted so far (no BOS).
    pub fn next_distribution(&self, history: &[u32]) -> Vec<f64> {
        let outcomes = self.k as usize + 1;
        let ctx = self.context_of(history);
        let Some(c) = self.contexts.get(&ctx) else {
            return vec![1.0 / outcomes as f64; outcomes];
        };
        let denom = c.total as f64 + self.smoothing * outcomes as f64;
        let mut p = vec![self.smoothing / denom; outcomes];
        for (&u, &count) in &c.next {
            p[u as usize] = (count as f64 + self.smoothing) / denom;
        }
        p
    }

    pub fn prob(&self, history: &[u32], next: u32) -> f64 {
        self.next_distribution(history)[next as usize]
    }

    fn check_units(&self, units: &[u32]) -> Result<()> {
        if let Some(&u) = units.iter().find(|&&u| u >= self.k) {
            return Err(Error::VocabMismatch {
                expected: self.k,
                got: u + 1,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// `"TLLM"`, `u32` order, `u32` K, `f64` k, `u64` entry count, entries
    /// sorted by (context, unit) as `order − 1` `u32` context tokens, `u32`
    /// next token, `u64` count; then K `u32` median durations.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(&Vec<u32>, u32, u64)> = self
            .contexts
            .iter()
            .flat_map(|(ctx, c)| c.next.iter().map(move |(&u, &n)| (ctx, u, n)))
            .collect();
        entries.sort();
        let mut out = Vec::new();
        out.extend_from_slice(TLLM_MAGIC);
        out.extend_from_slice(&(self.order as u32).to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.smoothing.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (ctx, u, n) in entries {
            for t in ctx {
                out.extend_from_slice(&t.to_le_bytes());
            }
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&n.to_le_bytes());
        }
        for d in &self.median_durations {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "TLLM");
        r.magic(TLLM_MAGIC)?;
        let order = r.u32()? as usize;
        let k = r.u32()?;
        let smoothing = r.f64()?;
        if order == 0 || k == 0 || k > u32::MAX - 2 || !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::malformed("TLLM header", format!("order {order}, K {k}, k {smoothing}")));
        }
        let n_entries = r.u64()?;
        let entry_len = 4 * order as u64 + 8;
        if (r.remaining().len() as u64) < n_entries.saturating_mul(entry_len) {
            return Err(Error::TruncatedFile("TLLM"));
        }
        let mut contexts: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
        for _ in 0..n_entries {
            let ctx = (0..order - 1).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let u = r.u32()?;
            let n = r.u64()?;
            if u > k || n == 0 || ctx.iter().any(|&t| t == k || t > k + 1) {
                return Err(Error::malformed("TLLM entry", format!("context {ctx:?}, unit {u}, count {n}")));
            }
            let c = contexts.entry(ctx).or_default();
            c.total += n;
            c.next.insert(u, n);
        }
        let median_durations = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            order,
            k,
            smoothing,
            contexts,
            median_durations,
        })
    }
}

fn lower_median(mut v: Vec<u32>) -> u32 {
    if v.is_empty() {
        return 0;
    }
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Counts n-grams over BOS-padded, EOS-terminated unit streams.
pub fn train_ngram(corpus: &[EncodedUtterance], order: usize, smoothing: f64) -> Result<NGramModel> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    if order == 0 {
        return Err(Error::InvalidConfig("n-gram order must be at least 1".into()));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidConfig(format!("smoothing must be >= 0, got {smoothing}")));
    }
    let k = first.k;
    let mut model = NGramModel {
        order,
        k,
        smoothing,
        contexts: HashMap::new(),
        median_durations: Vec::new(),
    };
    let mut durations: Vec<Vec<u32>> = vec![Vec::new(); k as usize];
    for e in corpus {
        if e.k != k {
            return Err(Error::VocabMismatch { expected: k, got: e.k });
        }
        model.check_units(&e.units)?;
        for (&u, &d) in e.units.iter().zip(&e.durations) {
            durations[u as usize].push(d);
        }
        let mut history: Vec<u32> = Vec::with_capacity(e.units.len());
        for &next in e.units.iter().chain(std::iter::once(&k)) {
            let c = model.contexts.entry(model.context_of(&history)).or_default();
            c.total += 1;
            *c.next.entry(next).or_default() += 1;
            history.push(next);
        }
    }
    model.median_durations = durations.into_iter().map(lower_median).collect();
    Ok(model)
}

/// `exp` of the mean negative log-likelihood of `units` followed by EOS.
pub fn perplexity(m: &NGramModel, units: &[u32]) -> Result<f64> {
    m.check_units(units)?;
    let mut nll = 0.0;
    let mut history = Vec::with_capacity(units.len());
    for &next in units.iter().chain(std::iter::once(&m.eos())) {
        nll -= m.prob(&history, next).ln();
        history.push(next);
    }
    Ok((nll / (units.len() + 1) as f64).exp())
}

/// `p^(1/T)` renormalized, computed in the log domain.
pub fn apply_temperature(p: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = p
        .iter()
        .map(|&q| if q > 0.0 { q.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

fn draw(p: &[f64], rng: &mut impl Rng) -> u32 {
    let r = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if r < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

/// Samples up to `max_len` units after `prompt` from `P(·|ctx)^(1/T)`,
/// stopping early at EOS. The prompt is not repeated in the output.
pub fn sample_continuation(
    m: &NGramModel,
    prompt: &[u32],
    max_len: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    m.check_units(prompt)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be > 0, got {temperature}")));
    }
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let p = apply_temperature(&m.next_distribution(&history), temperature);
        let next = draw(&p, rng);
        if next == m.eos() {
            break;
        }
        out.push(next);
        history.push(next);
    }
    Ok(out)
}

/// Argmax decoding; ties go to the smallest token id.
pub fn greedy_continuation(m: &NGramModel, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
    m.check_units(prompt)?;
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let p = m.next_distribution(&history);
        let mut best = 0;
        for (i, &q) in p.iter().enumerate() {
            if q > p[best] {
                best = i;
            }
        }
        if best as u32 == m.eos() {
            break;
        }
        out.push(best as u32);
        history.push(best as u32);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationConfig {
    pub max_units: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            max_units: 100,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Continuation {
    pub prompt: EncodedUtterance,
    pub continuation: Vec<u32>,
    /// Prompt and continuation segments as synthesized.
    pub combined: EncodedUtterance,
    pub waveform: Waveform,
}

/// Encodes the prompt, samples a continuation, gives each new unit its
/// median training duration and synthesizes everything.
pub fn continue_speech(
    w: &Waveform,
    cb: &Codebook,
    m: &NGramModel,
    cfg: &FeatureConfig,
    syn: &SynthesisConfig,
    cont: &ContinuationConfig,
) -> Result<Continuation> {
    if m.k() as usize != cb.k() {
        return Err(Error::ModelMismatch {
            model: m.k(),
            stream: cb.k() as u32,
        });
    }
    let resampled;
    let w = if w.sample_rate() != cfg.sample_rate {
        resampled = resample(w, cfg.sample_rate)?;
        &resampled
    } else {
        w
    };
    let prompt = dedup(&quantize(&log_mel(w, cfg)?, cb)?, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cont.seed);
    let continuation = sample_continuation(m, &prompt.units, cont.max_units, cont.temperature, &mut rng)?;
    let mut combined = prompt.clone();
    for &u in &continuation {
        let d = m.duration_for(u);
        if combined.units.last() == Some(&u) {
            *combined.durations.last_mut().unwrap() += d;
        } else {
            combined.units.push(u);
            combined.durations.push(d);
            combined.pitch.push(None);
        }
    }
    let waveform = synthesize(&combined, cb, cfg, syn)?.waveform;
    Ok(Continuation {
        prompt,
        continuation,
        combined,
        waveform,
    })
}
