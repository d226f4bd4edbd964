//! k-means codebooks and nearest-centroid quantization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Fingerprint};

pub const TLCB_MAGIC: &[u8; 4] = b"TLCB";
pub const TLCB_VERSION: u32 = 1;

/// Points per parallel assignment task. Fixed so results never depend on
/// the number of worker threads.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 100,
            rel_tol: 1e-4,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub iters_run: usize,
    pub final_distortion: f64,
    pub seed: u64,
    /// Mean distortion after the initial assignment and after every
    /// accepted Lloyd iteration.
    pub distortion_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    fingerprint: Fingerprint,
    meta: TrainingMeta,
}

/// Discrete units, one per feature frame, each below `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub frame_rate: f64,
    pub k: u32,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>, frame_rate: f64, k: u32) -> Result<Self> {
        if let Some(&u) = units.iter().find(|&&u| u >= k) {
            return Err(Error::VocabMismatch {
                expected: k,
                got: u + 1,
            });
        }
        Ok(Self { units, frame_rate, k })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

impl Codebook {
    /// Wraps explicit centroids. Requires `K >= 2`, finite values and
    /// pairwise-distinct rows.
    pub fn new(centroids: Vec<f32>, dim: usize, fingerprint: Fingerprint, meta: TrainingMeta) -> Result<Self> {
        if dim == 0 || !centroids.len().is_multiple_of(dim) {
            return Err(Error::InvalidConfig("centroid matrix has ragged rows".into()));
        }
        let k = centroids.len() / dim;
        if k < 2 {
            return Err(Error::InvalidConfig(format!("codebook needs K >= 2, got {k}")));
        }
        if let Some(i) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry {
                row: i / dim,
                col: i % dim,
            });
        }
        let rows: Vec<&[f32]> = centroids.chunks_exact(dim).collect();
        for a in 0..k {
            for b in a + 1..k {
                if sq_dist(rows[a], rows[b]) <= 1e-18 {
                    return Err(Error::InvalidConfig(format!("centroids {a} and {b} coincide")));
                }
            }
        }
        Ok(Self {
            centroids,
            k,
            dim,
            fingerprint,
            meta,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Index of the nearest centroid and its squared distance; ties go to
    /// the smaller index.
    pub fn nearest(&self, frame: &[f32]) -> (u32, f64) {
        nearest(&self.centroids, self.dim, frame)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// TLCB layout: `"TLCB"`, `u32` version, `u32` K, `u32` d, 32-byte
    /// fingerprint, `K·d` `f32` row-major, `u32` length + JSON metadata.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(48 + 4 * self.centroids.len() + meta.len());
        out.extend_from_slice(TLCB_MAGIC);
        out.extend_from_slice(&TLCB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.0);
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "TLCB");
        r.magic(TLCB_MAGIC)?;
        let version = r.u32()?;
        if version != TLCB_VERSION {
            return Err(Error::VersionMismatch {
                format: "TLCB",
                expected: TLCB_VERSION,
                found: version,
            });
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let fingerprint = Fingerprint(r.take(32)?.try_into().unwrap());
        let count = k.checked_mul(dim).ok_or(Error::TruncatedFile("TLCB"))?;
        if r.remaining().len() / 4 < count {
            return Err(Error::TruncatedFile("TLCB"));
        }
        let centroids = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::malformed("TLCB metadata", e.to_string()))?;
        r.finish()?;
        Self::new(centroids, dim, fingerprint, meta)
    }
}

/// Squared Euclidean distance accumulated in f64.
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, frame: &[f32]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(frame, c);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

/// Labels and squared distances for every point, computed in fixed-size
/// parallel chunks and concatenated in order.
fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> Vec<(u32, f64)> {
    data.par_chunks(CHUNK * dim)
        .flat_map_iter(|chunk| {
            chunk
                .chunks_exact(dim)
                .map(|p| nearest(centroids, dim, p))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn mean_distortion(assignments: &[(u32, f64)]) -> f64 {
    assignments.iter().map(|a| a.1).sum::<f64>() / assignments.len() as f64
}

/// Trains a K-centroid codebook on `data` (`N × dim`, row-major).
///
/// k-means++ seeding, then Lloyd iterations until the relative
/// improvement drops below `rel_tol` or `max_iters` is reached. Clusters
/// that lose all their points are moved onto the point farthest from its
/// assigned centroid. An iteration that would increase distortion (only
/// possible through rounding) is discarded and training stops, so the
/// recorded trace is non-increasing.
pub fn kmeans_train(data: &[f32], dim: usize, cfg: &KMeansConfig, fingerprint: Fingerprint) -> Result<Codebook> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::InvalidConfig("point matrix has ragged rows".into()));
    }
    let n = data.len() / dim;
    let k = cfg.k;
    if k < 2 {
        return Err(Error::InvalidConfig(format!("K must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i / dim));
    }
    let points: Vec<&[f32]> = data.chunks_exact(dim).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng)?;

    let mut assignments = assign(data, dim, &centroids);
    let mut current = mean_distortion(&assignments);
    let mut trace = vec![current];
    let mut iters_run = 0;

    for _ in 0..cfg.max_iters {
        let updated = update_centroids(&points, dim, k, &assignments, &centroids);
        let reassigned = assign(data, dim, &updated);
        let next = mean_distortion(&reassigned);
        if next > current {
            break;
        }
        centroids = updated;
        assignments = reassigned;
        iters_run += 1;
        trace.push(next);
        let improved = current - next;
        current = next;
        if improved <= cfg.rel_tol * trace[trace.len() - 2] {
            break;
        }
    }

    Ok(Codebook {
        centroids,
        k,
        dim,
        fingerprint,
        meta: TrainingMeta {
            iters_run,
            final_distortion: current,
            seed: cfg.seed,
            distortion_trace: trace,
        },
    })
}

fn kmeans_plus_plus(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let dim = points[0].len();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..points.len());
    centroids.extend_from_slice(points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    for chosen in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::TooFewPoints { n: chosen, k });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let p = points[pick.expect("positive total has a positive entry")];
        centroids.extend_from_slice(p);
        for (d, q) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(q, p));
        }
    }
    Ok(centroids)
}

fn update_centroids(
    points: &[&[f32]],
    dim: usize,
    k: usize,
    assignments: &[(u32, f64)],
    previous: &[f32],
) -> Vec<f32> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &(label, _)) in points.iter().zip(assignments) {
        let c = label as usize;
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p.iter()) {
            *s += v as f64;
        }
    }
    let mut out = previous.to_vec();
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (o, s) in out[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *o = (s * inv) as f32;
            }
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| assignments[b].1.total_cmp(&assignments[a].1).then(a.cmp(&b)));
        let mut used: Vec<&[f32]> = Vec::new();
        let mut candidates = order.into_iter().filter(|&i| assignments[i].1 > 0.0);
        for c in empty {
            let Some(i) = candidates.by_ref().find(|&i| !used.iter().any(|u| *u == points[i])) else {
                break;
            };
            used.push(points[i]);
            out[c * dim..(c + 1) * dim].copy_from_slice(points[i]);
        }
    }
    out
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Maps every frame to its nearest centroid.
pub fn quantize(f: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    check_dim(cb.dim, f.dim())?;
    if f.fingerprint() != cb.fingerprint {
        log::warn!(
            "feature fingerprint {} differs from codebook fingerprint {}",
            f.fingerprint(),
            cb.fingerprint
        );
    }
    let units = assign(f.as_slice(), cb.dim, &cb.centroids)
        .into_iter()
        .map(|(u, _)| u)
        .collect();
    Ok(UnitSequence {
        units,
        frame_rate: f.frame_rate(),
        k: cb.k as u32,
    })
}

/// Mean squared distance from each frame (`N × dim`) to its nearest
/// centroid.
pub fn distortion(data: &[f32], dim: usize, cb: &Codebook) -> Result<f64> {
    check_dim(cb.dim, dim)?;
    if data.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(mean_distortion(&assign(data, dim, &cb.centroids)))
}
