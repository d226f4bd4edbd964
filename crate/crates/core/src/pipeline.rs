//! Corpus-level tooling: codebook training over a directory of audio and
//! parallel batch preprocessing into unit streams and bitstreams.
//!
//! Work is parallel over files only. Each file's outputs depend on nothing
//! but its own audio and the corpus-level statistics computed between the
//! two phases, so results are byte-identical for any worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, Waveform};
use crate::codec::{encode_with_stats, fit_unigram, CodingMode, UnigramModel, DEFAULT_SMOOTHING};
use crate::error::{Error, Result};
use crate::features::{extract, import_features, FeatureConfig, FeatureSequence};
use crate::pitch::{
    normalize_none, normalize_per_speaker, normalize_prefix, speaker_stats, track_pitch, NormalizedPitch, PitchConfig,
    PitchTrack, SpeakerStats,
};
use crate::quantizer::{kmeans_train, quantize, Codebook, KMeansConfig, UnitSequence};
use crate::streams::{align_pitch, dedup, EncodedUtterance};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
/// Unigram model fitted during preprocessing when entropy coding is
/// requested without one.
pub const UNIGRAM_NAME: &str = "unigram.json";
pub const DEFAULT_MAX_TRAIN_FRAMES: usize = 200_000;

/// How F0 is normalized before it enters the pitch stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    None,
    PerSpeaker,
    /// Mean log-F0 of the first `seconds` of each utterance.
    Prefix(f64),
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::PerSpeaker => f.write_str("per-speaker"),
            Self::Prefix(s) => write!(f, "prefix:{s}"),
        }
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    /// `none`, `per-speaker` or `prefix:<seconds>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "per-speaker" => Ok(Self::PerSpeaker),
            _ => s
                .strip_prefix("prefix:")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| *v > 0.0 && v.is_finite())
                .map(Self::Prefix)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown normalization {s:?}"))),
        }
    }
}

/// Whether failed records make the whole run fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    #[default]
    Error,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Feature preset name; ignored when `features` is given.
    pub preset: String,
    pub features: Option<FeatureConfig>,
    /// Expected vocabulary size; checked against the codebook when set.
    pub k: Option<u32>,
    pub codebook: Option<PathBuf>,
    /// Unigram model for entropy coding; fitted on the corpus when absent.
    pub unigram: Option<PathBuf>,
    pub pitch: PitchConfig,
    /// `None` drops the pitch stream.
    pub normalization: Option<NormalizationMode>,
    pub coding: CodingMode,
    pub workers: usize,
    pub on_failure: FailurePolicy,
    pub max_train_frames: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: "hubert-like-50hz".into(),
            features: None,
            k: None,
            codebook: None,
            unigram: None,
            pitch: PitchConfig::default(),
            normalization: Some(NormalizationMode::PerSpeaker),
            coding: CodingMode::Entropy,
            workers: 1,
            on_failure: FailurePolicy::Error,
            max_train_frames: DEFAULT_MAX_TRAIN_FRAMES,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn feature_config(&self) -> Result<FeatureConfig> {
        let cfg = match &self.features {
            Some(f) => f.clone(),
            None => FeatureConfig::preset(&self.preset).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown preset {:?}; expected one of {:?}",
                    self.preset,
                    FeatureConfig::PRESETS
                ))
            })?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_config()?;
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        if !(self.pitch.f_lo > 0.0 && self.pitch.f_lo < self.pitch.f_hi) {
            return Err(Error::InvalidConfig("pitch band must satisfy 0 < f_lo < f_hi".into()));
        }
        for path in self.codebook.iter().chain(&self.unigram) {
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// Reads a WAV and resamples it to the feature sample rate.
pub fn load_audio(path: &Path, cfg: &FeatureConfig) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate() == cfg.sample_rate {
        Ok(w)
    } else {
        resample(&w, cfg.sample_rate)
    }
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Files under `dir` (recursively) with one of `exts`, as paths relative
/// to `dir`, sorted.
pub fn discover(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, exts: &[&str], out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, exts, out)?;
            } else if exts.iter().any(|e| has_ext(&path, e)) {
                out.push(path.strip_prefix(root).expect("walked under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, exts, &mut out)?;
    out.sort();
    Ok(out)
}

/// Speaker id of a corpus file: its top-level directory, if any.
pub fn speaker_of(rel: &Path) -> Option<String> {
    let mut comps = rel.components();
    let first = comps.next()?;
    comps.next()?;
    Some(first.as_os_str().to_string_lossy().into_owned())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {workers} workers: {e}")))
}

/// Features of one input: `.tlft` files are imported, anything else is
/// read as audio.
fn features_of(path: &Path, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    if has_ext(path, "tlft") {
        import_features(path)
    } else {
        extract(&load_audio(path, cfg)?, cfg)
    }
}

/// Trains a codebook on the frames of `inputs` (WAV or TLFT files).
///
/// Frames are pooled in input order; when there are more than
/// `max_frames` a seeded uniform subsample (kept in corpus order) is used.
pub fn train_codebook(
    inputs: &[PathBuf],
    cfg: &FeatureConfig,
    k: usize,
    seed: u64,
    max_frames: usize,
    workers: usize,
) -> Result<Codebook> {
    if inputs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let pool = thread_pool(workers)?;
    let feats: Vec<FeatureSequence> =
        pool.install(|| inputs.par_iter().map(|p| features_of(p, cfg)).collect::<Result<_>>())?;
    let (dim, fingerprint) = (feats[0].dim(), feats[0].fingerprint());
    if let Some(f) = feats.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: f.dim(),
        });
    }
    if feats.iter().any(|f| f.fingerprint() != fingerprint) {
        return Err(Error::ConfigMismatch("inputs come from different feature spaces".into()));
    }
    let mut data: Vec<f32> = feats.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
    let n = data.len() / dim;
    if max_frames > 0 && n > max_frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, n, max_frames).into_vec();
        keep.sort_unstable();
        data = keep.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].to_vec()).collect();
    }
    let cfg_k = KMeansConfig::new(k).with_seed(seed);
    pool.install(|| kmeans_train(&data, dim, &cfg_k, fingerprint))
}

/// Turns a raw F0 track into the normalized pitch stream.
pub type Normalizer<'a> = &'a dyn Fn(&PitchTrack) -> Result<NormalizedPitch>;

/// Encodes one waveform into aligned unit/duration/pitch streams.
/// `normalize` turns the raw track into the pitch stream; `None` drops it.
pub fn encode_waveform(
    w: &Waveform,
    cb: &Codebook,
    cfg: &FeatureConfig,
    pitch: Option<(&PitchConfig, Normalizer)>,
) -> Result<EncodedUtterance> {
    let units = quantize(&extract(w, cfg)?, cb)?;
    let p = match pitch {
        Some((pcfg, normalize)) => {
            let track = track_pitch(w, cfg.frame_rate as f64, pcfg)?;
            Some(align_pitch(&normalize(&track)?, units.frame_rate, units.len())?)
        }
        None => None,
    };
    dedup(&units, p.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub bitstream: String,
    pub units: String,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub duration_seconds: Option<f64>,
    pub speaker_id: Option<String>,
    /// Output paths relative to the output directory.
    pub outputs: Option<Outputs>,
    pub n_frames: Option<usize>,
    pub n_segments: Option<usize>,
    pub payload_bits: Option<u64>,
    /// `"ok"` or `"failed"`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ManifestRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::malformed("manifest", e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug)]
pub struct PreprocessOutcome {
    pub manifest: Manifest,
    /// Unigram model written to the output directory, if one was fitted.
    pub fitted_unigram: Option<PathBuf>,
}

impl PreprocessOutcome {
    /// Process exit status under `policy`: success iff nothing failed,
    /// unless failures are only warnings.
    pub fn succeeded(&self, policy: FailurePolicy) -> bool {
        policy == FailurePolicy::Warn || self.manifest.n_failed() == 0
    }
}

/// Phase-one result for a single file.
struct Analyzed {
    duration: f64,
    units: UnitSequence,
    track: Option<PitchTrack>,
}

fn analyze(path: &Path, cb: &Codebook, cfg: &FeatureConfig, pcfg: Option<&PitchConfig>) -> Result<Analyzed> {
    let w = load_audio(path, cfg)?;
    let units = quantize(&extract(&w, cfg)?, cb)?;
    let track = pcfg.map(|p| track_pitch(&w, cfg.frame_rate as f64, p)).transpose()?;
    Ok(Analyzed {
        duration: w.duration_seconds(),
        units,
        track,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Preprocesses every WAV under `audio_dir` into `out_dir`.
///
/// Phase one extracts units and raw pitch per file. Between the phases the
/// corpus-level statistics are computed: per-speaker log-F0 statistics and,
/// for entropy coding without a supplied model, a unigram model fitted on
/// all successful unit streams. Phase two normalizes, aligns,
/// deduplicates, encodes and writes `<stem>.tluc` and `<stem>.units`
/// mirroring the input tree. Per-file failures become manifest records;
/// only an unusable output directory or configuration is fatal.
pub fn preprocess(audio_dir: &Path, cfg: &PipelineConfig, out_dir: &Path) -> Result<PreprocessOutcome> {
    cfg.validate()?;
    let fcfg = cfg.feature_config()?;
    let cb_path = cfg
        .codebook
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("preprocess needs a codebook".into()))?;
    let cb = Codebook::load(cb_path)?;
    if let Some(k) = cfg.k {
        if k as usize != cb.k() {
            return Err(Error::VocabMismatch {
                expected: k,
                got: cb.k() as u32,
            });
        }
    }
    if cb.fingerprint() != fcfg.fingerprint() {
        log::warn!("codebook was trained on a different feature configuration");
    }
    let supplied_unigram = cfg.unigram.as_ref().map(UnigramModel::load).transpose()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let probe = out_dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(out_dir, e))?;
    let _ = fs::remove_file(&probe);

    let inputs = discover(audio_dir, &["wav"])?;
    let pool = thread_pool(cfg.workers)?;
    let pcfg = cfg.normalization.map(|_| &cfg.pitch);

    // phase one
    let analyzed: Vec<Result<Analyzed>> =
        pool.install(|| inputs.par_iter().map(|rel| analyze(&audio_dir.join(rel), &cb, &fcfg, pcfg)).collect());
    let speakers: Vec<Option<String>> = inputs.iter().map(|r| speaker_of(r)).collect();

    // corpus statistics
    let mut stats: BTreeMap<Option<String>, Result<SpeakerStats>> = BTreeMap::new();
    if cfg.normalization == Some(NormalizationMode::PerSpeaker) {
        let mut groups: BTreeMap<Option<String>, Vec<PitchTrack>> = BTreeMap::new();
        for (a, s) in analyzed.iter().zip(&speakers) {
            if let Ok(Analyzed { track: Some(t), .. }) = a {
                groups.entry(s.clone()).or_default().push(t.clone());
            }
        }
        for (s, tracks) in groups {
            stats.insert(s, speaker_stats(&tracks));
        }
    }
    let mut fitted_unigram = None;
    let unigram = match (cfg.coding, supplied_unigram) {
        (CodingMode::Fixed, _) => None,
        (CodingMode::Entropy, Some(m)) => Some(m),
        (CodingMode::Entropy, None) => {
            let streams: Vec<EncodedUtterance> = analyzed
                .iter()
                .filter_map(|a| a.as_ref().ok())
                .map(|a| dedup(&a.units, None))
                .collect::<Result<_>>()?;
            if streams.is_empty() {
                None
            } else {
                let m = fit_unigram(&streams, DEFAULT_SMOOTHING)?;
                let path = out_dir.join(UNIGRAM_NAME);
                m.save(&path)?;
                fitted_unigram = Some(path);
                Some(m)
            }
        }
    };

    // phase two
    let finish = |rel: &PathBuf, a: &Analyzed, speaker: &Option<String>| -> Result<ManifestRecord> {
        let pitch = match (cfg.normalization, &a.track) {
            (Some(mode), Some(track)) => {
                let p = match mode {
                    NormalizationMode::None => normalize_none(track),
                    NormalizationMode::PerSpeaker => match &stats[speaker] {
                        Ok(s) => normalize_per_speaker(track, s),
                        Err(e) => return Err(Error::InsufficientData(format!("speaker statistics: {e}"))),
                    },
                    NormalizationMode::Prefix(seconds) => normalize_prefix(track, seconds)?,
                };
                Some(align_pitch(&p, a.units.frame_rate, a.units.len())?)
            }
            _ => None,
        };
        let e = dedup(&a.units, pitch.as_ref())?;
        let (bitstream, bits) = encode_with_stats(&e, unigram.as_ref())?;
        let stem = rel.with_extension("");
        let outputs = Outputs {
            bitstream: slash_path(&stem.with_extension("tluc")),
            units: slash_path(&stem.with_extension("units")),
        };
        write_bytes(&out_dir.join(&outputs.bitstream), &bitstream.to_bytes())?;
        write_bytes(&out_dir.join(&outputs.units), (e.to_text() + "\n").as_bytes())?;
        Ok(ManifestRecord {
            audio_path: slash_path(&audio_dir.join(rel)),
            duration_seconds: Some(a.duration),
            speaker_id: speaker.clone(),
            outputs: Some(outputs),
            n_frames: Some(a.units.len()),
            n_segments: Some(e.n_segments()),
            payload_bits: Some(bits.total()),
            status: "ok".into(),
            reason: None,
        })
    };
    let records: Vec<ManifestRecord> = pool.install(|| {
        inputs
            .par_iter()
            .zip(&analyzed)
            .zip(&speakers)
            .map(|((rel, a), speaker)| {
                let (duration, result) = match a {
                    Ok(a) => (Some(a.duration), finish(rel, a, speaker)),
                    Err(e) => (None, Err(Error::InsufficientData(e.to_string()))),
                };
                result.unwrap_or_else(|e| {
                    let reason = match e {
                        Error::InsufficientData(msg) => msg,
                        e => e.to_string(),
                    };
                    log::warn!("{}: {reason}", rel.display());
                    ManifestRecord {
                        audio_path: slash_path(&audio_dir.join(rel)),
                        duration_seconds: duration,
                        speaker_id: speaker.clone(),
                        outputs: None,
                        n_frames: None,
                        n_segments: None,
                        payload_bits: None,
                        status: "failed".into(),
                        reason: Some(reason),
                    }
                })
            })
            .collect()
    });

    // single collector: the manifest is written once, in input order
    let manifest = Manifest { records };
    let path = out_dir.join(MANIFEST_NAME);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(manifest.to_jsonl().as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(PreprocessOutcome {
        manifest,
        fitted_unigram,
    })
}
