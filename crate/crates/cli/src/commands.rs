use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use unit_codec::codec::{bitrate_report, decode_bitstream, encode_with_stats, fit_unigram, CodingMode, DEFAULT_SMOOTHING};
use unit_codec::features::{export_features, extract, log_mel};
use unit_codec::lm::{continue_speech, train_ngram, ContinuationConfig};
use unit_codec::pipeline::{
    discover, encode_waveform, load_audio, preprocess, speaker_of, train_codebook, Normalizer, MANIFEST_NAME,
    UNIGRAM_NAME,
};
use unit_codec::pitch::{normalize_none, normalize_per_speaker, normalize_prefix, speaker_stats, track_pitch};
use unit_codec::probing::{speaker_probe_experiment, LabeledUtterance, ProbeConfig};
use unit_codec::quantizer::quantize;
use unit_codec::streams::dedup;
use unit_codec::synth::{speaker_profiles, synth_corpus};
use unit_codec::vocoder::synthesize;
use unit_codec::{
    read_wav, write_wav, Bitstream, Codebook, EncodedUtterance, Error, FeatureConfig, Manifest, NGramModel,
    NormalizationMode, NormalizedPitch, PipelineConfig, PitchTrack, Result, SynthesisConfig, UnigramModel,
};

use crate::{Command, ConfigFlags, Failure, Global};

/// What a command prints: `text` normally, `json` under `--json`.
pub struct Report {
    pub text: String,
    pub json: Value,
}

impl Report {
    fn new(text: String, json: Value) -> Self {
        Self { text, json }
    }
}

type Outcome = std::result::Result<Report, (Failure, Option<Report>)>;

fn fail(e: Error) -> (Failure, Option<Report>) {
    (Failure::Core(e), None)
}

/// Configuration file (if any), then command-line overrides, then the
/// global seed.
fn load_config(global: &Global, flags: &ConfigFlags) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    flags.apply(&mut cfg);
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn codebook(cfg: &PipelineConfig) -> Result<Codebook> {
    let path = cfg
        .codebook
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("a codebook is required (--codebook)".into()))?;
    Codebook::load(path)
}

fn unigram(cfg: &PipelineConfig) -> Result<Option<UnigramModel>> {
    cfg.unigram.as_ref().map(UnigramModel::load).transpose()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn syn_config(cfg: &PipelineConfig, iters: Option<usize>) -> SynthesisConfig {
    let mut syn = SynthesisConfig {
        phase_seed: cfg.seed,
        ..Default::default()
    };
    if let Some(i) = iters {
        syn.griffin_lim_iters = i;
    }
    syn
}

pub fn run(global: &Global, command: Command) -> Outcome {
    match command {
        Command::Preprocess {
            audio_dir,
            out,
            k,
            workers,
            on_failure,
            cfg,
            pitch,
        } => {
            let mut c = load_config(global, &cfg).map_err(fail)?;
            pitch.apply(&mut c);
            if k.is_some() {
                c.k = k;
            }
            if let Some(w) = workers {
                c.workers = w;
            }
            if let Some(p) = on_failure {
                c.on_failure = p;
            }
            cmd_preprocess(&audio_dir, &c, &out)
        }
        other => run_simple(global, other).map_err(fail),
    }
}

fn run_simple(global: &Global, command: Command) -> Result<Report> {
    match command {
        Command::SynthCorpus {
            out,
            speakers,
            per_speaker,
            seconds,
        } => cmd_synth_corpus(&out, speakers, per_speaker, seconds, global.seed.unwrap_or(0)),
        Command::TrainKmeans {
            inputs,
            k,
            out,
            max_frames,
            workers,
            cfg,
        } => {
            let mut c = load_config(global, &cfg)?;
            if let Some(m) = max_frames {
                c.max_train_frames = m;
            }
            if let Some(w) = workers {
                c.workers = w;
            }
            cmd_train_kmeans(&inputs, k, &out, &c)
        }
        Command::Encode {
            input,
            out,
            units_out,
            cfg,
            pitch,
        } => {
            let mut c = load_config(global, &cfg)?;
            pitch.apply(&mut c);
            cmd_encode(&input, &out, units_out.as_deref(), &c)
        }
        Command::Decode { input, out, cfg } => cmd_decode(&input, out.as_deref(), &load_config(global, &cfg)?),
        Command::Resynth {
            input,
            out,
            iters,
            convergence,
            cfg,
        } => cmd_resynth(&input, &out, iters, convergence.as_deref(), &load_config(global, &cfg)?),
        Command::Bitrate {
            audio_dir,
            codebooks,
            cfg,
        } => cmd_bitrate(&audio_dir, &codebooks, &load_config(global, &cfg)?),
        Command::Probe {
            audio_dir,
            codebooks,
            split_seed,
            epochs,
            lr,
            csv,
            cfg,
        } => {
            let c = load_config(global, &cfg)?;
            let mut pc = ProbeConfig {
                seed: c.seed,
                ..Default::default()
            };
            if let Some(e) = epochs {
                pc.epochs = e;
            }
            if let Some(l) = lr {
                pc.lr = l;
            }
            cmd_probe(&audio_dir, &codebooks, split_seed.unwrap_or(c.seed), &pc, csv, &c)
        }
        Command::LmTrain {
            input,
            out,
            order,
            smoothing,
            cfg,
        } => cmd_lm_train(&input, &out, order, smoothing, &load_config(global, &cfg)?),
        Command::Continue {
            prompt,
            lm,
            out,
            max_units,
            temperature,
            iters,
            cfg,
        } => {
            let c = load_config(global, &cfg)?;
            let cont = ContinuationConfig {
                max_units,
                temperature,
                seed: c.seed,
            };
            cmd_continue(&prompt, &lm, &out, &cont, iters, &c)
        }
        Command::Pitch {
            input,
            frame_rate,
            normalize,
            out,
            cfg,
        } => cmd_pitch(&input, frame_rate, normalize, out.as_deref(), &load_config(global, &cfg)?),
        Command::Features { input, out, cfg } => cmd_features(&input, &out, &load_config(global, &cfg)?),
        Command::Preprocess { .. } => unreachable!("handled by run"),
    }
}

fn cmd_synth_corpus(out: &Path, speakers: usize, per_speaker: usize, seconds: f64, seed: u64) -> Result<Report> {
    if speakers == 0 || per_speaker == 0 || !(seconds > 0.0) {
        return Err(Error::InvalidConfig("speakers, per-speaker and seconds must be positive".into()));
    }
    let corpus = synth_corpus(speakers, per_speaker, seconds, seed)?;
    for u in &corpus {
        let path = out.join(u.relative_path());
        let dir = path.parent().expect("relative path has a directory");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav(&u.waveform, &path)?;
    }
    let profiles = speaker_profiles(speakers);
    let text = format!(
        "wrote {} utterances ({} speakers × {per_speaker}, {seconds} s each) to {}\n",
        corpus.len(),
        speakers,
        out.display()
    );
    let json = json!({
        "out": out,
        "files": corpus.iter().map(|u| u.relative_path()).collect::<Vec<_>>(),
        "speakers": profiles.iter().map(|p| json!({
            "f0_hz": p.f0_hz, "tilt": p.tilt, "formant_scale": p.formant_scale
        })).collect::<Vec<_>>(),
        "seed": seed,
    });
    Ok(Report::new(text, json))
}

/// Expands directories into their WAV and TLFT files.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(discover(p, &["wav", "tlft"])?.into_iter().map(|r| p.join(r)));
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    Ok(out)
}

fn cmd_train_kmeans(inputs: &[PathBuf], k: usize, out: &Path, cfg: &PipelineConfig) -> Result<Report> {
    cfg.validate()?;
    let fcfg = cfg.feature_config()?;
    let files = expand_inputs(inputs)?;
    let cb = train_codebook(&files, &fcfg, k, cfg.seed, cfg.max_train_frames, cfg.workers)?;
    cb.save(out)?;
    let m = cb.meta();
    let text = format!(
        "trained K={} on {} files: {} iterations, distortion {:.4}; wrote {}\n",
        cb.k(),
        files.len(),
        m.iters_run,
        m.final_distortion,
        out.display()
    );
    let json = json!({
        "out": out, "k": cb.k(), "dim": cb.dim(), "files": files.len(),
        "iterations": m.iters_run, "distortion": m.final_distortion, "seed": m.seed,
    });
    Ok(Report::new(text, json))
}

fn cmd_preprocess(audio_dir: &Path, cfg: &PipelineConfig, out: &Path) -> Outcome {
    let outcome = preprocess(audio_dir, cfg, out).map_err(fail)?;
    let m = &outcome.manifest;
    let failed: Vec<&_> = m.records.iter().filter(|r| !r.is_ok()).collect();
    let mut text = format!(
        "{} files, {} ok, {} failed; manifest {}\n",
        m.records.len(),
        m.records.len() - failed.len(),
        failed.len(),
        out.join(MANIFEST_NAME).display()
    );
    for r in &failed {
        let _ = writeln!(text, "  failed: {} ({})", r.audio_path, r.reason.as_deref().unwrap_or("?"));
    }
    if let Some(p) = &outcome.fitted_unigram {
        let _ = writeln!(text, "fitted unigram model {}", p.display());
    }
    let report = Report::new(
        text,
        json!({
            "out": out,
            "files": m.records.len(),
            "failed": failed.len(),
            "fitted_unigram": outcome.fitted_unigram,
            "failures": failed.iter().map(|r| json!({"audio_path": r.audio_path, "reason": r.reason})).collect::<Vec<_>>(),
        }),
    );
    if outcome.succeeded(cfg.on_failure) {
        Ok(report)
    } else {
        Err((Failure::Records(failed.len()), Some(report)))
    }
}

/// Encodes one file; per-speaker normalization uses the file's own
/// statistics since there is no corpus to pool over.
fn encode_file(input: &Path, cb: &Codebook, fcfg: &FeatureConfig, cfg: &PipelineConfig) -> Result<EncodedUtterance> {
    let w = load_audio(input, fcfg)?;
    let normalize = |t: &PitchTrack| -> Result<NormalizedPitch> {
        match cfg.normalization.expect("only called with a pitch stream") {
            NormalizationMode::None => Ok(normalize_none(t)),
            NormalizationMode::PerSpeaker => Ok(normalize_per_speaker(t, &speaker_stats(std::slice::from_ref(t))?)),
            NormalizationMode::Prefix(s) => normalize_prefix(t, s),
        }
    };
    let pitch = cfg
        .normalization
        .map(|_| (&cfg.pitch, &normalize as Normalizer));
    encode_waveform(&w, cb, fcfg, pitch)
}

fn cmd_encode(input: &Path, out: &Path, units_out: Option<&Path>, cfg: &PipelineConfig) -> Result<Report> {
    cfg.validate()?;
    let fcfg = cfg.feature_config()?;
    let cb = codebook(cfg)?;
    let model = unigram(cfg)?;
    let model = match cfg.coding {
        CodingMode::Fixed => None,
        CodingMode::Entropy if model.is_none() => {
            log::info!("no unigram model given; using fixed-width coding");
            None
        }
        CodingMode::Entropy => model,
    };
    let e = encode_file(input, &cb, &fcfg, cfg)?;
    let (b, bits) = encode_with_stats(&e, model.as_ref())?;
    b.save(out)?;
    if let Some(p) = units_out {
        write_text(p, &(e.to_text() + "\n"))?;
    }
    let mode = if model.is_some() { "entropy" } else { "fixed" };
    let text = format!(
        "{} segments ({} frames), {mode} coding, {} payload bits; wrote {}\n",
        e.n_segments(),
        e.total_frames(),
        b.payload_bits(),
        out.display()
    );
    let json = json!({
        "out": out, "k": e.k, "n_segments": e.n_segments(), "n_frames": e.total_frames(),
        "coding": mode, "pitch": e.has_pitch(), "payload_bits": b.payload_bits(), "stream_bits": bits,
    });
    Ok(Report::new(text, json))
}

fn cmd_decode(input: &Path, out: Option<&Path>, cfg: &PipelineConfig) -> Result<Report> {
    let b = Bitstream::load(input)?;
    let e = decode_bitstream(&b, unigram(cfg)?.as_ref())?;
    let line = e.to_text() + "\n";
    let text = match out {
        Some(p) => {
            write_text(p, &line)?;
            format!("{} segments; wrote {}\n", e.n_segments(), p.display())
        }
        None => line,
    };
    let json = json!({
        "k": e.k, "frame_rate": e.frame_rate, "units": e.units, "durations": e.durations, "pitch": e.pitch,
    });
    Ok(Report::new(text, json))
}

fn cmd_resynth(
    input: &Path,
    out: &Path,
    iters: Option<usize>,
    convergence: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<Report> {
    let fcfg = cfg.feature_config()?;
    let cb = codebook(cfg)?;
    let syn = syn_config(cfg, iters);
    syn.validate()?;
    let e = if input.extension().is_some_and(|x| x.eq_ignore_ascii_case("tluc")) {
        let e = decode_bitstream(&Bitstream::load(input)?, unigram(cfg)?.as_ref())?;
        if e.k as usize != cb.k() {
            return Err(Error::VocabMismatch {
                expected: cb.k() as u32,
                got: e.k,
            });
        }
        e
    } else {
        let w = load_audio(input, &fcfg)?;
        dedup(&quantize(&log_mel(&w, &fcfg)?, &cb)?, None)?
    };
    let g = synthesize(&e, &cb, &fcfg, &syn)?;
    write_wav(&g.waveform, out)?;
    if let Some(p) = convergence {
        write_text(p, &g.convergence_csv())?;
    }
    let last = g.convergence.last().copied();
    let text = format!(
        "{:.2} s from {} segments, final spectral convergence {}; wrote {}\n",
        g.waveform.duration_seconds(),
        e.n_segments(),
        last.map_or("-".into(), |c| format!("{c:.4}")),
        out.display()
    );
    let json = json!({
        "out": out, "seconds": g.waveform.duration_seconds(), "n_segments": e.n_segments(),
        "convergence": g.convergence,
    });
    Ok(Report::new(text, json))
}

fn cmd_bitrate(audio_dir: &Path, codebooks: &[PathBuf], cfg: &PipelineConfig) -> Result<Report> {
    use rayon::prelude::*;
    let fcfg = cfg.feature_config()?;
    let files = discover(audio_dir, &["wav"])?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let analyzed = files
        .par_iter()
        .map(|rel| {
            let w = load_audio(&audio_dir.join(rel), &fcfg)?;
            Ok((w.duration_seconds(), extract(&w, &fcfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let seconds: Vec<f64> = analyzed.iter().map(|a| a.0).collect();
    let mut rows = Vec::new();
    for path in codebooks {
        let cb = Codebook::load(path)?;
        let streams = analyzed
            .par_iter()
            .map(|(_, f)| dedup(&quantize(f, &cb)?, None))
            .collect::<Result<Vec<_>>>()?;
        let model = fit_unigram(&streams, DEFAULT_SMOOTHING)?;
        rows.push(bitrate_report(&streams, &model, &seconds)?);
    }
    rows.sort_by_key(|r| r.k);
    let mut text = format!(
        "{} files, {:.1} s\n{:>6} {:>8} {:>9} {:>11} {:>11} {:>11}\n",
        files.len(),
        seconds.iter().sum::<f64>(),
        "K",
        "tokens",
        "H bit/tok",
        "fixed b/s",
        "entropy b/s",
        "actual b/s"
    );
    for r in &rows {
        let _ = writeln!(
            text,
            "{:>6} {:>8} {:>9.3} {:>11.1} {:>11.1} {:>11.1}",
            r.k, r.n_tokens, r.entropy_bits_per_token, r.fixed_bits_per_sec, r.entropy_bits_per_sec, r.actual_bits_per_sec
        );
    }
    Ok(Report::new(text, json!({ "rows": rows })))
}

fn cmd_probe(
    audio_dir: &Path,
    codebooks: &[PathBuf],
    split_seed: u64,
    pc: &ProbeConfig,
    csv: bool,
    cfg: &PipelineConfig,
) -> Result<Report> {
    use rayon::prelude::*;
    let fcfg = cfg.feature_config()?;
    let files = discover(audio_dir, &["wav"])?;
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels = Vec::with_capacity(files.len());
    for rel in &files {
        let s = speaker_of(rel).ok_or_else(|| {
            Error::InvalidConfig(format!("{}: expected <speaker>/<file>.wav layout", rel.display()))
        })?;
        let next = ids.len();
        labels.push(*ids.entry(s).or_insert(next));
    }
    // files are sorted, so first-seen ids follow sorted speaker order
    let corpus = files
        .par_iter()
        .zip(&labels)
        .map(|(rel, &l)| {
            Ok(LabeledUtterance {
                features: extract(&load_audio(&audio_dir.join(rel), &fcfg)?, &fcfg)?,
                speaker: l,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cbs = codebooks.iter().map(Codebook::load).collect::<Result<Vec<_>>>()?;
    let table = speaker_probe_experiment(&corpus, &cbs, split_seed, pc)?;
    let text = if csv { table.to_csv() } else { table.to_text() };
    let json = json!({
        "speakers": ids.keys().collect::<Vec<_>>(),
        "split_seed": split_seed,
        "table": table,
    });
    Ok(Report::new(text, json))
}

/// Unit streams of a preprocess output directory (ok records only).
fn streams_from_manifest(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<EncodedUtterance>> {
    let manifest = Manifest::load(dir.join(MANIFEST_NAME))?;
    let local = dir.join(UNIGRAM_NAME);
    let model = match &cfg.unigram {
        Some(p) => Some(UnigramModel::load(p)?),
        None if local.is_file() => Some(UnigramModel::load(&local)?),
        None => None,
    };
    manifest
        .records
        .iter()
        .filter_map(|r| r.outputs.as_ref())
        .map(|o| decode_bitstream(&Bitstream::load(dir.join(&o.bitstream))?, model.as_ref()))
        .collect()
}

fn cmd_lm_train(input: &Path, out: &Path, order: usize, smoothing: f64, cfg: &PipelineConfig) -> Result<Report> {
    use rayon::prelude::*;
    let streams = if input.join(MANIFEST_NAME).is_file() {
        streams_from_manifest(input, cfg)?
    } else {
        let fcfg = cfg.feature_config()?;
        let cb = codebook(cfg)?;
        discover(input, &["wav"])?
            .par_iter()
            .map(|rel| dedup(&quantize(&extract(&load_audio(&input.join(rel), &fcfg)?, &fcfg)?, &cb)?, None))
            .collect::<Result<Vec<_>>>()?
    };
    let m = train_ngram(&streams, order, smoothing)?;
    m.save(out)?;
    let tokens: usize = streams.iter().map(EncodedUtterance::n_segments).sum();
    let text = format!(
        "order {} LM over K={} from {} utterances ({tokens} units), {} contexts; wrote {}\n",
        m.order(),
        m.k(),
        streams.len(),
        m.n_contexts(),
        out.display()
    );
    let json = json!({
        "out": out, "order": m.order(), "k": m.k(), "smoothing": m.smoothing(),
        "utterances": streams.len(), "tokens": tokens, "contexts": m.n_contexts(),
    });
    Ok(Report::new(text, json))
}

fn cmd_continue(
    prompt: &Path,
    lm: &Path,
    out: &Path,
    cont: &ContinuationConfig,
    iters: Option<usize>,
    cfg: &PipelineConfig,
) -> Result<Report> {
    let fcfg = cfg.feature_config()?;
    let cb = codebook(cfg)?;
    let m = NGramModel::load(lm)?;
    let syn = syn_config(cfg, iters);
    syn.validate()?;
    let w = read_wav(prompt)?;
    let c = continue_speech(&w, &cb, &m, &fcfg, &syn, cont)?;
    write_wav(&c.waveform, out)?;
    let text = format!(
        "prompt {} units, continuation {} units, {:.2} s; wrote {}\n",
        c.prompt.n_segments(),
        c.continuation.len(),
        c.waveform.duration_seconds(),
        out.display()
    );
    let json = json!({
        "out": out, "prompt_units": c.prompt.units, "continuation": c.continuation,
        "seconds": c.waveform.duration_seconds(), "seed": cont.seed, "temperature": cont.temperature,
    });
    Ok(Report::new(text, json))
}

fn cmd_pitch(
    input: &Path,
    frame_rate: f64,
    normalize: Option<NormalizationMode>,
    out: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<Report> {
    cfg.validate()?;
    let w = read_wav(input)?;
    let track = track_pitch(&w, frame_rate, &cfg.pitch)?;
    let mut lines = Vec::new();
    let values = match normalize {
        None => {
            track.write_json_lines(&mut lines)?;
            json!(track.f0)
        }
        Some(mode) => {
            let p = match mode {
                NormalizationMode::None => normalize_none(&track),
                NormalizationMode::PerSpeaker => normalize_per_speaker(&track, &speaker_stats(std::slice::from_ref(&track))?),
                NormalizationMode::Prefix(s) => normalize_prefix(&track, s)?,
            };
            p.write_json_lines(&mut lines)?;
            json!(p.values)
        }
    };
    let lines = String::from_utf8(lines).expect("JSON is UTF-8");
    let voiced = track.voiced().count();
    let text = match out {
        Some(p) => {
            write_text(p, &lines)?;
            format!("{} frames, {voiced} voiced; wrote {}\n", track.len(), p.display())
        }
        None => lines,
    };
    let json = json!({
        "frames": track.len(), "voiced": voiced, "median_f0_hz": track.median_f0(),
        "normalization": normalize.map(|m| m.to_string()), "values": values,
    });
    Ok(Report::new(text, json))
}

fn cmd_features(input: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Report> {
    let fcfg = cfg.feature_config()?;
    let f = extract(&load_audio(input, &fcfg)?, &fcfg)?;
    export_features(&f, out)?;
    let text = format!("{} frames × {} dims at {} Hz; wrote {}\n", f.n_frames(), f.dim(), f.frame_rate(), out.display());
    let json = json!({ "out": out, "frames": f.n_frames(), "dim": f.dim(), "frame_rate": f.frame_rate() });
    Ok(Report::new(text, json))
}
