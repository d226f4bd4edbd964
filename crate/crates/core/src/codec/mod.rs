//! TLUC bitstreams and bitrate accounting for encoded utterances.
//!
//! Layout (little-endian header, 25 bytes, then an MSB-first payload
//! padded to a byte):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | `"TLUC"` |
//! | 1 | version (1) |
//! | 1 | coding mode: 0 fixed-width, 1 unigram Huffman |
//! | 1 | flags: bit 0 pitch present, bit 1 pitch clamped |
//! | 2 | K |
//! | 4 | frame rate, f32 |
//! | 4 | segment count |
//! | 8 | unigram model fingerprint (zeros in fixed mode) |
//!
//! The payload holds all units, then all durations (Elias-gamma), then,
//! when flagged, one 8-bit pitch code per segment.

pub mod bits;
pub mod huffman;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::streams::EncodedUtterance;
use bits::{BitReader, BitWriter};
use huffman::HuffmanCode;

pub const TLUC_MAGIC: &[u8; 4] = b"TLUC";
pub const TLUC_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 25;

pub const PITCH_RANGE: f32 = 1.5;
pub const PITCH_UNVOICED: u8 = 255;
/// Width of one pitch quantization step.
pub const PITCH_STEP: f32 = 2.0 * PITCH_RANGE / 254.0;

pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// Add-k smoothed unit frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramModel {
    pub probs: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub smoothing: f64,
}

impl UnigramModel {
    /// `P(u) = (count(u) + k) / (total + k·K)`. With `k = 0` every unit
    /// must have been seen.
    pub fn from_counts(counts: Vec<u64>, smoothing: f64) -> Result<Self> {
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidConfig(format!("smoothing must be >= 0, got {smoothing}")));
        }
        if counts.is_empty() {
            return Err(Error::InvalidConfig("unigram model needs K >= 1".into()));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 && smoothing == 0.0 {
            return Err(Error::EmptyCorpus);
        }
        if smoothing == 0.0 {
            if let Some(u) = counts.iter().position(|&c| c == 0) {
                return Err(Error::ZeroProbability { unit: u as u32 });
            }
        }
        let denom = total as f64 + smoothing * counts.len() as f64;
        let probs = counts.iter().map(|&c| (c as f64 + smoothing) / denom).collect();
        Ok(Self {
            probs,
            counts,
            total,
            smoothing,
        })
    }

    pub fn k(&self) -> u32 {
        self.probs.len() as u32
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
    }

    /// First 8 bytes of SHA-256 over K, the smoothing constant and the
    /// counts.
    pub fn fingerprint(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update((self.counts.len() as u64).to_le_bytes());
        h.update(self.smoothing.to_le_bytes());
        for c in &self.counts {
            h.update(c.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].try_into().unwrap()
    }

    pub fn huffman(&self) -> HuffmanCode {
        HuffmanCode::from_weights(&self.probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("model serializes");
        write_file(path.as_ref(), &json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let m: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::malformed("unigram model", e.to_string()))?;
        // re-derive so a hand-edited file cannot carry inconsistent probabilities
        Self::from_counts(m.counts, m.smoothing)
    }
}

/// Counts deduplicated units across `corpus`.
pub fn fit_unigram(corpus: &[EncodedUtterance], smoothing: f64) -> Result<UnigramModel> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let k = first.k;
    let mut counts = vec![0u64; k as usize];
    for e in corpus {
        if e.k != k {
            return Err(Error::VocabMismatch { expected: k, got: e.k });
        }
        for &u in &e.units {
            counts[u as usize] += 1;
        }
    }
    UnigramModel::from_counts(counts, smoothing)
}

/// `⌈log₂ K⌉`, computed on integers.
pub fn fixed_width(k: u32) -> u32 {
    if k <= 1 {
        0
    } else {
        32 - (k - 1).leading_zeros()
    }
}

fn check_seconds(l: f64) -> Result<()> {
    if l > 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidDuration(l))
    }
}

/// `(n / l) · ⌈log₂ K⌉`
pub fn bitrate_fixed(n: usize, l: f64, k: u32) -> Result<f64> {
    check_seconds(l)?;
    Ok(n as f64 / l * fixed_width(k) as f64)
}

/// `(n / l) · H(m)`
pub fn bitrate_entropy(n: usize, l: f64, m: &UnigramModel) -> Result<f64> {
    check_seconds(l)?;
    Ok(n as f64 / l * m.entropy_bits())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodingMode {
    Fixed,
    Entropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub mode: CodingMode,
    pub has_pitch: bool,
    pub pitch_clamped: bool,
    pub k: u16,
    pub frame_rate: f32,
    pub n_segments: u32,
    pub model_fingerprint: [u8; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

/// Unpadded payload bits spent on each stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamBits {
    pub units: u64,
    pub durations: u64,
    pub pitch: u64,
}

impl StreamBits {
    pub fn total(&self) -> u64 {
        self.units + self.durations + self.pitch
    }
}

pub fn quantize_pitch(p: Option<f32>) -> (u8, bool) {
    match p {
        None => (PITCH_UNVOICED, false),
        Some(v) => {
            let clamped = v.clamp(-PITCH_RANGE, PITCH_RANGE);
            let code = ((clamped + PITCH_RANGE) / PITCH_STEP).round() as u8;
            (code.min(254), clamped != v)
        }
    }
}

pub fn dequantize_pitch(code: u8) -> Option<f32> {
    (code != PITCH_UNVOICED).then(|| -PITCH_RANGE + code as f32 * PITCH_STEP)
}

/// Encodes in fixed-width mode without a model, Huffman mode with one.
pub fn encode_bitstream(e: &EncodedUtterance, m: Option<&UnigramModel>) -> Result<Bitstream> {
    encode_with_stats(e, m).map(|(b, _)| b)
}

pub fn encode_with_stats(e: &EncodedUtterance, m: Option<&UnigramModel>) -> Result<(Bitstream, StreamBits)> {
    e.validate()?;
    let k = u16::try_from(e.k).map_err(|_| Error::InvalidConfig(format!("K = {} does not fit the TLUC header", e.k)))?;
    if let Some(m) = m {
        if m.k() != e.k {
            return Err(Error::ModelMismatch { model: m.k(), stream: e.k });
        }
    }
    let mut w = BitWriter::new();
    let mut stats = StreamBits::default();
    match m {
        None => {
            let width = fixed_width(e.k);
            for &u in &e.units {
                w.write(u as u64, width);
            }
        }
        Some(m) => {
            let code = m.huffman();
            for &u in &e.units {
                code.encode(u, &mut w);
            }
        }
    }
    stats.units = w.bit_len();
    for &d in &e.durations {
        w.write_gamma(d as u64);
    }
    stats.durations = w.bit_len() - stats.units;
    let has_pitch = e.has_pitch();
    let mut clamped = 0;
    if has_pitch {
        for &p in &e.pitch {
            let (code, c) = quantize_pitch(p);
            clamped += c as usize;
            w.write(code as u64, 8);
        }
    }
    stats.pitch = w.bit_len() - stats.units - stats.durations;
    if clamped > 0 {
        log::warn!("{clamped} pitch values clamped to ±{PITCH_RANGE}");
    }
    let header = Header {
        mode: if m.is_some() { CodingMode::Entropy } else { CodingMode::Fixed },
        has_pitch,
        pitch_clamped: clamped > 0,
        k,
        frame_rate: e.frame_rate as f32,
        n_segments: e.units.len() as u32,
        model_fingerprint: m.map(UnigramModel::fingerprint).unwrap_or_default(),
    };
    Ok((
        Bitstream {
            header,
            payload: w.finish(),
        },
        stats,
    ))
}

pub fn decode_bitstream(b: &Bitstream, m: Option<&UnigramModel>) -> Result<EncodedUtterance> {
    let h = &b.header;
    let k = h.k as u32;
    let huffman = match h.mode {
        CodingMode::Fixed => None,
        CodingMode::Entropy => {
            let m = m.ok_or(Error::ModelRequired)?;
            if m.fingerprint() != h.model_fingerprint {
                return Err(Error::ModelFingerprintMismatch {
                    stream: hex(&h.model_fingerprint),
                    model: hex(&m.fingerprint()),
                });
            }
            if m.k() != k {
                return Err(Error::ModelMismatch { model: m.k(), stream: k });
            }
            Some(m.huffman())
        }
    };
    let n = h.n_segments as usize;
    let mut r = BitReader::new(&b.payload);
    let mut units = Vec::with_capacity(n.min(b.payload.len() * 8));
    let width = fixed_width(k);
    for _ in 0..n {
        let u = match &huffman {
            Some(code) => code.decode(&mut r)?,
            None => r.read(width)? as u32,
        };
        units.push(u);
    }
    let mut durations = Vec::with_capacity(units.len());
    for _ in 0..n {
        let d = r.read_gamma()?;
        durations.push(u32::try_from(d).map_err(|_| Error::malformed("TLUC payload", "duration overflows u32"))?);
    }
    let pitch = if h.has_pitch {
        (0..n).map(|_| r.read(8).map(|c| dequantize_pitch(c as u8))).collect::<Result<_>>()?
    } else {
        vec![None; n]
    };
    if r.position().div_ceil(8) != b.payload.len() as u64 {
        return Err(Error::malformed("TLUC payload", "trailing bytes after the last segment"));
    }
    let e = EncodedUtterance {
        units,
        durations,
        pitch,
        frame_rate: h.frame_rate as f64,
        k,
    };
    e.validate()?;
    Ok(e)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(TLUC_MAGIC);
        out.push(TLUC_VERSION);
        out.push(match h.mode {
            CodingMode::Fixed => 0,
            CodingMode::Entropy => 1,
        });
        out.push(h.has_pitch as u8 | (h.pitch_clamped as u8) << 1);
        out.extend_from_slice(&h.k.to_le_bytes());
        out.extend_from_slice(&h.frame_rate.to_le_bytes());
        out.extend_from_slice(&h.n_segments.to_le_bytes());
        out.extend_from_slice(&h.model_fingerprint);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "TLUC");
        r.magic(TLUC_MAGIC)?;
        let version = r.u8()?;
        if version != TLUC_VERSION {
            return Err(Error::VersionMismatch {
                format: "TLUC",
                expected: TLUC_VERSION as u32,
                found: version as u32,
            });
        }
        let mode = match r.u8()? {
            0 => CodingMode::Fixed,
            1 => CodingMode::Entropy,
            other => return Err(Error::malformed("TLUC header", format!("unknown coding mode {other}"))),
        };
        let flags = r.u8()?;
        if flags & !0b11 != 0 {
            return Err(Error::malformed("TLUC header", format!("unknown flags {flags:#04x}")));
        }
        let header = Header {
            mode,
            has_pitch: flags & 1 != 0,
            pitch_clamped: flags & 2 != 0,
            k: r.u16()?,
            frame_rate: r.f32()?,
            n_segments: r.u32()?,
            model_fingerprint: r.take(8)?.try_into().unwrap(),
        };
        if !(header.frame_rate > 0.0 && header.frame_rate.is_finite()) {
            return Err(Error::malformed("TLUC header", format!("frame rate {}", header.frame_rate)));
        }
        Ok(Self {
            header,
            payload: r.remaining().to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Payload size in bits, including byte padding.
    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitrateReport {
    pub n_utterances: usize,
    pub n_tokens: usize,
    pub audio_seconds: f64,
    pub k: u32,
    pub entropy_bits_per_token: f64,
    pub fixed_bits_per_sec: f64,
    pub entropy_bits_per_sec: f64,
    /// Entropy-mode payloads including byte padding.
    pub actual_bits_per_sec: f64,
    pub units_bits_per_sec: f64,
    pub durations_bits_per_sec: f64,
    pub pitch_bits_per_sec: f64,
}

/// Aggregates the ideal bitrates and the measured entropy-mode payload
/// over a corpus. `audio_seconds[i]` is the source length of utterance `i`.
pub fn bitrate_report(utterances: &[EncodedUtterance], m: &UnigramModel, audio_seconds: &[f64]) -> Result<BitrateReport> {
    if utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if audio_seconds.len() != utterances.len() {
        return Err(Error::InvalidConfig(format!(
            "{} durations for {} utterances",
            audio_seconds.len(),
            utterances.len()
        )));
    }
    for &s in audio_seconds {
        check_seconds(s)?;
    }
    let encoded = utterances
        .par_iter()
        .map(|e| encode_with_stats(e, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let l: f64 = audio_seconds.iter().sum();
    let n: usize = utterances.iter().map(EncodedUtterance::n_segments).sum();
    let mut payload = 0u64;
    let mut streams = StreamBits::default();
    for (b, s) in &encoded {
        payload += b.payload_bits();
        streams.units += s.units;
        streams.durations += s.durations;
        streams.pitch += s.pitch;
    }
    Ok(BitrateReport {
        n_utterances: utterances.len(),
        n_tokens: n,
        audio_seconds: l,
        k: m.k(),
        entropy_bits_per_token: m.entropy_bits(),
        fixed_bits_per_sec: bitrate_fixed(n, l, m.k())?,
        entropy_bits_per_sec: bitrate_entropy(n, l, m)?,
        actual_bits_per_sec: payload as f64 / l,
        units_bits_per_sec: streams.units as f64 / l,
        durations_bits_per_sec: streams.durations as f64 / l,
        pitch_bits_per_sec: streams.pitch as f64 / l,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn utt(units: &[u32], durations: &[u32], pitch: &[Option<f32>], k: u32) -> EncodedUtterance {
        EncodedUtterance {
            units: units.to_vec(),
            durations: durations.to_vec(),
            pitch: pitch.to_vec(),
            frame_rate: 50.0,
            k,
        }
    }

    fn model(probs: &[f64]) -> UnigramModel {
        UnigramModel {
            probs: probs.to_vec(),
            counts: vec![0; probs.len()],
            total: 0,
            smoothing: 1.0,
        }
    }

    #[test]
    fn unigram_smoothing_formula() {
        let m = UnigramModel::from_counts(vec![4, 0], 0.5).unwrap();
        assert!((m.probs[0] - 4.5 / 5.0).abs() < 1e-12);
        assert!((m.probs[1] - 0.5 / 5.0).abs() < 1e-12);
        assert!((m.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            UnigramModel::from_counts(vec![4, 0], 0.0),
            Err(Error::ZeroProbability { unit: 1 })
        ));
    }

    #[test]
    fn unigram_uniform_and_hand_counted() {
        let e = utt(&[0, 1, 2, 3], &[1; 4], &[None; 4], 4);
        let m = fit_unigram(&[e.clone(), e], DEFAULT_SMOOTHING).unwrap();
        assert!(m.probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));

        // 10 tokens: unit 0 ×5, unit 1 ×3, unit 2 ×2
        let e = utt(&[0, 1, 0, 1, 0, 2, 0, 1, 0, 2], &[1; 10], &[None; 10], 3);
        let m = fit_unigram(&[e], 1e-9).unwrap();
        for (p, want) in m.probs.iter().zip([0.5, 0.3, 0.2]) {
            assert!((p - want).abs() < 1e-8);
        }
        assert!(matches!(fit_unigram(&[], 0.5), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn fixed_bitrate_examples() {
        assert_eq!(bitrate_fixed(25, 1.0, 100).unwrap(), 175.0);
        assert_eq!(bitrate_fixed(0, 3.0, 100).unwrap(), 0.0);
        assert_eq!(bitrate_fixed(40, 2.0, 256).unwrap(), 8.0 * 20.0);
        assert!(bitrate_fixed(1, 0.0, 4).is_err());
        assert_eq!(fixed_width(2), 1);
        assert_eq!(fixed_width(50), 6);
        assert_eq!(fixed_width(500), 9);
    }

    #[test]
    fn entropy_bitrate_examples() {
        let m = model(&[0.5, 0.25, 0.25]);
        assert!((bitrate_entropy(100, 2.0, &m).unwrap() - 75.0).abs() < 1e-12);
        let uniform = model(&[1.0 / 8.0; 8]);
        assert!((bitrate_entropy(10, 1.0, &uniform).unwrap() - 30.0).abs() < 1e-12);
        let degenerate = UnigramModel::from_counts(vec![1_000_000, 0, 0], 1e-12).unwrap();
        assert!(bitrate_entropy(100, 1.0, &degenerate).unwrap() < 1e-6);
    }

    #[test]
    fn gibbs_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [2u32, 3, 50, 100, 256, 500] {
            let counts: Vec<u64> = (0..k).map(|_| rng.random_range(0..1000)).collect();
            let m = UnigramModel::from_counts(counts, 0.5).unwrap();
            let e = bitrate_entropy(123, 4.5, &m).unwrap();
            let f = bitrate_fixed(123, 4.5, k).unwrap();
            assert!(e <= f + 1e-9);
        }
    }

    #[test]
    fn fixed_mode_unit_payload_size() {
        let e = utt(&[0, 1, 2], &[1, 1, 1], &[None; 3], 4);
        let (b, stats) = encode_with_stats(&e, None).unwrap();
        assert_eq!(stats.units, 6);
        assert_eq!(stats.durations, 3);
        assert_eq!(stats.pitch, 0);
        assert!(!b.header.has_pitch);
        assert_eq!(b.payload, vec![0b0001_1011, 0b1000_0000]);
    }

    #[test]
    fn header_layout() {
        let e = utt(&[3, 1], &[2, 5], &[Some(0.0), None], 50);
        let bytes = encode_bitstream(&e, None).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"TLUC");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..9], &50u16.to_le_bytes());
        assert_eq!(&bytes[9..13], &50f32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..25], &[0; 8]);
    }

    #[test]
    fn roundtrip_both_modes() {
        let e = utt(
            &[7, 2, 9, 2, 0],
            &[3, 1, 12, 200, 1],
            &[Some(0.3), None, Some(-1.2), Some(1.4999), Some(0.0)],
            10,
        );
        let m = fit_unigram(&[e.clone()], 0.5).unwrap();
        for model in [None, Some(&m)] {
            let b = Bitstream::from_bytes(&encode_bitstream(&e, model).unwrap().to_bytes()).unwrap();
            let d = decode_bitstream(&b, model).unwrap();
            assert_eq!(d.units, e.units);
            assert_eq!(d.durations, e.durations);
            assert_eq!(d.frame_rate, 50.0);
            for (a, b) in d.pitch.iter().zip(&e.pitch) {
                match (a, b) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= PITCH_STEP / 2.0 + 1e-6),
                    (None, None) => {}
                    _ => panic!("voicing changed"),
                }
            }
        }
    }

    #[test]
    fn pitch_clamping_is_flagged() {
        let e = utt(&[1, 2], &[1, 1], &[Some(2.5), Some(-0.1)], 4);
        let b = encode_bitstream(&e, None).unwrap();
        assert!(b.header.pitch_clamped);
        let d = decode_bitstream(&b, None).unwrap();
        assert!((d.pitch[0].unwrap() - PITCH_RANGE).abs() < 1e-6);
        assert_eq!(quantize_pitch(Some(-1.5)).0, 0);
        assert_eq!(quantize_pitch(Some(1.5)).0, 254);
        assert_eq!(quantize_pitch(None).0, 255);
    }

    #[test]
    fn decode_errors() {
        let e = utt(&[1, 2, 3], &[4, 5, 6], &[None; 3], 8);
        let m = fit_unigram(&[e.clone()], 0.5).unwrap();
        let bytes = encode_bitstream(&e, Some(&m)).unwrap().to_bytes();

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::VersionMismatch { .. })));

        let b = Bitstream::from_bytes(&bytes[..HEADER_LEN]).unwrap();
        assert!(matches!(decode_bitstream(&b, Some(&m)), Err(Error::TruncatedPayload(_))));

        let b = Bitstream::from_bytes(&bytes).unwrap();
        assert!(matches!(decode_bitstream(&b, None), Err(Error::ModelRequired)));
        let other = UnigramModel::from_counts(vec![1; 8], 0.5).unwrap();
        assert!(matches!(
            decode_bitstream(&b, Some(&other)),
            Err(Error::ModelFingerprintMismatch { .. })
        ));

        let small = UnigramModel::from_counts(vec![1; 4], 0.5).unwrap();
        assert!(matches!(
            encode_bitstream(&e, Some(&small)),
            Err(Error::ModelMismatch { model: 4, stream: 8 })
        ));
    }

    #[test]
    fn huffman_payload_beats_fixed_on_skewed_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 64u32;
        // Zipf-like corpus
        let weights: Vec<f64> = (1..=k).map(|r| 1.0 / r as f64).collect();
        let total: f64 = weights.iter().sum();
        let draw = |rng: &mut ChaCha8Rng| {
            let mut x = rng.random::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                x -= w;
                if x <= 0.0 {
                    return i as u32;
                }
            }
            k - 1
        };
        let mut units = Vec::new();
        while units.len() < 1000 {
            let u = draw(&mut rng);
            if units.last() != Some(&u) {
                units.push(u);
            }
        }
        let e = utt(&units, &vec![1; 1000], &vec![None; 1000], k);
        let m = fit_unigram(&[e.clone()], 0.5).unwrap();
        let (_, fixed) = encode_with_stats(&e, None).unwrap();
        let (_, huff) = encode_with_stats(&e, Some(&m)).unwrap();
        assert!(huff.units <= fixed.units, "{} > {}", huff.units, fixed.units);
    }

    #[test]
    fn report_consistency() {
        let e = utt(&[0, 3, 1, 3, 2, 0, 1], &[2, 3, 1, 4, 2, 2, 1], &[Some(0.1); 7], 4);
        let m = fit_unigram(&[e.clone()], 0.5).unwrap();
        let r = bitrate_report(&[e.clone()], &m, &[0.4]).unwrap();
        assert_eq!(r.n_tokens, 7);
        assert!(r.entropy_bits_per_sec <= r.fixed_bits_per_sec + 1e-9);
        assert!(r.actual_bits_per_sec >= r.entropy_bits_per_sec);
        assert!(
            (r.units_bits_per_sec + r.durations_bits_per_sec + r.pitch_bits_per_sec) <= r.actual_bits_per_sec + 1e-9
        );
        assert!(matches!(bitrate_report(&[], &m, &[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = UnigramModel::from_counts(vec![3, 1, 0, 9], 0.5).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = UnigramModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }
}
