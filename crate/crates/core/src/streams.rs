//! The three aligned streams: deduplicated units, run durations and
//! per-segment pitch.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pitch::NormalizedPitch;
use crate::quantizer::UnitSequence;

/// Run-length encoded utterance. Segment `i` is unit `units[i]` held for
/// `durations[i]` frames with mean normalized pitch `pitch[i]` (`None`
/// when no frame of the run was voiced).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUtterance {
    pub units: Vec<u32>,
    pub durations: Vec<u32>,
    pub pitch: Vec<Option<f32>>,
    pub frame_rate: f64,
    pub k: u32,
}

impl EncodedUtterance {
    /// Checks the stream invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.units.len();
        if self.durations.len() != n || self.pitch.len() != n {
            return Err(Error::malformed(
                "encoded utterance",
                format!(
                    "stream lengths differ: {} units, {} durations, {} pitch",
                    n,
                    self.durations.len(),
                    self.pitch.len()
                ),
            ));
        }
        if let Some(i) = self.durations.iter().position(|&d| d == 0) {
            return Err(Error::malformed("encoded utterance", format!("segment {i} has zero duration")));
        }
        if let Some(&u) = self.units.iter().find(|&&u| u >= self.k) {
            return Err(Error::VocabMismatch { expected: self.k, got: u + 1 });
        }
        if let Some(i) = self.units.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::malformed("encoded utterance", format!("segments {i} and {} repeat a unit", i + 1)));
        }
        Ok(())
    }

    pub fn n_segments(&self) -> usize {
        self.units.len()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    pub fn seconds(&self) -> f64 {
        self.total_frames() as f64 / self.frame_rate
    }

    pub fn has_pitch(&self) -> bool {
        self.pitch.iter().any(Option::is_some)
    }

    /// `unit:duration:pitch` triples separated by spaces, `~` marking an
    /// unvoiced segment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.units.len() {
            if i > 0 {
                s.push(' ');
            }
            match self.pitch[i] {
                Some(p) => write!(s, "{}:{}:{}", self.units[i], self.durations[i], p),
                None => write!(s, "{}:{}:~", self.units[i], self.durations[i]),
            }
            .unwrap();
        }
        s
    }

    pub fn from_text(line: &str, frame_rate: f64, k: u32) -> Result<Self> {
        let mut e = EncodedUtterance {
            units: Vec::new(),
            durations: Vec::new(),
            pitch: Vec::new(),
            frame_rate,
            k,
        };
        let bad = |tok: &str| Error::malformed("unit text", format!("bad segment {tok:?}"));
        for tok in line.split_whitespace() {
            let mut parts = tok.split(':');
            let (Some(u), Some(d), Some(p), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad(tok));
            };
            e.units.push(u.parse().map_err(|_| bad(tok))?);
            e.durations.push(d.parse().map_err(|_| bad(tok))?);
            e.pitch.push(match p {
                "~" => None,
                v => Some(v.parse::<f32>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(tok))?),
            });
        }
        e.validate()?;
        Ok(e)
    }
}

/// Collapses runs of equal units. With a pitch track (already aligned to
/// the unit rate) each segment gets the mean over its voiced frames.
pub fn dedup(u: &UnitSequence, p: Option<&NormalizedPitch>) -> Result<EncodedUtterance> {
    if let Some(p) = p {
        if p.values.len() != u.units.len() {
            return Err(Error::LengthMismatch {
                pitch: p.values.len(),
                units: u.units.len(),
            });
        }
    }
    let mut e = EncodedUtterance {
        units: Vec::new(),
        durations: Vec::new(),
        pitch: Vec::new(),
        frame_rate: u.frame_rate,
        k: u.k,
    };
    let mut start = 0;
    while start < u.units.len() {
        let unit = u.units[start];
        let mut end = start + 1;
        while end < u.units.len() && u.units[end] == unit {
            end += 1;
        }
        e.units.push(unit);
        e.durations.push((end - start) as u32);
        e.pitch.push(p.and_then(|p| voiced_mean(&p.values[start..end])));
        start = end;
    }
    Ok(e)
}

fn voiced_mean(values: &[Option<f32>]) -> Option<f32> {
    let (sum, n) = values
        .iter()
        .flatten()
        .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
    (n > 0).then(|| (sum / n as f64) as f32)
}

/// Repeats every segment `duration` times; pitch is broadcast over the
/// segment's frames.
pub fn inflate(e: &EncodedUtterance) -> (UnitSequence, NormalizedPitch) {
    let total = e.total_frames();
    let mut units = Vec::with_capacity(total);
    let mut pitch = Vec::with_capacity(total);
    for ((&u, &d), &p) in e.units.iter().zip(&e.durations).zip(&e.pitch) {
        units.extend(std::iter::repeat_n(u, d as usize));
        pitch.extend(std::iter::repeat_n(p, d as usize));
    }
    (
        UnitSequence {
            units,
            frame_rate: e.frame_rate,
            k: e.k,
        },
        NormalizedPitch {
            values: pitch,
            frame_rate: e.frame_rate,
        },
    )
}

/// `source / target` as a reduced fraction with denominator at most 1000.
fn rate_ratio(source: f64, target: f64) -> Result<(u64, u64)> {
    let incompatible = || Error::IncompatibleRates { from: source, to: target };
    if !(source > 0.0 && target > 0.0 && source.is_finite() && target.is_finite()) {
        return Err(incompatible());
    }
    let r = source / target;
    for den in 1..=1000u64 {
        let num = (r * den as f64).round();
        if num >= 1.0 && ((num / den as f64) - r).abs() <= 1e-9 * r {
            return Ok((num as u64, den));
        }
    }
    Err(incompatible())
}

/// Resamples a normalized pitch track to `target_rate` and fits it to
/// `target_len` frames.
///
/// Downsampling averages the voiced values of each block of source frames
/// mapping onto one target frame (unvoiced if none is voiced); upsampling
/// replicates the containing source frame. The result may then be
/// truncated or extended (copying the last frame) by one frame; any larger
/// gap is a [`Error::LengthMismatch`].
pub fn align_pitch(p: &NormalizedPitch, target_rate: f64, target_len: usize) -> Result<NormalizedPitch> {
    let (a, b) = rate_ratio(p.frame_rate, target_rate)?;
    let n = p.values.len() as u64;
    let mut values: Vec<Option<f32>> = if a == b {
        p.values.clone()
    } else if a > b {
        // target frame j gathers source frames i with floor(i·b/a) == j
        let out_len = (n * b).div_ceil(a);
        (0..out_len)
            .map(|j| {
                let lo = (j * a).div_ceil(b);
                let hi = ((j + 1) * a).div_ceil(b).min(n);
                voiced_mean(&p.values[lo as usize..hi as usize])
            })
            .collect()
    } else {
        let out_len = (n * b) / a;
        (0..out_len).map(|j| p.values[(j * a / b) as usize]).collect()
    };
    if values.len().abs_diff(target_len) > 1 {
        return Err(Error::LengthMismatch {
            pitch: values.len(),
            units: target_len,
        });
    }
    if values.len() > target_len {
        values.truncate(target_len);
    } else if values.len() < target_len {
        values.push(values.last().copied().flatten());
    }
    Ok(NormalizedPitch {
        values,
        frame_rate: target_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(units: &[u32]) -> UnitSequence {
        UnitSequence::new(units.to_vec(), 50.0, 10).unwrap()
    }

    fn np(values: &[Option<f32>], rate: f64) -> NormalizedPitch {
        NormalizedPitch {
            values: values.to_vec(),
            frame_rate: rate,
        }
    }

    #[test]
    fn dedup_paper_example() {
        let e = dedup(&seq(&[0, 0, 1, 1, 2]), None).unwrap();
        assert_eq!(e.units, vec![0, 1, 2]);
        assert_eq!(e.durations, vec![2, 2, 1]);
        assert_eq!(e.pitch, vec![None; 3]);
        assert!(!e.has_pitch());
        assert_eq!(e.total_frames(), 5);
    }

    #[test]
    fn dedup_distinct_is_identity() {
        let e = dedup(&seq(&[3, 1, 4]), None).unwrap();
        assert_eq!(e.units, vec![3, 1, 4]);
        assert_eq!(e.durations, vec![1, 1, 1]);
    }

    #[test]
    fn segment_pitch_averages_voiced_frames() {
        let p = np(&[Some(0.1), Some(0.3), None, None], 50.0);
        let e = dedup(&seq(&[5, 5, 5, 2]), Some(&p)).unwrap();
        assert!((e.pitch[0].unwrap() - 0.2).abs() < 1e-6);
        assert_eq!(e.pitch[1], None);
        assert!(e.has_pitch());
    }

    #[test]
    fn dedup_length_mismatch() {
        let p = np(&[Some(0.1)], 50.0);
        assert!(matches!(
            dedup(&seq(&[1, 2]), Some(&p)),
            Err(Error::LengthMismatch { pitch: 1, units: 2 })
        ));
    }

    #[test]
    fn inflate_examples() {
        let e = EncodedUtterance {
            units: vec![0, 1, 2],
            durations: vec![2, 2, 1],
            pitch: vec![Some(0.5), None, Some(-0.25)],
            frame_rate: 50.0,
            k: 3,
        };
        let (u, p) = inflate(&e);
        assert_eq!(u.units, vec![0, 0, 1, 1, 2]);
        assert_eq!(p.values, vec![Some(0.5), Some(0.5), None, None, Some(-0.25)]);

        let empty = dedup(&seq(&[]), None).unwrap();
        let (u, p) = inflate(&empty);
        assert!(u.is_empty() && p.values.is_empty());
    }

    #[test]
    fn pitch_roundtrip_is_per_run_mean() {
        let p = np(&[Some(1.0), Some(2.0), Some(5.0)], 50.0);
        let e = dedup(&seq(&[4, 4, 7]), Some(&p)).unwrap();
        let (_, back) = inflate(&e);
        assert_eq!(back.values, vec![Some(1.5), Some(1.5), Some(5.0)]);
    }

    #[test]
    fn align_equal_rates_is_identity() {
        let p = np(&[Some(0.1), None, Some(-0.2)], 50.0);
        assert_eq!(align_pitch(&p, 50.0, 3).unwrap(), p);
    }

    #[test]
    fn align_downsample_block_mean() {
        // 200 Hz and 220 Hz, normalized against a 210 Hz reference
        let r = 210f64.ln();
        let a = (200f64.ln() - r) as f32;
        let b = (220f64.ln() - r) as f32;
        let p = np(&[Some(a), Some(b), None, None, Some(b), None], 100.0);
        let out = align_pitch(&p, 50.0, 3).unwrap();
        assert_eq!(out.frame_rate, 50.0);
        let expected = ((a as f64 + b as f64) / 2.0) as f32;
        assert_eq!(out.values, vec![Some(expected), None, Some(b)]);
    }

    #[test]
    fn align_upsample_replicates() {
        let p = np(&[Some(0.5), None], 50.0);
        let out = align_pitch(&p, 100.0, 4).unwrap();
        assert_eq!(out.values, vec![Some(0.5), Some(0.5), None, None]);
    }

    #[test]
    fn align_length_fix() {
        let p = np(&[Some(0.5), Some(0.7), Some(0.9)], 50.0);
        assert_eq!(align_pitch(&p, 50.0, 4).unwrap().values.last(), Some(&Some(0.9)));
        assert_eq!(align_pitch(&p, 50.0, 2).unwrap().values.len(), 2);
        assert!(matches!(align_pitch(&p, 50.0, 5), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn align_rational_and_irrational_rates() {
        let p = np(&vec![Some(0.0); 300], 100.0);
        assert_eq!(align_pitch(&p, 75.0, 225).unwrap().values.len(), 225);
        assert!(matches!(
            align_pitch(&p, 100.0 / std::f64::consts::PI, 95),
            Err(Error::IncompatibleRates { .. })
        ));
    }

    #[test]
    fn text_roundtrip() {
        let e = EncodedUtterance {
            units: vec![12, 3, 40],
            durations: vec![2, 1, 7],
            pitch: vec![Some(0.125), None, Some(-0.3)],
            frame_rate: 50.0,
            k: 50,
        };
        let text = e.to_text();
        assert_eq!(text, "12:2:0.125 3:1:~ 40:7:-0.3");
        assert_eq!(EncodedUtterance::from_text(&text, 50.0, 50).unwrap(), e);
        assert!(EncodedUtterance::from_text("1:0:~", 50.0, 50).is_err());
        assert!(EncodedUtterance::from_text("1:1:~ 1:2:~", 50.0, 50).is_err());
        assert!(EncodedUtterance::from_text("1:1", 50.0, 50).is_err());
        assert!(EncodedUtterance::from_text("60:1:~", 50.0, 50).is_err());
    }
}
