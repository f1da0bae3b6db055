//! Synthetic planted-segment videos and their on-disk formats.
//!
//! Feature file (little-endian): `NFTF`, u32 version = 1, u32 T, u32 F, then
//! T·F f64 values row-major. Annotations are JSON lines.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection::Span;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::{map_indexed, Parallelism};
use crate::training::Sample;

pub const FEATURE_MAGIC: &[u8; 4] = b"NFTF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 16;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_DIR: &str = "features";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub query_id: String,
    pub video_id: String,
    pub token_ids: Vec<usize>,
    pub t_s: f64,
    pub t_e: f64,
    #[serde(rename = "T")]
    pub t: usize,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        let hi = self.t as f64 - 1.0;
        if self.t == 0 || !(0.0 <= self.t_s && self.t_s < self.t_e && self.t_e <= hi) {
            return Err(Error::Contract(format!(
                "annotation {} needs 0 ≤ t_s < t_e ≤ T−1, got t_s={} t_e={} T={}",
                self.query_id, self.t_s, self.t_e, self.t
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> Span {
        Span {
            start: self.t_s,
            end: self.t_e,
        }
    }
}

/// `(t_e − t_s) / T`.
pub fn compute_snr(a: &Annotation) -> f64 {
    (a.t_e - a.t_s) / a.t as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(rename = "T")]
    pub t: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub snr_range: [f64; 2],
    /// Inclusive range of query lengths.
    pub query_len: [usize; 2],
    pub noise_scale: f64,
    pub pattern_strength: f64,
    /// Seeds the token directions. Splits that should share a task share this.
    pub pattern_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            t: 100,
            feature_dim: 32,
            vocab_size: 32,
            snr_range: [0.1, 0.3],
            query_len: [3, 6],
            noise_scale: 1.0,
            pattern_strength: 2.5,
            pattern_seed: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("snr_range must satisfy 0 < lo ≤ hi ≤ 1, got {:?}", self.snr_range)));
        }
        if self.t < 2 || self.feature_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config("need T ≥ 2, feature_dim ≥ 1, vocab_size ≥ 1".into()));
        }
        if self.query_len[0] == 0 || self.query_len[0] > self.query_len[1] {
            return Err(Error::Config(format!("bad query_len {:?}", self.query_len)));
        }
        if !(self.noise_scale >= 0.0) || !self.pattern_strength.is_finite() {
            return Err(Error::Config("noise_scale must be ≥ 0 and pattern_strength finite".into()));
        }
        let longest = (hi * self.t as f64).round() as usize;
        if longest < 1 {
            return Err(Error::Generation(format!(
                "snr_range {:?} gives spans under one frame at T={}",
                self.snr_range, self.t
            )));
        }
        Ok(())
    }

    /// Unit direction planted by a single token.
    pub fn token_direction(&self, token: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pattern_seed);
        rng.set_stream(token as u64);
        let v: Vec<f64> = (0..self.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(v)
    }

    /// Unit direction planted for a query: the normalized sum of its token
    /// directions, so related queries share structure.
    pub fn pattern(&self, token_ids: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.feature_dim];
        for &tok in token_ids {
            for (a, d) in acc.iter_mut().zip(self.token_direction(tok)) {
                *a += d;
            }
        }
        normalize(acc)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Sample `index` of the stream defined by `spec`. Pure in `(spec, index)`.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> Result<(Tensor, Annotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let t = spec.t;

    let l = rng.random_range(spec.query_len[0]..=spec.query_len[1]);
    let token_ids: Vec<usize> = (0..l).map(|_| rng.random_range(0..spec.vocab_size)).collect();
    let [lo, hi] = spec.snr_range;
    let snr = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let len = ((snr * t as f64).round() as usize).clamp(1, t - 1);
    let start = rng.random_range(0..=t - 1 - len);

    let noise = Normal::new(0.0, spec.noise_scale).map_err(|e| Error::Generation(e.to_string()))?;
    let mut data: Vec<f64> = (0..t * spec.feature_dim).map(|_| noise.sample(&mut rng)).collect();
    let pattern = spec.pattern(&token_ids);
    for frame in start..=start + len {
        let row = &mut data[frame * spec.feature_dim..(frame + 1) * spec.feature_dim];
        for (x, p) in row.iter_mut().zip(&pattern) {
            *x += spec.pattern_strength * p;
        }
    }

    let ann = Annotation {
        query_id: format!("q{index:06}"),
        video_id: format!("v{index:06}"),
        token_ids,
        t_s: start as f64,
        t_e: (start + len) as f64,
        t,
    };
    Ok((Tensor::matrix(t, spec.feature_dim, data)?, ann))
}

pub fn encode_features(t: usize, f: usize, data: &[f64]) -> Result<Vec<u8>> {
    if t == 0 || f == 0 {
        return Err(Error::Contract(format!("feature matrix must be non-empty, got {t}×{f}")));
    }
    if data.len() != t * f {
        return Err(Error::dim("encode_features", &[data.len()], &[t, f]));
    }
    let dims = |x: usize| u32::try_from(x).map_err(|_| Error::Contract(format!("dimension {x} exceeds u32")));
    let mut out = Vec::with_capacity(FEATURE_HEADER + 8 * data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&dims(t)?.to_le_bytes());
    out.extend_from_slice(&dims(f)?.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn truncated(bytes: &[u8], what: &str) -> Error {
    Error::Format {
        offset: bytes.len() as u64,
        msg: format!("truncated feature file: missing {what}"),
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let raw = bytes.get(at..at + 4).ok_or_else(|| truncated(bytes, what))?;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let magic = bytes.get(..4).ok_or_else(|| truncated(bytes, "magic"))?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad feature-file magic".into(),
        });
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported feature-file version {version}"),
        });
    }
    let t = read_u32(bytes, 8, "T")? as usize;
    let f = read_u32(bytes, 12, "F")? as usize;
    if t == 0 || f == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: format!("empty feature matrix {t}×{f}"),
        });
    }
    let need = 8 * t * f;
    let body = &bytes[FEATURE_HEADER..];
    if body.len() < need {
        return Err(truncated(bytes, &format!("{} of {need} data bytes", need - body.len())));
    }
    if body.len() > need {
        return Err(Error::Format {
            offset: (FEATURE_HEADER + need) as u64,
            msg: "trailing bytes after feature data".into(),
        });
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::matrix(t, f, data)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if !features.is_matrix() {
        return Err(Error::Contract(format!("features must be T×F, got {:?}", features.shape())));
    }
    let bytes = encode_features(features.rows(), features.cols(), features.data())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let a: Annotation = serde_json::from_str(l).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            a.validate().map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            Ok(a)
        })
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn format_annotations(anns: &[Annotation]) -> String {
    anns.iter()
        .map(|a| serde_json::to_string(a).expect("annotation serializes") + "\n")
        .collect()
}

pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    fs::write(path, format_annotations(anns)).map_err(|e| Error::io(path, e))
}

/// Samples `offset..offset + count` of the stream.
pub fn generate(spec: &SyntheticSpec, offset: u64, count: usize, mode: Parallelism) -> Result<Vec<(Tensor, Annotation)>> {
    spec.validate()?;
    map_indexed(count, mode, |i| generate_sample(spec, offset + i as u64))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub offset: u64,
    pub spec: SyntheticSpec,
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{video_id}.nftf"))
}

/// Writes `annotations.jsonl`, `features/<video_id>.nftf`, and `manifest.json`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[(Tensor, Annotation)]) -> Result<()> {
    let feat_dir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for (x, a) in samples {
        write_features(&feature_path(dir, &a.video_id), x)?;
    }
    let anns: Vec<Annotation> = samples.iter().map(|(_, a)| a.clone()).collect();
    write_annotations(&dir.join(ANNOTATIONS_FILE), &anns)?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads every annotation of `dir` with its feature matrix.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Tensor, Annotation)>> {
    read_annotations(&dir.join(ANNOTATIONS_FILE))?
        .into_iter()
        .map(|a| {
            let x = read_features(&feature_path(dir, &a.video_id))?;
            if x.rows() != a.t {
                return Err(Error::Contract(format!(
                    "{}: feature file has {} frames, annotation says T={}",
                    a.video_id,
                    x.rows(),
                    a.t
                )));
            }
            Ok((x, a))
        })
        .collect()
}

pub fn to_sample((features, a): &(Tensor, Annotation)) -> Sample {
    Sample {
        features: features.clone(),
        token_ids: a.token_ids.clone(),
        gt: a.span(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_snr_fixes_length() {
        let spec = SyntheticSpec {
            snr_range: [0.2, 0.2],
            ..SyntheticSpec::default()
        };
        for i in 0..20 {
            let (_, a) = generate_sample(&spec, i).unwrap();
            assert_eq!(a.t_e - a.t_s, 20.0);
            assert_eq!(compute_snr(&a), 0.2);
        }
    }

    #[test]
    fn snr_examples() {
        let a = |t_s, t_e, t| Annotation {
            query_id: "q".into(),
            video_id: "v".into(),
            token_ids: vec![1],
            t_s,
            t_e,
            t,
        };
        assert_eq!(compute_snr(&a(10.0, 30.0, 100)), 0.2);
        assert_eq!(compute_snr(&a(0.0, 99.0, 100)), 0.99);
        assert_eq!(compute_snr(&a(4.0, 4.0, 100)), 0.0);
    }

    #[test]
    fn zero_strength_hides_the_span() {
        // Draw order does not depend on the span, so α = 0 makes features
        // independent of where the span landed.
        let a = SyntheticSpec {
            pattern_strength: 0.0,
            ..SyntheticSpec::default()
        };
        let b = SyntheticSpec {
            snr_range: [0.5, 0.6],
            ..a.clone()
        };
        let (fa, aa) = generate_sample(&a, 3).unwrap();
        let (fb, ab) = generate_sample(&b, 3).unwrap();
        assert_ne!((aa.t_s, aa.t_e), (ab.t_s, ab.t_e));
        assert_eq!(fa, fb);
    }

    #[test]
    fn generation_is_deterministic_and_index_addressed() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_sample(&spec, 5).unwrap(), generate_sample(&spec, 5).unwrap());
        assert_ne!(generate_sample(&spec, 5).unwrap().0, generate_sample(&spec, 6).unwrap().0);
        let batch = generate(&spec, 4, 3, Parallelism::Parallel).unwrap();
        assert_eq!(batch[1], generate_sample(&spec, 5).unwrap());
    }

    #[test]
    fn separability() {
        let spec = SyntheticSpec {
            pattern_strength: 6.0,
            ..SyntheticSpec::default()
        };
        for i in 0..10 {
            let (x, a) = generate_sample(&spec, i).unwrap();
            let p = spec.pattern(&a.token_ids);
            let proj = |f: usize| x.row(f).iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
            let inside: Vec<f64> = (a.t_s as usize..=a.t_e as usize).map(proj).collect();
            let outside: Vec<f64> = (0..a.t).filter(|&f| (f as f64) < a.t_s || f as f64 > a.t_e).map(proj).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let gap = mean(&inside) - mean(&outside);
            let tol = 3.0 * spec.noise_scale * (1.0 / inside.len() as f64 + 1.0 / outside.len() as f64).sqrt();
            assert!((gap - spec.pattern_strength).abs() < tol, "gap {gap} tol {tol}");
        }
    }

    #[test]
    fn infeasible_snr_is_a_generation_error() {
        let spec = SyntheticSpec {
            t: 10,
            snr_range: [0.01, 0.02],
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_sample(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn feature_round_trip_and_errors() {
        let data: Vec<f64> = (0..35).map(|i| (i as f64).sin() * 1e-300 + i as f64).collect();
        let x = Tensor::matrix(7, 5, data).unwrap();
        let bytes = encode_features(7, 5, x.data()).unwrap();
        assert_eq!(decode_features(&bytes).unwrap(), x);
        assert!(matches!(decode_features(&bytes[..12]), Err(Error::Format { offset: 12, .. })));
        assert!(matches!(decode_features(&bytes[..16]), Err(Error::Format { offset: 16, .. })));
        assert!(matches!(decode_features(&bytes[..100]), Err(Error::Format { offset: 100, .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_features(&v2), Err(Error::Format { offset: 4, .. })));
        assert!(encode_features(0, 5, &[]).is_err());
    }

    #[test]
    fn annotation_parsing() {
        let spec = SyntheticSpec::default();
        let anns: Vec<Annotation> = (0..3).map(|i| generate_sample(&spec, i).unwrap().1).collect();
        let text = format_annotations(&anns);
        assert_eq!(parse_annotations(&text).unwrap(), anns);
        assert!(parse_annotations("").unwrap().is_empty());

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replace("\"t_s\":", "\"t_s\":99,\"old\":");
        match parse_annotations(&lines.join("\n")) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let flipped = r#"{"query_id":"a","video_id":"b","token_ids":[1],"t_s":30,"t_e":10,"T":50}"#;
        let text = format!("{}\n{flipped}\n", serde_json::to_string(&anns[0]).unwrap());
        match parse_annotations(&text) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("t_s"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let missing = r#"{"query_id":"a","video_id":"b","token_ids":[1],"t_s":3,"T":50}"#;
        assert!(matches!(parse_annotations(missing), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            t: 20,
            feature_dim: 3,
            ..SyntheticSpec::default()
        };
        let samples = generate(&spec, 0, 4, Parallelism::Sequential).unwrap();
        let manifest = DatasetManifest {
            count: 4,
            offset: 0,
            spec,
        };
        write_dataset(dir.path(), &manifest, &samples).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), samples);
    }

    proptest! {
        #[test]
        fn snr_law(lo in 0.05f64..0.9, width in 0.0f64..0.1, t in 20usize..200, idx in 0u64..1000) {
            let hi = (lo + width).min(1.0);
            let spec = SyntheticSpec { t, snr_range: [lo, hi], ..SyntheticSpec::default() };
            let (_, a) = generate_sample(&spec, idx).unwrap();
            a.validate().unwrap();
            let snr = compute_snr(&a);
            let q = 1.0 / t as f64;
            prop_assert!(snr >= lo - q && snr <= hi + q, "{} not in {:?}", snr, spec.snr_range);
        }
    }
}
