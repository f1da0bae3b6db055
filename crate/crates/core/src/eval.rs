//! Recall metrics, SNR-bucketed accuracy, and the attention cost benchmark.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_op_count, build_mask, full_attention, neighboring_attention, AttentionParams, JointSequence, Radius};
use crate::detection::{ground, iou, PredictionRecord, Span};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::par::{map_indexed, Parallelism};

pub const DEFAULT_SNR_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

pub fn recall_key(n: usize, m: f64) -> String {
    format!("R@{n},IoU@{m}")
}

/// Largest IoU among the first `n` predictions; `None` without predictions.
pub fn best_iou(preds: &[Span], gt: Span, n: usize) -> Result<Option<f64>> {
    let mut best = None;
    for &p in preds.iter().take(n) {
        let v = iou(p, gt)?;
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    Ok(best)
}

/// Percentage of queries with some top-`n` prediction of IoU strictly above
/// `m`. Queries without predictions count as misses.
pub fn recall_at(preds: &[Vec<Span>], gts: &[Span], n: usize, m: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!("{} prediction lists for {} queries", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, &g) in preds.iter().zip(gts) {
        if best_iou(p, g, n)?.is_some_and(|b| b > m) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// R@1,IoU@0.5 within the bucket; 0 when empty.
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrBucketReport {
    pub edges: Vec<f64>,
    pub buckets: Vec<SnrBucket>,
}

/// Bucket index of `snr`: left-closed, right-open, last bucket closed.
pub fn bucket_of(snr: f64, edges: &[f64]) -> Option<usize> {
    let last = edges.len() - 2;
    (0..=last).find(|&b| snr >= edges[b] && (snr < edges[b + 1] || (b == last && snr <= edges[b + 1])))
}

pub fn snr_buckets(preds: &[Vec<Span>], gts: &[Span], snrs: &[f64], edges: &[f64]) -> Result<SnrBucketReport> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("bucket edges must be strictly increasing, got {edges:?}")));
    }
    if snrs.len() != gts.len() {
        return Err(Error::Contract(format!("{} SNR values for {} queries", snrs.len(), gts.len())));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len() - 1];
    for (q, &s) in snrs.iter().enumerate() {
        let b = bucket_of(s, edges)
            .ok_or_else(|| Error::Contract(format!("SNR {s} outside bucket edges {edges:?}")))?;
        members[b].push(q);
    }
    let buckets = members
        .iter()
        .enumerate()
        .map(|(b, qs)| {
            let p: Vec<Vec<Span>> = qs.iter().map(|&q| preds[q].clone()).collect();
            let g: Vec<Span> = qs.iter().map(|&q| gts[q]).collect();
            Ok(SnrBucket {
                lo: edges[b],
                hi: edges[b + 1],
                count: qs.len(),
                recall: recall_at(&p, &g, 1, 0.5)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SnrBucketReport {
        edges: edges.to_vec(),
        buckets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_values: Vec<usize>,
    pub m_values: Vec<f64>,
    pub snr_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_values: vec![1, 5],
            m_values: vec![0.3, 0.5, 0.7],
            snr_edges: DEFAULT_SNR_EDGES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub recall: BTreeMap<String, f64>,
    pub snr_buckets: Vec<SnrBucket>,
    pub query_count: usize,
    /// Query ids that had no prediction; each counts as a miss.
    pub missing_predictions: Vec<String>,
    /// Best top-1 IoU per query, in query order.
    pub best_iou: Vec<f64>,
}

impl EvalResult {
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        self.recall.get(&recall_key(n, m)).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One query to score: its id, ground truth, and SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub query_id: String,
    pub gt: Span,
    pub snr: f64,
}

pub fn evaluate(queries: &[EvalQuery], preds: &[Vec<Span>], cfg: &EvalConfig) -> Result<EvalResult> {
    let gts: Vec<Span> = queries.iter().map(|q| q.gt).collect();
    let snrs: Vec<f64> = queries.iter().map(|q| q.snr).collect();
    let mut recall = BTreeMap::new();
    for &n in &cfg.n_values {
        for &m in &cfg.m_values {
            recall.insert(recall_key(n, m), recall_at(preds, &gts, n, m)?);
        }
    }
    let report = snr_buckets(preds, &gts, &snrs, &cfg.snr_edges)?;
    let best = preds
        .iter()
        .zip(&gts)
        .map(|(p, &g)| Ok(best_iou(p, g, 1)?.unwrap_or(0.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult {
        recall,
        snr_buckets: report.buckets,
        query_count: queries.len(),
        missing_predictions: queries
            .iter()
            .zip(preds)
            .filter(|(_, p)| p.is_empty())
            .map(|(q, _)| q.query_id.clone())
            .collect(),
        best_iou: best,
    })
}

/// Two-stage inference over a batch of `(features, token_ids)` pairs, in input
/// order.
pub fn predict_all(
    model: &Model,
    inputs: &[(&Tensor, &[usize])],
    n: usize,
    mode: Parallelism,
) -> Result<Vec<Vec<crate::detection::Proposal>>> {
    map_indexed(inputs.len(), mode, |i| ground(model, inputs[i].0, inputs[i].1, n))
        .into_iter()
        .collect()
}

pub fn prediction_lines(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub const BENCH_HEADER: &str = "config,op_count,wall_ms_median,wall_ms_stddev";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub op_count: u64,
    pub median_ms: f64,
    pub stddev_ms: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.6},{:.6}", self.config, self.op_count, self.median_ms, self.stddev_ms)
    }
}

pub fn bench_label(t: usize, l: usize, r: Radius) -> String {
    match r {
        Radius::Window(r) => format!("T{t}_L{l}_r{r}"),
        Radius::Full => format!("T{t}_L{l}_full"),
    }
}

/// Median and population standard deviation.
pub fn median_stddev(xs: &[f64]) -> (f64, f64) {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (median, var.sqrt())
}

/// Times `repeats` forward passes of one attention configuration after
/// `ceil(repeats / 10)` untimed warmup passes.
pub fn time_attention(x: &JointSequence, params: &AttentionParams, radius: Radius, repeats: usize) -> Result<Vec<f64>> {
    let mask = match radius {
        Radius::Window(r) => Some(build_mask(x.visual_len(), x.text_len(), r)),
        Radius::Full => None,
    };
    let run = || match &mask {
        Some(m) => neighboring_attention(x, params, m),
        None => full_attention(x, params),
    };
    for _ in 0..repeats.div_ceil(10) {
        run()?;
    }
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            let out = run()?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            Ok(ms)
        })
        .collect()
}

/// Op counts and wall-time statistics for full attention and each radius.
pub fn bench_report(
    t: usize,
    l: usize,
    radii: &[Radius],
    repeats: usize,
    d: usize,
    heads: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("bench repeats must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::random(d, heads, &mut rng)?;
    let n = t + l;
    let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let x = JointSequence::new(x, t, l)?;
    radii
        .iter()
        .map(|&r| {
            let times = time_attention(&x, &params, r, repeats)?;
            let (median_ms, stddev_ms) = median_stddev(&times);
            Ok(BenchRow {
                config: bench_label(t, l, r),
                op_count: attention_op_count(t, l, r),
                median_ms,
                stddev_ms,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}
