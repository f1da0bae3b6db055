//! Anchor-based two-stage boundary detection.
//!
//! Stage 1 scores and regresses every anchor from each layer's `V̂ʲ`; stage 2
//! takes the top-N stage-1 proposals, samples start/center/end rows of `V̂`,
//! and refines their scores and spans.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadIds, LayerOutputs, Model, RadiusSchedule};
use crate::numerics::{Tensor, Trace, Var};

/// Closed interval in frames, `start ≤ end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start <= end) {
            return Err(Error::Contract(format!("interval [{start}, {end}] is not canonical")));
        }
        Ok(Self { start, end })
    }

    /// Orders the endpoints.
    pub fn canonical(a: f64, b: f64) -> Self {
        Self {
            start: a.min(b),
            end: a.max(b),
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0.0
    }

    pub fn clip(&self, t: usize) -> Self {
        let hi = (t - 1) as f64;
        Self::canonical(self.start.clamp(0.0, hi), self.end.clamp(0.0, hi))
    }
}

/// Continuous intersection-over-union; zero when the union has zero length.
pub fn iou(a: Span, b: Span) -> Result<f64> {
    if !(a.start <= a.end) || !(b.start <= b.end) {
        return Err(Error::Contract(format!("iou on non-canonical interval {a:?} / {b:?}")));
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub center: usize,
    pub radius: usize,
    /// Position of `radius` in the ascending list of anchor scales.
    pub scale_index: usize,
    pub layer: usize,
}

impl Anchor {
    /// Raw interval `[t − w, t + w]`, possibly outside the video.
    pub fn span(&self) -> Span {
        Span {
            start: self.center as f64 - self.radius as f64,
            end: self.center as f64 + self.radius as f64,
        }
    }

    pub fn clipped(&self, t: usize) -> Span {
        self.span().clip(t)
    }
}

/// Distinct anchor scales of a schedule, ascending.
pub fn schedule_scales(schedule: &RadiusSchedule) -> Vec<usize> {
    let mut s = schedule.layer_scales.concat();
    s.sort_unstable();
    s.dedup();
    s
}

fn layer_slots(schedule: &RadiusSchedule, layer: usize) -> Vec<usize> {
    let mut s = schedule.layer_scales[layer].clone();
    s.sort_unstable();
    s
}

/// Anchors owned by one layer, frame-major then ascending scale.
pub fn layer_anchors(t: usize, schedule: &RadiusSchedule, layer: usize) -> Vec<Anchor> {
    let scales = schedule_scales(schedule);
    let slots = layer_slots(schedule, layer);
    (0..t)
        .flat_map(|center| {
            let scales = &scales;
            slots.iter().map(move |&radius| Anchor {
                center,
                radius,
                scale_index: scales.binary_search(&radius).expect("scale in schedule"),
                layer,
            })
        })
        .collect()
}

/// Every anchor of the video, frame-major, then ascending scale, then layer.
pub fn generate_anchors(t: usize, schedule: &RadiusSchedule) -> Vec<Anchor> {
    let mut all: Vec<Anchor> = (0..schedule.layers()).flat_map(|j| layer_anchors(t, schedule, j)).collect();
    all.sort_by_key(|a| (a.center, a.scale_index, a.layer));
    all
}

/// A candidate interval. `anchor` is `None` for injected positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub span: Span,
    pub score: f64,
    pub anchor: Option<Anchor>,
    pub stage: u8,
}

impl Proposal {
    fn scale_key(&self) -> usize {
        self.anchor.map_or(usize::MAX, |a| a.scale_index)
    }
}

/// Score descending, then earlier start, then smaller scale index.
pub fn ranking_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.span.start.total_cmp(&b.span.start))
        .then(a.scale_key().cmp(&b.scale_key()))
}

/// Highest-scoring `n` proposals under [`ranking_order`]; no suppression.
pub fn select_top_n(proposals: &[Proposal], n: usize) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(ranking_order);
    sorted.truncate(n);
    sorted
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoomInConfig {
    pub n: usize,
    pub n_pos: usize,
}

impl ZoomInConfig {
    pub fn new(n: usize, n_pos: usize) -> Result<Self> {
        if n == 0 || n_pos > n {
            return Err(Error::Config(format!("need N ≥ 1 and 0 ≤ N_pos ≤ N, got N={n} N_pos={n_pos}")));
        }
        Ok(Self { n, n_pos })
    }
}

/// Stage-1 outputs of one layer, rows aligned with `anchors`.
#[derive(Clone, Debug)]
pub struct Stage1Layer {
    pub anchors: Vec<Anchor>,
    /// `(T·k)×1` probabilities.
    pub scores: Var,
    /// `(T·k)×2` regressed, clipped, canonical spans.
    pub spans: Var,
}

impl Stage1Layer {
    pub fn proposals(&self, trace: &Trace) -> Vec<Proposal> {
        let scores = trace.value(self.scores).data();
        let spans = trace.value(self.spans).data();
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, &a)| Proposal {
                span: Span {
                    start: spans[2 * i],
                    end: spans[2 * i + 1],
                },
                score: scores[i],
                anchor: Some(a),
                stage: 1,
            })
            .collect()
    }
}

/// Scores and regresses the anchors layer `layer` owns from `V̂ʲ`.
pub fn stage1_heads(
    trace: &mut Trace,
    p: &[Var],
    heads: &HeadIds,
    v_hat: Var,
    schedule: &RadiusSchedule,
    layer: usize,
) -> Result<Stage1Layer> {
    let t = trace.shape(v_hat)[0];
    let anchors = layer_anchors(t, schedule, layer);
    let k = schedule.layer_scales[layer].len();

    let logits = heads.cls1.apply(trace, p, v_hat)?;
    let offsets = heads.reg1.apply(trace, p, v_hat)?;
    let k_max = trace.shape(logits)[1];
    let (logits, offsets) = if k == k_max {
        (logits, offsets)
    } else {
        let cols: Vec<usize> = (0..k).collect();
        let pair_cols: Vec<usize> = (0..2 * k).collect();
        (trace.select_cols(logits, &cols)?, trace.select_cols(offsets, &pair_cols)?)
    };
    let scores = trace.sigmoid(logits);
    let scores = trace.reshape(scores, vec![t * k, 1])?;

    let raw: Vec<f64> = anchors
        .iter()
        .flat_map(|a| {
            let s = a.span();
            [s.start, s.end]
        })
        .collect();
    let base = trace.constant(Tensor::matrix(t, 2 * k, raw)?);
    let spans = trace.add(offsets, base)?;
    let spans = trace.clamp(spans, 0.0, (t - 1) as f64);
    let spans = trace.reshape(spans, vec![t * k, 2])?;
    let spans = trace.canonical_pairs(spans)?;
    Ok(Stage1Layer { anchors, scores, spans })
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Frame rows sampled for a span: start, center, and end, rounded half-up and
/// clamped into the video.
pub fn roi_positions(span: Span, t: usize) -> [usize; 3] {
    let hi = (t - 1) as f64;
    let at = |x: f64| round_half_up(x).clamp(0.0, hi) as usize;
    [at(span.start), at(0.5 * (span.start + span.end)), at(span.end)]
}

/// Layer whose largest scale best matches a proposal's half-length.
pub fn nearest_layer(span: Span, schedule: &RadiusSchedule) -> usize {
    let half = 0.5 * span.len();
    (0..schedule.layers())
        .min_by(|&a, &b| {
            let da = (*schedule.layer_scales[a].iter().max().unwrap() as f64 - half).abs();
            let db = (*schedule.layer_scales[b].iter().max().unwrap() as f64 - half).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .expect("at least one layer")
}

/// `1×6D` ROI feature: three `2D`-wide rows of the owning layer's `V̂ʲ`.
pub fn roi_sample(
    trace: &mut Trace,
    proposal: &Proposal,
    layers: &[LayerOutputs],
    schedule: &RadiusSchedule,
) -> Result<Var> {
    let layer = proposal
        .anchor
        .map_or_else(|| nearest_layer(proposal.span, schedule), |a| a.layer);
    let v_hat = layers[layer].v_hat;
    let (t, w) = (trace.shape(v_hat)[0], trace.shape(v_hat)[1]);
    let rows = trace.gather_rows(v_hat, &roi_positions(proposal.span, t))?;
    trace.reshape(rows, vec![1, 3 * w])
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    /// `K×1` refined probabilities.
    pub scores: Var,
    /// `K×2` refined spans.
    pub spans: Var,
}

/// Refines `K` candidates from their stacked ROI features `rois: K×6D` and
/// their current spans `base: K×2`.
pub fn stage2_refine(trace: &mut Trace, p: &[Var], heads: &HeadIds, rois: Var, base: Var, t: usize) -> Result<Stage2> {
    let logits = heads.cls2.apply(trace, p, rois)?;
    let scores = trace.sigmoid(logits);
    let offsets = heads.reg2.apply(trace, p, rois)?;
    let spans = trace.add(offsets, base)?;
    let spans = trace.clamp(spans, 0.0, (t - 1) as f64);
    let spans = trace.canonical_pairs(spans)?;
    Ok(Stage2 { scores, spans })
}

/// Stage-1 results of a forward pass.
#[derive(Clone, Debug)]
pub struct StageOne {
    pub t: usize,
    pub outputs: Vec<LayerOutputs>,
    pub layers: Vec<Stage1Layer>,
    pub top: Vec<Proposal>,
}

impl StageOne {
    /// `K×2` spans of `candidates`. Anchored candidates stay attached to the
    /// stage-1 regression output; injected ones are constants.
    pub fn candidate_spans(&self, trace: &mut Trace, candidates: &[Proposal]) -> Result<Var> {
        let rows = candidates
            .iter()
            .map(|c| match c.anchor {
                Some(a) => {
                    let layer = &self.layers[a.layer];
                    let row = layer.anchors.iter().position(|x| *x == a).ok_or_else(|| {
                        Error::Contract(format!("anchor {a:?} not owned by layer {}", a.layer))
                    })?;
                    trace.slice_rows(layer.spans, row, row + 1)
                }
                None => Ok(trace.constant(Tensor::matrix(1, 2, vec![c.span.start, c.span.end])?)),
            })
            .collect::<Result<Vec<_>>>()?;
        trace.concat_rows(&rows)
    }
}

pub fn stage_one(
    model: &Model,
    trace: &mut Trace,
    p: &[Var],
    features: Var,
    token_ids: &[usize],
    n: usize,
) -> Result<StageOne> {
    let t = trace.shape(features)[0];
    let outputs = model.align(trace, p, features, token_ids)?;
    let layers = outputs
        .iter()
        .enumerate()
        .map(|(j, o)| stage1_heads(trace, p, model.head_ids(), o.v_hat, model.schedule(), j))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<Proposal> = layers.iter().flat_map(|l| l.proposals(trace)).collect();
    let top = select_top_n(&all, n);
    Ok(StageOne {
        t,
        outputs,
        layers,
        top,
    })
}

pub fn stage_two(model: &Model, trace: &mut Trace, p: &[Var], one: &StageOne, candidates: &[Proposal]) -> Result<Stage2> {
    let rois = candidates
        .iter()
        .map(|c| roi_sample(trace, c, &one.outputs, model.schedule()))
        .collect::<Result<Vec<_>>>()?;
    let rois = trace.concat_rows(&rois)?;
    let base = one.candidate_spans(trace, candidates)?;
    stage2_refine(trace, p, model.head_ids(), rois, base, one.t)
}

/// Refined proposals ranked by refined score.
pub fn ranked_stage2(trace: &Trace, stage2: &Stage2, candidates: &[Proposal]) -> Vec<Proposal> {
    let scores = trace.value(stage2.scores).data();
    let spans = trace.value(stage2.spans).data();
    let mut out: Vec<Proposal> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Proposal {
            span: Span {
                start: spans[2 * i],
                end: spans[2 * i + 1],
            },
            score: scores[i],
            anchor: c.anchor,
            stage: 2,
        })
        .collect();
    out.sort_by(ranking_order);
    out
}

/// Full two-stage inference for one video/query pair.
pub fn ground(model: &Model, features: &Tensor, token_ids: &[usize], n: usize) -> Result<Vec<Proposal>> {
    let mut trace = Trace::new();
    let p = model.params().bind_frozen(&mut trace);
    let x = trace.constant(features.clone());
    let one = stage_one(model, &mut trace, &p, x, token_ids, n)?;
    let stage2 = stage_two(model, &mut trace, &p, &one, &one.top)?;
    Ok(ranked_stage2(&trace, &stage2, &one.top))
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    /// `[start, end, score]`, score descending.
    pub proposals: Vec<[f64; 3]>,
}

impl PredictionRecord {
    pub fn new(query_id: impl Into<String>, ranked: &[Proposal]) -> Self {
        Self {
            query_id: query_id.into(),
            proposals: ranked.iter().map(|p| [p.span.start, p.span.end, p.score]).collect(),
        }
    }

    pub fn spans(&self) -> Vec<Span> {
        self.proposals.iter().map(|p| Span::canonical(p[0], p[1])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_schedule, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched(scales: &[usize], m: usize) -> RadiusSchedule {
        derive_schedule(&ModelConfig {
            anchor_scales: scales.to_vec(),
            cross_layers: m,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn small_model() -> Model {
        Model::new(
            ModelConfig {
                feature_dim: 6,
                d_model: 8,
                heads: 2,
                enc_layers: 1,
                cross_layers: 2,
                ffn_dim: 16,
                anchor_scales: vec![1, 2, 3, 4],
                vocab_size: 10,
                max_t: 24,
                max_l: 6,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn feats(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn anchor_spans() {
        let a = Anchor {
            center: 10,
            radius: 4,
            scale_index: 0,
            layer: 0,
        };
        assert_eq!(a.span(), Span { start: 6.0, end: 14.0 });
        let a = Anchor { center: 0, ..a };
        assert_eq!(a.span(), Span { start: -4.0, end: 4.0 });
        assert_eq!(a.clipped(50), Span { start: 0.0, end: 4.0 });
        let s = sched(&[2, 3], 1);
        let anchors = generate_anchors(5, &s);
        assert_eq!(anchors.len(), 10);
        assert_eq!((anchors[0].center, anchors[0].radius), (0, 2));
        assert_eq!((anchors[1].center, anchors[1].radius), (0, 3));
    }

    #[test]
    fn iou_examples() {
        let s = |a, b| Span::new(a, b).unwrap();
        assert!((iou(s(0.0, 10.0), s(5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(s(2.0, 8.0), s(2.0, 8.0)).unwrap(), 1.0);
        assert_eq!(iou(s(0.0, 10.0), s(10.0, 20.0)).unwrap(), 0.0);
        assert_eq!(iou(s(3.0, 3.0), s(3.0, 3.0)).unwrap(), 0.0);
        let bad = Span { start: 5.0, end: 1.0 };
        assert!(iou(bad, s(0.0, 1.0)).is_err());
    }

    #[test]
    fn top_n_examples() {
        let mk = |score, start| Proposal {
            span: Span { start, end: start + 1.0 },
            score,
            anchor: None,
            stage: 1,
        };
        let props = vec![mk(0.2, 0.0), mk(0.9, 1.0), mk(0.5, 2.0)];
        let top = select_top_n(&props, 2);
        assert_eq!(top, vec![props[1], props[2]]);
        assert_eq!(select_top_n(&props, 10).len(), 3);
        assert!(select_top_n(&[], 3).is_empty());
        let tied = vec![mk(0.5, 3.0), mk(0.5, 1.0)];
        assert_eq!(select_top_n(&tied, 1)[0].span.start, 1.0);
    }

    #[test]
    fn roi_position_rule() {
        assert_eq!(roi_positions(Span { start: 4.0, end: 8.0 }, 20), [4, 6, 8]);
        assert_eq!(roi_positions(Span { start: 5.0, end: 5.0 }, 20), [5, 5, 5]);
        assert_eq!(roi_positions(Span { start: 2.5, end: 3.5 }, 20), [3, 3, 4]);
        assert_eq!(roi_positions(Span { start: 18.6, end: 19.0 }, 19), [18, 18, 18]);
    }

    #[test]
    fn zero_regression_head_returns_anchor_spans() {
        let mut model = small_model();
        model.zero_params("stage1.reg.1");
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let x = tr.constant(feats(12, 6, 1));
        let one = stage_one(&model, &mut tr, &p, x, &[1, 2], 8).unwrap();
        let mut count = 0;
        for layer in &one.layers {
            for prop in layer.proposals(&tr) {
                assert_eq!(prop.span, prop.anchor.unwrap().clipped(12));
                assert!(prop.score > 0.0 && prop.score < 1.0);
                count += 1;
            }
        }
        assert_eq!(count, 4 * 12);
    }

    #[test]
    fn roi_width_and_layer_choice() {
        let model = small_model();
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let x = tr.constant(feats(12, 6, 2));
        let one = stage_one(&model, &mut tr, &p, x, &[3], 5).unwrap();
        let injected = Proposal {
            span: Span { start: 2.0, end: 9.0 },
            score: 1.0,
            anchor: None,
            stage: 1,
        };
        assert_eq!(nearest_layer(injected.span, model.schedule()), 0);
        for c in one.top.iter().chain([&injected]) {
            let roi = roi_sample(&mut tr, c, &one.outputs, model.schedule()).unwrap();
            assert_eq!(tr.shape(roi), &[1, 48]);
        }
    }

    #[test]
    fn zero_refinement_keeps_spans_and_halves_scores() {
        let mut model = small_model();
        model.zero_params("stage2.");
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let x = tr.constant(feats(12, 6, 3));
        let one = stage_one(&model, &mut tr, &p, x, &[3, 4], 7).unwrap();
        let s2 = stage_two(&model, &mut tr, &p, &one, &one.top).unwrap();
        let scores = tr.value(s2.scores).data();
        let spans = tr.value(s2.spans).data();
        assert_eq!(scores.len(), 7);
        for (i, c) in one.top.iter().enumerate() {
            assert_eq!(scores[i], 0.5);
            assert_eq!([spans[2 * i], spans[2 * i + 1]], [c.span.start, c.span.end]);
        }
    }

    #[test]
    fn refined_spans_clipped_canonical_and_ranked() {
        let mut model = small_model();
        // Large output weights push offsets far outside the video.
        let id = model.params().find("stage2.reg.1.b").unwrap();
        model.params_mut().get_mut(id).data_mut().copy_from_slice(&[40.0, -40.0]);
        let ranked = ground(&model, &feats(12, 6, 4), &[1], 9).unwrap();
        assert_eq!(ranked.len(), 9);
        for w in ranked.windows(2) {
            assert_ne!(ranking_order(&w[0], &w[1]), Ordering::Greater);
        }
        for r in &ranked {
            assert!(r.span.start <= r.span.end);
            assert!(r.span.start >= 0.0 && r.span.end <= 11.0);
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in 0.0f64..50.0, la in 0.0f64..30.0, b in 0.0f64..50.0, lb in 0.0f64..30.0) {
            let x = Span::new(a, a + la).unwrap();
            let y = Span::new(b, b + lb).unwrap();
            let v = iou(x, y).unwrap();
            prop_assert_eq!(v, iou(y, x).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            if la > 0.0 {
                prop_assert_eq!(iou(x, x).unwrap(), 1.0);
            }
        }

        #[test]
        fn anchor_cardinality(t in 1usize..60) {
            let s = sched(&[2, 4, 6, 8], 2);
            prop_assert_eq!(generate_anchors(t, &s).len(), 4 * t);
        }

        #[test]
        fn top_n_is_sorted_prefix(scores in proptest::collection::vec(0u8..10, 1..60), n in 1usize..70) {
            let props: Vec<Proposal> = scores.iter().enumerate().map(|(i, &s)| Proposal {
                span: Span { start: (i % 7) as f64, end: 10.0 },
                score: f64::from(s) / 10.0,
                anchor: None,
                stage: 1,
            }).collect();
            let top = select_top_n(&props, n);
            prop_assert_eq!(top.len(), n.min(props.len()));
            for w in top.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}
