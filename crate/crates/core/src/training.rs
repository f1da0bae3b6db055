//! Label assignment, losses, positive injection, and the optimization loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detection::{iou, stage_one, stage_two, Proposal, Span, ZoomInConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Tensor, Trace, Var};
use crate::par::{map_indexed, Parallelism};

pub const LOSS_LOG_HEADER: &str = "step,l_cls1,l_reg1,l_cls2,l_reg2,total";

#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    /// IoU soft label per span.
    pub labels: Vec<f64>,
    /// Indices with label above the threshold, ascending.
    pub positives: Vec<usize>,
    /// Set when the ground truth has zero length.
    pub degenerate_gt: bool,
}

impl LabelAssignment {
    pub fn n_reg(&self) -> usize {
        self.positives.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mu: f64,
    pub lambda: f64,
    pub iou_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 1e-3,
            lambda: 0.1,
            iou_threshold: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        // λ = 0 is allowed so stage 2 can be switched off in ablations.
        if !(self.mu > 0.0) || !(self.lambda >= 0.0) || !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub n: usize,
    pub n_pos: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            steps: 200,
            seed: 0,
            n: 16,
            n_pos: 4,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        ZoomInConfig::new(self.n, self.n_pos)?;
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning rate must be ≥ 0 and decays in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// IoU labels of `spans` against `gt`, positive above `threshold`.
pub fn assign_labels(spans: &[Span], gt: Span, threshold: f64) -> Result<LabelAssignment> {
    if gt.is_empty() {
        return Ok(LabelAssignment {
            labels: vec![0.0; spans.len()],
            positives: Vec::new(),
            degenerate_gt: true,
        });
    }
    let labels = spans.iter().map(|&s| iou(s, gt)).collect::<Result<Vec<_>>>()?;
    let positives = (0..labels.len()).filter(|&i| labels[i] > threshold).collect();
    Ok(LabelAssignment {
        labels,
        positives,
        degenerate_gt: false,
    })
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn classification_loss(trace: &mut Trace, scores: Var, labels: &[f64]) -> Result<Var> {
    trace.bce_mean(scores, labels)
}

/// Smooth-L1 over the positive rows of `spans: K×2`, normalized by `t`,
/// averaged over positives; zero without positives.
pub fn regression_loss(trace: &mut Trace, spans: Var, gt: Span, positives: &[usize], t: usize) -> Result<Var> {
    if positives.is_empty() {
        return Ok(trace.constant(Tensor::scalar(0.0)));
    }
    let inv = 1.0 / t as f64;
    let picked = trace.gather_rows(spans, positives)?;
    let picked = trace.scale(picked, inv);
    let targets: Vec<f64> = positives.iter().flat_map(|_| [gt.start * inv, gt.end * inv]).collect();
    let sum = trace.smooth_l1_sum(picked, &targets)?;
    Ok(trace.scale(sum, 1.0 / positives.len() as f64))
}

/// `cls + μ·reg`.
pub fn stage_loss(trace: &mut Trace, cls: Var, reg: Var, mu: f64) -> Result<Var> {
    let r = trace.scale(reg, mu);
    trace.add(cls, r)
}

/// `L1 + λ·L2`.
pub fn total_loss(trace: &mut Trace, l1: Var, l2: Var, lambda: f64) -> Result<Var> {
    let s = trace.scale(l2, lambda);
    trace.add(l1, s)
}

/// Appends `n_pos` ground-truth spans whose endpoints move by at most 10% of
/// the ground-truth length.
pub fn inject_positives(top: &[Proposal], gt: Span, n_pos: usize, t: usize, rng: &mut impl Rng) -> Vec<Proposal> {
    let mut out = top.to_vec();
    let jitter = 0.1 * gt.len();
    for _ in 0..n_pos {
        let mut draw = || if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
        let (ds, de) = (draw(), draw());
        out.push(Proposal {
            span: Span::canonical(gt.start + ds, gt.end + de).clip(t),
            score: 1.0,
            anchor: None,
            stage: 1,
        });
    }
    out
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub token_ids: Vec<usize>,
    pub gt: Span,
}

#[derive(Clone, Debug)]
pub struct LossVars {
    pub cls1: Var,
    pub reg1: Var,
    pub cls2: Var,
    pub reg2: Var,
    pub l1: Var,
    pub l2: Var,
    pub total: Var,
    /// IoU labels of the stage-2 candidates.
    pub stage2_labels: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_cls1: f64,
    pub l_reg1: f64,
    pub l_cls2: f64,
    pub l_reg2: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(trace: &Trace, v: &LossVars) -> Self {
        let get = |x: Var| trace.value(x).data()[0];
        Self {
            l_cls1: get(v.cls1),
            l_reg1: get(v.reg1),
            l_cls2: get(v.cls2),
            l_reg2: get(v.reg2),
            total: get(v.total),
        }
    }

    fn accumulate(&mut self, o: &Self, w: f64) {
        self.l_cls1 += w * o.l_cls1;
        self.l_reg1 += w * o.l_reg1;
        self.l_cls2 += w * o.l_cls2;
        self.l_reg2 += w * o.l_reg2;
        self.total += w * o.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls1, self.l_reg1, self.l_cls2, self.l_reg2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.l_cls1, self.l_reg1, self.l_cls2, self.l_reg2, self.total
        )
    }
}

fn mean(trace: &mut Trace, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = trace.add(acc, x)?;
    }
    Ok(trace.scale(acc, 1.0 / xs.len() as f64))
}

/// Forward pass of one sample through both stages and all four losses.
/// Stage-1 losses are averaged over the cross-modal layers.
pub fn forward_loss(
    model: &Model,
    trace: &mut Trace,
    p: &[Var],
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LossVars> {
    forward_loss_with_labels(model, trace, p, sample, cfg, rng, None)
}

/// [`forward_loss`] with the stage-2 labels optionally supplied instead of
/// assigned from the current candidates. Labels are targets, so they carry
/// no gradient either way.
pub fn forward_loss_with_labels(
    model: &Model,
    trace: &mut Trace,
    p: &[Var],
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    stage2_labels: Option<&[f64]>,
) -> Result<LossVars> {
    let w = &cfg.weights;
    let x = trace.constant(sample.features.clone());
    let one = stage_one(model, trace, p, x, &sample.token_ids, cfg.n)?;
    let t = one.t;

    let mut cls = Vec::with_capacity(one.layers.len());
    let mut reg = Vec::with_capacity(one.layers.len());
    for layer in &one.layers {
        let spans: Vec<Span> = layer.anchors.iter().map(|a| a.clipped(t)).collect();
        let la = assign_labels(&spans, sample.gt, w.iou_threshold)?;
        cls.push(classification_loss(trace, layer.scores, &la.labels)?);
        reg.push(regression_loss(trace, layer.spans, sample.gt, &la.positives, t)?);
    }
    let cls1 = mean(trace, &cls)?;
    let reg1 = mean(trace, &reg)?;
    let l1 = stage_loss(trace, cls1, reg1, w.mu)?;

    let candidates = inject_positives(&one.top, sample.gt, cfg.n_pos, t, rng);
    let s2 = stage_two(model, trace, p, &one, &candidates)?;
    let spans: Vec<Span> = candidates.iter().map(|c| c.span).collect();
    let mut la = assign_labels(&spans, sample.gt, w.iou_threshold)?;
    if let Some(labels) = stage2_labels {
        if labels.len() != spans.len() {
            return Err(Error::Contract(format!("{} labels for {} candidates", labels.len(), spans.len())));
        }
        la.labels = labels.to_vec();
        la.positives = (0..labels.len()).filter(|&i| labels[i] > w.iou_threshold).collect();
    }
    let cls2 = classification_loss(trace, s2.scores, &la.labels)?;
    let reg2 = regression_loss(trace, s2.spans, sample.gt, &la.positives, t)?;
    let l2 = stage_loss(trace, cls2, reg2, w.mu)?;
    let total = total_loss(trace, l1, l2, w.lambda)?;
    Ok(LossVars {
        cls1,
        reg1,
        cls2,
        reg2,
        l1,
        l2,
        total,
        stage2_labels: la.labels,
    })
}

/// Losses and parameter gradients for one sample.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(LossValues, Vec<Vec<f64>>)> {
    let mut trace = Trace::new();
    let p = model.params().bind(&mut trace);
    let vars = forward_loss(model, &mut trace, &p, sample, cfg, rng)?;
    trace.backward(vars.total)?;
    let grads = p
        .iter()
        .map(|&v| trace.grad(v).expect("parameter leaf").to_vec())
        .collect();
    Ok((LossValues::read(&trace, &vars), grads))
}

/// Adam with bias correction and no schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in model.params_mut().tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Cycles through reshuffled epochs of the dataset.
struct BatchOrder {
    rng: ChaCha8Rng,
    n: usize,
    queue: Vec<usize>,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self { rng, n, queue: Vec::new() }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.queue.is_empty() {
                    self.queue = (0..self.n).rev().collect();
                    self.queue.shuffle(&mut self.rng);
                }
                self.queue.pop().expect("refilled")
            })
            .collect()
    }
}

/// Per-sample randomness for step `step`, slot `k`.
fn injection_rng(seed: u64, step: usize, batch: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step * batch + k) as u64);
    rng
}

/// Trains `model` in place. `on_step` sees every step's batch-mean losses
/// before the update is applied. Gradients are merged in sample order, so
/// results do not depend on `mode` or thread count.
pub fn train_loop(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    mode: Parallelism,
    mut on_step: impl FnMut(usize, &LossValues) -> Result<()>,
) -> Result<Vec<LossValues>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = Adam::new(model, cfg);
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;
    let w = 1.0 / b as f64;

    for step in 0..cfg.steps {
        let batch = order.next_batch(b);
        let frozen: &Model = model;
        let results = map_indexed(b, mode, |k| {
            let mut rng = injection_rng(cfg.seed, step, b, k);
            sample_gradients(frozen, &data[batch[k]], cfg, &mut rng)
        });

        let mut losses = LossValues::default();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for r in results {
            let (l, g) = r?;
            losses.accumulate(&l, w);
            if grads.is_empty() {
                grads = g.into_iter().map(|v| v.into_iter().map(|x| x * w).collect()).collect();
            } else {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x * w;
                    }
                }
            }
        }
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                l_cls1: losses.l_cls1,
                l_reg1: losses.l_reg1,
                l_cls2: losses.l_cls2,
                l_reg2: losses.l_reg2,
            });
        }
        on_step(step, &losses)?;
        adam.update(model, &grads);
        log.push(losses);
    }
    Ok(log)
}
