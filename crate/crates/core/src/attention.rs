//! Full and neighboring multi-head attention over a joint visual+text sequence.
//!
//! Token layout is 0-indexed: visual tokens occupy `[0, T)`, text tokens
//! `[T, T+L)`. A visual query at `i` sees visual keys within radius `r`
//! (clamped to the video) plus every text key; text queries see everything.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Mask, Tensor, Trace, Var};

/// Concatenated visual and text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence {
    x: Tensor,
    visual_len: usize,
    text_len: usize,
}

impl JointSequence {
    pub fn new(x: Tensor, visual_len: usize, text_len: usize) -> Result<Self> {
        if visual_len == 0 || text_len == 0 {
            return Err(Error::Contract("joint sequence needs T ≥ 1 and L ≥ 1".into()));
        }
        if !x.is_matrix() || x.rows() != visual_len + text_len {
            return Err(Error::dim("joint_sequence", x.shape(), &[visual_len + text_len, 0]));
        }
        Ok(Self {
            x,
            visual_len,
            text_len,
        })
    }

    /// Stacks `V: T×D` over `Q: L×D`.
    pub fn concat(v: &Tensor, q: &Tensor) -> Result<Self> {
        if v.cols() != q.cols() {
            return Err(Error::dim("joint_sequence", v.shape(), q.shape()));
        }
        let mut data = v.data().to_vec();
        data.extend_from_slice(q.data());
        let x = Tensor::matrix(v.rows() + q.rows(), v.cols(), data)?;
        Self::new(x, v.rows(), q.rows())
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }
}

/// Visual window radius, or unrestricted attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Radius {
    Window(usize),
    Full,
}

/// Keys visible to visual query `i`: the clamped window `[i−r, i+r]` plus the
/// text block, sorted and duplicate-free.
pub fn neighbor_key_set(i: usize, r: usize, t: usize, l: usize) -> Result<Vec<usize>> {
    if i >= t {
        return Err(Error::Index { index: i, len: t });
    }
    let lo = i.saturating_sub(r);
    let hi = (i + r).min(t - 1);
    Ok((lo..=hi).chain(t..t + l).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    mask: Arc<Mask>,
    radius: usize,
}

impl AttentionMask {
    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.mask.is_visible(i, j)
    }
}

pub fn build_mask(t: usize, l: usize, r: usize) -> AttentionMask {
    let n = t + l;
    let mut visible = vec![true; n * n];
    for i in 0..t {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(t - 1);
        for j in 0..t {
            visible[i * n + j] = j >= lo && j <= hi;
        }
    }
    AttentionMask {
        mask: Arc::new(Mask::new(n, n, visible).expect("square mask")),
        radius: r,
    }
}

/// Number of query-key score pairs evaluated by one attention pass.
pub fn attention_op_count(t: usize, l: usize, radius: Radius) -> u64 {
    let n = (t + l) as u64;
    match radius {
        Radius::Full => n * n,
        Radius::Window(r) => {
            let visual: u64 = (0..t)
                .map(|i| {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r).min(t - 1);
                    (hi - lo + 1 + l) as u64
                })
                .sum();
            visual + l as u64 * n
        }
    }
}

/// Per-head query/key/value projections and the shared output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn new(wq: Vec<Tensor>, wk: Vec<Tensor>, wv: Vec<Tensor>, wo: Tensor) -> Result<Self> {
        let heads = wq.len();
        if heads == 0 || wk.len() != heads || wv.len() != heads {
            return Err(Error::Config("attention needs the same positive head count for q/k/v".into()));
        }
        let d = wo.rows();
        if !d.is_multiple_of(heads) || wo.cols() != d {
            return Err(Error::dim("attention_params", wo.shape(), &[d, d]));
        }
        for w in wq.iter().chain(&wk).chain(&wv) {
            if w.shape() != [d, d / heads] {
                return Err(Error::dim("attention_params", w.shape(), &[d, d / heads]));
            }
        }
        Ok(Self { wq, wk, wv, wo })
    }

    /// Uniform(−1/√D, 1/√D) initialization.
    pub fn random(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-bound..bound)).collect())
                .expect("sized")
        };
        let dh = d / heads;
        let wq = (0..heads).map(|_| mat(d, dh)).collect();
        let wk = (0..heads).map(|_| mat(d, dh)).collect();
        let wv = (0..heads).map(|_| mat(d, dh)).collect();
        let wo = mat(d, d);
        Self::new(wq, wk, wv, wo)
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn width(&self) -> usize {
        self.wo.rows()
    }

    /// Records every matrix on `trace` as a constant.
    pub fn to_vars(&self, trace: &mut Trace) -> AttentionVars {
        AttentionVars {
            wq: self.wq.iter().map(|w| trace.constant(w.clone())).collect(),
            wk: self.wk.iter().map(|w| trace.constant(w.clone())).collect(),
            wv: self.wv.iter().map(|w| trace.constant(w.clone())).collect(),
            wo: trace.constant(self.wo.clone()),
        }
    }
}

/// Attention weights bound to a trace.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

/// Multi-head scaled dot-product attention of `queries` over `keys`, with
/// one visibility mask shared by all heads.
pub fn multi_head(trace: &mut Trace, queries: Var, keys: Var, w: &AttentionVars, mask: &Arc<Mask>) -> Result<Var> {
    let d = trace.shape(queries)[1];
    let heads = w.wq.len();
    if trace.shape(keys)[1] != d || trace.shape(w.wo) != [d, d] {
        return Err(Error::dim("attention", trace.shape(queries), trace.shape(keys)));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = trace.matmul(queries, w.wq[h])?;
        let k = trace.matmul(keys, w.wk[h])?;
        let v = trace.matmul(keys, w.wv[h])?;
        let s = trace.masked_scores(q, k, mask, scale)?;
        let a = trace.masked_softmax(s, mask)?;
        outs.push(trace.matmul(a, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { trace.concat_cols(&outs)? };
    trace.matmul(cat, w.wo)
}

fn self_attention(x: &JointSequence, params: &AttentionParams, mask: &Arc<Mask>) -> Result<Tensor> {
    if params.width() != x.width() {
        return Err(Error::dim("attention", x.x().shape(), params.wo.shape()));
    }
    let mut trace = Trace::new();
    let w = params.to_vars(&mut trace);
    let xv = trace.constant(x.x().clone());
    let out = multi_head(&mut trace, xv, xv, &w, mask)?;
    Ok(trace.value(out).clone())
}

/// Unmasked self-attention over all `T+L` tokens.
pub fn full_attention(x: &JointSequence, params: &AttentionParams) -> Result<Tensor> {
    let n = x.x().rows();
    self_attention(x, params, &Arc::new(Mask::full(n, n)))
}

/// Self-attention restricted by a neighboring mask.
pub fn neighboring_attention(x: &JointSequence, params: &AttentionParams, mask: &AttentionMask) -> Result<Tensor> {
    let n = x.x().rows();
    if mask.mask.rows() != n {
        return Err(Error::dim("neighboring_attention", x.x().shape(), &[mask.mask.rows(), mask.mask.cols()]));
    }
    self_attention(x, params, &mask.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{masked_softmax, matmul};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, l: usize, d: usize) -> JointSequence {
        let n = t + l;
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        JointSequence::new(x, t, l).unwrap()
    }

    #[test]
    fn key_set_examples() {
        assert_eq!(neighbor_key_set(5, 2, 10, 3).unwrap(), vec![3, 4, 5, 6, 7, 10, 11, 12]);
        assert_eq!(neighbor_key_set(0, 2, 10, 3).unwrap(), vec![0, 1, 2, 10, 11, 12]);
        assert_eq!(neighbor_key_set(4, 100, 10, 3).unwrap(), (0..13).collect::<Vec<_>>());
        assert!(matches!(neighbor_key_set(10, 1, 10, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(3, 1, 0);
        for i in 0..3 {
            let seen: Vec<usize> = (0..4).filter(|&j| m.is_visible(i, j)).collect();
            assert_eq!(seen, vec![i, 3]);
        }
        assert!((0..4).all(|j| m.is_visible(3, j)));
        assert!(build_mask(3, 1, 10).mask().visible().iter().all(|&v| v));
        let m = build_mask(5, 2, 1);
        let seen: Vec<usize> = (0..7).filter(|&j| m.is_visible(2, j)).collect();
        assert_eq!(seen, vec![1, 2, 3, 5, 6]);
    }

    #[test]
    fn op_count_examples() {
        assert_eq!(attention_op_count(200, 20, Radius::Full), 48_400);
        assert_eq!(attention_op_count(1, 1, Radius::Window(0)), 4);
        // Enumerate Ω row by row for the closed form.
        let enumerated: u64 = (0..200)
            .map(|i| neighbor_key_set(i, 8, 200, 20).unwrap().len() as u64)
            .sum::<u64>()
            + 20 * 220;
        assert_eq!(attention_op_count(200, 20, Radius::Window(8)), enumerated);
        assert_eq!(neighbor_key_set(100, 8, 200, 20).unwrap().len(), 37);
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = AttentionParams::random(4, 2, &mut rng).unwrap();
        // T+L must be ≥ 2 for a joint sequence; test the single-key path via
        // multi_head directly.
        let x = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut tr = Trace::new();
        let w = params.to_vars(&mut tr);
        let xv = tr.constant(x.clone());
        let out = multi_head(&mut tr, xv, xv, &w, &Arc::new(Mask::full(1, 1))).unwrap();
        let heads: Vec<Tensor> = params.wv.iter().map(|wv| matmul(&x, wv).unwrap()).collect();
        let cat = Tensor::matrix(1, 4, heads.iter().flat_map(|h| h.data().to_vec()).collect()).unwrap();
        let expected = matmul(&cat, &params.wo).unwrap();
        for (a, b) in tr.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = AttentionParams::random(4, 2, &mut rng).unwrap();
        let row = vec![0.5, -1.0, 0.25, 2.0];
        let x = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let out = full_attention(&JointSequence::new(x, 1, 1).unwrap(), &params).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn covering_radius_is_bitwise_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_seq(&mut rng, 4, 2, 8);
        let params = AttentionParams::random(8, 4, &mut rng).unwrap();
        let full = full_attention(&x, &params).unwrap();
        let na = neighboring_attention(&x, &params, &build_mask(4, 2, 4)).unwrap();
        assert_eq!(full.data(), na.data());
        let na = neighboring_attention(&x, &params, &build_mask(4, 2, 3)).unwrap();
        assert_eq!(full.data(), na.data());
    }

    #[test]
    fn zero_radius_ignores_other_visual_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_seq(&mut rng, 6, 2, 8);
        let params = AttentionParams::random(8, 2, &mut rng).unwrap();
        let mask = build_mask(6, 2, 0);
        let base = neighboring_attention(&x, &params, &mask).unwrap();
        let mut data = x.x().data().to_vec();
        for v in &mut data[8 * 4..8 * 5] {
            *v += 3.0;
        }
        let perturbed = JointSequence::new(Tensor::matrix(8, 8, data).unwrap(), 6, 2).unwrap();
        let out = neighboring_attention(&perturbed, &params, &mask).unwrap();
        for i in (0..6).filter(|&i| i != 4) {
            assert_eq!(base.row(i), out.row(i));
        }
    }

    #[test]
    fn visual_rows_match_per_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, l, d, heads, r) = (8, 2, 8, 2, 2);
        let x = random_seq(&mut rng, t, l, d);
        let params = AttentionParams::random(d, heads, &mut rng).unwrap();
        let out = neighboring_attention(&x, &params, &build_mask(t, l, r)).unwrap();
        let dh = d / heads;
        let proj = |w: &Tensor, row: &[f64]| -> Vec<f64> {
            (0..dh).map(|c| (0..d).map(|k| row[k] * w.at(k, c)).sum()).collect()
        };
        for i in 0..t {
            let keys = neighbor_key_set(i, r, t, l).unwrap();
            let mut cat = Vec::new();
            for h in 0..heads {
                let q = proj(&params.wq[h], x.x().row(i));
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let k = proj(&params.wk[h], x.x().row(j));
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                let mut o = vec![0.0; dh];
                for (&j, s) in keys.iter().zip(&scores) {
                    let v = proj(&params.wv[h], x.x().row(j));
                    let a = (s - max).exp() / z;
                    for c in 0..dh {
                        o[c] += a * v[c];
                    }
                }
                cat.extend(o);
            }
            for c in 0..d {
                let expected: f64 = (0..d).map(|k| cat[k] * params.wo.at(k, c)).sum();
                assert!((out.at(i, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_under_mask() {
        let m = build_mask(7, 3, 1);
        let s = Tensor::zeros(&[10, 10]);
        let p = masked_softmax(&s, m.mask()).unwrap();
        for i in 0..10 {
            let row = p.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..10 {
                if !m.is_visible(i, j) {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn op_count_never_exceeds_full(t in 1usize..80, l in 1usize..12, r in 0usize..90) {
            let na = attention_op_count(t, l, Radius::Window(r));
            let full = attention_op_count(t, l, Radius::Full);
            prop_assert!(na <= full);
            prop_assert_eq!(na == full, r + 1 >= t);
            prop_assert_eq!(na, build_mask(t, l, r).mask().visible_count() as u64);
        }

        #[test]
        fn mask_rows_follow_key_sets(t in 1usize..20, l in 1usize..5, r in 0usize..25) {
            let m = build_mask(t, l, r);
            prop_assert_eq!(&m, &build_mask(t, l, r));
            for i in 0..t {
                let keys = neighbor_key_set(i, r, t, l).unwrap();
                prop_assert_eq!(m.mask().row_keys(i), keys.as_slice());
            }
            for i in t..t + l {
                prop_assert_eq!(m.mask().row_keys(i).len(), t + l);
            }
        }
    }
}
