use std::sync::Arc;

use rand::Rng;

use super::params::{filled, uniform, ParamId, ParamStore};
use crate::attention::{multi_head, AttentionVars};
use crate::error::Result;
use crate::numerics::{Mask, Trace, Var};

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn register(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], init_bound(fan_in)));
        let b = store.add(format!("{name}.b"), filled(&[fan_out], 0.0));
        Self { w, b }
    }

    pub fn apply(&self, trace: &mut Trace, p: &[Var], x: Var) -> Result<Var> {
        let h = trace.matmul(x, p[self.w])?;
        trace.add_row(h, p[self.b])
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct MlpIds {
    pub hidden: LinearIds,
    pub out: LinearIds,
}

impl MlpIds {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let (fan_in, hidden, out) = dims;
        Self {
            hidden: LinearIds::register(store, &format!("{name}.0"), fan_in, hidden, rng),
            out: LinearIds::register(store, &format!("{name}.1"), hidden, out, rng),
        }
    }

    pub fn apply(&self, trace: &mut Trace, p: &[Var], x: Var) -> Result<Var> {
        let h = self.hidden.apply(trace, p, x)?;
        let h = trace.gelu(h);
        self.out.apply(trace, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl AttentionIds {
    pub fn register(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let dh = d / heads;
        let bound = init_bound(d);
        let mut groups: [Vec<ParamId>; 3] = Default::default();
        for (kind, ids) in ["wq", "wk", "wv"].iter().zip(groups.iter_mut()) {
            for h in 0..heads {
                ids.push(store.add(format!("{name}.{kind}.{h}"), uniform(rng, &[d, dh], bound)));
            }
        }
        let [wq, wk, wv] = groups;
        let wo = store.add(format!("{name}.wo"), uniform(rng, &[d, d], bound));
        Self { wq, wk, wv, wo }
    }

    pub fn vars(&self, p: &[Var]) -> AttentionVars {
        AttentionVars {
            wq: self.wq.iter().map(|&i| p[i]).collect(),
            wk: self.wk.iter().map(|&i| p[i]).collect(),
            wv: self.wv.iter().map(|&i| p[i]).collect(),
            wo: p[self.wo],
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn register(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), filled(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), filled(&[d], 0.0)),
        }
    }

    pub fn apply(&self, trace: &mut Trace, p: &[Var], x: Var, eps: f64) -> Result<Var> {
        trace.layer_norm(x, p[self.gain], p[self.bias], eps)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub ffn: MlpIds,
}

impl TransformerIds {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: NormIds::register(store, &format!("{name}.norm1"), d),
            attn: AttentionIds::register(store, &format!("{name}.attn"), d, heads, rng),
            norm2: NormIds::register(store, &format!("{name}.norm2"), d),
            ffn: MlpIds::register(store, &format!("{name}.ffn"), (d, ffn_dim, d), rng),
        }
    }

    pub fn apply(&self, trace: &mut Trace, p: &[Var], x: Var, mask: &Arc<Mask>, eps: f64) -> Result<Var> {
        let h = self.norm1.apply(trace, p, x, eps)?;
        let a = multi_head(trace, h, h, &self.attn.vars(p), mask)?;
        let x = trace.add(x, a)?;
        let h = self.norm2.apply(trace, p, x, eps)?;
        let f = self.ffn.apply(trace, p, h)?;
        trace.add(x, f)
    }
}
