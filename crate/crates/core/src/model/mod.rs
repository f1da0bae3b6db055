//! Single-modal encoders, the cross-modal alignment stack with per-layer
//! window radii, and the shared integration block.

pub mod checkpoint;
mod config;
pub mod layers;
mod params;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{derive_schedule, ModelConfig, RadiusSchedule, ScheduleType, DEFAULT_FIXED_RADIUS};
pub use params::{ParamId, ParamStore};

use crate::attention::{build_mask, multi_head};
use crate::error::{Error, Result};
use crate::numerics::{Mask, Trace, Var};
use layers::{AttentionIds, LinearIds, MlpIds, TransformerIds};

/// Parameter handles of the detection heads, shared across layers.
#[derive(Clone, Debug)]
pub struct HeadIds {
    pub cls1: MlpIds,
    pub reg1: MlpIds,
    pub cls2: MlpIds,
    pub reg2: MlpIds,
}

#[derive(Clone, Debug)]
struct Layout {
    video_in: LinearIds,
    video_pos: ParamId,
    video_layers: Vec<TransformerIds>,
    token_emb: ParamId,
    text_pos: ParamId,
    text_layers: Vec<TransformerIds>,
    cross: Vec<TransformerIds>,
    integration: AttentionIds,
    heads: HeadIds,
}

/// Output of one cross-modal layer, before integration.
#[derive(Clone, Copy, Debug)]
pub struct CrossLayer {
    pub v: Var,
    pub q: Var,
}

/// Everything layer `j` hands to the detection heads.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutputs {
    /// `T×D` visual embeddings.
    pub v: Var,
    /// `L×D` text embeddings.
    pub q: Var,
    /// `T×D` text-attended visual embeddings.
    pub v_tilde: Var,
    /// `T×2D` concatenation `[Ṽ, V]`.
    pub v_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    schedule: RadiusSchedule,
    store: ParamStore,
    layout: Layout,
}

impl Model {
    /// Builds and initializes a model; initialization depends only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let schedule = derive_schedule(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let d = c.d_model;

        let video_in = LinearIds::register(&mut store, "video.input", c.feature_dim, d, &mut rng);
        let video_pos = store.add("video.pos", params::normal(&mut rng, &[c.max_t, d], 0.02));
        let video_layers = (0..c.enc_layers)
            .map(|i| TransformerIds::register(&mut store, &format!("video.layer{i}"), d, c.heads, c.ffn_dim, &mut rng))
            .collect();
        let token_emb = store.add("text.embed", params::normal(&mut rng, &[c.vocab_size, d], 0.02));
        let text_pos = store.add("text.pos", params::normal(&mut rng, &[c.max_l, d], 0.02));
        let text_layers = (0..c.enc_layers)
            .map(|i| TransformerIds::register(&mut store, &format!("text.layer{i}"), d, c.heads, c.ffn_dim, &mut rng))
            .collect();
        let cross = (0..c.cross_layers)
            .map(|i| TransformerIds::register(&mut store, &format!("cross.layer{i}"), d, c.heads, c.ffn_dim, &mut rng))
            .collect();
        let integration = AttentionIds::register(&mut store, "integration", d, c.heads, &mut rng);
        let k = schedule.max_scales_per_layer();
        let heads = HeadIds {
            cls1: MlpIds::register(&mut store, "stage1.cls", (2 * d, d, k), &mut rng),
            reg1: MlpIds::register(&mut store, "stage1.reg", (2 * d, d, 2 * k), &mut rng),
            cls2: MlpIds::register(&mut store, "stage2.cls", (6 * d, d, 1), &mut rng),
            reg2: MlpIds::register(&mut store, "stage2.reg", (6 * d, d, 2), &mut rng),
        };

        Ok(Self {
            config,
            schedule,
            store,
            layout: Layout {
                video_in,
                video_pos,
                video_layers,
                token_emb,
                text_pos,
                text_layers,
                cross,
                integration,
                heads,
            },
        })
    }

    /// Rebuilds the configured model and loads parameters from a checkpoint.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let named = checkpoint::read_checkpoint(path)?;
        model.store.load_from(named)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &RadiusSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head_ids(&self) -> &HeadIds {
        &self.layout.heads
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_params(&mut self, prefix: &str) {
        for (name, t) in self.store.names().to_vec().iter().zip(self.store.tensors_mut()) {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Projects `T×F` features to `D`, adds positions, then runs the video encoder.
    pub fn encode_video(&self, trace: &mut Trace, p: &[Var], features: Var) -> Result<Var> {
        let shape = trace.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::dim("encode_video", &shape, &[0, self.config.feature_dim]));
        }
        let t = shape[0];
        if t > self.config.max_t {
            return Err(Error::Capacity {
                len: t,
                max: self.config.max_t,
            });
        }
        let x = self.layout.video_in.apply(trace, p, features)?;
        let pos = trace.slice_rows(p[self.layout.video_pos], 0, t)?;
        let x = trace.add(x, pos)?;
        let mask = Arc::new(Mask::full(t, t));
        self.layout
            .video_layers
            .iter()
            .try_fold(x, |x, layer| layer.apply(trace, p, x, &mask, self.config.ln_eps))
    }

    /// Embeds token ids, adds positions, then runs the text encoder.
    pub fn encode_text(&self, trace: &mut Trace, p: &[Var], token_ids: &[usize]) -> Result<Var> {
        let l = token_ids.len();
        if l == 0 {
            return Err(Error::Contract("query needs at least one token".into()));
        }
        if l > self.config.max_l {
            return Err(Error::Capacity {
                len: l,
                max: self.config.max_l,
            });
        }
        if let Some(&id) = token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let emb = trace.gather_rows(p[self.layout.token_emb], token_ids)?;
        let pos = trace.slice_rows(p[self.layout.text_pos], 0, l)?;
        let x = trace.add(emb, pos)?;
        let mask = Arc::new(Mask::full(l, l));
        self.layout
            .text_layers
            .iter()
            .try_fold(x, |x, layer| layer.apply(trace, p, x, &mask, self.config.ln_eps))
    }

    /// Runs the M cross-modal layers; layer `j` uses neighboring attention
    /// with radius `radii[j]` over the joint sequence `[V; Q]`.
    pub fn cross_modal_forward(
        &self,
        trace: &mut Trace,
        p: &[Var],
        v: Var,
        q: Var,
        radii: &[usize],
    ) -> Result<Vec<CrossLayer>> {
        if radii.len() != self.layout.cross.len() {
            return Err(Error::Config(format!(
                "{} radii for {} cross-modal layers",
                radii.len(),
                self.layout.cross.len()
            )));
        }
        let t = trace.shape(v)[0];
        let l = trace.shape(q)[0];
        let mut x = trace.concat_rows(&[v, q])?;
        let mut outs = Vec::with_capacity(radii.len());
        for (layer, &r) in self.layout.cross.iter().zip(radii) {
            let mask = build_mask(t, l, r);
            x = layer.apply(trace, p, x, mask.mask(), self.config.ln_eps)?;
            outs.push(CrossLayer {
                v: trace.slice_rows(x, 0, t)?,
                q: trace.slice_rows(x, t, t + l)?,
            });
        }
        Ok(outs)
    }

    /// Cross-attends `V` (queries) over `Q` (keys/values) with the shared
    /// integration weights and returns `(Ṽ, [Ṽ, V])`.
    pub fn integrate(&self, trace: &mut Trace, p: &[Var], v: Var, q: Var) -> Result<(Var, Var)> {
        let t = trace.shape(v)[0];
        let l = trace.shape(q)[0];
        let mask = Arc::new(Mask::full(t, l));
        let v_tilde = multi_head(trace, v, q, &self.layout.integration.vars(p), &mask)?;
        let v_hat = trace.concat_cols(&[v_tilde, v])?;
        Ok((v_tilde, v_hat))
    }

    /// Encoders, cross-modal stack, and integration for one video/query pair.
    pub fn align(&self, trace: &mut Trace, p: &[Var], features: Var, token_ids: &[usize]) -> Result<Vec<LayerOutputs>> {
        let v = self.encode_video(trace, p, features)?;
        let q = self.encode_text(trace, p, token_ids)?;
        let layers = self.cross_modal_forward(trace, p, v, q, &self.schedule.radii)?;
        layers
            .into_iter()
            .map(|cl| {
                let (v_tilde, v_hat) = self.integrate(trace, p, cl.v, cl.q)?;
                Ok(LayerOutputs {
                    v: cl.v,
                    q: cl.q,
                    v_tilde,
                    v_hat,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::numerics::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            cross_layers: 2,
            ffn_dim: 16,
            anchor_scales: vec![2, 4],
            vocab_size: 10,
            max_t: 16,
            max_l: 6,
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn video_encoding_shape_and_capacity() {
        let model = Model::new(small(), 1).unwrap();
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let x = tr.constant(features(12, 6, 2));
        let v = model.encode_video(&mut tr, &p, x).unwrap();
        assert_eq!(tr.shape(v), &[12, 8]);
        let too_long = tr.constant(features(17, 6, 2));
        assert!(matches!(
            model.encode_video(&mut tr, &p, too_long),
            Err(Error::Capacity { len: 17, max: 16 })
        ));
    }

    #[test]
    fn zero_inputs_stay_finite() {
        let mut model = Model::new(small(), 1).unwrap();
        model.zero_params("video.pos");
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let x = tr.constant(Tensor::zeros(&[5, 6]));
        let v = model.encode_video(&mut tr, &p, x).unwrap();
        assert!(tr.value(v).data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn positions_break_permutation_symmetry() {
        let model = Model::new(small(), 1).unwrap();
        let f = features(6, 6, 3);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| f.row(i).to_vec()).collect();
        rows.swap(0, 5);
        let permuted = Tensor::from_rows(&rows).unwrap();
        let run = |feat: Tensor| {
            let mut tr = Trace::new();
            let p = model.params().bind_frozen(&mut tr);
            let x = tr.constant(feat);
            let v = model.encode_video(&mut tr, &p, x).unwrap();
            tr.value(v).clone()
        };
        let a = run(f);
        let b = run(permuted);
        // Without positions, row 0 of b would equal row 5 of a.
        assert!(a.row(5).iter().zip(b.row(0)).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn text_encoding_contract() {
        let model = Model::new(small(), 1).unwrap();
        let mut tr = Trace::new();
        let p = model.params().bind(&mut tr);
        let q1 = model.encode_text(&mut tr, &p, &[1, 3, 3]).unwrap();
        let q2 = model.encode_text(&mut tr, &p, &[1, 3, 3]).unwrap();
        assert_eq!(tr.shape(q1), &[3, 8]);
        assert_eq!(tr.value(q1), tr.value(q2));
        assert!(matches!(
            model.encode_text(&mut tr, &p, &[1, 10]),
            Err(Error::Vocabulary { id: 10, vocab: 10 })
        ));

        let s = tr.sum(q1);
        tr.backward(s).unwrap();
        let emb = model.params().find("text.embed").unwrap();
        let g = tr.grad(p[emb]).unwrap();
        for tok in 0..10 {
            let row = &g[tok * 8..(tok + 1) * 8];
            let touched = row.iter().any(|&v| v != 0.0);
            assert_eq!(touched, tok == 1 || tok == 3, "token {tok}");
        }
    }

    #[test]
    fn layers_preserve_lengths_and_integrate_widens() {
        let model = Model::new(small(), 4).unwrap();
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let x = tr.constant(features(10, 6, 5));
        let outs = model.align(&mut tr, &p, x, &[2, 4, 6]).unwrap();
        assert_eq!(outs.len(), 2);
        for o in outs {
            assert_eq!(tr.shape(o.v), &[10, 8]);
            assert_eq!(tr.shape(o.q), &[3, 8]);
            assert_eq!(tr.shape(o.v_tilde), &[10, 8]);
            assert_eq!(tr.shape(o.v_hat), &[10, 16]);
        }
    }

    #[test]
    fn single_text_token_integration_rows_equal() {
        let model = Model::new(small(), 6).unwrap();
        let mut tr = Trace::new();
        let p = model.params().bind_frozen(&mut tr);
        let v = tr.constant(features(5, 8, 7));
        let q = tr.constant(features(1, 8, 8));
        let (vt, _) = model.integrate(&mut tr, &p, v, q).unwrap();
        let out = tr.value(vt);
        for i in 1..5 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::new(small(), 11).unwrap();
        let b = Model::new(small(), 11).unwrap();
        let c = Model::new(small(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
