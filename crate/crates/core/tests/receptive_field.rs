use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tvg_core::model::{Model, ModelConfig};
use tvg_core::numerics::{Tensor, Trace};

const T: usize = 20;
const L: usize = 4;
const D: usize = 8;

fn model(radii: Vec<usize>) -> Model {
    Model::new(
        ModelConfig {
            feature_dim: 4,
            d_model: D,
            heads: 2,
            enc_layers: 1,
            ffn_dim: 16,
            cross_layers: radii.len(),
            anchor_scales: vec![2, 4],
            window_radii: Some(radii),
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap()
}

fn random(rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, D, (0..rows * D).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Top-layer visual row `i` with and without a perturbation of frame `j`.
fn row_change(m: &Model, i: usize, j: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random(T, &mut rng);
    let q = random(L, &mut rng);
    let mut moved = v.data().to_vec();
    for x in &mut moved[j * D..(j + 1) * D] {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += 5.0 * z;
    }
    let moved = Tensor::matrix(T, D, moved).unwrap();
    let radii = m.schedule().radii.clone();
    let top_row = |v: &Tensor| {
        let mut tr = Trace::new();
        let p = m.params().bind_frozen(&mut tr);
        let (v, q) = (tr.constant(v.clone()), tr.constant(q.clone()));
        let outs = m.cross_modal_forward(&mut tr, &p, v, q, &radii).unwrap();
        tr.value(outs.last().unwrap().v).data()[i * D..(i + 1) * D].to_vec()
    };
    let (a, b) = (top_row(&v), top_row(&moved));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_layer_sees_only_its_window() {
    let m = model(vec![2]);
    for (i, j) in [(10, 13), (10, 0), (0, 3), (19, 5)] {
        assert!(row_change(&m, i, j) < 1e-12, "frame {j} reached row {i}");
    }
    assert!(row_change(&m, 10, 12) > 1e-6);
}

// Text rows attend to every frame and feed back into visual rows at the next
// layer, so stacking widens the receptive field past the sum of the radii.
#[test]
fn stacked_layers_leak_through_text() {
    let m = model(vec![1, 1]);
    assert!(row_change(&m, 10, 19) > 1e-9);
}
