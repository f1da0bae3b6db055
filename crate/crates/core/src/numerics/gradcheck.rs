use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, Trace, Var};
use crate::error::{Error, Result};

/// Coordinates to probe in [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    Sample { count: usize, seed: u64 },
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let mut trace = Trace::new();
    let vars: Vec<Var> = params.iter().map(|p| trace.constant(p.clone())).collect();
    let out = f(&mut trace, &vars)?;
    let v = trace.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// One probed coordinate: flat index, analytic and central-difference slopes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradProbe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|g_analytic − g_fd| / max(1e-8, |g_analytic| + |g_fd|)`.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs()).max(1e-8)
    }
}

/// Reverse-mode gradients of `f` next to five-point central differences at
/// `coords`, indexed over the concatenation of all parameters. Truncation
/// error is O(step⁴), so steps around 1e-3 keep roundoff small.
pub fn finite_diff_probe<F>(f: F, params: &[Tensor], step: f64, coords: Coords) -> Result<Vec<GradProbe>>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract("finite-difference step must be > 0".into()));
    }
    let mut trace = Trace::new();
    let vars: Vec<Var> = params.iter().map(|p| trace.param(p.clone())).collect();
    let out = f(&mut trace, &vars)?;
    let v = trace.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    trace.backward(out)?;

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.numel();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let picks: Vec<usize> = match coords {
        Coords::All => (0..total).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, total, count.min(total)).into_vec();
            picked.sort_unstable();
            picked
        }
    };

    let mut work = params.to_vec();
    picks
        .into_iter()
        .map(|flat| {
            let p = offsets.partition_point(|&o| o <= flat) - 1;
            let c = flat - offsets[p];
            let analytic = trace.grad(vars[p]).expect("param leaf")[c];
            let orig = work[p].data()[c];
            let mut at = |k: f64| {
                work[p].data_mut()[c] = orig + k * step;
                evaluate(&f, &work)
            };
            let (u2, u1, d1, d2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            work[p].data_mut()[c] = orig;
            Ok(GradProbe {
                index: flat,
                analytic,
                numeric: (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * step),
            })
        })
        .collect()
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the maximum of [`GradProbe::relative_error`] over probed
/// coordinates.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let probes = finite_diff_probe(f, params, step, coords)?;
    Ok(probes.iter().map(GradProbe::relative_error).fold(0.0, f64::max))
}
