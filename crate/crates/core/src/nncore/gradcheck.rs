//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Result of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub eps: f64,
    /// Per parameter: `None` when frozen (no analytic gradient produced),
    /// otherwise the elementwise max relative error.
    pub per_param: Vec<(String, Option<f64>)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().filter_map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn error_for(&self, name: &str) -> Option<Option<f64>> {
        self.per_param.iter().find(|(n, _)| n == name).map(|(_, e)| *e)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .filter_map(|(n, e)| e.map(|e| (n.as_str(), e)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Which elements of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many elements per parameter, chosen with a fixed seed.
    Sample(usize),
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic parameter gradients of the scalar produced by `fragment`
/// against central differences with step `eps`.
///
/// `fragment` builds the computation on a fresh graph and returns the loss node.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, coverage: Coverage, fragment: F) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let v = fragment(&mut g)?;
        let loss = scalar(&g, v)?;
        Ok(loss)
    };

    let grads = {
        let mut g = Graph::new(store);
        let root = fragment(&mut g)?;
        scalar(&g, root)?;
        g.backward(root).into_params()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut per_param = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if !store.is_trainable(id) {
            per_param.push((name, None));
            continue;
        }
        let n = store.tensor(id).len();
        let analytic = grads.get(&id);
        let elems: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample(k) if k >= n => (0..n).collect(),
            Coverage::Sample(k) => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
        };
        let mut worst: f64 = 0.0;
        for i in elems {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_error(a, numeric));
        }
        per_param.push((name, Some(worst)));
    }
    Ok(GradReport { eps, per_param })
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check fragment must produce a scalar, got {:?}",
            t.shape()
        )));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss is {x}")));
    }
    Ok(x)
}
