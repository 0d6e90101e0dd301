use serde::Serialize;

use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entry(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, coordinate by coordinate.
///
/// `f` receives a fresh graph and one parameter leaf per entry of
/// `params`, in order, and returns the scalar output node.
pub fn grad_check<F>(params: &[(String, Tensor)], eps: f64, tolerance: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::config(format!(
            "grad_check eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::with_checking(true);
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(theta) = {base}")));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&tensors)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    drop(g);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_checking(true);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: perturbed f = {v}")));
        }
        Ok(v)
    };

    let mut work = tensors.clone();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(analytic[pi].data()[j], numeric);
            if rel > worst {
                worst = rel;
                worst_index = j;
            }
        }
        let norm = analytic[pi].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        entries.push(GradEntry {
            name: name.clone(),
            coords: t.len(),
            max_rel_error: worst,
            worst_index,
            analytic_norm: norm,
        });
    }
    let passed = entries.iter().all(|e| e.max_rel_error < tolerance);
    Ok(GradReport {
        entries,
        tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
        ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }

    /// Reduces any node to a scalar through fixed random weights so that
    /// every output coordinate influences the checked value.
    fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
        let n = g.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weighted = g.mask(x, Arc::new(w))?;
        g.sum(weighted)
    }

    #[test]
    fn quadratic() {
        let params = named(vec![Tensor::scalar(3.0)]);
        let mut g = Graph::new();
        let w = g.param(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let sq = g.matmul(w, w).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);

        let params = vec![("w".to_string(), params[0].1.reshape(&[1, 1]).unwrap())];
        let report = grad_check(&params, 1e-5, 1e-6, |g, v| g.matmul(v[0], v[0])).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn rejects_eps_outside_range() {
        let params = named(vec![Tensor::ones(&[1, 1])]);
        assert!(grad_check(&params, 1e-3, 1e-6, |g, v| g.matmul(v[0], v[0])).is_err());
    }

    #[test]
    fn reports_non_finite() {
        let params = named(vec![Tensor::ones(&[1, 1])]);
        let err = grad_check(&params, 1e-5, 1e-6, |g, v| {
            let big = g.scale(v[0], 1e200)?;
            g.matmul(big, big)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn matmul_all_transpose_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { random(&[4, 3], &mut rng) } else { random(&[3, 4], &mut rng) };
            let b = if tb { random(&[5, 4], &mut rng) } else { random(&[4, 5], &mut rng) };
            let report = grad_check(&named(vec![a, b]), 1e-6, 1e-5, |g, v| {
                let c = g.matmul_ex(v[0], ta, v[1], tb)?;
                project(g, c, 9)
            })
            .unwrap();
            assert!(report.passed, "ta={ta} tb={tb}: {report:?}");
        }
    }

    #[test]
    fn elementwise_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 6], &mut rng);
        let y = random(&[4, 6], &mut rng);
        let bias = random(&[6], &mut rng);
        let report = grad_check(&named(vec![x, y, bias]), 1e-6, 1e-5, |g, v| {
            let s = g.add(v[0], v[1])?;
            let s = g.add_row(s, v[2])?;
            let s = g.scale(s, -1.7)?;
            let s = g.gelu(s)?;
            let s = g.softmax_rows(s)?;
            project(g, s, 3)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 7], &mut rng);
        let gamma = random(&[7], &mut rng);
        let beta = random(&[7], &mut rng);
        let report = grad_check(&named(vec![x, gamma, beta]), 1e-6, 1e-5, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 4)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 6, 2], &mut rng);
        let k = random(&[3, 2, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let report = grad_check(&named(vec![x, k, b]), 1e-6, 1e-5, |g, v| {
            let y = g.conv1d_valid(v[0], v[1], v[2])?;
            let y = g.mean_axis1(y)?;
            project(g, y, 5)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gather_slice_concat_mask_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = random(&[4, 6], &mut rng);
        let x = random(&[5, 6], &mut rng);
        let mask = Arc::new((0..30).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect::<Vec<_>>());
        let report = grad_check(&named(vec![table, x]), 1e-6, 1e-5, move |g, v| {
            let rows = g.gather_rows(v[0], &[3, 0, 3, 1, 2])?;
            let s = g.add(rows, v[1])?;
            let left = g.slice_cols(s, 0, 2)?;
            let right = g.slice_cols(s, 2, 4)?;
            let cat = g.concat_cols(&[right, left])?;
            let m = g.mask(cat, mask.clone())?;
            project(g, m, 6)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gather_rejects_bad_index() {
        let mut g = Graph::new();
        let t = g.param(Tensor::ones(&[2, 3]));
        assert!(matches!(g.gather_rows(t, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&[8, 8], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let v = g.param(a.clone());
            let s = g.matmul_nt(v, v).unwrap();
            let s = g.softmax_rows(s).unwrap();
            let o = project(&mut g, s, 1).unwrap();
            g.backward(o).unwrap().get(v).unwrap().clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
