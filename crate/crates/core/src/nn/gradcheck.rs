//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{GradBuffer, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub eps: f64,
    /// Entries checked per tensor; larger tensors are subsampled.
    pub max_entries: usize,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged by absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries: usize::MAX,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    /// Compares the gradient of the scalar built by `f` against central
    /// differences `(f(x + eps) - f(x - eps)) / 2 eps` for every parameter.
    pub fn run<F>(&self, params: &ParamSet<f64>, f: F) -> GradCheckReport
    where
        F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Var,
    {
        let mut g = Graph::new();
        let out = f(&mut g, params);
        assert_eq!(g.value(out).len(), 1, "grad check needs a scalar objective");
        let grads = g.backward(out, Tensor::scalar(1.0));
        let mut buf = GradBuffer::for_params(params);
        g.accumulate_param_grads(&grads, &mut buf);
        drop(g);

        let eval = |p: &ParamSet<f64>| {
            let mut g = Graph::new();
            let out = f(&mut g, p);
            g.value(out).data()[0]
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = params.clone();
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        };
        for id in params.ids() {
            let len = params.get(id).len();
            let entries: Vec<usize> = if len <= self.max_entries {
                (0..len).collect()
            } else {
                let mut v = sample(&mut rng, len, self.max_entries).into_vec();
                v.sort_unstable();
                v
            };
            for e in entries {
                let orig = params.get(id).data()[e];
                work.get_mut(id).data_mut()[e] = orig + self.eps;
                let fp = eval(&work);
                work.get_mut(id).data_mut()[e] = orig - self.eps;
                let fm = eval(&work);
                work.get_mut(id).data_mut()[e] = orig;
                let numeric = (fp - fm) / (2.0 * self.eps);
                let analytic = buf.get(id).map_or(0.0, |t| t.data()[e]);
                let denom = analytic.abs().max(numeric.abs()).max(self.floor);
                let rel = (analytic - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    if rel >= report.max_rel_err {
                        report.worst = Some((params.name(id).to_string(), e, analytic, numeric));
                    }
                }
            }
        }
        report
    }
}

/// Gradient check of a function of plain input tensors; `f` receives one
/// leaf per input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut params = ParamSet::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("input{i}"), t.clone()))
        .collect();
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(&params, |g, p| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
        f(g, &vars)
    })
}
