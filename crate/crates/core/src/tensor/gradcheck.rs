use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

/// A scalar-valued function of the parameters of a [`ParamStore`], buildable
/// at any precision.
pub trait ScalarGraph {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, params: &Bound) -> Var;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter (all of them if the tensor is smaller).
    pub samples_per_param: usize,
    /// Magnitude below which both gradients count as zero; keeps the relative
    /// error defined for coordinates with no influence on the loss.
    pub zero_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            samples_per_param: 16,
            zero_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±h evaluations took different ReLU/pooling branches,
    /// where a central difference does not estimate the derivative.
    pub skipped_at_kinks: usize,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

fn evaluate<F: ScalarGraph>(f: &F, store: &ParamStore, values: &[Tensor<f64>]) -> (f64, u64) {
    let mut g = Graph::<f64>::new();
    let bound = store.bind_values(&mut g, values);
    let out = f.build(&mut g, &bound);
    (g.value(out).item(), g.branch_fingerprint())
}

/// Compare analytic gradients against central differences, all in `f64`.
pub fn grad_check<F: ScalarGraph>(f: &F, store: &ParamStore, cfg: &GradCheckConfig) -> GradCheckReport {
    let base: Vec<Tensor<f64>> = store.iter().map(|p| p.value.cast()).collect();
    let mut g = Graph::<f64>::new();
    let bound = store.bind_values(&mut g, &base);
    let out = f.build(&mut g, &bound);
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut values = base.clone();
    for (pi, p) in store.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(bound.vars()[pi]) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; p.value.len()],
        };
        let n = p.value.len();
        let coords = sample(&mut rng, n, cfg.samples_per_param.min(n)).into_vec();
        let mut worst_here = 0.0f64;
        for idx in coords {
            let orig = values[pi].data()[idx];
            values[pi].data_mut()[idx] = orig + cfg.h;
            let (fp, kp) = evaluate(f, store, &values);
            values[pi].data_mut()[idx] = orig - cfg.h;
            let (fm, km) = evaluate(f, store, &values);
            values[pi].data_mut()[idx] = orig;
            if kp != km {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < cfg.zero_floor {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            report.checked += 1;
            if rel > worst_here {
                worst_here = rel;
            }
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p.name.clone(), idx));
            }
        }
        report.per_param.push((p.name.clone(), worst_here));
    }
    report
}
