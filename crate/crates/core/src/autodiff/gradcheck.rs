use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max (|analytic - numeric| - noise) / max(|analytic|, |numeric|, 1e-8)`,
    /// where `noise` is the roundoff bound of the central difference (zero
    /// unless [`GradCheck::roundoff_ulps`] is set).
    pub max_rel_error: f64,
    /// `(tensor, element)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
    /// Coordinates whose numeric gradient is within the roundoff bound, i.e.
    /// indistinguishable from zero at this step.
    pub below_roundoff: usize,
}

/// Finite-difference gradient checker.
///
/// By default every coordinate of every parameter tensor is perturbed; with
/// [`GradCheck::max_coords`] a seeded subset per tensor is used instead.
#[derive(Clone, Debug)]
pub struct GradCheck {
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
    roundoff_ulps: f64,
}

impl GradCheck {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            max_coords: None,
            seed: 0,
            roundoff_ulps: 0.0,
        }
    }

    pub fn max_coords(mut self, limit: usize) -> Self {
        self.max_coords = Some(limit);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Allows each loss evaluation to be off by `ulps` units in the last
    /// place of `max(|f|, 1)`; the resulting error `ulps * ulp / h` of the central
    /// difference is not counted against the analytic gradient. Without it,
    /// coordinates whose true gradient is exactly zero report pure roundoff.
    pub fn roundoff_ulps(mut self, ulps: f64) -> Self {
        self.roundoff_ulps = ulps;
        self
    }

    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidInput(format!("finite-difference step {}", self.step)));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check base value",
                tensor: 0,
                index: 0,
            });
        }
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        drop(g);

        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.scalar(loss))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coordinates_checked: 0,
            below_roundoff: 0,
        };
        let mut work: Vec<Tensor> = params.to_vec();
        for (t, param) in params.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < param.len() => {
                    let mut c = sample(&mut rng, param.len(), k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..param.len()).collect(),
            };
            for idx in coords {
                let orig = param.data()[idx];
                work[t].data_mut()[idx] = orig + self.step;
                let plus = eval(&work)?;
                work[t].data_mut()[idx] = orig - self.step;
                let minus = eval(&work)?;
                work[t].data_mut()[idx] = orig;
                if !(plus.is_finite() && minus.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "grad_check perturbed value",
                        tensor: t,
                        index: idx,
                    });
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[t][idx];
                // Losses built from centered O(1) terms can be near zero
                // while their roundoff is not.
                let ulp = plus.abs().max(minus.abs()).max(1.0) * f64::EPSILON;
                let noise = self.roundoff_ulps * ulp / self.step;
                let rel = ((a - numeric).abs() - noise).max(0.0) / a.abs().max(numeric.abs()).max(1e-8);
                report.coordinates_checked += 1;
                if numeric.abs() <= noise {
                    report.below_roundoff += 1;
                }
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((t, idx));
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between the analytic gradient of `f` and central
/// differences with step `h`, over every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::new(h).run(f, params).map(|r| r.max_rel_error)
}
