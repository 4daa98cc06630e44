use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Denominator floor: errors are measured against
    /// `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstElement {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Relative error per input, per element.
    pub errors: Vec<Vec<f64>>,
    pub worst: Option<WorstElement>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|w| w.rel_error <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let w = self.worst.as_ref().unwrap();
        Err(Error::GradcheckFailed(format!(
            "input {} element {}: analytic {:.6e} vs numeric {:.6e} (relative error {:.3e} > {:.1e})",
            w.input, w.element, w.analytic, w.numeric, w.rel_error, self.tolerance
        )))
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences, element by element, in 64-bit arithmetic. Elements outside
/// the tolerance are re-estimated with one Richardson extrapolation step.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars = values.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&g, &vars)?;
        g.value(out).item()
    };

    let g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();

    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    let mut worst: Option<WorstElement> = None;
    for (i, input) in inputs.iter().enumerate() {
        let mut errs = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let mut central = |h: f64| -> Result<f64> {
                let orig = input.data()[e];
                work[i].data_mut()[e] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[e] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[e] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let a = analytic[i].data()[e];
            let rel_error = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);

            let coarse = central(opts.step)?;
            let mut numeric = coarse;
            let mut rel = rel_error(coarse);
            if rel > opts.tolerance {
                // Richardson extrapolation cancels the O(h²) truncation term
                numeric = (4.0 * central(opts.step / 2.0)? - coarse) / 3.0;
                rel = rel_error(numeric);
            }
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(WorstElement { input: i, element: e, analytic: a, numeric, rel_error: rel });
            }
            errs.push(rel);
        }
        errors.push(errs);
    }
    Ok(GradcheckReport { errors, worst, tolerance: opts.tolerance })
}
