use super::{SeqTensor, Tape, Var};
use crate::error::TensorError;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Denominator floor of the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} (tol {:.1e}) over {} params: {}",
            self.max_rel_err,
            self.tolerance,
            self.params.len(),
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `f` builds a scalar loss from leaves bound to `params` (in order). When
/// `max_entries` is set, at most that many entries per parameter are probed,
/// chosen with a fixed seed.
pub fn finite_diff_check<E, F>(
    f: F,
    params: &[SeqTensor],
    eps: f64,
    tolerance: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[SeqTensor], grad: bool| -> Result<(f64, Vec<Option<SeqTensor>>), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|p| tape.leaf(p.clone(), grad))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        if !grad {
            return Ok((value, vec![]));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v)).collect()))
    };

    let (_, analytic) = eval(params, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_6164);
    let mut values = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let entries: Vec<usize> = match max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = analytic[pi].clone().unwrap_or_else(|| SeqTensor::zeros(param.shape()));
        let mut worst = 0.0f64;
        for &e in &entries {
            let orig = param.data()[e];
            values[pi].data_mut()[e] = orig + eps;
            let (plus, _) = eval(&values, false)?;
            values[pi].data_mut()[e] = orig - eps;
            let (minus, _) = eval(&values, false)?;
            values[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
        report.push(ParamCheck {
            index: pi,
            checked: entries.len(),
            max_rel_err: worst,
        });
    }
    let max_rel_err = report.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_err,
        tolerance,
        pass: max_rel_err < tolerance,
    })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}
