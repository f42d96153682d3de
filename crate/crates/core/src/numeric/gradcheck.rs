//! Central-difference verification of tape gradients.

use super::params::{named_params, Parameterized};
use super::tape::{BackwardFault, Tape, Var};
use crate::error::{Error, Result};

/// Result of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − cd| / max(|analytic|, |cd|, 1e-8)` over all checked entries.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients of `f` against central differences with step `h`
/// for every trainable parameter entry of `model`.
///
/// `f` builds the scalar objective on the supplied tape; it must bind
/// parameters through [`Tape::param`].
pub fn finite_difference_check<M, F>(model: &mut M, h: f64, f: F) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut Tape, &M) -> Result<Var>,
{
    check_with_fault(model, h, None, f)
}

/// As [`finite_difference_check`], but the analytic pass runs on a tape with
/// an injected backward fault.
pub fn check_with_fault<M, F>(
    model: &mut M,
    h: f64,
    fault: Option<BackwardFault>,
    mut f: F,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut Tape, &M) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidStep(h));
    }
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let loss = f(&mut tape, model)?;
    tape.backward(loss)?;
    let base = tape.scalar(loss);

    let analytic: Vec<(String, Vec<f64>)> = named_params(model, "")
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, t)| {
            let g = tape
                .param_grad(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            (name, g)
        })
        .collect();
    drop(tape);

    let again = evaluate(model, &mut f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, grad) in &analytic {
        for (idx, &a) in grad.iter().enumerate() {
            let orig = nudge(model, name, idx, None);
            nudge(model, name, idx, Some(orig + h));
            let plus = evaluate(model, &mut f)?;
            nudge(model, name, idx, Some(orig - h));
            let minus = evaluate(model, &mut f)?;
            nudge(model, name, idx, Some(orig));
            let cd = (plus - minus) / (2.0 * h);
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

fn evaluate<M, F>(model: &M, f: &mut F) -> Result<f64>
where
    M: Parameterized,
    F: FnMut(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, model)?;
    Ok(tape.scalar(loss))
}

/// Reads entry `idx` of parameter `name`, optionally overwriting it.
fn nudge<M: Parameterized>(model: &mut M, name: &str, idx: usize, set: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    model.visit_mut("", &mut |n, t| {
        if n == name {
            old = t.data()[idx];
            if let Some(v) = set {
                t.data_mut()[idx] = v;
            }
        }
    });
    old
}
