//! Dense tensors, reverse-mode differentiation, AdamW and a finite-difference
//! gradient oracle.

pub mod gradcheck;
mod lstm;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_with_fault, finite_difference_check, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::{checksum, named_params, param_distance, pull_grads, Checkpoint, Parameterized};
pub use tape::{log_sum_exp, BackwardFault, Tape, Var, NORM_EPS};
pub use tensor::{ParamId, Tensor};

/// Squared distance between the ℓ2-normalized `y` and `z`, equal to
/// `2 − 2·cos(y, z)`. `z` is detached, so gradient reaches `y` only.
pub fn normalized_mse(tape: &mut Tape, y: Var, z: Var) -> crate::Result<Var> {
    let z = tape.detach(z);
    let yn = tape.l2_normalize(y)?;
    let zn = tape.l2_normalize(z)?;
    let d = tape.sub(yn, zn)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Mean over dimensions of the across-batch population standard deviation
/// of ℓ2-normalized rows. Zero means every row points the same way.
pub fn collapse_diagnostic(rows: &[Vec<f64>]) -> crate::Result<f64> {
    if rows.len() < 2 {
        return Err(crate::Error::BatchTooSmall(rows.len()));
    }
    let dim = rows[0].len();
    let mut normed = Vec::with_capacity(rows.len());
    for r in rows {
        if r.len() != dim {
            return Err(crate::Error::ShapeMismatch {
                op: "collapse_diagnostic",
                left: vec![dim],
                right: vec![r.len()],
            });
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= NORM_EPS {
            return Err(crate::Error::ZeroNorm { norm: n });
        }
        normed.push(r.iter().map(|x| x / n).collect::<Vec<_>>());
    }
    let count = normed.len() as f64;
    let mut total = 0.0;
    for j in 0..dim {
        let mean = normed.iter().map(|r| r[j]).sum::<f64>() / count;
        let var = normed.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / count;
        total += var.sqrt();
    }
    Ok(total / dim as f64)
}
