//! Finite-difference verification of tape gradients.
//!
//! The harness rebuilds the forward graph from scratch for every probe, so it
//! exercises exactly the code path training uses. Central differences with a
//! step of `eps` give truncation error `O(eps^2)`; with `f64` values of order
//! one and `eps = 1e-5`, agreement to a relative error well below `1e-4` is
//! expected everywhere the loss is differentiable.

use crate::tape::{Tape, TapeError, VarId};
use crate::tensor::Tensor;

/// Outcome of a gradient check over a set of named parameters.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over every checked coordinate.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the largest error occurred.
    pub worst_param: String,
    pub worst_index: usize,
    /// Analytic and finite-difference gradients at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_fd: f64,
    /// Total number of coordinates probed.
    pub checked: usize,
}

fn eval<F>(tensors: &[Tensor], build: &mut F) -> Result<f64, TapeError>
where
    F: FnMut(&mut Tape, &[VarId]) -> Result<VarId, TapeError>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let root = build(&mut tape, &ids)?;
    let v = tape.values(root);
    if v.len() != 1 {
        return Err(TapeError::NonScalarRoot {
            shape: tape.shape(root).to_vec(),
        });
    }
    Ok(v[0])
}

/// Compares tape gradients of a scalar loss against central differences.
///
/// `build` must construct the loss from the supplied leaf ids (one per entry
/// of `params`, in order) and be a pure function of the leaf values. Every
/// coordinate of every parameter is probed.
pub fn check_gradients<F>(
    params: &[(&str, Tensor)],
    eps: f64,
    mut build: F,
) -> Result<FdReport, TapeError>
where
    F: FnMut(&mut Tape, &[VarId]) -> Result<VarId, TapeError>,
{
    let mut tensors: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| t.clone().tracked())
        .collect();

    let mut tape = Tape::new();
    let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let root = build(&mut tape, &ids)?;
    let loss_scale = tape.values(root)[0].abs();
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&tensors)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        checked: 0,
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        for j in 0..tensors[pi].numel() {
            let orig = tensors[pi].values[j];
            tensors[pi].values[j] = orig + eps;
            let plus = eval(&tensors, &mut build)?;
            tensors[pi].values[j] = orig - eps;
            let minus = eval(&tensors, &mut build)?;
            tensors[pi].values[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let g = analytic[pi][j];
            // Denominator floor calibrated to finite-difference roundoff:
            // the central difference of a loss of magnitude L carries
            // absolute noise ~ L·u/eps (u = f64 epsilon), so coordinates
            // whose gradients sit below L·1e-5 are held to the equivalent
            // absolute tolerance instead of a meaningless relative one.
            let floor = 1e-6_f64.max((1.0 + loss_scale) * 1e-5);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = j;
                report.worst_analytic = g;
                report.worst_fd = fd;
            }
        }
    }
    Ok(report)
}
