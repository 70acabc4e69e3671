//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side only ever calls `forward`, so it is independent of the
//! backward kernels it checks. Checks run in `f64`.

use super::array::Array4;
use super::graph::{Graph, Mode};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::SeededRng;

/// Relative error `|a - n| / max(|a|, |n|)` in the Euclidean norm, with an
/// absolute floor for tensors whose gradient is (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    /// `(tensor name, relative error)` for every parameter and input.
    pub errors: Vec<(String, f64)>,
}

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Compares backward against central differences of the scalar objective
/// `sum(output * probe)` where `probe` is a fixed random tensor.
///
/// The same `seed` is used for every forward call, so stochastic nodes draw
/// identical masks on each evaluation.
pub fn check_graph(
    graph: &Graph,
    params: &ParamStore<f64>,
    inputs: &[Array4<f64>],
    mode: Mode,
    seed: u64,
    step: f64,
) -> Result<CheckReport> {
    let refs: Vec<&Array4<f64>> = inputs.iter().collect();
    let tape = graph.forward(params, &refs, mode, &mut SeededRng::new(seed))?;
    let mut probe_rng = SeededRng::derive(seed, 0xfeed);
    let probe = Array4::from_vec(
        tape.output().shape(),
        (0..tape.output().len()).map(|_| probe_rng.uniform(-1.0, 1.0)).collect(),
    );
    let grads = tape.backward(probe.clone())?;

    let objective = |p: &ParamStore<f64>, xs: &[Array4<f64>]| -> Result<f64> {
        let refs: Vec<&Array4<f64>> = xs.iter().collect();
        let t = graph.forward(p, &refs, mode, &mut SeededRng::new(seed))?;
        Ok(t.output().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut errors = Vec::new();
    let pgrads = grads.params.expect("param grads requested");
    let mut work = params.clone();
    for (pi, pg) in pgrads.iter().enumerate() {
        let mut numeric = vec![0.0; pg.data.len()];
        for j in 0..pg.data.len() {
            let orig = work.get(pi).data[j];
            work.get_mut(pi).data[j] = orig + step;
            let up = objective(&work, inputs)?;
            work.get_mut(pi).data[j] = orig - step;
            let down = objective(&work, inputs)?;
            work.get_mut(pi).data[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        errors.push((pg.name.clone(), relative_error(&pg.data, &numeric)));
    }

    let mut xs = inputs.to_vec();
    for (slot, ig) in grads.inputs.iter().enumerate() {
        let ig = ig.as_ref().expect("input grads requested");
        let mut numeric = vec![0.0; ig.len()];
        for j in 0..ig.len() {
            let orig = xs[slot].data()[j];
            xs[slot].data_mut()[j] = orig + step;
            let up = objective(params, &xs)?;
            xs[slot].data_mut()[j] = orig - step;
            let down = objective(params, &xs)?;
            xs[slot].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        errors.push((format!("input{slot}"), relative_error(ig.data(), &numeric)));
    }
    Ok(CheckReport { errors })
}
