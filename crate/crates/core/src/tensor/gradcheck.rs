//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64 only; finite differences drown in rounding noise in f32.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Graph, Tensor, ValueId};
use crate::error::{Error, Result};

/// Builds a scalar loss from parameter leaves. Called many times with
/// perturbed inputs, so it must be deterministic.
pub trait LossFn: Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId> {}
impl<F: Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>> LossFn for F {}

/// Max over all parameter elements of |analytic - numeric| / max(1, |numeric|).
pub fn grad_check(build: impl LossFn, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    grad_check_impl(build, inputs, eps, None)
}

/// Same check restricted to `probes` randomly chosen parameter elements;
/// full networks are too expensive to probe exhaustively.
pub fn grad_check_sampled(
    build: impl LossFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    probes: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    grad_check_impl(build, inputs, eps, Some((probes, rng)))
}

fn grad_check_impl(
    build: impl LossFn,
    inputs: &[Tensor<f64>],
    eps: f64,
    sample: Option<(usize, &mut dyn rand::RngCore)>,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid("grad_check", format!("eps {} outside (0, 1e-3]", eps)));
    }

    let mut graph = Graph::recording();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut graph, &ids)?;
    let grads = graph.backward(loss)?;

    // Every (input index, element index) pair is a probe site.
    let mut sites: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    if let Some((probes, rng)) = sample {
        sites.shuffle(rng);
        sites.truncate(probes);
    }

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::recording();
        let ids: Vec<ValueId> = perturbed
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).scalar_value())
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, e) in sites {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads
            .get(ids[i])
            .expect("param leaf has a gradient entry")
            .data()[e];
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
