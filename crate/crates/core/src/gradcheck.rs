//! Central-finite-difference verification of the analytic gradients.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::Mode;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub passed: bool,
    /// Parameters where the loss went non-finite during perturbation.
    pub failures: Vec<String>,
}

/// Loss of the model on one batch: train-mode forward (without running-stat
/// updates, so the loss is a pure function of the parameters) plus BCE.
pub fn batch_loss(model: &mut Model, batch: &Tensor, truths: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let logits = model.forward(&mut g, x, Mode::Train, false)?;
    let loss = g.bce_with_logits(logits, truths)?;
    Ok(g.value(loss).data()[0])
}

/// Compare analytic gradients against (L(t+h) - L(t-h)) / 2h on a sampled
/// subset of parameters.
pub fn grad_check(
    model: &mut Model,
    batch: &Tensor,
    truths: &Tensor,
    num_samples: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    // analytic gradients
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let logits = model.forward(&mut g, x, Mode::Train, false)?;
    let loss = g.bce_with_logits(logits, truths)?;
    if !g.value(loss).is_finite() {
        return Err(Error::Numerical("non-finite loss in grad_check".into()));
    }
    let grads = g.backward(loss)?;

    let params = model.trainable_params();
    let total: usize = params.iter().map(|(_, l)| l).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = HashSet::new();
    let want = num_samples.min(total);
    while chosen.len() < want {
        chosen.insert(rng.gen_range(0..total));
    }

    let mut report = GradCheckReport {
        samples: want,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        passed: true,
        failures: Vec::new(),
    };
    for flat in chosen {
        // locate the owning parameter
        let mut offset = 0;
        let (name, index) = params
            .iter()
            .find_map(|(n, l)| {
                if flat < offset + l {
                    Some((n.clone(), flat - offset))
                } else {
                    offset += l;
                    None
                }
            })
            .expect("flat index within total");

        model.perturb(&name, index, step);
        let up = batch_loss(model, batch, truths);
        model.perturb(&name, index, -2.0 * step);
        let down = batch_loss(model, batch, truths);
        model.perturb(&name, index, step);
        let (up, down) = match (up, down) {
            (Ok(u), Ok(d)) if u.is_finite() && d.is_finite() => (u, d),
            _ => {
                report.failures.push(format!("{name}[{index}]"));
                report.passed = false;
                continue;
            }
        };
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads
            .get(&name)
            .map(|t| t.data()[index])
            .unwrap_or(0.0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = name.clone();
            report.worst_index = index;
        }
    }
    if report.max_rel_error > tolerance {
        report.passed = false;
    }
    Ok(report)
}
