//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use super::{Feed, Graph, Tensor};
use crate::error::{Error, Result};

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = v - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = v;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst leaf of a graph gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_leaf: String,
}

/// Compares the vector-Jacobian product of `output` against central
/// differences of `<cotangent, output>` for every leaf of the graph.
pub fn gradcheck(graph: &Graph, feed: &impl Feed, output: &str, cotangent: &Tensor, h: f64) -> Result<GradCheck> {
    let out = graph.output_id(output)?;
    let leaves: Vec<(String, _)> = graph.leaves().map(|(n, id, _)| (n.to_string(), id)).collect();
    let mut bound: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, _) in &leaves {
        let t = feed.lookup(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
        bound.insert(name.clone(), t.clone());
    }
    let eval = graph.evaluate(&bound)?;
    let wrt: Vec<_> = leaves.iter().map(|(_, id)| *id).collect();
    let analytic = graph.vjp(&eval, out, cotangent, &wrt)?;

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_leaf: String::new(),
    };
    for ((name, _), a) in leaves.iter().zip(&analytic) {
        let x = bound[name].clone();
        let numeric = finite_difference(
            |probe| {
                let mut f = bound.clone();
                f.insert(name.clone(), probe.clone());
                let v = graph.evaluate(&f)?;
                Ok(v.value(out)
                    .data()
                    .iter()
                    .zip(cotangent.data())
                    .map(|(p, q)| p * q)
                    .sum())
            },
            &x,
            h,
        )?;
        let e = relative_error(a, &numeric);
        if e > report.max_relative_error || report.worst_leaf.is_empty() {
            report.max_relative_error = e.max(report.max_relative_error);
            report.worst_leaf = name.clone();
        }
    }
    Ok(report)
}
