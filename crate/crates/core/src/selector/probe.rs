//! Ridge-classifier probe on token-averaged hidden states, and neuron
//! selection by alignment with the probe's class directions.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{build_graph, NeuronId, ParameterSet};
use crate::selector::{cosine, NeuronMask};
use crate::tensor::Scalar;

/// One-vs-rest ridge classifier: per class a weight vector and a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub format_version: u64,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub lambda: f64,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).fold(*b, |acc, (wi, xi)| acc + wi * xi))
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let d = self.decision(x);
        (0..d.len()).fold(0, |best, c| if d[c] > d[best] { c } else { best })
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / xs.len().max(1) as f64
    }
}

/// Closed-form ridge fit `w_c = (XᵀX + λI)⁻¹ Xᵀ y_c` with `y_c ∈ {−1, +1}`.
///
/// With `intercept`, features and targets are centred first and the bias is
/// recovered from the means (the bias is not penalised); otherwise biases are 0.
pub fn fit_probe(
    xs: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    lambda: f64,
    intercept: bool,
) -> Result<ProbeModel> {
    let n = xs.len();
    if n == 0 || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} feature rows for {} labels",
            labels.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be ≥ 0")));
    }
    if n_classes == 0 || n < n_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least one example per class ({n} examples, {n_classes} classes)"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::LabelOutOfRange {
            example: labels.iter().position(|&y| y == bad).unwrap_or(0),
            label: bad as u32,
            n_classes,
        });
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidArgument("feature rows must share a positive width".into()));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature".into()));
    }

    let targets: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| labels.iter().map(|&y| if y == c { 1.0 } else { -1.0 }).collect())
        .collect();
    let (x_mean, y_mean) = if intercept {
        let mut xm = vec![0.0; d];
        for x in xs {
            for (m, v) in xm.iter_mut().zip(x) {
                *m += v;
            }
        }
        xm.iter_mut().for_each(|m| *m /= n as f64);
        let ym = targets.iter().map(|t| t.iter().sum::<f64>() / n as f64).collect();
        (xm, ym)
    } else {
        (vec![0.0; d], vec![0.0; n_classes])
    };

    // Gram matrix of the (centred) design plus λI.
    let mut gram = vec![0.0; d * d];
    for x in xs {
        for i in 0..d {
            let xi = x[i] - x_mean[i];
            for j in 0..=i {
                gram[i * d + j] += xi * (x[j] - x_mean[j]);
            }
        }
    }
    for i in 0..d {
        gram[i * d + i] += lambda;
        for j in 0..i {
            gram[j * d + i] = gram[i * d + j];
        }
    }
    let chol = cholesky(&gram, d).ok_or_else(|| {
        Error::Singular(format!(
            "XᵀX + λI is singular at λ = {lambda}; use λ > 0 for rank-deficient features"
        ))
    })?;

    let mut weights = Vec::with_capacity(n_classes);
    let mut bias = Vec::with_capacity(n_classes);
    for (c, t) in targets.iter().enumerate() {
        let mut rhs = vec![0.0; d];
        for (x, &y) in xs.iter().zip(t) {
            let yc = y - y_mean[c];
            for (r, (xi, mi)) in rhs.iter_mut().zip(x.iter().zip(&x_mean)) {
                *r += (xi - mi) * yc;
            }
        }
        let w = cholesky_solve(&chol, d, &rhs);
        let b = y_mean[c] - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
        weights.push(w);
        bias.push(b);
    }
    Ok(ProbeModel {
        format_version: crate::io::FORMAT_VERSION,
        weights,
        bias,
        lambda,
    })
}

/// Lower-triangular `L` with `A = LLᵀ`, or `None` when `A` is not numerically positive definite.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s = (0..j).fold(a[i * d + j], |acc, k| acc - l[i * d + k] * l[j * d + k]);
            if i == j {
                if s <= tol {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

pub(crate) fn cholesky_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s = (0..i).fold(b[i], |acc, k| acc - l[i * d + k] * y[k]);
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s = (i + 1..d).fold(y[i], |acc, k| acc - l[k * d + i] * x[k]);
        x[i] = s / l[i * d + i];
    }
    x
}

/// Token-averaged residual stream per example. `layer` indexes the stream
/// entering that block; `layer == n_layers` is the final stream the head reads.
pub fn pooled_hidden_states<T: Scalar, S: AsRef<[u32]>>(
    params: &ParameterSet<T>,
    examples: &[S],
    layer: usize,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer > params.config.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} exceeds n_layers {}",
            params.config.n_layers
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let d = params.config.d_model;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size) {
        let mut tape = Tape::new();
        let g = build_graph(&mut tape, params, chunk)?;
        let h = tape.value(g.residual[layer])?;
        let mut row = 0;
        for ex in chunk {
            let len = ex.as_ref().len();
            let mut acc = vec![0.0; d];
            for _ in 0..len {
                for (a, v) in acc.iter_mut().zip(h.row(row)) {
                    *a += (*v).to_f64();
                }
                row += 1;
            }
            acc.iter_mut().for_each(|a| *a /= len as f64);
            out.push(acc);
        }
    }
    Ok(out)
}

/// Up-neuron alignment score: `max_c |cos(row, w_c)|`.
pub fn probe_scores<T: Scalar>(
    params: &ParameterSet<T>,
    probe: &ProbeModel,
) -> Result<Vec<(NeuronId, f64)>> {
    if probe.dim() != params.config.d_model {
        return Err(Error::ConfigMismatch(format!(
            "probe width {} vs d_model {}",
            probe.dim(),
            params.config.d_model
        )));
    }
    let mut out = Vec::with_capacity(params.config.n_layers * params.config.d_hidden);
    for layer in 0..params.config.n_layers {
        for row in 0..params.config.d_hidden {
            let id = NeuronId::up(layer, row);
            let u: Vec<f64> = params.neuron_row(id)?.iter().map(|&v| v.to_f64()).collect();
            let mut best = 0.0f64;
            for w in &probe.weights {
                best = best.max(cosine(&u, w)?.abs());
            }
            out.push((id, best));
        }
    }
    Ok(out)
}

/// Top-`k` up-neurons by probe alignment, ties in canonical order.
pub fn probe_select<T: Scalar>(
    params: &ParameterSet<T>,
    probe: &ProbeModel,
    k: usize,
) -> Result<NeuronMask> {
    let eligible = params.config.n_layers * params.config.d_hidden;
    if k > eligible {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {eligible} up-neurons"
        )));
    }
    let mut scored = probe_scores(params, probe)?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total = params.neuron_count();
    Ok(NeuronMask::new(
        scored.into_iter().take(k).map(|(id, _)| id),
        k as f64 / total as f64,
        format!("probe-top{k}"),
        params.content_hash(),
        total,
    ))
}
