//! Row-wise cosine similarity between two checkpoints and budgeted selection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NeuronId, ParameterSet};
use crate::selector::NeuronMask;
use crate::tensor::Scalar;

/// Cosine similarity of two equal-length vectors, accumulated in f64.
///
/// Two zero vectors score 1 (nothing changed); one zero vector scores 0.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    if u.is_empty() {
        return Err(Error::Empty("cosine of empty vectors".into()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64(), b.to_f64());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    Ok(match (uu == 0.0, vv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        // Equal norms need no square roots, so identical rows score exactly 1.
        _ if uu == vv => (dot / uu).clamp(-1.0, 1.0),
        _ => (dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0),
    })
}

/// One score per neuron of the model, canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub config: ModelConfig,
    pub org_hash: u64,
    pub ft_hash: u64,
    pub scores: Vec<f64>,
}

impl SimilarityReport {
    pub fn score(&self, id: NeuronId) -> Result<f64> {
        self.config.check_neuron(id)?;
        Ok(self.scores[self.config.neuron_index(id)])
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        self.config.neurons().zip(self.scores.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.scores.len() != self.config.neuron_count() {
            return Err(Error::Malformed(format!(
                "report has {} scores for {} neurons",
                self.scores.len(),
                self.config.neuron_count()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Malformed(format!("non-finite score {s}")));
        }
        Ok(())
    }
}

/// Cosine similarity of every up/down row between the original and the fine-tuned model.
pub fn neuron_similarity<T: Scalar>(
    org: &ParameterSet<T>,
    ft: &ParameterSet<T>,
) -> Result<SimilarityReport> {
    if !org.config.same_shape(&ft.config) {
        return Err(Error::ConfigMismatch(format!(
            "{:?} vs {:?}",
            org.config, ft.config
        )));
    }
    org.check_shapes()?;
    ft.check_shapes()?;
    let ids: Vec<NeuronId> = org.config.neurons().collect();
    let scores = ids
        .par_iter()
        .map(|&id| cosine(org.neuron_row(id)?, ft.neuron_row(id)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityReport {
        config: org.config.clone(),
        org_hash: org.content_hash(),
        ft_hash: ft.content_hash(),
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// Lowest similarity first.
    Sensitive,
    /// Highest similarity first.
    Reversed,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Sensitive => "sensitive",
            SelectionMode::Reversed => "reversed",
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensitive" => Ok(SelectionMode::Sensitive),
            "reversed" => Ok(SelectionMode::Reversed),
            other => Err(Error::InvalidArgument(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// `round(fraction · total)` with halves rounded away from zero.
pub fn budget(fraction: f64, total: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} is outside (0, 1]"
        )));
    }
    Ok(((fraction * total as f64).round() as usize).min(total))
}

pub(crate) fn percent_label(fraction: f64) -> String {
    let s = format!("{:.6}", fraction * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

/// Picks `round(fraction · N)` neurons.
///
/// Neurons are ordered by `(score, canonical id)` ascending; sensitive mode
/// takes the front of that order and reversed mode the back, so the two
/// selections never collide while their budgets fit.
pub fn select_neurons(
    report: &SimilarityReport,
    fraction: f64,
    mode: SelectionMode,
) -> Result<NeuronMask> {
    report.validate()?;
    let n = report.scores.len();
    let k = budget(fraction, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| report.scores[a].total_cmp(&report.scores[b]).then(a.cmp(&b)));
    let picked = match mode {
        SelectionMode::Sensitive => &order[..k],
        SelectionMode::Reversed => &order[n - k..],
    };
    Ok(NeuronMask::new(
        picked.iter().map(|&i| report.config.neuron_at(i)),
        fraction,
        format!("{}@{}", mode.as_str(), percent_label(fraction)),
        report.org_hash,
        n,
    ))
}
