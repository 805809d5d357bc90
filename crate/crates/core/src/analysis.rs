//! Neuron-utilization measurements.
//!
//! Each neuron's utilization score is its highest Pearson correlation with
//! another neuron of the same `(layer, role)` group over a shared set of
//! tokens. Ranking all neurons by that score (descending, 0 = highest) gives
//! the utilization rank; rank shifts between two models are summarised as
//! ΔRank, its mean absolute value, per-percentile buckets, and three neuron
//! categories.
//!
//! Sign convention: `delta_rank = rank_b − rank_a`, so a positive delta means
//! the neuron lost utilization position in model B ("suppressed").

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, ModelConfig, NeuronId};
use crate::selector::NeuronMask;

pub const SIGN_CONVENTION: &str =
    "delta_rank = rank_b - rank_a; rank 0 = highest max-Pearson; positive delta = lost utilization position";

/// Threshold share of all neurons above which |ΔRank| counts as strong
/// (100,000 of 483,328 MLP rows in a 32-layer, 4096/11008-wide model).
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.207;

/// Sample Pearson correlation. A zero-variance series correlates 0 with anything.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 2 samples, got {}",
            x.len()
        )));
    }
    let cx = Centered::new(x);
    let cy = Centered::new(y);
    Ok(cx.correlate(&cy))
}

/// A mean-centred series with its root sum of squares.
struct Centered {
    dev: Vec<f64>,
    norm: f64,
}

impl Centered {
    fn new(x: &[f64]) -> Self {
        let mean = x.iter().fold(0.0, |a, &v| a + v) / x.len() as f64;
        let dev: Vec<f64> = x.iter().map(|&v| v - mean).collect();
        let ss = dev.iter().fold(0.0, |a, &d| a + d * d);
        Self { dev, norm: ss.sqrt() }
    }

    fn correlate(&self, other: &Centered) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let sxy = self
            .dev
            .iter()
            .zip(&other.dev)
            .fold(0.0, |a, (&p, &q)| a + p * q);
        (sxy / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationProfile {
    pub config: ModelConfig,
    /// Canonical neuron order.
    pub max_pearson: Vec<f64>,
    /// Canonical neuron order; a permutation of `0..N`.
    pub rank: Vec<usize>,
    pub dataset_hash: u64,
    pub model_hash: u64,
}

impl UtilizationProfile {
    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }

    /// Neurons from rank 0 upward.
    pub fn by_rank(&self) -> Vec<NeuronId> {
        let mut out = vec![NeuronId::up(0, 0); self.rank.len()];
        for (i, &r) in self.rank.iter().enumerate() {
            out[r] = self.config.neuron_at(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.config.neuron_count();
        if self.max_pearson.len() != n || self.rank.len() != n {
            return Err(Error::Malformed(format!("profile does not cover {n} neurons")));
        }
        let mut seen = vec![false; n];
        for &r in &self.rank {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Malformed("ranks are not a permutation".into()));
            }
        }
        Ok(())
    }
}

/// Ranks `0..N` for scores sorted descending, ties by canonical index.
pub fn ranks_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    rank
}

/// Max same-group pairwise Pearson per neuron, and the resulting ranks.
pub fn utilization_profile(trace: &ActivationTrace) -> Result<UtilizationProfile> {
    trace.validate()?;
    if trace.token_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "utilization needs at least 2 traced tokens, got {}",
            trace.token_count
        )));
    }
    let cfg = &trace.config;
    let centered: Vec<Centered> = trace
        .values
        .par_iter()
        .map(|s| {
            let v: Vec<f64> = s.iter().map(|&x| x as f64).collect();
            Centered::new(&v)
        })
        .collect();
    let max_pearson: Vec<f64> = (0..cfg.neuron_count())
        .into_par_iter()
        .map(|i| {
            group_members(cfg, cfg.neuron_at(i))
                .filter(|&j| j != i)
                .map(|j| centered[i].correlate(&centered[j]))
                .fold(None, |best: Option<f64>, r| Some(best.map_or(r, |b| b.max(r))))
                // a neuron alone in its group has no partner
                .unwrap_or(0.0)
        })
        .collect();
    let rank = ranks_descending(&max_pearson);
    Ok(UtilizationProfile {
        config: cfg.clone(),
        max_pearson,
        rank,
        dataset_hash: trace.dataset_hash,
        model_hash: trace.model_hash,
    })
}

/// Canonical indices of the neurons sharing `id`'s layer and role.
fn group_members(cfg: &ModelConfig, id: NeuronId) -> impl Iterator<Item = usize> + '_ {
    (0..cfg.rows_for(id.role)).map(move |row| cfg.neuron_index(NeuronId::new(id.layer, id.role, row)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    /// Exclusive lower percentile bound.
    pub lo: f64,
    /// Inclusive upper percentile bound.
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bucket.
    pub avg_abs_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankDiffReport {
    pub config: ModelConfig,
    /// `rank_b − rank_a`, canonical order.
    pub delta: Vec<i64>,
    pub avg_abs_delta: f64,
    pub buckets: Vec<Bucket>,
    pub profile_a_hash: u64,
    pub profile_b_hash: u64,
}

impl RankDiffReport {
    pub fn delta_of(&self, id: NeuronId) -> Result<i64> {
        self.config.check_neuron(id)?;
        Ok(self.delta[self.config.neuron_index(id)])
    }
}

/// Percentile position of a rank among `n`: rank 0 of 10 sits at 10%.
pub fn rank_percentile(rank: usize, n: usize) -> f64 {
    100.0 * (rank + 1) as f64 / n as f64
}

/// Per-neuron ΔRank between profiles `a` and `b`, the mean |ΔRank|, and its
/// mean within percentile buckets of profile `a` (`(edges[i-1], edges[i]]`,
/// starting from 0).
pub fn rank_diff(
    a: &UtilizationProfile,
    b: &UtilizationProfile,
    bucket_edges: &[f64],
) -> Result<RankDiffReport> {
    a.validate()?;
    b.validate()?;
    if !a.config.same_shape(&b.config) {
        return Err(Error::ConfigMismatch("profiles cover different neuron sets".into()));
    }
    let edges_ok = bucket_edges.iter().all(|&e| e > 0.0 && e <= 100.0)
        && bucket_edges.windows(2).all(|w| w[0] < w[1]);
    if !edges_ok {
        return Err(Error::InvalidArgument(format!(
            "bucket edges {bucket_edges:?} must be strictly increasing within (0, 100]"
        )));
    }
    let n = a.len();
    let delta: Vec<i64> = a
        .rank
        .iter()
        .zip(&b.rank)
        .map(|(&ra, &rb)| rb as i64 - ra as i64)
        .collect();
    let total_abs: u64 = delta.iter().map(|d| d.unsigned_abs()).sum();
    let avg_abs_delta = total_abs as f64 / n as f64;

    let mut sums = vec![(0u64, 0usize); bucket_edges.len()];
    for (i, &d) in delta.iter().enumerate() {
        let p = rank_percentile(a.rank[i], n);
        if let Some(bi) = bucket_edges.iter().position(|&hi| p <= hi) {
            sums[bi].0 += d.unsigned_abs();
            sums[bi].1 += 1;
        }
    }
    let buckets = bucket_edges
        .iter()
        .enumerate()
        .map(|(i, &hi)| {
            let (s, c) = sums[i];
            Bucket {
                lo: if i == 0 { 0.0 } else { bucket_edges[i - 1] },
                hi,
                count: c,
                avg_abs_delta: (c > 0).then(|| s as f64 / c as f64),
            }
        })
        .collect();
    Ok(RankDiffReport {
        config: a.config.clone(),
        delta,
        avg_abs_delta,
        buckets,
        profile_a_hash: a.model_hash,
        profile_b_hash: b.model_hash,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Count(usize),
    /// Share of the model's neurons, rounded half away from zero.
    Fraction(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fraction(DEFAULT_THRESHOLD_FRACTION)
    }
}

impl Threshold {
    pub fn resolve(self, total: usize) -> Result<usize> {
        let t = match self {
            Threshold::Count(c) => c,
            Threshold::Fraction(f) => {
                if !(f > 0.0 && f.is_finite()) {
                    return Err(Error::InvalidArgument(format!("threshold fraction {f} must be > 0")));
                }
                (f * total as f64).round() as usize
            }
        };
        if t < 1 {
            return Err(Error::InvalidArgument(format!("threshold resolves to {t}, must be ≥ 1")));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryReport {
    /// `|ΔRank| > threshold`.
    pub strongly_affected: Vec<NeuronId>,
    /// Strongly affected with ΔRank > 0 (rank number grew).
    pub suppressed: Vec<NeuronId>,
    /// Strongly affected but outside the trained mask.
    pub indirectly_affected: Vec<NeuronId>,
    pub threshold: usize,
    pub mask_provenance: String,
    pub mask_model_hash: u64,
}

pub fn categorize(
    diff: &RankDiffReport,
    mask: &NeuronMask,
    threshold: Threshold,
) -> Result<CategoryReport> {
    let n = diff.delta.len();
    if n != diff.config.neuron_count() {
        return Err(Error::Malformed("rank diff does not cover the model".into()));
    }
    mask.validate_for(&diff.config)?;
    let threshold = threshold.resolve(n)?;
    let mut strongly = Vec::new();
    let mut suppressed = Vec::new();
    let mut indirect = Vec::new();
    for (i, &d) in diff.delta.iter().enumerate() {
        if d.unsigned_abs() as usize > threshold {
            let id = diff.config.neuron_at(i);
            strongly.push(id);
            if d > 0 {
                suppressed.push(id);
            }
            if !mask.contains(id) {
                indirect.push(id);
            }
        }
    }
    Ok(CategoryReport {
        strongly_affected: strongly,
        suppressed,
        indirectly_affected: indirect,
        threshold,
        mask_provenance: mask.provenance.clone(),
        mask_model_hash: mask.model_hash,
    })
}
