#![allow(clippy::needless_range_loop)]
//! Independent reference implementations used as test oracles. They favour
//! obvious loops over speed and share no code with the library beyond types.

#![allow(dead_code)]

use neft_core::analysis::{Bucket, CategoryReport, RankDiffReport, UtilizationProfile};
use neft_core::{ActivationTrace, Activation, Example, ModelConfig, NeuronId, NeuronMask, ParameterSet};

/// Indices picked by a full sort of `(score, index)`; `k = round(f · n)` with
/// halves away from zero.
pub fn sort_select(scores: &[f64], fraction: f64, lowest: bool) -> Vec<usize> {
    let n = scores.len();
    let k = (fraction * n as f64 + 0.5).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = if lowest { idx[..k].to_vec() } else { idx[n - k..].to_vec() };
    picked.sort_unstable();
    picked
}

/// Canonical index of every neuron: layers in order, up rows then down rows.
pub fn canonical_ids(cfg: &ModelConfig) -> Vec<NeuronId> {
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for r in 0..cfg.d_hidden {
            out.push(NeuronId::up(l, r));
        }
        for r in 0..cfg.d_model {
            out.push(NeuronId::down(l, r));
        }
    }
    out
}

/// Two-pass sample Pearson; constant series give 0.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().fold(0.0, |a, &v| a + v) / n;
    let my = y.iter().fold(0.0, |a, &v| a + v) / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    for i in 0..y.len() {
        syy += (y[i] - my) * (y[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Max Pearson against every other neuron of the same layer and role, and
/// ranks by counting (higher score first, earlier neuron first on ties).
pub fn profile(trace: &ActivationTrace) -> (Vec<f64>, Vec<usize>) {
    let ids = canonical_ids(&trace.config);
    let series: Vec<Vec<f64>> = trace
        .values
        .iter()
        .map(|s| s.iter().map(|&v| v as f64).collect())
        .collect();
    let n = ids.len();
    let mut best = vec![0.0; n];
    for i in 0..n {
        let mut m: Option<f64> = None;
        for j in 0..n {
            if j != i && ids[j].layer == ids[i].layer && ids[j].role == ids[i].role {
                let r = pearson(&series[i], &series[j]);
                m = Some(match m {
                    Some(v) if v >= r => v,
                    _ => r,
                });
            }
        }
        best[i] = m.unwrap_or(0.0);
    }
    let rank = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| best[j] > best[i] || (best[j] == best[i] && j < i))
                .count()
        })
        .collect();
    (best, rank)
}

pub struct BruteRankDiff {
    pub delta: Vec<i64>,
    pub avg_abs: f64,
    /// `(count, mean |ΔRank|)` per bucket.
    pub buckets: Vec<(usize, Option<f64>)>,
}

pub fn rank_diff(a: &[usize], b: &[usize], edges: &[f64]) -> BruteRankDiff {
    let n = a.len();
    let delta: Vec<i64> = (0..n).map(|i| b[i] as i64 - a[i] as i64).collect();
    let abs_sum: i64 = delta.iter().map(|d| d.abs()).sum();
    let mut buckets = Vec::new();
    for (bi, &hi) in edges.iter().enumerate() {
        let lo = if bi == 0 { 0.0 } else { edges[bi - 1] };
        let members: Vec<usize> = (0..n)
            .filter(|&i| {
                let p = 100.0 * (a[i] + 1) as f64 / n as f64;
                p > lo && p <= hi
            })
            .collect();
        let s: i64 = members.iter().map(|&i| delta[i].abs()).sum();
        let mean = (!members.is_empty()).then(|| s as f64 / members.len() as f64);
        buckets.push((members.len(), mean));
    }
    BruteRankDiff {
        avg_abs: abs_sum as f64 / n as f64,
        delta,
        buckets,
    }
}

/// `(strongly, suppressed, indirect)` as canonical indices.
pub fn categorize(delta: &[i64], in_mask: &[bool], threshold: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let strongly: Vec<usize> = (0..delta.len()).filter(|&i| delta[i].unsigned_abs() as usize > threshold).collect();
    let suppressed = strongly.iter().copied().filter(|&i| delta[i] > 0).collect();
    let indirect = strongly.iter().copied().filter(|&i| !in_mask[i]).collect();
    (strongly, suppressed, indirect)
}

pub fn assert_profile_matches(p: &UtilizationProfile, trace: &ActivationTrace) {
    let (best, rank) = profile(trace);
    assert_eq!(p.max_pearson, best, "max pearson");
    assert_eq!(p.rank, rank, "ranks");
}

pub fn assert_rank_diff_matches(r: &RankDiffReport, a: &[usize], b: &[usize], edges: &[f64]) {
    let o = rank_diff(a, b, edges);
    assert_eq!(r.delta, o.delta);
    assert_eq!(r.delta.iter().sum::<i64>(), 0);
    assert_eq!(r.avg_abs_delta, o.avg_abs);
    let got: Vec<(usize, Option<f64>)> = r.buckets.iter().map(|b: &Bucket| (b.count, b.avg_abs_delta)).collect();
    assert_eq!(got, o.buckets);
}

pub fn assert_categories_match(c: &CategoryReport, cfg: &ModelConfig, delta: &[i64], mask: &NeuronMask, threshold: usize) {
    let ids = canonical_ids(cfg);
    let in_mask: Vec<bool> = ids.iter().map(|id| mask.neurons().contains(id)).collect();
    let (s, sup, ind) = categorize(delta, &in_mask, threshold);
    let to_ids = |v: Vec<usize>| v.into_iter().map(|i| ids[i]).collect::<Vec<_>>();
    assert_eq!(c.threshold, threshold);
    assert_eq!(c.strongly_affected, to_ids(s));
    assert_eq!(c.suppressed, to_ids(sup));
    assert_eq!(c.indirectly_affected, to_ids(ind));
}

/// Ridge weights for one-vs-rest ±1 targets by plain gradient descent on
/// `½‖Xc w − yc‖² + ½λ‖w‖²`, with centring when `intercept`.
pub fn ridge_gd(xs: &[Vec<f64>], labels: &[usize], n_classes: usize, lambda: f64, intercept: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = xs.len();
    let d = xs[0].len();
    let mut xm = vec![0.0; d];
    if intercept {
        for x in xs {
            for j in 0..d {
                xm[j] += x[j] / n as f64;
            }
        }
    }
    let xc: Vec<Vec<f64>> = xs.iter().map(|x| (0..d).map(|j| x[j] - xm[j]).collect()).collect();
    // Step size from a bound on the largest Hessian eigenvalue.
    let frob: f64 = xc.iter().flatten().map(|v| v * v).sum();
    let step = 1.0 / (frob + lambda);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for c in 0..n_classes {
        let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
        let ym = if intercept { y.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let mut w = vec![0.0; d];
        for _ in 0..200_000 {
            let mut g: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
            for (x, &yi) in xc.iter().zip(&y) {
                let r: f64 = (0..d).map(|j| x[j] * w[j]).sum::<f64>() - (yi - ym);
                for j in 0..d {
                    g[j] += r * x[j];
                }
            }
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..d {
                w[j] -= step * g[j];
            }
            if gn < 1e-12 {
                break;
            }
        }
        let b = ym - (0..d).map(|j| w[j] * xm[j]).sum::<f64>();
        weights.push(w);
        biases.push(b);
    }
    (weights, biases)
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

/// Straight-line forward pass: per-token residual blocks, mean pool, head.
/// Returns logits per example and, per neuron in canonical order, its
/// activation on every token.
pub fn forward(p: &ParameterSet<f64>, batch: &[Example]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = &p.config;
    let mut logits = Vec::new();
    let mut trace = vec![Vec::new(); cfg.neuron_count()];
    for ex in batch {
        let mut pooled = vec![0.0; cfg.d_model];
        for &t in &ex.tokens {
            let mut h: Vec<f64> = p.embed.row(t as usize).to_vec();
            let mut slot = 0;
            for l in 0..cfg.n_layers {
                let a: Vec<f64> = (0..cfg.d_hidden)
                    .map(|r| act(cfg.activation, (0..cfg.d_model).map(|j| p.up[l].row(r)[j] * h[j]).sum()))
                    .collect();
                let o: Vec<f64> = (0..cfg.d_model)
                    .map(|r| (0..cfg.d_hidden).map(|j| p.down[l].row(r)[j] * a[j]).sum())
                    .collect();
                for (r, v) in a.iter().enumerate() {
                    trace[slot + r].push(*v);
                }
                slot += cfg.d_hidden;
                for (r, v) in o.iter().enumerate() {
                    trace[slot + r].push(*v);
                }
                slot += cfg.d_model;
                for j in 0..cfg.d_model {
                    h[j] += o[j];
                }
            }
            for j in 0..cfg.d_model {
                pooled[j] += h[j] / ex.tokens.len() as f64;
            }
        }
        logits.push(
            (0..cfg.n_classes)
                .map(|c| (0..cfg.d_model).map(|j| p.head.row(c)[j] * pooled[j]).sum())
                .collect(),
        );
    }
    (logits, trace)
}

/// Mean softmax cross-entropy from the straight-line forward pass.
pub fn loss(p: &ParameterSet<f64>, batch: &[Example]) -> f64 {
    let (logits, _) = forward(p, batch);
    let mut total = 0.0;
    for (z, ex) in logits.iter().zip(batch) {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[ex.label as usize];
    }
    total / batch.len() as f64
}

pub fn random_batch(cfg: &ModelConfig, n: usize, len: usize, rng: &mut impl rand::Rng) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            tokens: (0..len).map(|_| rng.gen_range(0..cfg.vocab_size) as u32).collect(),
            label: rng.gen_range(0..cfg.n_classes) as u32,
        })
        .collect()
}
