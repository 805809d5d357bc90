//! Synthetic classification tasks.
//!
//! `blobs`: every token of a class-`c` example comes from the token group
//! `{t : t mod C = c}`, so pooled embeddings cluster by class.
//!
//! `planted-neurons`: a teacher copy of a reference model differs only in a
//! few layer-0 up rows, the planted set. Labels are the teacher's predictions,
//! kept only when its top-two logit margin is wide, so training just the
//! planted rows of the reference can reach 100%. The reference is derived from
//! the seeded init of `config`; see [`PlantedTask::with_pairs`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{Dataset, Example};
use crate::model::{argmax_rows, forward, ModelConfig, NeuronId, ParameterSet};
use crate::selector::probe::{cholesky, cholesky_solve};
use crate::selector::NeuronMask;

pub const SEQ_LEN: usize = 8;

/// Mixed into `config.seed` for the planted-task stream so it never aliases
/// the weight-init stream.
const PLANT_STREAM: u64 = 0x706c_616e_7465_6400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Blobs,
    PlantedNeurons,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "planted-neurons" | "planted" => Ok(SyntheticKind::PlantedNeurons),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic kind {other:?} (expected blobs or planted-neurons)"
            ))),
        }
    }
}

pub fn make_synthetic_dataset(
    kind: SyntheticKind,
    config: &ModelConfig,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    match kind {
        SyntheticKind::Blobs => blobs(config, n, seed),
        SyntheticKind::PlantedNeurons => PlantedTask::new(config)?.sample(n, seed),
    }
}

fn blobs(config: &ModelConfig, n: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    check_n(n)?;
    let c = config.n_classes;
    if config.vocab_size < c {
        return Err(Error::InvalidConfig(format!(
            "blobs need vocab_size ≥ n_classes ({} < {c})",
            config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % c;
            let group = (config.vocab_size - label).div_ceil(c);
            let tokens = (0..SEQ_LEN)
                .map(|_| (label + c * rng.gen_range(0..group)) as u32)
                .collect();
            Example {
                tokens,
                label: label as u32,
            }
        })
        .collect::<Vec<_>>();
    let mut examples = examples;
    examples.shuffle(&mut rng);
    Ok(Dataset::new(examples))
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    Ok(())
}

/// Ground truth for the planted-neurons task; a pure function of the config.
#[derive(Clone, Debug)]
pub struct PlantedTask {
    pub config: ModelConfig,
    /// Layer-0 up rows in canonical order, used as `±` pairs.
    pub planted: Vec<NeuronId>,
    /// Starting point for fine-tuning.
    pub reference: ParameterSet<f32>,
    /// `reference` with its planted rows replaced.
    pub teacher: ParameterSet<f32>,
    /// Minimum teacher top-two logit gap of an accepted example.
    pub margin: f32,
}

/// Norm of a teacher row.
const TEACHER_NORM: f64 = 2.0;
/// Logit spread of one class's planted features, in pooled standard deviations.
const CLASS_LOGIT_SCALE: f64 = 3.0;
/// Expected norm of an init row: `d` draws from `U(±1/√d)`.
const INIT_ROW_NORM: f64 = 0.577_350_269_189_625_8;
const PROBE_SIZE: usize = 512;
const CANDIDATE_BATCH: usize = 128;

impl PlantedTask {
    pub fn default_pairs(config: &ModelConfig) -> usize {
        config.n_classes.max(config.d_hidden / 16).min(config.d_hidden / 2)
    }

    pub fn new(config: &ModelConfig) -> Result<Self> {
        Self::with_pairs(config, Self::default_pairs(config))
    }

    /// The reference is the seeded init of `config` with two edits per pair
    /// `(p, q)`, both in layer 0: `down[:, p] = -down[:, q]` is the least-norm
    /// column whose logit image is a scaled class-vs-rest direction, and
    /// `up[q] = -up[p]`. The teacher sets `up[p] = w`, `up[q] = -w` with `w`
    /// orthogonal to the mean embedding. Since `σ(z) - σ(-z) = z` for every
    /// supported activation, each teacher pair adds a zero-mean linear feature
    /// to one class, so labels come out near balanced.
    pub fn with_pairs(config: &ModelConfig, pairs: usize) -> Result<Self> {
        config.validate()?;
        let (c, dm) = (config.n_classes, config.d_model);
        if c < 2 {
            return Err(Error::InvalidConfig("planted task needs at least 2 classes".into()));
        }
        if dm < c {
            return Err(Error::InvalidConfig(format!(
                "planted task needs d_model ≥ n_classes ({dm} < {c})"
            )));
        }
        if pairs == 0 || 2 * pairs > config.d_hidden {
            return Err(Error::InvalidArgument(format!(
                "planted pair count {pairs} outside 1..={}",
                config.d_hidden / 2
            )));
        }
        let mut reference = ParameterSet::<f32>::init(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PLANT_STREAM);
        let mut rows: Vec<usize> = (0..config.d_hidden).collect();
        rows.shuffle(&mut rng);
        rows.truncate(2 * pairs);

        let head: Vec<Vec<f64>> = (0..c)
            .map(|k| reference.head.row(k).iter().map(|&v| v as f64).collect())
            .collect();
        let mut gram = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                gram[a * c + b] = head[a].iter().zip(&head[b]).map(|(x, y)| x * y).sum();
            }
        }
        let chol = cholesky(&gram, c)
            .ok_or_else(|| Error::InvalidConfig("head rows are linearly dependent".into()))?;

        let embed: Vec<Vec<f64>> = (0..config.vocab_size)
            .map(|t| reference.embed.row(t).iter().map(|&v| v as f64).collect())
            .collect();
        let mean_embed: Vec<f64> = (0..dm)
            .map(|j| embed.iter().map(|e| e[j]).sum::<f64>() / embed.len() as f64)
            .collect();
        let mean_sq = dot(&mean_embed, &mean_embed);

        let per_pair = CLASS_LOGIT_SCALE / (pairs.div_ceil(c) as f64).sqrt();
        let mut teacher_rows = Vec::with_capacity(2 * pairs);
        for k in 0..pairs {
            let (p, q) = (rows[2 * k], rows[2 * k + 1]);
            let mut w: Vec<f64> = (0..dm).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if mean_sq > 0.0 {
                let a = dot(&w, &mean_embed) / mean_sq;
                w.iter_mut().zip(&mean_embed).for_each(|(x, m)| *x -= a * m);
            }
            let norm = dot(&w, &w).sqrt().max(1e-12);
            w.iter_mut().for_each(|x| *x *= TEACHER_NORM / norm);

            let token_var = embed.iter().map(|e| dot(&w, e).powi(2)).sum::<f64>() / embed.len() as f64;
            let pooled_sd = (token_var / SEQ_LEN as f64).sqrt().max(1e-12);
            let mut target = vec![-1.0 / c as f64; c];
            target[k % c] += 1.0;
            target.iter_mut().for_each(|t| *t *= per_pair / pooled_sd);
            let y = cholesky_solve(&chol, c, &target);
            let down = &mut reference.down[0];
            for j in 0..dm {
                let col: f64 = (0..c).map(|a| head[a][j] * y[a]).sum();
                let r = down.row_mut(j);
                r[p] = col as f32;
                r[q] = -col as f32;
            }
            // Start orthogonal to the target at the expected init norm, so
            // every planted row has the same distance to travel.
            let mut start: Vec<f64> = reference.up[0].row(p).iter().map(|&v| v as f64).collect();
            for dir in [&w, &mean_embed] {
                let dd = dot(dir, dir);
                if dd > 0.0 {
                    let a = dot(&start, dir) / dd;
                    start.iter_mut().zip(dir.iter()).for_each(|(x, d)| *x -= a * d);
                }
            }
            let sn = dot(&start, &start).sqrt().max(1e-12);
            let up = &mut reference.up[0];
            for (j, x) in start.iter().enumerate() {
                let v = (x * INIT_ROW_NORM / sn) as f32;
                up.row_mut(p)[j] = v;
                up.row_mut(q)[j] = -v;
            }
            teacher_rows.push((p, w.iter().map(|&v| v as f32).collect::<Vec<f32>>()));
            teacher_rows.push((q, w.iter().map(|&v| -v as f32).collect()));
        }
        let mut teacher = reference.clone();
        for (r, w) in &teacher_rows {
            teacher.up[0].row_mut(*r).copy_from_slice(w);
        }

        let probe: Vec<Vec<u32>> = (0..PROBE_SIZE).map(|_| random_tokens(config, &mut rng)).collect();
        let (_, mut margins) = label_with_margins(&teacher, &probe)?;
        margins.sort_by(f32::total_cmp);
        let margin = margins[margins.len() / 4];
        rows.sort_unstable();
        Ok(Self {
            config: config.clone(),
            planted: rows.into_iter().map(|r| NeuronId::up(0, r)).collect(),
            reference,
            teacher,
            margin,
        })
    }

    pub fn planted_mask(&self, model_hash: u64) -> NeuronMask {
        let total = self.config.neuron_count();
        NeuronMask::new(
            self.planted.iter().copied(),
            self.planted.len() as f64 / total as f64,
            "planted",
            model_hash,
            total,
        )
    }

    /// `n` class-balanced examples drawn by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        check_n(n)?;
        let c = self.config.n_classes;
        let quota: Vec<usize> = (0..c).map(|k| n / c + usize::from(k < n % c)).collect();
        let mut counts = vec![0usize; c];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let max_rounds = 64 + n;
        for _ in 0..max_rounds {
            let batch: Vec<Vec<u32>> =
                (0..CANDIDATE_BATCH).map(|_| random_tokens(&self.config, &mut rng)).collect();
            let (labels, margins) = label_with_margins(&self.teacher, &batch)?;
            for ((tokens, y), m) in batch.into_iter().zip(labels).zip(margins) {
                if m >= self.margin && counts[y] < quota[y] {
                    counts[y] += 1;
                    out.push(Example {
                        tokens,
                        label: y as u32,
                    });
                    if out.len() == n {
                        return Ok(Dataset::new(out));
                    }
                }
            }
        }
        Err(Error::InvalidArgument(format!(
            "could not fill balanced classes (got {counts:?} of {quota:?}); the teacher rarely predicts some class"
        )))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_tokens(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..SEQ_LEN).map(|_| rng.gen_range(0..config.vocab_size) as u32).collect()
}

fn label_with_margins(teacher: &ParameterSet<f32>, batch: &[Vec<u32>]) -> Result<(Vec<usize>, Vec<f32>)> {
    let logits = forward(teacher, batch, false)?.logits;
    let labels = argmax_rows(&logits)?;
    let margins = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let runner = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            row[y] - runner
        })
        .collect();
    Ok((labels, margins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::trainer::evaluate;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            d_hidden: 32,
            n_layers: 2,
            n_classes: 3,
            activation: Activation::Silu,
            seed: 11,
        }
    }

    #[test]
    fn single_example() {
        for kind in [SyntheticKind::Blobs, SyntheticKind::PlantedNeurons] {
            let d = make_synthetic_dataset(kind, &cfg(), 1, 0).unwrap();
            assert_eq!(d.len(), 1);
            assert_eq!(d.to_jsonl().iter().filter(|&&b| b == b'\n').count(), 1);
        }
        assert!(make_synthetic_dataset(SyntheticKind::Blobs, &cfg(), 0, 0).is_err());
        assert!("spiral".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn blobs_are_grouped_and_balanced() {
        let d = make_synthetic_dataset(SyntheticKind::Blobs, &cfg(), 30, 4).unwrap();
        d.validate(&cfg()).unwrap();
        for e in d.examples() {
            assert!(e.tokens.iter().all(|&t| t % 3 == e.label));
        }
        let labels = d.labels();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), 10);
        }
    }

    #[test]
    fn planted_task_is_deterministic_and_teacher_is_perfect() {
        let a = PlantedTask::new(&cfg()).unwrap();
        let b = PlantedTask::new(&cfg()).unwrap();
        assert_eq!(a.planted, b.planted);
        assert_eq!(a.reference.content_hash(), b.reference.content_hash());
        assert_eq!(a.teacher.content_hash(), b.teacher.content_hash());
        assert_eq!(a.planted.len(), 6);
        assert!(a.planted.iter().all(|id| id.layer == 0 && id.role == crate::model::Role::Up));

        for id in cfg().neurons() {
            let same = a.teacher.neuron_row(id).unwrap() == a.reference.neuron_row(id).unwrap();
            assert_eq!(same, !a.planted.contains(&id), "{id}");
        }
        let init = ParameterSet::<f32>::init(&cfg()).unwrap();
        assert_eq!(a.reference.embed, init.embed);
        assert_eq!(a.reference.head, init.head);
        assert_eq!(a.reference.up[1], init.up[1]);

        let d = a.sample(90, 5).unwrap();
        assert_eq!(d.hash(), a.sample(90, 5).unwrap().hash());
        assert_ne!(d.hash(), a.sample(90, 6).unwrap().hash());
        assert_eq!(evaluate(&a.teacher, &d).unwrap().accuracy, 1.0);
        assert!(evaluate(&a.reference, &d).unwrap().accuracy < 0.9);
        let labels = d.labels();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), 30);
        }
    }

    #[test]
    fn planted_pairs_are_validated() {
        assert!(PlantedTask::with_pairs(&cfg(), 0).is_err());
        assert!(PlantedTask::with_pairs(&cfg(), 17).is_err());
        assert!(PlantedTask::with_pairs(&cfg(), 16).is_ok());
        let narrow = ModelConfig { d_model: 2, ..cfg() };
        assert!(PlantedTask::new(&narrow).is_err());
    }
}
