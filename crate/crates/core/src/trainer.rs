//! Mini-batch training with optional neuron-level gradient masking.
//!
//! Under a mask, gradients of every non-selected up/down row are zeroed
//! before the optimizer sees them, and embedding/head gradients are zeroed
//! unless explicitly unfrozen. Rows outside the mask therefore keep their
//! initial bytes for the whole run, for SGD and Adam alike.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{argmax_rows, build_graph, forward, ParameterSet, Role};
use crate::selector::NeuronMask;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many passes over the data even if `max_steps` is not reached.
    #[serde(default)]
    pub max_epochs: Option<usize>,
}

/// Step budget for the quick fine-tune whose diff drives selection.
pub const SELECTION_STEPS: usize = 800;

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_steps: SELECTION_STEPS,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seed: 0,
            shuffle: true,
            max_epochs: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("max_steps and batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and ≥ 0",
                self.learning_rate
            )));
        }
        if self.max_epochs == Some(0) {
            return Err(Error::InvalidArgument("max_epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Neuron mask plus whether embedding and head stay trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMask {
    pub neurons: NeuronMask,
    pub train_embed_head: bool,
}

impl TrainingMask {
    pub fn new(neurons: NeuronMask) -> Self {
        Self {
            neurons,
            train_embed_head: false,
        }
    }

    pub fn with_embed_head(mut self, train: bool) -> Self {
        self.train_embed_head = train;
        self
    }
}

/// Gradients shaped like the parameters they belong to.
pub type GradientMap<T> = ParameterSet<T>;

/// Keeps masked rows bit-exactly and zeroes every other up/down row; embedding
/// and head gradients are zeroed unless the mask unfreezes them.
pub fn apply_gradient_mask<T: Scalar>(
    mut grads: GradientMap<T>,
    mask: &TrainingMask,
) -> Result<GradientMap<T>> {
    let keep = row_keep_table(&grads.config, &mask.neurons)?;
    mask_in_place(&mut grads, &keep, mask.train_embed_head);
    Ok(grads)
}

fn mask_in_place<T: Scalar>(grads: &mut GradientMap<T>, keep: &RowKeep, train_embed_head: bool) {
    for (layer, (up_keep, down_keep)) in keep.iter().enumerate() {
        zero_rows(&mut grads.up[layer], up_keep);
        zero_rows(&mut grads.down[layer], down_keep);
    }
    if !train_embed_head {
        grads.embed.data_mut().fill(T::zero());
        grads.head.data_mut().fill(T::zero());
    }
}

type RowKeep = Vec<(Vec<bool>, Vec<bool>)>;

fn row_keep_table(config: &crate::model::ModelConfig, mask: &NeuronMask) -> Result<RowKeep> {
    let mut keep: RowKeep = (0..config.n_layers)
        .map(|_| (vec![false; config.d_hidden], vec![false; config.d_model]))
        .collect();
    for &id in mask.neurons() {
        config.check_neuron(id)?;
        let (up, down) = &mut keep[id.layer];
        match id.role {
            Role::Up => up[id.row] = true,
            Role::Down => down[id.row] = true,
        }
    }
    Ok(keep)
}

fn zero_rows<T: Scalar>(t: &mut Tensor<T>, keep: &[bool]) {
    for (r, &k) in keep.iter().enumerate() {
        if !k {
            t.row_mut(r).fill(T::zero());
        }
    }
}

/// Loss and parameter gradients for one batch.
pub fn compute_gradients<T: Scalar>(
    params: &ParameterSet<T>,
    batch: &[&crate::io::Example],
) -> Result<(T, GradientMap<T>)> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, params, batch)?;
    let labels = batch.iter().map(|e| e.label as usize).collect();
    let loss = tape.softmax_cross_entropy(g.logits, labels)?;
    let loss_value = tape.value(loss)?.data()[0];
    let mut grads = tape.backward(loss)?;
    let mut take = |v| grads.take(v);
    let gm = GradientMap {
        config: params.config.clone(),
        embed: take(g.embed)?,
        up: g.up.iter().map(|&v| take(v)).collect::<Result<_>>()?,
        down: g.down.iter().map(|&v| take(v)).collect::<Result<_>>()?,
        head: take(g.head)?,
    };
    Ok((loss_value, gm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    /// Completed epochs when the checkpoint was taken.
    pub epoch: usize,
    pub eval: Option<EvalResult>,
    #[serde(with = "crate::io::hex_u64")]
    pub params_hash: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs_completed: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_eval: Option<EvalResult>,
}

impl TrainLog {
    /// `step=<int> loss=<float>` per line.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&format!("step={} loss={}\n", r.step, r.loss));
        }
        s
    }
}

pub struct TrainRun<T> {
    pub params: ParameterSet<T>,
    pub log: TrainLog,
    /// Checkpoint with the lowest evaluation loss, when an eval set was given.
    pub best: Option<(CheckpointRecord, ParameterSet<T>)>,
}

/// Configures and runs one training job.
type CheckpointHook<'a, T> = Box<dyn FnMut(&CheckpointRecord, &ParameterSet<T>) -> Result<()> + 'a>;

pub struct Trainer<'a, T> {
    opts: TrainOptions,
    mask: Option<&'a TrainingMask>,
    eval: Option<&'a Dataset>,
    on_checkpoint: Option<CheckpointHook<'a, T>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(opts: TrainOptions) -> Self {
        Self {
            opts,
            mask: None,
            eval: None,
            on_checkpoint: None,
        }
    }

    pub fn mask(mut self, mask: Option<&'a TrainingMask>) -> Self {
        self.mask = mask;
        self
    }

    pub fn eval_set(mut self, eval: Option<&'a Dataset>) -> Self {
        self.eval = eval;
        self
    }

    /// Called at every epoch boundary and at the final step.
    pub fn on_checkpoint(
        mut self,
        f: impl FnMut(&CheckpointRecord, &ParameterSet<T>) -> Result<()> + 'a,
    ) -> Self {
        self.on_checkpoint = Some(Box::new(f));
        self
    }

    pub fn run(mut self, init: &ParameterSet<T>, data: &Dataset) -> Result<TrainRun<T>> {
        let opts = self.opts.clone();
        opts.validate()?;
        init.check_shapes()?;
        data.validate(&init.config)?;
        if let Some(eval) = self.eval {
            eval.validate(&init.config)?;
        }
        let keep = match self.mask {
            Some(m) => Some(row_keep_table(&init.config, &m.neurons)?),
            None => None,
        };

        let mut params = init.clone();
        let mut state = OptimizerState::new(&opts.optimizer, init)?;
        let mut log = TrainLog::default();
        let mut best: Option<(CheckpointRecord, ParameterSet<T>)> = None;
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        let mut epoch = 0;

        'outer: loop {
            if opts.shuffle {
                order.sort_unstable();
                let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(opts.seed, epoch));
                order.shuffle(&mut rng);
            }
            let batches = n.div_ceil(opts.batch_size);
            for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
                let batch: Vec<&crate::io::Example> =
                    chunk.iter().map(|&i| &data.examples()[i]).collect();
                let (loss, mut grads) = compute_gradients(&params, &batch)?;
                step += 1;
                let loss = loss.to_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        loss,
                        batch: chunk.to_vec(),
                    });
                }
                if let (Some(m), Some(keep)) = (self.mask, &keep) {
                    mask_in_place(&mut grads, keep, m.train_embed_head);
                }
                state.update(&mut params, &grads, opts.learning_rate, step);
                log.steps.push(StepRecord { step, loss });
                if step >= opts.max_steps {
                    if b + 1 == batches {
                        epoch += 1;
                        log.epochs_completed = epoch;
                    }
                    break 'outer;
                }
            }
            epoch += 1;
            log.epochs_completed = epoch;
            self.checkpoint(&params, step, epoch, &mut log, &mut best)?;
            if opts.max_epochs.is_some_and(|e| epoch >= e) {
                break;
            }
        }
        // Final checkpoint, unless the last step already closed an epoch.
        if log.checkpoints.last().is_none_or(|c| c.step != step) {
            self.checkpoint(&params, step, epoch, &mut log, &mut best)?;
        }
        log.final_eval = log.checkpoints.last().and_then(|c| c.eval);
        Ok(TrainRun { params, log, best })
    }

    fn checkpoint(
        &mut self,
        params: &ParameterSet<T>,
        step: usize,
        epoch: usize,
        log: &mut TrainLog,
        best: &mut Option<(CheckpointRecord, ParameterSet<T>)>,
    ) -> Result<()> {
        let eval = match self.eval {
            Some(d) => Some(evaluate(params, d)?),
            None => None,
        };
        let record = CheckpointRecord {
            step,
            epoch,
            eval,
            params_hash: params.content_hash(),
        };
        if let Some(e) = eval {
            let better = best
                .as_ref()
                .is_none_or(|(b, _)| e.loss < b.eval.map_or(f64::INFINITY, |x| x.loss));
            if better {
                *best = Some((record.clone(), params.clone()));
            }
        }
        if let Some(f) = self.on_checkpoint.as_mut() {
            f(&record, params)?;
        }
        log.checkpoints.push(record);
        Ok(())
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs a training job without evaluation or checkpoint callbacks.
pub fn train<T: Scalar>(
    params: &ParameterSet<T>,
    data: &Dataset,
    opts: &TrainOptions,
    mask: Option<&TrainingMask>,
) -> Result<(ParameterSet<T>, TrainLog)> {
    let run = Trainer::new(opts.clone()).mask(mask).run(params, data)?;
    Ok((run.params, run.log))
}

enum OptimizerState<T> {
    Sgd,
    Adam {
        beta1: T,
        beta2: T,
        eps: T,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    },
}

impl<T: Scalar> OptimizerState<T> {
    fn new(opt: &Optimizer, params: &ParameterSet<T>) -> Result<Self> {
        Ok(match *opt {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "bad Adam hyper-parameters β1={beta1} β2={beta2} ε={eps}"
                    )));
                }
                let zeros: Vec<Vec<T>> = params
                    .named_tensors()
                    .iter()
                    .map(|(_, t)| vec![T::zero(); t.numel()])
                    .collect();
                OptimizerState::Adam {
                    beta1: T::from_f64(beta1),
                    beta2: T::from_f64(beta2),
                    eps: T::from_f64(eps),
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        })
    }

    fn update(&mut self, params: &mut ParameterSet<T>, grads: &GradientMap<T>, lr: f64, step: usize) {
        let lr = T::from_f64(lr);
        let grads = grads.named_tensors();
        match self {
            OptimizerState::Sgd => {
                for ((_, p), (_, g)) in params.named_tensors_mut().into_iter().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * gv;
                    }
                }
            }
            OptimizerState::Adam { beta1, beta2, eps, m, v } => {
                let (b1, b2, eps) = (*beta1, *beta2, *eps);
                let one = T::one();
                let bc1 = one - b1.powi(step as i32);
                let bc2 = one - b2.powi(step as i32);
                let tensors = params.named_tensors_mut().into_iter().zip(grads);
                for (((_, p), (_, g)), (m, v)) in tensors.zip(m.iter_mut().zip(v.iter_mut())) {
                    for (((w, &gv), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (one - b1) * gv;
                        *vi = b2 * *vi + (one - b2) * gv * gv;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mean per-example cross-entropy and argmax accuracy over `data`.
pub fn evaluate<T: Scalar>(params: &ParameterSet<T>, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset has no examples".into()));
    }
    data.validate(&params.config)?;
    const CHUNK: usize = 256;
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in data.examples().chunks(CHUNK) {
        let logits = forward(params, chunk, false)?.logits;
        let labels: Vec<usize> = chunk.iter().map(|e| e.label as usize).collect();
        for (i, &y) in labels.iter().enumerate() {
            let row = Tensor::new(vec![1, logits.shape()[1]], logits.row(i).to_vec())?;
            total_loss += crate::model::loss(&row, &[y])?.to_f64();
        }
        correct += argmax_rows(&logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(EvalResult {
        loss: total_loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::io::Example;
    use crate::model::{ModelConfig, NeuronId};

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 4,
            d_hidden: 8,
            n_layers: 2,
            n_classes: 3,
            activation: Activation::Silu,
            seed: 3,
        }
    }

    fn data() -> Dataset {
        Dataset::new(
            (0..30u32)
                .map(|i| Example {
                    tokens: vec![i % 12, (i * 7 + 1) % 12, (i * 5 + 2) % 12],
                    label: i % 3,
                })
                .collect(),
        )
    }

    fn random_grads(seed: u64) -> GradientMap<f32> {
        ParameterSet::init(&ModelConfig { seed, ..config() }).unwrap()
    }

    #[test]
    fn full_mask_keeps_mlp_and_zeroes_embed_head() {
        let g = random_grads(11);
        let m = TrainingMask::new(NeuronMask::all(&g.config, 0));
        let out = apply_gradient_mask(g.clone(), &m).unwrap();
        assert_eq!(out.up, g.up);
        assert_eq!(out.down, g.down);
        assert!(out.embed.data().iter().all(|&x| x == 0.0));
        assert!(out.head.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_mask_zeroes_everything() {
        let g = random_grads(12);
        let m = TrainingMask::new(NeuronMask::new([], 0.0, "empty", 0, g.neuron_count()));
        let out = apply_gradient_mask(g, &m).unwrap();
        assert!(out.named_tensors().iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_row_survives() {
        let g = random_grads(13);
        let id = NeuronId::up(0, 3);
        let m = TrainingMask::new(NeuronMask::new([id], 0.0, "one", 0, g.neuron_count()));
        let out = apply_gradient_mask(g.clone(), &m).unwrap();
        let mut nonzero_rows = 0;
        for (_, t) in out.named_tensors() {
            let (r, _) = t.dims2().unwrap();
            nonzero_rows += (0..r).filter(|&i| t.row(i).iter().any(|&x| x != 0.0)).count();
        }
        assert_eq!(nonzero_rows, 1);
        assert_eq!(out.up[0].row(3), g.up[0].row(3));
    }

    #[test]
    fn out_of_range_mask_neuron() {
        let g = random_grads(14);
        let m = TrainingMask::new(NeuronMask::new([NeuronId::up(5, 0)], 0.0, "bad", 0, g.neuron_count()));
        assert!(matches!(apply_gradient_mask(g, &m), Err(Error::NeuronOutOfRange(_))));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let p = ParameterSet::<f32>::init(&config()).unwrap();
        for optimizer in [Optimizer::Sgd, Optimizer::adam()] {
            let opts = TrainOptions {
                max_steps: 20,
                batch_size: 4,
                learning_rate: 0.0,
                optimizer,
                ..TrainOptions::default()
            };
            let (q, _) = train(&p, &data(), &opts, None).unwrap();
            assert_eq!(q.content_hash(), p.content_hash());
        }
    }

    #[test]
    fn log_length_is_min_of_steps_and_epochs() {
        let p = ParameterSet::<f32>::init(&config()).unwrap();
        let opts = TrainOptions {
            max_steps: 100,
            batch_size: 7,
            max_epochs: Some(2),
            ..TrainOptions::default()
        };
        let (_, log) = train(&p, &data(), &opts, None).unwrap();
        // 30 examples in batches of 7: 5 batches per epoch.
        assert_eq!(log.steps.len(), 10);
        assert_eq!(log.epochs_completed, 2);
        let opts = TrainOptions { max_steps: 7, ..opts };
        let (_, log) = train(&p, &data(), &opts, None).unwrap();
        assert_eq!(log.steps.len(), 7);
        assert_eq!(log.steps.last().unwrap().step, 7);
    }

    #[test]
    fn checkpoints_at_epochs_and_end_with_best() {
        let p = ParameterSet::<f32>::init(&config()).unwrap();
        let opts = TrainOptions {
            max_steps: 12,
            batch_size: 10,
            learning_rate: 1e-2,
            ..TrainOptions::default()
        };
        let d = data();
        let mut seen = Vec::new();
        let run = Trainer::new(opts)
            .eval_set(Some(&d))
            .on_checkpoint(|c, _| {
                seen.push(c.step);
                Ok(())
            })
            .run(&p, &d)
            .unwrap();
        assert_eq!(seen, vec![3, 6, 9, 12]);
        let (best, best_params) = run.best.unwrap();
        let min = run
            .log
            .checkpoints
            .iter()
            .map(|c| c.eval.unwrap().loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best.eval.unwrap().loss, min);
        assert_eq!(best_params.content_hash(), best.params_hash);
        assert_eq!(run.log.final_eval, run.log.checkpoints.last().unwrap().eval);
    }

    #[test]
    fn empty_dataset_rejected() {
        let p = ParameterSet::<f32>::init(&config()).unwrap();
        let empty = Dataset::new(vec![]);
        assert!(matches!(train(&p, &empty, &TrainOptions::default(), None), Err(Error::Empty(_))));
        assert!(matches!(evaluate(&p, &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut p = ParameterSet::<f32>::init(&config()).unwrap();
        p.head.data_mut()[0] = f32::INFINITY;
        let opts = TrainOptions {
            max_steps: 3,
            batch_size: 4,
            shuffle: false,
            ..TrainOptions::default()
        };
        match train(&p, &data(), &opts, None) {
            Err(Error::NonFiniteLoss { step, batch, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(batch, vec![0, 1, 2, 3]);
            }
            other => panic!("expected NonFiniteLoss, got {:?}", other.err()),
        }
    }

    #[test]
    fn evaluate_accuracy_extremes() {
        let p = ParameterSet::<f32>::init(&config()).unwrap();
        let d = data();
        let logits = forward(&p, d.examples(), false).unwrap().logits;
        let preds = argmax_rows(&logits).unwrap();
        let relabelled = Dataset::new(
            d.examples()
                .iter()
                .zip(&preds)
                .map(|(e, &y)| Example { tokens: e.tokens.clone(), label: y as u32 })
                .collect(),
        );
        assert_eq!(evaluate(&p, &relabelled).unwrap().accuracy, 1.0);
        let wrong = Dataset::new(vec![Example {
            tokens: d.examples()[0].tokens.clone(),
            label: ((preds[0] + 1) % 3) as u32,
        }]);
        assert_eq!(evaluate(&p, &wrong).unwrap().accuracy, 0.0);
        assert_eq!(evaluate(&p, &d).unwrap(), evaluate(&p, &d).unwrap());
    }
}
