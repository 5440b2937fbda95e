//! Training loop: Adam with continuous exponential decay, seeded epoch
//! shuffles with wraparound batching, milestone evaluation and checkpoints.
//!
//! All randomness is derived from (seed, step, slot) counters, so a resumed
//! run replays the exact remaining step sequence of an uninterrupted one.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::classifier::{averaged_nll, sampled_nll};
use crate::dataset::QuestionRecord;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::evaluator;
use crate::features::FeatureSet;
use crate::model::Model;
use crate::par;
use crate::rng::{self, tag, SeedStream};
use crate::tensor::graph::Graph;
use crate::tensor::store::{GradientMap, ParamStore};
use crate::tensor::{Real, Tensor};

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.saac";

pub fn milestone_checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step}.saac")
}

/// `l_step = 0.5^(step/decay_steps) · l0`, continuous in `step`. Whole
/// halvings are applied as exact multiplications by 0.5 so the values at
/// multiples of `decay_steps` are exact.
pub fn learning_rate(step: u64, l0: f64, decay_steps: u64) -> f64 {
    assert!(decay_steps > 0, "decay_steps must be positive");
    let q = (step / decay_steps).min(4096) as i32;
    let r = step % decay_steps;
    let mut lr = l0 * 0.5f64.powi(q);
    if r != 0 {
        lr *= 0.5f64.powf(r as f64 / decay_steps as f64);
    }
    lr
}

/// First/second moment estimates per parameter, plus the update counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Real> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are left
/// untouched, moments included.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let ob1 = T::from_f64(1.0 - beta1);
    let ob2 = T::from_f64(1.0 - beta2);
    let c1 = T::from_f64(1.0 - beta1.powi(t));
    let c2 = T::from_f64(1.0 - beta2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(epsilon);

    for (name, grad) in grads.iter() {
        let param = store.get_mut(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient for unknown parameter {name:?}"))
        })?;
        if param.shape() != grad.shape() {
            return Err(Error::InvalidShape(format!(
                "gradient shape {:?} does not match parameter {name:?} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let (pd, md, vd, gd) = (param.data_mut(), m.data_mut(), v.data_mut(), grad.data());
        for i in 0..gd.len() {
            let g = gd[i];
            md[i] = b1 * md[i] + ob1 * g;
            vd[i] = b2 * vd[i] + ob2 * g * g;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] = pd[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Scale all gradients so their global l2 norm is at most `max_norm`.
fn clip_gradients<T: Real>(grads: &mut GradientMap<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            let x = v.to_f64s();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(T::from_f64(max_norm / norm));
    }
}

/// Shuffled index order for one epoch, a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::seeded_rng(rng::derive_seed(seed, &[tag::SHUFFLE, epoch]));
    order.shuffle(&mut rng);
    order
}

struct TrainExample {
    seq: TokenSequence,
    image_id: u64,
    answer_ids: Vec<usize>,
}

/// Keep records that are labelled, tokenizable, covered by the feature set,
/// and have at least one in-vocabulary answer.
fn prepare_examples<T: Real>(
    model: &Model<T>,
    records: &[QuestionRecord],
    features: &FeatureSet<T>,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for record in records {
        if !record.is_labelled() || !features.contains_key(&record.image_id) {
            continue;
        }
        let answer_ids = model.answer_ids(record);
        if answer_ids.is_empty() {
            continue;
        }
        if let Ok(seq) = model.tokenize_question(&record.text) {
            out.push(TrainExample {
                seq,
                image_id: record.image_id,
                answer_ids,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no trainable examples among {} records (unlabelled, out-of-vocabulary, \
             untokenizable, or missing features)",
            records.len()
        )));
    }
    Ok(out)
}

fn example_loss_and_grads<T: Real>(
    model: &Model<T>,
    features: &FeatureSet<T>,
    example: &TrainExample,
    step: u64,
    slot: u64,
) -> Result<(f64, GradientMap<T>)> {
    let fm = features
        .get(&example.image_id)
        .ok_or_else(|| Error::InvalidState(format!("feature map {} vanished", example.image_id)))?;
    let mut g = Graph::new();
    let mut seeds = SeedStream::new(model.config.seed, &[tag::DROPOUT, step, slot]);
    let out = model.forward(&mut g, &example.seq, fm, true, &mut seeds)?;
    let loss = if model.config.sampled_loss {
        let pick = rng::derive_seed(model.config.seed, &[tag::SAMPLE_LOSS, step, slot]);
        sampled_nll(&mut g, &out.dist, &example.answer_ids, pick)?
    } else {
        averaged_nll(&mut g, &out.dist, &example.answer_ids)?
    };
    let grads = g.backward(loss, &model.store)?;
    Ok((g.scalar_value(loss).to_f64s(), grads))
}

/// One training step row; `eval_accuracy` is filled at milestones only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,train_loss,eval_accuracy\n");
    for r in rows {
        let acc = r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.train_loss, acc));
    }
    out
}

/// Run steps `start_step..config.total_steps`. Batches are drawn from
/// per-epoch shuffles with wraparound so every step sees exactly
/// `batch_size` examples; the gradient is the batch mean. At milestones the
/// model is evaluated (dropout off) on `eval_records` and, when `out_dir` is
/// set, checkpointed; a final checkpoint is always written at the end.
pub fn train<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    train_records: &[QuestionRecord],
    eval_records: &[QuestionRecord],
    features: &FeatureSet<T>,
    start_step: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    model.config.validate()?;
    let cfg = model.config.clone();
    let examples = prepare_examples(model, train_records, features)?;
    let n = examples.len() as u64;
    let b = cfg.batch_size;
    let milestones = cfg.effective_milestones();
    let mut rows = Vec::new();
    let mut shuffles: BTreeMap<u64, Vec<usize>> = BTreeMap::new();

    for step in start_step..cfg.total_steps {
        let base = step * b as u64;
        shuffles.retain(|&e, _| e >= base / n);
        let batch: Vec<usize> = (0..b as u64)
            .map(|j| {
                let p = base + j;
                let order = shuffles
                    .entry(p / n)
                    .or_insert_with(|| epoch_order(n as usize, cfg.seed, p / n));
                order[(p % n) as usize]
            })
            .collect();

        let frozen: &Model<T> = model;
        let results = par::map_indexed(b, |j| {
            example_loss_and_grads(frozen, features, &examples[batch[j]], step, j as u64)
        });
        let mut grads = GradientMap::new();
        let mut loss_sum = 0.0f64;
        for r in results {
            let (loss, g) = r?;
            loss_sum += loss;
            grads.add_assign(&g)?;
        }
        let train_loss = loss_sum / b as f64;
        let lr = learning_rate(step, cfg.l0, cfg.decay_steps);
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "step {step}: batch loss {train_loss} (lr {lr}, batch {batch:?})"
            )));
        }
        grads.scale(T::from_f64(1.0 / b as f64));
        if let Some(max_norm) = cfg.grad_clip {
            clip_gradients(&mut grads, max_norm);
        }
        adam_step(
            &mut model.store,
            &grads,
            adam,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_epsilon,
        )?;

        let completed = step + 1;
        let mut eval_accuracy = None;
        if milestones.contains(&completed) {
            if !eval_records.is_empty() {
                eval_accuracy = Some(evaluator::evaluate(model, eval_records, features)?.overall);
            }
            if let Some(dir) = out_dir {
                let ckpt = snapshot(model, adam, completed)?;
                save_checkpoint(&ckpt, &dir.join(milestone_checkpoint_name(completed)))?;
            }
        }
        rows.push(MetricsRow {
            step: completed,
            lr,
            train_loss,
            eval_accuracy,
        });
    }

    if let Some(dir) = out_dir {
        let end = cfg.total_steps.max(start_step);
        let ckpt = snapshot(model, adam, end)?;
        save_checkpoint(&ckpt, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(rows)
}

/// Capture parameters and optimizer moments as f32 checkpoint blobs.
pub fn snapshot<T: Real>(model: &Model<T>, adam: &AdamState<T>, step: u64) -> Result<Checkpoint> {
    let mut blobs: Vec<(String, Tensor<f32>)> = Vec::new();
    for (name, t) in model.store.iter() {
        blobs.push((name.clone(), t.cast()));
    }
    for (name, t) in &adam.m {
        blobs.push((format!("adam.m.{name}"), t.cast()));
    }
    for (name, t) in &adam.v {
        blobs.push((format!("adam.v.{name}"), t.cast()));
    }
    Checkpoint::new(model.config.clone(), step, blobs)
}

/// Load checkpoint blobs into a model built from the same config. Every model
/// parameter must be present with its exact shape; unknown blobs are errors.
pub fn restore<T: Real>(ckpt: &Checkpoint, model: &mut Model<T>) -> Result<AdamState<T>> {
    for (name, param) in model.store.iter_mut() {
        let blob = ckpt
            .blob(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter blob {name:?}")))?;
        if blob.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "blob {name:?} has shape {:?}, model expects {:?}",
                blob.shape(),
                param.shape()
            )));
        }
        *param = blob.cast::<T>().with_requires_grad();
    }
    let mut adam = AdamState::new();
    adam.step = ckpt.step;
    for (name, blob) in ckpt.blobs() {
        let (target, param_name) = if let Some(p) = name.strip_prefix("adam.m.") {
            (&mut adam.m, p)
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            (&mut adam.v, p)
        } else if model.store.contains(name) {
            continue;
        } else {
            return Err(Error::Checkpoint(format!(
                "blob {name:?} matches no model parameter"
            )));
        };
        let param = model.store.get(param_name).ok_or_else(|| {
            Error::Checkpoint(format!("moment blob {name:?} matches no model parameter"))
        })?;
        if blob.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "moment blob {name:?} has shape {:?}, parameter has {:?}",
                blob.shape(),
                param.shape()
            )));
        }
        target.insert(param_name.to_string(), blob.cast());
    }
    Ok(adam)
}
