//! The alternating training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::losses::{distance_tables, loss_phi_var, loss_theta_var, regularizer_var, task_losses_var};
use super::optim::{ascent_step, directional_derivative, Adam};
use super::{metric_forward, Model, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::layers::block::RelationVars;
use crate::layers::htan::{htan_encode, relations_forward};
use crate::spd::{orthogonality_defect, SpdReport};
use crate::params::ParamKind;
use crate::tensor::Tensor;

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean training `ℓ_t` per task over the epoch's batches.
    pub task_loss: Vec<f64>,
    pub task_acc: Vec<f64>,
    /// Mean unweighted penalty `‖D‖₁,₁` over batches.
    pub reg_value: f64,
    /// Mean adversarial objective over batches (0 for one task).
    pub ltheta_value: f64,
    pub wall_ms: u64,
}

/// Diagnostics of one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss_phi: f64,
    pub reg_value: f64,
    pub ltheta_value: f64,
    /// `∇L_Φ · ΔΦ` at the pre-step point.
    pub phi_directional: f64,
    /// `∇L_Θ · ΔΘ` at the pre-step point, when Θ was updated.
    pub theta_directional: Option<f64>,
    /// Smallest eigenvalue over every metric computed this batch.
    pub min_metric_eigenvalue: f64,
    pub max_metric_asymmetry: f64,
    /// Largest `‖WWᵀ − I‖∞` after the Θ update.
    pub stiefel_defect: f64,
    /// Θ checksum unchanged by the Φ update and vice versa.
    pub disjoint: bool,
}

/// Owns the model, the optimiser state and the batch order.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: Adam,
    shuffle: ChaCha8Rng,
    batches_done: usize,
    epoch: usize,
    pub steps: Vec<StepLog>,
}

fn detach_all(tape: &mut Tape, vars: &[Var]) -> Vec<Var> {
    vars.iter().map(|&v| tape.detach(v)).collect()
}

fn accuracy(logits: &Tensor, targets: &[usize]) -> usize {
    (0..logits.rows())
        .filter(|&r| argmax_row(logits.row(r)) == targets[r])
        .count()
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if model.config().tasks != config.tasks {
            return Err(Error::DimMismatch {
                field: "tasks".into(),
                expected: config.tasks,
                found: model.config().tasks,
            });
        }
        let mut adam = Adam::new(config.lr_phi, model.phi.scalar_count());
        adam.beta1 = config.momentum;
        let shuffle = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self {
            config,
            model,
            adam,
            shuffle,
            batches_done: 0,
            epoch: 0,
            steps: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn check_data(&self, data: &SequenceBatch) -> Result<()> {
        let c = self.model.config();
        for (field, expected, found) in [
            ("tasks", c.tasks, data.tasks()),
            ("input_dim", c.d_in, data.spec.input_dim),
            ("classes", c.classes, data.spec.classes),
        ] {
            if expected != found {
                return Err(Error::DimMismatch {
                    field: field.into(),
                    expected,
                    found,
                });
            }
        }
        if data.sequences() == 0 {
            return Err(Error::Invalid("empty dataset".into()));
        }
        Ok(())
    }

    /// One pass over `data` in shuffled mini-batches.
    pub fn train_epoch(&mut self, data: &SequenceBatch) -> Result<MetricsRecord> {
        self.check_data(data)?;
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.sequences()).collect();
        order.shuffle(&mut self.shuffle);
        let t = self.config.tasks;
        let mut loss_sum = vec![0.0; t];
        let mut correct = vec![0usize; t];
        let mut seen = 0usize;
        let (mut reg_sum, mut lt_sum) = (0.0, 0.0);
        let chunks: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        for (b, rows) in chunks.iter().enumerate() {
            let out = self.train_batch(data, rows, b)?;
            for k in 0..t {
                loss_sum[k] += out.task_loss[k] * rows.len() as f64;
                correct[k] += out.correct[k];
            }
            seen += rows.len();
            reg_sum += out.log.reg_value;
            lt_sum += out.log.ltheta_value;
            self.steps.push(out.log);
        }
        self.epoch += 1;
        let slots = (seen * data.seq_len()) as f64;
        let nb = chunks.len() as f64;
        Ok(MetricsRecord {
            epoch: self.epoch,
            task_loss: loss_sum.iter().map(|s| s / seen as f64).collect(),
            task_acc: correct.iter().map(|&c| c as f64 / slots).collect(),
            reg_value: reg_sum / nb,
            ltheta_value: lt_sum / nb,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// One Φ step and, on schedule, one Θ step.
    fn train_batch(&mut self, data: &SequenceBatch, rows: &[usize], batch: usize) -> Result<BatchOutcome> {
        let cfg = &self.config;
        let tasks = cfg.tasks;
        let slots = data.seq_len();
        let multi = tasks >= 2;
        let do_theta = multi && cfg.theta_period.is_some_and(|p| self.batches_done.is_multiple_of(p));

        // Φ step: Θ bound as constants.
        let mut tape = Tape::new();
        let phi = self.model.phi.bind(&mut tape, true);
        let theta = self.model.theta.bind(&mut tape, false);
        let relations = relations_forward(&mut tape, &self.model.htan, &phi, slots)?;
        let mut reg = None;
        let mut metric_vars = Vec::new();
        let mut ltheta = 0.0;
        if multi {
            let betas: Vec<Vec<Var>> = relations
                .iter()
                .map(|r| {
                    if cfg.detach_metric {
                        detach_all(&mut tape, &r.beta)
                    } else {
                        r.beta.clone()
                    }
                })
                .collect();
            metric_vars = metric_forward(&mut tape, &self.model, &theta, &betas)?;
            let alphas: Vec<Vec<Vec<Var>>> = relations.iter().map(|r| r.alpha.clone()).collect();
            let tables = distance_tables(&mut tape, &alphas, &metric_vars)?;
            reg = Some(regularizer_var(&mut tape, &tables)?);
            let lt = loss_theta_var(&mut tape, &tables)?;
            ltheta = tape.scalar(lt);
        }
        let relation_values = snapshot(&tape, &relations);
        let inputs: Vec<Var> = (0..slots)
            .map(|n| tape.constant(data.batch_inputs(rows, n)))
            .collect();
        let vars = htan_encode(&mut tape, &self.model.htan, &phi, relations, &inputs)?;
        let targets: Vec<Vec<Vec<usize>>> = (0..tasks)
            .map(|k| (0..slots).map(|n| data.batch_labels(k, rows, n)).collect())
            .collect();
        let task_losses = task_losses_var(&mut tape, &vars.logits, &targets)?;
        let total = loss_phi_var(&mut tape, &task_losses, reg, cfg.lambda)?;
        let loss_value = tape.scalar(total);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("network loss at epoch {} batch {batch}", self.epoch + 1),
            });
        }
        let mut correct = vec![0usize; tasks];
        for k in 0..tasks {
            for n in 0..slots {
                correct[k] += accuracy(tape.value(vars.logits[k][n]), &targets[k][n]);
            }
        }
        let task_loss: Vec<f64> = task_losses.iter().map(|&v| tape.scalar(v)).collect();
        let reg_value = reg.map_or(0.0, |r| tape.scalar(r));
        let (mut min_eig, mut max_asym) = (f64::INFINITY, 0.0f64);
        for m in metric_vars.iter().flatten() {
            let report = SpdReport::of(tape.value(*m))?;
            min_eig = min_eig.min(report.min_eigenvalue);
            max_asym = max_asym.max(report.asymmetry);
        }
        let grads = tape.backward(total)?;
        self.model.phi.store_grads(&phi, &grads);
        drop(tape);

        let theta_sum = self.model.theta.checksum();
        let g_phi = self.model.phi.flatten_grads();
        let delta = self.adam.step(&mut self.model.phi)?;
        let phi_directional = directional_derivative(&g_phi, &delta);
        let mut disjoint = theta_sum == self.model.theta.checksum();

        let mut theta_directional = None;
        if do_theta {
            let phi_sum = self.model.phi.checksum();
            let mut tape = Tape::new();
            let theta = self.model.theta.bind(&mut tape, true);
            let betas: Vec<Vec<Var>> = relation_values
                .iter()
                .map(|(b, _)| b.iter().map(|x| tape.constant(x.clone())).collect())
                .collect();
            let alphas: Vec<Vec<Vec<Var>>> = relation_values
                .iter()
                .map(|(_, a)| {
                    a.iter()
                        .map(|slot| slot.iter().map(|x| tape.constant(x.clone())).collect())
                        .collect()
                })
                .collect();
            let metrics = metric_forward(&mut tape, &self.model, &theta, &betas)?;
            let tables = distance_tables(&mut tape, &alphas, &metrics)?;
            let lt = loss_theta_var(&mut tape, &tables)?;
            if !tape.scalar(lt).is_finite() {
                return Err(Error::NonFinite {
                    context: format!("adversarial loss at epoch {} batch {batch}", self.epoch + 1),
                });
            }
            let grads = tape.backward(lt)?;
            self.model.theta.store_grads(&theta, &grads);
            let g_theta = self.model.theta.flatten_grads();
            let delta = ascent_step(&mut self.model.theta, self.config.lr_theta)?;
            theta_directional = Some(directional_derivative(&g_theta, &delta));
            disjoint &= phi_sum == self.model.phi.checksum();
        }
        let stiefel_defect = self
            .model
            .theta
            .ids()
            .filter(|&id| self.model.theta.kind(id) == ParamKind::Stiefel)
            .map(|id| orthogonality_defect(self.model.theta.get(id)))
            .fold(0.0, f64::max);
        self.batches_done += 1;
        Ok(BatchOutcome {
            task_loss,
            correct,
            log: StepLog {
                epoch: self.epoch + 1,
                batch,
                loss_phi: loss_value,
                reg_value,
                ltheta_value: ltheta,
                phi_directional,
                theta_directional,
                min_metric_eigenvalue: if metric_vars.is_empty() { f64::NAN } else { min_eig },
                max_metric_asymmetry: max_asym,
                stiefel_defect,
                disjoint,
            },
        })
    }
}

struct BatchOutcome {
    task_loss: Vec<f64>,
    correct: Vec<usize>,
    log: StepLog,
}

type RelationValues = (Vec<Tensor>, Vec<Vec<Tensor>>);

fn snapshot(tape: &Tape, relations: &[RelationVars]) -> Vec<RelationValues> {
    relations
        .iter()
        .map(|r| {
            (
                r.beta.iter().map(|&v| tape.value(v).clone()).collect(),
                r.alpha
                    .iter()
                    .map(|slot| slot.iter().map(|&v| tape.value(v).clone()).collect())
                    .collect(),
            )
        })
        .collect()
}

/// Per-task metrics of a forward pass over a whole split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task_loss: Vec<f64>,
    pub task_acc: Vec<f64>,
    /// Predicted class per `[task][sequence][slot]`, flattened.
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn mean_loss(&self) -> f64 {
        self.task_loss.iter().sum::<f64>() / self.task_loss.len() as f64
    }
}

const EVAL_CHUNK: usize = 50;

/// Forward pass over every sequence; no parameter changes.
pub fn evaluate(model: &Model, data: &SequenceBatch) -> Result<EvalReport> {
    let c = model.config();
    if c.tasks != data.tasks() || c.d_in != data.spec.input_dim || c.classes != data.spec.classes {
        return Err(Error::DimMismatch {
            field: "dataset".into(),
            expected: c.d_in,
            found: data.spec.input_dim,
        });
    }
    let (tasks, slots, seqs) = (c.tasks, data.seq_len(), data.sequences());
    let mut loss = vec![0.0; tasks];
    let mut correct = vec![0usize; tasks];
    let mut predictions = vec![0usize; tasks * seqs * slots];
    let all: Vec<usize> = (0..seqs).collect();
    for rows in all.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let phi = model.phi.bind(&mut tape, false);
        let relations = relations_forward(&mut tape, &model.htan, &phi, slots)?;
        let inputs: Vec<Var> = (0..slots).map(|n| tape.constant(data.batch_inputs(rows, n))).collect();
        let vars = htan_encode(&mut tape, &model.htan, &phi, relations, &inputs)?;
        for k in 0..tasks {
            for n in 0..slots {
                let targets = data.batch_labels(k, rows, n);
                let ce = tape.softmax_cross_entropy(vars.logits[k][n], &targets)?;
                loss[k] += tape.scalar(ce) * rows.len() as f64;
                let z = tape.value(vars.logits[k][n]);
                for (i, &b) in rows.iter().enumerate() {
                    let p = argmax_row(z.row(i));
                    predictions[(k * seqs + b) * slots + n] = p;
                    correct[k] += usize::from(p == targets[i]);
                }
            }
        }
    }
    let total = (seqs * slots) as f64;
    Ok(EvalReport {
        task_loss: loss.iter().map(|l| l / total).collect(),
        task_acc: correct.iter().map(|&c| c as f64 / total).collect(),
        predictions,
    })
}
