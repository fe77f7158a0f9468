use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{FeallmModel, PreparedImage};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGroup, Tensor};
use crate::region_cropper::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Alignment pretraining: only the LCA and projector learn.
    Pretrain,
    /// Instruction tuning: LCA, projector and LoRA adapters learn.
    Finetune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Finetune),
            _ => Err(Error::Invalid(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::Pretrain => &[ParamGroup::Lca, ParamGroup::Mpp],
            Stage::Finetune => &[ParamGroup::Lca, ParamGroup::Mpp, ParamGroup::Lora],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub lca: f64,
    pub mpp: f64,
    pub lora: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            lca: lr,
            mpp: lr,
            lora: lr,
        }
    }

    fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Lca => self.lca,
            ParamGroup::Mpp => self.mpp,
            ParamGroup::Lora => self.lora,
            ParamGroup::LanguageModel | ParamGroup::Other => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: LearningRates,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set; batches keep cycling through epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    /// Stop once a batch loss falls below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

fn default_optimizer() -> Optimizer {
    Optimizer::Sgd
}

impl StageConfig {
    /// Alignment pretraining schedule: lr 1e-3, batch 64, one epoch.
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: LearningRates {
                lca: 1e-3,
                mpp: 1e-3,
                lora: 0.0,
            },
            batch_size: 64,
            epochs: 1,
            max_steps: None,
            optimizer: Optimizer::Sgd,
            target_loss: None,
        }
    }

    /// Instruction tuning schedule: lr 2e-5 for LCA and projector, 2e-4 for
    /// LoRA, batch 16, one epoch.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: LearningRates {
                lca: 2e-5,
                mpp: 2e-5,
                lora: 2e-4,
            },
            batch_size: 16,
            epochs: 1,
            max_steps: None,
            optimizer: Optimizer::Sgd,
            target_loss: None,
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::Invalid("need at least one epoch or a step budget".into()));
        }
        for (name, lr) in [("lca", self.lr.lca), ("mpp", self.lr.mpp), ("lora", self.lr.lora)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Invalid(format!(
                    "learning rate {name} = {lr} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// One image/question/answer training triple.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_id: String,
    pub image: ImageTensor,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub stage: Stage,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub aborted: Option<AbortRecord>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn record(&self) -> StageRecord {
        StageRecord {
            stage: self.stage,
            steps: self.steps.len(),
            final_loss: self.final_loss(),
            seed: self.seed,
            aborted: self.aborted.is_some(),
        }
    }

    /// `Err(TrainingAborted)` when the run stopped on a non-finite value.
    pub fn into_result(self) -> Result<Self> {
        match &self.aborted {
            Some(a) => Err(Error::TrainingAborted {
                step: a.step,
                reason: a.reason.clone(),
            }),
            None => Ok(self),
        }
    }
}

/// Loss of one example and its per-parameter gradients.
type ExampleGrads = (f64, Vec<(usize, Tensor<f64>)>);

struct Prepared {
    image: usize,
    instruction: Vec<usize>,
    response: Vec<usize>,
}

struct AdamState {
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    t: i32,
}

/// Train the stage's parameter groups on `data`; everything else stays
/// bitwise unchanged. On a non-finite loss or update the run stops and the
/// model keeps its last finite parameters.
pub fn train_stage(model: &mut FeallmModel, data: &[Example], stage: &StageConfig, seed: u64) -> Result<TrainingLog> {
    stage.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut image_index: HashMap<&str, usize> = HashMap::new();
    let mut images: Vec<PreparedImage> = Vec::new();
    let mut examples = Vec::with_capacity(data.len());
    for ex in data {
        let image = match image_index.get(ex.image_id.as_str()) {
            Some(&i) => i,
            None => {
                images.push(model.prepare(&ex.image)?);
                image_index.insert(&ex.image_id, images.len() - 1);
                images.len() - 1
            }
        };
        examples.push(Prepared {
            image,
            instruction: model.instruction_ids(&ex.question),
            response: model.response_ids(&ex.answer)?,
        });
    }

    model.params.set_trainable_groups(stage.stage.trainable_groups());
    let lrs: Vec<f64> = model
        .params
        .iter()
        .map(|p| if p.trainable { stage.lr.for_group(p.group) } else { 0.0 })
        .collect();
    let mut adam = AdamState {
        m: model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        v: model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        t: 0,
    };

    let steps_per_epoch = data.len().div_ceil(stage.batch_size);
    let total_steps = stage.max_steps.unwrap_or(stage.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainingLog {
        stage: stage.stage,
        seed,
        steps: Vec::new(),
        aborted: None,
    };

    for step in 0..total_steps {
        let epoch = step / steps_per_epoch;
        let in_epoch = step % steps_per_epoch;
        if in_epoch == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let end = ((in_epoch + 1) * stage.batch_size).min(order.len());
        let batch = &order[in_epoch * stage.batch_size..end];

        let results: Vec<Result<ExampleGrads>> = {
            let model: &FeallmModel = model;
            batch
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let mut g = Graph::new(&model.params);
                    let loss = model.loss_node(&mut g, &images[ex.image], &ex.instruction, &ex.response)?;
                    let value = g.value(loss).data()[0];
                    if !value.is_finite() {
                        return Ok((value, Vec::new()));
                    }
                    g.backward(loss)?;
                    Ok((value, g.param_grads()))
                })
                .collect()
        };

        let mut batch_loss = 0.0;
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; model.params.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut abort = None;
        for r in results {
            let (loss, example_grads) = match r {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    abort = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                abort = Some(format!("loss is {loss}"));
                break;
            }
            batch_loss += loss * scale;
            for (pid, grad) in example_grads {
                let grad = grad.scale(scale);
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot => *slot = Some(grad),
                }
            }
        }
        if let Some(reason) = abort {
            log.aborted = Some(AbortRecord { step, reason });
            break;
        }

        let updates = compute_updates(model, &grads, &lrs, stage.optimizer, &mut adam);
        if let Some(name) = updates
            .iter()
            .find(|(_, v)| v.data().iter().any(|x| !x.is_finite()))
            .map(|(pid, _)| model.params.by_index(*pid).name.clone())
        {
            log.aborted = Some(AbortRecord {
                step,
                reason: format!("update of {name} is not finite"),
            });
            break;
        }
        for (pid, value) in updates {
            model.params.by_index_mut(pid).value = value;
        }
        log.steps.push(StepRecord {
            step,
            epoch,
            loss: batch_loss,
        });
        if stage.target_loss.is_some_and(|t| batch_loss < t) {
            break;
        }
    }
    model.params.set_trainable_groups(&[]);
    Ok(log)
}

/// New values for every parameter with a nonzero learning rate and a gradient.
fn compute_updates(
    model: &FeallmModel,
    grads: &[Option<Tensor<f64>>],
    lrs: &[f64],
    optimizer: Optimizer,
    adam: &mut AdamState,
) -> Vec<(usize, Tensor<f64>)> {
    adam.t += 1;
    let mut out = Vec::new();
    for (pid, grad) in grads.iter().enumerate() {
        let (Some(grad), lr) = (grad, lrs[pid]) else { continue };
        if lr == 0.0 {
            continue;
        }
        let value = &model.params.by_index(pid).value;
        let new = match optimizer {
            Optimizer::Sgd => value
                .zip_map(grad, |w, g| w - lr * g)
                .expect("gradient shape matches parameter"),
            Optimizer::Adam { beta1, beta2, eps } => {
                let m = &mut adam.m[pid];
                let v = &mut adam.v[pid];
                let bc1 = 1.0 - beta1.powi(adam.t);
                let bc2 = 1.0 - beta2.powi(adam.t);
                let mut new = value.clone();
                for i in 0..grad.len() {
                    let g = grad.data()[i];
                    let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                    let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    new.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                }
                new
            }
        };
        out.push((pid, new));
    }
    out
}
