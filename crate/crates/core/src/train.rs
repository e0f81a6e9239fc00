//! Optimisation, freezing policies, training loop, transfer protocol and
//! ablation runner.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{
    apply_attribute_dropout, AttributeAssignment, AttributeSchema, DropoutGranularity,
};
use crate::data::{self, Instance, Metric};
use crate::encoder::{argmax, batch_loss_scales, example_loss, nll, Model, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::injector::{Aggregation, InjectionMode, WeightSynthesis};
use crate::params::{Ctx, ParamGroup, ParamLayout, ParamSpec, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::text::Tokenizer;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezePolicy {
    #[serde(rename = "none")]
    None,
    #[default]
    #[serde(rename = "backbone_frozen")]
    BackboneFrozen,
    /// Only task adapters and classifiers train.
    #[serde(rename = "backbone+attr_adapters_frozen")]
    BackboneAndAttrAdaptersFrozen,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "backbone_frozen" => Ok(Self::BackboneFrozen),
            "backbone+attr_adapters_frozen" => Ok(Self::BackboneAndAttrAdaptersFrozen),
            _ => Err(Error::Config(format!("unknown freeze policy `{s}`"))),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::BackboneFrozen => "backbone_frozen",
            Self::BackboneAndAttrAdaptersFrozen => "backbone+attr_adapters_frozen",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then linear decay to zero at `total_steps`.
    #[default]
    LinearDecay,
    /// Linear warmup, then constant.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub learning_rate: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed of the stand-in pretrained encoder weights.
    pub backbone_seed: u64,
    pub freeze_policy: FreezePolicy,
    pub train_layer_norm: bool,
    pub r_drop: f64,
    pub drop_granularity: DropoutGranularity,
    pub eval_every: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; none by default.
    pub grad_clip: Option<f64>,
    pub metric: Metric,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            total_steps: 2000,
            warmup_steps: 200,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
            backbone_seed: 1234,
            freeze_policy: FreezePolicy::BackboneFrozen,
            train_layer_norm: true,
            r_drop: 0.2,
            drop_granularity: DropoutGranularity::Attribute,
            eval_every: 200,
            schedule: LrSchedule::LinearDecay,
            grad_clip: None,
            metric: Metric::Accuracy,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps = {} exceeds total_steps = {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.r_drop) {
            return Err(Error::Config("r_drop must be in [0, 1]".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate applied by the update at `step` (0-based).
pub fn learning_rate_at(plan: &TrainPlan, step: usize) -> f64 {
    let peak = plan.learning_rate;
    if step < plan.warmup_steps {
        return peak * step as f64 / plan.warmup_steps as f64;
    }
    match plan.schedule {
        LrSchedule::Constant => peak,
        LrSchedule::LinearDecay => {
            if plan.total_steps <= plan.warmup_steps {
                return peak;
            }
            let left = plan.total_steps.saturating_sub(step) as f64;
            peak * left / (plan.total_steps - plan.warmup_steps) as f64
        }
    }
}

/// Which parameters a policy trains.
pub fn trainable_mask(
    layout: &ParamLayout,
    policy: FreezePolicy,
    train_layer_norm: bool,
) -> Vec<bool> {
    layout
        .specs()
        .iter()
        .map(|s| is_trainable(s, policy, train_layer_norm))
        .collect()
}

fn is_trainable(spec: &ParamSpec, policy: FreezePolicy, train_layer_norm: bool) -> bool {
    use ParamGroup::*;
    match policy {
        FreezePolicy::None => true,
        FreezePolicy::BackboneFrozen => match spec.group {
            Embedding | Backbone => false,
            LayerNorm => train_layer_norm,
            TaskAdapter | AttrAdapter | AttrEmbedding | AttrToken | Classifier => true,
        },
        FreezePolicy::BackboneAndAttrAdaptersFrozen => {
            matches!(spec.group, TaskAdapter | Classifier)
        }
    }
}

/// Parameter totals of a layout under a trainable mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
    /// Token, position, attribute and attribute-token tables.
    pub lookup_tables: usize,
    pub lookup_tables_trainable: usize,
    pub classifier: usize,
    pub classifier_trainable: usize,
}

impl ParamCensus {
    pub fn new(layout: &ParamLayout, mask: &[bool]) -> Self {
        let mut c = ParamCensus {
            total: 0,
            trainable: 0,
            lookup_tables: 0,
            lookup_tables_trainable: 0,
            classifier: 0,
            classifier_trainable: 0,
        };
        for (s, &m) in layout.specs().iter().zip(mask) {
            let n = s.numel();
            c.total += n;
            c.trainable += usize::from(m) * n;
            match s.group {
                ParamGroup::Embedding | ParamGroup::AttrEmbedding | ParamGroup::AttrToken => {
                    c.lookup_tables += n;
                    c.lookup_tables_trainable += usize::from(m) * n;
                }
                ParamGroup::Classifier => {
                    c.classifier += n;
                    c.classifier_trainable += usize::from(m) * n;
                }
                _ => {}
            }
        }
        c
    }

    /// Trainable share of the network body: lookup tables and classifier
    /// heads are left out of both counts.
    pub fn body_fraction(&self) -> f64 {
        let total = self.total - self.lookup_tables - self.classifier;
        let trainable = self.trainable - self.lookup_tables_trainable - self.classifier_trainable;
        if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        }
    }
}

/// Adam moments, allocated on first update of each parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    t: Vec<u32>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
        }
    }
}

/// Decoupled-weight-decay Adam update at schedule step `step`. Weight decay
/// applies to matrices only, not to biases and layer-norm vectors.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    plan: &TrainPlan,
    step: usize,
) -> Result<()> {
    if grads.len() != params.layout().len() || state.t.len() != grads.len() {
        return Err(Error::Contract(
            "gradient and state sizes must match the parameter store".into(),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.layout().specs()[i].name.clone(),
                    step,
                });
            }
        }
    }
    let clip = match plan.grad_clip {
        Some(max) => {
            let norm = grads
                .iter()
                .flatten()
                .map(|g| {
                    g.data()
                        .iter()
                        .map(|x| x.to_f64_lossy().powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = learning_rate_at(plan, step);
    let (b1, b2): (T, T) = (c(ADAM_BETA1), c(ADAM_BETA2));
    let (one, eps, clip_t): (T, T, T) = (T::one(), c(ADAM_EPS), c(clip));
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let bc1: T = c(1.0 - ADAM_BETA1.powi(t));
        let bc2: T = c(1.0 - ADAM_BETA2.powi(t));
        let decay = params.layout().specs()[i].shape.len() >= 2;
        let wd: T = c(if decay { lr * plan.weight_decay } else { 0.0 });
        let lr_t: T = c(lr);
        let p = params.get_mut(crate::params::ParamId(i));
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g * clip_t;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps) - wd * *p;
        }
    }
    Ok(())
}

/// A tokenised instance ready for the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub attributes: AttributeAssignment,
    pub labels: Vec<usize>,
}

pub fn encode_instances(tok: &Tokenizer, instances: &[Instance]) -> Vec<Example> {
    instances
        .iter()
        .map(|i| Example {
            tokens: tok.encode(&i.text),
            attributes: i.attributes.clone(),
            labels: i.labels.clone(),
        })
        .collect()
}

/// Keeps only the labels of `tasks`, in that order.
pub fn select_tasks(examples: &[Example], tasks: &[usize]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| Example {
            labels: tasks.iter().map(|&t| e.labels[t]).collect(),
            ..e.clone()
        })
        .collect()
}

/// Empties every attribute of every example.
pub fn mask_attributes(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| Example {
            attributes: AttributeAssignment::empty(e.attributes.len()),
            ..e.clone()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// The plan's metric.
    pub score: f64,
    pub accuracy_per_task: Vec<f64>,
    pub predictions: Vec<Vec<usize>>,
    /// `logits[i][t]` for example `i`, task `t`.
    pub logits: Vec<Vec<Vec<f64>>>,
}

pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    data: &[Example],
    metric: Metric,
) -> Result<Evaluation> {
    let n_tasks = model.n_tasks();
    let mut preds = Vec::with_capacity(data.len());
    let mut logits = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let cfg = &model.config.encoder;
    let refs: Vec<&[usize]> = data.iter().map(|e| e.labels.as_slice()).collect();
    let scales = batch_loss_scales(cfg, &refs)?;
    for (e, s) in data.iter().zip(&scales) {
        let out = model.logits(params, &e.tokens, &e.attributes)?;
        preds.push(out.iter().map(argmax).collect::<Vec<_>>());
        for ((l, &y), &w) in out.iter().zip(&e.labels).zip(s) {
            loss += w * nll(l, y);
        }
        logits.push(
            out.iter()
                .map(|l| l.data().iter().map(|x| x.to_f64_lossy()).collect())
                .collect(),
        );
    }
    let gold: Vec<Vec<usize>> = data.iter().map(|e| e.labels.clone()).collect();
    let accuracy_per_task = (0..n_tasks)
        .map(|t| {
            let p: Vec<usize> = preds.iter().map(|p: &Vec<usize>| p[t]).collect();
            let g: Vec<usize> = gold.iter().map(|g| g[t]).collect();
            data::accuracy(&p, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    let score = if data.is_empty() {
        0.0
    } else {
        data::metrics(&preds, &gold, metric)?
    };
    Ok(Evaluation {
        loss,
        score,
        accuracy_per_task,
        predictions: preds,
        logits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters at the best dev evaluation (the initial ones for 0 steps).
    pub best: ParamStore<T>,
    pub last: ParamStore<T>,
    pub best_step: usize,
    pub best_dev: Option<f64>,
    pub log: Vec<LogRow>,
}

/// Trains with the plan's freeze policy.
pub fn train<T: Scalar>(
    model: &Model,
    init: ParamStore<T>,
    train_set: &[Example],
    dev: &[Example],
    plan: &TrainPlan,
) -> Result<TrainOutcome<T>> {
    let mask = trainable_mask(model.layout(), plan.freeze_policy, plan.train_layer_norm);
    train_with_mask(model, init, train_set, dev, plan, &mask)
}

/// Trains the parameters selected by `mask`; the others stay bit-identical.
pub fn train_with_mask<T: Scalar>(
    model: &Model,
    init: ParamStore<T>,
    train_set: &[Example],
    dev: &[Example],
    plan: &TrainPlan,
    mask: &[bool],
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    if mask.len() != init.layout().len() {
        return Err(Error::Contract(
            "mask length differs from parameter count".into(),
        ));
    }
    if plan.total_steps > 0 && train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut params = init;
    let mut state = AdamState::new(mask.len());
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_step = 0;
    let mut best_dev = None;
    let mut record_dev =
        |step: usize, params: &ParamStore<T>, log: &mut Vec<LogRow>| -> Result<()> {
            if dev.is_empty() {
                return Ok(());
            }
            let ev = evaluate(model, params, dev, plan.metric)?;
            log.push(LogRow {
                step,
                split: "dev".into(),
                loss: ev.loss,
                score: ev.score,
            });
            if best_dev.is_none_or(|b| ev.score > b) {
                best_dev = Some(ev.score);
                best = params.clone();
                best_step = step;
            }
            Ok(())
        };
    record_dev(0, &params, &mut log)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let (mut window_loss, mut window_correct, mut window_n) = (0.0, 0usize, 0usize);
    let use_attrs = model.config.uses_attributes();
    for step in 0..plan.total_steps {
        let mut batch = Vec::with_capacity(plan.batch_size);
        while batch.len() < plan.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let refs: Vec<&[usize]> = batch.iter().map(|e| e.labels.as_slice()).collect();
        let scales = batch_loss_scales(&model.config.encoder, &refs)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; mask.len()];
        let mut batch_loss = 0.0;
        for (e, s) in batch.iter().zip(&scales) {
            let attrs = if use_attrs {
                apply_attribute_dropout(&e.attributes, plan.r_drop, plan.drop_granularity, &mut rng)
            } else {
                e.attributes.clone()
            };
            let mut ctx = Ctx::new(&params, Some(mask));
            let logits = model.forward(&mut ctx, &e.tokens, &attrs, Some(&mut rng))?;
            for (&l, &y) in logits.iter().zip(&e.labels) {
                window_correct += usize::from(argmax(ctx.tape.value(l)) == y);
            }
            let st: Vec<T> = s.iter().map(|&x| c(x)).collect();
            let loss = example_loss(&mut ctx, &logits, &e.labels, &st)?;
            batch_loss += ctx.tape.value(loss).item().to_f64_lossy();
            let mut g = ctx.tape.backward(loss)?;
            for (acc, g) in grads.iter_mut().zip(ctx.param_grads(&mut g)) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.add_assign(&g)?,
                        None => *acc = Some(g),
                    }
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
            });
        }
        adamw_step(&mut params, &grads, &mut state, plan, step)?;
        window_loss += batch_loss;
        window_n += 1;
        let done = step + 1;
        if (plan.eval_every > 0 && done % plan.eval_every == 0) || done == plan.total_steps {
            log.push(LogRow {
                step: done,
                split: "train".into(),
                loss: window_loss / window_n as f64,
                score: window_correct as f64
                    / (window_n * plan.batch_size * model.n_tasks()) as f64,
            });
            (window_loss, window_correct, window_n) = (0.0, 0, 0);
            record_dev(done, &params, &mut log)?;
        }
    }
    if dev.is_empty() {
        best = params.clone();
        best_step = plan.total_steps;
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_step,
        best_dev,
        log,
    })
}

/// Train/dev/test examples for one task set over one attribute schema.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub schema: AttributeSchema,
    pub class_counts: Vec<usize>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn select(&self, tasks: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            class_counts: tasks.iter().map(|&t| self.class_counts[t]).collect(),
            train: select_tasks(&self.train, tasks),
            dev: select_tasks(&self.dev, tasks),
            test: select_tasks(&self.test, tasks),
        }
    }
}

fn model_for(base: &ModelConfig, data: &TaskData) -> Result<Model> {
    let mut cfg = base.clone();
    cfg.encoder.class_counts = data.class_counts.clone();
    if cfg
        .encoder
        .class_weights
        .as_ref()
        .is_some_and(|w| w.len() != data.class_counts.len())
    {
        cfg.encoder.class_weights = None;
    }
    Model::new(cfg, data.schema.clone())
}

/// Trains a fresh model on `data` and scores it on the test split.
pub fn fit_and_score<T: Scalar>(
    base: &ModelConfig,
    data: &TaskData,
    plan: &TrainPlan,
) -> Result<(Model, TrainOutcome<T>, Evaluation)> {
    let model = model_for(base, data)?;
    let init = model.init_params::<T>(plan.backbone_seed, plan.seed);
    let out = train(&model, init, &data.train, &data.dev, plan)?;
    let ev = evaluate(&model, &out.best, &data.test, plan.metric)?;
    Ok((model, out, ev))
}

fn is_attribute_module(s: &ParamSpec) -> bool {
    matches!(s.group, ParamGroup::AttrAdapter | ParamGroup::AttrEmbedding)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_score: f64,
    pub direct: f64,
    pub transferred: f64,
    /// `100 · (transferred − direct) / direct`.
    pub delta_pct: f64,
    pub n_copied: usize,
    pub frozen_unchanged: bool,
}

/// Trains a source model, moves its attribute adapters and embeddings into
/// a fresh target model, freezes them and trains only the target's task
/// adapters and classifier. Also trains the target directly for reference.
pub fn transfer_experiment<T: Scalar>(
    base: &ModelConfig,
    source: &TaskData,
    target: &TaskData,
    plan: &TrainPlan,
) -> Result<TransferReport> {
    if !source.schema.compatible_with(&target.schema) {
        return Err(Error::Schema(
            "source and target attribute schemas differ".into(),
        ));
    }
    if base.kind != ModelKind::Injectors {
        return Err(Error::Config("transfer needs an injector model".into()));
    }
    let direct_plan = TrainPlan {
        freeze_policy: FreezePolicy::BackboneFrozen,
        ..plan.clone()
    };
    let (_, src_out, src_ev) = fit_and_score::<T>(base, source, &direct_plan)?;
    let (_, _, direct) = fit_and_score::<T>(base, target, &direct_plan)?;

    let model = model_for(base, target)?;
    let mut init = model.init_params::<T>(plan.backbone_seed, plan.seed);
    let n_copied = init.load_named(src_out.best.named(), is_attribute_module)?;
    let frozen_before = init.checksum(is_attribute_module);
    let transfer_plan = TrainPlan {
        freeze_policy: FreezePolicy::BackboneAndAttrAdaptersFrozen,
        ..plan.clone()
    };
    let out = train(&model, init, &target.train, &target.dev, &transfer_plan)?;
    let frozen_unchanged = out.best.checksum(is_attribute_module) == frozen_before
        && out.last.checksum(is_attribute_module) == frozen_before;
    let transferred = evaluate(&model, &out.best, &target.test, plan.metric)?;
    Ok(TransferReport {
        source_score: src_ev.score,
        direct: direct.score,
        transferred: transferred.score,
        delta_pct: if direct.score > 0.0 {
            100.0 * (transferred.score - direct.score) / direct.score
        } else {
            0.0
        },
        n_copied,
        frozen_unchanged,
    })
}

/// Bytes needed to train every parameter of `layout`: values, gradients
/// and two Adam moments.
pub fn training_bytes(layout: &ParamLayout, scalar_bytes: usize) -> u128 {
    layout.total() as u128 * scalar_bytes as u128 * 4
}

/// Fails with [`Error::OutOfMemory`] when training `layout` would exceed
/// `budget_bytes`.
pub fn check_memory(
    layout: &ParamLayout,
    scalar_bytes: usize,
    budget_bytes: u128,
    what: &str,
) -> Result<()> {
    let required = training_bytes(layout, scalar_bytes);
    if required > budget_bytes {
        return Err(Error::OutOfMemory {
            what: what.to_string(),
            required_bytes: required,
            budget_bytes,
        });
    }
    Ok(())
}

pub const DEFAULT_MEMORY_BUDGET: u128 = 8 << 30;

/// Model variants compared by the ablation runner, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoBiasInjection,
    NoWeightInjection,
    NoTaskAdapter,
    NoAttributeDrop,
    NoPostAggregation,
    NoPhm,
    NoLowRank,
}

impl Ablation {
    pub const TOGGLES: [Ablation; 7] = [
        Ablation::NoBiasInjection,
        Ablation::NoWeightInjection,
        Ablation::NoTaskAdapter,
        Ablation::NoAttributeDrop,
        Ablation::NoPostAggregation,
        Ablation::NoPhm,
        Ablation::NoLowRank,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full model",
            Ablation::NoBiasInjection => "- bias injection",
            Ablation::NoWeightInjection => "- weight injection",
            Ablation::NoTaskAdapter => "- task adapter",
            Ablation::NoAttributeDrop => "- attribute drop",
            Ablation::NoPostAggregation => "- post-aggregation",
            Ablation::NoPhm => "- PHM",
            Ablation::NoLowRank => "- low-rank",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig, plan: &mut TrainPlan) {
        let inj = &mut cfg.injector;
        match self {
            Ablation::Full => {}
            Ablation::NoBiasInjection => inj.injection = InjectionMode::WeightOnly,
            Ablation::NoWeightInjection => inj.injection = InjectionMode::BiasOnly,
            Ablation::NoTaskAdapter => inj.task_adapter = false,
            Ablation::NoAttributeDrop => plan.r_drop = 0.0,
            Ablation::NoPostAggregation => inj.aggregation = Aggregation::Pre,
            Ablation::NoPhm => inj.synthesis = WeightSynthesis::LowRankOnly,
            Ablation::NoLowRank => inj.synthesis = WeightSynthesis::Naive,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .trim_start_matches(['-', '−', ' '])
            .to_lowercase()
            .replace(['_', ' '], "-");
        Ok(match norm.as_str() {
            "full" | "full-model" => Ablation::Full,
            "bias-injection" | "no-bias-injection" => Ablation::NoBiasInjection,
            "weight-injection" | "no-weight-injection" => Ablation::NoWeightInjection,
            "task-adapter" | "no-task-adapter" => Ablation::NoTaskAdapter,
            "attribute-drop" | "no-attribute-drop" => Ablation::NoAttributeDrop,
            "post-aggregation" | "no-post-aggregation" => Ablation::NoPostAggregation,
            "phm" | "no-phm" => Ablation::NoPhm,
            "low-rank" | "no-low-rank" => Ablation::NoLowRank,
            _ => return Err(Error::Config(format!("unknown ablation `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AblationStatus {
    Completed {
        dev: Option<f64>,
        test: f64,
        n_params: usize,
        n_trainable: usize,
    },
    OutOfMemory {
        required_bytes: u128,
        budget_bytes: u128,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub label: String,
    pub result: AblationStatus,
}

/// Trains and scores each variant with the same seeds and data. Variants
/// whose parameters would not fit in `budget_bytes` are reported as out of
/// memory without allocating anything.
pub fn run_ablation<T: Scalar>(
    base: &ModelConfig,
    data: &TaskData,
    plan: &TrainPlan,
    variants: &[Ablation],
    budget_bytes: u128,
) -> Result<Vec<AblationRow>> {
    let mut variants = variants.to_vec();
    variants.sort();
    variants.dedup();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let (mut cfg, mut p) = (base.clone(), plan.clone());
        v.apply(&mut cfg, &mut p);
        let model = model_for(&cfg, data)?;
        let result = match check_memory(
            model.layout(),
            std::mem::size_of::<T>(),
            budget_bytes,
            v.label(),
        ) {
            Err(Error::OutOfMemory {
                required_bytes,
                budget_bytes,
                ..
            }) => AblationStatus::OutOfMemory {
                required_bytes,
                budget_bytes,
            },
            Err(e) => return Err(e),
            Ok(()) => {
                let init = model.init_params::<T>(p.backbone_seed, p.seed);
                let out = train(&model, init, &data.train, &data.dev, &p)?;
                let ev = evaluate(&model, &out.best, &data.test, p.metric)?;
                let mask = trainable_mask(model.layout(), p.freeze_policy, p.train_layer_norm);
                AblationStatus::Completed {
                    dev: out.best_dev,
                    test: ev.score,
                    n_params: model.layout().total(),
                    n_trainable: model
                        .layout()
                        .specs()
                        .iter()
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|(s, _)| s.numel())
                        .sum(),
                }
            }
        };
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            result,
        });
    }
    Ok(rows)
}

/// Hyperparameter grid: every combination is trained and scored on dev.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub adapter_sizes: Vec<usize>,
    pub n_dims: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3],
            adapter_sizes: vec![8],
            n_dims: vec![2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub d_a: usize,
    pub n_dims: usize,
    pub dev: Option<f64>,
    pub test: f64,
}

pub fn run_grid<T: Scalar>(
    base: &ModelConfig,
    data: &TaskData,
    plan: &TrainPlan,
    grid: &Grid,
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &lr in &grid.learning_rates {
        for &d_a in &grid.adapter_sizes {
            for &o in &grid.n_dims {
                let mut cfg = base.clone();
                cfg.injector.d_a = d_a;
                cfg.injector.n_dims = o;
                let p = TrainPlan {
                    learning_rate: lr,
                    ..plan.clone()
                };
                let (_, out, ev) = fit_and_score::<T>(&cfg, data, &p)?;
                rows.push(GridRow {
                    learning_rate: lr,
                    d_a,
                    n_dims: o,
                    dev: out.best_dev,
                    test: ev.score,
                });
            }
        }
    }
    Ok(rows)
}
