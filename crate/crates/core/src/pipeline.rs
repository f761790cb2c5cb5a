//! End-to-end experiment steps: pre-train, fine-tune per task with a given
//! method, then compose and evaluate the task vectors.

use serde::{Deserialize, Serialize};

use crate::data::{generate_suite, Suite, SuiteConfig, TaskDataset};
use crate::eval::{self, EvalSet};
use crate::mask::{calibrate, Calibration, CalibrationConfig, SelectionMode, SparseMask};
use crate::models::{Activation, FlatParams, Model, ModelConfig, ModelFamily};
use crate::task_vector::{
    self, alpha_grid, apply_with_hash, make, posthoc_breadcrumbs, posthoc_dare, posthoc_ties,
    AlphaChoice, NegationChoice, TaskVector,
};
use crate::train::{
    pretrain, train_linearized, train_sparse, Optimizer, TrainConfig, TrainOutcome,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Talos,
    FullFt,
    LinearizedFt,
    Lota,
    RandomMask,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Talos => "talos",
            Method::FullFt => "full_ft",
            Method::LinearizedFt => "linearized_ft",
            Method::Lota => "lota",
            Method::RandomMask => "random_mask",
        }
    }

    /// Mask selection rule, for the methods that calibrate one.
    pub fn selection(self) -> Option<SelectionMode> {
        match self {
            Method::Talos => Some(SelectionMode::BottomK),
            Method::Lota => Some(SelectionMode::TopK),
            Method::RandomMask => Some(SelectionMode::Random),
            Method::FullFt | Method::LinearizedFt => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "talos" => Method::Talos,
            "full_ft" => Method::FullFt,
            "linearized_ft" => Method::LinearizedFt,
            "lota" => Method::Lota,
            "random_mask" => Method::RandomMask,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

/// Architecture settings; dimensions and head count come from the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub hidden_dim: usize,
    #[serde(default = "one")]
    pub num_heads: usize,
    #[serde(default = "one")]
    pub hidden_layers: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub hidden_bias: f64,
}

fn one() -> usize {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: ModelFamily::Mlp,
            hidden_dim: 64,
            num_heads: 1,
            hidden_layers: 2,
            activation: Activation::Gelu,
            hidden_bias: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosthocKind {
    #[default]
    None,
    Ties,
    Dare,
    Breadcrumbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosthocConfig {
    #[serde(default)]
    pub kind: PosthocKind,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default = "default_drop")]
    pub drop_fraction: f64,
    #[serde(default = "default_outlier")]
    pub outlier_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_keep() -> f64 {
    0.2
}
fn default_drop() -> f64 {
    0.9
}
fn default_outlier() -> f64 {
    0.01
}

impl Default for PosthocConfig {
    fn default() -> Self {
        PosthocConfig {
            kind: PosthocKind::None,
            keep_fraction: default_keep(),
            drop_fraction: default_drop(),
            outlier_fraction: default_outlier(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Fraction of maskable coordinates frozen by mask-based methods.
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "default_finetune")]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default)]
    pub posthoc: PosthocConfig,
    /// Disentanglement grid over (α1, α2).
    #[serde(default)]
    pub grid: eval::GridSpec,
}

fn default_method() -> Method {
    Method::Talos
}
fn default_sparsity() -> f64 {
    0.9
}

/// Pre-training on the shifted mixture, short enough to leave headroom for
/// fine-tuning.
pub fn default_pretrain() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        iterations: 600,
        batch_size: 32,
        optimizer: Optimizer::Adamw,
        weight_decay: 0.0,
        warmup_steps: 10,
        cosine_schedule: true,
        ..TrainConfig::default()
    }
}

pub fn default_finetune() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-4,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: default_method(),
            sparsity: default_sparsity(),
            seed: 0,
            suite: SuiteConfig::default(),
            model: ModelSpec::default(),
            pretrain: default_pretrain(),
            finetune: default_finetune(),
            calibration: None,
            posthoc: PosthocConfig::default(),
            grid: eval::GridSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Propagates the top-level seed into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.suite.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        if let Some(c) = self.calibration.as_mut() {
            c.seed = seed;
        }
        self.posthoc.seed = seed;
        self.grid.seed = seed;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            family: self.model.family,
            input_dim: self.suite.input_dim,
            hidden_dim: self.model.hidden_dim,
            num_heads: self.model.num_heads,
            num_classes: self.suite.classes_per_task,
            hidden_layers: self.model.hidden_layers,
            task_heads: self.suite.num_tasks + 1,
            activation: self.model.activation,
            hidden_bias: self.model.hidden_bias,
            seed: self.seed,
        }
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        let mut c = self
            .calibration
            .clone()
            .unwrap_or_else(|| CalibrationConfig {
                seed: self.seed,
                ..CalibrationConfig::with_sparsity(self.sparsity)
            });
        c.keep_fraction = 1.0 - self.sparsity;
        c
    }

    /// Sparsity actually targeted by `method`.
    pub fn effective_sparsity(&self) -> f64 {
        if self.method.selection().is_some() {
            self.sparsity
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity {} not in [0, 1)",
                self.sparsity
            )));
        }
        self.model_config().validate()?;
        self.suite.regions()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.calibration_config().validate()
    }
}

/// Suite, model and pre-trained parameters.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub suite: Suite,
    pub model: Model,
    pub theta0: FlatParams,
}

impl Pretrained {
    pub fn task(&self, t: usize) -> Result<&TaskDataset> {
        self.suite.tasks.get(t).ok_or_else(|| {
            Error::Config(format!(
                "task {t} out of range for {} tasks",
                self.suite.tasks.len()
            ))
        })
    }

    pub fn control(&self) -> &TaskDataset {
        &self.suite.control
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let suite = generate_suite(&cfg.suite)?;
    let (model, init) = Model::build(cfg.model_config())?;
    let outcome = pretrain(&model, &init, &suite.pretrain, &cfg.pretrain)?;
    Ok(Pretrained {
        suite,
        model,
        theta0: outcome.params,
    })
}

#[derive(Clone, Debug)]
pub struct FineTuned {
    pub task_id: usize,
    pub method: Method,
    pub mask: SparseMask,
    pub calibration: Option<Calibration>,
    pub outcome: TrainOutcome,
    pub vector: TaskVector,
}

/// Calibrates a mask when the method needs one.
pub fn method_mask(
    pre: &Pretrained,
    cfg: &ExperimentConfig,
    t: usize,
) -> Result<(SparseMask, Option<Calibration>)> {
    let task = pre.task(t)?;
    match cfg.method.selection() {
        None => Ok((SparseMask::full(pre.model.layout()), None)),
        Some(mode) => {
            let c = calibrate(
                &pre.model,
                &pre.theta0,
                &task.val,
                task.head,
                &cfg.calibration_config(),
                mode,
            )?;
            Ok((c.mask.clone(), Some(c)))
        }
    }
}

/// Fine-tunes task `t` with a precomputed mask.
pub fn finetune_with_mask(
    pre: &Pretrained,
    cfg: &ExperimentConfig,
    t: usize,
    mask: SparseMask,
    calibration: Option<Calibration>,
) -> Result<FineTuned> {
    let task = pre.task(t)?;
    let outcome = match cfg.method {
        Method::LinearizedFt => train_linearized(
            &pre.model,
            &pre.theta0,
            &mask,
            &task.train,
            task.head,
            &cfg.finetune,
        )?,
        _ => train_sparse(
            &pre.model,
            &pre.theta0,
            &mask,
            &task.train,
            Some(&task.val),
            task.head,
            &cfg.finetune,
        )?,
    };
    let vector = make(&outcome.params, &pre.theta0)?.with_metadata(
        t,
        cfg.method.as_str(),
        &task_vector::config_hash(cfg)?,
        cfg.effective_sparsity(),
    );
    Ok(FineTuned {
        task_id: t,
        method: cfg.method,
        mask,
        calibration,
        outcome,
        vector,
    })
}

pub fn finetune(pre: &Pretrained, cfg: &ExperimentConfig, t: usize) -> Result<FineTuned> {
    let (mask, calibration) = method_mask(pre, cfg, t)?;
    finetune_with_mask(pre, cfg, t, mask, calibration)
}

pub fn finetune_all(pre: &Pretrained, cfg: &ExperimentConfig) -> Result<Vec<FineTuned>> {
    (0..pre.suite.tasks.len())
        .map(|t| finetune(pre, cfg, t))
        .collect()
}

/// Applies the configured per-vector post-hoc edit (TIES is a merge and is
/// handled by [`addition`]).
pub fn posthoc_edit(v: &TaskVector, cfg: &PosthocConfig) -> Result<TaskVector> {
    match cfg.kind {
        PosthocKind::None | PosthocKind::Ties => Ok(v.clone()),
        PosthocKind::Dare => posthoc_dare(
            v,
            cfg.drop_fraction,
            cfg.seed.wrapping_add(v.task_id as u64),
        ),
        PosthocKind::Breadcrumbs => posthoc_breadcrumbs(v, cfg.keep_fraction, cfg.outlier_fraction),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditionReport {
    pub method: String,
    pub alpha: AlphaChoice,
    pub zero_shot: Vec<f64>,
    /// Test accuracy of `θ0 + τ_t` on task `t`.
    pub single_task: Vec<f64>,
    /// Test accuracy of the merged model on each task.
    pub absolute: Vec<f64>,
    pub absolute_mean: f64,
    pub normalized: f64,
}

fn task_sets(
    tasks: &[TaskDataset],
    split: fn(&TaskDataset) -> &crate::data::Samples,
) -> Vec<EvalSet<'_>> {
    tasks
        .iter()
        .map(|t| EvalSet::new(split(t), t.head))
        .collect()
}

/// Multi-task addition with one shared α tuned on validation splits for
/// normalized accuracy, reported on test splits.
pub fn addition(
    pre: &Pretrained,
    vectors: &[TaskVector],
    posthoc: &PosthocConfig,
) -> Result<AdditionReport> {
    let tasks: Vec<TaskDataset> = vectors
        .iter()
        .map(|v| pre.task(v.task_id).cloned())
        .collect::<Result<_>>()?;
    let hash = pre.theta0.content_hash();
    let model = &pre.model;
    let edited: Vec<TaskVector> = vectors
        .iter()
        .map(|v| posthoc_edit(v, posthoc))
        .collect::<Result<_>>()?;
    let merged: Vec<TaskVector> = if posthoc.kind == PosthocKind::Ties && edited.len() >= 2 {
        let refs: Vec<&TaskVector> = edited.iter().collect();
        vec![posthoc_ties(&refs, posthoc.keep_fraction)?]
    } else {
        edited
    };
    let sparsity = vectors
        .iter()
        .map(|v| v.target_sparsity)
        .fold(f64::INFINITY, f64::min);
    let grid = alpha_grid(if sparsity.is_finite() { sparsity } else { 0.0 })?;
    let val = task_sets(&tasks, |t| &t.val);
    let test = task_sets(&tasks, |t| &t.test);

    let single = |sets: &[EvalSet<'_>]| -> Result<Vec<f64>> {
        vectors
            .iter()
            .zip(sets)
            .map(|(v, s)| {
                eval::accuracy(
                    model,
                    &apply_with_hash(&pre.theta0, &hash, &[(1.0, v)])?,
                    *s,
                )
            })
            .collect()
    };
    let merged_acc = |alpha: f64, sets: &[EvalSet<'_>]| -> Result<Vec<f64>> {
        let terms: Vec<(f64, &TaskVector)> = merged.iter().map(|v| (alpha, v)).collect();
        let p = apply_with_hash(&pre.theta0, &hash, &terms)?;
        sets.iter().map(|s| eval::accuracy(model, &p, *s)).collect()
    };
    let single_val = single(&val)?;
    let alpha = task_vector::tune_alpha_addition(&grid, |a| {
        eval::normalized_accuracy(&merged_acc(a, &val)?, &single_val)
    })?;
    let single_task = single(&test)?;
    let absolute = merged_acc(alpha.alpha, &test)?;
    let zero_shot = test
        .iter()
        .map(|s| eval::accuracy(model, &pre.theta0, *s))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdditionReport {
        method: vectors
            .first()
            .map(|v| v.method.clone())
            .unwrap_or_default(),
        normalized: eval::normalized_accuracy(&absolute, &single_task)?,
        absolute_mean: absolute.iter().sum::<f64>() / absolute.len().max(1) as f64,
        alpha,
        zero_shot,
        single_task,
        absolute,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationReport {
    pub method: String,
    pub task_id: usize,
    pub choice: NegationChoice,
    pub target_zero_shot: f64,
    pub control_zero_shot: f64,
    pub target_test: f64,
    pub control_test: f64,
}

/// Forgets task `vector.task_id` with `θ0 − α τ`, α tuned on validation
/// splits under the control-retention constraint.
pub fn negation(pre: &Pretrained, vector: &TaskVector) -> Result<NegationReport> {
    let target = pre.task(vector.task_id)?;
    let control = pre.control();
    let hash = pre.theta0.content_hash();
    let model = &pre.model;
    let grid = alpha_grid(vector.target_sparsity)?;
    let eval_pair =
        |alpha: f64, split: fn(&TaskDataset) -> &crate::data::Samples| -> Result<(f64, f64)> {
            let p = apply_with_hash(&pre.theta0, &hash, &[(-alpha, vector)])?;
            Ok((
                eval::accuracy(model, &p, EvalSet::new(split(target), target.head))?,
                eval::accuracy(model, &p, EvalSet::new(split(control), control.head))?,
            ))
        };
    let control_val0 =
        eval::accuracy(model, &pre.theta0, EvalSet::new(&control.val, control.head))?;
    let choice =
        task_vector::tune_alpha_negation(&grid, control_val0, |a| eval_pair(a, |t| &t.val))?;
    let (target_test, control_test) = eval_pair(choice.alpha, |t| &t.test)?;
    let (target_zero_shot, control_zero_shot) = eval_pair(0.0, |t| &t.test)?;
    Ok(NegationReport {
        method: vector.method.clone(),
        task_id: vector.task_id,
        choice,
        target_zero_shot,
        control_zero_shot,
        target_test,
        control_test,
    })
}

/// Edited checkpoints `θ0 + τ_t`, one per vector.
pub fn edited_params(pre: &Pretrained, vectors: &[TaskVector]) -> Result<Vec<FlatParams>> {
    let hash = pre.theta0.content_hash();
    vectors
        .iter()
        .map(|v| apply_with_hash(&pre.theta0, &hash, &[(1.0, v)]))
        .collect()
}

/// Localization matrix over the test splits of the vectors' tasks.
pub fn localization(pre: &Pretrained, vectors: &[TaskVector]) -> Result<eval::Matrix> {
    let tasks: Vec<&TaskDataset> = vectors
        .iter()
        .map(|v| pre.task(v.task_id))
        .collect::<Result<_>>()?;
    let sets: Vec<EvalSet<'_>> = tasks
        .iter()
        .map(|t| EvalSet::new(&t.test, t.head))
        .collect();
    eval::localization_matrix(
        &pre.model,
        &pre.theta0,
        &edited_params(pre, vectors)?,
        &sets,
    )
}

/// Disentanglement grid of the first two vectors on their test splits.
pub fn disentanglement(
    pre: &Pretrained,
    a: &TaskVector,
    b: &TaskVector,
    spec: &eval::GridSpec,
) -> Result<eval::EvalGrid> {
    let ta = pre.task(a.task_id)?;
    let tb = pre.task(b.task_id)?;
    let d = eval::Disentanglement::new(
        &pre.model,
        &pre.theta0,
        [a, b],
        [
            EvalSet::new(&ta.test, ta.head),
            EvalSet::new(&tb.test, tb.head),
        ],
        spec.sample_cap,
        spec.seed,
    )?;
    d.grid(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.suite.num_tasks = 2;
        cfg.suite.samples_per_class = 30;
        cfg.suite.input_dim = 4;
        cfg.model.hidden_dim = 8;
        cfg.pretrain.iterations = 20;
        cfg.finetune.iterations = 10;
        cfg
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [
            Method::Talos,
            Method::FullFt,
            Method::LinearizedFt,
            Method::Lota,
            Method::RandomMask,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn zero_vectors_reproduce_zero_shot() {
        let cfg = tiny();
        let pre = prepare(&cfg).unwrap();
        let zero: Vec<TaskVector> = (0..2)
            .map(|t| {
                make(&pre.theta0, &pre.theta0)
                    .unwrap()
                    .with_metadata(t, "none", "", 0.0)
            })
            .collect();
        let rep = addition(&pre, &zero, &PosthocConfig::default()).unwrap();
        assert_eq!(rep.absolute, rep.zero_shot);
        let neg = negation(&pre, &zero[0]).unwrap();
        assert_eq!(neg.target_test, neg.target_zero_shot);
        assert_eq!(neg.choice.alpha, 0.0);
    }

    #[test]
    fn talos_vector_within_mask() {
        let cfg = tiny();
        let pre = prepare(&cfg).unwrap();
        let ft = finetune(&pre, &cfg, 0).unwrap();
        assert!(ft.vector.nnz() <= ft.mask.kept_count());
        let keep = crate::numeric::floor_count(0.1, ft.mask.maskable_count());
        assert_eq!(ft.mask.kept_count(), keep);
    }
}
