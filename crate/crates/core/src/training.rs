//! Training algorithms for the cascade: the no-feedback baseline, the
//! iterative feed-forward/feedback trainer, exact and surrogate feedback
//! modes, importance-weighted heterogeneous datasets, and target-specific
//! importance selection by cross validation.
//!
//! The latent first-layer outputs Z are initialized from ground truth and
//! re-estimated each outer iteration by per-sample convex minimization
//! (hard EM with MAP latents). First-layer classifiers are re-fit on the
//! continuous latents by score regression; the built-ins accept score
//! targets directly, so latents are never thresholded.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, LatentState, Standardization, MODEL_SCHEMA};
use crate::classifiers::{learn, ClassifierKind, ClassifierParams, Target, DEFAULT_L2};
use crate::error::{Error, Result};
use crate::metrics::{metric_score, signed_metric};
use crate::optimize::{lasso_fit, minimize, DescentConfig, SurrogateModel};
use crate::tasks::{Label, LabelSpace, MultiTaskDataset, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Exact,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instantiation {
    Unified,
    OneGoal(usize),
    TargetSpecific,
}

/// How the surrogate sparsity weight is chosen when fitting alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPolicy {
    Fixed(f64),
    /// Grid {0, 1e-3, 1e-2, 1e-1, 1} scaled by ||X^T y||_inf / rows, picked
    /// by hold-out squared error on a deterministic quarter of the rows.
    HoldOutGrid,
}

/// Which targets the surrogate alpha is regressed on: the second layer's
/// actual score outputs, or the ground-truth label encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateTarget {
    ModelOutput,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub max_outer_iters: usize,
    pub feedback_mode: FeedbackMode,
    /// Explicit importance factors over tasks; when absent they are derived
    /// from the instantiation.
    pub pi: Option<Vec<f64>>,
    pub instantiation: Instantiation,
    pub inner: DescentConfig,
    pub beta_policy: BetaPolicy,
    pub surrogate_target: SurrogateTarget,
    /// Relative tolerance on the joint objective (exact mode) or on the
    /// hold-out metric plateau (surrogate mode).
    pub tol: f64,
    pub seed: u64,
    /// Score margin used to encode ground-truth labels as latent vectors.
    pub margin: f64,
    pub l2_penalty: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            max_outer_iters: 5,
            feedback_mode: FeedbackMode::Exact,
            pi: None,
            instantiation: Instantiation::Unified,
            inner: DescentConfig {
                max_iters: 500,
                rel_tol: 1e-10,
                ..DescentConfig::default()
            },
            beta_policy: BetaPolicy::HoldOutGrid,
            surrogate_target: SurrogateTarget::ModelOutput,
            tol: 1e-4,
            seed: 0,
            margin: 4.0,
            l2_penalty: DEFAULT_L2,
        }
    }
}

/// Classifier kind per task for each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKinds {
    pub first: BTreeMap<usize, ClassifierKind>,
    pub second: BTreeMap<usize, ClassifierKind>,
}

impl LayerKinds {
    /// Same-kind defaults: multinomial for categorical tasks, ridge for
    /// regression, on both layers.
    pub fn default_for(specs: &[TaskSpec]) -> Self {
        let pick = |s: &TaskSpec| match s.label_space {
            LabelSpace::Categorical(_) => ClassifierKind::MultinomialLogistic,
            LabelSpace::ScalarRegression => ClassifierKind::RidgeRegression,
        };
        let first = specs.iter().map(|s| (s.task_id, pick(s))).collect();
        let second = specs.iter().map(|s| (s.task_id, pick(s))).collect();
        LayerKinds { first, second }
    }

    fn validate(&self, specs: &[TaskSpec]) -> Result<()> {
        for spec in specs {
            for (layer, map) in [("first", &self.first), ("second", &self.second)] {
                let kind = map.get(&spec.task_id).ok_or_else(|| {
                    Error::Config(format!("no {layer}-layer kind for task {}", spec.task_id))
                })?;
                let ok = matches!(
                    (spec.label_space, kind),
                    (
                        LabelSpace::Categorical(_),
                        ClassifierKind::MultinomialLogistic
                    ) | (LabelSpace::Categorical(2), ClassifierKind::BinaryLogistic)
                        | (
                            LabelSpace::ScalarRegression,
                            ClassifierKind::RidgeRegression
                        )
                );
                if !ok {
                    return Err(Error::Config(format!(
                        "{layer}-layer kind {:?} does not fit task {} label space",
                        kind, spec.task_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Score-vector dimension a classifier of this kind emits for the task.
pub fn latent_dim(kind: ClassifierKind, spec: &TaskSpec) -> usize {
    match kind {
        ClassifierKind::MultinomialLogistic => spec.output_dim(),
        ClassifierKind::BinaryLogistic | ClassifierKind::RidgeRegression => 1,
    }
}

/// Ground-truth label encoded as a latent score vector: one-hot with margin
/// +/-M for multinomial, (2c-1)*M for a single log-odds, the raw value for
/// regression.
pub fn encode_label(
    kind: ClassifierKind,
    spec: &TaskSpec,
    label: &Label,
    margin: f64,
) -> Result<DVector<f64>> {
    match (kind, label) {
        (ClassifierKind::MultinomialLogistic, Label::Class(c)) => {
            let k = spec.output_dim();
            if *c >= k {
                return Err(Error::Contract(format!(
                    "class {c} out of range for task {}",
                    spec.task_id
                )));
            }
            let mut z = DVector::from_element(k, -margin);
            z[*c] = margin;
            Ok(z)
        }
        (ClassifierKind::BinaryLogistic, Label::Class(c)) => {
            Ok(DVector::from_element(1, (2.0 * *c as f64 - 1.0) * margin))
        }
        (ClassifierKind::RidgeRegression, Label::Value(v)) => Ok(DVector::from_element(1, *v)),
        _ => Err(Error::Contract(
            "label does not match classifier kind".into(),
        )),
    }
}

/// Second-layer learning target for a ground-truth label.
fn second_layer_target(kind: ClassifierKind, label: &Label) -> Result<Target> {
    match (kind, label) {
        (ClassifierKind::MultinomialLogistic, Label::Class(c))
        | (ClassifierKind::BinaryLogistic, Label::Class(c)) => Ok(Target::Class(*c)),
        (ClassifierKind::RidgeRegression, Label::Value(v)) => {
            Ok(Target::Scores(DVector::from_element(1, *v)))
        }
        _ => Err(Error::Contract(
            "label does not match classifier kind".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FeedForward,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    /// Joint objective in its exact form (data terms plus L2 penalties).
    pub objective: f64,
    /// Per-task hold-out metric (training-set metric when no hold-out set
    /// was supplied).
    pub metrics: BTreeMap<usize, f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

impl TrainingTrace {
    pub fn write_csv(&self, mut w: impl Write, task_ids: &[usize]) -> Result<()> {
        let header: Vec<String> = ["iteration", "phase", "objective"]
            .iter()
            .map(|s| s.to_string())
            .chain(task_ids.iter().map(|t| format!("metric_task{t}")))
            .chain(std::iter::once("seconds".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let phase = match row.phase {
                Phase::FeedForward => "feed_forward",
                Phase::Feedback => "feedback",
            };
            let mut cells = vec![
                row.iteration.to_string(),
                phase.to_string(),
                full(row.objective),
            ];
            for t in task_ids {
                cells.push(row.metrics.get(t).map(|&v| full(v)).unwrap_or_default());
            }
            cells.push(format!("{:.3}", row.seconds));
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn full(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

/// Unified importance factors: inversely proportional to partition size.
pub fn unified_pi(dataset: &MultiTaskDataset) -> Result<Vec<f64>> {
    let mut raw = Vec::with_capacity(dataset.n_tasks());
    for spec in &dataset.specs {
        let size = dataset.partition(spec.task_id)?.len();
        if size == 0 {
            return Err(Error::EmptyFit(format!(
                "task {} has no labeled samples",
                spec.task_id
            )));
        }
        raw.push(1.0 / size as f64);
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

fn resolve_pi(dataset: &MultiTaskDataset, config: &FeedbackConfig) -> Result<Vec<f64>> {
    let n = dataset.n_tasks();
    if let Instantiation::OneGoal(k) = config.instantiation {
        if k == 0 || k > n {
            return Err(Error::Config(format!("one-goal task {k} out of range")));
        }
        let mut pi = vec![0.0; n];
        pi[k - 1] = 1.0;
        return Ok(pi);
    }
    if let Some(pi) = &config.pi {
        if pi.len() != n {
            return Err(Error::Config("pi length does not match task count".into()));
        }
        if pi.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("pi entries must be nonnegative".into()));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("pi must sum to 1, got {sum}")));
        }
        return Ok(pi.clone());
    }
    match config.instantiation {
        Instantiation::Unified => unified_pi(dataset),
        Instantiation::TargetSpecific => Err(Error::Config(
            "target-specific training needs an explicit pi (run pi selection first)".into(),
        )),
        Instantiation::OneGoal(_) => unreachable!(),
    }
}

/// Initialize latents from ground truth: every labeled (sample, task) pair
/// gets the label's score encoding; unlabeled pairs stay absent.
pub fn initialize_latents(
    dataset: &MultiTaskDataset,
    kinds: &LayerKinds,
    margin: f64,
) -> Result<LatentState> {
    let mut latents = LatentState::new();
    for sample in &dataset.samples {
        for (&tid, label) in &sample.labels {
            let spec = dataset.spec(tid)?;
            let z = encode_label(kinds.first[&tid], spec, label, margin)?;
            latents.set(sample.sample_id, tid, z);
        }
    }
    Ok(latents)
}

/// One sample's feedback subproblem: minimize over the concatenated latent
/// vector Z the first-layer distance terms plus the second-layer terms for
/// the tasks this sample is labeled for.
pub struct FeedbackProblem {
    pub z_dims: Vec<usize>,
    /// Concatenated current first-layer predictions (the descent start).
    pub z_hat: DVector<f64>,
    /// Standardized per-task features, task order.
    pub psi: Vec<DVector<f64>>,
    /// Second-layer terms, one per labeled task.
    pub terms: Vec<SecondLayerTerm>,
    /// Weight on the first-layer distance: 1/2 in exact mode (Gaussian
    /// negative log-likelihood), 1 in surrogate mode (plain squared
    /// distance).
    pub distance_weight: f64,
}

pub enum SecondLayerTerm {
    Exact {
        task_index: usize,
        omega: ClassifierParams,
        target: Target,
    },
    Surrogate {
        task_index: usize,
        alpha: SurrogateModel,
        target: DVector<f64>,
    },
}

impl FeedbackProblem {
    fn phi(&self, task_index: usize, z: &DVector<f64>) -> DVector<f64> {
        let psi = &self.psi[task_index];
        let mut phi = DVector::zeros(psi.len() + z.len());
        phi.rows_mut(0, psi.len()).copy_from(psi);
        phi.rows_mut(psi.len(), z.len()).copy_from(z);
        phi
    }

    fn phi_with_bias(&self, task_index: usize, z: &DVector<f64>) -> DVector<f64> {
        let psi = &self.psi[task_index];
        let mut phi = DVector::zeros(psi.len() + z.len() + 1);
        phi.rows_mut(0, psi.len()).copy_from(psi);
        phi.rows_mut(psi.len(), z.len()).copy_from(z);
        phi[psi.len() + z.len()] = 1.0;
        phi
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let mut total = self.distance_weight * (z - &self.z_hat).norm_squared();
        for term in &self.terms {
            total += match term {
                SecondLayerTerm::Exact {
                    task_index,
                    omega,
                    target,
                } => {
                    let phi = self.phi(*task_index, z);
                    omega
                        .neg_log_likelihood(&phi, target)
                        .unwrap_or(f64::INFINITY)
                }
                SecondLayerTerm::Surrogate {
                    task_index,
                    alpha,
                    target,
                } => {
                    let phi = self.phi_with_bias(*task_index, z);
                    (alpha.predict(&phi) - target).norm_squared()
                }
            };
        }
        total
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut grad = (z - &self.z_hat) * (2.0 * self.distance_weight);
        for term in &self.terms {
            match term {
                SecondLayerTerm::Exact {
                    task_index,
                    omega,
                    target,
                } => {
                    let phi = self.phi(*task_index, z);
                    if let Ok(g) = omega.grad_nll_wrt_input(&phi, target) {
                        let psi_len = self.psi[*task_index].len();
                        grad += g.rows(psi_len, z.len()).into_owned();
                    }
                }
                SecondLayerTerm::Surrogate {
                    task_index,
                    alpha,
                    target,
                } => {
                    let phi = self.phi_with_bias(*task_index, z);
                    let resid = alpha.predict(&phi) - target;
                    let psi_len = self.psi[*task_index].len();
                    let g_phi = alpha.alpha.transpose() * resid * 2.0;
                    grad += g_phi.rows(psi_len, z.len()).into_owned();
                }
            }
        }
        grad
    }

    /// Minimize from the first-layer prediction; if a previous latent is
    /// supplied and scores lower than the descent result, descend again
    /// from there and keep the better point. The result never exceeds the
    /// objective at the prediction start.
    pub fn solve(
        &self,
        config: &DescentConfig,
        previous: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, f64)> {
        let f = |z: &DVector<f64>| self.objective(z);
        let g = |z: &DVector<f64>| self.gradient(z);
        let (mut best_z, mut best_f) = minimize(f, g, &self.z_hat, config)?;
        if let Some(prev) = previous {
            if prev.len() == best_z.len() && self.objective(prev) < best_f {
                let (z2, f2) = minimize(f, g, prev, config)?;
                if f2 < best_f {
                    best_z = z2;
                    best_f = f2;
                }
            }
        }
        Ok((best_z, best_f))
    }
}

/// Classifier parameters for one cascade layer, keyed by task id.
pub type LayerParams = BTreeMap<usize, ClassifierParams>;

/// Shared training state: standardized features, partitions, per-sample
/// first-layer weights.
pub struct Trainer<'a> {
    pub dataset: &'a MultiTaskDataset,
    pub kinds: LayerKinds,
    pub config: FeedbackConfig,
    standardization: BTreeMap<usize, Standardization>,
    psi: BTreeMap<(usize, usize), DVector<f64>>,
    partitions: BTreeMap<usize, Vec<usize>>,
    sample_weights: BTreeMap<usize, f64>,
    pi: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a MultiTaskDataset,
        kinds: LayerKinds,
        config: FeedbackConfig,
    ) -> Result<Self> {
        kinds.validate(&dataset.specs)?;
        if dataset.samples.is_empty() {
            return Err(Error::EmptyFit("training dataset is empty".into()));
        }
        let pi = resolve_pi(dataset, &config)?;
        let mut partitions = BTreeMap::new();
        for spec in &dataset.specs {
            let part = dataset.partition(spec.task_id)?;
            partitions.insert(spec.task_id, part);
        }
        // standardization fitted on the training features only
        let mut standardization = BTreeMap::new();
        for spec in &dataset.specs {
            let feats: Vec<&Vec<f64>> = dataset
                .samples
                .iter()
                .map(|s| {
                    s.features.get(&spec.task_id).ok_or_else(|| {
                        Error::Contract(format!(
                            "sample {} lacks features for task {}",
                            s.sample_id, spec.task_id
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            standardization.insert(spec.task_id, Standardization::fit(&feats));
        }
        let mut psi = BTreeMap::new();
        for s in &dataset.samples {
            for spec in &dataset.specs {
                let std = &standardization[&spec.task_id];
                psi.insert(
                    (s.sample_id, spec.task_id),
                    std.apply(&s.features[&spec.task_id]),
                );
            }
        }
        // first-layer importance weight: pi_j * |all| / |Gamma_j| for the
        // sample's source partition; multi-labeled samples take the max
        let total = dataset.samples.len() as f64;
        let mut sample_weights = BTreeMap::new();
        for s in &dataset.samples {
            let mut w: f64 = 0.0;
            for &tid in s.labels.keys() {
                let gamma = partitions[&tid].len() as f64;
                w = w.max(pi[tid - 1] * total / gamma);
            }
            sample_weights.insert(s.sample_id, w);
        }
        Ok(Trainer {
            dataset,
            kinds,
            config,
            standardization,
            psi,
            partitions,
            sample_weights,
            pi,
        })
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    fn z_dims(&self) -> Vec<usize> {
        self.dataset
            .specs
            .iter()
            .map(|s| latent_dim(self.kinds.first[&s.task_id], s))
            .collect()
    }

    fn z_total(&self) -> usize {
        self.z_dims().iter().sum()
    }

    /// Fix latents, re-fit both layers. First-layer classifiers regress the
    /// continuous latent scores with the per-sample importance weights;
    /// second-layer classifiers train on ground truth over each task's own
    /// partition using the latents (completed with first-layer predictions
    /// where absent) as appended inputs. Returns the parameters and the
    /// completed latents.
    pub fn feed_forward_step(
        &self,
        latents: &LatentState,
    ) -> Result<(LayerParams, LayerParams, LatentState)> {
        let mut theta = BTreeMap::new();
        for spec in &self.dataset.specs {
            let tid = spec.task_id;
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for s in &self.dataset.samples {
                if let Some(z) = latents.get(s.sample_id, tid) {
                    inputs.push(self.psi[&(s.sample_id, tid)].clone());
                    targets.push(Target::Scores(z.clone()));
                    weights.push(self.sample_weights[&s.sample_id]);
                }
            }
            if inputs.is_empty() {
                return Err(Error::EmptyFit(format!(
                    "first layer, task {tid}: no usable training pairs"
                )));
            }
            // a zero-mass task (possible at initialization under one-goal
            // importance factors) still needs a working classifier: fall
            // back to uniform weights for its own fit
            if !weights.iter().any(|&w| w > 0.0) {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let dim = latent_dim(self.kinds.first[&tid], spec);
            let params = learn(
                self.kinds.first[&tid],
                dim,
                &inputs,
                &targets,
                &weights,
                self.config.l2_penalty,
                self.config.seed,
            )?;
            theta.insert(tid, params);
        }

        // complete latent coverage with the fresh first-layer predictions
        let mut completed = latents.clone();
        for s in &self.dataset.samples {
            for spec in &self.dataset.specs {
                let tid = spec.task_id;
                if !completed.covers(s.sample_id, tid) {
                    let z = theta[&tid].infer(&self.psi[&(s.sample_id, tid)])?;
                    completed.set(s.sample_id, tid, z);
                }
            }
        }

        let mut omega = BTreeMap::new();
        for spec in &self.dataset.specs {
            let tid = spec.task_id;
            let kind = self.kinds.second[&tid];
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for &sid in &self.partitions[&tid] {
                let sample = self.dataset.sample(sid).expect("partition id");
                inputs.push(self.phi_for(sid, tid, &completed)?);
                targets.push(second_layer_target(kind, &sample.labels[&tid])?);
            }
            if inputs.is_empty() {
                return Err(Error::EmptyFit(format!(
                    "second layer, task {tid}: no usable training pairs"
                )));
            }
            let weights = vec![1.0; inputs.len()];
            let dim = latent_dim(kind, spec);
            let params = learn(
                kind,
                dim,
                &inputs,
                &targets,
                &weights,
                self.config.l2_penalty,
                self.config.seed,
            )?;
            omega.insert(tid, params);
        }
        Ok((theta, omega, completed))
    }

    fn phi_for(
        &self,
        sample_id: usize,
        consumer: usize,
        latents: &LatentState,
    ) -> Result<DVector<f64>> {
        let psi = &self.psi[&(sample_id, consumer)];
        let mut phi = Vec::with_capacity(psi.len() + self.z_total());
        phi.extend_from_slice(psi.as_slice());
        for spec in &self.dataset.specs {
            let z = latents.get(sample_id, spec.task_id).ok_or_else(|| {
                Error::Contract(format!(
                    "missing latent for sample {sample_id}, task {}",
                    spec.task_id
                ))
            })?;
            phi.extend_from_slice(z.as_slice());
        }
        Ok(DVector::from_vec(phi))
    }

    /// Surrogate alphas for every task, fitted on the current first-layer
    /// predictions.
    pub fn fit_surrogates(
        &self,
        theta: &BTreeMap<usize, ClassifierParams>,
        omega: &BTreeMap<usize, ClassifierParams>,
    ) -> Result<BTreeMap<usize, SurrogateModel>> {
        // concatenated first-layer predictions per sample
        let mut z_hat: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
        for s in &self.dataset.samples {
            let mut z = Vec::with_capacity(self.z_total());
            for spec in &self.dataset.specs {
                let zi = theta[&spec.task_id].infer(&self.psi[&(s.sample_id, spec.task_id)])?;
                z.extend_from_slice(zi.as_slice());
            }
            z_hat.insert(s.sample_id, DVector::from_vec(z));
        }

        let mut out = BTreeMap::new();
        for spec in &self.dataset.specs {
            let tid = spec.task_id;
            let rows: Vec<usize> = match self.config.surrogate_target {
                SurrogateTarget::ModelOutput => {
                    self.dataset.samples.iter().map(|s| s.sample_id).collect()
                }
                SurrogateTarget::GroundTruth => self.partitions[&tid].clone(),
            };
            if rows.is_empty() {
                return Err(Error::EmptyFit(format!(
                    "surrogate fit, task {tid}: no rows"
                )));
            }
            let out_dim = latent_dim(self.kinds.second[&tid], spec);
            let n_cols = self.psi[&(rows[0], tid)].len() + self.z_total() + 1;
            let mut design = nalgebra::DMatrix::zeros(rows.len(), n_cols);
            let mut targets = nalgebra::DMatrix::zeros(rows.len(), out_dim);
            for (r, &sid) in rows.iter().enumerate() {
                let psi = &self.psi[&(sid, tid)];
                for (c, v) in psi.iter().enumerate() {
                    design[(r, c)] = *v;
                }
                for (c, v) in z_hat[&sid].iter().enumerate() {
                    design[(r, psi.len() + c)] = *v;
                }
                design[(r, n_cols - 1)] = 1.0;
                let t = match self.config.surrogate_target {
                    SurrogateTarget::ModelOutput => {
                        let mut phi = design.row(r).transpose().rows(0, n_cols - 1).into_owned();
                        // omega consumes [psi; z] without the bias column
                        let scores = omega[&tid].infer(&phi)?;
                        phi = scores;
                        phi
                    }
                    SurrogateTarget::GroundTruth => {
                        let sample = self.dataset.sample(sid).expect("partition id");
                        encode_label(
                            self.kinds.second[&tid],
                            spec,
                            &sample.labels[&tid],
                            self.config.margin,
                        )?
                    }
                };
                for (c, v) in t.iter().enumerate() {
                    targets[(r, c)] = *v;
                }
            }
            let beta = self.pick_beta(&design, &targets)?;
            let mut model = lasso_fit(&design, &targets, beta)?;
            model.target_task = tid;
            out.insert(tid, model);
        }
        Ok(out)
    }

    fn pick_beta(
        &self,
        design: &nalgebra::DMatrix<f64>,
        targets: &nalgebra::DMatrix<f64>,
    ) -> Result<f64> {
        match self.config.beta_policy {
            BetaPolicy::Fixed(b) => {
                if b < 0.0 {
                    return Err(Error::Config("beta must be nonnegative".into()));
                }
                Ok(b)
            }
            BetaPolicy::HoldOutGrid => {
                let n = design.nrows();
                if n < 8 {
                    return Ok(0.0);
                }
                let hold: Vec<usize> = (0..n).filter(|i| i % 4 == 3).collect();
                let fit: Vec<usize> = (0..n).filter(|i| i % 4 != 3).collect();
                let sub = |rows: &[usize], m: &nalgebra::DMatrix<f64>| {
                    nalgebra::DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
                };
                let (dx, dy) = (sub(&fit, design), sub(&fit, targets));
                let (hx, hy) = (sub(&hold, design), sub(&hold, targets));
                let scale = {
                    let xty = design.transpose() * targets;
                    xty.iter().map(|v| v.abs()).fold(0.0f64, f64::max) / n as f64
                };
                let grid = [0.0, 1e-3, 1e-2, 1e-1, 1.0];
                let mut best = (f64::INFINITY, 0.0);
                for g in grid {
                    let beta = g * scale;
                    let model = lasso_fit(&dx, &dy, beta)?;
                    let err = (&hx * model.alpha.transpose() - &hy).norm_squared();
                    if err < best.0 {
                        best = (err, beta);
                    }
                }
                Ok(best.1)
            }
        }
    }

    /// Build the per-sample feedback problem for the given parameters.
    pub fn feedback_problem(
        &self,
        sample_id: usize,
        theta: &BTreeMap<usize, ClassifierParams>,
        omega: &BTreeMap<usize, ClassifierParams>,
        surrogates: Option<&BTreeMap<usize, SurrogateModel>>,
    ) -> Result<FeedbackProblem> {
        let sample = self
            .dataset
            .sample(sample_id)
            .ok_or_else(|| Error::Contract(format!("unknown sample {sample_id}")))?;
        let mut z_hat = Vec::with_capacity(self.z_total());
        let mut psi = Vec::new();
        for spec in &self.dataset.specs {
            let p = self.psi[&(sample_id, spec.task_id)].clone();
            let zi = theta[&spec.task_id].infer(&p)?;
            z_hat.extend_from_slice(zi.as_slice());
            psi.push(p);
        }
        let mut terms = Vec::new();
        for (idx, spec) in self.dataset.specs.iter().enumerate() {
            let tid = spec.task_id;
            let Some(label) = sample.labels.get(&tid) else {
                continue;
            };
            match self.config.feedback_mode {
                FeedbackMode::Exact => {
                    let params = &omega[&tid];
                    if !params.supports_likelihood() {
                        return Err(Error::Capability(format!(
                            "exact feedback requested but task {tid} classifier exposes no likelihood"
                        )));
                    }
                    terms.push(SecondLayerTerm::Exact {
                        task_index: idx,
                        omega: params.clone(),
                        target: second_layer_target(self.kinds.second[&tid], label)?,
                    });
                }
                FeedbackMode::Surrogate => {
                    let alphas = surrogates.ok_or_else(|| {
                        Error::Contract("surrogate feedback needs fitted alphas".into())
                    })?;
                    terms.push(SecondLayerTerm::Surrogate {
                        task_index: idx,
                        alpha: alphas[&tid].clone(),
                        target: encode_label(
                            self.kinds.second[&tid],
                            spec,
                            label,
                            self.config.margin,
                        )?,
                    });
                }
            }
        }
        let distance_weight = match self.config.feedback_mode {
            FeedbackMode::Exact => 0.5,
            FeedbackMode::Surrogate => 1.0,
        };
        Ok(FeedbackProblem {
            z_dims: self.z_dims(),
            z_hat: DVector::from_vec(z_hat),
            psi,
            terms,
            distance_weight,
        })
    }

    /// Fix parameters, re-estimate every sample's latents by per-sample
    /// minimization from the current first-layer predictions. A numeric
    /// failure on one sample leaves its latents at the predictions instead
    /// of aborting.
    pub fn feedback_step(
        &self,
        theta: &BTreeMap<usize, ClassifierParams>,
        omega: &BTreeMap<usize, ClassifierParams>,
        previous: &LatentState,
    ) -> Result<LatentState> {
        let surrogates = match self.config.feedback_mode {
            FeedbackMode::Exact => None,
            FeedbackMode::Surrogate => Some(self.fit_surrogates(theta, omega)?),
        };
        let mut out = LatentState::new();
        let z_dims = self.z_dims();
        for s in &self.dataset.samples {
            let problem = self.feedback_problem(s.sample_id, theta, omega, surrogates.as_ref())?;
            let prev = self.concat_latents(s.sample_id, previous, &z_dims);
            let z_star = match problem.solve(&self.config.inner, prev.as_ref()) {
                Ok((z, f)) => {
                    debug_assert!(
                        f <= problem.objective(&problem.z_hat) + 1e-9,
                        "feedback increased sample {} objective",
                        s.sample_id
                    );
                    z
                }
                Err(Error::Numeric(_)) => problem.z_hat.clone(),
                Err(e) => return Err(e),
            };
            let mut offset = 0;
            for (spec, &dim) in self.dataset.specs.iter().zip(&z_dims) {
                out.set(
                    s.sample_id,
                    spec.task_id,
                    z_star.rows(offset, dim).into_owned(),
                );
                offset += dim;
            }
        }
        Ok(out)
    }

    fn concat_latents(
        &self,
        sample_id: usize,
        latents: &LatentState,
        z_dims: &[usize],
    ) -> Option<DVector<f64>> {
        let mut z = Vec::new();
        for (spec, &dim) in self.dataset.specs.iter().zip(z_dims) {
            let zi = latents.get(sample_id, spec.task_id)?;
            if zi.len() != dim {
                return None;
            }
            z.extend_from_slice(zi.as_slice());
        }
        Some(DVector::from_vec(z))
    }

    /// Exact-form joint objective over the dataset at the given state,
    /// including the L2 penalty terms of both layers.
    pub fn joint_objective(
        &self,
        theta: &BTreeMap<usize, ClassifierParams>,
        omega: &BTreeMap<usize, ClassifierParams>,
        latents: &LatentState,
    ) -> Result<f64> {
        let z_dims = self.z_dims();
        let saved_mode = self.config.feedback_mode;
        let mut total = 0.0;
        for s in &self.dataset.samples {
            // always evaluate the exact form regardless of the training mode
            let mut problem = self.feedback_problem_exact(s.sample_id, theta, omega)?;
            problem.distance_weight = 0.5;
            let z = self
                .concat_latents(s.sample_id, latents, &z_dims)
                .ok_or_else(|| {
                    Error::Contract(format!("incomplete latents for sample {}", s.sample_id))
                })?;
            total += problem.objective(&z);
        }
        let _ = saved_mode;
        for params in theta.values().chain(omega.values()) {
            let mut pen = 0.0;
            for r in 0..params.weights.nrows() {
                for c in 0..params.weights.ncols() - 1 {
                    pen += params.weights[(r, c)] * params.weights[(r, c)];
                }
            }
            total += 0.5 * params.l2_penalty * pen;
        }
        Ok(total)
    }

    fn feedback_problem_exact(
        &self,
        sample_id: usize,
        theta: &BTreeMap<usize, ClassifierParams>,
        omega: &BTreeMap<usize, ClassifierParams>,
    ) -> Result<FeedbackProblem> {
        let sample = self.dataset.sample(sample_id).expect("sample id");
        let mut z_hat = Vec::new();
        let mut psi = Vec::new();
        for spec in &self.dataset.specs {
            let p = self.psi[&(sample_id, spec.task_id)].clone();
            let zi = theta[&spec.task_id].infer(&p)?;
            z_hat.extend_from_slice(zi.as_slice());
            psi.push(p);
        }
        let mut terms = Vec::new();
        for (idx, spec) in self.dataset.specs.iter().enumerate() {
            let tid = spec.task_id;
            if let Some(label) = sample.labels.get(&tid) {
                terms.push(SecondLayerTerm::Exact {
                    task_index: idx,
                    omega: omega[&tid].clone(),
                    target: second_layer_target(self.kinds.second[&tid], label)?,
                });
            }
        }
        Ok(FeedbackProblem {
            z_dims: self.z_dims(),
            z_hat: DVector::from_vec(z_hat),
            psi,
            terms,
            distance_weight: 0.5,
        })
    }

    fn build_model(
        &self,
        theta: BTreeMap<usize, ClassifierParams>,
        omega: BTreeMap<usize, ClassifierParams>,
    ) -> CascadeModel {
        CascadeModel {
            schema: MODEL_SCHEMA.to_string(),
            specs: self.dataset.specs.clone(),
            theta,
            omega,
            adapters: Vec::new(),
            standardization: self.standardization.clone(),
        }
    }
}

fn holdout_metrics(model: &CascadeModel, data: &MultiTaskDataset) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for spec in &model.specs {
        out.insert(spec.task_id, metric_score(model, data, spec)?);
    }
    Ok(out)
}

/// Full FE-CCM training: ground-truth latent initialization, then
/// alternating feed-forward and feedback steps until the iteration budget or
/// convergence. With a zero iteration budget this is exactly the CCM
/// baseline.
pub fn train_feccm(
    train: &MultiTaskDataset,
    holdout: Option<&MultiTaskDataset>,
    kinds: &LayerKinds,
    config: &FeedbackConfig,
) -> Result<(CascadeModel, TrainingTrace)> {
    let trainer = Trainer::new(train, kinds.clone(), config.clone())?;
    let mut trace = TrainingTrace::default();
    let started = Instant::now();
    let mut latents = initialize_latents(train, kinds, config.margin)?;
    let mut previous_objective: Option<f64> = None;
    let mut previous_metric: Option<f64> = None;

    let eval_data = holdout.unwrap_or(train);

    let mut iteration = 0;
    let (final_theta, final_omega) = loop {
        let (theta, omega, completed) = trainer.feed_forward_step(&latents)?;
        latents = completed;
        let objective = trainer.joint_objective(&theta, &omega, &latents)?;
        let model = trainer.build_model(theta.clone(), omega.clone());
        let metrics = holdout_metrics(&model, eval_data)?;
        trace.rows.push(TraceRow {
            iteration,
            phase: Phase::FeedForward,
            objective,
            metrics: metrics.clone(),
            seconds: started.elapsed().as_secs_f64(),
        });

        if iteration >= config.max_outer_iters {
            break (theta, omega);
        }

        // convergence checks against the previous outer iteration
        match config.feedback_mode {
            FeedbackMode::Exact => {
                if let Some(prev) = previous_objective {
                    if (prev - objective).abs() <= config.tol * prev.abs().max(1.0) {
                        trace.converged = true;
                        break (theta, omega);
                    }
                }
                previous_objective = Some(objective);
            }
            FeedbackMode::Surrogate => {
                let mean_signed: f64 = model
                    .specs
                    .iter()
                    .map(|s| signed_metric(s.metric, metrics[&s.task_id]))
                    .sum::<f64>()
                    / model.specs.len() as f64;
                if let Some(prev) = previous_metric {
                    if (mean_signed - prev).abs() <= 1e-3 * prev.abs().max(1.0) {
                        trace.converged = true;
                        break (theta, omega);
                    }
                }
                previous_metric = Some(mean_signed);
            }
        }

        latents = trainer.feedback_step(&theta, &omega, &latents)?;
        let objective = trainer.joint_objective(&theta, &omega, &latents)?;
        trace.rows.push(TraceRow {
            iteration,
            phase: Phase::Feedback,
            objective,
            metrics,
            seconds: started.elapsed().as_secs_f64(),
        });
        iteration += 1;
    };

    let model = trainer.build_model(final_theta, final_omega);
    model.validate()?;
    Ok((model, trace))
}

/// The no-feedback baseline: ground-truth latents plus a single
/// feed-forward step.
pub fn train_ccm(
    train: &MultiTaskDataset,
    holdout: Option<&MultiTaskDataset>,
    kinds: &LayerKinds,
    config: &FeedbackConfig,
) -> Result<CascadeModel> {
    let mut config = config.clone();
    config.max_outer_iters = 0;
    let (model, _) = train_feccm(train, holdout, kinds, &config)?;
    Ok(model)
}

/// Pick importance factors for a target task by k-fold cross validation
/// over a grid of simplex points. Ties break toward the unified point, then
/// to the lexicographically smallest grid point.
pub fn select_pi_target_specific(
    train: &MultiTaskDataset,
    target: usize,
    grid: &[Vec<f64>],
    folds: usize,
    kinds: &LayerKinds,
    config: &FeedbackConfig,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Contract("pi grid is empty".into()));
    }
    let spec = train.spec(target)?.clone();
    if folds < 2 {
        return Err(Error::Config(
            "cross validation needs at least 2 folds".into(),
        ));
    }
    let fractions = vec![1.0 / folds as f64; folds];
    let parts = train.split(&fractions, config.seed)?;
    let unified = unified_pi(train)?;

    let mut scores = Vec::with_capacity(grid.len());
    for pi in grid {
        let mut fold_scores = Vec::with_capacity(folds);
        for held in 0..folds {
            let mut samples = Vec::new();
            for (i, p) in parts.iter().enumerate() {
                if i != held {
                    samples.extend(p.samples.iter().cloned());
                }
            }
            samples.sort_by_key(|s| s.sample_id);
            let fit_set = MultiTaskDataset::new(train.specs.clone(), samples)?;
            let mut cfg = config.clone();
            cfg.instantiation = Instantiation::TargetSpecific;
            cfg.pi = Some(pi.clone());
            let (model, _) = train_feccm(&fit_set, Some(&parts[held]), kinds, &cfg)?;
            let m = metric_score(&model, &parts[held], &spec)?;
            fold_scores.push(signed_metric(spec.metric, m));
        }
        scores.push(fold_scores.iter().sum::<f64>() / folds as f64);
    }

    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<&Vec<f64>> = grid
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s == best)
        .map(|(p, _)| p)
        .collect();
    if let Some(u) = tied.iter().find(|p| pi_close(p, &unified)) {
        return Ok((*u).clone());
    }
    tied.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(tied[0].clone())
}

fn pi_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

/// Default grid for target-specific selection: the unified point, the
/// target indicator, their midpoint, and every axis point.
pub fn default_pi_grid(train: &MultiTaskDataset, target: usize) -> Result<Vec<Vec<f64>>> {
    let n = train.n_tasks();
    train.spec(target)?;
    let unified = unified_pi(train)?;
    let mut e_k = vec![0.0; n];
    e_k[target - 1] = 1.0;
    let mid: Vec<f64> = unified
        .iter()
        .zip(&e_k)
        .map(|(u, e)| 0.5 * u + 0.5 * e)
        .collect();
    let mut grid = vec![unified, e_k, mid];
    for j in 0..n {
        let mut axis = vec![0.0; n];
        axis[j] = 1.0;
        if !grid.iter().any(|p| pi_close(p, &axis)) {
            grid.push(axis);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{Metric, Sample};

    fn specs_2() -> Vec<TaskSpec> {
        vec![
            TaskSpec::new(1, "cat", LabelSpace::Categorical(3), 2, Metric::Accuracy).unwrap(),
            TaskSpec::new(2, "reg", LabelSpace::ScalarRegression, 1, Metric::Rmse).unwrap(),
        ]
    }

    fn tiny_dataset(n_per_task: usize) -> MultiTaskDataset {
        let specs = specs_2();
        let mut samples = Vec::new();
        for i in 0..n_per_task {
            let x = i as f64 / n_per_task as f64 - 0.5;
            samples.push(Sample {
                sample_id: samples.len(),
                features: [(1, vec![x, -x]), (2, vec![x * 2.0])].into(),
                labels: [(1, Label::Class(i % 3))].into(),
            });
        }
        for i in 0..n_per_task {
            let x = i as f64 / n_per_task as f64;
            samples.push(Sample {
                sample_id: samples.len(),
                features: [(1, vec![x, x]), (2, vec![x])].into(),
                labels: [(2, Label::Value(2.0 * x + 0.1))].into(),
            });
        }
        MultiTaskDataset::new(specs, samples).unwrap()
    }

    #[test]
    fn unified_pi_matches_inverse_sizes() {
        let specs = specs_2();
        let mut samples = Vec::new();
        for i in 0..100 {
            samples.push(Sample {
                sample_id: i,
                features: [(1, vec![0.0, 0.0]), (2, vec![0.0])].into(),
                labels: [(1, Label::Class(0))].into(),
            });
        }
        for i in 100..400 {
            samples.push(Sample {
                sample_id: i,
                features: [(1, vec![0.0, 0.0]), (2, vec![0.0])].into(),
                labels: [(2, Label::Value(1.0))].into(),
            });
        }
        let ds = MultiTaskDataset::new(specs, samples).unwrap();
        let pi = unified_pi(&ds).unwrap();
        assert!((pi[0] - 0.75).abs() < 1e-12);
        assert!((pi[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn one_goal_pi_is_indicator() {
        let ds = tiny_dataset(6);
        let config = FeedbackConfig {
            instantiation: Instantiation::OneGoal(2),
            ..FeedbackConfig::default()
        };
        let pi = resolve_pi(&ds, &config).unwrap();
        assert_eq!(pi, vec![0.0, 1.0]);
    }

    #[test]
    fn latent_initialization_encodings() {
        let specs = specs_2();
        let kinds = LayerKinds::default_for(&specs);
        let z = encode_label(kinds.first[&1], &specs[0], &Label::Class(2), 4.0).unwrap();
        assert_eq!(z, DVector::from_vec(vec![-4.0, -4.0, 4.0]));
        let z = encode_label(kinds.first[&2], &specs[1], &Label::Value(2.5), 4.0).unwrap();
        assert_eq!(z, DVector::from_vec(vec![2.5]));
    }

    #[test]
    fn initial_latents_cover_only_labeled_pairs() {
        let ds = tiny_dataset(5);
        let kinds = LayerKinds::default_for(&ds.specs);
        let latents = initialize_latents(&ds, &kinds, 4.0).unwrap();
        for s in &ds.samples {
            for spec in &ds.specs {
                assert_eq!(
                    latents.covers(s.sample_id, spec.task_id),
                    s.labels.contains_key(&spec.task_id)
                );
            }
        }
    }

    #[test]
    fn zero_iters_equals_ccm() {
        let ds = tiny_dataset(8);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig {
            max_outer_iters: 0,
            ..FeedbackConfig::default()
        };
        let (feccm, _) = train_feccm(&ds, None, &kinds, &config).unwrap();
        let ccm = train_ccm(&ds, None, &kinds, &FeedbackConfig::default()).unwrap();
        let a = serde_json::to_string(&feccm).unwrap();
        let b = serde_json::to_string(&ccm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ccm_first_layer_matches_direct_ground_truth_fit() {
        let ds = tiny_dataset(8);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig::default();
        let ccm = train_ccm(&ds, None, &kinds, &config).unwrap();

        let trainer = Trainer::new(&ds, kinds.clone(), config.clone()).unwrap();
        let latents = initialize_latents(&ds, &kinds, config.margin).unwrap();
        let (theta, _, _) = trainer.feed_forward_step(&latents).unwrap();
        assert_eq!(ccm.theta, theta);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(8);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig {
            max_outer_iters: 2,
            ..FeedbackConfig::default()
        };
        let (a, _) = train_feccm(&ds, None, &kinds, &config).unwrap();
        let (b, _) = train_feccm(&ds, None, &kinds, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn surrogate_j1_is_zero_at_predictions() {
        let ds = tiny_dataset(6);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig {
            feedback_mode: FeedbackMode::Surrogate,
            beta_policy: BetaPolicy::Fixed(0.0),
            ..FeedbackConfig::default()
        };
        let trainer = Trainer::new(&ds, kinds.clone(), config.clone()).unwrap();
        let latents = initialize_latents(&ds, &kinds, config.margin).unwrap();
        let (theta, omega, _) = trainer.feed_forward_step(&latents).unwrap();
        let surrogates = trainer.fit_surrogates(&theta, &omega).unwrap();
        let problem = trainer
            .feedback_problem(0, &theta, &omega, Some(&surrogates))
            .unwrap();
        // at z = z_hat the distance terms vanish; only J2 remains
        let at_hat = problem.objective(&problem.z_hat);
        let j2: f64 = problem
            .terms
            .iter()
            .map(|t| match t {
                SecondLayerTerm::Surrogate {
                    task_index,
                    alpha,
                    target,
                } => (alpha.predict(&problem.phi_with_bias(*task_index, &problem.z_hat)) - target)
                    .norm_squared(),
                _ => unreachable!(),
            })
            .sum();
        assert!((at_hat - j2).abs() < 1e-12);
    }

    #[test]
    fn single_labeled_sample_has_one_second_layer_term() {
        let ds = tiny_dataset(6);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig::default();
        let trainer = Trainer::new(&ds, kinds.clone(), config.clone()).unwrap();
        let latents = initialize_latents(&ds, &kinds, config.margin).unwrap();
        let (theta, omega, _) = trainer.feed_forward_step(&latents).unwrap();
        let problem = trainer.feedback_problem(0, &theta, &omega, None).unwrap();
        assert_eq!(problem.terms.len(), 1);
    }

    #[test]
    fn feedback_objective_matches_term_by_term_sum() {
        let ds = tiny_dataset(6);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig::default();
        let trainer = Trainer::new(&ds, kinds.clone(), config.clone()).unwrap();
        let latents = initialize_latents(&ds, &kinds, config.margin).unwrap();
        let (theta, omega, _) = trainer.feed_forward_step(&latents).unwrap();
        let problem = trainer.feedback_problem(0, &theta, &omega, None).unwrap();

        let z = DVector::from_vec(vec![0.3, -0.7, 1.1, 0.4]);
        // independent re-computation: J1 quadratic terms plus omega NLLs
        let mut expected = 0.5 * (z.clone() - &problem.z_hat).norm_squared();
        let sample = ds.sample(0).unwrap();
        for (idx, spec) in ds.specs.iter().enumerate() {
            if let Some(label) = sample.labels.get(&spec.task_id) {
                let psi = &problem.psi[idx];
                let mut phi = psi.as_slice().to_vec();
                phi.extend_from_slice(z.as_slice());
                let target = second_layer_target(kinds.second[&spec.task_id], label).unwrap();
                expected += omega[&spec.task_id]
                    .neg_log_likelihood(&DVector::from_vec(phi), &target)
                    .unwrap();
            }
        }
        assert!((problem.objective(&z) - expected).abs() < 1e-10);
    }

    #[test]
    fn feedback_gradient_matches_finite_differences() {
        let ds = tiny_dataset(6);
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig::default();
        let trainer = Trainer::new(&ds, kinds.clone(), config.clone()).unwrap();
        let latents = initialize_latents(&ds, &kinds, config.margin).unwrap();
        let (theta, omega, _) = trainer.feed_forward_step(&latents).unwrap();
        let problem = trainer.feedback_problem(0, &theta, &omega, None).unwrap();
        let z = DVector::from_vec(vec![0.2, -0.3, 0.5, -0.1]);
        let err = crate::optimize::check_gradient(
            |z| problem.objective(z),
            |z| problem.gradient(z),
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "feedback gradient error {err}");
    }

    #[test]
    fn feedback_keeps_z_at_prediction_when_second_layer_ignores_z() {
        // single regression task; zero out the Z columns of omega
        let specs =
            vec![TaskSpec::new(1, "reg", LabelSpace::ScalarRegression, 1, Metric::Rmse).unwrap()];
        let samples: Vec<Sample> = (0..6)
            .map(|i| Sample {
                sample_id: i,
                features: [(1, vec![i as f64])].into(),
                labels: [(1, Label::Value(3.0 * i as f64))].into(),
            })
            .collect();
        let ds = MultiTaskDataset::new(specs, samples).unwrap();
        let kinds = LayerKinds::default_for(&ds.specs);
        let config = FeedbackConfig::default();
        let trainer = Trainer::new(&ds, kinds.clone(), config.clone()).unwrap();
        let latents = initialize_latents(&ds, &kinds, config.margin).unwrap();
        let (theta, mut omega, _) = trainer.feed_forward_step(&latents).unwrap();
        let o = omega.get_mut(&1).unwrap();
        o.weights[(0, 1)] = 0.0; // z column
        let updated = trainer.feedback_step(&theta, &omega, &latents).unwrap();
        for s in &ds.samples {
            let z_hat = theta[&1].infer(&trainer.psi[&(s.sample_id, 1)]).unwrap();
            let z = updated.get(s.sample_id, 1).unwrap();
            assert!((z - z_hat).norm() < 1e-6);
        }
    }

    #[test]
    fn multi_labeled_sample_weight_is_max_rule() {
        let specs = specs_2();
        let mut samples = Vec::new();
        for i in 0..4 {
            samples.push(Sample {
                sample_id: i,
                features: [(1, vec![0.0, 0.0]), (2, vec![0.0])].into(),
                labels: [(1, Label::Class(0))].into(),
            });
        }
        for i in 4..6 {
            samples.push(Sample {
                sample_id: i,
                features: [(1, vec![0.0, 0.0]), (2, vec![0.0])].into(),
                labels: [(2, Label::Value(0.0))].into(),
            });
        }
        // one fully-labeled sample
        samples.push(Sample {
            sample_id: 6,
            features: [(1, vec![0.0, 0.0]), (2, vec![0.0])].into(),
            labels: [(1, Label::Class(1)), (2, Label::Value(1.0))].into(),
        });
        let ds = MultiTaskDataset::new(specs, samples).unwrap();
        let trainer = Trainer::new(
            &ds,
            LayerKinds::default_for(&ds.specs),
            FeedbackConfig::default(),
        )
        .unwrap();
        let pi = trainer.pi().to_vec();
        let total = 7.0;
        let w1 = pi[0] * total / 5.0;
        let w2 = pi[1] * total / 3.0;
        let expected = w1.max(w2);
        assert!((trainer.sample_weights[&6] - expected).abs() < 1e-12);
    }

    #[test]
    fn target_specific_requires_pi_or_selection() {
        let ds = tiny_dataset(6);
        let config = FeedbackConfig {
            instantiation: Instantiation::TargetSpecific,
            ..FeedbackConfig::default()
        };
        assert!(matches!(
            resolve_pi(&ds, &config).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn empty_pi_grid_is_contract_error() {
        let ds = tiny_dataset(6);
        let kinds = LayerKinds::default_for(&ds.specs);
        let err = select_pi_target_specific(&ds, 1, &[], 3, &kinds, &FeedbackConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
