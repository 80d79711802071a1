//! Experiment harness: synthetic multi-task data generation, evaluation
//! reports with bootstrap intervals, flat baselines, and the experiment
//! runner that writes comparison tables to a report directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::Standardization;
use crate::classifiers::{learn, ClassifierKind, ClassifierParams, Target, DEFAULT_L2};
use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, confusion_matrix, metric_score, positive_score, signed_metric, Predictor,
};
use crate::tasks::{save_dataset, Label, LabelSpace, Metric, MultiTaskDataset, Sample, TaskSpec};
use crate::training::{
    default_pi_grid, select_pi_target_specific, train_ccm, train_feccm, FeedbackConfig,
    Instantiation, LayerKinds, TrainingTrace,
};

/// Standard normal draw via Box-Muller, deterministic given the generator.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Each training sample carries the label of exactly one task, in equal
    /// blocks.
    Disjoint,
    /// Every training sample carries every task's label.
    Full,
    /// Each sample always carries its block-owner task's label; every other
    /// task's label is kept independently with probability p.
    Mixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub label_spaces: Vec<LabelSpace>,
    pub feature_dims: Vec<usize>,
    /// Per-task metric; defaults to accuracy / RMSE by label space.
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
    pub latent_dim: usize,
    /// Share of each task's driving latent that comes from the common
    /// factor (0 = fully private, 1 = fully shared).
    pub rho: f64,
    pub feature_noise: f64,
    pub label_noise: f64,
    pub samples_per_task: usize,
    pub test_samples_per_task: usize,
    pub coverage: Coverage,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_spaces.is_empty() {
            return Err(Error::Config("need at least one task".into()));
        }
        if self.feature_dims.len() != self.label_spaces.len() {
            return Err(Error::Config("feature_dims must match label_spaces".into()));
        }
        if let Some(m) = &self.metrics {
            if m.len() != self.label_spaces.len() {
                return Err(Error::Config("metrics must match label_spaces".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config("rho must lie in [0, 1]".into()));
        }
        if let Coverage::Mixed(p) = self.coverage {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(
                    "mixed coverage probability must lie in [0, 1]".into(),
                ));
            }
        }
        if self.latent_dim == 0
            || self.samples_per_task == 0
            || self.test_samples_per_task == 0
            || self.feature_dims.contains(&0)
        {
            return Err(Error::Config(
                "counts and dimensions must be positive".into(),
            ));
        }
        if self.feature_noise < 0.0 || self.label_noise < 0.0 {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        self.validate()?;
        self.label_spaces
            .iter()
            .enumerate()
            .map(|(i, &space)| {
                let metric = match &self.metrics {
                    Some(m) => m[i],
                    None => match space {
                        LabelSpace::Categorical(_) => Metric::Accuracy,
                        LabelSpace::ScalarRegression => Metric::Rmse,
                    },
                };
                TaskSpec::new(
                    i + 1,
                    format!("task{}", i + 1),
                    space,
                    self.feature_dims[i],
                    metric,
                )
            })
            .collect()
    }
}

struct TaskGenerator {
    mixing: DMatrix<f64>,    // features = mixing * t + noise
    label_map: DMatrix<f64>, // class scores or regression row
}

/// Draw a train/test pair. Each sample has a per-task driving latent
/// t_i = sqrt(rho) * u + sqrt(1 - rho) * v_i with u shared across tasks and
/// v_i private, so cross-task signal exists exactly when rho > 0. Features
/// are a fixed linear map of t_i plus noise; categorical labels are sampled
/// from a softmax of a fixed linear map, regression labels are linear plus
/// noise. The test set is fully labeled.
pub fn generate_synthetic(
    config: &SyntheticConfig,
) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    let specs = config.specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.latent_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let sharpness = 3.0;

    let gens: Vec<TaskGenerator> = specs
        .iter()
        .map(|spec| {
            let rows = spec.feature_dim;
            let mixing = DMatrix::from_fn(rows, d, |_, _| normal(&mut rng) * scale);
            let out = match spec.label_space {
                LabelSpace::Categorical(k) => k,
                LabelSpace::ScalarRegression => 1,
            };
            let label_map = DMatrix::from_fn(out, d, |_, _| normal(&mut rng) * sharpness * scale);
            TaskGenerator { mixing, label_map }
        })
        .collect();

    let n_tasks = specs.len();
    let draw_split = |count_per_task: usize,
                      coverage: Coverage,
                      rng: &mut ChaCha8Rng|
     -> Result<MultiTaskDataset> {
        let total = count_per_task * n_tasks;
        let mut samples = Vec::with_capacity(total);
        for sid in 0..total {
            let owner = sid / count_per_task; // block-owner task index
            let u = DVector::from_fn(d, |_, _| normal(rng));
            let mut features = BTreeMap::new();
            let mut labels = BTreeMap::new();
            for (idx, spec) in specs.iter().enumerate() {
                let v = DVector::from_fn(d, |_, _| normal(rng));
                let t = &u * config.rho.sqrt() + v * (1.0 - config.rho).sqrt();
                let mut psi = (&gens[idx].mixing * &t).data.as_vec().clone();
                for x in &mut psi {
                    *x += config.feature_noise * normal(rng);
                }
                features.insert(spec.task_id, psi);
                let label = match spec.label_space {
                    LabelSpace::Categorical(k) => {
                        // label_noise acts as a softmax temperature here
                        let scores = &gens[idx].label_map * &t / config.label_noise.max(1e-6);
                        let max = scores.max();
                        let probs: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let z: f64 = probs.iter().sum();
                        let mut pick: f64 = rng.gen::<f64>() * z;
                        let mut class = k - 1;
                        for (c, p) in probs.iter().enumerate() {
                            if pick < *p {
                                class = c;
                                break;
                            }
                            pick -= p;
                        }
                        Label::Class(class)
                    }
                    LabelSpace::ScalarRegression => {
                        let y = (&gens[idx].label_map * &t)[0] + config.label_noise * normal(rng);
                        Label::Value(y)
                    }
                };
                let keep = match coverage {
                    Coverage::Full => true,
                    Coverage::Disjoint => idx == owner,
                    Coverage::Mixed(p) => idx == owner || rng.gen::<f64>() < p,
                };
                if keep {
                    labels.insert(spec.task_id, label);
                }
            }
            samples.push(Sample {
                sample_id: sid,
                features,
                labels,
            });
        }
        MultiTaskDataset::new(specs.clone(), samples)
    };

    let train = draw_split(config.samples_per_task, config.coverage, &mut rng)?;
    let test = draw_split(config.test_samples_per_task, Coverage::Full, &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: usize,
    pub metric: Metric,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub tasks: BTreeMap<usize, TaskReport>,
}

enum TaskRecords {
    // (sample_id, ranking score, predicted class, true class)
    Class(Vec<(usize, f64, usize, usize)>),
    // (predicted value, true value)
    Value(Vec<(f64, f64)>),
}

fn records_metric(metric: Metric, records: &TaskRecords, idx: &[usize]) -> Result<f64> {
    match (metric, records) {
        (Metric::Accuracy, TaskRecords::Class(r)) => {
            let pred: Vec<usize> = idx.iter().map(|&i| r[i].2).collect();
            let truth: Vec<usize> = idx.iter().map(|&i| r[i].3).collect();
            crate::metrics::accuracy(&pred, &truth)
        }
        (Metric::AveragePrecision, TaskRecords::Class(r)) => {
            let entries: Vec<(usize, f64, bool)> =
                idx.iter().map(|&i| (r[i].0, r[i].1, r[i].3 == 1)).collect();
            average_precision(&entries)
        }
        (Metric::Rmse, TaskRecords::Value(r)) => {
            let pred: Vec<f64> = idx.iter().map(|&i| r[i].0).collect();
            let truth: Vec<f64> = idx.iter().map(|&i| r[i].1).collect();
            crate::metrics::rmse(&pred, &truth)
        }
        _ => Err(Error::Contract("metric does not match record kind".into())),
    }
}

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Point metric per task plus a seeded 1000-resample percentile bootstrap
/// interval and, for categorical tasks, a confusion matrix. The interval is
/// widened if needed so it always contains the point estimate.
pub fn evaluate<P: Predictor>(
    model: &P,
    test: &MultiTaskDataset,
    method: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut tasks = BTreeMap::new();
    for spec in &test.specs {
        let tid = spec.task_id;
        let mut records = match spec.label_space {
            LabelSpace::Categorical(_) => TaskRecords::Class(Vec::new()),
            LabelSpace::ScalarRegression => TaskRecords::Value(Vec::new()),
        };
        for sample in &test.samples {
            let Some(label) = sample.labels.get(&tid) else {
                continue;
            };
            let preds = model.predict_sample(sample)?;
            let (scores, predicted) = &preds[&tid];
            match (&mut records, label, predicted) {
                (TaskRecords::Class(r), Label::Class(t), Label::Class(p)) => {
                    r.push((sample.sample_id, positive_score(scores), *p, *t));
                }
                (TaskRecords::Value(r), Label::Value(t), Label::Value(p)) => r.push((*p, *t)),
                _ => {
                    return Err(Error::Contract(format!(
                        "prediction kind mismatch for task {tid}"
                    )))
                }
            }
        }
        let n = match &records {
            TaskRecords::Class(r) => r.len(),
            TaskRecords::Value(r) => r.len(),
        };
        if n == 0 {
            return Err(Error::EmptyEval(format!(
                "no labeled test samples for task {tid}"
            )));
        }
        let all: Vec<usize> = (0..n).collect();
        let value = records_metric(spec.metric, &records, &all)?;

        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (tid as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut stats = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
        for _ in 0..BOOTSTRAP_RESAMPLES {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            // a resample can be degenerate (e.g. no positives for AP); skip it
            if let Ok(v) = records_metric(spec.metric, &records, &idx) {
                stats.push(v);
            }
        }
        let (mut lo, mut hi) = (value, value);
        if !stats.is_empty() {
            stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| stats[((stats.len() - 1) as f64 * p).round() as usize];
            lo = q(0.025).min(value);
            hi = q(0.975).max(value);
        }
        let confusion = match (&records, spec.label_space) {
            (TaskRecords::Class(r), LabelSpace::Categorical(k)) => {
                let pred: Vec<usize> = r.iter().map(|x| x.2).collect();
                let truth: Vec<usize> = r.iter().map(|x| x.3).collect();
                Some(confusion_matrix(k, &pred, &truth))
            }
            _ => None,
        };
        tasks.insert(
            tid,
            TaskReport {
                task_id: tid,
                metric: spec.metric,
                value,
                ci_low: lo,
                ci_high: hi,
                confusion,
            },
        );
    }
    Ok(EvalReport {
        method: method.to_string(),
        tasks,
    })
}

/// One independent classifier per task, no cascade. `all_features` selects
/// the all-features-direct baseline (every task's features concatenated);
/// otherwise each task sees only its own features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatModel {
    pub all_features: bool,
    pub specs: Vec<TaskSpec>,
    pub params: BTreeMap<usize, ClassifierParams>,
    pub standardization: BTreeMap<usize, Standardization>,
}

impl FlatModel {
    fn input_for(&self, sample: &Sample, task_id: usize) -> Result<DVector<f64>> {
        let one = |tid: usize| -> Result<DVector<f64>> {
            let raw = sample.features.get(&tid).ok_or_else(|| {
                Error::Contract(format!(
                    "sample {} lacks features for task {tid}",
                    sample.sample_id
                ))
            })?;
            Ok(self.standardization[&tid].apply(raw))
        };
        if self.all_features {
            let mut v = Vec::new();
            for spec in &self.specs {
                v.extend_from_slice(one(spec.task_id)?.as_slice());
            }
            Ok(DVector::from_vec(v))
        } else {
            one(task_id)
        }
    }
}

impl Predictor for FlatModel {
    fn predict_sample(&self, sample: &Sample) -> Result<BTreeMap<usize, (DVector<f64>, Label)>> {
        let mut out = BTreeMap::new();
        for spec in &self.specs {
            let input = self.input_for(sample, spec.task_id)?;
            let params = &self.params[&spec.task_id];
            let scores = params.infer(&input)?;
            let label = params.label_from_scores(&scores);
            out.insert(spec.task_id, (scores, label));
        }
        Ok(out)
    }
}

/// Train a flat per-task model on each task's own labeled partition.
pub fn train_flat(train: &MultiTaskDataset, all_features: bool, seed: u64) -> Result<FlatModel> {
    let mut standardization = BTreeMap::new();
    for spec in &train.specs {
        let feats: Vec<&Vec<f64>> = train
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
    let mut model = FlatModel {
        all_features,
        specs: train.specs.clone(),
        params: BTreeMap::new(),
        standardization,
    };
    for spec in &train.specs {
        let tid = spec.task_id;
        let kind = match spec.label_space {
            LabelSpace::Categorical(_) => ClassifierKind::MultinomialLogistic,
            LabelSpace::ScalarRegression => ClassifierKind::RidgeRegression,
        };
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for &sid in &train.partition(tid)? {
            let sample = train.sample(sid).expect("partition id");
            inputs.push(model.input_for(sample, tid)?);
            targets.push(match &sample.labels[&tid] {
                Label::Class(c) => Target::Class(*c),
                Label::Value(v) => Target::Scores(DVector::from_element(1, *v)),
            });
        }
        if inputs.is_empty() {
            return Err(Error::EmptyFit(format!(
                "no labeled samples for task {tid}"
            )));
        }
        let weights = vec![1.0; inputs.len()];
        let out_dim = match spec.label_space {
            LabelSpace::Categorical(k) => k,
            LabelSpace::ScalarRegression => 1,
        };
        let params = learn(kind, out_dim, &inputs, &targets, &weights, DEFAULT_L2, seed)?;
        model.params.insert(tid, params);
    }
    Ok(model)
}

/// All-features-direct baseline: train and evaluate in one call.
pub fn run_all_features_direct(
    train: &MultiTaskDataset,
    test: &MultiTaskDataset,
    seed: u64,
) -> Result<(FlatModel, EvalReport)> {
    let model = train_flat(train, true, seed)?;
    let report = evaluate(&model, test, "all_features_direct", seed)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    AllFeaturesDirect,
    Ccm,
    FeccmUnified,
    FeccmOneGoal,
    FeccmTargetSpecific,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "base" => Ok(Method::Base),
            "all_features_direct" => Ok(Method::AllFeaturesDirect),
            "ccm" => Ok(Method::Ccm),
            "feccm_unified" => Ok(Method::FeccmUnified),
            "feccm_one_goal" => Ok(Method::FeccmOneGoal),
            "feccm_target_specific" => Ok(Method::FeccmTargetSpecific),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::AllFeaturesDirect => "all_features_direct",
            Method::Ccm => "ccm",
            Method::FeccmUnified => "feccm_unified",
            Method::FeccmOneGoal => "feccm_one_goal",
            Method::FeccmTargetSpecific => "feccm_target_specific",
        }
    }
}

/// Train one method and evaluate on the test set. The trace is present for
/// the iterative cascade methods.
pub fn run_method(
    method: Method,
    train: &MultiTaskDataset,
    test: &MultiTaskDataset,
    base_config: &FeedbackConfig,
    goal_task: usize,
    seed: u64,
) -> Result<(EvalReport, Option<TrainingTrace>)> {
    let mut config = base_config.clone();
    config.seed = seed;
    let kinds = LayerKinds::default_for(&train.specs);
    match method {
        Method::Base => {
            let model = train_flat(train, false, seed)?;
            Ok((evaluate(&model, test, method.name(), seed)?, None))
        }
        Method::AllFeaturesDirect => {
            let (_, report) = run_all_features_direct(train, test, seed)?;
            Ok((report, None))
        }
        Method::Ccm => {
            let model = train_ccm(train, None, &kinds, &config)?;
            Ok((evaluate(&model, test, method.name(), seed)?, None))
        }
        Method::FeccmUnified => {
            config.instantiation = Instantiation::Unified;
            config.pi = None;
            let (model, trace) = train_feccm(train, None, &kinds, &config)?;
            Ok((evaluate(&model, test, method.name(), seed)?, Some(trace)))
        }
        Method::FeccmOneGoal => {
            config.instantiation = Instantiation::OneGoal(goal_task);
            config.pi = None;
            let (model, trace) = train_feccm(train, None, &kinds, &config)?;
            Ok((evaluate(&model, test, method.name(), seed)?, Some(trace)))
        }
        Method::FeccmTargetSpecific => {
            let grid = default_pi_grid(train, goal_task)?;
            let mut select_cfg = config.clone();
            select_cfg.instantiation = Instantiation::TargetSpecific;
            let pi = select_pi_target_specific(train, goal_task, &grid, 3, &kinds, &select_cfg)?;
            config.instantiation = Instantiation::TargetSpecific;
            config.pi = Some(pi);
            let (model, trace) = train_feccm(train, None, &kinds, &config)?;
            Ok((evaluate(&model, test, method.name(), seed)?, Some(trace)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: SyntheticConfig,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_goal_task")]
    pub goal_task: usize,
    #[serde(default)]
    pub training: Option<FeedbackConfig>,
    /// Also emit the partial-vs-full label coverage grid.
    #[serde(default)]
    pub coverage_grid: bool,
}

fn default_goal_task() -> usize {
    1
}

fn format_num(v: f64) -> String {
    format!("{v:.6}")
}

fn mean_and_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

/// Run every (method, seed) cell of the experiment and write the report
/// directory: per-cell evaluation reports, training traces for iterative
/// methods, a method-by-task comparison table, the optional coverage grid,
/// and a summary document. Reruns with the same config are byte-identical.
pub fn run_experiment(config_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(config_path)?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad experiment config: {e}")))?;
    config.generator.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    // every method name must parse before any training starts
    let methods: Vec<Method> = config
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Config("need at least one method".into()));
    }
    let base_config = config.training.clone().unwrap_or_default();

    fs::create_dir_all(out_dir.join("reports"))?;
    fs::create_dir_all(out_dir.join("traces"))?;

    let specs = config.generator.specs()?;
    let task_ids: Vec<usize> = specs.iter().map(|s| s.task_id).collect();

    // method -> task -> per-seed metric values
    let mut cells: BTreeMap<&'static str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for &seed in &config.seeds {
        let mut gen = config.generator.clone();
        gen.seed = seed;
        let (train, test) = generate_synthetic(&gen)?;
        for &method in &methods {
            let (report, trace) =
                run_method(method, &train, &test, &base_config, config.goal_task, seed)?;
            let path = out_dir
                .join("reports")
                .join(format!("{}_seed{}.json", method.name(), seed));
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            if let Some(trace) = trace {
                let path =
                    out_dir
                        .join("traces")
                        .join(format!("{}_seed{}.csv", method.name(), seed));
                let mut buf = Vec::new();
                trace.write_csv(&mut buf, &task_ids)?;
                fs::write(&path, buf)?;
            }
            for (tid, task) in &report.tasks {
                cells
                    .entry(method.name())
                    .or_default()
                    .entry(*tid)
                    .or_default()
                    .push(task.value);
            }
        }
    }

    // comparison table: one row per (method, task), mean with a normal CI
    // over seeds
    let mut table = String::from("method,task,metric,mean,ci_low,ci_high\n");
    for &method in &methods {
        for spec in &specs {
            let values = &cells[method.name()][&spec.task_id];
            let (mean, lo, hi) = mean_and_ci(values);
            table.push_str(&format!(
                "{},{},{:?},{},{},{}\n",
                method.name(),
                spec.task_id,
                spec.metric,
                format_num(mean),
                format_num(lo),
                format_num(hi)
            ));
        }
    }
    fs::write(out_dir.join("comparison.csv"), &table)?;

    if config.coverage_grid {
        let mut grid = String::from("coverage,method,task,metric,mean\n");
        for coverage in [Coverage::Disjoint, Coverage::Full] {
            let name = match coverage {
                Coverage::Disjoint => "disjoint",
                Coverage::Full => "full",
                Coverage::Mixed(_) => unreachable!(),
            };
            let mut sums: BTreeMap<(&'static str, usize), Vec<f64>> = BTreeMap::new();
            for &seed in &config.seeds {
                let mut gen = config.generator.clone();
                gen.seed = seed;
                gen.coverage = coverage;
                let (train, test) = generate_synthetic(&gen)?;
                for &method in &methods {
                    let (report, _) =
                        run_method(method, &train, &test, &base_config, config.goal_task, seed)?;
                    for (tid, task) in &report.tasks {
                        sums.entry((method.name(), *tid))
                            .or_default()
                            .push(task.value);
                    }
                }
            }
            for &method in &methods {
                for spec in &specs {
                    let values = &sums[&(method.name(), spec.task_id)];
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    grid.push_str(&format!(
                        "{},{},{},{:?},{}\n",
                        name,
                        method.name(),
                        spec.task_id,
                        spec.metric,
                        format_num(mean)
                    ));
                }
            }
        }
        fs::write(out_dir.join("coverage_grid.csv"), &grid)?;
    }

    let summary = serde_json::json!({
        "config": config,
        "files": {
            "comparison": "comparison.csv",
            "reports": "reports/",
            "traces": "traces/",
            "coverage_grid": if config.coverage_grid { Some("coverage_grid.csv") } else { None },
        },
    });
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(out_dir.to_path_buf())
}

/// Convenience wrapper for the CLI: generate a dataset pair and write both
/// splits plus the task specs.
pub fn synth_to_files(
    config: &SyntheticConfig,
    train_path: &Path,
    test_path: &Path,
    specs_path: &Path,
) -> Result<()> {
    let (train, test) = generate_synthetic(config)?;
    save_dataset(&train, train_path)?;
    save_dataset(&test, test_path)?;
    fs::write(specs_path, serde_json::to_string_pretty(&train.specs)?)?;
    Ok(())
}

/// Mean per-task signed metric of a report (larger is better), used for
/// quick comparisons in tests and the CLI.
pub fn mean_signed(report: &EvalReport) -> f64 {
    let total: f64 = report
        .tasks
        .values()
        .map(|t| signed_metric(t.metric, t.value))
        .sum();
    total / report.tasks.len() as f64
}

/// Metric of a single task from any predictor, re-exported here for the CLI.
pub fn score_task<P: Predictor>(model: &P, data: &MultiTaskDataset, task_id: usize) -> Result<f64> {
    let spec = data.spec(task_id)?;
    metric_score(model, data, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_2cat(rho: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            label_spaces: vec![LabelSpace::Categorical(3), LabelSpace::Categorical(2)],
            feature_dims: vec![4, 4],
            metrics: None,
            latent_dim: 3,
            rho,
            feature_noise: 0.3,
            label_noise: 0.1,
            samples_per_task: 60,
            test_samples_per_task: 60,
            coverage: Coverage::Disjoint,
            seed,
        }
    }

    #[test]
    fn same_seed_reproduces_datasets() {
        let cfg = config_2cat(0.7, 11);
        let (a_train, a_test) = generate_synthetic(&cfg).unwrap();
        let (b_train, b_test) = generate_synthetic(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a_train.samples.len()).unwrap(),
            serde_json::to_string(&b_train.samples.len()).unwrap()
        );
        let dump = |d: &MultiTaskDataset| {
            let mut buf = Vec::new();
            crate::tasks::save_dataset_to(d, &mut buf).unwrap();
            buf
        };
        assert_eq!(dump(&a_train), dump(&b_train));
        assert_eq!(dump(&a_test), dump(&b_test));
    }

    #[test]
    fn disjoint_coverage_labels_one_task_per_sample() {
        let (train, test) = generate_synthetic(&config_2cat(0.5, 3)).unwrap();
        for s in &train.samples {
            assert_eq!(s.labels.len(), 1);
        }
        for s in &test.samples {
            assert_eq!(s.labels.len(), 2);
        }
    }

    #[test]
    fn coupled_tasks_make_other_tasks_features_informative() {
        // with strong coupling, a task-2 classifier that also sees task 1's
        // features beats one that does not
        let mut cfg = config_2cat(0.9, 5);
        cfg.samples_per_task = 400;
        cfg.test_samples_per_task = 400;
        cfg.coverage = Coverage::Full;
        cfg.feature_noise = 0.8;
        cfg.label_noise = 1.0; // neutral softmax temperature
        let (train, test) = generate_synthetic(&cfg).unwrap();
        let own = train_flat(&train, false, 0).unwrap();
        let all = train_flat(&train, true, 0).unwrap();
        let own_acc = score_task(&own, &test, 2).unwrap();
        let all_acc = score_task(&all, &test, 2).unwrap();
        assert!(
            all_acc > own_acc + 0.01,
            "expected cross-task gain, got own={own_acc} all={all_acc}"
        );
    }

    #[test]
    fn uncoupled_tasks_offer_no_cross_task_gain() {
        let mut cfg = config_2cat(0.0, 7);
        cfg.samples_per_task = 300;
        cfg.test_samples_per_task = 300;
        cfg.coverage = Coverage::Full;
        let (train, test) = generate_synthetic(&cfg).unwrap();
        let own = train_flat(&train, false, 0).unwrap();
        let all = train_flat(&train, true, 0).unwrap();
        let own_acc = score_task(&own, &test, 2).unwrap();
        let all_acc = score_task(&all, &test, 2).unwrap();
        assert!(
            (all_acc - own_acc).abs() < 0.08,
            "rho=0 should give parity, got own={own_acc} all={all_acc}"
        );
    }

    #[test]
    fn all_features_input_dim_is_total_feature_dim() {
        let (train, _) = generate_synthetic(&config_2cat(0.5, 1)).unwrap();
        let model = train_flat(&train, true, 0).unwrap();
        for spec in &train.specs {
            assert_eq!(model.params[&spec.task_id].input_dim(), 8);
        }
    }

    #[test]
    fn evaluate_reports_are_in_range_and_contain_point() {
        let (train, test) = generate_synthetic(&config_2cat(0.5, 2)).unwrap();
        let model = train_flat(&train, false, 0).unwrap();
        let report = evaluate(&model, &test, "base", 9).unwrap();
        for task in report.tasks.values() {
            assert!(task.value >= 0.0 && task.value <= 1.0);
            assert!(task.ci_low <= task.value && task.value <= task.ci_high);
            let confusion = task.confusion.as_ref().unwrap();
            let total: usize = confusion.iter().flatten().sum();
            assert_eq!(total, test.samples.len());
        }
    }

    #[test]
    fn unknown_method_is_config_error() {
        assert!(matches!(
            Method::parse("magic").unwrap_err(),
            Error::Config(_)
        ));
    }
}
