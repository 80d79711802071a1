//! Task declarations, samples and heterogeneous multi-task datasets.
//!
//! A dataset holds samples that may each be labeled for only a subset of the
//! declared tasks; the per-task partitions (the sets of sample ids labeled
//! for a task) are derived on demand.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// K-class categorical output, K >= 2.
    Categorical(usize),
    ScalarRegression,
}

impl LabelSpace {
    /// Dimension of the score vector a classifier for this space emits:
    /// K for categorical, 1 for regression.
    pub fn output_dim(&self) -> usize {
        match self {
            LabelSpace::Categorical(k) => *k,
            LabelSpace::ScalarRegression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Rmse,
    AveragePrecision,
}

/// Declaration of one sub-task in the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based task index; ids within a cascade are distinct and contiguous.
    pub task_id: usize,
    pub name: String,
    pub label_space: LabelSpace,
    /// Dimension of this task's feature vector.
    pub feature_dim: usize,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn new(
        task_id: usize,
        name: impl Into<String>,
        label_space: LabelSpace,
        feature_dim: usize,
        metric: Metric,
    ) -> Result<Self> {
        if task_id == 0 {
            return Err(Error::Config("task ids are 1-based".into()));
        }
        if feature_dim == 0 {
            return Err(Error::Config(format!(
                "task {task_id}: feature_dim must be positive"
            )));
        }
        if let LabelSpace::Categorical(k) = label_space {
            if k < 2 {
                return Err(Error::Config(format!(
                    "task {task_id}: categorical K must be >= 2"
                )));
            }
        }
        Ok(TaskSpec {
            task_id,
            name: name.into(),
            label_space,
            feature_dim,
            metric,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.label_space.output_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn validate(&self, space: LabelSpace) -> Result<()> {
        match (self, space) {
            (Label::Class(c), LabelSpace::Categorical(k)) => {
                if *c < k {
                    Ok(())
                } else {
                    Err(Error::Contract(format!(
                        "class index {c} out of range for K={k}"
                    )))
                }
            }
            (Label::Value(v), LabelSpace::ScalarRegression) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Contract("regression label must be finite".into()))
                }
            }
            _ => Err(Error::Contract(
                "label kind does not match task label space".into(),
            )),
        }
    }
}

/// One datum: per-task feature vectors extracted from the same underlying
/// input, and labels for the subset of tasks it is annotated for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: usize,
    pub features: BTreeMap<usize, Vec<f64>>,
    pub labels: BTreeMap<usize, Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskDataset {
    pub specs: Vec<TaskSpec>,
    pub samples: Vec<Sample>,
}

impl MultiTaskDataset {
    pub fn new(specs: Vec<TaskSpec>, samples: Vec<Sample>) -> Result<Self> {
        for (i, spec) in specs.iter().enumerate() {
            if spec.task_id != i + 1 {
                return Err(Error::Config("task ids must be contiguous from 1".into()));
            }
        }
        let ds = MultiTaskDataset { specs, samples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for s in &self.samples {
            for (&tid, feat) in &s.features {
                let spec = self.spec(tid)?;
                if feat.len() != spec.feature_dim {
                    return Err(Error::Contract(format!(
                        "sample {}: task {} features have length {} but feature_dim is {}",
                        s.sample_id,
                        tid,
                        feat.len(),
                        spec.feature_dim
                    )));
                }
            }
            for (&tid, label) in &s.labels {
                label.validate(self.spec(tid)?.label_space)?;
            }
        }
        Ok(())
    }

    pub fn spec(&self, task_id: usize) -> Result<&TaskSpec> {
        self.specs
            .iter()
            .find(|s| s.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn n_tasks(&self) -> usize {
        self.specs.len()
    }

    /// Sample ids labeled for task `j`, in ascending order.
    pub fn partition(&self, j: usize) -> Result<Vec<usize>> {
        self.spec(j)?;
        let mut ids: Vec<usize> = self
            .samples
            .iter()
            .filter(|s| s.labels.contains_key(&j))
            .map(|s| s.sample_id)
            .collect();
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn sample(&self, sample_id: usize) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Deterministic stratified split into parts of the given fractions.
    ///
    /// Each task's partition is allocated proportionally per stratum (class
    /// for categorical tasks) with largest-remainder rounding; samples that
    /// carry several labels are assigned when their lowest-id task is
    /// processed. Fails if any part ends up with zero samples for some task.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<MultiTaskDataset>> {
        if fractions.is_empty() || fractions.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("fractions must be positive".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("fractions must sum to 1, got {sum}")));
        }
        let n_parts = fractions.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // part assignment per sample id
        let mut assignment: BTreeMap<usize, usize> = BTreeMap::new();

        for spec in &self.specs {
            let j = spec.task_id;
            // strata: class index for categorical, single stratum otherwise
            let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for s in &self.samples {
                if assignment.contains_key(&s.sample_id) {
                    continue;
                }
                match s.labels.get(&j) {
                    Some(Label::Class(c)) => strata.entry(*c).or_default().push(s.sample_id),
                    Some(Label::Value(_)) => strata.entry(0).or_default().push(s.sample_id),
                    None => {}
                }
            }
            // ties in largest-remainder rounding break by ascending class index,
            // which is the BTreeMap iteration order here
            for (_class, mut ids) in strata {
                ids.sort_unstable();
                ids.shuffle(&mut rng);
                let counts = largest_remainder(ids.len(), fractions);
                let mut offset = 0;
                for (part, &c) in counts.iter().enumerate() {
                    for &id in &ids[offset..offset + c] {
                        assignment.insert(id, part);
                    }
                    offset += c;
                }
            }
        }

        let mut parts: Vec<Vec<Sample>> = vec![Vec::new(); n_parts];
        for s in &self.samples {
            let part = *assignment.get(&s.sample_id).ok_or_else(|| {
                Error::Contract(format!("sample {} carries no labels", s.sample_id))
            })?;
            parts[part].push(s.clone());
        }

        let out: Vec<MultiTaskDataset> = parts
            .into_iter()
            .map(|samples| MultiTaskDataset {
                specs: self.specs.clone(),
                samples,
            })
            .collect();

        for (pi, part) in out.iter().enumerate() {
            for spec in &self.specs {
                if part.partition(spec.task_id)?.is_empty() {
                    return Err(Error::DegenerateSplit {
                        task: spec.task_id,
                        part: pi,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Allocate `n` items to parts proportional to `fractions` using
/// largest-remainder rounding; earlier parts win remainder ties.
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

fn header_columns(specs: &[TaskSpec]) -> Vec<String> {
    let mut cols = Vec::new();
    for spec in specs {
        for k in 1..=spec.feature_dim {
            cols.push(format!("f{}_{}", spec.task_id, k));
        }
        cols.push(format!("y{}", spec.task_id));
    }
    cols
}

/// Load a dataset from the comma-separated text format: per-task feature
/// blocks named `f<task>_<k>`, label columns `y<task>`, empty field for a
/// missing label.
pub fn load_dataset(path: impl AsRef<Path>, specs: &[TaskSpec]) -> Result<MultiTaskDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_dataset_from(file, specs)
}

pub fn load_dataset_from(reader: impl Read, specs: &[TaskSpec]) -> Result<MultiTaskDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    // column index -> role
    enum Role {
        Feature { task: usize, k: usize },
        Label { task: usize },
    }
    let mut roles: Vec<Role> = Vec::new();
    {
        let headers = rdr.headers()?.clone();
        for name in headers.iter() {
            let role = parse_column(name, specs)
                .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))?;
            roles.push(role);
        }
        // every declared feature slot and label column must be present
        let expected = header_columns(specs);
        for col in &expected {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Schema(format!("missing column '{col}'")));
            }
        }
    }

    fn parse_column(name: &str, specs: &[TaskSpec]) -> Option<Role> {
        if let Some(rest) = name.strip_prefix('f') {
            let (task, k) = rest.split_once('_')?;
            let task: usize = task.parse().ok()?;
            let k: usize = k.parse().ok()?;
            let spec = specs.iter().find(|s| s.task_id == task)?;
            if k >= 1 && k <= spec.feature_dim {
                return Some(Role::Feature { task, k });
            }
            return None;
        }
        if let Some(rest) = name.strip_prefix('y') {
            let task: usize = rest.parse().ok()?;
            specs.iter().find(|s| s.task_id == task)?;
            return Some(Role::Label { task });
        }
        None
    }

    let mut samples = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 2; // 1-based, after header
        let record = record.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != roles.len() {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, found {}", roles.len(), record.len()),
            });
        }
        let mut features: BTreeMap<usize, Vec<f64>> = specs
            .iter()
            .map(|s| (s.task_id, vec![f64::NAN; s.feature_dim]))
            .collect();
        let mut labels: BTreeMap<usize, Label> = BTreeMap::new();
        for (field, role) in record.iter().zip(&roles) {
            match role {
                Role::Feature { task, k } => {
                    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                        row,
                        msg: format!("non-numeric feature '{field}' for task {task}"),
                    })?;
                    features.get_mut(task).unwrap()[k - 1] = v;
                }
                Role::Label { task } => {
                    let field = field.trim();
                    if field.is_empty() {
                        continue;
                    }
                    let spec = specs.iter().find(|s| s.task_id == *task).unwrap();
                    let label = match spec.label_space {
                        LabelSpace::Categorical(_) => {
                            let c: usize = field.parse().map_err(|_| Error::Parse {
                                row,
                                msg: format!("non-integer class '{field}' for task {task}"),
                            })?;
                            Label::Class(c)
                        }
                        LabelSpace::ScalarRegression => {
                            let v: f64 = field.parse().map_err(|_| Error::Parse {
                                row,
                                msg: format!("non-numeric label '{field}' for task {task}"),
                            })?;
                            Label::Value(v)
                        }
                    };
                    label.validate(spec.label_space).map_err(|e| Error::Parse {
                        row,
                        msg: e.to_string(),
                    })?;
                    labels.insert(*task, label);
                }
            }
        }
        for (tid, feat) in &features {
            if feat.iter().any(|v| v.is_nan()) {
                return Err(Error::Parse {
                    row,
                    msg: format!("incomplete features for task {tid}"),
                });
            }
        }
        samples.push(Sample {
            sample_id: idx,
            features,
            labels,
        });
    }
    MultiTaskDataset::new(specs.to_vec(), samples)
}

/// Write a dataset in the same format `load_dataset` reads.
pub fn save_dataset(dataset: &MultiTaskDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    save_dataset_to(dataset, file)
}

pub fn save_dataset_to(dataset: &MultiTaskDataset, writer: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(header_columns(&dataset.specs))?;
    for s in &dataset.samples {
        let mut record: Vec<String> = Vec::new();
        for spec in &dataset.specs {
            for v in &s.features[&spec.task_id] {
                record.push(format_full(*v));
            }
            record.push(match s.labels.get(&spec.task_id) {
                Some(Label::Class(c)) => c.to_string(),
                Some(Label::Value(v)) => format_full(*v),
                None => String::new(),
            });
        }
        wtr.write_record(record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest decimal form that round-trips the f64 exactly.
fn format_full(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // serde_json uses a shortest-roundtrip formatter; reuse it for file output
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}
