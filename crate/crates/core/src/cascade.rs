//! The two-layer cascade: first-layer classifiers produce per-task score
//! vectors Z, second-layer classifiers consume each task's own features
//! augmented with every task's Z.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierParams;
use crate::error::{Error, Result};
use crate::tasks::{Label, MultiTaskDataset, Sample, TaskSpec};

pub const MODEL_SCHEMA: &str = "feccm-model-v1";

/// Transform applied to a producer task's first-layer output before it is
/// appended to a consumer's second-layer input. Identity by default; Drop
/// removes the producer from that consumer's view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    Identity,
    Drop,
}

impl Adapter {
    pub fn apply(&self, z: &DVector<f64>) -> Vec<f64> {
        match self {
            Adapter::Identity => z.as_slice().to_vec(),
            Adapter::Drop => Vec::new(),
        }
    }

    pub fn output_len(&self, z_dim: usize) -> usize {
        match self {
            Adapter::Identity => z_dim,
            Adapter::Drop => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBinding {
    pub producer: usize,
    pub consumer: usize,
    pub adapter: Adapter,
}

/// Per-dimension feature standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit on the given feature vectors; zero-variance dimensions keep a
    /// unit scale so standardization stays invertible.
    pub fn fit(features: &[&Vec<f64>]) -> Self {
        let dim = features.first().map(|f| f.len()).unwrap_or(0);
        let n = features.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var
            .iter()
            .map(|&v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Standardization { mean, std }
    }

    pub fn apply(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            raw.len(),
            raw.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| (v - m) / s),
        )
    }
}

/// Latent first-layer outputs treated as hidden variables during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentState {
    z: BTreeMap<(usize, usize), DVector<f64>>,
}

impl LatentState {
    pub fn new() -> Self {
        LatentState::default()
    }

    pub fn get(&self, sample_id: usize, task_id: usize) -> Option<&DVector<f64>> {
        self.z.get(&(sample_id, task_id))
    }

    pub fn set(&mut self, sample_id: usize, task_id: usize, z: DVector<f64>) {
        self.z.insert((sample_id, task_id), z);
    }

    pub fn covers(&self, sample_id: usize, task_id: usize) -> bool {
        self.z.contains_key(&(sample_id, task_id))
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Per-sample, per-task second-layer scores and predicted labels.
pub type DatasetPredictions = BTreeMap<usize, BTreeMap<usize, (DVector<f64>, Label)>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub schema: String,
    pub specs: Vec<TaskSpec>,
    pub theta: BTreeMap<usize, ClassifierParams>,
    pub omega: BTreeMap<usize, ClassifierParams>,
    pub adapters: Vec<AdapterBinding>,
    pub standardization: BTreeMap<usize, Standardization>,
}

impl CascadeModel {
    pub fn adapter(&self, producer: usize, consumer: usize) -> Adapter {
        self.adapters
            .iter()
            .find(|b| b.producer == producer && b.consumer == consumer)
            .map(|b| b.adapter)
            .unwrap_or(Adapter::Identity)
    }

    /// First-layer output dimension per task, in task order.
    pub fn z_dims(&self) -> Vec<usize> {
        self.specs
            .iter()
            .map(|s| self.theta[&s.task_id].output_dim())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::Schema(format!(
                "unknown model schema '{}'",
                self.schema
            )));
        }
        for spec in &self.specs {
            let theta = self.theta.get(&spec.task_id).ok_or_else(|| {
                Error::Contract(format!("missing theta for task {}", spec.task_id))
            })?;
            let omega = self.omega.get(&spec.task_id).ok_or_else(|| {
                Error::Contract(format!("missing omega for task {}", spec.task_id))
            })?;
            if theta.input_dim() != spec.feature_dim {
                return Err(Error::Contract(format!(
                    "task {} first-layer input dim {} != feature_dim {}",
                    spec.task_id,
                    theta.input_dim(),
                    spec.feature_dim
                )));
            }
            let appended: usize = self
                .specs
                .iter()
                .map(|p| {
                    self.adapter(p.task_id, spec.task_id)
                        .output_len(self.theta[&p.task_id].output_dim())
                })
                .sum();
            if omega.input_dim() != spec.feature_dim + appended {
                return Err(Error::Contract(format!(
                    "task {} second-layer input dim {} != {} + {}",
                    spec.task_id,
                    omega.input_dim(),
                    spec.feature_dim,
                    appended
                )));
            }
        }
        Ok(())
    }

    pub fn standardize(&self, task_id: usize, raw: &[f64]) -> DVector<f64> {
        match self.standardization.get(&task_id) {
            Some(s) => s.apply(raw),
            None => DVector::from_column_slice(raw),
        }
    }

    /// Second-layer input for consumer `j`: the task's own (standardized)
    /// features followed by every producer's adapted Z, in task order.
    pub fn augment_features(
        &self,
        consumer: usize,
        psi: &DVector<f64>,
        z_all: &[DVector<f64>],
    ) -> Result<DVector<f64>> {
        if z_all.len() != self.specs.len() {
            return Err(Error::Contract(format!(
                "expected {} first-layer outputs, got {}",
                self.specs.len(),
                z_all.len()
            )));
        }
        let mut phi: Vec<f64> = psi.as_slice().to_vec();
        for (spec, z) in self.specs.iter().zip(z_all) {
            let expected = self.theta[&spec.task_id].output_dim();
            if z.len() != expected {
                return Err(Error::Contract(format!(
                    "Z for task {} has dim {}, expected {}",
                    spec.task_id,
                    z.len(),
                    expected
                )));
            }
            phi.extend(self.adapter(spec.task_id, consumer).apply(z));
        }
        Ok(DVector::from_vec(phi))
    }

    /// First-layer pass: Z_i = infer(theta_i, standardized features_i).
    pub fn infer_first_layer(&self, sample: &Sample) -> Result<Vec<DVector<f64>>> {
        self.specs
            .iter()
            .map(|spec| {
                let raw = sample.features.get(&spec.task_id).ok_or_else(|| {
                    Error::Contract(format!(
                        "sample {} lacks features for task {}",
                        sample.sample_id, spec.task_id
                    ))
                })?;
                let psi = self.standardize(spec.task_id, raw);
                self.theta[&spec.task_id].infer(&psi)
            })
            .collect()
    }

    /// Full two-step inference: one shared first-layer pass, then each
    /// second-layer classifier over its augmented features.
    pub fn predict(&self, sample: &Sample) -> Result<BTreeMap<usize, (DVector<f64>, Label)>> {
        let z_all = self.infer_first_layer(sample)?;
        let mut out = BTreeMap::new();
        for spec in &self.specs {
            let psi = self.standardize(spec.task_id, &sample.features[&spec.task_id]);
            let phi = self.augment_features(spec.task_id, &psi, &z_all)?;
            let omega = &self.omega[&spec.task_id];
            let scores = omega.infer(&phi)?;
            let label = omega.label_from_scores(&scores);
            out.insert(spec.task_id, (scores, label));
        }
        Ok(out)
    }

    pub fn predict_dataset(&self, dataset: &MultiTaskDataset) -> Result<DatasetPredictions> {
        dataset
            .samples
            .iter()
            .map(|s| Ok((s.sample_id, self.predict(s)?)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.save_to(file)
    }

    pub fn save_to(&self, writer: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::load_from(file)
    }

    pub fn load_from(reader: impl Read) -> Result<Self> {
        let model: CascadeModel = serde_json::from_reader(reader)?;
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ClassifierKind;
    use nalgebra::DMatrix;

    fn spec(id: usize, k: Option<usize>, dim: usize) -> TaskSpec {
        use crate::tasks::{LabelSpace, Metric};
        match k {
            Some(k) => TaskSpec::new(
                id,
                format!("t{id}"),
                LabelSpace::Categorical(k),
                dim,
                Metric::Accuracy,
            )
            .unwrap(),
            None => TaskSpec::new(
                id,
                format!("t{id}"),
                LabelSpace::ScalarRegression,
                dim,
                Metric::Rmse,
            )
            .unwrap(),
        }
    }

    fn model_with_dims(psi_dims: &[usize], z_dims: &[usize]) -> CascadeModel {
        let specs: Vec<TaskSpec> = psi_dims
            .iter()
            .zip(z_dims)
            .enumerate()
            .map(|(i, (&p, &z))| {
                if z == 1 {
                    spec(i + 1, None, p)
                } else {
                    spec(i + 1, Some(z), p)
                }
            })
            .collect();
        let z_total: usize = z_dims.iter().sum();
        let theta: BTreeMap<usize, ClassifierParams> = specs
            .iter()
            .zip(z_dims)
            .map(|(s, &z)| {
                let kind = if z == 1 {
                    ClassifierKind::RidgeRegression
                } else {
                    ClassifierKind::MultinomialLogistic
                };
                (
                    s.task_id,
                    ClassifierParams::zeros(kind, z, s.feature_dim, 0.01),
                )
            })
            .collect();
        let omega: BTreeMap<usize, ClassifierParams> = specs
            .iter()
            .zip(z_dims)
            .map(|(s, &z)| {
                let kind = if z == 1 {
                    ClassifierKind::RidgeRegression
                } else {
                    ClassifierKind::MultinomialLogistic
                };
                (
                    s.task_id,
                    ClassifierParams::zeros(kind, z, s.feature_dim + z_total, 0.01),
                )
            })
            .collect();
        CascadeModel {
            schema: MODEL_SCHEMA.to_string(),
            specs,
            theta,
            omega,
            adapters: Vec::new(),
            standardization: BTreeMap::new(),
        }
    }

    #[test]
    fn augmented_dimension_arithmetic() {
        let model = model_with_dims(&[4, 2, 5], &[3, 1, 2]);
        let psi = DVector::zeros(5);
        let z = vec![DVector::zeros(3), DVector::zeros(1), DVector::zeros(2)];
        let phi = model.augment_features(3, &psi, &z).unwrap();
        assert_eq!(phi.len(), 11);
    }

    #[test]
    fn six_task_wiring_appends_25_dims() {
        // scalar-summary wiring: Z dims (8, 1, 8, 1, 4, 3)
        let z_dims = [8, 1, 8, 1, 4, 3];
        let model = model_with_dims(&[10, 10, 10, 10, 10, 10], &z_dims);
        let psi = DVector::zeros(10);
        let z: Vec<DVector<f64>> = z_dims.iter().map(|&d| DVector::zeros(d)).collect();
        let phi = model.augment_features(1, &psi, &z).unwrap();
        assert_eq!(phi.len() - 10, 25);
    }

    #[test]
    fn drop_adapter_shrinks_phi() {
        let mut model = model_with_dims(&[4, 2], &[3, 2]);
        model.adapters.push(AdapterBinding {
            producer: 1,
            consumer: 2,
            adapter: Adapter::Drop,
        });
        let psi = DVector::zeros(2);
        let z = vec![DVector::zeros(3), DVector::zeros(2)];
        let phi = model.augment_features(2, &psi, &z).unwrap();
        assert_eq!(phi.len(), 2 + 2);
        // consumer 1 still sees everything
        let psi1 = DVector::zeros(4);
        assert_eq!(model.augment_features(1, &psi1, &z).unwrap().len(), 4 + 5);
    }

    #[test]
    fn missing_z_is_contract_error() {
        let model = model_with_dims(&[4, 2], &[3, 2]);
        let psi = DVector::zeros(4);
        let z = vec![DVector::zeros(3)];
        assert!(matches!(
            model.augment_features(1, &psi, &z).unwrap_err(),
            Error::Contract(_)
        ));
    }

    fn sample_with(features: Vec<(usize, Vec<f64>)>) -> Sample {
        Sample {
            sample_id: 0,
            features: features.into_iter().collect(),
            labels: BTreeMap::new(),
        }
    }

    #[test]
    fn zero_theta_gives_zero_scores() {
        let model = model_with_dims(&[2], &[3]);
        let s = sample_with(vec![(1, vec![1.5, -2.0])]);
        let z = model.infer_first_layer(&s).unwrap();
        assert_eq!(z[0], DVector::zeros(3));
    }

    #[test]
    fn single_ridge_task_arithmetic_and_purity() {
        let mut model = model_with_dims(&[1], &[1]);
        model.theta.insert(
            1,
            ClassifierParams {
                kind: ClassifierKind::RidgeRegression,
                weights: DMatrix::from_row_slice(1, 2, &[2.0, 1.0]),
                l2_penalty: 0.0,
            },
        );
        let s = sample_with(vec![(1, vec![3.0])]);
        let z1 = model.infer_first_layer(&s).unwrap();
        let z2 = model.infer_first_layer(&s).unwrap();
        assert_eq!(z1[0][0], 7.0);
        assert_eq!(z1, z2);
    }

    #[test]
    fn zero_z_columns_reproduce_single_layer() {
        // omega with weights only on the psi block must ignore Z entirely
        let mut model = model_with_dims(&[2, 1], &[2, 1]);
        let mut w = DMatrix::zeros(2, 2 + 3 + 1);
        w[(0, 0)] = 0.7;
        w[(1, 1)] = -0.4;
        w[(0, 5)] = 0.2; // bias
        model.omega.insert(
            1,
            ClassifierParams {
                kind: ClassifierKind::MultinomialLogistic,
                weights: w.clone(),
                l2_penalty: 0.0,
            },
        );
        // direct single-layer classifier over psi alone
        let mut w_direct = DMatrix::zeros(2, 3);
        w_direct[(0, 0)] = 0.7;
        w_direct[(1, 1)] = -0.4;
        w_direct[(0, 2)] = 0.2;
        let direct = ClassifierParams {
            kind: ClassifierKind::MultinomialLogistic,
            weights: w_direct,
            l2_penalty: 0.0,
        };
        // vary theta so Z is nonzero
        model.theta.insert(
            1,
            ClassifierParams {
                kind: ClassifierKind::MultinomialLogistic,
                weights: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.2]),
                l2_penalty: 0.0,
            },
        );
        let s = sample_with(vec![(1, vec![0.3, -0.8]), (2, vec![1.1])]);
        let pred = model.predict(&s).unwrap();
        let psi = DVector::from_vec(vec![0.3, -0.8]);
        let expected = direct.infer(&psi).unwrap();
        assert!((pred[&1].0.clone() - expected).norm() < 1e-12);
    }

    #[test]
    fn two_task_prediction_matches_hand_unrolled_computation() {
        let mut model = model_with_dims(&[1, 1], &[2, 1]);
        let t1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.5]);
        let t2 = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let o1 =
            DMatrix::from_row_slice(2, 5, &[0.5, 0.1, -0.2, 0.3, 0.0, -0.5, 0.2, 0.1, -0.3, 1.0]);
        let o2 = DMatrix::from_row_slice(1, 5, &[1.0, 0.5, -0.5, 2.0, -1.0]);
        model.theta.insert(
            1,
            ClassifierParams {
                kind: ClassifierKind::MultinomialLogistic,
                weights: t1.clone(),
                l2_penalty: 0.0,
            },
        );
        model.theta.insert(
            2,
            ClassifierParams {
                kind: ClassifierKind::RidgeRegression,
                weights: t2.clone(),
                l2_penalty: 0.0,
            },
        );
        model.omega.insert(
            1,
            ClassifierParams {
                kind: ClassifierKind::MultinomialLogistic,
                weights: o1.clone(),
                l2_penalty: 0.0,
            },
        );
        model.omega.insert(
            2,
            ClassifierParams {
                kind: ClassifierKind::RidgeRegression,
                weights: o2.clone(),
                l2_penalty: 0.0,
            },
        );

        let (x1, x2) = (0.4, -1.2);
        let s = sample_with(vec![(1, vec![x1]), (2, vec![x2])]);
        let pred = model.predict(&s).unwrap();

        // hand-unrolled: z1 = t1 [x1;1], z2 = t2 [x2;1]
        let z1 = (x1 * 1.0, -x1 + 0.5);
        let z2 = 2.0 * x2 - 1.0;
        // phi_1 = [x1, z1a, z1b, z2]
        let phi1 = [x1, z1.0, z1.1, z2];
        let s1a = 0.5 * phi1[0] + 0.1 * phi1[1] - 0.2 * phi1[2] + 0.3 * phi1[3];
        let s1b = -0.5 * phi1[0] + 0.2 * phi1[1] + 0.1 * phi1[2] - 0.3 * phi1[3] + 1.0;
        assert!((pred[&1].0[0] - s1a).abs() < 1e-12);
        assert!((pred[&1].0[1] - s1b).abs() < 1e-12);
        let phi2 = [x2, z1.0, z1.1, z2];
        let s2 = 1.0 * phi2[0] + 0.5 * phi2[1] - 0.5 * phi2[2] + 2.0 * phi2[3] - 1.0;
        assert!((pred[&2].0[0] - s2).abs() < 1e-12);
        assert_eq!(pred[&2].1, Label::Value(pred[&2].0[0]));
    }

    #[test]
    fn model_serialization_roundtrip_and_schema_check() {
        let model = model_with_dims(&[2, 1], &[2, 1]);
        let mut buf = Vec::new();
        model.save_to(&mut buf).unwrap();
        let back = CascadeModel::load_from(buf.as_slice()).unwrap();
        assert_eq!(model, back);

        let mut bad = model.clone();
        bad.schema = "other".into();
        let mut buf = Vec::new();
        bad.save_to(&mut buf).unwrap();
        assert!(matches!(
            CascadeModel::load_from(buf.as_slice()).unwrap_err(),
            Error::Schema(_)
        ));
    }
}
