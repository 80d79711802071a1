//! The black-box classifier contract and three built-in convex
//! implementations. All built-ins are linear in the input: scores are
//! W * [x; 1] and the kind decides how scores are read (softmax log-odds,
//! a single log-odds, or a predicted value).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{minimize, DescentConfig};
use crate::tasks::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    MultinomialLogistic,
    BinaryLogistic,
    RidgeRegression,
}

/// Training target for `learn`: a hard class label, or a score vector of the
/// classifier's output dimension (used when re-training on continuous
/// latents).
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Scores(DVector<f64>),
}

/// Linear classifier parameters: one weight row per output dimension, last
/// column is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamsDoc", into = "ParamsDoc")]
pub struct ClassifierParams {
    pub kind: ClassifierKind,
    pub weights: DMatrix<f64>,
    pub l2_penalty: f64,
}

/// Wire form: kind, penalty, shape and row-major weights at full precision.
#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    kind: ClassifierKind,
    l2_penalty: f64,
    output_dim: usize,
    input_dim: usize,
    weights_row_major: Vec<f64>,
}

impl From<ClassifierParams> for ParamsDoc {
    fn from(p: ClassifierParams) -> Self {
        let (rows, cols) = p.weights.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(p.weights[(r, c)]);
            }
        }
        ParamsDoc {
            kind: p.kind,
            l2_penalty: p.l2_penalty,
            output_dim: rows,
            input_dim: cols - 1,
            weights_row_major: data,
        }
    }
}

impl From<ParamsDoc> for ClassifierParams {
    fn from(d: ParamsDoc) -> Self {
        ClassifierParams {
            kind: d.kind,
            weights: DMatrix::from_row_slice(d.output_dim, d.input_dim + 1, &d.weights_row_major),
            l2_penalty: d.l2_penalty,
        }
    }
}

pub const DEFAULT_L2: f64 = 1e-2;

fn logsumexp(scores: &DVector<f64>) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: &DVector<f64>) -> DVector<f64> {
    let lse = logsumexp(scores);
    scores.map(|s| (s - lse).exp())
}

/// log(1 + exp(s)) computed without overflow.
fn log1p_exp(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

impl ClassifierParams {
    pub fn zeros(
        kind: ClassifierKind,
        output_dim: usize,
        input_dim: usize,
        l2_penalty: f64,
    ) -> Self {
        ClassifierParams {
            kind,
            weights: DMatrix::zeros(output_dim, input_dim + 1),
            l2_penalty,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    fn check_input(&self, input: &DVector<f64>) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has dim {} but classifier expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Raw linear scores W * [x; 1].
    pub fn infer(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(input)?;
        let mut scores = self.weights.column(self.input_dim()).into_owned();
        scores.gemv(
            1.0,
            &self.weights.columns(0, self.input_dim()).into_owned(),
            input,
            1.0,
        );
        Ok(scores)
    }

    /// Hard decision: argmax with ties to the lowest class index for
    /// categorical kinds, the predicted value for regression.
    pub fn predict_label(&self, input: &DVector<f64>) -> Result<Label> {
        let scores = self.infer(input)?;
        Ok(self.label_from_scores(&scores))
    }

    pub fn label_from_scores(&self, scores: &DVector<f64>) -> Label {
        match self.kind {
            ClassifierKind::MultinomialLogistic => {
                let mut best = 0;
                for i in 1..scores.len() {
                    if scores[i] > scores[best] {
                        best = i;
                    }
                }
                Label::Class(best)
            }
            ClassifierKind::BinaryLogistic => Label::Class(if scores[0] > 0.0 { 1 } else { 0 }),
            ClassifierKind::RidgeRegression => Label::Value(scores[0]),
        }
    }

    /// Negative log-likelihood of the target under this classifier.
    /// Regression uses the Gaussian form up to a constant, i.e. squared
    /// error over two.
    pub fn neg_log_likelihood(&self, input: &DVector<f64>, target: &Target) -> Result<f64> {
        let scores = self.infer(input)?;
        self.nll_from_scores(&scores, target)
    }

    pub fn nll_from_scores(&self, scores: &DVector<f64>, target: &Target) -> Result<f64> {
        match (self.kind, target) {
            (ClassifierKind::MultinomialLogistic, Target::Class(c)) => {
                if *c >= scores.len() {
                    return Err(Error::Contract(format!("class {c} out of range")));
                }
                Ok(logsumexp(scores) - scores[*c])
            }
            (ClassifierKind::BinaryLogistic, Target::Class(y)) => {
                if *y > 1 {
                    return Err(Error::Contract("binary target must be 0 or 1".into()));
                }
                Ok(log1p_exp(scores[0]) - *y as f64 * scores[0])
            }
            (ClassifierKind::RidgeRegression, Target::Scores(t)) => {
                if t.len() != scores.len() {
                    return Err(Error::Contract("target dim mismatch".into()));
                }
                Ok((scores - t).norm_squared() / 2.0)
            }
            _ => Err(Error::Contract(
                "target kind does not match classifier kind".into(),
            )),
        }
    }

    /// Exact gradient of `neg_log_likelihood` with respect to the input.
    pub fn grad_nll_wrt_input(
        &self,
        input: &DVector<f64>,
        target: &Target,
    ) -> Result<DVector<f64>> {
        let scores = self.infer(input)?;
        let residual = self.nll_score_residual(&scores, target)?;
        let w = self.weights.columns(0, self.input_dim());
        Ok(w.transpose() * residual)
    }

    /// d NLL / d scores; the input gradient is W_nobias^T times this.
    pub fn nll_score_residual(
        &self,
        scores: &DVector<f64>,
        target: &Target,
    ) -> Result<DVector<f64>> {
        match (self.kind, target) {
            (ClassifierKind::MultinomialLogistic, Target::Class(c)) => {
                if *c >= scores.len() {
                    return Err(Error::Contract(format!("class {c} out of range")));
                }
                let mut p = softmax(scores);
                p[*c] -= 1.0;
                Ok(p)
            }
            (ClassifierKind::BinaryLogistic, Target::Class(y)) => {
                let p = 1.0 / (1.0 + (-scores[0]).exp());
                Ok(DVector::from_element(1, p - *y as f64))
            }
            (ClassifierKind::RidgeRegression, Target::Scores(t)) => Ok(scores - t),
            _ => Err(Error::Contract(
                "target kind does not match classifier kind".into(),
            )),
        }
    }

    /// Built-ins expose their likelihood, so exact feedback is available.
    pub fn supports_likelihood(&self) -> bool {
        true
    }

    /// Built-ins accept continuous score vectors as training targets, so
    /// latents never need thresholding when re-training the first layer.
    pub fn accepts_score_targets(kind: ClassifierKind) -> bool {
        let _ = kind;
        true
    }
}

/// Fit a classifier to weighted data.
///
/// Class targets train the logistic kinds by weighted negative
/// log-likelihood with an L2 penalty (bias unpenalized); score targets fit
/// the linear score map by weighted least squares in closed form, which is
/// the ridge learn and doubles as score regression for the logistic kinds.
/// Deterministic: logistic descent starts from zero weights.
pub fn learn(
    kind: ClassifierKind,
    output_dim: usize,
    inputs: &[DVector<f64>],
    targets: &[Target],
    sample_weights: &[f64],
    l2_penalty: f64,
    _seed: u64,
) -> Result<ClassifierParams> {
    if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != sample_weights.len() {
        return Err(Error::Contract(format!(
            "learn needs equal nonzero counts, got {} inputs, {} targets, {} weights",
            inputs.len(),
            targets.len(),
            sample_weights.len()
        )));
    }
    if sample_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Contract("sample weights must be nonnegative".into()));
    }
    if !sample_weights.iter().any(|&w| w > 0.0) {
        return Err(Error::EmptyFit("all sample weights are zero".into()));
    }
    let input_dim = inputs[0].len();
    for x in inputs {
        if x.len() != input_dim {
            return Err(Error::Contract("inconsistent input dimensions".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input".into()));
        }
    }
    if l2_penalty < 0.0 {
        return Err(Error::Contract("l2 penalty must be nonnegative".into()));
    }
    match kind {
        ClassifierKind::BinaryLogistic if output_dim != 1 => {
            return Err(Error::Contract("binary logistic has output_dim 1".into()));
        }
        _ => {}
    }

    let all_scores = targets.iter().all(|t| matches!(t, Target::Scores(_)));
    let all_class = targets.iter().all(|t| matches!(t, Target::Class(_)));
    if !all_scores && !all_class {
        return Err(Error::Contract(
            "mixed target kinds in one learn call".into(),
        ));
    }

    if all_scores || kind == ClassifierKind::RidgeRegression {
        let score_targets: Vec<&DVector<f64>> = targets
            .iter()
            .map(|t| match t {
                Target::Scores(v) => {
                    if v.len() != output_dim {
                        Err(Error::Contract("score target dim mismatch".into()))
                    } else {
                        Ok(v)
                    }
                }
                Target::Class(_) => Err(Error::Contract(
                    "ridge regression requires score targets".into(),
                )),
            })
            .collect::<Result<_>>()?;
        let weights = ridge_closed_form(
            inputs,
            &score_targets,
            sample_weights,
            output_dim,
            l2_penalty,
        )?;
        return Ok(ClassifierParams {
            kind,
            weights,
            l2_penalty,
        });
    }

    logistic_learn(
        kind,
        output_dim,
        inputs,
        targets,
        sample_weights,
        l2_penalty,
    )
}

/// Weighted least squares with L2 on all but the bias column, solved by the
/// normal equations.
fn ridge_closed_form(
    inputs: &[DVector<f64>],
    targets: &[&DVector<f64>],
    sample_weights: &[f64],
    output_dim: usize,
    l2: f64,
) -> Result<DMatrix<f64>> {
    let d = inputs[0].len() + 1;
    let mut gram = DMatrix::zeros(d, d);
    let mut xty = DMatrix::zeros(d, output_dim);
    for ((x, y), &w) in inputs.iter().zip(targets).zip(sample_weights) {
        if w == 0.0 {
            continue;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite target".into()));
        }
        let xt = augment(x);
        gram.ger(w, &xt, &xt, 1.0);
        for o in 0..output_dim {
            for r in 0..d {
                xty[(r, o)] += w * xt[r] * y[o];
            }
        }
    }
    for i in 0..d - 1 {
        gram[(i, i)] += l2;
    }
    let solution = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&xty))
        .or_else(|| gram.clone().full_piv_lu().solve(&xty))
        .ok_or_else(|| Error::Numeric("singular normal equations in ridge fit".into()))?;
    Ok(solution.transpose())
}

fn augment(x: &DVector<f64>) -> DVector<f64> {
    let mut xt = DVector::zeros(x.len() + 1);
    xt.rows_mut(0, x.len()).copy_from(x);
    xt[x.len()] = 1.0;
    xt
}

fn logistic_learn(
    kind: ClassifierKind,
    output_dim: usize,
    inputs: &[DVector<f64>],
    targets: &[Target],
    sample_weights: &[f64],
    l2: f64,
) -> Result<ClassifierParams> {
    let input_dim = inputs[0].len();
    let cols = input_dim + 1;
    let augmented: Vec<DVector<f64>> = inputs.iter().map(augment).collect();
    let classes: Vec<usize> = targets
        .iter()
        .map(|t| match t {
            Target::Class(c) => Ok(*c),
            _ => Err(Error::Contract("expected class targets".into())),
        })
        .collect::<Result<_>>()?;
    for &c in &classes {
        let limit = if kind == ClassifierKind::BinaryLogistic {
            2
        } else {
            output_dim
        };
        if c >= limit {
            return Err(Error::Contract(format!("class {c} out of range")));
        }
    }

    let unpack = |v: &DVector<f64>| DMatrix::from_row_slice(output_dim, cols, v.as_slice());
    let objective = |v: &DVector<f64>| {
        let w = unpack(v);
        let mut total = 0.0;
        for ((x, &c), &sw) in augmented.iter().zip(&classes).zip(sample_weights) {
            if sw == 0.0 {
                continue;
            }
            let scores = &w * x;
            total += sw
                * match kind {
                    ClassifierKind::MultinomialLogistic => logsumexp(&scores) - scores[c],
                    ClassifierKind::BinaryLogistic => log1p_exp(scores[0]) - c as f64 * scores[0],
                    ClassifierKind::RidgeRegression => unreachable!(),
                };
        }
        let mut pen = 0.0;
        for r in 0..output_dim {
            for col in 0..input_dim {
                pen += w[(r, col)] * w[(r, col)];
            }
        }
        total + 0.5 * l2 * pen
    };
    let gradient = |v: &DVector<f64>| {
        let w = unpack(v);
        let mut grad = DMatrix::zeros(output_dim, cols);
        for ((x, &c), &sw) in augmented.iter().zip(&classes).zip(sample_weights) {
            if sw == 0.0 {
                continue;
            }
            let scores = &w * x;
            let mut resid = match kind {
                ClassifierKind::MultinomialLogistic => {
                    let mut p = softmax(&scores);
                    p[c] -= 1.0;
                    p
                }
                ClassifierKind::BinaryLogistic => {
                    let p = 1.0 / (1.0 + (-scores[0]).exp());
                    DVector::from_element(1, p - c as f64)
                }
                ClassifierKind::RidgeRegression => unreachable!(),
            };
            resid *= sw;
            grad.ger(1.0, &resid, x, 1.0);
        }
        for r in 0..output_dim {
            for col in 0..input_dim {
                grad[(r, col)] += l2 * w[(r, col)];
            }
        }
        DVector::from_vec(grad_row_major(&grad))
    };

    let x0 = DVector::zeros(output_dim * cols);
    let cfg = DescentConfig::default();
    let (solution, _) = minimize(objective, gradient, &x0, &cfg)?;
    Ok(ClassifierParams {
        kind,
        weights: unpack(&solution),
        l2_penalty: l2,
    })
}

fn grad_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    #[test]
    fn binary_separable_data_fits_perfectly() {
        let inputs: Vec<DVector<f64>> = [-3.0, -2.0, -1.5, 1.5, 2.0, 3.0]
            .iter()
            .map(|&x| vec1(x))
            .collect();
        let targets: Vec<Target> = [0, 0, 0, 1, 1, 1]
            .iter()
            .map(|&c| Target::Class(c))
            .collect();
        let weights = vec![1.0; 6];
        let params = learn(
            ClassifierKind::BinaryLogistic,
            1,
            &inputs,
            &targets,
            &weights,
            0.01,
            0,
        )
        .unwrap();
        for (x, t) in inputs.iter().zip(&targets) {
            let Target::Class(c) = t else { unreachable!() };
            assert_eq!(params.predict_label(x).unwrap(), Label::Class(*c));
        }
    }

    #[test]
    fn duplicated_half_weight_samples_match_originals() {
        let inputs: Vec<DVector<f64>> = (0..8)
            .map(|i| DVector::from_vec(vec![i as f64 * 0.5 - 2.0, (i % 3) as f64]))
            .collect();
        let targets: Vec<Target> = (0..8).map(|i| Target::Class(i % 3)).collect();
        let base = learn(
            ClassifierKind::MultinomialLogistic,
            3,
            &inputs,
            &targets,
            &[1.0; 8],
            0.05,
            0,
        )
        .unwrap();

        let mut dup_inputs = inputs.clone();
        dup_inputs.extend(inputs.iter().cloned());
        let mut dup_targets = targets.clone();
        dup_targets.extend(targets.iter().cloned());
        let dup = learn(
            ClassifierKind::MultinomialLogistic,
            3,
            &dup_inputs,
            &dup_targets,
            &[0.5; 16],
            0.05,
            0,
        )
        .unwrap();
        assert!((base.weights.clone() - dup.weights.clone()).norm() < 1e-6);
    }

    #[test]
    fn ridge_recovers_exact_line() {
        let inputs: Vec<DVector<f64>> = (0..5).map(|i| vec1(i as f64)).collect();
        let targets: Vec<Target> = (0..5)
            .map(|i| Target::Scores(vec1(2.0 * i as f64)))
            .collect();
        let params = learn(
            ClassifierKind::RidgeRegression,
            1,
            &inputs,
            &targets,
            &[1.0; 5],
            0.0,
            0,
        )
        .unwrap();
        assert!((params.weights[(0, 0)] - 2.0).abs() < 1e-6);
        assert!(params.weights[(0, 1)].abs() < 1e-6);
    }

    #[test]
    fn all_zero_weights_is_empty_fit() {
        let inputs = vec![vec1(1.0)];
        let targets = vec![Target::Class(0)];
        assert!(matches!(
            learn(
                ClassifierKind::BinaryLogistic,
                1,
                &inputs,
                &targets,
                &[0.0],
                0.01,
                0
            )
            .unwrap_err(),
            Error::EmptyFit(_)
        ));
    }

    #[test]
    fn zero_weight_samples_do_not_move_the_optimum() {
        let inputs: Vec<DVector<f64>> = (0..6).map(|i| vec1(i as f64 - 2.5)).collect();
        let targets: Vec<Target> = (0..6).map(|i| Target::Class((i >= 3) as usize)).collect();
        let base = learn(
            ClassifierKind::BinaryLogistic,
            1,
            &inputs,
            &targets,
            &[1.0; 6],
            0.1,
            0,
        )
        .unwrap();
        let mut padded_inputs = inputs.clone();
        padded_inputs.push(vec1(100.0));
        let mut padded_targets = targets.clone();
        padded_targets.push(Target::Class(0));
        let mut w = vec![1.0; 6];
        w.push(0.0);
        let padded = learn(
            ClassifierKind::BinaryLogistic,
            1,
            &padded_inputs,
            &padded_targets,
            &w,
            0.1,
            0,
        )
        .unwrap();
        assert!((base.weights - padded.weights).norm() < 1e-8);
    }

    #[test]
    fn zero_params_give_uniform_scores() {
        let params = ClassifierParams::zeros(ClassifierKind::MultinomialLogistic, 4, 3, 0.01);
        let scores = params
            .infer(&DVector::from_vec(vec![1.0, -2.0, 0.5]))
            .unwrap();
        assert_eq!(scores, DVector::zeros(4));
        let p = softmax(&scores);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn ridge_infer_arithmetic() {
        let params = ClassifierParams {
            kind: ClassifierKind::RidgeRegression,
            weights: DMatrix::from_row_slice(1, 2, &[2.0, 1.0]),
            l2_penalty: 0.0,
        };
        assert_eq!(params.infer(&vec1(3.0)).unwrap()[0], 7.0);
        assert_eq!(params.predict_label(&vec1(3.0)).unwrap(), Label::Value(7.0));
    }

    #[test]
    fn binary_score_zero_is_half_probability() {
        let params = ClassifierParams {
            kind: ClassifierKind::BinaryLogistic,
            weights: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            l2_penalty: 0.0,
        };
        let s = params.infer(&vec1(1.0)).unwrap();
        assert_eq!(s[0], 0.0);
        let nll = params
            .neg_log_likelihood(&vec1(1.0), &Target::Class(1))
            .unwrap();
        assert!((nll - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let params = ClassifierParams::zeros(ClassifierKind::MultinomialLogistic, 3, 1, 0.0);
        let scores = DVector::from_vec(vec![0.2, 0.9, 0.9]);
        assert_eq!(params.label_from_scores(&scores), Label::Class(1));
        assert_eq!(
            params.label_from_scores(&DVector::zeros(3)),
            Label::Class(0)
        );
    }

    #[test]
    fn uniform_multinomial_nll_is_log_k() {
        let params = ClassifierParams::zeros(ClassifierKind::MultinomialLogistic, 4, 2, 0.0);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let nll = params.neg_log_likelihood(&x, &Target::Class(2)).unwrap();
        assert!((nll - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ridge_zero_residual_zero_nll() {
        let params = ClassifierParams {
            kind: ClassifierKind::RidgeRegression,
            weights: DMatrix::from_row_slice(1, 2, &[2.0, 1.0]),
            l2_penalty: 0.0,
        };
        let nll = params
            .neg_log_likelihood(&vec1(3.0), &Target::Scores(vec1(7.0)))
            .unwrap();
        assert_eq!(nll, 0.0);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        use crate::optimize::check_gradient;
        let cases: Vec<ClassifierParams> = vec![
            ClassifierParams {
                kind: ClassifierKind::MultinomialLogistic,
                weights: DMatrix::from_row_slice(
                    3,
                    4,
                    &[
                        0.5, -1.2, 0.3, 0.1, 1.1, 0.4, -0.6, -0.2, -0.9, 0.7, 0.2, 0.05,
                    ],
                ),
                l2_penalty: 0.0,
            },
            ClassifierParams {
                kind: ClassifierKind::BinaryLogistic,
                weights: DMatrix::from_row_slice(1, 4, &[0.8, -0.3, 1.5, -0.4]),
                l2_penalty: 0.0,
            },
            ClassifierParams {
                kind: ClassifierKind::RidgeRegression,
                weights: DMatrix::from_row_slice(1, 4, &[2.0, 0.5, -1.0, 1.0]),
                l2_penalty: 0.0,
            },
        ];
        let targets = [
            Target::Class(1),
            Target::Class(1),
            Target::Scores(vec1(0.7)),
        ];
        let x = DVector::from_vec(vec![0.2, -0.4, 1.3]);
        for (params, target) in cases.iter().zip(&targets) {
            let f = |v: &DVector<f64>| params.neg_log_likelihood(v, target).unwrap();
            let g = |v: &DVector<f64>| params.grad_nll_wrt_input(v, target).unwrap();
            assert!(check_gradient(f, g, &x, 1e-5).unwrap() < 1e-5);
        }
    }

    #[test]
    fn binary_gradient_at_zero_score() {
        let w = DVector::from_vec(vec![1.0, 2.0]);
        let params = ClassifierParams {
            kind: ClassifierKind::BinaryLogistic,
            weights: DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -5.0]),
            l2_penalty: 0.0,
        };
        // pick x so the score is exactly zero: 1*1 + 2*2 - 5 = 0
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let grad = params.grad_nll_wrt_input(&x, &Target::Class(1)).unwrap();
        assert!((grad + w * 0.5).norm() < 1e-12);
    }

    #[test]
    fn learn_is_permutation_invariant() {
        let inputs: Vec<DVector<f64>> = (0..10)
            .map(|i| DVector::from_vec(vec![(i as f64).sin(), (i as f64).cos()]))
            .collect();
        let targets: Vec<Target> = (0..10).map(|i| Target::Class(i % 2)).collect();
        let a = learn(
            ClassifierKind::BinaryLogistic,
            1,
            &inputs,
            &targets,
            &[1.0; 10],
            0.1,
            0,
        )
        .unwrap();
        let mut shuffled: Vec<usize> = (0..10).collect();
        shuffled.reverse();
        let si: Vec<DVector<f64>> = shuffled.iter().map(|&i| inputs[i].clone()).collect();
        let st: Vec<Target> = shuffled.iter().map(|&i| targets[i].clone()).collect();
        let b = learn(
            ClassifierKind::BinaryLogistic,
            1,
            &si,
            &st,
            &[1.0; 10],
            0.1,
            0,
        )
        .unwrap();
        assert!((a.weights - b.weights).norm() < 1e-8);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let s = DVector::from_vec(vec![0.3, -2.0, 5.0, 1.1]);
        let p = softmax(&s);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        let shifted = softmax(&s.add_scalar(13.7));
        assert!((p - shifted).norm() < 1e-12);
    }

    #[test]
    fn params_serialization_roundtrip() {
        let params = ClassifierParams {
            kind: ClassifierKind::MultinomialLogistic,
            weights: DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            l2_penalty: 0.01,
        };
        let doc = serde_json::to_string(&params).unwrap();
        let back: ClassifierParams = serde_json::from_str(&doc).unwrap();
        assert_eq!(params, back);
    }
}
