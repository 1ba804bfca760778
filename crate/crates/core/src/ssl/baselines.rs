//! Consistency baselines: Π-model, pseudo-labels, Mean Teacher and VAT.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::losses::{mean_row_sq_distance, PROB_FLOOR};
use crate::datagen::{augment, AugmentPolicy};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::nnmodel::{predict_proba, BoundMlp, MlpParams};
use crate::{Error, Result};

/// Mean squared distance between predictions on two independent
/// augmentations of each row of `x`. Both branches carry gradients.
pub fn pi_model_loss_in<'g, R: Rng + ?Sized>(
    model: &BoundMlp<'_, 'g>,
    x: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Var<'g>> {
    let g = model.graph();
    let a = augment(x, policy, rng)?;
    let b = augment(x, policy, rng)?;
    let pa = model.probs(g.constant(a))?;
    let pb = model.probs(g.constant(b))?;
    mean_row_sq_distance(pa, pb)
}

pub fn pi_model_loss<R: Rng + ?Sized>(
    params: &MlpParams,
    x: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<f64> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    pi_model_loss_in(&model, x, policy, rng)?.item()
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "pseudo-label threshold {threshold} outside (0, 1]"
        )))
    }
}

/// Cross-entropy against the argmax label when `max p > threshold`, else 0.
pub fn pseudo_label_loss(probs: &[f64], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let (_, &max) = argmax(probs).ok_or_else(|| Error::dim("pseudo_label_loss", "empty row"))?;
    Ok(if max > threshold {
        -max.max(PROB_FLOOR).ln()
    } else {
        0.0
    })
}

fn argmax(row: &[f64]) -> Option<(usize, &f64)> {
    row.iter().enumerate().fold(None, |best, (i, v)| match best {
        Some((_, b)) if b >= v => best,
        _ => Some((i, v)),
    })
}

/// One-hot argmax rows for confident predictions, zero rows otherwise.
pub fn pseudo_label_targets(probs: &Tensor, threshold: f64) -> Result<Tensor> {
    check_threshold(threshold)?;
    let mut t = Tensor::zeros(probs.shape());
    let cols = probs.cols();
    for (i, row) in probs.row_iter().enumerate() {
        if let Some((j, &max)) = argmax(row) {
            if max > threshold {
                t.data_mut()[i * cols + j] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Batch pseudo-label loss: mean over all rows of [`pseudo_label_loss`],
/// with the confident targets held fixed.
pub fn pseudo_label_loss_in<'g>(model: &BoundMlp<'_, 'g>, x: &Tensor, threshold: f64) -> Result<Var<'g>> {
    let g = model.graph();
    let logits = model.logits(g.constant(x.clone()))?;
    let probs = logits.softmax()?.value();
    let targets = pseudo_label_targets(&probs, threshold)?;
    logits.softmax_cross_entropy(&targets)
}

/// Mean over rows of `‖student − teacher‖²`.
pub fn mean_teacher_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim(
            "mean_teacher_loss",
            format!("{:?} vs {:?}", student.shape(), teacher.shape()),
        ));
    }
    let total: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / student.rows() as f64)
}

/// Student predictions on one augmentation against fixed teacher
/// predictions on another.
pub fn mean_teacher_loss_in<'g, R: Rng + ?Sized>(
    student: &BoundMlp<'_, 'g>,
    teacher: &MlpParams,
    x: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Var<'g>> {
    let g = student.graph();
    let xs = augment(x, policy, rng)?;
    let xt = augment(x, policy, rng)?;
    let ps = student.probs(g.constant(xs))?;
    let pt = g.constant(predict_proba(teacher, &xt)?);
    mean_row_sq_distance(ps, pt)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VatConfig {
    /// Finite-difference scale of the power iteration (ξ).
    pub xi: f64,
    /// Adversarial radius (ε).
    pub epsilon: f64,
    pub power_iterations: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            xi: 1e-6,
            epsilon: 0.3,
            power_iterations: 1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) {
            return Err(Error::Config(format!("VAT xi must be > 0, got {}", self.xi)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("VAT epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if self.power_iterations == 0 {
            return Err(Error::Config("VAT needs at least one power iteration".into()));
        }
        Ok(())
    }
}

fn normalize_rows(t: &mut Tensor) {
    let cols = t.cols();
    for row in t.data_mut().chunks_exact_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn neg_entropy_mean(p: &Tensor) -> f64 {
    let total: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    total / p.rows() as f64
}

/// Adversarial perturbation of norm `ε` per row, found by power iteration
/// on the KL divergence between clean and perturbed predictions.
pub fn vat_perturbation<R: Rng + ?Sized>(
    params: &MlpParams,
    x: &Tensor,
    config: &VatConfig,
    rng: &mut R,
) -> Result<Tensor> {
    config.validate()?;
    let clean = predict_proba(params, x)?;
    let mut d = x.map(|_| Distribution::<f64>::sample(&StandardNormal, rng));
    normalize_rows(&mut d);
    for _ in 0..config.power_iterations {
        let g = Graph::new();
        let model = params.bind_const(&g);
        let dv = g.param(d.clone());
        let shifted = g.constant(x.clone()).add(dv.scale(config.xi))?;
        let kl = model.logits(shifted)?.softmax_cross_entropy(&clean)?;
        let grads = g.backward(kl, &[dv])?;
        let grad = grads.of(&dv).expect("requested leaf");
        let cols = d.cols();
        for (row, grow) in d.data_mut().chunks_exact_mut(cols).zip(grad.row_iter()) {
            let norm = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
            // A vanishing gradient keeps the current direction.
            if norm > 0.0 && norm.is_finite() {
                for (v, gv) in row.iter_mut().zip(grow) {
                    *v = gv / norm;
                }
            }
        }
    }
    Ok(d.map(|v| config.epsilon * v))
}

/// Mean KL(h(x) ‖ h(x + r)) with the clean prediction held fixed.
pub fn vat_loss_in<'g>(model: &BoundMlp<'_, 'g>, x: &Tensor, perturbation: &Tensor) -> Result<Var<'g>> {
    let g = model.graph();
    let clean = predict_proba(model.params(), x)?;
    let shifted = x.zip_map(perturbation, "vat", |a, b| a + b)?;
    let ce = model.logits(g.constant(shifted))?.softmax_cross_entropy(&clean)?;
    let kl = ce.add(g.constant(Tensor::scalar(neg_entropy_mean(&clean))))?;
    // KL ≥ 0; the clamp only removes rounding below zero.
    Ok(kl.relu())
}

pub fn vat_loss<R: Rng + ?Sized>(params: &MlpParams, x: &Tensor, config: &VatConfig, rng: &mut R) -> Result<f64> {
    config.validate()?;
    if config.epsilon == 0.0 {
        return Ok(0.0);
    }
    let r = vat_perturbation(params, x, config, rng)?;
    let g = Graph::new();
    let model = params.bind_const(&g);
    vat_loss_in(&model, x, &r)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmodel::{init_params, ModelConfig};
    use crate::rngs::seeded;
    use crate::ssl::pair_consistency_loss;
    use approx::assert_abs_diff_eq;

    fn fixture() -> (MlpParams, Tensor) {
        let params = init_params(&ModelConfig::new(vec![2, 6, 3], 8)).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.5], vec![-0.7, 0.1]]).unwrap();
        (params, x)
    }

    #[test]
    fn pi_model_examples() {
        let (params, x) = fixture();
        assert_eq!(
            pi_model_loss(&params, &x, &AugmentPolicy::Identity, &mut seeded(0)).unwrap(),
            0.0
        );
        let policy = AugmentPolicy::GaussianJitter { sigma: 0.3 };
        let loss = pi_model_loss(&params, &x, &policy, &mut seeded(3)).unwrap();
        assert!(loss > 0.0);

        let mut rng = seeded(3);
        let a = augment(&x, &policy, &mut rng).unwrap();
        let b = augment(&x, &policy, &mut rng).unwrap();
        let (pa, pb) = (predict_proba(&params, &a).unwrap(), predict_proba(&params, &b).unwrap());
        let expected = (0..3)
            .map(|i| pair_consistency_loss(pa.row(i), pb.row(i)).unwrap())
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label_loss(&[0.6, 0.4], 0.95).unwrap(), 0.0);
        assert_abs_diff_eq!(
            pseudo_label_loss(&[0.96, 0.04], 0.95).unwrap(),
            0.040822,
            epsilon = 1e-6
        );
        assert_eq!(pseudo_label_loss(&[0.999_999, 0.000_001], 1.0).unwrap(), 0.0);
        // strict gate
        assert_eq!(pseudo_label_loss(&[0.95, 0.05], 0.95).unwrap(), 0.0);
        assert!(pseudo_label_loss(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn pseudo_label_batch_matches_rows() {
        let (mut params, x) = fixture();
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 6.0);
        }
        let probs = predict_proba(&params, &x).unwrap();
        let threshold = 0.9;
        let expected = probs
            .row_iter()
            .map(|r| pseudo_label_loss(r, threshold).unwrap())
            .sum::<f64>()
            / 3.0;
        let g = Graph::new();
        let model = params.bind_const(&g);
        let got = pseudo_label_loss_in(&model, &x, threshold).unwrap().item().unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert!(expected > 0.0, "fixture should have confident rows");
    }

    #[test]
    fn mean_teacher_examples() {
        let a = Tensor::vector(vec![0.7, 0.3]).unwrap();
        let b = Tensor::vector(vec![0.6, 0.4]).unwrap();
        assert_eq!(mean_teacher_loss(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(mean_teacher_loss(&a, &b).unwrap(), 0.02, epsilon = 1e-15);
        assert!(mean_teacher_loss(&a, &Tensor::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn mean_teacher_blocks_teacher_gradient() {
        let (params, x) = fixture();
        let teacher = params.clone();
        let g = Graph::new();
        let student = params.bind(&g);
        let loss = mean_teacher_loss_in(
            &student,
            &teacher,
            &x,
            &AugmentPolicy::GaussianJitter { sigma: 0.2 },
            &mut seeded(1),
        )
        .unwrap();
        assert!(loss.item().unwrap() >= 0.0);
        let grads = g.backward(loss, &student.leaves()).unwrap();
        assert_eq!(grads.len(), student.leaves().len());
    }

    #[test]
    fn vat_examples() {
        let (params, x) = fixture();
        let zero = VatConfig {
            epsilon: 0.0,
            ..VatConfig::default()
        };
        assert_eq!(vat_loss(&params, &x, &zero, &mut seeded(0)).unwrap(), 0.0);

        let config = VatConfig {
            epsilon: 0.5,
            power_iterations: 2,
            ..VatConfig::default()
        };
        let r = vat_perturbation(&params, &x, &config, &mut seeded(4)).unwrap();
        for row in r.row_iter() {
            assert_abs_diff_eq!(row.iter().map(|v| v * v).sum::<f64>().sqrt(), 0.5, epsilon = 1e-12);
        }
        assert!(vat_loss(&params, &x, &config, &mut seeded(4)).unwrap() > 0.0);
        assert!(VatConfig { xi: 0.0, ..config }.validate().is_err());
        assert!(VatConfig {
            power_iterations: 0,
            ..config
        }
        .validate()
        .is_err());
    }

    #[test]
    fn vat_zero_gradient_keeps_direction() {
        // Zero parameters give a constant prediction, so the gradient vanishes.
        let params = MlpParams::zeros(&[2, 3]).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let config = VatConfig {
            epsilon: 2.0,
            ..VatConfig::default()
        };
        let r = vat_perturbation(&params, &x, &config, &mut seeded(9)).unwrap();
        assert!(r.all_finite());
        assert_abs_diff_eq!(r.row(0).iter().map(|v| v * v).sum::<f64>().sqrt(), 2.0, epsilon = 1e-12);
    }
}
