//! MixMatch: label guessing, sharpening, MixUp and the batch pipeline, with
//! the optional nullspace term on pre-MixUp guesses of equivalence pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::losses::{mean_row_sq_distance, one_hot};
use crate::datagen::{augment, AugmentPolicy};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::nnmodel::{BoundMlp, MlpParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    /// Beta(α, α) parameter for MixUp.
    pub alpha: f64,
    /// Sharpening temperature.
    pub temperature: f64,
    /// Augmentations per unlabeled example (K).
    pub augmentations: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            temperature: 0.5,
            augmentations: 2,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.augmentations == 0 {
            return Err(Error::Config("augmentations (K) must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Sharpened, augmentation-averaged prediction for one unlabeled example.
#[derive(Clone, Debug, PartialEq)]
pub struct GuessedLabel(pub Vec<f64>);

impl GuessedLabel {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// `p_i^(1/T) / Σ_j p_j^(1/T)`.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let powered: Vec<f64> = p.iter().map(|v| v.powf(1.0 / temperature)).collect();
    let total: f64 = powered.iter().sum();
    Ok(powered.iter().map(|v| v / total).collect())
}

/// In-graph sharpening, `softmax(ln p / T)` row-wise.
pub fn sharpen_in<'g>(p: Var<'g>, temperature: f64) -> Result<Var<'g>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    p.log()?.scale(1.0 / temperature).softmax()
}

/// Guessed labels from already-augmented copies of a batch.
fn guess_from_augmented<'g>(model: &BoundMlp<'_, 'g>, copies: &[Tensor], temperature: f64) -> Result<Var<'g>> {
    let g = model.graph();
    let mut total: Option<Var<'g>> = None;
    for x in copies {
        let p = model.probs(g.constant(x.clone()))?;
        total = Some(match total {
            Some(t) => t.add(p)?,
            None => p,
        });
    }
    let mean = total
        .ok_or_else(|| Error::Config("augmentations (K) must be ≥ 1".into()))?
        .scale(1.0 / copies.len() as f64);
    sharpen_in(mean, temperature)
}

fn augment_copies<R: Rng + ?Sized>(x: &Tensor, k: usize, policy: &AugmentPolicy, rng: &mut R) -> Result<Vec<Tensor>> {
    (0..k).map(|_| augment(x, policy, rng)).collect()
}

/// Guessed labels for every row of `x`, differentiable through the model.
pub fn guess_labels_in<'g, R: Rng + ?Sized>(
    model: &BoundMlp<'_, 'g>,
    x: &Tensor,
    augmentations: usize,
    policy: &AugmentPolicy,
    temperature: f64,
    rng: &mut R,
) -> Result<Var<'g>> {
    let copies = augment_copies(x, augmentations, policy, rng)?;
    guess_from_augmented(model, &copies, temperature)
}

/// Guessed labels for every row of `x`.
pub fn guess_labels<R: Rng + ?Sized>(
    params: &MlpParams,
    x: &Tensor,
    augmentations: usize,
    policy: &AugmentPolicy,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<GuessedLabel>> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    let q = guess_labels_in(&model, x, augmentations, policy, temperature, rng)?;
    Ok(q.value().row_iter().map(|r| GuessedLabel(r.to_vec())).collect())
}

/// Guessed label for a single example.
pub fn guess_label<R: Rng + ?Sized>(
    params: &MlpParams,
    example: &[f64],
    augmentations: usize,
    policy: &AugmentPolicy,
    temperature: f64,
    rng: &mut R,
) -> Result<GuessedLabel> {
    let x = Tensor::matrix(1, example.len(), example.to_vec())?;
    let mut rows = guess_labels(params, &x, augmentations, policy, temperature, rng)?;
    Ok(rows.remove(0))
}

/// Draws `λ ~ Beta(α, α)` and returns `max(λ, 1 − λ)`.
pub fn draw_mix_weight<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    Ok(lambda.max(1.0 - lambda))
}

/// `(w·x₁ + (1−w)·x₂, w·p₁ + (1−w)·p₂)`.
pub fn mix_with_weight(x1: &[f64], p1: &[f64], x2: &[f64], p2: &[f64], weight: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() || p1.len() != p2.len() {
        return Err(Error::dim(
            "mixup",
            format!("inputs {}/{} and targets {}/{}", x1.len(), x2.len(), p1.len(), p2.len()),
        ));
    }
    let lerp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| weight * u + (1.0 - weight) * v).collect();
    Ok((lerp(x1, x2), lerp(p1, p2)))
}

/// MixUp of two examples, weighted at least half towards the first.
pub fn mixup<R: Rng + ?Sized>(
    x1: &[f64],
    p1: &[f64],
    x2: &[f64],
    p2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let weight = draw_mix_weight(alpha, rng)?;
    mix_with_weight(x1, p1, x2, p2, weight)
}

/// Interpolated labeled and unlabeled examples with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub labeled_x: Tensor,
    pub labeled_y: Tensor,
    pub unlabeled_x: Tensor,
    pub unlabeled_q: Tensor,
}

/// Inputs for one MixMatch batch.
#[derive(Clone, Copy, Debug)]
pub struct MixInputs<'a> {
    pub labeled_x: &'a Tensor,
    pub labeled_y: &'a [usize],
    pub unlabeled_x: &'a Tensor,
    /// Equivalence pairs as interleaved rows `j₀, k₀, j₁, k₁, …`.
    pub pairs: Option<&'a Tensor>,
}

/// Result of [`mixmatch_batch_in`].
pub struct MixMatchOutput<'g> {
    pub mixed: MixedBatch,
    /// Guessed labels `(q_j, q_k)` of the pair members, taken before any
    /// mixing and still attached to the graph.
    pub pair_guesses: Option<(Var<'g>, Var<'g>)>,
}

/// Splits interleaved pair rows into first and second members.
pub fn split_pairs(pairs: &Tensor) -> Result<(Tensor, Tensor)> {
    let rows = pairs.rows();
    if pairs.shape().len() != 2 || !rows.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "equivalence pairing needs an even number of rows, got shape {:?}",
            pairs.shape()
        )));
    }
    let firsts: Vec<usize> = (0..rows).step_by(2).collect();
    let seconds: Vec<usize> = (1..rows).step_by(2).collect();
    Ok((pairs.select_rows(&firsts)?, pairs.select_rows(&seconds)?))
}

/// Builds one MixMatch batch.
///
/// Labeled rows are augmented once and unlabeled rows `K` times (from
/// `rng`); each unlabeled row gets one guessed label from its `K` copies.
/// The pooled examples are shuffled and every pool entry is mixed with the
/// entry at the same position of the shuffled pool. Equivalence pairs are
/// guessed separately from `pair_rng`, before and independent of the mixing.
pub fn mixmatch_batch_in<'g, R: Rng + ?Sized, P: Rng + ?Sized>(
    model: &BoundMlp<'_, 'g>,
    inputs: MixInputs<'_>,
    config: &MixConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
    pair_rng: &mut P,
) -> Result<MixMatchOutput<'g>> {
    config.validate()?;
    let k = model.params().classes();
    let MixInputs {
        labeled_x,
        labeled_y,
        unlabeled_x,
        pairs,
    } = inputs;
    if labeled_x.rows() != labeled_y.len() {
        return Err(Error::dim(
            "mixmatch_batch",
            format!("{} labeled rows vs {} labels", labeled_x.rows(), labeled_y.len()),
        ));
    }
    let pair_sides = pairs.map(split_pairs).transpose()?;

    let labeled_aug = augment(labeled_x, policy, rng)?;
    let labeled_targets = one_hot(labeled_y, k)?;
    let unlabeled_copies = augment_copies(unlabeled_x, config.augmentations, policy, rng)?;
    let guesses = {
        // Guessed labels are fixed targets for the unlabeled term.
        let g = Graph::new();
        let frozen = model.params().bind_const(&g);
        let q = guess_from_augmented(&frozen, &unlabeled_copies, config.temperature)?;
        (*q.value()).clone()
    };

    let mut pool_x: Vec<&[f64]> = labeled_aug.row_iter().collect();
    let mut pool_p: Vec<&[f64]> = labeled_targets.row_iter().collect();
    for copy in &unlabeled_copies {
        pool_x.extend(copy.row_iter());
        pool_p.extend(guesses.row_iter());
    }
    let mut order: Vec<usize> = (0..pool_x.len()).collect();
    order.shuffle(rng);

    let mut mixed_x = Vec::with_capacity(pool_x.len() * labeled_x.cols());
    let mut mixed_p = Vec::with_capacity(pool_x.len() * k);
    for (i, &j) in order.iter().enumerate() {
        let weight = draw_mix_weight(config.alpha, rng)?;
        let (x, p) = mix_with_weight(pool_x[i], pool_p[i], pool_x[j], pool_p[j], weight)?;
        mixed_x.extend(x);
        mixed_p.extend(p);
    }
    let n_l = labeled_x.rows();
    let n_u = pool_x.len() - n_l;
    let d = labeled_x.cols();
    let mixed = MixedBatch {
        labeled_x: Tensor::matrix(n_l, d, mixed_x[..n_l * d].to_vec())?,
        labeled_y: Tensor::matrix(n_l, k, mixed_p[..n_l * k].to_vec())?,
        unlabeled_x: Tensor::matrix(n_u, d, mixed_x[n_l * d..].to_vec())?,
        unlabeled_q: Tensor::matrix(n_u, k, mixed_p[n_l * k..].to_vec())?,
    };

    let pair_guesses = match pair_sides {
        Some((xj, xk)) => {
            let qj = guess_labels_in(model, &xj, config.augmentations, policy, config.temperature, pair_rng)?;
            let qk = guess_labels_in(model, &xk, config.augmentations, policy, config.temperature, pair_rng)?;
            Some((qj, qk))
        }
        None => None,
    };
    Ok(MixMatchOutput { mixed, pair_guesses })
}

/// [`mixmatch_batch_in`] for fixed parameters; returns the recorded
/// `(q_j, q_k)` guesses per pair.
pub fn mixmatch_batch<R: Rng + ?Sized, P: Rng + ?Sized>(
    params: &MlpParams,
    inputs: MixInputs<'_>,
    config: &MixConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
    pair_rng: &mut P,
) -> Result<(MixedBatch, Vec<(GuessedLabel, GuessedLabel)>)> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    let out = mixmatch_batch_in(&model, inputs, config, policy, rng, pair_rng)?;
    let pairs = match out.pair_guesses {
        Some((qj, qk)) => {
            let (qj, qk) = (qj.value(), qk.value());
            qj.row_iter()
                .zip(qk.row_iter())
                .map(|(a, b)| (GuessedLabel(a.to_vec()), GuessedLabel(b.to_vec())))
                .collect()
        }
        None => Vec::new(),
    };
    Ok((out.mixed, pairs))
}

/// `(L_X, L_U)` on a mixed batch. `L_U` is the mean squared distance
/// between predictions and mixed guesses, divided by the class count.
pub fn mixmatch_losses_in<'g>(model: &BoundMlp<'_, 'g>, mixed: &MixedBatch) -> Result<(Var<'g>, Var<'g>)> {
    let g = model.graph();
    let lx = model
        .logits(g.constant(mixed.labeled_x.clone()))?
        .softmax_cross_entropy(&mixed.labeled_y)?;
    let pu = model.probs(g.constant(mixed.unlabeled_x.clone()))?;
    let classes = model.params().classes() as f64;
    let lu = mean_row_sq_distance(pu, g.constant(mixed.unlabeled_q.clone()))?.scale(1.0 / classes);
    Ok((lx, lu))
}

pub fn mixmatch_losses(params: &MlpParams, mixed: &MixedBatch) -> Result<(f64, f64)> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    let (lx, lu) = mixmatch_losses_in(&model, mixed)?;
    Ok((lx.item()?, lu.item()?))
}

/// `L_E`: mean over pairs of `‖q_j − q_k‖²`.
pub fn nullspace_term_in<'g>(qj: Var<'g>, qk: Var<'g>) -> Result<Var<'g>> {
    mean_row_sq_distance(qj, qk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmodel::{init_params, predict_proba, ModelConfig};
    use crate::rngs::seeded;
    use crate::ssl::{cross_entropy, pair_consistency_loss, Targets};
    use approx::assert_abs_diff_eq;

    #[test]
    fn sharpen_examples() {
        let u = [0.25; 4];
        for t in [0.1, 0.5, 2.0] {
            for v in sharpen(&u, t).unwrap() {
                assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
            }
        }
        let p = [0.2, 0.3, 0.5];
        for (a, b) in sharpen(&p, 1.0).unwrap().iter().zip(&p) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let s = sharpen(&[0.8, 0.2], 0.5).unwrap();
        assert_abs_diff_eq!(s[0], 16.0 / 17.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 1.0 / 17.0, epsilon = 1e-12);
        assert!(sharpen(&p, 0.0).is_err());
        assert!(sharpen(&p, -1.0).is_err());
    }

    #[test]
    fn graph_sharpen_matches_plain() {
        let g = Graph::new();
        let p = g.constant(Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05]).unwrap());
        let s = sharpen_in(p, 0.5).unwrap().value();
        for (i, row) in [[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]].iter().enumerate() {
            let plain = sharpen(row, 0.5).unwrap();
            for (a, b) in s.row(i).iter().zip(&plain) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_guess_is_the_prediction() {
        let params = init_params(&ModelConfig::new(vec![2, 5, 3], 1)).unwrap();
        let x = [0.3, -0.8];
        let pred = predict_proba(&params, &Tensor::matrix(1, 2, x.to_vec()).unwrap()).unwrap();
        for k in [1, 4] {
            let q = guess_label(&params, &x, k, &AugmentPolicy::Identity, 1.0, &mut seeded(0)).unwrap();
            for (a, b) in q.probs().iter().zip(pred.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_guesses_uniform() {
        let params = MlpParams::zeros(&[2, 4, 5]).unwrap();
        let policy = AugmentPolicy::GaussianJitter { sigma: 0.5 };
        let q = guess_label(&params, &[1.0, 2.0], 3, &policy, 0.5, &mut seeded(2)).unwrap();
        for v in q.probs() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(q.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mixup_examples() {
        let (x1, p1, x2, p2) = ([1.0, 2.0], [1.0, 0.0], [3.0, -1.0], [0.0, 1.0]);
        let (x, p) = mix_with_weight(&x1, &p1, &x2, &p2, 1.0).unwrap();
        assert_eq!((x.as_slice(), p.as_slice()), (&x1[..], &p1[..]));
        // λ = 0.3 → λ′ = max(0.3, 0.7) = 0.7
        let w = 0.3f64.max(1.0 - 0.3);
        let (x, p) = mix_with_weight(&x1, &p1, &x2, &p2, w).unwrap();
        assert_abs_diff_eq!(x[0], 0.7 * 1.0 + 0.3 * 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.7 * 2.0 - 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(mixup(&x1, &p1, &x2[..1], &p2, 0.75, &mut seeded(0)).is_err());
        assert!(mixup(&x1, &p1, &x2, &p2, 0.0, &mut seeded(0)).is_err());
    }

    fn batch_fixture() -> (MlpParams, Tensor, Vec<usize>, Tensor, Tensor) {
        let params = init_params(&ModelConfig::new(vec![2, 8, 3], 4)).unwrap();
        let lx = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0]]).unwrap();
        let ux = Tensor::from_rows(&[vec![0.2, 0.1], vec![0.4, -0.5], vec![0.9, 0.9], vec![-0.3, 0.6]]).unwrap();
        let pairs = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.6, 0.4], vec![-1.0, 0.2], vec![-0.8, 0.1]]).unwrap();
        (params, lx, vec![0, 1, 2], ux, pairs)
    }

    #[test]
    fn batch_sizes_and_pre_mix_guesses() {
        let (params, lx, ly, ux, pairs) = batch_fixture();
        let config = MixConfig {
            augmentations: 3,
            ..MixConfig::default()
        };
        let policy = AugmentPolicy::GaussianJitter { sigma: 0.1 };
        let inputs = MixInputs {
            labeled_x: &lx,
            labeled_y: &ly,
            unlabeled_x: &ux,
            pairs: Some(&pairs),
        };
        let (mut rng, mut pair_rng) = (seeded(1), seeded(2));
        let (mixed, recorded) = mixmatch_batch(&params, inputs, &config, &policy, &mut rng, &mut pair_rng).unwrap();
        assert_eq!(mixed.labeled_x.rows(), 3);
        assert_eq!(mixed.unlabeled_x.rows(), 3 * 4);
        assert_eq!(mixed.unlabeled_q.shape(), &[12, 3]);
        for t in [&mixed.labeled_y, &mixed.unlabeled_q] {
            for row in t.row_iter() {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }

        let (xj, xk) = split_pairs(&pairs).unwrap();
        let mut replay = seeded(2);
        let qj = guess_labels(&params, &xj, 3, &policy, 0.5, &mut replay).unwrap();
        let qk = guess_labels(&params, &xk, 3, &policy, 0.5, &mut replay).unwrap();
        assert_eq!(recorded.len(), 2);
        for (i, (a, b)) in recorded.iter().enumerate() {
            assert_eq!(a, &qj[i]);
            assert_eq!(b, &qk[i]);
        }

        let (again, _) = mixmatch_batch(&params, inputs, &config, &policy, &mut seeded(1), &mut seeded(2)).unwrap();
        assert_eq!(again, mixed);
    }

    #[test]
    fn odd_pairing_rejected() {
        let (params, lx, ly, ux, pairs) = batch_fixture();
        let odd = pairs.select_rows(&[0, 1, 2]).unwrap();
        let inputs = MixInputs {
            labeled_x: &lx,
            labeled_y: &ly,
            unlabeled_x: &ux,
            pairs: Some(&odd),
        };
        let r = mixmatch_batch(
            &params,
            inputs,
            &MixConfig::default(),
            &AugmentPolicy::Identity,
            &mut seeded(0),
            &mut seeded(0),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn mixmatch_losses_recompute() {
        let (params, lx, ly, ux, _) = batch_fixture();
        let inputs = MixInputs {
            labeled_x: &lx,
            labeled_y: &ly,
            unlabeled_x: &ux,
            pairs: None,
        };
        let (mixed, _) = mixmatch_batch(
            &params,
            inputs,
            &MixConfig::default(),
            &AugmentPolicy::Identity,
            &mut seeded(5),
            &mut seeded(6),
        )
        .unwrap();
        let (lx_val, lu_val) = mixmatch_losses(&params, &mixed).unwrap();

        let pl = predict_proba(&params, &mixed.labeled_x).unwrap();
        let expected_lx = cross_entropy(&pl, Targets::Probs(&mixed.labeled_y)).unwrap();
        let pu = predict_proba(&params, &mixed.unlabeled_x).unwrap();
        let rows = pu.rows();
        let expected_lu = (0..rows)
            .map(|i| pair_consistency_loss(pu.row(i), mixed.unlabeled_q.row(i)).unwrap())
            .sum::<f64>()
            / rows as f64
            / 3.0;
        assert_abs_diff_eq!(lx_val, expected_lx, epsilon = 1e-12);
        assert_abs_diff_eq!(lu_val, expected_lu, epsilon = 1e-12);

        // exact targets give zero unlabeled loss
        let exact = MixedBatch {
            unlabeled_q: pu.clone(),
            ..mixed.clone()
        };
        assert_eq!(mixmatch_losses(&params, &exact).unwrap().1, 0.0);

        // one-row case is the pair loss over k
        let one = MixedBatch {
            unlabeled_x: mixed.unlabeled_x.select_rows(&[0]).unwrap(),
            unlabeled_q: mixed.unlabeled_q.select_rows(&[0]).unwrap(),
            ..mixed
        };
        let single = pair_consistency_loss(pu.row(0), one.unlabeled_q.row(0)).unwrap() / 3.0;
        assert_abs_diff_eq!(mixmatch_losses(&params, &one).unwrap().1, single, epsilon = 1e-15);
    }
}
