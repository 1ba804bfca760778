//! Loss terms and semi-supervised mechanisms.
//!
//! Most operations come in two forms: a `*_in` function that records the
//! computation on a [`Graph`](crate::ndgrad::Graph) through a bound model so
//! it can be differentiated, and a plain function that evaluates the same
//! thing for fixed parameters.

mod baselines;
mod losses;
mod mixmatch;

pub use baselines::{
    mean_teacher_loss, mean_teacher_loss_in, pi_model_loss, pi_model_loss_in, pseudo_label_loss, pseudo_label_loss_in,
    pseudo_label_targets, vat_loss, vat_loss_in, vat_perturbation, VatConfig,
};
pub use losses::{
    combined_loss, combined_loss_in, cross_entropy, mean_row_sq_distance, nst_loss, nst_loss_in, one_hot,
    pair_consistency_loss, supervised_loss_in, Targets, PROB_FLOOR,
};
pub use mixmatch::{
    draw_mix_weight, guess_label, guess_labels, guess_labels_in, mix_with_weight, mixmatch_batch, mixmatch_batch_in,
    mixmatch_losses, mixmatch_losses_in, mixup, nullspace_term_in, sharpen, sharpen_in, split_pairs, GuessedLabel,
    MixConfig, MixInputs, MixMatchOutput, MixedBatch,
};

use serde::{Deserialize, Serialize};

/// Weights of the unlabeled and nullspace terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the pair penalty in plain nullspace tuning.
    pub lambda: f64,
    /// Maximum weight of the MixMatch unlabeled term (ramped up).
    #[serde(rename = "lambda_U")]
    pub lambda_u: f64,
    /// Weight of the nullspace term in MixMatchNST (never ramped).
    #[serde(rename = "lambda_E")]
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_u: 75.0,
            lambda_e: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_U", self.lambda_u),
            ("lambda_E", self.lambda_e),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(crate::Error::Config(format!(
                    "{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}
