//! Optimization loop: schedules, Adam, per-method loss composition and
//! evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_equiv_pairs, AugmentPolicy, PartialDataset};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::nnmodel::{ema_update, init_params, predict_proba, BoundMlp, MlpParams, ModelConfig};
use crate::rngs::{step_rng, Stream};
use crate::ssl::{
    combined_loss_in, mean_teacher_loss_in, mixmatch_batch_in, mixmatch_losses_in, nst_loss_in, nullspace_term_in,
    pi_model_loss_in, pseudo_label_loss_in, supervised_loss_in, vat_loss_in, vat_perturbation, LossWeights, MixConfig,
    MixInputs, VatConfig,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Supervised,
    Nst,
    PiModel,
    MeanTeacher,
    PseudoLabel,
    Vat,
    Mixmatch,
    MixmatchNst,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Supervised,
        Method::Nst,
        Method::PiModel,
        Method::MeanTeacher,
        Method::PseudoLabel,
        Method::Vat,
        Method::Mixmatch,
        Method::MixmatchNst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Nst => "nst",
            Method::PiModel => "pi-model",
            Method::MeanTeacher => "mean-teacher",
            Method::PseudoLabel => "pseudo-label",
            Method::Vat => "vat",
            Method::Mixmatch => "mixmatch",
            Method::MixmatchNst => "mixmatch-nst",
        }
    }

    /// Whether the method samples equivalence pairs.
    pub fn uses_pairs(self) -> bool {
        matches!(self, Method::Nst | Method::MixmatchNst)
    }

    /// Whether the method draws unlabeled batches.
    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Method::Supervised | Method::Nst)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Everything one training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Equivalence pairs per step for nst and mixmatch-nst.
    pub pair_batch: usize,
    pub weights: LossWeights,
    pub mix: MixConfig,
    pub augment: AugmentPolicy,
    /// Steps over which λ_U (and the baseline weight) ramp up linearly.
    pub rampup_steps: usize,
    pub ema_decay: f64,
    pub pseudo_threshold: f64,
    pub vat: VatConfig,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Maximum weight of the Π-model, Mean Teacher, pseudo-label and VAT
    /// terms.
    pub baseline_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Supervised,
            hidden: vec![32, 32],
            learning_rate: 0.01,
            steps: 400,
            labeled_batch: 32,
            unlabeled_batch: 32,
            pair_batch: 32,
            weights: LossWeights::default(),
            mix: MixConfig::default(),
            augment: AugmentPolicy::default(),
            rampup_steps: 100,
            ema_decay: 0.99,
            pseudo_threshold: 0.95,
            vat: VatConfig::default(),
            weight_decay: 1e-4,
            seed: 0,
            eval_interval: 100,
            baseline_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("labeled_batch", self.labeled_batch),
            ("unlabeled_batch", self.unlabeled_batch),
            ("pair_batch", self.pair_batch),
            ("eval_interval", self.eval_interval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be ≥ 1")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.baseline_weight >= 0.0) {
            return Err(Error::Config(format!(
                "baseline_weight must be ≥ 0, got {}",
                self.baseline_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "pseudo_threshold {} outside (0, 1]",
                self.pseudo_threshold
            )));
        }
        self.weights.validate()?;
        self.mix.validate()?;
        self.augment.validate()?;
        self.vat.validate()
    }

    fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// `λ_max · min(1, step / rampup_length)`; a zero length means no ramp.
pub fn rampup_weight(step: usize, rampup_length: usize, max: f64) -> f64 {
    if rampup_length == 0 || step >= rampup_length {
        max
    } else {
        max * step as f64 / rampup_length as f64
    }
}

/// Loss weights in force at one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveWeights {
    pub lambda: f64,
    pub lambda_u: f64,
    pub lambda_e: f64,
    pub baseline: f64,
}

/// λ_U and the baseline weight follow the linear ramp; λ and λ_E do not.
pub fn effective_weights(config: &TrainConfig, step: usize) -> EffectiveWeights {
    let ramp = |max| rampup_weight(step, config.rampup_steps, max);
    EffectiveWeights {
        lambda: config.weights.lambda,
        lambda_u: ramp(config.weights.lambda_u),
        lambda_e: config.weights.lambda_e,
        baseline: ramp(config.baseline_weight),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, in parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: MlpParams,
    v: MlpParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = MlpParams::zeros(&params.widths()).expect("widths of existing params");
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One Adam step with bias correction followed by decoupled weight decay
/// `θ ← θ(1 − lr·wd)`.
pub fn optimizer_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::dim(
            "optimizer_step",
            format!("params {:?} vs grads {:?}", params.widths(), grads.widths()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let cells = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((theta, &grad), (mi, vi)) in cells {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * grad;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * grad * grad;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            *theta *= decay;
        }
    }
    Ok(())
}

/// Predicted class of a probability row; ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose predicted class differs from `y`.
pub fn evaluate(params: &MlpParams, x: &Tensor, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::dim(
            "evaluate",
            format!("{} rows vs {} labels", x.rows(), y.len()),
        ));
    }
    let probs = predict_proba(params, x)?;
    let wrong = probs
        .row_iter()
        .zip(y)
        .filter(|(row, &label)| argmax_row(row) != label)
        .count();
    Ok(wrong as f64 / y.len() as f64)
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimizer steps taken so far.
    pub step: usize,
    /// Loss of the most recent step.
    pub train_loss: f64,
    /// Absent when the split has no validation set.
    pub validation_error: Option<f64>,
    pub test_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub history: Vec<EvalRecord>,
    /// Loss value of every step, in order.
    pub losses: Vec<f64>,
    pub final_test_error: f64,
    pub config: TrainConfig,
    pub seconds: f64,
    /// Parameters used for prediction (the teacher for mean-teacher).
    pub params: MlpParams,
}

impl RunResult {
    /// Equality of everything except wall-clock time.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        self.history == other.history
            && self.losses == other.losses
            && self.final_test_error == other.final_test_error
            && self.config == other.config
            && self.params == other.params
    }
}

/// Picks `b` distinct entries of `pool`, or all of them when `b` is not
/// smaller than the pool.
fn sample_batch<R: Rng + ?Sized>(pool_len: usize, b: usize, rng: &mut R) -> Vec<usize> {
    if b >= pool_len {
        (0..pool_len).collect()
    } else {
        index::sample(rng, pool_len, b).into_vec()
    }
}

struct StepData {
    labeled_x: Tensor,
    labeled_y: Vec<usize>,
    unlabeled_x: Option<Tensor>,
    /// Interleaved pair rows `j₀, k₀, j₁, k₁, …`.
    pairs: Option<Tensor>,
}

fn draw_step(config: &TrainConfig, data: &PartialDataset, step: u64) -> Result<StepData> {
    let seed = config.seed;
    let labeled = data.labeled();
    let picks = sample_batch(
        labeled.len(),
        config.labeled_batch,
        &mut step_rng(seed, step, Stream::LabeledBatch),
    );
    let idx: Vec<usize> = picks.iter().map(|&i| labeled[i]).collect();
    let labeled_x = data.dataset().rows(&idx)?;
    let labeled_y = data.dataset().labels_of(&idx);

    let unlabeled_x = if config.method.uses_unlabeled() {
        let n = data.unlabeled().len();
        if n == 0 {
            return Err(Error::Config(format!("method {} needs unlabeled data", config.method)));
        }
        let picks = sample_batch(
            n,
            config.unlabeled_batch,
            &mut step_rng(seed, step, Stream::UnlabeledBatch),
        );
        Some(data.unlabeled_rows(&picks)?)
    } else {
        None
    };

    let pairs = if config.method.uses_pairs() {
        let batch = sample_equiv_pairs(data, config.pair_batch, &mut step_rng(seed, step, Stream::Pairs))?;
        let interleaved: Vec<usize> = batch.pairs.iter().flat_map(|&(j, k)| [j, k]).collect();
        Some(data.unlabeled_rows(&interleaved)?)
    } else {
        None
    };
    Ok(StepData {
        labeled_x,
        labeled_y,
        unlabeled_x,
        pairs,
    })
}

fn step_loss<'g>(
    config: &TrainConfig,
    model: &BoundMlp<'_, 'g>,
    teacher: Option<&MlpParams>,
    batch: &StepData,
    step: u64,
) -> Result<Var<'g>> {
    let seed = config.seed;
    let w = effective_weights(config, step as usize);
    let unlabeled = || batch.unlabeled_x.as_ref().expect("drawn for unlabeled methods");
    let supervised = || supervised_loss_in(model, &batch.labeled_x, &batch.labeled_y);
    let mut augment_rng = step_rng(seed, step, Stream::Augment);
    let baseline = |term: Var<'g>| -> Result<Var<'g>> { supervised()?.add(term.scale(w.baseline)) };

    match config.method {
        Method::Supervised => supervised(),
        Method::Nst => {
            let pairs = batch.pairs.as_ref().expect("drawn for pair methods");
            let (xj, xk) = crate::ssl::split_pairs(pairs)?;
            nst_loss_in(model, &batch.labeled_x, &batch.labeled_y, Some((&xj, &xk)), w.lambda)
        }
        Method::PiModel => baseline(pi_model_loss_in(model, unlabeled(), &config.augment, &mut augment_rng)?),
        Method::MeanTeacher => {
            let teacher = teacher.expect("mean-teacher keeps a teacher");
            baseline(mean_teacher_loss_in(
                model,
                teacher,
                unlabeled(),
                &config.augment,
                &mut augment_rng,
            )?)
        }
        Method::PseudoLabel => baseline(pseudo_label_loss_in(model, unlabeled(), config.pseudo_threshold)?),
        Method::Vat => {
            let x = unlabeled();
            let r = vat_perturbation(model.params(), x, &config.vat, &mut step_rng(seed, step, Stream::Vat))?;
            baseline(vat_loss_in(model, x, &r)?)
        }
        Method::Mixmatch | Method::MixmatchNst => {
            let inputs = MixInputs {
                labeled_x: &batch.labeled_x,
                labeled_y: &batch.labeled_y,
                unlabeled_x: unlabeled(),
                pairs: batch.pairs.as_ref(),
            };
            let mut mix_rng = step_rng(seed, step, Stream::Mixup);
            let mut pair_rng = step_rng(seed, step, Stream::PairAugment);
            let out = mixmatch_batch_in(model, inputs, &config.mix, &config.augment, &mut mix_rng, &mut pair_rng)?;
            let (lx, lu) = mixmatch_losses_in(model, &out.mixed)?;
            let le = out.pair_guesses.map(|(qj, qk)| nullspace_term_in(qj, qk)).transpose()?;
            combined_loss_in(lx, lu, le, w.lambda_u, w.lambda_e)
        }
    }
}

/// Trains one model; see [`train_observed`].
pub fn train(config: &TrainConfig, data: &PartialDataset) -> Result<RunResult> {
    train_observed(config, data, |_, _| {})
}

/// Trains one model, calling `observe(step, params)` after every optimizer
/// step. Fully deterministic given `config.seed`.
pub fn train_observed(
    config: &TrainConfig,
    data: &PartialDataset,
    mut observe: impl FnMut(usize, &MlpParams),
) -> Result<RunResult> {
    let started = Instant::now();
    config.validate()?;
    if data.labeled().is_empty() {
        return Err(Error::Config("the split has no labeled examples".into()));
    }
    if data.test().is_empty() {
        return Err(Error::Config("the split has no test examples".into()));
    }
    if config.method.uses_pairs() && !data.has_pairs() {
        return Err(Error::Config(format!(
            "method {} needs equivalence classes with at least two members",
            config.method
        )));
    }
    let (test_x, test_y) = data.test_xy()?;
    let validation = if data.validation().is_empty() {
        None
    } else {
        Some(data.validation_xy()?)
    };

    let mut widths = Vec::with_capacity(config.hidden.len() + 2);
    widths.push(data.dataset().dim());
    widths.extend_from_slice(&config.hidden);
    widths.push(data.num_classes());
    let mut params = init_params(&ModelConfig::new(widths, config.seed))?;
    let mut teacher = (config.method == Method::MeanTeacher).then(|| params.clone());
    let mut adam = AdamState::new(&params);
    let adam_config = config.optimizer();

    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = draw_step(config, data, step as u64)?;
        let g = Graph::new();
        let model = params.bind(&g);
        let loss = step_loss(config, &model, teacher.as_ref(), &batch, step as u64)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Domain {
                op: "train",
                detail: format!("loss became {value} at step {step}"),
            });
        }
        let grads = g.backward(loss, &model.leaves())?;
        let grads = model.gradients(&grads)?;
        drop(model);
        optimizer_step(&mut params, &grads, &mut adam, &adam_config)?;
        if let Some(t) = teacher.as_mut() {
            *t = ema_update(t, &params, config.ema_decay)?;
        }
        losses.push(value);
        observe(step + 1, &params);

        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.steps {
            let predictor = teacher.as_ref().unwrap_or(&params);
            history.push(EvalRecord {
                step: done,
                train_loss: value,
                validation_error: validation
                    .as_ref()
                    .map(|(x, y)| evaluate(predictor, x, y))
                    .transpose()?,
                test_error: evaluate(predictor, &test_x, &test_y)?,
            });
        }
    }
    let final_test_error = history.last().map(|r| r.test_error).expect("steps ≥ 1");
    Ok(RunResult {
        history,
        losses,
        final_test_error,
        config: config.clone(),
        seconds: started.elapsed().as_secs_f64(),
        params: teacher.unwrap_or(params),
    })
}
