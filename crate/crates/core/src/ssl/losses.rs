use crate::ndgrad::{Graph, Tensor, Var};
use crate::nnmodel::BoundMlp;
use crate::{Error, Result};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Targets for [`cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Probs(&'a Tensor),
}

/// One-hot rows for class ids.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelDomain(format!("label {l} outside 0..{classes}")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

fn as_rows(t: &Tensor) -> Tensor {
    if t.shape().len() == 1 {
        Tensor::matrix(1, t.len(), t.data().to_vec()).expect("non-empty vector")
    } else {
        t.clone()
    }
}

/// Mean over rows of `−Σ target · ln(max(prob, 1e-12))`.
pub fn cross_entropy(probs: &Tensor, targets: Targets<'_>) -> Result<f64> {
    let probs = as_rows(probs);
    let targets = match targets {
        Targets::Classes(c) => one_hot(c, probs.cols())?,
        Targets::Probs(t) => as_rows(t),
    };
    if probs.shape() != targets.shape() {
        return Err(Error::dim(
            "cross_entropy",
            format!("probs {:?} vs targets {:?}", probs.shape(), targets.shape()),
        ));
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Squared Euclidean distance between two probability rows.
pub fn pair_consistency_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(
            "pair_consistency_loss",
            format!("{} vs {}", p.len(), q.len()),
        ));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean over rows of the squared distance between `a` and `b`, in-graph.
pub fn mean_row_sq_distance<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let rows = a.value().rows() as f64;
    Ok(a.sub(b)?.squared_norm().scale(1.0 / rows))
}

/// Nullspace tuning objective on one batch:
/// `CE(h(x_i), y_i) + λ · mean_pairs ‖h(x*_j) − h(x*_k)‖²`.
///
/// `pair_j` and `pair_k` hold the two members of each pair row by row.
/// With `λ = 0` the penalty is still evaluated, multiplied by zero.
pub fn nst_loss_in<'g>(
    model: &BoundMlp<'_, 'g>,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    pairs: Option<(&Tensor, &Tensor)>,
    lambda: f64,
) -> Result<Var<'g>> {
    let g = model.graph();
    let supervised = supervised_loss_in(model, labeled_x, labeled_y)?;
    let Some((xj, xk)) = pairs else {
        return Ok(supervised);
    };
    if xj.shape() != xk.shape() {
        return Err(Error::dim(
            "nst_loss",
            format!("pair sides {:?} vs {:?}", xj.shape(), xk.shape()),
        ));
    }
    let pj = model.probs(g.constant(xj.clone()))?;
    let pk = model.probs(g.constant(xk.clone()))?;
    let penalty = mean_row_sq_distance(pj, pk)?;
    supervised.add(penalty.scale(lambda))
}

/// Fused softmax cross-entropy of the model on a labeled batch.
pub fn supervised_loss_in<'g>(model: &BoundMlp<'_, 'g>, x: &Tensor, y: &[usize]) -> Result<Var<'g>> {
    if y.is_empty() {
        return Err(Error::Contract("empty labeled batch".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::dim(
            "supervised_loss",
            format!("{} rows vs {} labels", x.rows(), y.len()),
        ));
    }
    let targets = one_hot(y, model.params().classes())?;
    model
        .logits(model.graph().constant(x.clone()))?
        .softmax_cross_entropy(&targets)
}

/// Value of [`nst_loss_in`] for fixed parameters.
pub fn nst_loss(
    params: &crate::nnmodel::MlpParams,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    pairs: Option<(&Tensor, &Tensor)>,
    lambda: f64,
) -> Result<f64> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    nst_loss_in(&model, labeled_x, labeled_y, pairs, lambda)?.item()
}

/// `L_X + λ_U · L_U + λ_E · L_E`.
pub fn combined_loss(lx: f64, lu: f64, le: f64, lambda_u: f64, lambda_e: f64) -> f64 {
    lx + lambda_u * lu + lambda_e * le
}

/// In-graph [`combined_loss`]; a missing `L_E` term is simply left out.
pub fn combined_loss_in<'g>(
    lx: Var<'g>,
    lu: Var<'g>,
    le: Option<Var<'g>>,
    lambda_u: f64,
    lambda_e: f64,
) -> Result<Var<'g>> {
    let total = lx.add(lu.scale(lambda_u))?;
    match le {
        Some(le) => total.add(le.scale(lambda_e)),
        None => Ok(total),
    }
}
