use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::ndgrad::Tensor;
use crate::nnmodel::{activations, MlpParams};
use crate::{Error, Result};

/// Projects the rows of `features` onto their top two principal components.
///
/// Each component is oriented so that its largest-magnitude entry is
/// positive. With a single feature the second coordinate is zero.
pub fn pca_2d(features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 {
        return Err(Error::dim(
            "pca",
            format!("expected a matrix, got {:?}", features.shape()),
        ));
    }
    let (n, d) = (features.rows(), features.cols());
    if n < 2 {
        return Err(Error::Contract(format!("embedding needs at least 2 rows, got {n}")));
    }
    let mut x = DMatrix::from_row_slice(n, d, features.data());
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let total: f64 = cov.diagonal().iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateEmbedding("activations have zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut out = vec![0.0; n * 2];
    for (axis, &c) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(c).into_owned();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |best, e| if e.abs() > best.abs() { e } else { best });
        if pivot < 0.0 {
            v.neg_mut();
        }
        let proj = &x * v;
        for (i, p) in proj.iter().enumerate() {
            out[i * 2 + axis] = *p;
        }
    }
    Tensor::matrix(n, 2, out)
}

/// Activations of `params` at `layer` for every row of `x`, embedded in 2D.
pub fn embed_features(params: &MlpParams, layer: usize, x: &Tensor) -> Result<Tensor> {
    pca_2d(&activations(params, x, layer)?)
}

/// Writes `x,y,label` rows.
pub fn write_embedding_csv(coords: &Tensor, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if coords.rows() != labels.len() || coords.cols() != 2 {
        return Err(Error::dim(
            "write_embedding_csv",
            format!("{:?} coordinates for {} labels", coords.shape(), labels.len()),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["x", "y", "label"]).map_err(fail)?;
    for (row, label) in coords.row_iter().zip(labels) {
        w.write_record([row[0].to_string(), row[1].to_string(), label.to_string()])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
