use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const NEGATIVE_EIGEN_WARN: f64 = -1e-6;
const ROW_SUM_TOL: f64 = 1e-6;

/// Mean and unbiased covariance of feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape("gaussian fit", &[d, d], &[cov.nrows(), cov.ncols()]));
        }
        Ok(GaussianFit { mean, cov, count: 0 })
    }

    /// Fit `[n, d]` features; requires `n >= d + 1`.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, d) = match *features.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::shape("gaussian fit", features.shape(), &[0, 0])),
        };
        if n < d + 1 {
            return Err(Error::InvalidArgument(format!(
                "gaussian fit of dimension {d} needs at least {} samples, got {n}",
                d + 1
            )));
        }
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        symmetrize(&mut cov);
        Ok(GaussianFit { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// Eigenvalues clamped at zero; values below the warning floor are logged.
fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut e = SymmetricEigen::new(m.clone());
    for v in e.eigenvalues.iter_mut() {
        if *v < NEGATIVE_EIGEN_WARN {
            log::warn!("{what}: clamping eigenvalue {v:e} to zero");
        }
        *v = v.max(0.0);
    }
    e
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    let e = clamped_eigen(m, what);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    let mut s = &e.eigenvectors * d * e.eigenvectors.transpose();
    symmetrize(&mut s);
    s
}

/// Fréchet distance between two Gaussians, with the cross term evaluated as
/// `tr sqrt(S1^½ S2 S1^½)`.
pub fn fid(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("fid", &[a.dim()], &[b.dim()]));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let diff = &a.mean - &b.mean;
    let s1h = psd_sqrt(&a.cov, "fid: first covariance");
    let mut inner = &s1h * &b.cov * &s1h;
    symmetrize(&mut inner);
    let cross: f64 = clamped_eigen(&inner, "fid: product").eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn check_rows(probs: &Tensor) -> Result<(usize, usize)> {
    let (n, k) = match *probs.shape() {
        [n, k] if n > 0 && k > 0 => (n, k),
        _ => return Err(Error::shape("probability rows", probs.shape(), &[0, 0])),
    };
    for (i, row) in probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok((n, k))
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// `exp(E_x KL(p(y|x) || p(y)))` per contiguous split; returns mean and
/// population std across splits.
pub fn inception_score(probs: &Tensor, splits: usize) -> Result<(f64, f64)> {
    let (n, k) = check_rows(probs)?;
    if splits == 0 || splits > n {
        return Err(Error::InvalidArgument(format!("{splits} splits for {n} rows")));
    }
    let rows: Vec<&[f64]> = probs.data().chunks(k).collect();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &rows[s * n / splits..(s + 1) * n / splits];
            let m = part.len() as f64;
            let marginal: Vec<f64> = (0..k).map(|j| part.iter().map(|r| r[j]).sum::<f64>() / m).collect();
            let kl: f64 = part
                .iter()
                .map(|r| r.iter().zip(&marginal).map(|(&p, &q)| xlogy(p, p) - xlogy(p, q)).sum::<f64>())
                .sum::<f64>()
                / m;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    /// `None` when the class was never predicted.
    pub precision: Option<f64>,
    /// `None` when the class was never intended.
    pub recall: Option<f64>,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub per_class: Vec<ClassScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    pub count: usize,
    /// Classes left out of a macro average.
    pub notes: Vec<String>,
}

/// Per-class precision and recall of `predicted` against `intended` labels.
pub fn conditional_precision_recall(intended: &[usize], predicted: &[usize], classes: usize) -> Result<PrecisionRecall> {
    if intended.len() != predicted.len() || intended.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} intents vs {} predictions",
            intended.len(),
            predicted.len()
        )));
    }
    if let Some(&c) = intended.iter().chain(predicted).find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("class {c} out of range for {classes} classes")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in intended.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut notes = Vec::new();
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted_c: usize = confusion.iter().map(|r| r[c]).sum();
        let precision = (predicted_c > 0).then(|| tp as f64 / predicted_c as f64);
        let recall = (support > 0).then(|| tp as f64 / support as f64);
        if precision.is_none() {
            notes.push(format!("class {c}: never predicted, precision undefined"));
        }
        if recall.is_none() {
            notes.push(format!("class {c}: never intended, recall undefined"));
        }
        per_class.push(ClassScore { class: c, precision, recall, support, predicted: predicted_c });
    }
    let macro_of = |f: fn(&ClassScore) -> Option<f64>| {
        let v: Vec<f64> = per_class.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(PrecisionRecall {
        macro_precision: macro_of(|s| s.precision),
        macro_recall: macro_of(|s| s.recall),
        accuracy: correct as f64 / intended.len() as f64,
        count: intended.len(),
        per_class,
        notes,
    })
}

/// Agreement between two per-modality classifiers on joint generations, each
/// direction treating the other's prediction as the label.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingScore {
    /// Modality A predictions scored against modality B predictions.
    pub a_vs_b: PrecisionRecall,
    pub b_vs_a: PrecisionRecall,
}

pub fn matching_pseudo_precision(pred_a: &[usize], pred_b: &[usize], classes: usize) -> Result<MatchingScore> {
    Ok(MatchingScore {
        a_vs_b: conditional_precision_recall(pred_b, pred_a, classes)?,
        b_vs_a: conditional_precision_recall(pred_a, pred_b, classes)?,
    })
}
