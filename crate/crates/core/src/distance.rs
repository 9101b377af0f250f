//! Baseline-normalized loss matrices, stylometric distances, row-correlation
//! dissimilarities and metric MDS (classical start, SMACOF refinement).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum DistanceError {
    #[error("matrix is not square ({rows} rows, row {row} has {cols} columns)")]
    NotSquare { rows: usize, row: usize, cols: usize },
    #[error("need at least {needed} authors, got {got}")]
    TooSmall { needed: usize, got: usize },
    #[error("rows {0} and {1} have zero variance on their shared columns")]
    UndefinedCorrelation(usize, usize),
    #[error("invalid dissimilarity matrix: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, DistanceError>;

pub type Matrix = Vec<Vec<f64>>;

fn check_square(m: &[Vec<f64>]) -> Result<usize> {
    let n = m.len();
    for (row, r) in m.iter().enumerate() {
        if r.len() != n {
            return Err(DistanceError::NotSquare { rows: n, row, cols: r.len() });
        }
    }
    Ok(n)
}

/// `L̄[i][j] = L[i][j] − L[j][j]`.
pub fn normalize_loss(l: &[Vec<f64>]) -> Result<Matrix> {
    let n = check_square(l)?;
    Ok((0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { l[i][j] - l[j][j] }).collect()).collect())
}

/// `d[i][j] = (L̄[i][j] + L̄[j][i]) / 2`, zero on the diagonal.
pub fn stylometric_distance(lbar: &[Vec<f64>]) -> Result<Matrix> {
    let n = check_square(lbar)?;
    Ok((0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 0.5 * (lbar[i][j] + lbar[j][i]) }).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrTransform {
    /// `1 − r`
    #[default]
    OneMinusR,
    /// `1 − r²`
    OneMinusRSquared,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average ranks, 1-based, ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Dissimilarity between rows `i` and `j` from their correlation over the
/// columns outside `{i, j}`.
pub fn row_corr_dissimilarity(l: &[Vec<f64>], method: Correlation, transform: CorrTransform) -> Result<Matrix> {
    let n = check_square(l)?;
    if n < 4 {
        return Err(DistanceError::TooSmall { needed: 4, got: n });
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let cols: Vec<usize> = (0..n).filter(|&k| k != i && k != j).collect();
            let mut x: Vec<f64> = cols.iter().map(|&k| l[i][k]).collect();
            let mut y: Vec<f64> = cols.iter().map(|&k| l[j][k]).collect();
            if method == Correlation::Spearman {
                x = ranks(&x);
                y = ranks(&y);
            }
            let r = pearson(&x, &y).ok_or(DistanceError::UndefinedCorrelation(i, j))?;
            let d = match transform {
                CorrTransform::OneMinusR => 1.0 - r,
                CorrTransform::OneMinusRSquared => 1.0 - r * r,
            };
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsEmbedding {
    /// `n × dim`, column means zero.
    pub coords: Matrix,
    /// Kruskal stress-1.
    pub stress: f64,
    /// Dimensions actually spanned; below `dim` when there are too few points.
    pub effective_dim: usize,
    pub iterations: usize,
    /// Raw stress after the classical start and after each SMACOF step.
    pub raw_stress_history: Vec<f64>,
}

impl MdsEmbedding {
    pub fn reduced_dimensionality(&self) -> bool {
        self.effective_dim < self.coords.first().map_or(0, Vec::len)
    }
}

const MAX_ITER: usize = 500;
const REL_TOL: f64 = 1e-9;

fn pairwise(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, n, |i, j| (x.row(i) - x.row(j)).norm())
}

fn raw_stress(delta: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let d = pairwise(x);
    let n = delta.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (delta[(i, j)] - d[(i, j)]).powi(2);
        }
    }
    s
}

/// Classical (Torgerson) scaling: top eigenvectors of the double-centred
/// squared distances, each oriented so its largest-magnitude entry is positive.
fn classical(delta: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let n = delta.nrows();
    let sq = delta.map(|v| v * v);
    let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = -0.5 * &j * sq * &j;
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let mut x = DMatrix::zeros(n, dim);
    for (col, &k) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 {
            continue;
        }
        let mut v = eig.eigenvectors.column(k).clone_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        x.set_column(col, &(v * lambda.sqrt()));
    }
    x
}

/// Metric MDS of a symmetric, non-negative, zero-diagonal dissimilarity
/// matrix into `dim` dimensions.
pub fn mds_embed(delta: &[Vec<f64>], dim: usize, seed: u64) -> Result<MdsEmbedding> {
    let n = check_square(delta)?;
    if dim == 0 {
        return Err(DistanceError::InvalidInput("dim must be positive".into()));
    }
    for i in 0..n {
        if delta[i][i] != 0.0 {
            return Err(DistanceError::InvalidInput(format!("nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let v = delta[i][j];
            if !v.is_finite() || v < 0.0 || (v - delta[j][i]).abs() > 1e-9 * v.abs().max(1.0) {
                return Err(DistanceError::InvalidInput(format!("entry ({i}, {j}) = {v}")));
            }
        }
    }
    let effective_dim = dim.min(n.saturating_sub(1));
    if effective_dim < dim {
        log::warn!("{n} points span at most {effective_dim} dimensions; requested {dim}");
    }
    let dm = DMatrix::from_fn(n, n, |i, j| delta[i][j]);
    let total: f64 = dm.iter().map(|v| v * v).sum::<f64>() / 2.0;
    let mut x = classical(&dm, dim);
    if total > 0.0 && x.iter().all(|v| *v == 0.0) {
        let mut rng = rng_for(seed, &["mds"]);
        x = DMatrix::from_fn(n, dim, |_, _| rng.gen_range(-1.0..1.0));
    }
    let mut history = vec![raw_stress(&dm, &x)];
    let mut iterations = 0;
    while total > 0.0 && iterations < MAX_ITER {
        let d = pairwise(&x);
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && d[(i, j)] > 1e-300 {
                    b[(i, j)] = -dm[(i, j)] / d[(i, j)];
                }
            }
            let row_sum: f64 = b.row(i).sum();
            b[(i, i)] = -row_sum;
        }
        let next = (&b * &x) / n as f64;
        let s = raw_stress(&dm, &next);
        let prev = *history.last().unwrap();
        iterations += 1;
        if s > prev {
            break;
        }
        x = next;
        history.push(s);
        if prev <= 1e-300 || (prev - s) / prev < REL_TOL {
            break;
        }
    }
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let d = pairwise(&x);
    let denom: f64 = d.iter().map(|v| v * v).sum::<f64>() / 2.0;
    let raw = raw_stress(&dm, &x);
    let stress = if denom > 0.0 { (raw / denom).sqrt() } else if raw == 0.0 { 0.0 } else { 1.0 };
    let coords = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    Ok(MdsEmbedding { coords, stress, effective_dim, iterations, raw_stress_history: history })
}
