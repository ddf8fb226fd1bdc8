//! Label-confidence maintenance: candidate-masked confidence rows scaled by
//! graph support, closed-form prior-tempered updates, and the moving-average
//! class prior.
//!
//! Confidence rows live only on candidate labels and sum to `1/W_i`, where
//! `W_i` is the sample's graph-reconstruction support: well-supported samples
//! contribute proportionally less target mass to the classifier loss.

use ndarray::{Array1, Array2};

use crate::data::CandidateMask;
use crate::error::{Error, Result};

/// N x L nonnegative matrix of per-sample label confidences.
///
/// Invariants: zero outside the candidate mask, every row sum positive, and
/// row `i` sums to `1/W_i` right after init/update.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    pub values: Array2<f64>,
}

impl ConfidenceMatrix {
    pub fn sample_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.values.ncols()
    }

    /// Row argmax with ties broken toward the lowest label index.
    pub fn argmax_row(&self, row: usize) -> usize {
        let mut best = 0;
        for j in 1..self.values.ncols() {
            if self.values[[row, j]] > self.values[[row, best]] {
                best = j;
            }
        }
        best
    }
}

/// Estimated marginal label distribution, refreshed by moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub values: Array1<f64>,
    /// Moving-average weight on the previous estimate, in [0, 1].
    pub momentum: f64,
}

/// Uniform prior over `class_count` labels (momentum left at 0).
pub fn init_uniform_prior(class_count: usize) -> ClassPrior {
    ClassPrior {
        values: Array1::from_elem(class_count, 1.0 / class_count as f64),
        momentum: 0.0,
    }
}

/// Shared confidence kernel: `p_ij = S_ij * f_ij * t_j / (W_i * Z_i)` with
/// `Z_i` the candidate sum of the numerators. A row whose candidate scores
/// all vanish falls back to uniform-over-candidates divided by `W_i`.
///
/// `init` is this kernel with `t_j = 1`; the tempered update passes
/// `t_j = u_j^(-lambda3)`, which multiplies by exactly 1.0 when
/// `lambda3 = 0`, so the two paths agree bit-for-bit there.
fn confidence_kernel(
    candidates: &CandidateMask,
    outputs: &Array2<f64>,
    supports: &[f64],
    temper: impl Fn(usize) -> f64,
) -> Result<ConfidenceMatrix> {
    let (n, l) = (candidates.row_count(), candidates.label_count());
    if outputs.nrows() != n || outputs.ncols() != l || supports.len() != n {
        return Err(Error::shape(format!(
            "candidates {}x{}, outputs {}x{}, supports {}",
            n,
            l,
            outputs.nrows(),
            outputs.ncols(),
            supports.len()
        )));
    }
    let temper: Vec<f64> = (0..l).map(&temper).collect();
    let mut values = Array2::zeros((n, l));
    for i in 0..n {
        let w = supports[i];
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::invalid(format!(
                "support must be positive and finite, got {w} at row {i}"
            )));
        }
        let mut z = 0.0;
        for j in candidates.row_candidates(i) {
            z += outputs[[i, j]] * temper[j];
        }
        if z > 0.0 {
            for j in candidates.row_candidates(i) {
                values[[i, j]] = outputs[[i, j]] * temper[j] / (w * z);
            }
        } else {
            let uniform = 1.0 / (candidates.row_cardinality(i) as f64 * w);
            for j in candidates.row_candidates(i) {
                values[[i, j]] = uniform;
            }
        }
    }
    Ok(ConfidenceMatrix { values })
}

/// Initial confidence: model outputs masked to candidates, normalized per
/// row, scaled by `1/W_i`.
pub fn init_confidence(
    candidates: &CandidateMask,
    outputs: &Array2<f64>,
    supports: &[f64],
) -> Result<ConfidenceMatrix> {
    confidence_kernel(candidates, outputs, supports, |_| 1.0)
}

/// Closed-form tempered update: candidate scores `f_ij * u_j^(-lambda3)`
/// normalized per row and scaled by `1/W_i`. Low-prior (tail) classes are
/// boosted for `lambda3 > 0`; `lambda3 = 0` reproduces [`init_confidence`]
/// exactly.
pub fn update_confidence(
    candidates: &CandidateMask,
    outputs: &Array2<f64>,
    supports: &[f64],
    prior: &ClassPrior,
    lambda3: f64,
) -> Result<ConfidenceMatrix> {
    if lambda3 < 0.0 {
        return Err(Error::invalid("lambda3 must be nonnegative"));
    }
    if prior.values.len() != candidates.label_count() {
        return Err(Error::shape(format!(
            "prior has {} entries for {} classes",
            prior.values.len(),
            candidates.label_count()
        )));
    }
    if let Some(bad) = prior.values.iter().position(|&u| !(u.is_finite() && u > 0.0)) {
        return Err(Error::invalid(format!(
            "prior entry {bad} is not a positive finite number"
        )));
    }
    confidence_kernel(candidates, outputs, supports, |j| {
        prior.values[j].powf(-lambda3)
    })
}

/// Moving-average prior refresh from candidate-restricted argmax counts:
/// `u <- momentum * u + (1 - momentum) * e`, where `e_j` is the fraction of
/// samples whose best candidate score lands on `j` (ties to lowest index).
pub fn update_prior(
    prior: &ClassPrior,
    candidates: &CandidateMask,
    outputs: &Array2<f64>,
) -> Result<ClassPrior> {
    let (n, l) = (candidates.row_count(), candidates.label_count());
    if outputs.nrows() != n || outputs.ncols() != l || prior.values.len() != l {
        return Err(Error::shape(format!(
            "candidates {}x{}, outputs {}x{}, prior {}",
            n,
            l,
            outputs.nrows(),
            outputs.ncols(),
            prior.values.len()
        )));
    }
    if !(0.0..=1.0).contains(&prior.momentum) {
        return Err(Error::invalid("prior momentum must lie in [0, 1]"));
    }
    let mut empirical = Array1::zeros(l);
    for i in 0..n {
        let mut best: Option<usize> = None;
        for j in candidates.row_candidates(i) {
            let better = match best {
                None => true,
                Some(b) => outputs[[i, j]] > outputs[[i, b]],
            };
            if better {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            empirical[j] += 1.0;
        }
    }
    if n > 0 {
        empirical /= n as f64;
    }
    let m = prior.momentum;
    Ok(ClassPrior {
        values: m * &prior.values + (1.0 - m) * &empirical,
        momentum: m,
    })
}
