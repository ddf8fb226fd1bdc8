//! Small differentiable classifier: one tanh hidden layer (whose activations
//! are the feature space the ball partition is built over) and a softmax
//! head, trained by hand-written gradients under the joint objective
//! `lambda1 * CE + lambda2 * center-pull + lambda3 * prior-regularizer`.
//!
//! The center-pull term uses the plain (unsquared) Euclidean norm, with ball
//! centers held constant; the prior term is constant in the parameters and
//! contributes no gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::data::{rng_from, CandidateMask};
use crate::disambig::ClassPrior;
use crate::error::{Error, Result};
use crate::gbspace::GbSpace;

const LOG_CLAMP: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-8;

/// Weights of the joint objective; all nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// MLP parameters: `w1 (hidden x input)`, `b1`, `w2 (classes x hidden)`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ClassifierParams {
    /// Seeded Gaussian init scaled by `1/sqrt(fan_in)`; zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let normal = StandardNormal;
        let mut draw = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = normal.sample(&mut rng);
                scale * z
            })
        };
        let w1 = draw(hidden_dim, input_dim);
        let w2 = draw(class_count, hidden_dim);
        ClassifierParams {
            w1,
            b1: Array1::zeros(hidden_dim),
            w2,
            b2: Array1::zeros(class_count),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

fn softmax_rows(logits: Array2<f64>) -> Array2<f64> {
    let mut out = logits;
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Forward pass: returns the hidden representation rows and the softmax
/// probability rows.
pub fn forward(params: &ClassifierParams, batch: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::shape(format!(
            "batch width {} vs model input {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    if batch.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let hidden = (batch.dot(&params.w1.t()) + &params.b1).mapv(f64::tanh);
    let probs = softmax_rows(hidden.dot(&params.w2.t()) + &params.b2);
    Ok((hidden, probs))
}

/// Batch-mean cross-entropy against (possibly non-normalized) target rows:
/// `mean_i sum_j -p_ij ln f_ij`, probabilities clamped at 1e-12.
pub fn loss_ce(probs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if probs.dim() != targets.dim() {
        return Err(Error::shape(format!(
            "probs {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let mut total = 0.0;
    for (f_row, p_row) in probs.rows().into_iter().zip(targets.rows()) {
        for (&f, &p) in f_row.iter().zip(p_row) {
            if p != 0.0 {
                total -= p * f.max(LOG_CLAMP).ln();
            }
        }
    }
    Ok(total / probs.nrows() as f64)
}

/// Batch-mean center pull with explicit per-row centers:
/// `mean_i ||h_i - c_i||`.
pub fn loss_mc_centers(hidden: &Array2<f64>, centers: &Array2<f64>) -> Result<f64> {
    if hidden.dim() != centers.dim() {
        return Err(Error::shape(format!(
            "hidden {:?} vs centers {:?}",
            hidden.dim(),
            centers.dim()
        )));
    }
    let total: f64 = hidden
        .rows()
        .into_iter()
        .zip(centers.rows())
        .map(|(h, c)| (&h - &c).mapv(|v| v * v).sum().sqrt())
        .sum();
    Ok(total / hidden.nrows() as f64)
}

/// Center pull over a full dataset: row `i` of `hidden` is sample `i` of the
/// space the balls were built over.
pub fn loss_mc(hidden: &Array2<f64>, space: &GbSpace) -> Result<f64> {
    if hidden.nrows() != space.total_count {
        return Err(Error::shape(format!(
            "hidden has {} rows, space covers {}",
            hidden.nrows(),
            space.total_count
        )));
    }
    loss_mc_centers(hidden, &space.centers_per_sample())
}

/// Batch-mean prior regularizer `mean_i sum_j p_ij ln u_j`; drives targets
/// away from high-prior classes when weighted positively.
pub fn loss_pr(targets: &Array2<f64>, prior: &ClassPrior) -> Result<f64> {
    if targets.ncols() != prior.values.len() {
        return Err(Error::shape(format!(
            "targets have {} columns, prior {}",
            targets.ncols(),
            prior.values.len()
        )));
    }
    if let Some(bad) = prior.values.iter().position(|&u| !(u.is_finite() && u > 0.0)) {
        return Err(Error::invalid(format!(
            "prior entry {bad} is not a positive finite number"
        )));
    }
    let log_u = prior.values.mapv(f64::ln);
    let total: f64 = targets.rows().into_iter().map(|p| p.dot(&log_u)).sum();
    Ok(total / targets.nrows() as f64)
}

/// The joint objective over a full dataset.
pub fn loss_total(
    probs: &Array2<f64>,
    hidden: &Array2<f64>,
    targets: &Array2<f64>,
    prior: &ClassPrior,
    space: &GbSpace,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    Ok(weights.lambda1 * loss_ce(probs, targets)?
        + weights.lambda2 * loss_mc(hidden, space)?
        + weights.lambda3 * loss_pr(targets, prior)?)
}

/// Loss values of one batch, by component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub mc: f64,
    pub pr: f64,
}

/// Per-layer gradients of the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// One batch as the loss sees it: features, confidence-target rows, and the
/// (optional) per-row ball centers in hidden space.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    pub features: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    pub centers: Option<ArrayView2<'a, f64>>,
}

fn batch_losses(
    probs: &Array2<f64>,
    hidden: &Array2<f64>,
    batch: &BatchInput<'_>,
    prior: &ClassPrior,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let targets = batch.targets.to_owned();
    let ce = loss_ce(probs, &targets)?;
    let mc = match batch.centers {
        Some(centers) => loss_mc_centers(hidden, &centers.to_owned())?,
        None => 0.0,
    };
    let pr = loss_pr(&targets, prior)?;
    Ok(LossBreakdown {
        total: weights.lambda1 * ce + weights.lambda2 * mc + weights.lambda3 * pr,
        ce,
        mc,
        pr,
    })
}

/// Joint loss of one batch at the current parameters (no gradient).
pub fn batch_loss(
    params: &ClassifierParams,
    batch: &BatchInput<'_>,
    prior: &ClassPrior,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (hidden, probs) = forward(params, batch.features)?;
    batch_losses(&probs, &hidden, batch, prior, weights)
}

/// Analytic gradients of the joint loss for one batch. Ball centers and
/// targets are constants; only the network parameters receive gradients.
pub fn gradients(
    params: &ClassifierParams,
    batch: &BatchInput<'_>,
    prior: &ClassPrior,
    weights: &LossWeights,
) -> Result<(Gradients, LossBreakdown)> {
    weights.validate()?;
    let n = batch.features.nrows();
    let (hidden, probs) = forward(params, batch.features)?;
    let losses = batch_losses(&probs, &hidden, batch, prior, weights)?;

    // Head: d(CE)/dz = f * (row sum of p) - p, scaled by lambda1 / n.
    // The row-sum factor matters because target rows sum to 1/W, not 1.
    let row_sums = batch.targets.sum_axis(Axis(1)).insert_axis(Axis(1));
    let dz = (&probs * &row_sums - batch.targets) * (weights.lambda1 / n as f64);

    // Hidden: chain from the head plus the center-pull direction
    // (h - c) / max(||h - c||, 1e-8), scaled by lambda2 / n.
    let mut dh = dz.dot(&params.w2);
    if let (Some(centers), true) = (batch.centers, weights.lambda2 > 0.0) {
        let scale = weights.lambda2 / n as f64;
        for i in 0..n {
            let diff = &hidden.row(i) - &centers.row(i);
            let norm = diff.mapv(|v| v * v).sum().sqrt().max(NORM_FLOOR);
            let mut row = dh.row_mut(i);
            row += &(&diff * (scale / norm));
        }
    }
    let da = &dh * &hidden.mapv(|h| 1.0 - h * h);

    let grads = Gradients {
        w1: da.t().dot(&batch.features),
        b1: da.sum_axis(Axis(0)),
        w2: dz.t().dot(&hidden),
        b2: dz.sum_axis(Axis(0)),
    };
    for (name, finite) in [
        ("w1", grads.w1.iter().all(|v| v.is_finite())),
        ("b1", grads.b1.iter().all(|v| v.is_finite())),
        ("w2", grads.w2.iter().all(|v| v.is_finite())),
        ("b2", grads.b2.iter().all(|v| v.is_finite())),
    ] {
        if !finite {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                context: format!("layer {name}"),
            });
        }
    }
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            context: "batch objective".into(),
        });
    }
    Ok((grads, losses))
}

/// Momentum buffers for SGD, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub vw1: Array2<f64>,
    pub vb1: Array1<f64>,
    pub vw2: Array2<f64>,
    pub vb2: Array1<f64>,
}

impl SgdState {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        SgdState {
            vw1: Array2::zeros(params.w1.dim()),
            vb1: Array1::zeros(params.b1.len()),
            vw2: Array2::zeros(params.w2.dim()),
            vb2: Array1::zeros(params.b2.len()),
        }
    }
}

/// One SGD-with-momentum step on the joint loss:
/// `v <- momentum * v + g; theta <- theta - lr * v`.
pub fn backward_step(
    params: &mut ClassifierParams,
    state: &mut SgdState,
    batch: &BatchInput<'_>,
    prior: &ClassPrior,
    weights: &LossWeights,
    learning_rate: f64,
    momentum: f64,
) -> Result<LossBreakdown> {
    let (grads, losses) = gradients(params, batch, prior, weights)?;
    state.vw1 = momentum * &state.vw1 + &grads.w1;
    state.vb1 = momentum * &state.vb1 + &grads.b1;
    state.vw2 = momentum * &state.vw2 + &grads.w2;
    state.vb2 = momentum * &state.vb2 + &grads.b2;
    params.w1 -= &(learning_rate * &state.vw1);
    params.b1 -= &(learning_rate * &state.vb1);
    params.w2 -= &(learning_rate * &state.vw2);
    params.b2 -= &(learning_rate * &state.vb2);
    Ok(losses)
}

/// Linear blend of two aligned batches at a fixed coefficient.
pub fn mix_with(
    m: f64,
    x_a: &Array2<f64>,
    x_b: &Array2<f64>,
    p_a: &Array2<f64>,
    p_b: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x_a.dim() != x_b.dim() || p_a.dim() != p_b.dim() || x_a.nrows() != p_a.nrows() {
        return Err(Error::shape("mixup batches must align"));
    }
    if m == 1.0 {
        return Ok((x_a.clone(), p_a.clone()));
    }
    if m == 0.0 {
        return Ok((x_b.clone(), p_b.clone()));
    }
    Ok((
        m * x_a + (1.0 - m) * x_b,
        m * p_a + (1.0 - m) * p_b,
    ))
}

/// Mixup with a Beta(4,4)-sampled coefficient shared by the whole batch;
/// returns the blended features, blended targets, and the coefficient (so
/// callers can blend any further per-row data the same way).
pub fn mixup_batch(
    x_a: &Array2<f64>,
    x_b: &Array2<f64>,
    p_a: &Array2<f64>,
    p_b: &Array2<f64>,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>, f64)> {
    let beta = Beta::new(4.0, 4.0).expect("fixed shape parameters are valid");
    let m = beta.sample(&mut rng_from(seed));
    let (x, p) = mix_with(m, x_a, x_b, p_a, p_b)?;
    Ok((x, p, m))
}

/// Per-class reliable-sample selection: each batch row is assigned to its
/// best candidate class, and within each class the top `max(1, ceil(rho *
/// class size))` rows by best-candidate score are kept. The prior is part of
/// the interface for selection rules that need it; this rule does not.
pub fn select_reliable(
    probs: &Array2<f64>,
    candidates: &CandidateMask,
    batch_rows: &[usize],
    _prior: &ClassPrior,
    rho: f64,
) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho must lie in [0, 1]"));
    }
    if probs.nrows() != batch_rows.len() {
        return Err(Error::shape(format!(
            "probs rows {} vs batch rows {}",
            probs.nrows(),
            batch_rows.len()
        )));
    }
    let n = batch_rows.len();
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let mut scores = vec![0.0f64; n];
    for (pos, &row) in batch_rows.iter().enumerate() {
        let mut best: Option<usize> = None;
        for j in candidates.row_candidates(row) {
            let better = match best {
                None => true,
                Some(b) => probs[[pos, j]] > probs[[pos, b]],
            };
            if better {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            scores[pos] = probs[[pos, j]];
            by_class.entry(j).or_default().push(pos);
        }
    }
    let mut mask = vec![false; n];
    for positions in by_class.values() {
        let keep = ((rho * positions.len() as f64).ceil() as usize).max(1);
        let mut ranked = positions.clone();
        // Total order so corrupt (non-finite) scores cannot panic the sort;
        // they rank as least reliable.
        let sort_score = |s: f64| if s.is_finite() { s } else { f64::NEG_INFINITY };
        ranked.sort_by(|&a, &b| {
            sort_score(scores[b])
                .total_cmp(&sort_score(scores[a]))
                .then(a.cmp(&b))
        });
        for &pos in ranked.iter().take(keep) {
            mask[pos] = true;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::disambig::init_uniform_prior;
    use crate::gbspace::build_gb_space;
    use ndarray::array;
    use rand::Rng;

    fn tiny_params(seed: u64) -> ClassifierParams {
        ClassifierParams::init(3, 4, 3, seed)
    }

    fn random_batch(
        seed: u64,
        n: usize,
        d: usize,
        l: usize,
        h: usize,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = rng_from(seed);
        let features = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut targets = Array2::from_shape_fn((n, l), |_| rng.random::<f64>());
        for mut row in targets.rows_mut() {
            let scale = (0.5 + rng.random::<f64>()) / row.sum();
            row.mapv_inplace(|v| v * scale);
        }
        let centers = Array2::from_shape_fn((n, h), |_| rng.random::<f64>() - 0.5);
        (features, targets, centers)
    }

    #[test]
    fn forward_zero_params_is_uniform() {
        let params = ClassifierParams {
            w1: Array2::zeros((4, 3)),
            b1: Array1::zeros(4),
            w2: Array2::zeros((5, 4)),
            b2: Array1::zeros(5),
        };
        let (_, probs) = forward(&params, array![[1.0, -2.0, 0.5]].view()).unwrap();
        for &p in probs.row(0) {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rows_are_probabilities() {
        let params = tiny_params(1);
        let (features, _, _) = random_batch(2, 12, 3, 3, 4);
        let (_, probs) = forward(&params, features.view()).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn forward_equal_logits_split_evenly() {
        let params = ClassifierParams {
            w1: Array2::zeros((2, 2)),
            b1: array![0.3, 0.3],
            w2: Array2::ones((2, 2)),
            b2: array![1.5, 1.5],
        };
        let (_, probs) = forward(&params, array![[0.0, 0.0]].view()).unwrap();
        assert!((probs[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((probs[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let params = tiny_params(0);
        assert!(forward(&params, array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn ce_examples() {
        let probs = array![[1.0, 0.0]];
        let targets = array![[1.0, 0.0]];
        assert!(loss_ce(&probs, &targets).unwrap().abs() < 1e-12);

        let probs = array![[0.5, 0.5]];
        let targets = array![[1.0, 0.0]];
        assert!((loss_ce(&probs, &targets).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_is_linear_in_targets() {
        let probs = array![[0.7, 0.2, 0.1], [0.2, 0.5, 0.3]];
        let targets = array![[0.3, 0.3, 0.4], [1.0, 0.0, 0.0]];
        let full = loss_ce(&probs, &targets).unwrap();
        let halved = loss_ce(&probs, &(0.5 * &targets)).unwrap();
        assert!((halved - 0.5 * full).abs() < 1e-12);
    }

    #[test]
    fn mc_examples() {
        let hidden = array![[1.0, 2.0]];
        assert!(loss_mc_centers(&hidden, &hidden).unwrap().abs() < 1e-15);
        let centers = array![[-2.0, -2.0]];
        assert!((loss_mc_centers(&hidden, &centers).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mc_over_space_matches_manual_mean() {
        let (features, _) = synth_blobs(&[10, 10], 3, 5.0, 1.0, 3).unwrap();
        let space = build_gb_space(features.view(), 0).unwrap();
        let manual: f64 = (0..20)
            .map(|i| {
                let ball = space.ball_of(i).unwrap();
                (&features.row(i) - &space.balls[ball].center)
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt()
            })
            .sum::<f64>()
            / 20.0;
        let via_op = loss_mc(&features, &space).unwrap();
        assert!((via_op - manual).abs() < 1e-12);
    }

    #[test]
    fn pr_examples() {
        let prior = init_uniform_prior(4);
        let targets = array![[0.25, 0.25, 0.25, 0.25]];
        assert!((loss_pr(&targets, &prior).unwrap() - 0.25f64.ln()).abs() < 1e-12);

        let spiked = ClassPrior {
            values: array![1.0, 1.0, 1.0, 0.1],
            momentum: 0.0,
        };
        let one_hot = array![[0.0, 0.0, 0.0, 1.0]];
        assert!((loss_pr(&one_hot, &spiked).unwrap() - 0.1f64.ln()).abs() < 1e-12);
        let on_unit = array![[1.0, 0.0, 0.0, 0.0]];
        assert!(loss_pr(&on_unit, &spiked).unwrap().abs() < 1e-15);
    }

    #[test]
    fn total_matches_separately_summed_components() {
        let (features, _) = synth_blobs(&[8, 8], 3, 5.0, 1.0, 6).unwrap();
        let params = ClassifierParams::init(3, 4, 2, 5);
        let (hidden, probs) = forward(&params, features.view()).unwrap();
        let space = build_gb_space(hidden.view(), 0).unwrap();
        let (_, targets, _) = random_batch(7, 16, 3, 2, 4);
        let prior = init_uniform_prior(2);
        let weights = LossWeights::default();
        let total = loss_total(&probs, &hidden, &targets, &prior, &space, &weights).unwrap();
        let by_hand = 0.5 * loss_ce(&probs, &targets).unwrap()
            + 0.5 * loss_mc(&hidden, &space).unwrap()
            + 0.1 * loss_pr(&targets, &prior).unwrap();
        assert!((total - by_hand).abs() < 1e-12);
    }

    /// Central finite differences over every parameter entry; relative error
    /// against the analytic gradient, denominators floored at 1e-4.
    fn fd_max_rel_error(
        params: &mut ClassifierParams,
        batch: &BatchInput<'_>,
        prior: &ClassPrior,
        weights: &LossWeights,
    ) -> f64 {
        let h = 1e-5;
        let (grads, _) = gradients(params, batch, prior, weights).unwrap();
        let mut worst = 0.0f64;
        macro_rules! check_tensor {
            ($param:ident, $grad:expr) => {
                for idx in 0..params.$param.len() {
                    let orig = params.$param.as_slice().unwrap()[idx];
                    params.$param.as_slice_mut().unwrap()[idx] = orig + h;
                    let up = batch_loss(params, batch, prior, weights).unwrap().total;
                    params.$param.as_slice_mut().unwrap()[idx] = orig - h;
                    let down = batch_loss(params, batch, prior, weights).unwrap().total;
                    params.$param.as_slice_mut().unwrap()[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let analytic = $grad.as_slice().unwrap()[idx];
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
            };
        }
        check_tensor!(w1, grads.w1);
        check_tensor!(b1, grads.b1);
        check_tensor!(w2, grads.w2);
        check_tensor!(b2, grads.b2);
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let mut params = tiny_params(seed);
            let (features, targets, centers) = random_batch(seed + 10, 6, 3, 3, 4);
            let batch = BatchInput {
                features: features.view(),
                targets: targets.view(),
                centers: Some(centers.view()),
            };
            let prior = init_uniform_prior(3);
            let weights = LossWeights::default();
            let worst = fd_max_rel_error(&mut params, &batch, &prior, &weights);
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn gradients_match_fd_without_centers() {
        let mut params = tiny_params(9);
        let (features, targets, _) = random_batch(20, 5, 3, 3, 4);
        let batch = BatchInput {
            features: features.view(),
            targets: targets.view(),
            centers: None,
        };
        let prior = init_uniform_prior(3);
        let weights = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let worst = fd_max_rel_error(&mut params, &batch, &prior, &weights);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut params = tiny_params(2);
        let before = params.clone();
        let mut state = SgdState::zeros_like(&params);
        let (features, targets, centers) = random_batch(3, 5, 3, 3, 4);
        let batch = BatchInput {
            features: features.view(),
            targets: targets.view(),
            centers: Some(centers.view()),
        };
        backward_step(
            &mut params,
            &mut state,
            &batch,
            &init_uniform_prior(3),
            &LossWeights::default(),
            0.0,
            0.9,
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn momentum_free_steps_are_stateless() {
        let (features, targets, centers) = random_batch(4, 5, 3, 3, 4);
        let batch = BatchInput {
            features: features.view(),
            targets: targets.view(),
            centers: Some(centers.view()),
        };
        let prior = init_uniform_prior(3);
        let weights = LossWeights::default();

        let mut stepped = tiny_params(6);
        let mut state = SgdState::zeros_like(&stepped);
        for _ in 0..2 {
            backward_step(&mut stepped, &mut state, &batch, &prior, &weights, 0.1, 0.0).unwrap();
        }

        let mut manual = tiny_params(6);
        for _ in 0..2 {
            let (g, _) = gradients(&manual, &batch, &prior, &weights).unwrap();
            manual.w1 -= &(0.1 * &g.w1);
            manual.b1 -= &(0.1 * &g.b1);
            manual.w2 -= &(0.1 * &g.w2);
            manual.b2 -= &(0.1 * &g.b2);
        }
        assert_eq!(stepped, manual);
    }

    #[test]
    fn mixup_endpoints_are_identities() {
        let (x_a, p_a, _) = random_batch(1, 4, 3, 3, 4);
        let (x_b, p_b, _) = random_batch(2, 4, 3, 3, 4);
        let (x, p) = mix_with(1.0, &x_a, &x_b, &p_a, &p_b).unwrap();
        assert_eq!(x, x_a);
        assert_eq!(p, p_a);
        let (x, p) = mix_with(0.0, &x_a, &x_b, &p_a, &p_b).unwrap();
        assert_eq!(x, x_b);
        assert_eq!(p, p_b);
    }

    #[test]
    fn mixup_midpoint_blends() {
        let x_a = array![[2.0, 0.0]];
        let x_b = array![[0.0, 2.0]];
        let p = array![[1.0]];
        let (x, _) = mix_with(0.5, &x_a, &x_b, &p, &p).unwrap();
        assert_eq!(x, array![[1.0, 1.0]]);
    }

    #[test]
    fn mixup_coefficient_has_beta_moments() {
        // Beta(4,4): mean 1/2, variance 1/36.
        let x = array![[0.0]];
        let p = array![[1.0]];
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for seed in 0..n {
            let (_, _, m) = mixup_batch(&x, &x, &p, &p, seed).unwrap();
            sum += m;
            sum_sq += m * m;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / 36.0).abs() < 0.003, "variance {var}");
    }

    #[test]
    fn mixup_is_seed_deterministic() {
        let (x_a, p_a, _) = random_batch(1, 4, 3, 3, 4);
        let (x_b, p_b, _) = random_batch(2, 4, 3, 3, 4);
        let (xa1, pa1, m1) = mixup_batch(&x_a, &x_b, &p_a, &p_b, 77).unwrap();
        let (xa2, pa2, m2) = mixup_batch(&x_a, &x_b, &p_a, &p_b, 77).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(xa1, xa2);
        assert_eq!(pa1, pa2);
    }

    fn selection_fixture(n: usize, l: usize) -> (CandidateMask, Vec<usize>) {
        let mut mask = CandidateMask::new(n, l);
        for i in 0..n {
            for j in 0..l {
                mask.set(i, j);
            }
        }
        (mask, (0..n).collect())
    }

    #[test]
    fn select_rho_one_keeps_all() {
        let (mask, rows) = selection_fixture(6, 2);
        let probs = Array2::from_shape_fn((6, 2), |(i, j)| {
            if j == 0 {
                0.6 + i as f64 * 0.01
            } else {
                0.4 - i as f64 * 0.01
            }
        });
        let kept = select_reliable(&probs, &mask, &rows, &init_uniform_prior(2), 1.0).unwrap();
        assert!(kept.iter().all(|&k| k));
    }

    #[test]
    fn select_rho_zero_keeps_one_per_class() {
        let (mask, rows) = selection_fixture(6, 2);
        let mut probs = Array2::zeros((6, 2));
        for i in 0..6 {
            let class = i % 2;
            probs[[i, class]] = 0.5 + i as f64 * 0.05;
            probs[[i, 1 - class]] = 1.0 - probs[[i, class]];
        }
        let kept = select_reliable(&probs, &mask, &rows, &init_uniform_prior(2), 0.0).unwrap();
        assert_eq!(kept.iter().filter(|&&k| k).count(), 2);
        // The strongest row of each class survives.
        assert!(kept[4] && kept[5]);
    }

    #[test]
    fn select_top_half_matches_sort_oracle() {
        let (mask, rows) = selection_fixture(10, 3);
        let mut rng = rng_from(55);
        let mut probs = Array2::zeros((10, 3));
        for i in 0..10 {
            // All rows predict class 0, with distinct scores.
            probs[[i, 0]] = 0.5 + rng.random::<f64>() * 0.4;
            probs[[i, 1]] = (1.0 - probs[[i, 0]]) / 2.0;
            probs[[i, 2]] = probs[[i, 1]];
        }
        let kept = select_reliable(&probs, &mask, &rows, &init_uniform_prior(3), 0.5).unwrap();
        assert_eq!(kept.iter().filter(|&&k| k).count(), 5);
        let min_kept = (0..10)
            .filter(|&i| kept[i])
            .map(|i| probs[[i, 0]])
            .fold(f64::INFINITY, f64::min);
        let max_dropped = (0..10)
            .filter(|&i| !kept[i])
            .map(|i| probs[[i, 0]])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_kept >= max_dropped);
    }

    #[test]
    fn select_rejects_bad_rho() {
        let (mask, rows) = selection_fixture(2, 2);
        let probs = Array2::from_elem((2, 2), 0.5);
        assert!(select_reliable(&probs, &mask, &rows, &init_uniform_prior(2), 1.2).is_err());
    }
}
