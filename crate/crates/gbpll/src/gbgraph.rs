//! Weighted graph over a granular-ball space: complete edges inside each
//! ball, radius-gated edges between ball centers, and per-sample nonnegative
//! reconstruction weights over same-ball neighbors.
//!
//! The reconstruction weights come from a projected-gradient NNLS solve with
//! Barzilai-Borwein steps; their square-rooted sum is the sample's "support"
//! scalar, which later scales its confidence row.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::CandidateMask;
use crate::disambig::ConfidenceMatrix;
use crate::error::{Error, Result};
use crate::gbspace::{euclid, GbSpace, GranularBall};

/// Reconstruction data for one sample: its same-ball neighbors, their NNLS
/// weights (aligned with `neighbors`), and the support scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecon {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    /// `sqrt(sum of weights)`, or the fallback 1 for singleton balls and
    /// all-zero solutions.
    pub support: f64,
}

/// The assembled graph: per-sample reconstruction records plus gated
/// inter-ball edges keyed by `(ball_i, ball_j)` with `ball_i < ball_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbGraph {
    pub recon: Vec<SampleRecon>,
    pub inter_edges: BTreeMap<(usize, usize), f64>,
    /// Count of gated ball pairs dropped because their centers coincide
    /// (the reciprocal-distance weight would be infinite).
    pub degeneracy_warnings: usize,
}

impl GbGraph {
    /// Per-sample support scalars, aligned with sample indices.
    pub fn supports(&self) -> Vec<f64> {
        self.recon.iter().map(|r| r.support).collect()
    }

    /// Symmetric inter-ball weight lookup.
    pub fn inter_weight(&self, ball_a: usize, ball_b: usize) -> Option<f64> {
        let key = (ball_a.min(ball_b), ball_a.max(ball_b));
        self.inter_edges.get(&key).copied()
    }
}

/// Outcome of gating one ball pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InterEdge {
    /// Centers closer than twice the larger radius: weight `1/distance`.
    Weight(f64),
    /// Gate failed; the pair is not connected.
    NoEdge,
    /// Gate passed but the centers coincide; no finite weight exists.
    CoincidentCenters,
}

/// All other members of the sample's ball (empty for singleton balls).
pub fn intra_neighbors(space: &GbSpace, sample: usize) -> Result<Vec<usize>> {
    let ball = space.ball_of(sample)?;
    Ok(space.balls[ball]
        .members
        .iter()
        .copied()
        .filter(|&m| m != sample)
        .collect())
}

/// Gates one ball pair: connected iff the center distance is below twice the
/// larger radius, with reciprocal distance as the weight.
pub fn inter_ball_weight(ball_i: &GranularBall, ball_j: &GranularBall) -> InterEdge {
    let dist = euclid(ball_i.center.view(), ball_j.center.view());
    if dist >= 2.0 * ball_i.radius.max(ball_j.radius) {
        InterEdge::NoEdge
    } else if dist == 0.0 {
        InterEdge::CoincidentCenters
    } else {
        InterEdge::Weight(1.0 / dist)
    }
}

/// Largest component of the violation of the first-order optimality
/// conditions for the nonnegative reconstruction problem: at a constrained
/// minimum the objective gradient is nonnegative everywhere and zero on the
/// support. `grad` is the gradient of `||x - sum_j w_j x_j||^2` in `w`.
pub fn kkt_residual(w: &[f64], grad: &Array1<f64>) -> f64 {
    w.iter()
        .zip(grad.iter())
        .map(|(&wj, &gj)| if wj > 0.0 { gj.abs() } else { (-gj).max(0.0) })
        .fold(0.0, f64::max)
}

/// Solves the positive-semidefinite system `G[idx,idx] z = b[idx]` by
/// Cholesky factorization, forcing `z` to zero on numerically dependent
/// columns (tiny pivots). The normal-equation system is always consistent,
/// so skipped variables leave a valid solution on the rest.
fn solve_psd_subsystem(gram: &Array2<f64>, rhs: &Array1<f64>, idx: &[usize]) -> Vec<f64> {
    let p = idx.len();
    let mut low = vec![0.0f64; p * p];
    let mut kept = vec![true; p];
    for k in 0..p {
        let diag = gram[[idx[k], idx[k]]];
        let mut d = diag;
        for m in 0..k {
            if kept[m] {
                d -= low[k * p + m] * low[k * p + m];
            }
        }
        if d <= 1e-13 * diag.max(1e-300) {
            kept[k] = false;
            continue;
        }
        let root = d.sqrt();
        low[k * p + k] = root;
        for r in k + 1..p {
            let mut v = gram[[idx[r], idx[k]]];
            for m in 0..k {
                if kept[m] {
                    v -= low[r * p + m] * low[k * p + m];
                }
            }
            low[r * p + k] = v / root;
        }
    }
    // Forward then backward substitution over the kept pivots.
    let mut y = vec![0.0f64; p];
    for k in 0..p {
        if !kept[k] {
            continue;
        }
        let mut v = rhs[idx[k]];
        for m in 0..k {
            if kept[m] {
                v -= low[k * p + m] * y[m];
            }
        }
        y[k] = v / low[k * p + k];
    }
    let mut z = vec![0.0f64; p];
    for k in (0..p).rev() {
        if !kept[k] {
            continue;
        }
        let mut v = y[k];
        for r in k + 1..p {
            if kept[r] {
                v -= low[r * p + k] * z[r];
            }
        }
        z[k] = v / low[k * p + k];
    }
    z
}

/// Active-set NNLS on the normal-equation form: minimizes
/// `w' G w - 2 b' w` over `w >= 0` (Lawson-Hanson). Variables enter the
/// passive set while their gradient component is below `-tol`; each passive
/// subproblem is solved exactly, clipping back to the boundary as needed,
/// so the returned point satisfies the optimality conditions to solver
/// precision. A progress guard blocks variables that cannot advance the
/// objective (numerically dependent columns), keeping termination finite.
fn nnls_active_set(gram: &Array2<f64>, rhs: &Array1<f64>, tol: f64) -> Vec<f64> {
    let q = rhs.len();
    let scale: f64 = (0..q).map(|j| gram[[j, j]]).fold(0.0, f64::max);
    if !(scale.is_finite() && scale > 0.0) {
        // All-zero (or corrupt non-finite) neighbor vectors; any w
        // reconstructs equally badly, so return the baseline.
        return vec![0.0; q];
    }
    let enter_tol = tol * scale.max(1.0);
    let objective = |w: &[f64]| -> f64 {
        let mut value = 0.0;
        for a in 0..q {
            let mut gw = 0.0;
            for b in 0..q {
                gw += gram[[a, b]] * w[b];
            }
            value += w[a] * (gw - 2.0 * rhs[a]);
        }
        value
    };

    let mut w = vec![0.0f64; q];
    let mut passive = vec![false; q];
    let mut blocked = vec![false; q];
    let mut obj = 0.0f64;
    for _ in 0..(4 * q + 8) {
        // Entering step: most negative gradient among free variables.
        let mut entering = None;
        for j in 0..q {
            if passive[j] || blocked[j] {
                continue;
            }
            let mut g = -2.0 * rhs[j];
            for b in 0..q {
                g += 2.0 * gram[[j, b]] * w[b];
            }
            if g < -enter_tol && entering.is_none_or(|(_, best)| g < best) {
                entering = Some((j, g));
            }
        }
        let Some((j_star, _)) = entering else {
            break;
        };
        passive[j_star] = true;

        // Inner loop: solve on the passive set, clip negatives back to the
        // boundary; each pass removes at least one variable, so it is finite.
        for _ in 0..q + 1 {
            let idx: Vec<usize> = (0..q).filter(|&j| passive[j]).collect();
            let z = solve_psd_subsystem(gram, rhs, &idx);
            if z.iter().all(|&v| v > 0.0) {
                for (k, &j) in idx.iter().enumerate() {
                    w[j] = z[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = w[j] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(w[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = if alpha.is_finite() { alpha } else { 0.0 };
            for (k, &j) in idx.iter().enumerate() {
                w[j] += alpha * (z[k] - w[j]);
            }
            // Variables driven (numerically) to the boundary leave the set.
            for &j in &idx {
                if w[j] <= 1e-14 {
                    w[j] = 0.0;
                    passive[j] = false;
                }
            }
        }

        let new_obj = objective(&w);
        if new_obj < obj - 1e-12 * (1.0 + obj.abs()) {
            obj = new_obj;
            blocked.iter_mut().for_each(|b| *b = false);
        } else if w[j_star] == 0.0 {
            // Entering could not move off the boundary (dependent column);
            // block it so the outer loop cannot cycle.
            blocked[j_star] = true;
        } else {
            obj = new_obj.min(obj);
        }
    }
    w
}

/// Nonnegative weights reconstructing `sample` from `neighbors`:
/// `argmin over w >= 0 of ||x - sum_j w_j x_j||^2`.
pub fn reconstruction_weights(
    features: ArrayView2<f64>,
    sample: usize,
    neighbors: &[usize],
) -> Result<Vec<f64>> {
    let n = features.nrows();
    if sample >= n {
        return Err(Error::invalid(format!("sample {sample} out of range")));
    }
    if neighbors.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&bad) = neighbors.iter().find(|&&j| j == sample || j >= n) {
        return Err(Error::invalid(format!(
            "neighbor {bad} invalid for sample {sample}"
        )));
    }
    let q = neighbors.len();
    let mut gram = Array2::zeros((q, q));
    let mut rhs = Array1::zeros(q);
    for (a, &na) in neighbors.iter().enumerate() {
        for (b, &nb) in neighbors.iter().enumerate() {
            gram[[a, b]] = features.row(na).dot(&features.row(nb));
        }
        rhs[a] = features.row(na).dot(&features.row(sample));
    }
    Ok(nnls_active_set(&gram, &rhs, 1e-8))
}

/// Assembles the full graph: neighbor sets, NNLS weights, supports, and
/// gated inter-ball edges.
pub fn build_graph(space: &GbSpace, features: ArrayView2<f64>) -> Result<GbGraph> {
    if features.nrows() != space.total_count {
        return Err(Error::shape(format!(
            "space covers {} samples, features have {} rows",
            space.total_count,
            features.nrows()
        )));
    }
    let mut recon = Vec::with_capacity(space.total_count);
    for sample in 0..space.total_count {
        let neighbors = intra_neighbors(space, sample)?;
        let weights = reconstruction_weights(features, sample, &neighbors)?;
        let sum: f64 = weights.iter().sum();
        let support = if sum > 0.0 { sum.sqrt() } else { 1.0 };
        recon.push(SampleRecon {
            neighbors,
            weights,
            support,
        });
    }
    let mut inter_edges = BTreeMap::new();
    let mut degeneracy_warnings = 0;
    for bi in 0..space.ball_count() {
        for bj in bi + 1..space.ball_count() {
            match inter_ball_weight(&space.balls[bi], &space.balls[bj]) {
                InterEdge::Weight(w) => {
                    inter_edges.insert((bi, bj), w);
                }
                InterEdge::CoincidentCenters => degeneracy_warnings += 1,
                InterEdge::NoEdge => {}
            }
        }
    }
    Ok(GbGraph {
        recon,
        inter_edges,
        degeneracy_warnings,
    })
}

/// Blends each confidence row toward the reconstruction-weighted mean of its
/// neighbors' rows: `P' = (1 - alpha) P + alpha * neighbor mean`, re-masked
/// to the row's candidates and rescaled back to its original row sum. Rows
/// with no positive-weight neighbor pass through unchanged.
pub fn propagate_confidence(
    graph: &GbGraph,
    p: &ConfidenceMatrix,
    candidates: &CandidateMask,
    alpha: f64,
) -> Result<ConfidenceMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    let (n, l) = (p.sample_count(), p.class_count());
    if graph.recon.len() != n || candidates.row_count() != n || candidates.label_count() != l {
        return Err(Error::shape(format!(
            "graph {} samples, P {n}x{l}, candidates {}x{}",
            graph.recon.len(),
            candidates.row_count(),
            candidates.label_count()
        )));
    }
    if alpha == 0.0 {
        return Ok(p.clone());
    }
    let mut values = p.values.clone();
    for i in 0..n {
        let rec = &graph.recon[i];
        let weight_sum: f64 = rec.weights.iter().filter(|&&w| w > 0.0).sum();
        if weight_sum <= 0.0 {
            continue;
        }
        let mut mean = Array1::zeros(l);
        for (&nbr, &w) in rec.neighbors.iter().zip(&rec.weights) {
            if w > 0.0 {
                mean += &(w * &p.values.row(nbr));
            }
        }
        mean /= weight_sum;
        let blended = (1.0 - alpha) * &p.values.row(i) + alpha * &mean;
        let row_sum = p.values.row(i).sum();
        let mut masked = blended;
        for j in 0..l {
            if !candidates.get(i, j) {
                masked[j] = 0.0;
            }
        }
        let masked_sum = masked.sum();
        if masked_sum > 0.0 {
            values.row_mut(i).assign(&(&masked * (row_sum / masked_sum)));
        }
    }
    Ok(ConfidenceMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, CandidateMask};
    use crate::gbspace::build_gb_space;
    use ndarray::array;
    use rand::Rng;

    fn objective(features: ArrayView2<f64>, sample: usize, neighbors: &[usize], w: &[f64]) -> f64 {
        let mut recon = Array1::zeros(features.ncols());
        for (&nbr, &wj) in neighbors.iter().zip(w) {
            recon += &(wj * &features.row(nbr));
        }
        (&features.row(sample) - &recon).mapv(|v| v * v).sum()
    }

    /// Brute-force reference: fixed-step projected gradient, 1e6 iterations
    /// at step 1e-4.
    fn oracle_weights(features: ArrayView2<f64>, sample: usize, neighbors: &[usize]) -> Vec<f64> {
        let q = neighbors.len();
        let mut gram = Array2::zeros((q, q));
        let mut rhs = Array1::zeros(q);
        for (a, &na) in neighbors.iter().enumerate() {
            for (b, &nb) in neighbors.iter().enumerate() {
                gram[[a, b]] = features.row(na).dot(&features.row(nb));
            }
            rhs[a] = features.row(na).dot(&features.row(sample));
        }
        let mut w = Array1::zeros(q);
        for _ in 0..1_000_000 {
            let grad = 2.0 * (gram.dot(&w) - &rhs);
            w = (&w - 1e-4 * &grad).mapv(|v: f64| v.max(0.0));
        }
        w.to_vec()
    }

    #[test]
    fn singleton_ball_has_no_neighbors() {
        let features = array![[0.0, 0.0], [100.0, 0.0], [100.1, 0.0]];
        let space = build_gb_space(features.view(), 0).unwrap();
        let lonely = (0..3).find(|&i| {
            let ball = space.ball_of(i).unwrap();
            space.balls[ball].members == vec![i]
        });
        if let Some(i) = lonely {
            assert_eq!(intra_neighbors(&space, i).unwrap(), Vec::<usize>::new());
        }
        assert!(intra_neighbors(&space, 9).is_err());
    }

    #[test]
    fn neighbors_exclude_self() {
        let (features, _) = synth_blobs(&[20], 2, 1.0, 1.0, 0).unwrap();
        let space = build_gb_space(features.view(), 0).unwrap();
        for i in 0..20 {
            let nbrs = intra_neighbors(&space, i).unwrap();
            assert!(!nbrs.contains(&i));
            let ball = space.ball_of(i).unwrap();
            assert_eq!(nbrs.len(), space.balls[ball].members.len() - 1);
        }
    }

    fn ball(center: [f64; 2], radius: f64) -> GranularBall {
        GranularBall {
            members: vec![0],
            center: Array1::from(center.to_vec()),
            radius,
            degenerate: false,
        }
    }

    #[test]
    fn inter_edge_gate_cases() {
        let a = ball([0.0, 0.0], 1.0);
        assert_eq!(
            inter_ball_weight(&a, &ball([3.0, 0.0], 2.0)),
            InterEdge::Weight(1.0 / 3.0)
        );
        assert_eq!(
            inter_ball_weight(&a, &ball([5.0, 0.0], 2.0)),
            InterEdge::NoEdge
        );
        assert_eq!(
            inter_ball_weight(&ball([0.0, 0.0], 0.0), &ball([0.0, 0.0], 0.0)),
            InterEdge::NoEdge
        );
        assert_eq!(
            inter_ball_weight(&a, &ball([0.0, 0.0], 1.0)),
            InterEdge::CoincidentCenters
        );
    }

    #[test]
    fn nnls_one_dimensional_scaling() {
        let features = array![[1.0, 0.0], [2.0, 0.0]];
        let w = reconstruction_weights(features.view(), 0, &[1]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn nnls_nonnegativity_binds() {
        let features = array![[1.0, 0.0], [-2.0, 0.0]];
        let w = reconstruction_weights(features.view(), 0, &[1]).unwrap();
        assert_eq!(w, vec![0.0]);
    }

    #[test]
    fn nnls_empty_neighbors_empty_weights() {
        let features = array![[1.0, 0.0]];
        assert!(reconstruction_weights(features.view(), 0, &[])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn nnls_rejects_self_neighbor() {
        let features = array![[1.0, 0.0], [2.0, 0.0]];
        assert!(reconstruction_weights(features.view(), 0, &[0]).is_err());
    }

    #[test]
    fn nnls_matches_brute_force_oracle() {
        // Named instance: (1,1) is exactly reconstructed by (1,0) + (0,1).
        let named = array![[1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let mut cases: Vec<(Array2<f64>, Vec<usize>)> = vec![(named, vec![1, 2, 3])];
        let mut rng = crate::data::rng_from(314);
        for _ in 0..5 {
            let rows = 4;
            let mut features = Array2::zeros((rows, 3));
            for v in features.iter_mut() {
                *v = rng.random::<f64>() * 4.0 - 2.0;
            }
            cases.push((features, vec![1, 2, 3]));
        }
        for (features, neighbors) in &cases {
            let ours = reconstruction_weights(features.view(), 0, neighbors).unwrap();
            let oracle = oracle_weights(features.view(), 0, neighbors);
            let obj_ours = objective(features.view(), 0, neighbors, &ours);
            let obj_oracle = objective(features.view(), 0, neighbors, &oracle);
            assert!(
                (obj_ours - obj_oracle).abs() <= 1e-6,
                "objective {obj_ours} vs oracle {obj_oracle}"
            );
        }
    }

    #[test]
    fn nnls_kkt_and_zero_baseline_on_random_instances() {
        let mut rng = crate::data::rng_from(99);
        for _ in 0..30 {
            let q = rng.random_range(1..=8);
            let d = rng.random_range(1..=8);
            let mut features = Array2::zeros((q + 1, d));
            for v in features.iter_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            let neighbors: Vec<usize> = (1..=q).collect();
            let w = reconstruction_weights(features.view(), 0, &neighbors).unwrap();
            assert!(w.iter().all(|&v| v >= 0.0));
            let obj = objective(features.view(), 0, &neighbors, &w);
            let zero_obj = objective(features.view(), 0, &neighbors, &vec![0.0; q]);
            assert!(obj <= zero_obj + 1e-12);
            // KKT at the returned point, on the normal-equation gradient.
            let mut gram = Array2::zeros((q, q));
            let mut rhs = Array1::zeros(q);
            for (a, &na) in neighbors.iter().enumerate() {
                for (b, &nb) in neighbors.iter().enumerate() {
                    gram[[a, b]] = features.row(na).dot(&features.row(nb));
                }
                rhs[a] = features.row(na).dot(&features.row(0));
            }
            let grad = 2.0 * (gram.dot(&Array1::from(w.clone())) - &rhs);
            assert!(kkt_residual(&w, &grad) <= 1e-6);
        }
    }

    #[test]
    fn graph_all_singletons_fallback_support() {
        let features = array![[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]];
        let space = build_gb_space(features.view(), 0).unwrap();
        if space.ball_count() == 3 {
            let graph = build_graph(&space, features.view()).unwrap();
            assert!(graph.recon.iter().all(|r| r.support == 1.0));
            assert!(graph.recon.iter().all(|r| r.neighbors.is_empty()));
        }
    }

    #[test]
    fn graph_zero_solution_fallback_support() {
        // Sample 0 is the origin: nothing nonnegative reconstructs it better
        // than w = 0, so its support falls back to 1.
        let features = array![[0.0, 0.0], [1.0, 0.0]];
        let space = build_gb_space(features.view(), 0).unwrap();
        assert_eq!(space.ball_count(), 1);
        let graph = build_graph(&space, features.view()).unwrap();
        assert_eq!(graph.recon[0].weights, vec![0.0]);
        assert_eq!(graph.recon[0].support, 1.0);
    }

    #[test]
    fn graph_intra_edges_stay_within_blobs() {
        let (features, labels) = synth_blobs(&[15, 15], 2, 10.0, 1.0, 8).unwrap();
        let space = build_gb_space(features.view(), 8).unwrap();
        let graph = build_graph(&space, features.view()).unwrap();
        for (i, rec) in graph.recon.iter().enumerate() {
            for &nbr in &rec.neighbors {
                assert_eq!(labels[i], labels[nbr], "edge {i}-{nbr} crosses blobs");
            }
        }
    }

    #[test]
    fn graph_inter_edges_symmetric_lookup() {
        let (features, _) = synth_blobs(&[30, 30], 2, 4.0, 1.5, 4).unwrap();
        let space = build_gb_space(features.view(), 4).unwrap();
        let graph = build_graph(&space, features.view()).unwrap();
        for (&(bi, bj), &w) in &graph.inter_edges {
            assert!(bi < bj);
            assert!(w > 0.0);
            assert_eq!(graph.inter_weight(bi, bj), Some(w));
            assert_eq!(graph.inter_weight(bj, bi), Some(w));
        }
    }

    fn two_neighbor_graph() -> GbGraph {
        GbGraph {
            recon: vec![
                SampleRecon {
                    neighbors: vec![1, 2],
                    weights: vec![1.0, 1.0],
                    support: 2.0f64.sqrt(),
                },
                SampleRecon {
                    neighbors: vec![],
                    weights: vec![],
                    support: 1.0,
                },
                SampleRecon {
                    neighbors: vec![],
                    weights: vec![],
                    support: 1.0,
                },
            ],
            inter_edges: BTreeMap::new(),
            degeneracy_warnings: 0,
        }
    }

    fn full_mask(rows: usize, labels: usize) -> CandidateMask {
        let mut mask = CandidateMask::new(rows, labels);
        for i in 0..rows {
            for j in 0..labels {
                mask.set(i, j);
            }
        }
        mask
    }

    #[test]
    fn propagate_alpha_zero_is_identity() {
        let graph = two_neighbor_graph();
        let p = ConfidenceMatrix {
            values: array![[0.7, 0.3], [1.0, 0.0], [0.0, 1.0]],
        };
        let out = propagate_confidence(&graph, &p, &full_mask(3, 2), 0.0).unwrap();
        assert_eq!(out.values, p.values);
    }

    #[test]
    fn propagate_full_blend_averages_neighbors() {
        let graph = two_neighbor_graph();
        let p = ConfidenceMatrix {
            values: array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        };
        let out = propagate_confidence(&graph, &p, &full_mask(3, 2), 1.0).unwrap();
        assert!((out.values[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((out.values[[0, 1]] - 0.5).abs() < 1e-12);
        // Rows 1 and 2 have no neighbors and pass through.
        assert_eq!(out.values[[1, 0]], 1.0);
        assert_eq!(out.values[[2, 1]], 1.0);
    }

    #[test]
    fn propagate_identical_rows_are_a_fixpoint() {
        let graph = two_neighbor_graph();
        let p = ConfidenceMatrix {
            values: array![[0.6, 0.4], [0.6, 0.4], [0.6, 0.4]],
        };
        let out = propagate_confidence(&graph, &p, &full_mask(3, 2), 0.5).unwrap();
        let diff = (&out.values - &p.values)
            .mapv(f64::abs)
            .iter()
            .fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff <= 1e-12);
    }

    #[test]
    fn propagate_preserves_candidate_support_and_row_sums() {
        let graph = two_neighbor_graph();
        // Row 0 lacks label 1 as a candidate; neighbors push mass onto it.
        let mut mask = CandidateMask::new(3, 2);
        mask.set(0, 0);
        for i in 1..3 {
            mask.set(i, 0);
            mask.set(i, 1);
        }
        let p = ConfidenceMatrix {
            values: array![[0.5, 0.0], [0.25, 0.25], [0.0, 0.5]],
        };
        let out = propagate_confidence(&graph, &p, &mask, 0.7).unwrap();
        assert_eq!(out.values[[0, 1]], 0.0, "mass leaked outside candidates");
        for i in 0..3 {
            let before = p.values.row(i).sum();
            let after = out.values.row(i).sum();
            assert!((before - after).abs() <= 1e-12, "row {i} sum drifted");
        }
    }

    #[test]
    fn propagate_rejects_bad_alpha() {
        let graph = two_neighbor_graph();
        let p = ConfidenceMatrix {
            values: array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]],
        };
        assert!(propagate_confidence(&graph, &p, &full_mask(3, 2), 1.5).is_err());
    }
}
