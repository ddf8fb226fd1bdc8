//! Coarse-grained partition of a feature space into granular balls.
//!
//! A ball is a group of sample indices summarized by the mean of its member
//! rows (center) and the largest member distance from that mean (radius).
//! The space is built by recursive 2-means splitting: any ball larger than
//! `ceil(sqrt(N))` is split, so ball sizes stay near the square root of the
//! dataset while dense regions keep their neighborhoods intact.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::data::{derive_seed, rng_from};
use crate::error::{Error, Result};

/// One cluster of the partition: member indices plus center/radius summary.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularBall {
    /// Sample indices, ascending.
    pub members: Vec<usize>,
    /// Arithmetic mean of the member feature rows.
    pub center: Array1<f64>,
    /// Maximum Euclidean distance from the center to any member.
    pub radius: f64,
    /// True when 2-means could not separate the ball (identical points or an
    /// emptied cluster); such balls are final regardless of size.
    pub degenerate: bool,
}

/// The finished partition over one feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct GbSpace {
    /// Balls ordered by smallest member index.
    pub balls: Vec<GranularBall>,
    pub total_count: usize,
    pub split_threshold: usize,
    ball_of: Vec<usize>,
}

impl GbSpace {
    pub fn ball_count(&self) -> usize {
        self.balls.len()
    }

    /// Index of the ball containing `sample`.
    pub fn ball_of(&self, sample: usize) -> Result<usize> {
        self.ball_of
            .get(sample)
            .copied()
            .ok_or_else(|| Error::invalid(format!("sample {sample} out of range")))
    }

    /// Per-sample ball-center rows, one per sample.
    pub fn centers_per_sample(&self) -> Array2<f64> {
        let d = self.balls[0].center.len();
        let mut centers = Array2::zeros((self.total_count, d));
        for (sample, &ball) in self.ball_of.iter().enumerate() {
            centers.row_mut(sample).assign(&self.balls[ball].center);
        }
        centers
    }
}

/// Result of one 2-means attempt on a ball.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitOutcome {
    /// Two disjoint nonempty halves covering the input members.
    Split(Vec<usize>, Vec<usize>),
    /// No valid split exists (identical points or an emptied cluster).
    Degenerate,
}

/// Ball-size limit for a dataset of `total_count` samples: `ceil(sqrt(N))`.
pub fn split_threshold(total_count: usize) -> usize {
    let r = total_count.isqrt();
    if r * r == total_count {
        r
    } else {
        r + 1
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

pub(crate) fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Splits `members` into two clusters by k-means with k=2.
///
/// Centers start at the two mutually farthest member points (the seed breaks
/// exact distance ties only), then assignments and means alternate to a
/// fixpoint or 100 iterations. Assignment ties go to the first cluster.
pub fn two_means(
    features: ArrayView2<f64>,
    members: &[usize],
    seed: u64,
) -> Result<SplitOutcome> {
    if members.len() < 2 {
        return Err(Error::invalid("2-means needs at least 2 members"));
    }

    // Farthest pair, exhaustively.
    let mut best = 0.0;
    let mut ties: Vec<(usize, usize)> = Vec::new();
    for (pos_a, &a) in members.iter().enumerate() {
        for &b in &members[pos_a + 1..] {
            let d = sq_dist(features.row(a), features.row(b));
            if d > best {
                best = d;
                ties.clear();
                ties.push((a, b));
            } else if d == best {
                ties.push((a, b));
            }
        }
    }
    if best == 0.0 {
        return Ok(SplitOutcome::Degenerate);
    }
    let (init_a, init_b) = if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng_from(seed).random_range(0..ties.len())]
    };

    let mut centers = [
        features.row(init_a).to_owned(),
        features.row(init_b).to_owned(),
    ];
    let mut assignment = vec![0u8; members.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (pos, &m) in members.iter().enumerate() {
            let d0 = sq_dist(features.row(m), centers[0].view());
            let d1 = sq_dist(features.row(m), centers[1].view());
            let cluster = u8::from(d1 < d0);
            if assignment[pos] != cluster {
                assignment[pos] = cluster;
                changed = true;
            }
        }
        let counts = [
            assignment.iter().filter(|&&c| c == 0).count(),
            assignment.iter().filter(|&&c| c == 1).count(),
        ];
        if counts[0] == 0 || counts[1] == 0 {
            return Ok(SplitOutcome::Degenerate);
        }
        if !changed {
            break;
        }
        for c in 0..2 {
            let mut mean = Array1::zeros(features.ncols());
            for (pos, &m) in members.iter().enumerate() {
                if assignment[pos] == c as u8 {
                    mean += &features.row(m);
                }
            }
            mean /= counts[c] as f64;
            centers[c] = mean;
        }
    }

    let halves: (Vec<usize>, Vec<usize>) = (
        members
            .iter()
            .zip(&assignment)
            .filter(|(_, &c)| c == 0)
            .map(|(&m, _)| m)
            .collect(),
        members
            .iter()
            .zip(&assignment)
            .filter(|(_, &c)| c == 1)
            .map(|(&m, _)| m)
            .collect(),
    );
    Ok(SplitOutcome::Split(halves.0, halves.1))
}

fn finalize_ball(features: ArrayView2<f64>, members: Vec<usize>, degenerate: bool) -> GranularBall {
    let mut center = Array1::zeros(features.ncols());
    for &m in &members {
        center += &features.row(m);
    }
    center /= members.len() as f64;
    let radius = members
        .iter()
        .map(|&m| euclid(features.row(m), center.view()))
        .fold(0.0, f64::max);
    GranularBall {
        members,
        center,
        radius,
        degenerate,
    }
}

/// Builds the full partition by queue-driven recursive splitting.
///
/// Starting from one ball holding every index, the head of the queue is
/// popped and either split (both halves appended to the tail) or finalized
/// when it fits the size threshold or cannot be split. Output balls are
/// ordered by smallest member index.
pub fn build_gb_space(features: ArrayView2<f64>, seed: u64) -> Result<GbSpace> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::invalid("empty feature table"));
    }
    let threshold = split_threshold(n);

    let mut queue: VecDeque<Vec<usize>> = VecDeque::new();
    queue.push_back((0..n).collect());
    let mut balls = Vec::new();
    let mut split_attempts = 0u64;
    while let Some(members) = queue.pop_front() {
        if members.len() <= threshold {
            balls.push(finalize_ball(features, members, false));
            continue;
        }
        let split_seed = derive_seed(seed, split_attempts);
        split_attempts += 1;
        match two_means(features, &members, split_seed)? {
            SplitOutcome::Split(a, b) => {
                queue.push_back(a);
                queue.push_back(b);
            }
            SplitOutcome::Degenerate => {
                balls.push(finalize_ball(features, members, true));
            }
        }
    }

    balls.sort_by_key(|b| b.members[0]);
    let mut ball_of = vec![0usize; n];
    for (id, ball) in balls.iter().enumerate() {
        for &m in &ball.members {
            ball_of[m] = id;
        }
    }
    Ok(GbSpace {
        balls,
        total_count: n,
        split_threshold: threshold,
        ball_of,
    })
}
