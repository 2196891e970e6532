//! Layer-layer similarity and contiguous phase discovery.
//!
//! The similarity matrix covers transformer layers `1..=L`; the embedding
//! state (layer 0) is excluded from segmentation and serves as block input
//! only. Phase discovery maximizes the sum of per-segment scores
//! `sum(i,j) / len^2` over contiguous k-partitions via an `O(k n^2)` dynamic
//! program on a summed-area table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::traj::{RoleSet, TrajectoryTensor};

/// Symmetric matrix of pairwise layer similarities, `n x n` over transformer
/// layers `1..=n`.
///
/// Construction accepts any symmetric matrix with entries in
/// `[-1 - 1e-9, 1 + 1e-9]`; matrices built by [`similarity_matrix`]
/// additionally have unit diagonal (self-similarity of nonzero states)
/// within 1e-12.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    const RANGE_EPS: f64 = 1e-9;
    const SYM_EPS: f64 = 1e-12;

    pub fn from_entries(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidData(format!(
                "similarity data length {} does not match {n}x{n}",
                data.len()
            )));
        }
        for (idx, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(-1.0 - Self::RANGE_EPS..=1.0 + Self::RANGE_EPS).contains(&v) {
                return Err(Error::InvalidData(format!(
                    "similarity entry {v} out of [-1, 1] at flat index {idx}"
                )));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let a = data[i * n + j];
                let b = data[j * n + i];
                if (a - b).abs() > Self::SYM_EPS {
                    return Err(Error::InvalidData(format!(
                        "similarity not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry for 1-based layer indices.
    #[inline]
    pub fn get(&self, l: usize, m: usize) -> f64 {
        debug_assert!((1..=self.n).contains(&l) && (1..=self.n).contains(&m));
        self.data[(l - 1) * self.n + (m - 1)]
    }
}

/// Mean cosine similarity between same-token states at every pair of
/// transformer layers, averaged over samples and the selected tokens, then
/// symmetrized as `(S + S^T) / 2`.
pub fn similarity_matrix(
    t: &TrajectoryTensor,
    token_filter: Option<RoleSet>,
) -> Result<SimilarityMatrix> {
    let set = token_filter.unwrap_or(RoleSet::ALL);
    let tokens = t.tokens_with_roles(set);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "token filter selects no tokens".into(),
        ));
    }
    let depth = t.depth();
    let dim = t.dim();

    // Normalize all touched token states up front, failing on zero norms.
    let mut unit = vec![0.0; t.n_samples() * depth * tokens.len() * dim];
    for s in 0..t.n_samples() {
        for l in 1..=depth {
            for (ti, &tok) in tokens.iter().enumerate() {
                let x = t.token_state(s, l, tok);
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNormState {
                        sample: s,
                        layer: l,
                        token: tok,
                    });
                }
                let base = (((s * depth) + (l - 1)) * tokens.len() + ti) * dim;
                for (k, v) in x.iter().enumerate() {
                    unit[base + k] = v / norm;
                }
            }
        }
    }
    let state = |s: usize, l: usize, ti: usize| -> &[f64] {
        let base = (((s * depth) + (l - 1)) * tokens.len() + ti) * dim;
        &unit[base..base + dim]
    };

    let denom = (t.n_samples() * tokens.len()) as f64;
    let mut data = vec![0.0; depth * depth];
    for l in 1..=depth {
        for m in l..=depth {
            let mut acc = 0.0;
            for s in 0..t.n_samples() {
                for ti in 0..tokens.len() {
                    let a = state(s, l, ti);
                    let b = state(s, m, ti);
                    if a == b {
                        acc += 1.0;
                    } else {
                        acc += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            let mean = acc / denom;
            data[(l - 1) * depth + (m - 1)] = mean;
            data[(m - 1) * depth + (l - 1)] = mean;
        }
    }
    SimilarityMatrix::from_entries(depth, data)
}

/// Summed-area table over a similarity matrix, plus a diagonal prefix.
///
/// Any contiguous submatrix sum is four lookups.
#[derive(Clone, Debug)]
pub struct PrefixTable {
    n: usize,
    /// `(n+1) x (n+1)`, `table[r][c] = sum of entries above and left`.
    table: Vec<f64>,
    diag_prefix: Vec<f64>,
}

/// Builds the prefix table for `O(1)` segment-sum queries.
pub fn build_prefix(s: &SimilarityMatrix) -> PrefixTable {
    let n = s.n();
    let stride = n + 1;
    let mut table = vec![0.0; stride * stride];
    for i in 1..=n {
        for j in 1..=n {
            table[i * stride + j] = s.get(i, j) + table[(i - 1) * stride + j]
                + table[i * stride + (j - 1)]
                - table[(i - 1) * stride + (j - 1)];
        }
    }
    let mut diag_prefix = vec![0.0; n + 1];
    for i in 1..=n {
        diag_prefix[i] = diag_prefix[i - 1] + s.get(i, i);
    }
    PrefixTable {
        n,
        table,
        diag_prefix,
    }
}

impl PrefixTable {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Sum of the `[i..=j] x [i..=j]` block, 1-based inclusive.
    #[inline]
    pub fn sum(&self, i: usize, j: usize) -> f64 {
        debug_assert!(1 <= i && i <= j && j <= self.n);
        let s = self.n + 1;
        self.table[j * s + j] - self.table[(i - 1) * s + j] - self.table[j * s + (i - 1)]
            + self.table[(i - 1) * s + (i - 1)]
    }

    /// Block sum excluding the diagonal.
    #[inline]
    pub fn offdiag(&self, i: usize, j: usize) -> f64 {
        self.sum(i, j) - (self.diag_prefix[j] - self.diag_prefix[i - 1])
    }

    /// Weighted-mean segment score `sum(i,j) / (j - i + 1)^2`.
    #[inline]
    pub fn segment_score(&self, i: usize, j: usize) -> f64 {
        let len = (j - i + 1) as f64;
        self.sum(i, j) / (len * len)
    }

    /// Mean over off-diagonal cells; zero for singleton segments.
    #[inline]
    pub fn offdiag_score(&self, i: usize, j: usize) -> f64 {
        let len = (j - i + 1) as f64;
        if j == i {
            0.0
        } else {
            self.offdiag(i, j) / (len * len - len)
        }
    }
}

/// Per-segment objective used by the max-cut DP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentObjective {
    /// `sum(i,j) / len^2`, the published objective.
    #[default]
    WeightedMean,
    /// Off-diagonal mean, kept available for experimentation.
    OffDiagonalMean,
}

impl SegmentObjective {
    fn score(self, p: &PrefixTable, i: usize, j: usize) -> f64 {
        match self {
            SegmentObjective::WeightedMean => p.segment_score(i, j),
            SegmentObjective::OffDiagonalMean => p.offdiag_score(i, j),
        }
    }
}

/// Contiguous partition of layers `1..=n` into `k` segments.
///
/// Serialized JSON shape: `{"k": 2, "segments": [[1,7],[8,12]], "score": s}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct Partition {
    segments: Vec<(usize, usize)>,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    k: usize,
    segments: Vec<(usize, usize)>,
    score: f64,
}

impl From<Partition> for PartitionRepr {
    fn from(p: Partition) -> Self {
        PartitionRepr {
            k: p.segments.len(),
            segments: p.segments,
            score: p.score,
        }
    }
}

impl TryFrom<PartitionRepr> for Partition {
    type Error = String;
    fn try_from(r: PartitionRepr) -> std::result::Result<Self, String> {
        if r.k != r.segments.len() {
            return Err(format!(
                "partition declares k = {} but has {} segments",
                r.k,
                r.segments.len()
            ));
        }
        Partition::new(r.segments, r.score).map_err(|e| e.to_string())
    }
}

impl Partition {
    /// Validates contiguity and coverage starting at layer 1.
    pub fn new(segments: Vec<(usize, usize)>, score: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidData("partition has no segments".into()));
        }
        if segments[0].0 != 1 {
            return Err(Error::InvalidData(format!(
                "partition must start at layer 1, got {}",
                segments[0].0
            )));
        }
        for w in segments.windows(2) {
            if w[0].1 + 1 != w[1].0 {
                return Err(Error::InvalidData(format!(
                    "segments {:?} and {:?} are not contiguous",
                    w[0], w[1]
                )));
            }
        }
        if segments.iter().any(|(b, e)| b > e) {
            return Err(Error::InvalidData("empty segment in partition".into()));
        }
        Ok(Self { segments, score })
    }

    /// Builds the partition implied by repetition counts, with zero score.
    pub fn from_schedule(schedule: &[usize]) -> Partition {
        let mut segments = Vec::with_capacity(schedule.len());
        let mut start = 1;
        for &reps in schedule {
            segments.push((start, start + reps - 1));
            start += reps;
        }
        Partition {
            segments,
            score: 0.0,
        }
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn k(&self) -> usize {
        self.segments.len()
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// Total number of layers covered.
    pub fn n(&self) -> usize {
        self.segments.last().map(|s| s.1).unwrap_or(0)
    }

    /// Segment lengths `n_1..n_k`.
    pub fn schedule(&self) -> Vec<usize> {
        self.segments.iter().map(|(b, e)| e - b + 1).collect()
    }

    /// Checks that this partition covers exactly `1..=n`.
    pub fn validate_cover(&self, n: usize) -> Result<()> {
        if self.n() != n {
            return Err(Error::InvalidData(format!(
                "partition covers 1..={} but similarity has n = {n}",
                self.n()
            )));
        }
        Ok(())
    }

    /// Same boundaries with the score recomputed against a prefix table,
    /// summing segment scores left to right.
    pub fn rescored(&self, p: &PrefixTable, objective: SegmentObjective) -> Partition {
        let score = self
            .segments
            .iter()
            .fold(0.0, |acc, &(b, e)| acc + objective.score(p, b, e));
        Partition {
            segments: self.segments.clone(),
            score,
        }
    }

    /// 0-based segment index owning a 1-based layer.
    pub fn segment_of_layer(&self, layer: usize) -> Option<usize> {
        self.segments
            .iter()
            .position(|&(b, e)| (b..=e).contains(&layer))
    }
}

/// Optimal contiguous k-partition under the weighted-mean objective.
pub fn maxcut_segment(s: &SimilarityMatrix, k: usize, min_len: usize) -> Result<Partition> {
    maxcut_segment_with(s, k, min_len, SegmentObjective::WeightedMean)
}

/// Optimal contiguous k-partition with an explicit segment objective.
///
/// Returns the maximizing partition; among score ties, the lexicographically
/// smallest boundary vector. `O(k n^2)` time.
#[allow(clippy::needless_range_loop)]
pub fn maxcut_segment_with(
    s: &SimilarityMatrix,
    k: usize,
    min_len: usize,
    objective: SegmentObjective,
) -> Result<Partition> {
    let n = s.n();
    if k == 0 || min_len == 0 {
        return Err(Error::InvalidArgument(
            "maxcut needs k >= 1 and min_len >= 1".into(),
        ));
    }
    if k * min_len > n {
        return Err(Error::InvalidArgument(format!(
            "infeasible segmentation: k = {k} segments of length >= {min_len} exceed n = {n}"
        )));
    }
    let p = build_prefix(s);
    let g = |i: usize, j: usize| objective.score(&p, i, j);

    // suffix[t][i]: best score for splitting layers i..=n into t segments.
    // Index i runs 1..=n+1 (n+1 = empty suffix sentinel).
    let neg = f64::NEG_INFINITY;
    let mut suffix = vec![vec![neg; n + 2]; k + 1];
    for i in 1..=n {
        if n - i + 1 >= min_len {
            suffix[1][i] = g(i, n);
        }
    }
    for t in 2..=k {
        for i in 1..=n {
            // Segment [i, e], leaving room for t-1 more of length >= min_len.
            let lo = i + min_len - 1;
            if lo > n {
                continue;
            }
            let hi = n.checked_sub((t - 1) * min_len);
            let Some(hi) = hi else { continue };
            let mut best = neg;
            for e in lo..=hi.min(n - 1) {
                let cand = g(i, e) + suffix[t - 1][e + 1];
                if cand > best {
                    best = cand;
                }
            }
            suffix[t][i] = best;
        }
    }
    if suffix[k][1] == neg {
        return Err(Error::InvalidArgument(format!(
            "no feasible partition of {n} layers into {k} segments of length >= {min_len}"
        )));
    }

    // Greedy left-to-right reconstruction: smallest end achieving optimality
    // at each stage gives the lexicographically smallest boundary vector.
    let mut segments = Vec::with_capacity(k);
    let mut start = 1;
    for t in (1..=k).rev() {
        if t == 1 {
            segments.push((start, n));
            break;
        }
        let target = suffix[t][start];
        let lo = start + min_len - 1;
        let hi = n - (t - 1) * min_len;
        let mut chosen = None;
        for e in lo..=hi {
            if g(start, e) + suffix[t - 1][e + 1] == target {
                chosen = Some(e);
                break;
            }
        }
        let e = chosen.expect("dp optimum must be reconstructible");
        segments.push((start, e));
        start = e + 1;
    }

    // Report the score accumulated left to right, matching how an exhaustive
    // search would total the same segments.
    let score = segments
        .iter()
        .fold(0.0, |acc, &(b, e)| acc + g(b, e));
    Ok(Partition { segments, score })
}

/// Samples random k-partitions as baselines.
///
/// - `contiguous`: uniform over contiguous k-partitions (uniform choice of
///   the `k-1` cut points).
/// - non-contiguous ("random shuffle"): assigns each layer independently to
///   one of `k` ordered groups, resampling until no group is empty, and
///   reports the group sizes as a contiguous schedule.
///
/// A partition equal to `exclude` is never returned. Deterministic per seed.
/// Scores are zero; rescore against a prefix table to compare.
pub fn random_partitions(
    n: usize,
    k: usize,
    contiguous: bool,
    count: usize,
    seed: u64,
    exclude: Option<&Partition>,
) -> Result<Vec<Partition>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "random_partitions needs 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let mut rng = CounterRng::new(seed);
    let mut out = Vec::with_capacity(count);
    // Bounded resampling keeps exclusion from looping forever when the
    // excluded partition is the only feasible one.
    let max_attempts = 10_000usize;
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..max_attempts {
            let candidate = if contiguous {
                sample_contiguous(n, k, &mut rng)
            } else {
                sample_shuffle_schedule(n, k, &mut rng)
            };
            if let Some(ex) = exclude {
                if ex.segments() == candidate.segments() {
                    continue;
                }
            }
            accepted = Some(candidate);
            break;
        }
        match accepted {
            Some(p) => out.push(p),
            None => break,
        }
    }
    Ok(out)
}

fn sample_contiguous(n: usize, k: usize, rng: &mut CounterRng) -> Partition {
    // Cut points are k-1 distinct values in 1..=n-1.
    let cuts = rng.sample_distinct_sorted(n - 1, k - 1);
    let mut segments = Vec::with_capacity(k);
    let mut start = 1;
    for c in cuts {
        let end = c + 1; // sampled values are 0-based positions
        segments.push((start, end));
        start = end + 1;
    }
    segments.push((start, n));
    Partition {
        segments,
        score: 0.0,
    }
}

fn sample_shuffle_schedule(n: usize, k: usize, rng: &mut CounterRng) -> Partition {
    loop {
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[rng.next_below(k as u64) as usize] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            return Partition::from_schedule(&counts);
        }
    }
}
