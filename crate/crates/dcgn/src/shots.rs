//! Shot segmentation by dynamic programming over within-segment scatter
//! (kernel temporal segmentation with a linear kernel), and the shot-aware
//! first layer that pools and convolves frames per detected shot.

use crate::error::{DcgnError, Result};
use crate::layers::{propagate_backward, propagate_cached, GraphSettings, LayerOutput, PropagateCache};
use crate::tensor::{Activation, Tensor2};

/// A segmentation of `n` frames into contiguous non-empty shots. `cuts`
/// holds the start index of every shot after the first, strictly increasing
/// in (0, n).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotBoundaries {
    pub n: usize,
    pub cuts: Vec<usize>,
}

impl ShotBoundaries {
    pub fn new(n: usize, cuts: Vec<usize>) -> Result<Self> {
        let mut prev = 0usize;
        for &c in &cuts {
            if c <= prev || c >= n {
                return Err(DcgnError::InvalidParameter(format!(
                    "cut {c} out of order for {n} frames"
                )));
            }
            prev = c;
        }
        Ok(ShotBoundaries { n, cuts })
    }

    /// Number of shots.
    pub fn m(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Half-open [start, end) frame ranges, in order.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.m());
        let mut start = 0;
        for &c in &self.cuts {
            out.push((start, c));
            start = c;
        }
        out.push((start, self.n));
        out
    }
}

/// O(1) within-segment scatter queries over [i, j), backed by prefix sums of
/// the features and their squared norms.
#[derive(Debug, Clone)]
pub struct SegmentCostTable {
    n: usize,
    d: usize,
    /// prefix_f[i] = sum of feature rows [0, i); (n+1) x d.
    prefix_f: Vec<f64>,
    /// prefix_sq[i] = sum of squared row norms over [0, i).
    prefix_sq: Vec<f64>,
}

impl SegmentCostTable {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Sum over t in [i, j) of the squared distance to the segment mean,
    /// via sum ||f_t||^2 - ||sum f_t||^2 / len. Rounding can push the exact
    /// zero of a constant segment slightly negative, so clamp at 0.
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < j && j <= self.n);
        if j == i + 1 {
            // A single frame has no scatter; the prefix identity would only
            // recover this up to rounding.
            return 0.0;
        }
        let len = (j - i) as f64;
        let sq = self.prefix_sq[j] - self.prefix_sq[i];
        let mut mean_sq = 0.0;
        for col in 0..self.d {
            let s = self.prefix_f[j * self.d + col] - self.prefix_f[i * self.d + col];
            mean_sq += s * s;
        }
        (sq - mean_sq / len).max(0.0)
    }
}

/// Build the prefix-sum table for `features` (one row per frame).
pub fn segment_costs(features: &Tensor2) -> SegmentCostTable {
    let n = features.rows();
    let d = features.cols();
    let mut prefix_f = vec![0.0; (n + 1) * d];
    let mut prefix_sq = vec![0.0; n + 1];
    for t in 0..n {
        let row = features.row(t);
        let mut sq = 0.0;
        for (col, x) in row.iter().enumerate() {
            prefix_f[(t + 1) * d + col] = prefix_f[t * d + col] + x;
            sq += x * x;
        }
        prefix_sq[t + 1] = prefix_sq[t] + sq;
    }
    SegmentCostTable { n, d, prefix_f, prefix_sq }
}

/// Total scatter of a segmentation, summed left to right.
pub fn segmentation_cost(costs: &SegmentCostTable, boundaries: &ShotBoundaries) -> f64 {
    boundaries
        .segments()
        .iter()
        .map(|&(a, b)| costs.cost(a, b))
        .sum()
}

/// Optimal segmentation into exactly `m` shots, minimizing total
/// within-segment scatter. Ties are broken toward the lexicographically
/// smallest cut sequence.
pub fn kts_fixed(costs: &SegmentCostTable, m: usize) -> Result<ShotBoundaries> {
    let n = costs.n();
    if m == 0 || m > n {
        return Err(DcgnError::InvalidParameter(format!(
            "shot count {m} must be in [1, {n}]"
        )));
    }
    // best[s][i]: minimal cost of splitting [i, n) into s segments. Filled
    // for s = 1..=m over the start positions that can still fit s segments.
    let mut best = vec![vec![f64::INFINITY; n + 1]; m + 1];
    for i in 0..n {
        best[1][i] = costs.cost(i, n);
    }
    for s in 2..=m {
        // [i, n) needs at least s frames.
        for i in 0..=(n - s) {
            let mut acc = f64::INFINITY;
            // next segment is [i, j); the rest needs s-1 frames.
            for j in (i + 1)..=(n - (s - 1)) {
                let candidate = costs.cost(i, j) + best[s - 1][j];
                if candidate < acc {
                    acc = candidate;
                }
            }
            best[s][i] = acc;
        }
    }
    // Walk forward, always taking the smallest cut that still completes
    // optimally. The DP minimum is exactly one of the candidate sums, so
    // comparing with == is safe.
    let mut cuts = Vec::with_capacity(m - 1);
    let mut i = 0usize;
    for s in (2..=m).rev() {
        let target = best[s][i];
        let mut chosen = None;
        for j in (i + 1)..=(n - (s - 1)) {
            if costs.cost(i, j) + best[s - 1][j] == target {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("DP minimum must be attained by some cut");
        cuts.push(j);
        i = j;
    }
    ShotBoundaries::new(n, cuts)
}

/// Model-complexity penalty g(m, n) = m (ln(n/m) + 1) used by `kts_auto`.
pub fn shot_count_penalty(m: usize, n: usize) -> f64 {
    let m = m as f64;
    let n = n as f64;
    m * ((n / m).ln() + 1.0)
}

/// Segmentation with an automatically chosen shot count: minimizes
/// total scatter + c_penalty * g(m, n) over m in [1, m_max]; ties go to the
/// smaller m.
pub fn kts_auto(costs: &SegmentCostTable, c_penalty: f64, m_max: usize) -> Result<ShotBoundaries> {
    if c_penalty < 0.0 {
        return Err(DcgnError::InvalidParameter(format!(
            "penalty weight must be nonnegative, got {c_penalty}"
        )));
    }
    let n = costs.n();
    if m_max == 0 || m_max > n {
        return Err(DcgnError::InvalidParameter(format!(
            "max shot count {m_max} must be in [1, {n}]"
        )));
    }
    let mut best: Option<(f64, ShotBoundaries)> = None;
    for m in 1..=m_max {
        let boundaries = kts_fixed(costs, m)?;
        let objective =
            segmentation_cost(costs, &boundaries) + c_penalty * shot_count_penalty(m, n);
        let better = match &best {
            None => true,
            Some((incumbent, _)) => objective < *incumbent,
        };
        if better {
            best = Some((objective, boundaries));
        }
    }
    Ok(best.expect("at least m = 1 is evaluated").1)
}

/// Intermediates of the shot layer needed by its backward pass.
#[derive(Debug, Clone)]
pub struct ShotLayerCache {
    pub pooled: Tensor2,
    pub convolved: Tensor2,
    pub prop: PropagateCache,
}

impl ShotLayerCache {
    pub fn output(&self) -> LayerOutput {
        LayerOutput {
            pooled: self.pooled.clone(),
            convolved: self.convolved.clone(),
            hidden: self.prop.hidden.clone(),
        }
    }
}

/// Parameter gradients of the shot layer.
#[derive(Debug, Clone)]
pub struct ShotGrads {
    pub w_conv: Tensor2,
    pub w_prop: Tensor2,
}

impl ShotGrads {
    pub fn zeros_like(w_conv: &Tensor2, w_prop: &Tensor2) -> Self {
        ShotGrads {
            w_conv: Tensor2::zeros(w_conv.rows(), w_conv.cols()),
            w_prop: Tensor2::zeros(w_prop.rows(), w_prop.cols()),
        }
    }

    pub fn add(&mut self, other: &ShotGrads) {
        self.w_conv.add_scaled(&other.w_conv, 1.0);
        self.w_prop.add_scaled(&other.w_prop, 1.0);
    }
}

/// First layer driven by shot boundaries instead of a fixed window: each
/// shot is mean-pooled (over its true length) and convolved after zero-
/// padding or truncating the shot slice to `k_max` frames, where k_max is
/// implied by the convolution weight shape. No attention variant here —
/// pooling over a detected shot is always the plain mean.
pub fn shot_layer_forward(
    frames: &Tensor2,
    boundaries: &ShotBoundaries,
    w_conv: &Tensor2,
    w_prop: &Tensor2,
    activation: Activation,
) -> Result<LayerOutput> {
    shot_layer_forward_cached(frames, boundaries, w_conv, w_prop, activation, GraphSettings::default())
        .map(|cache| cache.output())
}

pub fn shot_layer_forward_cached(
    frames: &Tensor2,
    boundaries: &ShotBoundaries,
    w_conv: &Tensor2,
    w_prop: &Tensor2,
    activation: Activation,
    settings: GraphSettings,
) -> Result<ShotLayerCache> {
    if boundaries.n != frames.rows() {
        return Err(DcgnError::InvalidParameter(format!(
            "boundaries cover {} frames but input has {}",
            boundaries.n,
            frames.rows()
        )));
    }
    let d = frames.cols();
    if w_conv.rows() % d != 0 || w_conv.rows() == 0 {
        return Err(DcgnError::ShapeMismatch {
            op: "shot_layer_forward",
            left_rows: frames.rows(),
            left_cols: d,
            right_rows: w_conv.rows(),
            right_cols: w_conv.cols(),
        });
    }
    let k_max = w_conv.rows() / d;
    let segments = boundaries.segments();
    let m = segments.len();
    let mut pooled = Tensor2::zeros(m, d);
    let mut convolved = Tensor2::zeros(m, w_conv.cols());
    for (idx, &(lo, hi)) in segments.iter().enumerate() {
        let len = (hi - lo) as f64;
        for t in lo..hi {
            for (o, x) in pooled.row_mut(idx).iter_mut().zip(frames.row(t)) {
                *o += x / len;
            }
        }
        // Convolution sees at most k_max leading frames of the shot; shorter
        // shots behave as if zero-padded on the right.
        for t in lo..(lo + k_max.min(hi - lo)) {
            let base = (t - lo) * d;
            for (col, x) in frames.row(t).iter().enumerate() {
                if *x == 0.0 {
                    continue;
                }
                let w_row = w_conv.row(base + col);
                for (o, w) in convolved.row_mut(idx).iter_mut().zip(w_row) {
                    *o += x * w;
                }
            }
        }
    }
    let prop = propagate_cached(&pooled, &convolved, w_prop, activation, settings)?;
    Ok(ShotLayerCache { pooled, convolved, prop })
}

/// Backward through the shot layer. Frames beyond `k_max` in a long shot get
/// no convolution gradient (they were truncated in the forward pass) but do
/// get their share of the pooling gradient.
pub fn shot_layer_backward(
    frames: &Tensor2,
    boundaries: &ShotBoundaries,
    w_conv: &Tensor2,
    w_prop: &Tensor2,
    cache: &ShotLayerCache,
    d_hidden: &Tensor2,
    activation: Activation,
    settings: GraphSettings,
) -> (Tensor2, ShotGrads) {
    let (d_pooled, d_convolved, d_w_prop) = propagate_backward(
        &cache.pooled,
        &cache.convolved,
        w_prop,
        &cache.prop,
        d_hidden,
        activation,
        settings,
    );
    let d = frames.cols();
    let k_max = w_conv.rows() / d;
    let mut d_frames = Tensor2::zeros(frames.rows(), d);
    let mut d_w_conv = Tensor2::zeros(w_conv.rows(), w_conv.cols());
    for (idx, &(lo, hi)) in boundaries.segments().iter().enumerate() {
        let len = (hi - lo) as f64;
        for t in lo..hi {
            for (o, g) in d_frames.row_mut(t).iter_mut().zip(d_pooled.row(idx)) {
                *o += g / len;
            }
        }
        let g = d_convolved.row(idx);
        for t in lo..(lo + k_max.min(hi - lo)) {
            let base = (t - lo) * d;
            for col in 0..d {
                let flat = base + col;
                let x = frames.get(t, col);
                let mut dx = 0.0;
                for (out_col, gv) in g.iter().enumerate() {
                    d_w_conv.set(flat, out_col, d_w_conv.get(flat, out_col) + x * gv);
                    dx += gv * w_conv.get(flat, out_col);
                }
                d_frames.set(t, col, d_frames.get(t, col) + dx);
            }
        }
    }
    (d_frames, ShotGrads { w_conv: d_w_conv, w_prop: d_w_prop })
}
