//! Binary tree over a vector that supports `O(log d)` point updates and
//! sampling an index with probability proportional to the squared entry.
//!
//! Leaves hold the signed values, internal nodes the sum of squares of their
//! subtree. Capacity is padded to a power of two; padding leaves hold zero and
//! can never be drawn.

use rand::Rng;

use crate::error::{QcnnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingTree {
    len: usize,
    leaves: usize,
    /// `nodes[1]` is the root; children of `k` are `2k` and `2k + 1`.
    /// Slots `leaves..2 * leaves` hold leaf values.
    nodes: Vec<f64>,
}

impl SamplingTree {
    /// All-zero tree over `len` entries.
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(QcnnError::InvalidParameter("sampling tree needs d >= 1".into()));
        }
        let leaves = len.next_power_of_two();
        Ok(Self { len, leaves, nodes: vec![0.0; 2 * leaves] })
    }

    /// Bulk construction in `O(d)`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut t = Self::new(values.len())?;
        t.nodes[t.leaves..t.leaves + values.len()].copy_from_slice(values);
        for k in (1..t.leaves).rev() {
            t.nodes[k] = t.weight(2 * k) + t.weight(2 * k + 1);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of edges on a root-to-leaf path, `ceil(log2 d)`.
    pub fn depth(&self) -> usize {
        self.leaves.trailing_zeros() as usize
    }

    /// `sum_i v_i^2`.
    pub fn squared_norm(&self) -> f64 {
        self.weight(1)
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn get(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.nodes[self.leaves + i])
    }

    pub fn values(&self) -> &[f64] {
        &self.nodes[self.leaves..self.leaves + self.len]
    }

    #[inline]
    fn weight(&self, k: usize) -> f64 {
        if k >= self.leaves {
            self.nodes[k] * self.nodes[k]
        } else {
            self.nodes[k]
        }
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len {
            Err(QcnnError::IndexOutOfRange { index: i, len: self.len })
        } else {
            Ok(())
        }
    }

    /// Writes `v_i = val` and refreshes the path to the root. Returns the
    /// number of nodes written (`depth + 1`).
    pub fn update(&mut self, i: usize, val: f64) -> Result<usize> {
        self.check(i)?;
        let mut k = self.leaves + i;
        self.nodes[k] = val;
        let mut written = 1;
        while k > 1 {
            k /= 2;
            // recompute from children so drift never accumulates
            self.nodes[k] = self.weight(2 * k) + self.weight(2 * k + 1);
            written += 1;
        }
        Ok(written)
    }

    /// Draws `i` with probability `v_i^2 / ||v||^2` by one root-to-leaf walk.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let total = self.squared_norm();
        if total <= 0.0 || !total.is_finite() {
            return Err(QcnnError::EmptyDistribution);
        }
        let mut u = rng.gen::<f64>() * total;
        let mut k = 1;
        while k < self.leaves {
            let left = self.weight(2 * k);
            let right = self.weight(2 * k + 1);
            // rounding can leave u slightly above left+right; never walk into
            // a zero-weight subtree
            if (u < left && left > 0.0) || right <= 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        Ok(k - self.leaves)
    }

    /// Every internal node equals the sum of its children's weights.
    pub fn is_consistent(&self) -> bool {
        (1..self.leaves).all(|k| self.nodes[k] == self.weight(2 * k) + self.weight(2 * k + 1))
    }
}

/// One [`SamplingTree`] per matrix row plus a tree over row norms, so that
/// entry `(i, j)` can be drawn with probability `V_ij^2 / ||V||_F^2`.
#[derive(Debug, Clone)]
pub struct TreeStore {
    rows: Vec<SamplingTree>,
    row_norms: SamplingTree,
}

impl TreeStore {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        let row = SamplingTree::new(cols)?;
        Ok(Self { rows: vec![row; rows], row_norms: SamplingTree::new(rows)? })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows = rows.into_iter().map(SamplingTree::from_values).collect::<Result<Vec<_>>>()?;
        let norms: Vec<f64> = rows.iter().map(SamplingTree::norm).collect();
        let row_norms = SamplingTree::from_values(&norms)?;
        Ok(Self { rows, row_norms })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, r: usize) -> Result<&SamplingTree> {
        self.rows.get(r).ok_or(QcnnError::IndexOutOfRange { index: r, len: self.rows.len() })
    }

    pub fn row_norms(&self) -> &SamplingTree {
        &self.row_norms
    }

    pub fn update(&mut self, r: usize, c: usize, val: f64) -> Result<()> {
        let n = self.rows.len();
        let row = self.rows.get_mut(r).ok_or(QcnnError::IndexOutOfRange { index: r, len: n })?;
        row.update(c, val)?;
        let norm = row.norm();
        self.row_norms.update(r, norm)?;
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.row_norms.squared_norm()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, usize)> {
        let r = self.row_norms.sample(rng)?;
        let c = self.rows[r].sample(rng)?;
        Ok((r, c))
    }

    /// Meta-tree weight `r` matches the squared norm of row `r` (up to the
    /// rounding of one square root).
    pub fn is_consistent(&self) -> bool {
        self.row_norms.is_consistent()
            && self.rows.iter().enumerate().all(|(r, row)| {
                let meta = self.row_norms.values()[r].powi(2);
                let exact = row.squared_norm();
                row.is_consistent() && (meta - exact).abs() <= 1e-12 * exact.max(f64::MIN_POSITIVE)
            })
    }
}

/// Sample layout for [`inner_product_estimate`]: `6 / eps^2` draws per mean
/// and `9 * ceil(ln(1 / fail_prob))` means.
pub fn median_of_means_layout(eps: f64, fail_prob: f64) -> Result<(usize, usize)> {
    if !(eps > 0.0) {
        return Err(QcnnError::InvalidParameter(format!("precision must be > 0, got {eps}")));
    }
    if !(fail_prob > 0.0 && fail_prob < 1.0) {
        return Err(QcnnError::InvalidParameter(format!("failure probability must be in (0, 1), got {fail_prob}")));
    }
    let per_mean = (6.0 / (eps * eps)).ceil() as usize;
    let means = 9 * ((1.0 / fail_prob).ln().ceil() as usize).max(1);
    Ok((per_mean, means))
}

/// Estimates `<x, y>` from l2 samples of `x`.
///
/// Each draw `i ~ x_i^2 / ||x||^2` contributes `y_i ||x||^2 / x_i`, an unbiased
/// estimate with variance at most `||x||^2 ||y||^2`. The result is within
/// `eps ||x|| ||y||` of the inner product with probability at least
/// `1 - fail_prob`.
pub fn inner_product_estimate<R: Rng + ?Sized>(
    x: &SamplingTree,
    y: impl Fn(usize) -> f64,
    eps: f64,
    fail_prob: f64,
    rng: &mut R,
) -> Result<f64> {
    let (per_mean, means) = median_of_means_layout(eps, fail_prob)?;
    let norm_sq = x.squared_norm();
    if norm_sq == 0.0 {
        return Ok(0.0);
    }
    let xv = x.values();
    let mut estimates = Vec::with_capacity(means);
    for _ in 0..means {
        let mut acc = 0.0;
        for _ in 0..per_mean {
            let i = x.sample(rng)?;
            acc += y(i) * norm_sq / xv[i];
        }
        estimates.push(acc / per_mean as f64);
    }
    Ok(median(&mut estimates))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
