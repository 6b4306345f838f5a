//! Pooling applied while tomography samples arrive, one entry at a time.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, QcnnError, Result};
use crate::tensor::{Dims3, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// What each pooled output read from its region.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrace {
    pub kind: PoolKind,
    pub size: usize,
    pub in_dims: Dims3,
    pub out_dims: Dims3,
    /// Input offset currently holding the region maximum (max pooling).
    pub argmax: Vec<Option<usize>>,
    /// Distinct entries averaged into each region (avg pooling).
    pub counts: Vec<usize>,
}

pub fn pooled_dims(in_dims: Dims3, size: usize) -> Result<Dims3> {
    if size == 0 {
        return Err(QcnnError::InvalidParameter("pool size must be at least 1".into()));
    }
    let out = Dims3::new(in_dims.height / size, in_dims.width / size, in_dims.depth);
    if out.is_empty() {
        return dim_err(format!("pool size {size} larger than {}x{} input", in_dims.height, in_dims.width));
    }
    Ok(out)
}

impl PoolTrace {
    /// Output offset of the region containing input offset `n`, or `None`
    /// for the truncated border.
    pub fn region_of(&self, n: usize) -> Option<usize> {
        let h = self.in_dims.height;
        let hw = h * self.in_dims.width;
        let (d, rem) = (n / hw, n % hw);
        let (j, i) = (rem / h, rem % h);
        let (oi, oj) = (i / self.size, j / self.size);
        if oi < self.out_dims.height && oj < self.out_dims.width {
            Some(self.out_dims.offset(oi, oj, d))
        } else {
            None
        }
    }

    /// Routes a gradient on the pooled output back onto the input positions
    /// that produced it.
    pub fn route_back(&self, upstream: &[f64], retained: &[usize]) -> Result<Vec<f64>> {
        if upstream.len() != self.out_dims.len() {
            return dim_err(format!(
                "pooled gradient has {} entries, expected {}",
                upstream.len(),
                self.out_dims.len()
            ));
        }
        let mut g = vec![0.0; self.in_dims.len()];
        match self.kind {
            PoolKind::Max => {
                for (o, a) in self.argmax.iter().enumerate() {
                    if let Some(n) = *a {
                        g[n] += upstream[o];
                    }
                }
            }
            PoolKind::Avg => {
                for &n in retained {
                    if let Some(o) = self.region_of(n) {
                        g[n] = upstream[o] / self.counts[o] as f64;
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Consumes `(input offset, value)` pairs in arrival order. Max pooling keeps
/// a running maximum and overwrites only on a strictly larger value; avg
/// pooling keeps a running mean over the entries seen so far. Regions that
/// receive nothing read zero.
pub fn pool_online(
    stream: impl IntoIterator<Item = (usize, f64)>,
    in_dims: Dims3,
    kind: PoolKind,
    size: usize,
) -> Result<(Tensor3, PoolTrace)> {
    let out_dims = pooled_dims(in_dims, size)?;
    let mut trace = PoolTrace {
        kind,
        size,
        in_dims,
        out_dims,
        argmax: vec![None; out_dims.len()],
        counts: vec![0; out_dims.len()],
    };
    let mut out = Tensor3::zeros(out_dims)?;
    let vals = out.as_mut_slice();
    for (n, v) in stream {
        if n >= in_dims.len() {
            return Err(QcnnError::IndexOutOfRange { index: n, len: in_dims.len() });
        }
        let Some(o) = trace.region_of(n) else {
            continue;
        };
        trace.counts[o] += 1;
        match kind {
            PoolKind::Max => {
                if trace.argmax[o].is_none() || v > vals[o] {
                    vals[o] = v;
                    trace.argmax[o] = Some(n);
                }
            }
            PoolKind::Avg => vals[o] += (v - vals[o]) / trace.counts[o] as f64,
        }
    }
    Ok((out, trace))
}
