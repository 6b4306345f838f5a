//! Dense convolution algebra.
//!
//! A multi-channel image is stored channel-major and column-first inside each
//! channel: element `(i, j, d)` of an `H x W x D` tensor lives at
//! `d * H * W + j * H + i`. That is exactly the vectorization order used when a
//! subregion is unrolled into a row of the expanded input, so the column `q` of
//! an [`OutputMatrix`] is the contiguous channel `q` of the output tensor.
//!
//! Stride is 1 and there is no padding.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, QcnnError, Result};

/// Spatial and channel extent of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims3 {
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        Self { height, width, depth }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, d: usize) -> usize {
        d * self.height * self.width + j * self.height + i
    }
}

/// Extent of a 4-way kernel stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelDims {
    pub height: usize,
    pub width: usize,
    pub in_depth: usize,
    pub out_depth: usize,
}

impl KernelDims {
    pub fn new(height: usize, width: usize, in_depth: usize, out_depth: usize) -> Self {
        Self { height, width, in_depth, out_depth }
    }

    /// Length of one vectorized kernel, `H * W * D`.
    pub fn patch_len(&self) -> usize {
        self.height * self.width * self.in_depth
    }

    pub fn len(&self) -> usize {
        self.patch_len() * self.out_depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of the kernel matrix holding kernel element `(i, j, d, _)`.
    #[inline]
    pub fn patch_offset(&self, i: usize, j: usize, d: usize) -> usize {
        d * self.height * self.width + j * self.height + i
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: Dims3,
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: Dims3) -> Result<Self> {
        Self::from_vec(dims, vec![0.0; dims.len()])
    }

    pub fn from_vec(dims: Dims3, values: Vec<f64>) -> Result<Self> {
        if dims.height == 0 || dims.width == 0 || dims.depth == 0 {
            return dim_err(format!("tensor dims must be positive, got {dims:?}"));
        }
        if values.len() != dims.len() {
            return dim_err(format!("tensor {dims:?} needs {} values, got {}", dims.len(), values.len()));
        }
        Ok(Self { dims, values })
    }

    /// Builds a tensor from a closure over `(i, j, d)`.
    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        for d in 0..dims.depth {
            for j in 0..dims.width {
                for i in 0..dims.height {
                    let o = dims.offset(i, j, d);
                    t.values[o] = f(i, j, d);
                }
            }
        }
        Ok(t)
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.values[self.dims.offset(i, j, d)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, d: usize, v: f64) {
        let o = self.dims.offset(i, j, d);
        self.values[o] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims, values: self.values.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel4 {
    dims: KernelDims,
    values: Vec<f64>,
}

impl Kernel4 {
    pub fn zeros(dims: KernelDims) -> Result<Self> {
        Self::from_vec(dims, vec![0.0; dims.len()])
    }

    /// `values` must be ordered kernel by kernel, each kernel vectorized
    /// channel by channel and column-first.
    pub fn from_vec(dims: KernelDims, values: Vec<f64>) -> Result<Self> {
        if dims.height == 0 || dims.width == 0 || dims.in_depth == 0 || dims.out_depth == 0 {
            return dim_err(format!("kernel dims must be positive, got {dims:?}"));
        }
        if values.len() != dims.len() {
            return dim_err(format!("kernel {dims:?} needs {} values, got {}", dims.len(), values.len()));
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: KernelDims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut k = Self::zeros(dims)?;
        for q in 0..dims.out_depth {
            for d in 0..dims.in_depth {
                for j in 0..dims.width {
                    for i in 0..dims.height {
                        let o = k.offset(i, j, d, q);
                        k.values[o] = f(i, j, d, q);
                    }
                }
            }
        }
        Ok(k)
    }

    pub fn dims(&self) -> KernelDims {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, d: usize, q: usize) -> usize {
        q * self.dims.patch_len() + self.dims.patch_offset(i, j, d)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize, q: usize) -> f64 {
        self.values[self.offset(i, j, d, q)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Row `p` is the unrolled input subregion that produces output pixel `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedInput(pub Array2<f64>);

/// Column `q` is kernel `q`, vectorized like a row of [`ExpandedInput`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(pub Array2<f64>);

/// Column `q` is output channel `q`, vectorized column-first.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMatrix(pub Array2<f64>);

macro_rules! matrix_newtype {
    ($t:ty) => {
        impl $t {
            pub fn rows(&self) -> usize {
                self.0.nrows()
            }
            pub fn cols(&self) -> usize {
                self.0.ncols()
            }
            pub fn view(&self) -> ArrayView2<'_, f64> {
                self.0.view()
            }
        }
    };
}

matrix_newtype!(ExpandedInput);
matrix_newtype!(KernelMatrix);
matrix_newtype!(OutputMatrix);

pub fn output_dims(input: Dims3, kernel: KernelDims) -> Result<Dims3> {
    if kernel.in_depth != input.depth {
        return dim_err(format!("kernel in-depth {} does not match input depth {}", kernel.in_depth, input.depth));
    }
    if kernel.height > input.height || kernel.width > input.width {
        return dim_err(format!(
            "kernel {}x{} larger than input {}x{}",
            kernel.height, kernel.width, input.height, input.width
        ));
    }
    Ok(Dims3::new(input.height - kernel.height + 1, input.width - kernel.width + 1, kernel.out_depth))
}

/// Output pixel `(i, j, d)` for entry `(p, q)` of an output matrix whose
/// channels have height `out_height`.
pub fn y_to_x(p: usize, q: usize, out_dims: Dims3) -> Result<(usize, usize, usize)> {
    let rows = out_dims.height * out_dims.width;
    if p >= rows {
        return Err(QcnnError::IndexOutOfRange { index: p, len: rows });
    }
    if q >= out_dims.depth {
        return Err(QcnnError::IndexOutOfRange { index: q, len: out_dims.depth });
    }
    let h = out_dims.height;
    Ok((p - h * (p / h), p / h, q))
}

pub fn x_to_y(i: usize, j: usize, d: usize, out_dims: Dims3) -> Result<(usize, usize)> {
    if i >= out_dims.height {
        return Err(QcnnError::IndexOutOfRange { index: i, len: out_dims.height });
    }
    if j >= out_dims.width {
        return Err(QcnnError::IndexOutOfRange { index: j, len: out_dims.width });
    }
    if d >= out_dims.depth {
        return Err(QcnnError::IndexOutOfRange { index: d, len: out_dims.depth });
    }
    Ok((j * out_dims.height + i, d))
}

pub fn expand_input(x: &Tensor3, kernel: KernelDims) -> Result<ExpandedInput> {
    let xd = x.dims();
    let od = output_dims(xd, kernel)?;
    let rows = od.height * od.width;
    let cols = kernel.patch_len();
    let src = x.as_slice();
    let mut a = Array2::<f64>::zeros((rows, cols));
    for (p, mut row) in a.rows_mut().into_iter().enumerate() {
        let (i0, j0) = (p % od.height, p / od.height);
        let row = row.as_slice_mut().expect("fresh array is contiguous");
        let mut r = 0;
        for d in 0..kernel.in_depth {
            for j in 0..kernel.width {
                // a kernel column is a contiguous run of the input column
                let start = xd.offset(i0, j0 + j, d);
                row[r..r + kernel.height].copy_from_slice(&src[start..start + kernel.height]);
                r += kernel.height;
            }
        }
    }
    Ok(ExpandedInput(a))
}

pub fn kernel_to_matrix(k: &Kernel4) -> KernelMatrix {
    let kd = k.dims();
    let (n, m) = (kd.patch_len(), kd.out_depth);
    // kernel storage is column-major for the (patch, kernel) matrix
    let f = Array2::from_shape_fn((n, m), |(r, q)| k.as_slice()[q * n + r]);
    KernelMatrix(f)
}

pub fn matrix_to_kernel(f: &KernelMatrix, dims: KernelDims) -> Result<Kernel4> {
    if f.rows() != dims.patch_len() || f.cols() != dims.out_depth {
        return dim_err(format!("kernel matrix {}x{} does not fit {dims:?}", f.rows(), f.cols()));
    }
    let n = dims.patch_len();
    let mut values = vec![0.0; dims.len()];
    for ((r, q), v) in f.0.indexed_iter() {
        values[q * n + r] = *v;
    }
    Kernel4::from_vec(dims, values)
}

pub fn matmul_conv(a: &ExpandedInput, f: &KernelMatrix) -> Result<OutputMatrix> {
    if a.cols() != f.rows() {
        return dim_err(format!("expanded input has {} columns but kernel matrix has {} rows", a.cols(), f.rows()));
    }
    Ok(OutputMatrix(a.0.dot(&f.0)))
}

/// Reshapes an output matrix into the tensor it vectorizes.
pub fn output_to_tensor(y: &OutputMatrix, out_dims: Dims3) -> Result<Tensor3> {
    if y.rows() != out_dims.height * out_dims.width || y.cols() != out_dims.depth {
        return dim_err(format!("output matrix {}x{} does not reshape to {out_dims:?}", y.rows(), y.cols()));
    }
    // column-major traversal of Y is the tensor storage order
    let values: Vec<f64> = y.0.t().iter().copied().collect();
    Tensor3::from_vec(out_dims, values)
}

pub fn tensor_to_output(x: &Tensor3) -> OutputMatrix {
    let d = x.dims();
    let rows = d.height * d.width;
    OutputMatrix(Array2::from_shape_fn((rows, d.depth), |(p, q)| x.as_slice()[q * rows + p]))
}

/// Reference convolution, evaluated term by term with no reshaping.
pub fn direct_conv(x: &Tensor3, k: &Kernel4) -> Result<Tensor3> {
    let kd = k.dims();
    let od = output_dims(x.dims(), kd)?;
    Tensor3::from_fn(od, |io, jo, q| {
        let mut acc = 0.0;
        for i in 0..kd.height {
            for j in 0..kd.width {
                for d in 0..kd.in_depth {
                    acc += k.get(i, j, d, q) * x.get(io + i, jo + j, d);
                }
            }
        }
        acc
    })
}

/// Scatter-adds a matrix shaped like an [`ExpandedInput`] back onto the input
/// tensor it was unrolled from; the adjoint of [`expand_input`].
pub fn fold_expanded(grad_a: &Array2<f64>, input_dims: Dims3, kernel: KernelDims) -> Result<Tensor3> {
    let od = output_dims(input_dims, kernel)?;
    if grad_a.nrows() != od.height * od.width || grad_a.ncols() != kernel.patch_len() {
        return dim_err(format!(
            "gradient {}x{} is not shaped like the expanded input",
            grad_a.nrows(),
            grad_a.ncols()
        ));
    }
    let mut out = Tensor3::zeros(input_dims)?;
    let dst = out.as_mut_slice();
    for (p, row) in grad_a.rows().into_iter().enumerate() {
        let (i0, j0) = (p % od.height, p / od.height);
        let mut r = 0;
        for d in 0..kernel.in_depth {
            for j in 0..kernel.width {
                let start = input_dims.offset(i0, j0 + j, d);
                for i in 0..kernel.height {
                    dst[start + i] += row[r + i];
                }
                r += kernel.height;
            }
        }
    }
    Ok(out)
}
