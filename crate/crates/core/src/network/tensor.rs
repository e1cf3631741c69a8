use crate::data::{num_voxels, Dims};

/// Dense single-sample activation, layout (channel, z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * num_voxels(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * num_voxels(dims), "tensor payload size");
        Self {
            channels,
            dims,
            data,
        }
    }

    pub fn spatial(&self) -> usize {
        num_voxels(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stack channels of `self` followed by those of `other`.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.dims, other.dims, "concat needs equal spatial dims");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        }
    }

    /// Split channels at `at`, inverse of [`Tensor::concat`].
    pub fn split(mut self, at: usize) -> (Tensor, Tensor) {
        let n = self.spatial();
        let tail = self.data.split_off(at * n);
        let rest = self.channels - at;
        (
            Tensor {
                channels: at,
                dims: self.dims,
                data: self.data,
            },
            Tensor {
                channels: rest,
                dims: self.dims,
                data: tail,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// Strided view of a row-major-or-transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Plain row-major matrix with `cols` columns.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c = a * b + beta * c` for an `m x k` times `k x n` product; `c` is
/// row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_index = |r: MatRef, rows: usize, cols: usize| {
        (rows - 1) * r.row_stride + (cols - 1) * r.col_stride
    };
    assert!(max_index(a, m, k) < a.data.len(), "gemm: lhs out of bounds");
    assert!(max_index(b, k, n) < b.data.len(), "gemm: rhs out of bounds");
    // SAFETY: bounds of all three operands were checked above and the output
    // does not alias the inputs (it is a distinct &mut slice).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
