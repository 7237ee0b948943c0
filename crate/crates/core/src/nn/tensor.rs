//! Dense row-major f32 arrays and the kernels the tape runs on them.

use std::sync::Arc;

/// Row-major f32 array. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f32) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![v; n])
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(Vec::new(), vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(numel(&shape), self.numel(), "cannot reshape {:?} to {shape:?}", self.shape);
        Self {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes, right-aligned.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `target`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let off = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

enum Layout {
    Same,
    Scalar,
    /// Operand repeats every `inner` elements.
    Suffix(usize),
    /// Operand holds one value per row of length `inner`.
    RowConst(usize),
    General(Vec<usize>),
}

fn classify(shape: &[usize], target: &[usize]) -> Layout {
    let n = numel(shape);
    if shape == target || (n == numel(target) && shape.iter().filter(|&&d| d != 1).eq(target.iter().filter(|&&d| d != 1))) {
        return Layout::Same;
    }
    if n == 1 {
        return Layout::Scalar;
    }
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if target.ends_with(&trimmed) {
        return Layout::Suffix(n);
    }
    if shape.len() == target.len()
        && shape.last() == Some(&1)
        && shape[..shape.len() - 1] == target[..target.len() - 1]
    {
        return Layout::RowConst(*target.last().unwrap());
    }
    Layout::General(broadcast_strides(shape, target))
}

fn general_offsets<'a>(target: &'a [usize], strides: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    let total = numel(target);
    let mut idx = vec![0usize; target.len()];
    let mut off = 0usize;
    (0..total).map(move |k| {
        if k > 0 {
            for ax in (0..target.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < target[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        off
    })
}

/// Materializes `x` broadcast to `target`.
pub fn broadcast_to(x: &Tensor, target: &[usize]) -> Tensor {
    let n = numel(target);
    let src = x.data();
    let data = match classify(x.shape(), target) {
        Layout::Same => return x.reshape(target.to_vec()),
        Layout::Scalar => vec![src[0]; n],
        Layout::Suffix(m) => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n / m {
                out.extend_from_slice(src);
            }
            out
        }
        Layout::RowConst(inner) => {
            let mut out = Vec::with_capacity(n);
            for &v in src {
                out.extend(std::iter::repeat(v).take(inner));
            }
            out
        }
        Layout::General(strides) => general_offsets(target, &strides).map(|o| src[o]).collect(),
    };
    Tensor::new(target.to_vec(), data)
}

/// Sums `x` down to `target`, the adjoint of [`broadcast_to`].
pub fn sum_to(x: &Tensor, target: &[usize]) -> Tensor {
    let src = x.data();
    let n = numel(target);
    let data = match classify(target, x.shape()) {
        Layout::Same => return x.reshape(target.to_vec()),
        Layout::Scalar => vec![sum_f64(src) as f32],
        Layout::Suffix(m) => {
            let mut acc = vec![0.0f64; m];
            for chunk in src.chunks_exact(m) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += v as f64;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
        Layout::RowConst(inner) => src.chunks_exact(inner).map(|r| sum_f64(r) as f32).collect(),
        Layout::General(strides) => {
            let mut acc = vec![0.0f64; n];
            for (o, &v) in general_offsets(x.shape(), &strides).zip(src) {
                acc[o] += v as f64;
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    };
    Tensor::new(target.to_vec(), data)
}

pub fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

/// Elementwise binary op with numpy broadcasting.
pub fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    let n = numel(&shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f32> = match (classify(a.shape(), &shape), classify(b.shape(), &shape)) {
        (Layout::Same, Layout::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Scalar) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        (Layout::Scalar, Layout::Same) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        (Layout::Same, Layout::Suffix(m)) => ad
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect(),
        (Layout::Same, Layout::RowConst(inner)) => ad
            .chunks_exact(inner)
            .zip(bd)
            .flat_map(|(row, &y)| row.iter().map(move |&x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        (Layout::RowConst(inner), Layout::Same) => bd
            .chunks_exact(inner)
            .zip(ad)
            .flat_map(|(row, &x)| row.iter().map(move |&y| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        _ => {
            let a_full = broadcast_to(a, &shape);
            let b_full = broadcast_to(b, &shape);
            a_full.data().iter().zip(b_full.data()).map(|(&x, &y)| f(x, y)).collect()
        }
    };
    debug_assert_eq!(data.len(), n);
    Tensor::new(shape, data)
}

pub fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

/// `C = alpha * op(A) * op(B)` for row-major slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a (possibly batched) matmul.
#[derive(Clone, Copy, Debug)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single 2-D matrix shared across the batch.
    pub shared_b: bool,
}

pub fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> (MatmulDims, Vec<usize>) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2, got {a:?} x {b:?}");
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims differ: {a:?}{} x {b:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" });
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_b = b.len() == 2;
    if !shared_b {
        assert_eq!(a_batch, b_batch, "matmul batch dims differ: {a:?} x {b:?}");
    }
    let mut out = a_batch.to_vec();
    out.push(m);
    out.push(n);
    (
        MatmulDims {
            batch: numel(a_batch),
            m,
            k,
            n,
            shared_b,
        },
        out,
    )
}

pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool, alpha: f32) -> Tensor {
    let (d, shape) = matmul_dims(a.shape(), b.shape(), ta, tb);
    let mut out = vec![0.0f32; numel(&shape)];
    if d.shared_b && !ta {
        gemm(d.batch * d.m, d.k, d.n, alpha, a.data(), false, b.data(), tb, &mut out);
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let bs = if d.shared_b { b.data() } else { &b.data()[i * sb..(i + 1) * sb] };
            gemm(
                d.m,
                d.k,
                d.n,
                alpha,
                &a.data()[i * sa..(i + 1) * sa],
                ta,
                bs,
                tb,
                &mut out[i * sc..(i + 1) * sc],
            );
        }
    }
    Tensor::new(shape, out)
}

/// Swaps axes 1 and 2 of a rank-4 tensor.
pub fn swap12(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "swap12 needs rank 4, got {s:?}");
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    Tensor::new(vec![a, c, b, d], out)
}

/// (outer, axis length, inner) split of `shape` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Tensor {
    let first = xs[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    for x in xs {
        assert_eq!(x.shape().len(), first.len());
        for (ax, (&p, &q)) in x.shape().iter().zip(first).enumerate() {
            assert!(ax == axis || p == q, "concat shape mismatch {:?} vs {first:?}", x.shape());
        }
    }
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(shape, out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_split(x.shape(), axis);
    assert!(start + len <= full, "slice {start}+{len} out of {full}");
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, out)
}

/// Embeds `x` into zeros of length `total` along `axis` at `start`.
pub fn pad(x: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    assert!(start + len <= total);
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![0.0f32; numel(&shape)];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape, out)
}

pub fn gather_rows(table: &Tensor, idx: &[usize]) -> Tensor {
    let rows = table.shape()[0];
    let width = table.numel() / rows.max(1);
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        assert!(i < rows, "row index {i} out of {rows}");
        out.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
    }
    let mut shape = table.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

pub fn scatter_rows(src: &Tensor, idx: &[usize], rows: usize) -> Tensor {
    let width = src.numel() / idx.len().max(1);
    let mut out = vec![0.0f32; rows * width];
    for (k, &i) in idx.iter().enumerate() {
        let from = &src.data()[k * width..(k + 1) * width];
        for (o, &v) in out[i * width..(i + 1) * width].iter_mut().zip(from) {
            *o += v;
        }
    }
    let mut shape = src.shape().to_vec();
    shape[0] = rows;
    Tensor::new(shape, out)
}

pub fn sum_last(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inner = *s.last().expect("sum_last on scalar");
    let data = x.data().chunks_exact(inner.max(1)).map(|r| sum_f64(r) as f32).collect();
    let mut shape = s.to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::new(shape, data)
}

pub fn log_softmax_last(x: &Tensor) -> Tensor {
    let inner = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(inner) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() as f32 + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax over `row` restricted to entries where `allowed(j)`; the rest are
/// exactly zero. A row with nothing allowed becomes all zeros.
pub fn masked_softmax_row(row: &mut [f32], allowed: impl Fn(usize) -> bool) {
    let mut max = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0f32;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
