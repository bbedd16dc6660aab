//! Dense row-major matrices and the handful of pointwise ops the models need.
//!
//! Every op that reduces over an axis fixes its accumulation order (ascending
//! index, one owner per output element), so results are bitwise reproducible
//! at any rayon thread count.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Floating-point element type. The training pipeline runs at `f32` by
/// default; `f64` backs the deterministic mode and the gradient-check oracles.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + 'static
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn parse(text: &str) -> Option<Self>;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn total_cmp(&self, other: &Self) -> Ordering;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn parse(text: &str) -> Option<Self> {
                text.parse::<$t>().ok()
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn total_cmp(&self, other: &Self) -> Ordering {
                <$t>::total_cmp(self, other)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

pub const DENSE_BLOB_MAGIC: &[u8; 4] = b"UFDN";
pub const DENSE_BLOB_VERSION: u32 = 1;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged row lengths".to_string()));
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Copy of the rows selected by `ids`, in the given order.
    pub fn gather_rows(&self, ids: &[usize]) -> DenseMatrix<S> {
        let mut out = DenseMatrix::zeros(ids.len(), self.cols);
        for (dst, &src) in ids.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> DenseMatrix<T> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> DenseMatrix<T> {
        self.map(|x| T::from_f64(x.to_f64()))
    }

    /// Binary layout: magic `UFDN`, version, rows, cols (u32 LE), then the
    /// payload row-major as f32.
    pub fn write_blob<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(DENSE_BLOB_MAGIC)?;
        crate::wire::write_u32(out, DENSE_BLOB_VERSION)?;
        crate::wire::write_u32(out, self.rows as u32)?;
        crate::wire::write_u32(out, self.cols as u32)?;
        for &x in &self.data {
            crate::wire::write_f32(out, x.to_f64() as f32)?;
        }
        Ok(())
    }

    /// Reads a blob written by [`write_blob`](Self::write_blob). `name`
    /// labels errors.
    pub fn read_blob<R: std::io::Read>(input: &mut R, name: &str) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: name.into(),
            msg,
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DENSE_BLOB_MAGIC {
            return Err(fail(format!("bad magic {magic:?}, expected UFDN")));
        }
        let version = crate::wire::read_u32(input)?;
        if version != DENSE_BLOB_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let rows = crate::wire::read_u32(input)? as usize;
        let cols = crate::wire::read_u32(input)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| fail("element count overflows".to_string()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::from_f64(crate::wire::read_f32(input)? as f64));
        }
        crate::wire::expect_eof(input)?;
        DenseMatrix::from_vec(rows, cols, data)
    }

    /// Errors with the offending position if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (pos, x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{what} at ({}, {}): {x}",
                    pos / self.cols.max(1),
                    pos % self.cols.max(1)
                )));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Index<(usize, usize)> for DenseMatrix<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> IndexMut<(usize, usize)> for DenseMatrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// `input (b x d) * weights (d x m) + bias (m)`, one output row per worker.
///
/// Per output element the bias is added first and the reduction over `k`
/// runs ascending, matching the naive triple loop bit for bit.
pub fn dense_forward<S: Scalar>(
    input: &DenseMatrix<S>,
    weights: &DenseMatrix<S>,
    bias: Option<&[S]>,
) -> Result<DenseMatrix<S>> {
    if input.cols() != weights.rows() {
        return Err(Error::shape(
            "dense_forward",
            format!("input is {}x{}, weights are {}x{}", input.rows, input.cols, weights.rows, weights.cols),
        ));
    }
    if let Some(b) = bias {
        if b.len() != weights.cols() {
            return Err(Error::shape(
                "dense_forward",
                format!("bias has {} entries for {} outputs", b.len(), weights.cols),
            ));
        }
    }
    let (b_rows, m) = (input.rows(), weights.cols());
    let mut out = DenseMatrix::zeros(b_rows, m);
    out.data
        .par_chunks_mut(m)
        .zip(input.data.par_chunks(input.cols))
        .for_each(|(out_row, in_row)| {
            if let Some(b) = bias {
                out_row.copy_from_slice(b);
            }
            for (k, &a) in in_row.iter().enumerate() {
                let w_row = weights.row(k);
                for (o, &w) in out_row.iter_mut().zip(w_row) {
                    *o += a * w;
                }
            }
        });
    Ok(out)
}

/// `grad_input[i,k] = sum_j upstream[i,j] * weights[k,j]`, one row per worker.
pub fn dense_backward_input<S: Scalar>(
    upstream: &DenseMatrix<S>,
    weights: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if upstream.cols() != weights.cols() {
        return Err(Error::shape(
            "dense_backward_input",
            format!("upstream is {}x{}, weights are {}x{}", upstream.rows, upstream.cols, weights.rows, weights.cols),
        ));
    }
    let (b_rows, d) = (upstream.rows(), weights.rows());
    let mut out = DenseMatrix::zeros(b_rows, d);
    out.data
        .par_chunks_mut(d)
        .zip(upstream.data.par_chunks(upstream.cols))
        .for_each(|(out_row, up_row)| {
            for (k, o) in out_row.iter_mut().enumerate() {
                let w_row = weights.row(k);
                let mut acc = S::ZERO;
                for (&u, &w) in up_row.iter().zip(w_row) {
                    acc += u * w;
                }
                *o = acc;
            }
        });
    Ok(out)
}

/// `grad_weights[k,j] = sum_i input[i,k] * upstream[i,j]`, one weight row per
/// worker, instances accumulated in ascending order.
pub fn dense_backward_weights<S: Scalar>(
    input: &DenseMatrix<S>,
    upstream: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if input.rows() != upstream.rows() {
        return Err(Error::shape(
            "dense_backward_weights",
            format!("input has {} rows, upstream has {}", input.rows, upstream.rows),
        ));
    }
    let (d, m) = (input.cols(), upstream.cols());
    let mut grad = DenseMatrix::zeros(d, m);
    grad.data
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(k, g_row)| {
            for i in 0..input.rows() {
                let a = input[(i, k)];
                let up_row = upstream.row(i);
                for (g, &u) in g_row.iter_mut().zip(up_row) {
                    *g += a * u;
                }
            }
        });
    Ok(grad)
}

/// `grad_bias[j] = sum_i upstream[i,j]`, instances ascending.
pub fn dense_backward_bias<S: Scalar>(upstream: &DenseMatrix<S>) -> Vec<S> {
    let mut grad = vec![S::ZERO; upstream.cols()];
    for i in 0..upstream.rows() {
        for (g, &u) in grad.iter_mut().zip(upstream.row(i)) {
            *g += u;
        }
    }
    grad
}

pub fn relu<S: Scalar>(input: &DenseMatrix<S>) -> DenseMatrix<S> {
    input.map(|x| x.max(S::ZERO))
}

/// Passes `upstream` through where the pre-activation was strictly positive.
pub fn relu_backward<S: Scalar>(
    pre_activation: &DenseMatrix<S>,
    upstream: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if pre_activation.rows != upstream.rows || pre_activation.cols != upstream.cols {
        return Err(Error::shape(
            "relu_backward",
            format!(
                "pre-activation is {}x{}, upstream is {}x{}",
                pre_activation.rows, pre_activation.cols, upstream.rows, upstream.cols
            ),
        ));
    }
    let mut out = upstream.clone();
    for (o, &z) in out.data.iter_mut().zip(&pre_activation.data) {
        if z <= S::ZERO {
            *o = S::ZERO;
        }
    }
    Ok(out)
}

/// Inverted dropout: drops each element with probability `rate` and scales
/// survivors by `1/(1-rate)`, so eval mode needs no rescaling. The mask is
/// drawn sequentially in row-major order from `rng`, independent of threads.
/// In eval mode (`training == false`) the input passes through unchanged.
pub fn dropout<S: Scalar>(
    input: &DenseMatrix<S>,
    rate: f64,
    training: bool,
    rng: &mut SplitRng,
) -> Result<(DenseMatrix<S>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), vec![true; input.data.len()]));
    }
    let scale = S::from_f64(1.0 / (1.0 - rate));
    let mut out = input.clone();
    let mut mask = vec![true; input.data.len()];
    for (x, keep) in out.data.iter_mut().zip(mask.iter_mut()) {
        if rng.gen_range(0.0..1.0) < rate {
            *x = S::ZERO;
            *keep = false;
        } else {
            *x *= scale;
        }
    }
    Ok((out, mask))
}

/// Indices of the `k` largest scores, descending, ties broken toward the
/// lower index.
pub fn top_k<S: Scalar>(scores: &[S], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::shape(
            "top_k",
            format!("k = {k} exceeds {} scores", scores.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| a.cmp(b))
    };
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_forward(input: &DenseMatrix<f64>, weights: &DenseMatrix<f64>, bias: Option<&[f64]>) -> DenseMatrix<f64> {
        let mut out = DenseMatrix::zeros(input.rows(), weights.cols());
        for i in 0..input.rows() {
            for j in 0..weights.cols() {
                let mut acc = bias.map_or(0.0, |b| b[j]);
                for k in 0..input.cols() {
                    acc += input[(i, k)] * weights[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut SplitRng) -> DenseMatrix<f64> {
        let mut m = DenseMatrix::zeros(rows, cols);
        for x in m.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn forward_matches_triple_loop_bit_for_bit() {
        let mut rng = SplitRng::new(11);
        for &(b, d, m) in &[(1, 1, 1), (3, 5, 7), (16, 33, 29), (8, 64, 64)] {
            let x = random_matrix(b, d, &mut rng);
            let w = random_matrix(d, m, &mut rng);
            let bias: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = dense_forward(&x, &w, Some(&bias)).unwrap();
            let want = naive_forward(&x, &w, Some(&bias));
            assert_eq!(got.data(), want.data());
            let got_nb = dense_forward(&x, &w, None).unwrap();
            let want_nb = naive_forward(&x, &w, None);
            assert_eq!(got_nb.data(), want_nb.data());
        }
    }

    #[test]
    fn backward_matches_triple_loop_bit_for_bit() {
        let mut rng = SplitRng::new(12);
        let (b, d, m) = (6, 10, 13);
        let x = random_matrix(b, d, &mut rng);
        let w = random_matrix(d, m, &mut rng);
        let up = random_matrix(b, m, &mut rng);

        let gi = dense_backward_input(&up, &w).unwrap();
        for i in 0..b {
            for k in 0..d {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += up[(i, j)] * w[(k, j)];
                }
                assert_eq!(gi[(i, k)], acc);
            }
        }

        let gw = dense_backward_weights(&x, &up).unwrap();
        for k in 0..d {
            for j in 0..m {
                let mut acc = 0.0;
                for i in 0..b {
                    acc += x[(i, k)] * up[(i, j)];
                }
                assert_eq!(gw[(k, j)], acc);
            }
        }

        let gb = dense_backward_bias(&up);
        for j in 0..m {
            let mut acc = 0.0;
            for i in 0..b {
                acc += up[(i, j)];
            }
            assert_eq!(gb[j], acc);
        }
    }

    #[test]
    fn shape_mismatches_error() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let w = DenseMatrix::<f64>::zeros(4, 5);
        assert!(matches!(dense_forward(&a, &w, None), Err(Error::Shape { .. })));
        let bad_bias = vec![0.0; 4];
        let w2 = DenseMatrix::<f64>::zeros(3, 5);
        assert!(matches!(
            dense_forward(&a, &w2, Some(&bad_bias)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(dense_backward_input(&a, &w), Err(Error::Shape { .. })));
        assert!(matches!(
            dense_backward_weights(&a, &DenseMatrix::<f64>::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn relu_zeroes_negatives_and_gates_gradients() {
        let x = DenseMatrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let up = DenseMatrix::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        let g = relu_backward(&x, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut rng = SplitRng::new(5);
        let x = random_matrix(4, 6, &mut rng);
        let (eval, _) = dropout(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval.data(), x.data());
        let (zero, mask) = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(zero.data(), x.data());
        assert!(mask.iter().all(|&m| m));
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_and_scaling_hold_in_the_large() {
        let n = 1_000_000usize;
        let x = DenseMatrix::from_vec(1, n, vec![1.0f64; n]).unwrap();
        let mut rng = SplitRng::new(99);
        let (y, mask) = dropout(&x, 0.1, true, &mut rng).unwrap();
        let dropped = mask.iter().filter(|&&m| !m).count() as f64 / n as f64;
        assert!((dropped - 0.1).abs() < 2e-3, "dropped fraction {dropped}");
        let survivor = y.data().iter().copied().find(|&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_is_seed_deterministic() {
        let x = DenseMatrix::<f32>::from_vec(2, 8, vec![1.0; 16]).unwrap();
        let (a, ma) = dropout(&x, 0.3, true, &mut SplitRng::new(7)).unwrap();
        let (b, mb) = dropout(&x, 0.3, true, &mut SplitRng::new(7)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ma, mb);
    }

    #[test]
    fn top_k_orders_and_breaks_ties_low_index_first() {
        let scores = [1.0f64, 3.0, 3.0, -2.0, 5.0];
        assert_eq!(top_k(&scores, 3).unwrap(), vec![4, 1, 2]);
        assert_eq!(top_k(&scores, 5).unwrap(), vec![4, 1, 2, 0, 3]);
        assert_eq!(top_k(&scores, 0).unwrap(), Vec::<usize>::new());
        assert!(top_k(&scores, 6).is_err());
        let tied = [2.0f64, 2.0, 2.0];
        assert_eq!(top_k(&tied, 2).unwrap(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(scores in proptest::collection::vec(-100.0f64..100.0, 1..64), k_frac in 0.0f64..1.0) {
            let k = ((scores.len() as f64) * k_frac) as usize;
            let got = top_k(&scores, k).unwrap();
            let mut all: Vec<usize> = (0..scores.len()).collect();
            all.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then_with(|| a.cmp(b)));
            all.truncate(k);
            prop_assert_eq!(got, all);
        }

        #[test]
        fn forward_equals_oracle_on_random_shapes(b in 1usize..6, d in 1usize..12, m in 1usize..12, seed in 0u64..1000) {
            let mut rng = SplitRng::new(seed);
            let x = random_matrix(b, d, &mut rng);
            let w = random_matrix(d, m, &mut rng);
            let got = dense_forward(&x, &w, None).unwrap();
            let want = naive_forward(&x, &w, None);
            prop_assert_eq!(got.data(), want.data());
        }
    }

    #[test]
    fn dense_blob_round_trips_and_rejects_corruption() {
        let mut rng = SplitRng::new(31);
        let m: DenseMatrix<f32> = random_matrix(5, 7, &mut rng).cast();
        let mut buf = Vec::new();
        m.write_blob(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 4 * 35);
        let back = DenseMatrix::<f32>::read_blob(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(m, back);

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(DenseMatrix::<f32>::read_blob(&mut bad.as_slice(), "mem").is_err());
        let short = &buf[..buf.len() - 1];
        assert!(DenseMatrix::<f32>::read_blob(&mut &short[..], "mem").is_err());
        buf.push(0);
        assert!(DenseMatrix::<f32>::read_blob(&mut buf.as_slice(), "mem").is_err());
    }

    #[test]
    fn check_finite_reports_position() {
        let mut x = DenseMatrix::<f64>::zeros(2, 2);
        x[(1, 0)] = f64::NAN;
        let err = x.check_finite("scores").unwrap_err();
        assert!(err.to_string().contains("(1, 0)"), "{err}");
    }

    #[test]
    fn gather_rows_copies_in_order() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = m.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
