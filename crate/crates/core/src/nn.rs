//! Minimal neural-net substrate over flat `f64` parameter vectors.
//!
//! Both models (autoencoder, denoiser) keep every weight in one contiguous
//! `Vec<f64>` described by a [`ParamLayout`]. That makes Adam, checkpointing
//! and finite-difference checking trivial: they all see one flat slice.
//!
//! Dense layers and the time-axis convolution reduce to row-major GEMM via
//! `ndarray::dot`, which is single-threaded and deterministic. Each output row
//! depends only on the matching input row, so per-sample results do not depend
//! on how samples are batched.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

/// One named matrix inside a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Seg {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Ordered named segments describing one flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    segs: Vec<Seg>,
    total: usize,
}

/// Handle to a segment; returned by [`ParamLayout::add`].
#[derive(Debug, Clone, Copy)]
pub struct SegId(usize);

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &'static str, rows: usize, cols: usize) -> SegId {
        let offset = self.total;
        self.segs.push(Seg { name, rows, cols, offset });
        self.total += rows * cols;
        SegId(self.segs.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn seg(&self, id: SegId) -> &Seg {
        &self.segs[id.0]
    }

    pub fn slice<'a>(&self, data: &'a [f64], id: SegId) -> &'a [f64] {
        let s = &self.segs[id.0];
        &data[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64], id: SegId) -> &'a mut [f64] {
        let s = &self.segs[id.0];
        &mut data[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn mat<'a>(&self, data: &'a [f64], id: SegId) -> ArrayView2<'a, f64> {
        let s = &self.segs[id.0];
        ArrayView2::from_shape((s.rows, s.cols), self.slice(data, id)).unwrap()
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], id: SegId) -> ArrayViewMut2<'a, f64> {
        let s = &self.segs[id.0];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.offset..s.offset + s.rows * s.cols])
            .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Dense layer

/// `y = x · wᵀ + b` with `x: n×i`, `w: o×i`, `b: o`.
pub fn linear(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &[f64]) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dw += dyᵀ·x`, `db += Σ_rows dy`,
/// returns `dx = dy·w`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    mut dw: ArrayViewMut2<f64>,
    db: &mut [f64],
) -> Array2<f64> {
    dw += &dy.t().dot(x);
    for row in dy.rows() {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    dy.dot(w)
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities (backward passes take the *outputs*)

pub fn tanh_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(f64::tanh);
}

/// `dx = dy · (1 − y²)`, written into `dy`.
pub fn tanh_backward_inplace(dy: &mut Array2<f64>, y: &Array2<f64>) {
    azip_mul(dy, y, |y| 1.0 - y * y);
}

pub fn sigmoid_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

/// `dx = dy · y(1−y)`, written into `dy`.
pub fn sigmoid_backward_inplace(dy: &mut Array2<f64>, y: &Array2<f64>) {
    azip_mul(dy, y, |y| y * (1.0 - y));
}

fn azip_mul(dy: &mut Array2<f64>, y: &Array2<f64>, f: impl Fn(f64) -> f64) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &y| *d *= f(y));
}

/// Row-wise softmax, numerically stabilized.
pub fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Time-axis 1-D convolution via im2col

/// Patch matrix for a same-padded dilated conv along the row axis.
///
/// `h` stacks blocks of `block` consecutive time steps (one block per sample);
/// taps never cross block edges — out-of-range taps contribute zeros.
/// Output column layout: tap-major, `tap * d + channel`.
pub fn im2col(h: &ArrayView2<f64>, block: usize, k: usize, dilation: usize) -> Array2<f64> {
    let (rows, d) = h.dim();
    debug_assert_eq!(rows % block, 0);
    let half = (k / 2) as isize;
    let mut m = Array2::zeros((rows, k * d));
    for b in (0..rows).step_by(block) {
        for t in 0..block {
            for tap in 0..k {
                let src = t as isize + (tap as isize - half) * dilation as isize;
                if src < 0 || src >= block as isize {
                    continue;
                }
                let src_row = h.row(b + src as usize);
                let mut dst = m.row_mut(b + t);
                for c in 0..d {
                    dst[tap * d + c] = src_row[c];
                }
            }
        }
    }
    m
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto `dh`.
pub fn col2im(dm: &ArrayView2<f64>, block: usize, k: usize, dilation: usize, d: usize) -> Array2<f64> {
    let rows = dm.dim().0;
    let half = (k / 2) as isize;
    let mut dh = Array2::zeros((rows, d));
    for b in (0..rows).step_by(block) {
        for t in 0..block {
            let src_row = dm.row(b + t);
            for tap in 0..k {
                let dst = t as isize + (tap as isize - half) * dilation as isize;
                if dst < 0 || dst >= block as isize {
                    continue;
                }
                let mut dst_row = dh.row_mut(b + dst as usize);
                for c in 0..d {
                    dst_row[c] += src_row[tap * d + c];
                }
            }
        }
    }
    dh
}

/// Same-padded dilated conv along time: `w: d_out × (k·d_in)`, `b: d_out`.
pub fn conv1d(
    h: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    b: &[f64],
    block: usize,
    k: usize,
    dilation: usize,
) -> Array2<f64> {
    let m = im2col(h, block, k, dilation);
    linear(&m.view(), w, b)
}

/// Backward of [`conv1d`]; accumulates into `dw`/`db`, returns `dh`.
pub fn conv1d_backward(
    h: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    block: usize,
    k: usize,
    dilation: usize,
    dw: ArrayViewMut2<f64>,
    db: &mut [f64],
) -> Array2<f64> {
    let m = im2col(h, block, k, dilation); // recomputed: cheaper than storing 5× activations
    let dm = linear_backward(&m.view(), w, dy, dw, db);
    col2im(&dm.view(), block, k, dilation, h.dim().1)
}

// ---------------------------------------------------------------------------
// Encodings

/// Fixed sinusoidal position table, `block × d` (transformer convention).
pub fn sinusoidal_posenc(block: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((block, d));
    for t in 0..block {
        for i in 0..d {
            let rate = (10_000f64).powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * rate;
            pe[[t, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Fourier features of a scalar: `[sin(ω_k t), cos(ω_k t)]`, ω_k = 0.5·2^k.
pub fn fourier_features(t: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freq);
    for k in 0..n_freq {
        let w = 0.5 * (1u64 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Disjoint mutable views of a weight segment and the bias segment that
/// immediately follows it in the layout — the borrow checker cannot see the
/// disjointness through two separate indexing calls.
pub fn grad_pair<'a>(
    l: &ParamLayout,
    data: &'a mut [f64],
    w: SegId,
    b: SegId,
) -> (ArrayViewMut2<'a, f64>, &'a mut [f64]) {
    let (sw, sb) = (l.seg(w).clone(), l.seg(b).clone());
    assert!(sw.offset + sw.rows * sw.cols <= sb.offset, "bias must follow its weights");
    let (left, right) = data.split_at_mut(sb.offset);
    let wm = ArrayViewMut2::from_shape(
        (sw.rows, sw.cols),
        &mut left[sw.offset..sw.offset + sw.rows * sw.cols],
    )
    .unwrap();
    (wm, &mut right[..sb.rows * sb.cols])
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization & gradient checking

/// Fill with U(−s, s), s = 1/√fan_in — the seeded default for weight matrices.
pub fn fill_uniform_fan_in(rng: &mut impl Rng, buf: &mut [f64], fan_in: usize) {
    let s = 1.0 / (fan_in as f64).sqrt();
    for v in buf.iter_mut() {
        *v = rng.random_range(-s..s);
    }
}

/// Max relative error between `analytic` gradients and central differences of
/// `loss` at the chosen `indices` (step `h`). The denominator floor hides only
/// sub-1e-8 absolute disagreements, which sit below finite-difference noise.
pub fn finite_diff_max_rel_err(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use ndarray::array;

    #[test]
    fn linear_matches_hand_value() {
        // y = x·wᵀ + b : [1,2]·[[1,0],[−1,1]]ᵀ + [10, 20]
        let x = array![[1.0, 2.0]];
        let w = array![[1.0, 0.0], [-1.0, 1.0]];
        let y = linear(&x.view(), &w.view(), &[10.0, 20.0]);
        assert_eq!(y, array![[11.0, 21.0]]);
    }

    #[test]
    fn linear_backward_matches_finite_diff() {
        let mut rng = stream(1, Domain::AutoencoderInit, 0);
        let mut x = Array2::zeros((3, 4));
        x.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let mut params = vec![0.0; 2 * 4 + 2];
        fill_uniform_fan_in(&mut rng, &mut params, 4);

        let loss = |p: &[f64]| {
            let w = ArrayView2::from_shape((2, 4), &p[..8]).unwrap();
            let y = linear(&x.view(), &w, &p[8..]);
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let w = ArrayView2::from_shape((2, 4), &params[..8]).unwrap();
        let y = linear(&x.view(), &w, &params[8..]);
        let dy = y.mapv(|v| 2.0 * v);
        let mut dw = Array2::zeros((2, 4));
        let mut db = vec![0.0; 2];
        linear_backward(&x.view(), &w, &dy.view(), dw.view_mut(), &mut db);

        let mut analytic = dw.into_raw_vec_and_offset().0;
        analytic.extend(db);
        let idx: Vec<usize> = (0..10).collect();
        let err = finite_diff_max_rel_err(loss, &mut params, &analytic, &idx, 1e-5);
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn conv_center_tap_is_identity() {
        let mut rng = stream(2, Domain::DiffusionInit, 0);
        let d = 3;
        let mut h = Array2::zeros((8, d));
        h.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        // w[o][tap·d + c] = 1 iff tap = 2 (centre) and c = o.
        let mut w = Array2::zeros((d, 5 * d));
        for o in 0..d {
            w[[o, 2 * d + o]] = 1.0;
        }
        for dil in [1, 2, 4] {
            let y = conv1d(&h.view(), &w.view(), &[0.0; 3], 8, 5, dil);
            assert_eq!(y, h);
        }
    }

    #[test]
    fn conv_shifted_tap_zero_pads() {
        let h = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Tap one step to the future (tap index 3 at dilation 1).
        let mut w = Array2::zeros((1, 5));
        w[[0, 3]] = 1.0;
        let y = conv1d(&h.view(), &w.view(), &[0.0], 4, 5, 1);
        assert_eq!(y.as_slice().unwrap(), &[2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn conv_blocks_do_not_leak() {
        // Two stacked blocks; a future-tap conv must not read across the seam.
        let h = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let mut w = Array2::zeros((1, 5));
        w[[0, 3]] = 1.0;
        let y = conv1d(&h.view(), &w.view(), &[0.0], 2, 5, 1);
        assert_eq!(y.as_slice().unwrap(), &[2.0, 0.0, 20.0, 0.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(h), Y> == <h, col2im(Y)> for random h, Y.
        let mut rng = stream(3, Domain::DiffusionInit, 1);
        let (block, k, dil, d) = (6, 5, 2, 3);
        let mut h = Array2::zeros((12, d));
        h.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let mut y = Array2::zeros((12, k * d));
        y.mapv_inplace(|_| rng.random_range(-1.0..1.0));

        let lhs: f64 = (&im2col(&h.view(), block, k, dil) * &y).sum();
        let rhs: f64 = (&h * &col2im(&y.view(), block, k, dil, d)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_diff() {
        let mut rng = stream(4, Domain::DiffusionInit, 2);
        let (block, k, dil, d) = (6, 5, 2, 2);
        let mut h = Array2::zeros((6, d));
        h.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let n_w = d * k * d;
        let mut params = vec![0.0; n_w + d];
        fill_uniform_fan_in(&mut rng, &mut params, k * d);

        let loss = |p: &[f64]| {
            let w = ArrayView2::from_shape((d, k * d), &p[..n_w]).unwrap();
            let y = conv1d(&h.view(), &w, &p[n_w..], block, k, dil);
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let w = ArrayView2::from_shape((d, k * d), &params[..n_w]).unwrap();
        let y = conv1d(&h.view(), &w, &params[n_w..], block, k, dil);
        let dy = y.mapv(|v| 2.0 * v);
        let mut dw = Array2::zeros((d, k * d));
        let mut db = vec![0.0; d];
        conv1d_backward(&h.view(), &w, &dy.view(), block, k, dil, dw.view_mut(), &mut db);

        let mut analytic = dw.into_raw_vec_and_offset().0;
        analytic.extend(db);
        let idx: Vec<usize> = (0..analytic.len()).collect();
        let err = finite_diff_max_rel_err(loss, &mut params, &analytic, &idx, 1e-5);
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut a = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        softmax_rows(&mut a);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().map(|&x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|&x| x.abs() < 1e-2), "p = {p:?}");
    }

    #[test]
    fn batch_rows_are_bitwise_stable() {
        // A row's GEMM result must not depend on how many other rows ride along,
        // otherwise batched and unbatched passes would disagree.
        let mut rng = stream(5, Domain::DiffusionInit, 3);
        let k = 171;
        let mut w = Array2::zeros((k, k));
        w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let mut row = Array2::zeros((1, k));
        row.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let mut big = Array2::zeros((64, k));
        big.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        big.row_mut(17).assign(&row.row(0));

        let single = row.dot(&w);
        let batched = big.dot(&w);
        assert_eq!(single.row(0), batched.row(17));
    }

    #[test]
    fn posenc_and_fourier_shapes() {
        let pe = sinusoidal_posenc(48, 10);
        assert_eq!(pe.dim(), (48, 10));
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(fourier_features(0.3, 8).len(), 16);
    }
}
