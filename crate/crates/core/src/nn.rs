//! Layer primitives with explicit backward passes.
//!
//! Weight matrices are stored `(in, out)`, so a linear layer is
//! `y = x . w + b` on `(rows, in)` activations. Every backward function
//! takes the upstream gradient and returns gradients in the same layout as
//! the forward inputs; parameter gradients are accumulated by the caller.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::Scalar;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// `y = x . w + b`, `w` is `(in, out)`, `b` broadcast over rows.
pub fn linear_forward<F: Scalar>(
    x: &ArrayView2<F>,
    w: &ArrayView2<F>,
    b: &ArrayView1<F>,
) -> Array2<F> {
    x.dot(w) + b
}

/// Returns `(dx, dw, db)` for `y = x . w + b`.
pub fn linear_backward<F: Scalar>(
    x: &ArrayView2<F>,
    w: &ArrayView2<F>,
    dy: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Per-row layer normalisation with learned gain and bias.
///
/// Returns `(y, xhat, rstd)` where `xhat` is the normalised activation
/// before the affine map and `rstd` the reciprocal standard deviation per
/// row; both are needed by the backward pass.
pub fn layernorm_forward<F: Scalar>(
    x: &ArrayView2<F>,
    gain: &ArrayView1<F>,
    bias: &ArrayView1<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let (rows, dim) = x.dim();
    let inv_dim = F::from_f64(1.0 / dim as f64);
    let eps = F::from_f64(LAYERNORM_EPS);
    let mut xhat = Array2::<F>::zeros((rows, dim));
    let mut rstd = Array1::<F>::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() * inv_dim;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<F>()
            * inv_dim;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        let mut out = xhat.row_mut(r);
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - mean) * rs;
        }
    }
    let y = &xhat * gain + bias;
    (y, xhat, rstd)
}

/// Returns `(dx, dgain, dbias)` for layer normalisation.
pub fn layernorm_backward<F: Scalar>(
    dy: &ArrayView2<F>,
    xhat: &ArrayView2<F>,
    rstd: &ArrayView1<F>,
    gain: &ArrayView1<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (rows, dim) = dy.dim();
    let inv_dim = F::from_f64(1.0 / dim as f64);
    let dgain = (dy * xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let mut dx = Array2::<F>::zeros((rows, dim));
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for ((&g, &d), &h) in gain.iter().zip(dyr.iter()).zip(xh.iter()) {
            let dxh = g * d;
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * h;
        }
        let mean_dxhat = sum_dxhat * inv_dim;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_dim;
        let rs = rstd[r];
        let mut out = dx.row_mut(r);
        for ((o, (&g, &d)), &h) in out
            .iter_mut()
            .zip(gain.iter().zip(dyr.iter()))
            .zip(xh.iter())
        {
            let dxh = g * d;
            *o = rs * (dxh - mean_dxhat - h * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Smooth GELU (tanh form).
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

/// Analytic derivative of [`gelu`].
pub fn gelu_prime<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Sigmoid-gated linear unit `x * sigmoid(x)`.
pub fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

/// Analytic derivative of [`silu`].
pub fn silu_prime<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// Row-wise softmax in place, with the usual max subtraction.
pub fn softmax_rows_inplace<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Backward through a row-wise softmax: `dx_i = p_i * (dy_i - sum_j dy_j p_j)`.
pub fn softmax_backward_rows<F: Scalar>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let mut dx = Array2::<F>::zeros(probs.dim());
    for ((mut out, p), d) in dx
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(dprobs.rows())
    {
        let dot = p.iter().zip(d.iter()).map(|(&a, &b)| a * b).sum::<F>();
        for ((o, &pi), &di) in out.iter_mut().zip(p.iter()).zip(d.iter()) {
            *o = pi * (di - dot);
        }
    }
    dx
}

/// Sinusoidal position/timestep encoding of dimension `dim` (must be even):
/// `[sin(t * w_0..), cos(t * w_0..)]` with `w_i = base^(-i/half)`.
pub fn sinusoidal_embedding<F: Scalar>(t: f64, dim: usize, base: f64) -> Array1<F> {
    assert!(dim % 2 == 0, "sinusoidal embedding needs an even dimension");
    let half = dim / 2;
    let mut out = Array1::<F>::zeros(dim);
    for i in 0..half {
        let freq = (-(base.ln()) * i as f64 / half as f64).exp();
        out[i] = F::from_f64((t * freq).sin());
        out[half + i] = F::from_f64((t * freq).cos());
    }
    out
}

/// Normal draw with the given std, resampled until it lands within two
/// standard deviations.
pub fn trunc_normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, std: f64) -> F {
    loop {
        let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * std;
        if v.abs() <= 2.0 * std {
            return F::from_f64(v);
        }
    }
}

/// Activations cached by multi-head attention for its backward pass.
pub struct AttnCache<F> {
    pub qkv: Array2<F>,
    pub probs: Vec<Array2<F>>,
    pub concat: Array2<F>,
}

/// Multi-head self-attention over one sequence.
///
/// `x` is the already-normalised input `(len, dim)`; `w_qkv` is
/// `(dim, 3*dim)` laid out `[q | k | v]`; `w_proj` is `(dim, dim)`.
pub fn attention_forward<F: Scalar>(
    x: &ArrayView2<F>,
    w_qkv: &ArrayView2<F>,
    b_qkv: &ArrayView1<F>,
    w_proj: &ArrayView2<F>,
    b_proj: &ArrayView1<F>,
    num_heads: usize,
) -> (Array2<F>, AttnCache<F>) {
    let (len, dim) = x.dim();
    let head_dim = dim / num_heads;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let qkv = linear_forward(x, w_qkv, b_qkv);
    let mut concat = Array2::<F>::zeros((len, dim));
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let q = qkv.slice(s![.., h * head_dim..(h + 1) * head_dim]);
        let k = qkv.slice(s![.., dim + h * head_dim..dim + (h + 1) * head_dim]);
        let v = qkv.slice(s![.., 2 * dim + h * head_dim..2 * dim + (h + 1) * head_dim]);
        let mut scores = q.dot(&k.t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows_inplace(&mut scores);
        let out = scores.dot(&v);
        concat
            .slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&out);
        probs.push(scores);
    }
    let y = linear_forward(&concat.view(), w_proj, b_proj);
    (y, AttnCache { qkv, probs, concat })
}

/// Gradients returned by [`attention_backward`].
pub struct AttnGrads<F> {
    pub dx: Array2<F>,
    pub dw_qkv: Array2<F>,
    pub db_qkv: Array1<F>,
    pub dw_proj: Array2<F>,
    pub db_proj: Array1<F>,
}

pub fn attention_backward<F: Scalar>(
    x: &ArrayView2<F>,
    w_qkv: &ArrayView2<F>,
    w_proj: &ArrayView2<F>,
    cache: &AttnCache<F>,
    dy: &ArrayView2<F>,
    num_heads: usize,
) -> AttnGrads<F> {
    let (len, dim) = x.dim();
    let head_dim = dim / num_heads;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let (dconcat, dw_proj, db_proj) = linear_backward(&cache.concat.view(), w_proj, dy);
    let mut dqkv = Array2::<F>::zeros((len, 3 * dim));
    for h in 0..num_heads {
        let q = cache.qkv.slice(s![.., h * head_dim..(h + 1) * head_dim]);
        let k = cache
            .qkv
            .slice(s![.., dim + h * head_dim..dim + (h + 1) * head_dim]);
        let v = cache
            .qkv
            .slice(s![.., 2 * dim + h * head_dim..2 * dim + (h + 1) * head_dim]);
        let p = &cache.probs[h];
        let d_out = dconcat.slice(s![.., h * head_dim..(h + 1) * head_dim]);
        let dprobs = d_out.dot(&v.t());
        let dv = p.t().dot(&d_out);
        let mut dscores = softmax_backward_rows(p, &dprobs);
        dscores.mapv_inplace(|s| s * scale);
        let dq = dscores.dot(&k);
        let dk = dscores.t().dot(&q);
        dqkv.slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&dq);
        dqkv.slice_mut(s![.., dim + h * head_dim..dim + (h + 1) * head_dim])
            .assign(&dk);
        dqkv.slice_mut(s![.., 2 * dim + h * head_dim..2 * dim + (h + 1) * head_dim])
            .assign(&dv);
    }
    let (dx, dw_qkv, db_qkv) = linear_backward(x, w_qkv, &dqkv.view());
    AttnGrads {
        dx,
        dw_qkv,
        db_qkv,
        dw_proj,
        db_proj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| f64::std_normal(rng))
    }

    fn randn1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| f64::std_normal(rng))
    }

    /// Central finite difference of a scalar function of one array entry.
    fn fd<F: Fn(&Array2<f64>) -> f64>(x: &Array2<f64>, i: (usize, usize), f: F) -> f64 {
        let h = 1e-6;
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn2(&mut rng, 3, 4);
        let w = randn2(&mut rng, 4, 5);
        let b = randn1(&mut rng, 5);
        let loss = |y: &Array2<f64>| y.iter().map(|v| v * v).sum::<f64>();
        let y = linear_forward(&x.view(), &w.view(), &b.view());
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, dw, _db) = linear_backward(&x.view(), &w.view(), &dy.view());
        for &idx in &[(0, 0), (2, 3), (1, 2)] {
            let num = fd(&x, idx, |xp| {
                loss(&linear_forward(&xp.view(), &w.view(), &b.view()))
            });
            assert!((dx[idx] - num).abs() < 1e-6, "{} vs {}", dx[idx], num);
        }
        for &idx in &[(0, 0), (3, 4)] {
            let num = fd(&w, idx, |wp| {
                loss(&linear_forward(&x.view(), &wp.view(), &b.view()))
            });
            assert!((dw[idx] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn2(&mut rng, 3, 6);
        let gain = randn1(&mut rng, 6);
        let bias = randn1(&mut rng, 6);
        let loss = |x: &Array2<f64>| {
            let (y, _, _) = layernorm_forward(&x.view(), &gain.view(), &bias.view());
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, xhat, rstd) = layernorm_forward(&x.view(), &gain.view(), &bias.view());
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, _, _) = layernorm_backward(&dy.view(), &xhat.view(), &rstd.view(), &gain.view());
        for &idx in &[(0, 0), (1, 3), (2, 5)] {
            let num = fd(&x, idx, loss);
            assert!((dx[idx] - num).abs() < 1e-5, "{} vs {}", dx[idx], num);
        }
    }

    #[test]
    fn activation_derivatives_match_fd() {
        let h = 1e-6;
        for &x in &[-2.3f64, -0.5, 0.0, 0.7, 3.1] {
            let g_num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - g_num).abs() < 1e-6);
            let s_num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_prime(x) - s_num).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn2(&mut rng, 2, 5);
        let target = randn2(&mut rng, 2, 5);
        let loss = |x: &Array2<f64>| {
            let mut p = x.clone();
            softmax_rows_inplace(&mut p);
            (&p * &target).sum()
        };
        let mut probs = x.clone();
        softmax_rows_inplace(&mut probs);
        let dx = softmax_backward_rows(&probs, &target);
        for &idx in &[(0, 0), (1, 4), (0, 2)] {
            let num = fd(&x, idx, loss);
            assert!((dx[idx] - num).abs() < 1e-7, "{} vs {}", dx[idx], num);
        }
    }

    #[test]
    fn attention_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (len, dim, heads) = (3, 4, 2);
        let x = randn2(&mut rng, len, dim);
        let w_qkv = randn2(&mut rng, dim, 3 * dim).mapv(|v| v * 0.5);
        let b_qkv = randn1(&mut rng, 3 * dim);
        let w_proj = randn2(&mut rng, dim, dim).mapv(|v| v * 0.5);
        let b_proj = randn1(&mut rng, dim);
        let loss = |x: &Array2<f64>, w_qkv: &Array2<f64>| {
            let (y, _) = attention_forward(
                &x.view(),
                &w_qkv.view(),
                &b_qkv.view(),
                &w_proj.view(),
                &b_proj.view(),
                heads,
            );
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = attention_forward(
            &x.view(),
            &w_qkv.view(),
            &b_qkv.view(),
            &w_proj.view(),
            &b_proj.view(),
            heads,
        );
        let dy = y.mapv(|v| 2.0 * v);
        let grads = attention_backward(
            &x.view(),
            &w_qkv.view(),
            &w_proj.view(),
            &cache,
            &dy.view(),
            heads,
        );
        for &idx in &[(0, 0), (2, 3), (1, 1)] {
            let num = fd(&x, idx, |xp| loss(xp, &w_qkv));
            assert!(
                (grads.dx[idx] - num).abs() < 1e-5,
                "dx {} vs {}",
                grads.dx[idx],
                num
            );
        }
        for &idx in &[(0, 0), (3, 11), (2, 6)] {
            let num = fd(&w_qkv, idx, |wp| loss(&x, wp));
            assert!(
                (grads.dw_qkv[idx] - num).abs() < 1e-5,
                "dw_qkv {} vs {}",
                grads.dw_qkv[idx],
                num
            );
        }
    }

    #[test]
    fn sinusoidal_embedding_basics() {
        let e = sinusoidal_embedding::<f64>(0.0, 8, 10_000.0);
        for i in 0..4 {
            assert_eq!(e[i], 0.0);
            assert_eq!(e[4 + i], 1.0);
        }
        let e1 = sinusoidal_embedding::<f64>(3.0, 8, 10_000.0);
        let e2 = sinusoidal_embedding::<f64>(3.0, 8, 10_000.0);
        assert_eq!(e1, e2);
        assert!((e1[0] - 3.0f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn trunc_normal_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v: f64 = trunc_normal(&mut rng, 0.02);
            assert!(v.abs() <= 0.04);
        }
    }
}
