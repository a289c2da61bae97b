//! Value-level kernels. The autodiff graph calls these for its forward pass,
//! and they double as the plain functional API.

use statrs::function::erf::erf;

use super::tensor::{dims2, dims3, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn elu_plus_one_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn inverse_softplus_scalar(y: f64) -> f64 {
    // y = ln(1 + e^x)  =>  x = ln(e^y - 1)
    y.exp_m1().ln()
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ELU(x) + 1`: identity-plus-one for positive inputs, `e^x` otherwise.
pub fn elu_plus_one(x: &Tensor) -> Tensor {
    x.map(elu_plus_one_scalar)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn of(t: &'a Tensor, transposed: bool) -> Result<Self> {
        let (r, c) = dims2(t, "matmul")?;
        Ok(Self::raw(t.data(), r, c, transposed))
    }

    pub fn raw(data: &'a [f64], r: usize, c: usize, transposed: bool) -> Self {
        if transposed {
            MatView {
                data,
                rows: c,
                cols: r,
                rs: 1,
                cs: c as isize,
            }
        } else {
            MatView {
                data,
                rows: r,
                cols: c,
                rs: c as isize,
                cs: 1,
            }
        }
    }
}

/// `out = a · b` (if `accumulate`, `out += a · b`), `out` row-major `[a.rows × b.cols]`.
pub(crate) fn gemm_into(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the views describe in-bounds strided access of their slices
    // (checked by construction in `MatView`), and `out` holds m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let va = MatView::of(a, ta)?;
    let vb = MatView::of(b, tb)?;
    if va.cols != vb.rows {
        return Err(Error::Dimension(format!(
            "matmul: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" },
        )));
    }
    let mut out = vec![0.0; va.rows * vb.cols];
    gemm_into(va, vb, &mut out, false);
    Tensor::new(vec![va.rows, vb.cols], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, b, false, false)
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..n {
                max = max.max(src[base + k * inner]);
            }
            let mut total = 0.0;
            for k in 0..n {
                let e = (src[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            let inv = 1.0 / total;
            for k in 0..n {
                out[base + k * inner] *= inv;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Layer normalisation over the last axis, returning `(y, x̂, 1/σ)`.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let n = *x.shape().last().expect("non-empty shape");
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Dimension(format!(
            "layer_norm: last axis {n}, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd.push(inv);
        for k in 0..n {
            let h = (row[k] - mean) * inv;
            xhat[r * n + k] = h;
            y[r * n + k] = g[k] * h + b[k];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        Tensor::new(shape, xhat)?,
        rstd,
    ))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_parts(x, gamma, beta, eps).map(|(y, _, _)| y)
}

/// Patch grid extents for a `p × p` window moved with stride `s`.
pub fn grid_dims(h: usize, w: usize, p: usize, s: usize) -> Result<(usize, usize)> {
    if p == 0 || s == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if p > h || p > w {
        return Err(Error::Config(format!(
            "patch size {p} exceeds image {h}x{w}"
        )));
    }
    Ok(((h - p) / s + 1, (w - p) / s + 1))
}

/// Flattened `p × p` windows of a `[c × h × w]` image, one row per grid cell
/// in row-major grid order; columns ordered `(channel, dy, dx)`.
pub fn extract_patches(img: &Tensor, p: usize, s: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "extract_patches")?;
    let (gh, gw) = grid_dims(h, w, p, s)?;
    let cols = c * p * p;
    let src = img.data();
    let mut out = vec![0.0; gh * gw * cols];
    for gi in 0..gh {
        for gj in 0..gw {
            let row = &mut out[(gi * gw + gj) * cols..(gi * gw + gj + 1) * cols];
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..p {
                    let base = ch * h * w + (gi * s + dy) * w + gj * s;
                    row[k..k + p].copy_from_slice(&src[base..base + p]);
                    k += p;
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, cols], out)
}

/// Adjoint of [`extract_patches`]: scatter-add patch rows back into the image.
pub(crate) fn scatter_patches(
    grad: &[f64],
    (c, h, w): (usize, usize, usize),
    p: usize,
    s: usize,
) -> Vec<f64> {
    let (gh, gw) = ((h - p) / s + 1, (w - p) / s + 1);
    let cols = c * p * p;
    let mut out = vec![0.0; c * h * w];
    for gi in 0..gh {
        for gj in 0..gw {
            let row = &grad[(gi * gw + gj) * cols..(gi * gw + gj + 1) * cols];
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..p {
                    let base = ch * h * w + (gi * s + dy) * w + gj * s;
                    for dx in 0..p {
                        out[base + dx] += row[k + dx];
                    }
                    k += p;
                }
            }
        }
    }
    out
}

/// Direct 2-d convolution, no padding: `img [c×h×w]`, `weight [d×c×p×p]`,
/// `bias [d]` → `[d × h' × w']`.
pub fn conv2d(img: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "conv2d input")?;
    let (d, wc, p, p2) = match weight.shape() {
        [a, b, c, e] => (*a, *b, *c, *e),
        s => return Err(Error::Dimension(format!("conv2d weight: expected 4-d, got {s:?}"))),
    };
    if wc != c || p != p2 || bias.len() != d {
        return Err(Error::Dimension(format!(
            "conv2d: input {:?}, weight {:?}, bias {:?}",
            img.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (gh, gw) = grid_dims(h, w, p, stride)?;
    let (x, k, b) = (img.data(), weight.data(), bias.data());
    let mut out = vec![0.0; d * gh * gw];
    for o in 0..d {
        let kern = &k[o * c * p * p..(o + 1) * c * p * p];
        for i in 0..gh {
            for j in 0..gw {
                let mut acc = b[o];
                for ch in 0..c {
                    for dy in 0..p {
                        let xrow = &x[ch * h * w + (i * stride + dy) * w + j * stride..][..p];
                        let krow = &kern[(ch * p + dy) * p..][..p];
                        for dx in 0..p {
                            acc += krow[dx] * xrow[dx];
                        }
                    }
                }
                out[(o * gh + i) * gw + j] = acc;
            }
        }
    }
    Tensor::new(vec![d, gh, gw], out)
}

/// 3×3 max pooling with stride 1 and implicit `-∞` padding; the grid keeps
/// its size. Returns the pooled map and, per output, the flat source index.
pub(crate) fn max_pool3_parts(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = dims3(x, "max_pool3")?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut arg = vec![0usize; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        let idx = (ch * h + ii) * w + jj;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * h + i) * w + j;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, arg))
}

pub fn max_pool3(x: &Tensor) -> Result<Tensor> {
    max_pool3_parts(x).map(|(y, _)| y)
}

/// Corner indices and weights of a bilinear lookup at continuous pixel
/// coordinate `pos` along an axis of length `n`, clamped to the border.
/// The returned flag is true when the coordinate sits inside the map, i.e.
/// when the sample is differentiable in `pos`.
#[inline]
pub(crate) fn bilinear_axis(pos: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = pos > 0.0 && pos < max;
    let p = pos.clamp(0.0, max);
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64, inside)
}

/// Map a normalised coordinate in `[-1, 1]` to a pixel coordinate with
/// half-pixel alignment: `-1` and `1` are the outer edges of the map.
#[inline]
pub fn normalized_to_pixel(g: f64, n: usize) -> f64 {
    ((g + 1.0) * n as f64 - 1.0) / 2.0
}

/// Inverse of [`normalized_to_pixel`].
#[inline]
pub fn pixel_to_normalized(p: f64, n: usize) -> f64 {
    (2.0 * p + 1.0) / n as f64 - 1.0
}

/// Bilinear sampling of `features [d × h × w]` at `positions [n × 2]`
/// (columns `x`, `y`, normalised to `[-1, 1]`) → `[n × d]`.
pub fn grid_sample(features: &Tensor, positions: &Tensor) -> Result<Tensor> {
    let (d, h, w) = dims3(features, "grid_sample features")?;
    let (n, two) = dims2(positions, "grid_sample positions")?;
    if two != 2 {
        return Err(Error::Dimension(format!(
            "grid_sample positions must be [n x 2], got {:?}",
            positions.shape()
        )));
    }
    let f = features.data();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let (x0, x1, wx, _) = bilinear_axis(normalized_to_pixel(positions.get(&[i, 0]), w), w);
        let (y0, y1, wy, _) = bilinear_axis(normalized_to_pixel(positions.get(&[i, 1]), h), h);
        let c00 = (1.0 - wy) * (1.0 - wx);
        let c01 = (1.0 - wy) * wx;
        let c10 = wy * (1.0 - wx);
        let c11 = wy * wx;
        for k in 0..d {
            let m = &f[k * h * w..];
            out[i * d + k] = c00 * m[y0 * w + x0]
                + c01 * m[y0 * w + x1]
                + c10 * m[y1 * w + x0]
                + c11 * m[y1 * w + x1];
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Bilinear resize of `[c × h × w]` to `[c × th × tw]` using half-pixel
/// centres and edge clamping.
pub fn resize_bilinear(img: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "resize")?;
    if th == 0 || tw == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let axis = |out_n: usize, in_n: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_n as f64 / out_n as f64;
        (0..out_n)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_n - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(th, h);
    let cols = axis(tw, w);
    let src = img.data();
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = plane[r0 * w + c0] * (1.0 - fx) + plane[r0 * w + c1] * fx;
                let bot = plane[r1 * w + c0] * (1.0 - fx) + plane[r1 * w + c1] * fx;
                out[(ch * th + oi) * tw + oj] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::from_vec(vec![2], vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_vec(vec![2], vec![0.0, 3f64.ln()]), 0).unwrap();
        assert!(close(s.data()[0], 0.25, 1e-12) && close(s.data()[1], 0.75, 1e-12));
        assert!(matches!(
            softmax(&Tensor::zeros(vec![2, 2]), 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_vec(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3).collect());
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let total: f64 = (0..3).map(|k| s.get(&[o, k, i])).sum();
                assert!(close(total, 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::ones(vec![4]);
        let zero = Tensor::zeros(vec![4]);
        let y = layer_norm(&Tensor::full(vec![4], 3.0), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_vec(vec![2], vec![1.0, -1.0]);
        let y = layer_norm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), 1e-12).unwrap();
        assert!(close(y.data()[0], 1.0, 1e-9) && close(y.data()[1], -1.0, 1e-9));

        let y = layer_norm(
            &x,
            &Tensor::full(vec![2], 2.0),
            &Tensor::full(vec![2], 1.0),
            1e-12,
        )
        .unwrap();
        assert!(close(y.data()[0], 3.0, 1e-9) && close(y.data()[1], -1.0, 1e-9));

        assert!(layer_norm(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![2]), 1e-5).is_err());
    }

    #[test]
    fn elu_plus_one_examples() {
        assert_eq!(elu_plus_one_scalar(0.0), 1.0);
        assert_eq!(elu_plus_one_scalar(2.0), 3.0);
        assert!(close(elu_plus_one_scalar(-20.0), 2.061_153_622_438_558e-9, 1e-20));
    }

    #[test]
    fn softplus_inverse() {
        for y in [0.01, 0.25, 1.0, 5.0] {
            assert!(close(softplus_scalar(inverse_softplus_scalar(y)), y, 1e-12));
        }
    }

    #[test]
    fn matmul_matches_loops() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let ct = matmul_t(&b, &a, true, true).unwrap();
        assert_eq!(ct.data(), c.transpose2().unwrap().data());
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn grid_sample_center_is_corner_mean() {
        let f = Tensor::from_vec(vec![1, 2, 2], vec![1., 2., 3., 10.]);
        let s = grid_sample(&f, &Tensor::zeros(vec![1, 2])).unwrap();
        assert!(close(s.item(), 4.0, 1e-12));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::from_vec(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(resize_bilinear(&img, 2, 3).unwrap().data(), img.data());
        let c = resize_bilinear(&Tensor::full(vec![2, 9, 7], 0.3), 4, 5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn patch_grid_counts() {
        assert_eq!(grid_dims(36, 64, 8, 8).unwrap(), (4, 8));
        assert_eq!(grid_dims(36, 64, 8, 1).unwrap(), (29, 57));
        assert!(matches!(grid_dims(6, 64, 8, 1), Err(Error::Config(_))));
    }
}
