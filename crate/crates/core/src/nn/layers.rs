//! Per-item layer kernels. Activations are `[channels × height × width]`
//! row-major slices; convolutions go through im2col + GEMM.

use super::tensor::{gemm, Real};

/// Geometry of a 2-D convolution (cross-correlation). 1-D convolutions are
/// the `h == 1`, `kh == 1` case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    /// Stride-1 convolution with "same" padding (odd kernels).
    pub fn same(c_in: usize, c_out: usize, h: usize, w: usize, kh: usize, kw: usize) -> Self {
        Self {
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            sh: 1,
            sw: 1,
            ph: kh / 2,
            pw: kw / 2,
        }
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn valid(&self) -> bool {
        self.h + 2 * self.ph >= self.kh
            && self.w + 2 * self.pw >= self.kw
            && self.sh > 0
            && self.sw > 0
    }
}

/// Unfolds `x` (`c × h × w`) into `col` (`c·kh·kw × ho·wo`).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * sh + i) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * sw + j) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = W ⋆ x + b`. `weight` is `[c_out × c_in·kh·kw]`; `col` receives the
/// unfolded input for reuse in the backward pass.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: &[T],
    col: &mut Vec<T>,
) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    col.resize(g.col_rows() * ho * wo, T::zero());
    im2col(
        x, g.c_in, g.h, g.w, g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, ho, wo, col,
    );
    let mut y = vec![T::zero(); g.c_out * ho * wo];
    for (co, row) in y.chunks_mut(ho * wo).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    gemm(
        false,
        false,
        g.c_out,
        g.col_rows(),
        ho * wo,
        weight,
        col,
        T::one(),
        &mut y,
    );
    y
}

/// Accumulates parameter gradients and, if requested, returns `dL/dx`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    col: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    gemm(
        false,
        true,
        g.c_out,
        n,
        g.col_rows(),
        dy,
        col,
        T::one(),
        dweight,
    );
    for (co, row) in dy.chunks(n).enumerate() {
        dbias[co] += row.iter().copied().sum();
    }
    if !want_dx {
        return None;
    }
    let mut dcol = vec![T::zero(); g.col_rows() * n];
    gemm(
        true,
        false,
        g.col_rows(),
        g.c_out,
        n,
        weight,
        dy,
        T::zero(),
        &mut dcol,
    );
    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
    col2im(
        &dcol, g.c_in, g.h, g.w, g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, ho, wo, &mut dx,
    );
    Some(dx)
}

/// Geometry of a transposed convolution; `weight` is `[c_in × c_out·kh·kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oph: usize,
    pub opw: usize,
}

impl ConvTransposeGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.sh + self.kh + self.oph - 2 * self.ph
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.sw + self.kw + self.opw - 2 * self.pw
    }

    fn col_rows(&self) -> usize {
        self.c_out * self.kh * self.kw
    }
}

pub fn conv_transpose2d_forward<T: Real>(
    g: &ConvTransposeGeom,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = g.h * g.w;
    let mut col = vec![T::zero(); g.col_rows() * n];
    gemm(
        true,
        false,
        g.col_rows(),
        g.c_in,
        n,
        weight,
        x,
        T::zero(),
        &mut col,
    );
    let mut y = vec![T::zero(); g.c_out * ho * wo];
    col2im(
        &col, g.c_out, ho, wo, g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.h, g.w, &mut y,
    );
    for (co, plane) in y.chunks_mut(ho * wo).enumerate() {
        plane.iter_mut().for_each(|v| *v += bias[co]);
    }
    y
}

pub fn conv_transpose2d_backward<T: Real>(
    g: &ConvTransposeGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = g.h * g.w;
    for (co, plane) in dy.chunks(ho * wo).enumerate() {
        dbias[co] += plane.iter().copied().sum();
    }
    let mut dcol = vec![T::zero(); g.col_rows() * n];
    im2col(
        dy, g.c_out, ho, wo, g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.h, g.w, &mut dcol,
    );
    gemm(
        false,
        true,
        g.c_in,
        n,
        g.col_rows(),
        x,
        &dcol,
        T::one(),
        dweight,
    );
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); g.c_in * n];
    gemm(
        false,
        false,
        g.c_in,
        g.col_rows(),
        n,
        weight,
        &dcol,
        T::zero(),
        &mut dx,
    );
    Some(dx)
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Subgradient 0 at the kink: gradient passes only where the output is > 0.
pub fn relu_backward_inplace<T: Real>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Non-overlapping max pooling with floor semantics. Ties resolve to the
/// first element in row-major window order. Returns the pooled activations
/// and the flat argmax index of each output.
pub fn maxpool_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / kh, w / kw);
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * kh * w + ox * kw;
                for i in 0..kh {
                    for j in 0..kw {
                        let p = base + (oy * kh + i) * w + ox * kw + j;
                        if x[p] > x[best] {
                            best = p;
                        }
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward<T: Real>(dy: &[T], idx: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&d, &i) in dy.iter().zip(idx) {
        dx[i as usize] += d;
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &[T], c: usize, plane: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(plane).unwrap();
    x.chunks(plane)
        .take(c)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], plane: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(plane).unwrap();
    dy.iter()
        .flat_map(|&d| std::iter::repeat(d * inv).take(plane))
        .collect()
}

/// `y = W x + b`, `W` is `[out × in]`.
pub fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let out = bias.len();
    let mut y = bias.to_vec();
    gemm(false, false, out, x.len(), 1, weight, x, T::one(), &mut y);
    y
}

pub fn linear_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let (out, inp) = (dy.len(), x.len());
    gemm(false, false, out, 1, inp, dy, x, T::one(), dweight);
    for (b, &d) in dbias.iter_mut().zip(dy) {
        *b += d;
    }
    let mut dx = vec![T::zero(); inp];
    gemm(true, false, inp, out, 1, weight, dy, T::zero(), &mut dx);
    dx
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy on a logit, in log-space so saturated outputs stay
/// finite: `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logit<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Relative error between two gradient vectors, norm-wise.
    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    /// Central differences of `f` around `p`.
    fn numeric_grad(p: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
        let eps = 1e-3;
        let mut q = p.to_vec();
        (0..p.len())
            .map(|i| {
                q[i] = p[i] + eps;
                let up = f(&q);
                q[i] = p[i] - eps;
                let down = f(&q);
                q[i] = p[i];
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct six-loop convolution.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.c_out * ho * wo];
        for co in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (oy * g.sh + i) as isize - g.ph as isize;
                                let ix = (ox * g.sw + j) as isize - g.pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    acc += w[((co * g.c_in + ci) * g.kh + i) * g.kw + j]
                                        * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_identity_kernel_and_zero_input() {
        let g = ConvGeom::same(1, 1, 4, 5, 3, 3);
        let x: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let mut w = vec![0f32; 9];
        w[4] = 1.0;
        let mut col = Vec::new();
        assert_eq!(conv2d_forward(&g, &x, &w, &[0.0], &mut col), x);

        let g = ConvGeom::same(2, 3, 4, 4, 3, 3);
        let w = vec![0.7f32; 3 * 2 * 9];
        let y = conv2d_forward(&g, &[0f32; 32], &w, &[1.0, -2.0, 0.5], &mut col);
        assert!(y[..16].iter().all(|&v| v == 1.0));
        assert!(y[16..32].iter().all(|&v| v == -2.0));
        assert!(y[32..].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for g in [
            ConvGeom::same(2, 3, 5, 5, 3, 3),
            ConvGeom {
                sh: 2,
                sw: 2,
                ..ConvGeom::same(2, 3, 7, 6, 3, 3)
            },
            ConvGeom {
                sw: 2,
                ph: 0,
                pw: 4,
                ..ConvGeom::same(1, 4, 1, 33, 1, 9)
            },
        ] {
            let x = rand_vec(&mut rng, g.c_in * g.h * g.w);
            let w = rand_vec(&mut rng, g.c_out * g.col_rows());
            let b = rand_vec(&mut rng, g.c_out);
            let mut col = Vec::new();
            let fast = conv2d_forward(&g, &x, &w, &b, &mut col);
            let slow = naive_conv(&g, &x, &w, &b);
            let worst = fast
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-5, "{g:?}: {worst}");
        }
        // f32 path against the f64 oracle
        let g = ConvGeom::same(2, 3, 5, 5, 3, 3);
        let x = rand_vec(&mut rng, 50);
        let w = rand_vec(&mut rng, 54);
        let b = rand_vec(&mut rng, 3);
        let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
        let mut col = Vec::new();
        let fast = conv2d_forward(&g, &f(&x), &f(&w), &f(&b), &mut col);
        let slow = naive_conv(&g, &x, &w, &b);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeom {
                sh: 1 + (seed as usize % 2),
                ..ConvGeom::same(2, 3, 5, 6, 3, 3)
            };
            let x = rand_vec(&mut rng, g.c_in * g.h * g.w);
            let w = rand_vec(&mut rng, g.c_out * g.col_rows());
            let b = rand_vec(&mut rng, g.c_out);
            let r = rand_vec(&mut rng, g.c_out * g.out_h() * g.out_w());
            let mut col = Vec::new();
            conv2d_forward(&g, &x, &w, &b, &mut col);
            let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; b.len()]);
            let dx = conv2d_backward(&g, &col, &w, &r, &mut dw, &mut db, true).unwrap();
            let loss = |x: &[f64], w: &[f64], b: &[f64]| {
                let mut col = Vec::new();
                dot(&conv2d_forward(&g, x, w, b, &mut col), &r)
            };
            assert!(rel_err(&dx, &numeric_grad(&x, &mut |p| loss(p, &w, &b))) < 1e-3);
            assert!(rel_err(&dw, &numeric_grad(&w, &mut |p| loss(&x, p, &b))) < 1e-3);
            assert!(rel_err(&db, &numeric_grad(&b, &mut |p| loss(&x, &w, p))) < 1e-3);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // <conv(x), y> == <x, convT(y)> with shared weights, zero biases
        let g = ConvGeom {
            sw: 2,
            ph: 0,
            pw: 4,
            ..ConvGeom::same(3, 2, 1, 16, 1, 9)
        };
        let t = ConvTransposeGeom {
            c_in: 2,
            c_out: 3,
            h: 1,
            w: g.out_w(),
            kh: 1,
            kw: 9,
            sh: 1,
            sw: 2,
            ph: 0,
            pw: 4,
            oph: 0,
            opw: 1,
        };
        assert_eq!(t.out_w(), 16);
        let x = rand_vec(&mut rng, 3 * 16);
        let y = rand_vec(&mut rng, 2 * g.out_w());
        let w = rand_vec(&mut rng, 2 * 3 * 9);
        // conv weight [c_out=2][c_in=3][9] equals convT weight [c_in=2][c_out=3][9]
        let mut col = Vec::new();
        let lhs = dot(&conv2d_forward(&g, &x, &w, &[0.0; 2], &mut col), &y);
        let rhs = dot(&x, &conv_transpose2d_forward(&t, &y, &w, &[0.0; 3]));
        assert!((lhs - rhs).abs() < 1e-9);

        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = rand_vec(&mut rng, 2 * t.w);
            let w = rand_vec(&mut rng, 2 * 27);
            let b = rand_vec(&mut rng, 3);
            let r = rand_vec(&mut rng, 3 * 16);
            let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 3]);
            let dx = conv_transpose2d_backward(&t, &x, &w, &r, &mut dw, &mut db, true).unwrap();
            let loss =
                |x: &[f64], w: &[f64], b: &[f64]| dot(&conv_transpose2d_forward(&t, x, w, b), &r);
            assert!(rel_err(&dx, &numeric_grad(&x, &mut |p| loss(p, &w, &b))) < 1e-3);
            assert!(rel_err(&dw, &numeric_grad(&w, &mut |p| loss(&x, p, &b))) < 1e-3);
            assert!(rel_err(&db, &numeric_grad(&b, &mut |p| loss(&x, &w, p))) < 1e-3);
        }
    }

    #[test]
    fn pooling_relu_linear_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (2, 5, 6);
            let x = rand_vec(&mut rng, c * h * w);
            let r = rand_vec(&mut rng, c * 2 * 3);
            let (_, idx) = maxpool_forward(&x, c, h, w, 2, 2);
            let dx = maxpool_backward(&r, &idx, x.len());
            let num = numeric_grad(&x, &mut |p| dot(&maxpool_forward(p, c, h, w, 2, 2).0, &r));
            assert!(rel_err(&dx, &num) < 1e-3);

            let mut out = x.clone();
            relu_inplace(&mut out);
            let mut d = r.iter().cycle().take(x.len()).copied().collect::<Vec<_>>();
            let rr = d.clone();
            relu_backward_inplace(&out, &mut d);
            let num = numeric_grad(&x, &mut |p| {
                let mut o = p.to_vec();
                relu_inplace(&mut o);
                dot(&o, &rr)
            });
            assert!(rel_err(&d, &num) < 1e-3);

            let gap_r = rand_vec(&mut rng, c);
            let d = global_avg_pool_backward(&gap_r, h * w);
            let num = numeric_grad(&x, &mut |p| dot(&global_avg_pool(p, c, h * w), &gap_r));
            assert!(rel_err(&d, &num) < 1e-3);

            let xin = rand_vec(&mut rng, 7);
            let wt = rand_vec(&mut rng, 4 * 7);
            let b = rand_vec(&mut rng, 4);
            let rl = rand_vec(&mut rng, 4);
            let (mut dw, mut db) = (vec![0.0; 28], vec![0.0; 4]);
            let dx = linear_backward(&xin, &wt, &rl, &mut dw, &mut db);
            let l = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear_forward(x, w, b), &rl);
            assert!(rel_err(&dx, &numeric_grad(&xin, &mut |p| l(p, &wt, &b))) < 1e-3);
            assert!(rel_err(&dw, &numeric_grad(&wt, &mut |p| l(&xin, p, &b))) < 1e-3);
            assert!(rel_err(&db, &numeric_grad(&b, &mut |p| l(&xin, &wt, p))) < 1e-3);

            let z = rng.gen_range(-4.0..4.0);
            let y = (seed % 2) as f64;
            let num = numeric_grad(&[z], &mut |p| bce_with_logit(p[0], y))[0];
            assert!((num - (sigmoid(z) - y)).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_tie_takes_first_index() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (y, idx) = maxpool_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!((y[0], idx[0]), (1.0, 0));
        let (y, _) = maxpool_forward(&[0f32; 15], 1, 3, 5, 2, 2);
        assert_eq!(y.len(), 2);
    }

    #[test]
    fn bce_is_finite_when_saturated() {
        for p in [1e-7f64, 1.0 - 1e-7] {
            let z = (p / (1.0 - p)).ln();
            for y in [0.0, 1.0] {
                let l = bce_with_logit(z as f32, y as f32);
                assert!(l.is_finite());
                assert!((sigmoid(z as f32) - y as f32).is_finite());
            }
        }
        assert!(bce_with_logit(80.0f32, 0.0).is_finite());
        assert!(bce_with_logit(-80.0f32, 1.0).is_finite());
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
