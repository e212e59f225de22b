//! 2D cross-correlation: a direct reference form and the im2col/GEMM path the
//! graph uses. The direct form defines correctness.

use super::{Real, Tensor};

/// Output extent of a convolution, or `None` when the kernel does not fit.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Direct nested-loop cross-correlation. Slow; used as the reference the
/// fast path is tested against.
pub fn conv2d_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let [n, cin, h, w] = input.dims4();
    let [cout, _, kh, kw] = weight.dims4();
    let ho = conv2d_output_extent(h, kh, stride, padding).expect("kernel fits");
    let wo = conv2d_output_extent(w, kw, stride, padding).expect("kernel fits");
    let x = input.data();
    let k = weight.data();
    let mut out = vec![T::zero(); n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let b0 = bias.map_or(T::zero(), |t| t.data()[co]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((co * cin + ci) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_parts_unchecked(vec![n, cout, ho, wo], out)
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new(input: &[usize; 4], weight: &[usize; 4], stride: usize, padding: usize) -> Self {
        let [_, cin, h, w] = *input;
        let [_, _, kh, kw] = *weight;
        Self {
            cin,
            h,
            w,
            kh,
            kw,
            ho: conv2d_output_extent(h, kh, stride, padding).expect("kernel fits"),
            wo: conv2d_output_extent(w, kw, stride, padding).expect("kernel fits"),
            stride,
            padding,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-column range `[lo, hi)` for kernel column `j`.
    #[inline]
    fn ox_range(&self, j: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.padding);
        let lo = if pad > j { (pad - j).div_ceil(s) } else { 0 };
        let hi = if self.w + pad > j { ((self.w + pad - j - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Calls `f(dst, src, lo, hi)` for every output row of every column-matrix
    /// row. `src` is `None` when the whole row falls in vertical padding;
    /// otherwise output column `ox ∈ [lo, hi)` reads image index `src + ox * stride`.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, Option<usize>, usize, usize)) {
        let p = self.cols();
        for ci in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let (lo, hi) = self.ox_range(j);
                    for oy in 0..self.ho {
                        let dst = row * p + oy * self.wo;
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            f(dst, None, lo, hi);
                            continue;
                        }
                        // may wrap below zero; every in-range ox brings it back
                        let src = ((ci * self.h + iy as usize) * self.w + j).wrapping_sub(self.padding);
                        f(dst, Some(src), lo, hi);
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (s, wo) = (self.stride, self.wo);
        self.for_each_segment(|dst, src, lo, hi| {
            let row = &mut cols[dst..dst + wo];
            let Some(src) = src else {
                row.fill(T::zero());
                return;
            };
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if s == 1 {
                let base = src.wrapping_add(lo);
                row[lo..hi].copy_from_slice(&image[base..base + (hi - lo)]);
            } else {
                for ox in lo..hi {
                    row[ox] = image[src.wrapping_add(ox * s)];
                }
            }
        });
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let s = self.stride;
        self.for_each_segment(|dst, src, lo, hi| {
            let Some(src) = src else { return };
            if s == 1 {
                let base = src.wrapping_add(lo);
                for (o, c) in image[base..base + (hi - lo)].iter_mut().zip(&cols[dst + lo..dst + hi]) {
                    *o += *c;
                }
            } else {
                for ox in lo..hi {
                    image[src.wrapping_add(ox * s)] += cols[dst + ox];
                }
            }
        });
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let xd = input.dims4();
    let wd = weight.dims4();
    let g = Geometry::new(&xd, &wd, stride, padding);
    let (n, cout) = (xd[0], wd[0]);
    let (k, p) = (g.rows(), g.cols());
    let in_stride = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let image = &input.data()[b * in_stride..(b + 1) * in_stride];
        let rhs: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        let dst = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        T::gemm(
            cout,
            k,
            p,
            weight.data(),
            (k as isize, 1),
            rhs,
            (p as isize, 1),
            if bias.is_some() { T::one() } else { T::zero() },
            dst,
            (p as isize, 1),
        );
    }
    Tensor::from_parts_unchecked(vec![n, cout, g.ho, g.wo], out)
}

/// Gradients `(d_input, d_weight, d_bias)` of a convolution given the upstream gradient.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    upstream: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let xd = input.dims4();
    let wd = weight.dims4();
    let g = Geometry::new(&xd, &wd, stride, padding);
    let (n, cout) = (xd[0], wd[0]);
    let (k, p) = (g.rows(), g.cols());
    let in_stride = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); if with_bias { cout } else { 0 }];
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for b in 0..n {
        let image = &input.data()[b * in_stride..(b + 1) * in_stride];
        let dy = &upstream.data()[b * cout * p..(b + 1) * cout * p];
        if with_bias {
            for (co, row) in dy.chunks(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        let rhs: &[T] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(cout, p, k, dy, (p as isize, 1), rhs, (1, p as isize), T::one(), &mut dw, (k as isize, 1));
        let dimage = &mut dx[b * in_stride..(b + 1) * in_stride];
        if g.is_pointwise() {
            // dX = Wᵀ · dY written straight into the image
            T::gemm(k, cout, p, weight.data(), (1, k as isize), dy, (p as isize, 1), T::zero(), dimage, (p as isize, 1));
        } else {
            T::gemm(k, cout, p, weight.data(), (1, k as isize), dy, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
            g.col2im(&dcols, dimage);
        }
    }
    (
        Tensor::from_parts_unchecked(input.dims().to_vec(), dx),
        Tensor::from_parts_unchecked(weight.dims().to_vec(), dw),
        with_bias.then(|| Tensor::from_parts_unchecked(vec![cout], db)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn fast_path_matches_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding, k) in &[(1, 1, 3), (2, 0, 3), (1, 0, 1), (2, 1, 3), (1, 2, 5)] {
            let x = random(&[2, 3, 9, 8], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b), stride, padding);
            let direct = conv2d_direct(&x, &w, Some(&b), stride, padding);
            assert_eq!(fast.dims(), direct.dims());
            assert!(fast.max_abs_diff(&direct) < 1e-12);
        }
    }

    #[test]
    fn output_extent_floors() {
        assert_eq!(conv2d_output_extent(8, 3, 2, 1), Some(4));
        assert_eq!(conv2d_output_extent(7, 3, 2, 0), Some(3));
        assert_eq!(conv2d_output_extent(2, 5, 1, 1), None);
    }
}
