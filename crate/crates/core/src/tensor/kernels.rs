//! Raw forward/backward loops behind the graph operations.

use super::Real;

/// Calls `f(full_index, small_index)` for every element of `full`, where
/// `small` broadcasts into `full` (each small extent equals the full one or is 1).
pub(crate) fn for_each_broadcast(full: [usize; 4], small: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for ax in (0..4).rev() {
        strides[ax] = if small[ax] == 1 { 0 } else { acc };
        acc *= small[ax];
    }
    let mut i = 0;
    for a in 0..full[0] {
        let sa = a * strides[0];
        for b in 0..full[1] {
            let sb = sa + b * strides[1];
            for c in 0..full[2] {
                let sc = sb + c * strides[2];
                if strides[3] == 1 {
                    for d in 0..full[3] {
                        f(i, sc + d);
                        i += 1;
                    }
                } else {
                    for _ in 0..full[3] {
                        f(i, sc);
                        i += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn broadcastable(full: &[usize], small: &[usize]) -> bool {
    full.len() == small.len() && full.iter().zip(small).all(|(&f, &s)| s == f || s == 1)
}

/// Sums `full`-shaped values down into the broadcast shape `small`.
pub(crate) fn reduce_into<T: Real>(values: &[T], full: [usize; 4], small: [usize; 4], out: &mut [T]) {
    for_each_broadcast(full, small, |i, j| out[j] += values[i]);
}

pub(crate) struct PoolResult<T> {
    pub out: Vec<T>,
    pub argmax: Vec<usize>,
}

/// 2×2 stride-2 max pooling. Ties resolve to the first element in scan order.
pub(crate) fn maxpool2<T: Real>(x: &[T], [n, c, h, w]: [usize; 4]) -> PoolResult<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    PoolResult { out, argmax }
}

/// Source index pair and interpolation weight for one output coordinate of a
/// ×2 corner-aligned bilinear upsample.
fn upsample_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    let out = 2 * extent;
    (0..out)
        .map(|o| {
            if extent == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (extent - 1) as f64 / (out - 1) as f64;
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// ×2 bilinear upsampling with `align_corners = true`: output corners coincide
/// with input corners and interior samples are spaced `(H-1)/(2H-1)` apart.
pub(crate) fn upsample_bilinear2<T: Real>(x: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear2_backward<T: Real>(dy: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                d[y0 * w + x1] += v * (T::one() - fy) * fx;
                d[y1 * w + x0] += v * fy * (T::one() - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Softmax over the channel axis at every `(n, h, w)` position.
pub(crate) fn softmax_channel<T: Real>(x: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(x[base + k * hw + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[base + k * hw + p] - m).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] = out[base + k * hw + p] / z;
            }
        }
    }
    out
}

pub(crate) fn softmax_channel_backward<T: Real>(y: &[T], dy: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let hw = h * w;
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for k in 0..c {
                dot += y[base + k * hw + p] * dy[base + k * hw + p];
            }
            for k in 0..c {
                let i = base + k * hw + p;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    dx
}

/// Splits a tensor shape into `(outer, axis extent, inner)` around `axis`.
pub(crate) fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_tie_goes_to_first() {
        let r = maxpool2(&[5.0f64; 4], [1, 1, 2, 2]);
        assert_eq!(r.out, vec![5.0]);
        assert_eq!(r.argmax, vec![0]);
        let r = maxpool2(&[1.0f64, 2.0, 3.0, 4.0], [1, 1, 2, 2]);
        assert_eq!((r.out[0], r.argmax[0]), (4.0, 3));
    }

    #[test]
    fn upsample_keeps_corners() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let y = upsample_bilinear2(&x, [1, 1, 2, 2]);
        assert_eq!(y[0], 1.0);
        assert_eq!(y[3], 2.0);
        assert_eq!(y[12], 3.0);
        assert_eq!(y[15], 4.0);
    }

    #[test]
    fn broadcast_visits_rows() {
        let mut seen = Vec::new();
        for_each_broadcast([1, 1, 2, 3], [1, 1, 2, 1], |i, j| seen.push((i, j)));
        assert_eq!(seen, vec![(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)]);
    }
}
