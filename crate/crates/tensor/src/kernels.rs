//! Typed compute kernels. Everything here works on plain slices; graph
//! recording lives in the `ops` modules.

use crate::dtype::Element;

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (left-padded, zero on broadcast dims).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < pad || shape[d - pad] == 1 {
                0
            } else {
                own[d - pad]
            }
        })
        .collect()
}

/// Merges adjacent dims that are laid out contiguously in both operands, so
/// the innermost loop runs as long as possible.
fn collapse(out: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut o, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..out.len() {
        if out[d] == 1 {
            continue;
        }
        if let (Some(&lo), Some(&la), Some(&lb)) = (o.last(), a.last(), b.last()) {
            if la == sa[d] * out[d] && lb == sb[d] * out[d] {
                let k = o.len() - 1;
                o[k] = lo * out[d];
                a[k] = sa[d];
                b[k] = sb[d];
                continue;
            }
        }
        o.push(out[d]);
        a.push(sa[d]);
        b.push(sb[d]);
    }
    (o, a, b)
}

/// Visits rows of the collapsed iteration space in row-major order as
/// `(offset_a, offset_b, len, stride_a, stride_b)`.
fn for_each_row(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (out, sa, sb) = collapse(out, sa, sb);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 1, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..outer {
        f(oa, ob, inner, ia, ib);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary<T: Element>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let n: usize = out.iter().product();
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut res = Vec::with_capacity(n);
    for_each_row(out, &sa, &sb, |oa, ob, len, ia, ib| match (ia, ib) {
        (1, 1) => res.extend(a[oa..oa + len].iter().zip(&b[ob..ob + len]).map(|(&x, &y)| f(x, y))),
        (1, 0) => {
            let y = b[ob];
            res.extend(a[oa..oa + len].iter().map(|&x| f(x, y)));
        }
        (0, 1) => {
            let x = a[oa];
            res.extend(b[ob..ob + len].iter().map(|&y| f(x, y)));
        }
        _ => res.extend((0..len).map(|i| f(a[oa + i * ia], b[ob + i * ib]))),
    });
    res
}

pub(crate) fn expand<T: Element>(a: &[T], ash: &[usize], out: &[usize]) -> Vec<T> {
    let n: usize = out.iter().product();
    if a.len() == 1 {
        return vec![a[0]; n];
    }
    let sa = broadcast_strides(ash, out);
    let zeros = vec![0; out.len()];
    let mut res = Vec::with_capacity(n);
    for_each_row(out, &sa, &zeros, |oa, _, len, ia, _| match ia {
        0 => res.extend(std::iter::repeat(a[oa]).take(len)),
        1 => res.extend_from_slice(&a[oa..oa + len]),
        _ => res.extend((0..len).map(|i| a[oa + i * ia])),
    });
    res
}

/// Sums `x` over the flagged axes, keeping them as size-1 dims. Each output
/// accumulates its inputs in increasing flat-index order.
pub(crate) fn reduce_sum<T: Element>(x: &[T], shape: &[usize], reduce: &[bool]) -> Vec<T> {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(reduce)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let n_out: usize = out_shape.iter().product();
    if n_out == 1 {
        let mut acc = T::zero();
        for &v in x {
            acc = acc + v;
        }
        return vec![acc];
    }
    let rank = shape.len();
    // trailing axes reduced, leading kept: contiguous row sums
    if let Some(split) = (0..=rank).find(|&s| reduce[s..].iter().all(|&r| r) && reduce[..s].iter().all(|&r| !r)) {
        let inner: usize = shape[split..].iter().product();
        return x
            .chunks(inner.max(1))
            .map(|row| {
                let mut acc = T::zero();
                for &v in row {
                    acc = acc + v;
                }
                acc
            })
            .collect();
    }
    let so = broadcast_strides(&out_shape, shape);
    let zeros = vec![0; rank];
    let mut res = vec![T::zero(); n_out];
    let mut i = 0;
    for_each_row(shape, &so, &zeros, |oo, _, len, io, _| {
        let src = &x[i..i + len];
        if io == 1 {
            for (r, &v) in res[oo..oo + len].iter_mut().zip(src) {
                *r = *r + v;
            }
        } else {
            for (j, &v) in src.iter().enumerate() {
                res[oo + j * io] = res[oo + j * io] + v;
            }
        }
        i += len;
    });
    res
}

pub(crate) fn max_last_axis<T: Element>(x: &[T], inner: usize) -> Vec<T> {
    x.chunks(inner)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect()
}

/// `op(a) · op(b)` where `op` optionally transposes; `a` is stored `[m,k]`
/// (or `[k,m]` when `ta`), `b` is stored `[k,n]` (or `[n,k]` when `tb`).
pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    if m == 0 || n == 0 || k == 0 {
        return vec![T::zero(); m * n];
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let mut c = Vec::new();
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, &mut c);
    c
}

/// Patch geometry for channel-last images `[N, H, W, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    /// Kernel columns `[lo, hi)` that land inside the image for output column `ox`.
    fn valid_kx(&self, ox: usize) -> (usize, usize) {
        let left = ox * self.stride;
        let lo = self.pad.saturating_sub(left);
        let hi = (self.width + self.pad).saturating_sub(left).min(self.kernel);
        (lo, hi)
    }
}

/// Unfolds patches into rows `[N*OH*OW, k*k*C]`, column order (ky, kx, c).
pub(crate) fn im2col<T: Element>(x: &[T], g: &PatchGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let c = g.channels;
    let row_len = g.kernel * c;
    let mut out = Vec::with_capacity(g.rows() * g.cols());
    let zeros = vec![T::zero(); row_len];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                // consecutive kx read consecutive pixels, so each kernel row
                // is zeros, one contiguous copy, zeros
                let (kx0, kx1) = g.valid_kx(ox);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || kx0 >= kx1 {
                        out.extend_from_slice(&zeros);
                        continue;
                    }
                    let ix = ox * g.stride + kx0 - g.pad;
                    let src = ((n * g.height + iy as usize) * g.width + ix) * c;
                    out.extend_from_slice(&zeros[..kx0 * c]);
                    out.extend_from_slice(&x[src..src + (kx1 - kx0) * c]);
                    out.extend_from_slice(&zeros[..(g.kernel - kx1) * c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds rows back into the image.
pub(crate) fn col2im<T: Element>(cols_data: &[T], g: &PatchGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let c = g.channels;
    let cols = g.cols();
    let mut out = vec![T::zero(); g.image_len()];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * cols;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let (kx0, kx1) = g.valid_kx(ox);
                    if kx0 >= kx1 {
                        continue;
                    }
                    let ix = ox * g.stride + kx0 - g.pad;
                    let dst = ((n * g.height + iy as usize) * g.width + ix) * c;
                    let src = row + (ky * g.kernel + kx0) * c;
                    let len = (kx1 - kx0) * c;
                    for (o, &v) in out[dst..dst + len].iter_mut().zip(&cols_data[src..src + len]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
    out
}

/// Sums non-overlapping 2×2 windows of `[N, H, W, C]`.
pub(crate) fn sum_pool2<T: Element>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * oh + oy) * ow + ox) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                    for j in 0..c {
                        out[dst + j] = out[dst + j] + x[src + j];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling of `[N, H, W, C]`; adjoint of [`sum_pool2`].
pub(crate) fn upsample2<T: Element>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * h + y / 2) * w + xx / 2) * c;
                let dst = ((b * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Bilinear taps for a source position: four (offset-in-image, weight) pairs,
/// with `None` for taps outside the image (zero padding).
fn bilinear_taps<T: Element>(x: T, y: T, h: usize, w: usize) -> [(Option<usize>, T); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = x - x0;
    let wy = y - y0;
    let one = T::one();
    let xi = x0.to_isize().unwrap_or(isize::MIN / 2);
    let yi = y0.to_isize().unwrap_or(isize::MIN / 2);
    let at = |yy: isize, xx: isize| -> Option<usize> {
        (yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize).then(|| yy as usize * w + xx as usize)
    };
    [
        (at(yi, xi), (one - wx) * (one - wy)),
        (at(yi, xi + 1), wx * (one - wy)),
        (at(yi + 1, xi), (one - wx) * wy),
        (at(yi + 1, xi + 1), wx * wy),
    ]
}

/// Samples `[N, H, W, C]` at the shared pixel-coordinate grid `[OH, OW, 2]`
/// holding (x, y) pairs.
pub(crate) fn grid_sample<T: Element>(img: &[T], grid: &[T], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * oh * ow * c];
    for p in 0..oh * ow {
        let taps = bilinear_taps(grid[2 * p], grid[2 * p + 1], h, w);
        for b in 0..n {
            let dst = (b * oh * ow + p) * c;
            for (pos, wt) in taps.iter() {
                if let Some(pos) = pos {
                    if *wt == T::zero() {
                        continue;
                    }
                    let src = (b * h * w + pos) * c;
                    for j in 0..c {
                        out[dst + j] = out[dst + j] + *wt * img[src + j];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`grid_sample`] with respect to the image.
pub(crate) fn grid_sample_adjoint<T: Element>(g: &[T], grid: &[T], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * h * w * c];
    for p in 0..oh * ow {
        let taps = bilinear_taps(grid[2 * p], grid[2 * p + 1], h, w);
        for b in 0..n {
            let src = (b * oh * ow + p) * c;
            for (pos, wt) in taps.iter() {
                if let Some(pos) = pos {
                    if *wt == T::zero() {
                        continue;
                    }
                    let dst = (b * h * w + pos) * c;
                    for j in 0..c {
                        out[dst + j] = out[dst + j] + *wt * g[src + j];
                    }
                }
            }
        }
    }
    out
}

/// d(loss)/d(grid) for [`grid_sample`], summed over the batch.
pub(crate) fn grid_sample_grid_grad<T: Element>(g: &[T], img: &[T], grid: &[T], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); oh * ow * 2];
    let one = T::one();
    for p in 0..oh * ow {
        let x = grid[2 * p];
        let y = grid[2 * p + 1];
        let wx = x - x.floor();
        let wy = y - y.floor();
        let taps = bilinear_taps(x, y, h, w);
        // d weight / dx and d weight / dy for the four taps
        let dwx = [-(one - wy), one - wy, -wy, wy];
        let dwy = [-(one - wx), -wx, one - wx, wx];
        let mut gx = T::zero();
        let mut gy = T::zero();
        for b in 0..n {
            let go = (b * oh * ow + p) * c;
            for (t, (pos, _)) in taps.iter().enumerate() {
                if let Some(pos) = pos {
                    let src = (b * h * w + pos) * c;
                    for j in 0..c {
                        let prod = g[go + j] * img[src + j];
                        gx = gx + dwx[t] * prod;
                        gy = gy + dwy[t] * prod;
                    }
                }
            }
        }
        out[2 * p] = gx;
        out[2 * p + 1] = gy;
    }
    out
}

/// Views `shape` as (outer, axis, inner) around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn narrow<T: Element>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Places `x` (narrowed along `axis`) into a zero tensor of length `full`.
pub(crate) fn pad_narrow<T: Element>(x: &[T], shape: &[usize], axis: usize, start: usize, full: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub(crate) fn index_select_rows<T: Element>(x: &[T], row_len: usize, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * row_len);
    for &i in indices {
        out.extend_from_slice(&x[i * row_len..(i + 1) * row_len]);
    }
    out
}

pub(crate) fn index_add_rows<T: Element>(g: &[T], row_len: usize, indices: &[usize], rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * row_len];
    for (k, &i) in indices.iter().enumerate() {
        for j in 0..row_len {
            out[i * row_len + j] = out[i * row_len + j] + g[k * row_len + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
        let mut idx = vec![0; shape.len()];
        for d in (0..shape.len()).rev() {
            idx[d] = i % shape[d];
            i /= shape[d];
        }
        idx
    }

    fn offset(idx: &[usize], shape: &[usize]) -> usize {
        let pad = idx.len() - shape.len();
        shape.iter().enumerate().fold(0, |o, (d, &s)| o * s + if s == 1 { 0 } else { idx[d + pad] })
    }

    #[test]
    fn broadcast_kernels_match_indexing() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3, 4, 5], &[2, 1, 1, 5]),
            (&[2, 3, 4, 5], &[1, 3, 1, 1]),
            (&[2, 1, 4, 1], &[1, 3, 1, 5]),
            (&[2, 3, 4, 5], &[4, 5]),
            (&[2, 3, 4, 5], &[3, 1, 1]),
            (&[3, 1], &[1, 4]),
            (&[1, 1, 6], &[5, 1, 6]),
        ];
        for &(ash, bsh) in cases {
            let out = broadcast_shape(ash, bsh).unwrap();
            let a: Vec<f64> = (0..ash.iter().product::<usize>()).map(|v| v as f64).collect();
            let b: Vec<f64> = (0..bsh.iter().product::<usize>()).map(|v| 1000.0 * v as f64).collect();
            let got = binary(&a, ash, &b, bsh, &out, |p, q| p + q);
            let n: usize = out.iter().product();
            for i in 0..n {
                let idx = unravel(i, &out);
                assert_eq!(got[i], a[offset(&idx, ash)] + b[offset(&idx, bsh)], "{ash:?} {bsh:?} at {i}");
            }
            let e = expand(&b, bsh, &out);
            for i in 0..n {
                assert_eq!(e[i], b[offset(&unravel(i, &out), bsh)]);
            }
            for mask in 0..1usize << out.len() {
                let reduce: Vec<bool> = (0..out.len()).map(|d| mask >> d & 1 == 1).collect();
                let shape: Vec<usize> = out.iter().zip(&reduce).map(|(&s, &r)| if r { 1 } else { s }).collect();
                let r = reduce_sum(&got, &out, &reduce);
                let mut want = vec![0.0; shape.iter().product()];
                for i in 0..n {
                    want[offset(&unravel(i, &out), &shape)] += got[i];
                }
                assert_eq!(r, want, "reduce {out:?} {reduce:?}");
            }
        }
    }
}
