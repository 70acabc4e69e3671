//! Per-operator forward and backward kernels.
//!
//! Convolutions go through im2col + GEMM, one image per task, spread over
//! the available cores. Parameter gradients are reduced in image order, so
//! results are bitwise reproducible for any thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use super::array::{Array4, Real};

/// Fills `col` (`cin*9` rows by `h*w` columns) from one `cin x h x w` image
/// with zero padding of one pixel.
fn im2col<T: Real>(img: &[T], cin: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into a `cin x h x w` image gradient.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] = dst[x - 1] + src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] = dst[x] + src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] = dst[x + 1] + src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps the worker threads of batch-parallel kernels; 0 means one per
/// available core.
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n, Ordering::Relaxed);
}

fn workers(n: usize) -> usize {
    static AVAILABLE: OnceLock<usize> = OnceLock::new();
    let t = match MAX_THREADS.load(Ordering::Relaxed) {
        0 => *AVAILABLE.get_or_init(|| std::thread::available_parallelism().map_or(1, |v| v.get())),
        cap => cap,
    };
    t.min(n).max(1)
}

/// Runs `f` on each of the `n` equal slices of `out` (one per image),
/// spreading contiguous runs of images over the worker threads. Each image
/// is computed independently, so the result never depends on the number of
/// threads.
fn per_image<T: Send>(out: &mut [T], n: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if n == 0 {
        return;
    }
    let len = out.len() / n;
    let threads = workers(n);
    if threads == 1 {
        for (b, chunk) in out.chunks_mut(len).enumerate() {
            f(b, chunk);
        }
        return;
    }
    let per = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, run) in out.chunks_mut(per * len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, chunk) in run.chunks_mut(len).enumerate() {
                    f(t * per + i, chunk);
                }
            });
        }
    });
}

/// 3x3 convolution, stride 1, padding 1. `weight` is `[cout, cin, 3, 3]`.
pub fn conv3x3_forward<T: Real>(x: &Array4<T>, weight: &[T], bias: &[T], cout: usize) -> Array4<T> {
    let [n, cin, h, w] = x.shape();
    let hw = h * w;
    let k = cin * 9;
    let mut out = Array4::zeros([n, cout, h, w]);
    per_image(out.data_mut(), n, |b, dst| {
        let mut col = vec![T::zero(); k * hw];
        im2col(x.image(b), cin, h, w, &mut col);
        for (co, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        T::gemm(
            cout,
            k,
            hw,
            T::one(),
            weight,
            k as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            dst,
            hw as isize,
            1,
        );
    });
    out
}

/// Backward of [`conv3x3_forward`]. Accumulates into `dweight`/`dbias` when
/// given and returns the input gradient when `want_input` is set.
///
/// Per-image weight gradients are computed separately and summed in image
/// order.
pub fn conv3x3_backward<T: Real>(
    x: &Array4<T>,
    weight: &[T],
    gout: &Array4<T>,
    dparams: Option<(&mut [T], &mut [T])>,
    want_input: bool,
) -> Option<Array4<T>> {
    let [n, cin, h, w] = x.shape();
    let cout = gout.channels();
    let hw = h * w;
    let k = cin * 9;
    let want_params = dparams.is_some();
    let wlen = if want_params { cout * k + cout } else { 0 };
    let xlen = if want_input { cin * hw } else { 0 };
    // per image: [dW | db | dx]
    let mut scratch = vec![T::zero(); n * (wlen + xlen)];
    per_image(&mut scratch, n, |b, buf| {
        let g = gout.image(b);
        let (dparam, dx) = buf.split_at_mut(wlen);
        let mut col = vec![T::zero(); k * hw];
        if want_params {
            let (dw, db) = dparam.split_at_mut(cout * k);
            im2col(x.image(b), cin, h, w, &mut col);
            // dW[co, k] = g[co, hw] * col[k, hw]^T
            T::gemm(
                cout,
                hw,
                k,
                T::one(),
                g,
                hw as isize,
                1,
                &col,
                1,
                hw as isize,
                T::zero(),
                dw,
                k as isize,
                1,
            );
            for (co, plane) in g.chunks(hw).enumerate() {
                db[co] = plane.iter().copied().sum::<T>();
            }
        }
        if want_input {
            // dcol[k, hw] = W[co, k]^T * g[co, hw]
            T::gemm(
                k,
                cout,
                hw,
                T::one(),
                weight,
                1,
                k as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut col,
                hw as isize,
                1,
            );
            col2im(&col, cin, h, w, dx);
        }
    });
    let per = wlen + xlen;
    if let Some((dw, db)) = dparams {
        for b in 0..n {
            let (pw, pb) = scratch[b * per..b * per + wlen].split_at(cout * k);
            for (a, v) in dw.iter_mut().zip(pw) {
                *a = *a + *v;
            }
            for (a, v) in db.iter_mut().zip(pb) {
                *a = *a + *v;
            }
        }
    }
    want_input.then(|| {
        let mut dx = Vec::with_capacity(n * xlen);
        for b in 0..n {
            dx.extend_from_slice(&scratch[b * per + wlen..(b + 1) * per]);
        }
        Array4::from_vec(x.shape(), dx)
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat in-plane index of the selected input. Ties resolve to
/// the first maximum in row-major window order.
pub fn maxpool2x2_forward<T: Real>(x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros([n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    let data = out.data_mut();
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    data[o] = plane[best];
                    idx[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2x2_backward<T: Real>(in_shape: [usize; 4], idx: &[u32], gout: &Array4<T>) -> Array4<T> {
    let mut gin = Array4::zeros(in_shape);
    let plane_in = in_shape[2] * in_shape[3];
    let plane_out = gout.plane_len();
    let g = gout.data();
    let dst = gin.data_mut();
    for (p, chunk) in g.chunks(plane_out).enumerate() {
        let base = p * plane_in;
        let ids = &idx[p * plane_out..(p + 1) * plane_out];
        for (&v, &i) in chunk.iter().zip(ids) {
            let t = base + i as usize;
            dst[t] = dst[t] + v;
        }
    }
    gin
}

/// Places each input value at its recorded argmax position inside a zeroed
/// map of `out_shape`.
pub fn maxunpool2x2_forward<T: Real>(x: &Array4<T>, idx: &[u32], out_shape: [usize; 4]) -> Array4<T> {
    let mut out = Array4::zeros(out_shape);
    let plane_out = out_shape[2] * out_shape[3];
    let plane_in = x.plane_len();
    let dst = out.data_mut();
    for (p, chunk) in x.data().chunks(plane_in).enumerate() {
        let base = p * plane_out;
        let ids = &idx[p * plane_in..(p + 1) * plane_in];
        for (&v, &i) in chunk.iter().zip(ids) {
            dst[base + i as usize] = v;
        }
    }
    out
}

pub fn maxunpool2x2_backward<T: Real>(in_shape: [usize; 4], idx: &[u32], gout: &Array4<T>) -> Array4<T> {
    let mut gin = Array4::zeros(in_shape);
    let plane_in = in_shape[2] * in_shape[3];
    let plane_out = gout.plane_len();
    let dst = gin.data_mut();
    for (p, chunk) in dst.chunks_mut(plane_in).enumerate() {
        let g = gout.data()[p * plane_out..].as_ref();
        let ids = &idx[p * plane_in..(p + 1) * plane_in];
        for (d, &i) in chunk.iter_mut().zip(ids) {
            *d = g[i as usize];
        }
    }
    gin
}

/// Channel-axis softmax, max-shifted.
pub fn softmax_forward<T: Real>(x: &Array4<T>) -> Array4<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Array4::zeros([n, c, h, w]);
    let mut mx = vec![T::zero(); hw];
    let mut sum = vec![T::zero(); hw];
    for b in 0..n {
        let src = x.image(b);
        let dst = out.image_mut(b);
        mx.copy_from_slice(&src[..hw]);
        for ch in 1..c {
            for (m, &v) in mx.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        sum.fill(T::zero());
        for ch in 0..c {
            let s = &src[ch * hw..(ch + 1) * hw];
            let d = &mut dst[ch * hw..(ch + 1) * hw];
            for p in 0..hw {
                let e = (s[p] - mx[p]).exp();
                d[p] = e;
                sum[p] = sum[p] + e;
            }
        }
        for ch in 0..c {
            let d = &mut dst[ch * hw..(ch + 1) * hw];
            for p in 0..hw {
                d[p] = d[p] / sum[p];
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(s: &Array4<T>, gout: &Array4<T>) -> Array4<T> {
    let [n, c, h, w] = s.shape();
    let hw = h * w;
    let mut gin = Array4::zeros(s.shape());
    let mut dot = vec![T::zero(); hw];
    for b in 0..n {
        let sv = s.image(b);
        let gv = gout.image(b);
        dot.fill(T::zero());
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                dot[p] = dot[p] + sv[i] * gv[i];
            }
        }
        let dst = gin.image_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                dst[i] = sv[i] * (gv[i] - dot[p]);
            }
        }
    }
    gin
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Concatenates along the channel axis.
pub fn concat_forward<T: Real>(parts: &[&Array4<T>]) -> Array4<T> {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Array4::zeros([n, c, h, w]);
    for b in 0..n {
        let dst = out.image_mut(b);
        let mut off = 0;
        for p in parts {
            let src = p.image(b);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    out
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn concat_backward<T: Real>(shapes: &[[usize; 4]], gout: &Array4<T>) -> Vec<Array4<T>> {
    let n = gout.batch();
    let mut outs: Vec<Array4<T>> = shapes.iter().map(|&s| Array4::zeros(s)).collect();
    for b in 0..n {
        let src = gout.image(b);
        let mut off = 0;
        for o in outs.iter_mut() {
            let dst = o.image_mut(b);
            let len = dst.len();
            dst.copy_from_slice(&src[off..off + len]);
            off += len;
        }
    }
    outs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let cin = 2;
        let x = Array4::<f32>::from_vec([1, cin, 3, 4], (0..24).map(|v| v as f32 * 0.5 - 3.0).collect());
        let mut w = vec![0.0f32; cin * cin * 9];
        for c in 0..cin {
            w[(c * cin + c) * 9 + 4] = 1.0;
        }
        let y = conv3x3_forward(&x, &w, &[0.0, 0.0], cin);
        assert_eq!(y, x);
    }

    #[test]
    fn pool_unpool_single_window() {
        let x = Array4::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (p, idx) = maxpool2x2_forward(&x);
        assert_eq!(p.data(), &[4.0]);
        let u = maxunpool2x2_forward(&p, &idx, x.shape());
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn pool_tie_takes_first() {
        let x = Array4::<f32>::from_vec([1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let (_, idx) = maxpool2x2_forward(&x);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn shifted_kernel_moves_pixels() {
        // Kernel tap at (ky=1, kx=2) reads the right neighbour.
        let x = Array4::<f64>::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut w = vec![0.0; 9];
        w[5] = 1.0;
        let y = conv3x3_forward(&x, &w, &[0.0], 1);
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 0.0]);
    }
}
