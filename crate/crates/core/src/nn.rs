//! Layer kernels with explicit forward and backward passes.
//!
//! Activations are batch-major NHWC slices. Convolutions are 3x3 with one
//! pixel of zero padding, kernel layout `(ky, kx, cin, cout)`. They run as
//! chunked im2col + GEMM so the column buffer stays cache-sized; the column
//! block is rebuilt in the backward pass instead of being stored. A 2x
//! nearest-neighbor upsample followed by a 3x3 convolution is evaluated as
//! four 2x2 convolutions on the low-resolution input, one per output phase.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

pub const KERNEL: usize = 3;

/// Output channel counts up to this use dot-product kernels instead of GEMM.
const NARROW_COUT: usize = 8;

/// Source index of a tap that falls in the zero padding.
const PAD: usize = usize::MAX;

/// Target element count of one column block.
const CHUNK_ELEMS: usize = 1 << 15;

/// Recycled activation buffers. Training repeats the same shapes every step,
/// so handing buffers back here avoids re-faulting fresh pages each time.
#[derive(Debug, Default)]
pub struct BufferPool<T> {
    free: Vec<Vec<T>>,
}

impl<T: Scalar> BufferPool<T> {
    pub fn new() -> Self {
        Self { free: Vec::new() }
    }

    /// A zero-filled buffer of `len` elements, reusing the smallest free
    /// buffer that fits.
    pub fn take(&mut self, len: usize) -> Vec<T> {
        let fit = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        let mut v = match fit {
            Some(i) => self.free.swap_remove(i),
            None => self.free.pop().unwrap_or_default(),
        };
        v.clear();
        v.resize(len, T::zero());
        v
    }

    pub fn put(&mut self, v: Vec<T>) {
        if v.capacity() > 0 {
            self.free.push(v);
        }
    }

    pub fn put_all(&mut self, vs: impl IntoIterator<Item = Vec<T>>) {
        for v in vs {
            self.put(v);
        }
    }
}

/// 3x3 convolution, optionally preceded by a 2x nearest-neighbor upsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub upsample: bool,
}

/// Input and output geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Kernel taps along one axis: source offsets relative to `grid * stride`
/// and the range of original kernel indices folded into each tap.
#[derive(Debug, Clone, Copy)]
struct Taps {
    len: usize,
    offset: [isize; 3],
    fold: [(usize, usize); 3],
}

const PLAIN_TAPS: Taps = Taps { len: 3, offset: [-1, 0, 1], fold: [(0, 1), (1, 2), (2, 3)] };
/// Upsampled rows `2g-1, 2g, 2g+1` read low-res rows `g-1, g, g`.
const EVEN_TAPS: Taps = Taps { len: 2, offset: [-1, 0, 0], fold: [(0, 1), (1, 3), (0, 0)] };
/// Upsampled rows `2g, 2g+1, 2g+2` read low-res rows `g, g, g+1`.
const ODD_TAPS: Taps = Taps { len: 2, offset: [0, 1, 0], fold: [(0, 2), (2, 3), (0, 0)] };

/// One GEMM pass: a tap set evaluated on a grid whose points map to output
/// pixels `(grid * scale + phase)`.
#[derive(Debug, Clone, Copy)]
struct Pass {
    ty: Taps,
    tx: Taps,
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    scale: usize,
    phase_y: usize,
    phase_x: usize,
}

impl Pass {
    fn taps(&self) -> usize {
        self.ty.len * self.tx.len
    }

    fn rows(&self, batch: usize) -> usize {
        batch * self.grid_h * self.grid_w
    }

    /// Output pixel index of grid row `q`.
    #[inline]
    fn out_row(&self, q: usize, s: &ConvShape) -> usize {
        let gx = q % self.grid_w;
        let rest = q / self.grid_w;
        let gy = rest % self.grid_h;
        let n = rest / self.grid_h;
        (n * s.out_h + gy * self.scale + self.phase_y) * s.out_w + gx * self.scale + self.phase_x
    }
}

impl Conv2d {
    pub const fn new(cin: usize, cout: usize, stride: usize) -> Self {
        Self { cin, cout, stride, upsample: false }
    }

    pub const fn upsampling(cin: usize, cout: usize) -> Self {
        Self { cin, cout, stride: 1, upsample: true }
    }

    pub fn weight_len(&self) -> usize {
        KERNEL * KERNEL * self.cin * self.cout
    }

    pub fn fan_in(&self) -> usize {
        KERNEL * KERNEL * self.cin
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.upsample {
            (2 * h, 2 * w)
        } else {
            ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
        }
    }

    pub fn shape(&self, batch: usize, h: usize, w: usize) -> ConvShape {
        let (out_h, out_w) = self.out_dims(h, w);
        ConvShape { batch, in_h: h, in_w: w, out_h, out_w }
    }

    fn passes(&self, s: &ConvShape) -> Vec<Pass> {
        if !self.upsample {
            let pass = Pass {
                ty: PLAIN_TAPS,
                tx: PLAIN_TAPS,
                grid_h: s.out_h,
                grid_w: s.out_w,
                stride: self.stride,
                scale: 1,
                phase_y: 0,
                phase_x: 0,
            };
            return vec![pass];
        }
        let phase = [EVEN_TAPS, ODD_TAPS];
        let mut out = Vec::with_capacity(4);
        for (phase_y, ty) in phase.iter().enumerate() {
            for (phase_x, tx) in phase.iter().enumerate() {
                out.push(Pass {
                    ty: *ty,
                    tx: *tx,
                    grid_h: s.in_h,
                    grid_w: s.in_w,
                    stride: 1,
                    scale: 2,
                    phase_y,
                    phase_x,
                });
            }
        }
        out
    }

    /// Calls `f(pass_row, kernel_row)` for every original kernel row folded
    /// into a pass row; rows are `(tap, cin)` flattened.
    fn fold(&self, pass: &Pass, mut f: impl FnMut(usize, usize)) {
        for a in 0..pass.ty.len {
            for b in 0..pass.tx.len {
                let tap = a * pass.tx.len + b;
                for ky in pass.ty.fold[a].0..pass.ty.fold[a].1 {
                    for kx in pass.tx.fold[b].0..pass.tx.fold[b].1 {
                        for c in 0..self.cin {
                            f(tap * self.cin + c, (ky * KERNEL + kx) * self.cin + c);
                        }
                    }
                }
            }
        }
    }

    /// Pass weight matrix, `(taps * cin) x cout`.
    fn pass_weight<T: Scalar>(&self, pass: &Pass, weight: &[T], pool: &mut BufferPool<T>) -> Vec<T> {
        let (k, n) = (pass.taps() * self.cin, self.cout);
        let mut wp = pool.take(k * n);
        self.fold(pass, |pr, kr| {
            for co in 0..n {
                wp[pr * n + co] += weight[kr * n + co];
            }
        });
        wp
    }

    /// Visits grid rows `q0..q0 + rows`, calling `f(r, out, sources)` with
    /// the output pixel of row `q0 + r` and the source pixel of every tap;
    /// taps that fall in the padding read [`PAD`].
    #[inline]
    fn walk(&self, pass: &Pass, s: &ConvShape, q0: usize, rows: usize, mut f: impl FnMut(usize, usize, &[usize])) {
        let (gh, gw) = (pass.grid_h, pass.grid_w);
        let (tl, taps) = (pass.tx.len, pass.taps());
        let (in_h, in_w) = (s.in_h as isize, s.in_w as isize);
        let mut rel = [0isize; KERNEL * KERNEL];
        for a in 0..pass.ty.len {
            for b in 0..tl {
                rel[a * tl + b] = pass.ty.offset[a] * in_w + pass.tx.offset[b];
            }
        }
        let mut srcs = [PAD; KERNEL * KERNEL];
        let (mut q, mut r) = (q0, 0);
        while r < rows {
            let gx0 = q % gw;
            let gy = (q / gw) % gh;
            let n = q / (gw * gh);
            let run = (gw - gx0).min(rows - r);
            let cy = (gy * pass.stride) as isize;
            let mut row_ok = [false; KERNEL];
            for (a, ok) in row_ok.iter_mut().enumerate().take(pass.ty.len) {
                let sy = cy + pass.ty.offset[a];
                *ok = sy >= 0 && sy < in_h;
            }
            let rows_ok = row_ok[..pass.ty.len].iter().all(|&v| v);
            let row_base = (n as isize * in_h + cy) * in_w;
            let out_base = (n * s.out_h + gy * pass.scale + pass.phase_y) * s.out_w + pass.phase_x;
            for i in 0..run {
                let gx = gx0 + i;
                let cx = (gx * pass.stride) as isize;
                let center = row_base + cx;
                let cols_ok = cx + pass.tx.offset[0] >= 0 && cx + pass.tx.offset[tl - 1] < in_w;
                if rows_ok && cols_ok {
                    for (d, &o) in srcs[..taps].iter_mut().zip(&rel) {
                        *d = (center + o) as usize;
                    }
                } else {
                    for a in 0..pass.ty.len {
                        for b in 0..tl {
                            let sx = cx + pass.tx.offset[b];
                            let ok = row_ok[a] && sx >= 0 && sx < in_w;
                            srcs[a * tl + b] = if ok { (center + rel[a * tl + b]) as usize } else { PAD };
                        }
                    }
                }
                f(r + i, out_base + gx * pass.scale, &srcs[..taps]);
            }
            q += run;
            r += run;
        }
    }

    fn gather<T: Scalar>(&self, pass: &Pass, s: &ConvShape, x: &[T], q0: usize, col: &mut [T]) {
        let cin = self.cin;
        let k = pass.taps() * cin;
        self.walk(pass, s, q0, col.len() / k, |r, _, srcs| {
            for (dst, &src) in col[r * k..(r + 1) * k].chunks_exact_mut(cin).zip(srcs) {
                if src == PAD {
                    dst.fill(T::zero());
                } else {
                    copy_short(dst, &x[src * cin..(src + 1) * cin]);
                }
            }
        });
    }

    fn scatter_add<T: Scalar>(&self, pass: &Pass, s: &ConvShape, dcol: &[T], q0: usize, dx: &mut [T]) {
        let cin = self.cin;
        let k = pass.taps() * cin;
        self.walk(pass, s, q0, dcol.len() / k, |r, _, srcs| {
            for (g, &p) in dcol[r * k..(r + 1) * k].chunks_exact(cin).zip(srcs) {
                if p != PAD {
                    axpy(T::one(), g, &mut dx[p * cin..(p + 1) * cin]);
                }
            }
        });
    }

    /// Few output channels: multiply every input pixel by all tap weights
    /// at once (`z = x * W`, `cin x (taps * cout)`), then add each tap's
    /// plane into the output shifted by the tap offset. No column buffer is
    /// needed. Bias is added by the caller.
    #[allow(clippy::too_many_arguments)]
    fn narrow_forward<T: Scalar>(
        &self,
        pass: &Pass,
        s: &ConvShape,
        x: &[T],
        weight: &[T],
        y: &mut [T],
        pool: &mut BufferPool<T>,
    ) {
        let (cin, n) = (self.cin, self.cout);
        let tn = pass.taps() * n;
        let pixels = x.len() / cin;
        let wa = self.tap_major_weight(pass, weight, pool);
        let mut z = pool.take(pixels * tn);
        T::gemm(pixels, cin, tn, T::one(), x, cin as isize, 1, &wa, tn as isize, 1, T::zero(), &mut z, tn as isize, 1);
        match n {
            1 => shift_sum::<T, 1>(pass, s, &z, y),
            2 => shift_sum::<T, 2>(pass, s, &z, y),
            3 => shift_sum::<T, 3>(pass, s, &z, y),
            4 => shift_sum::<T, 4>(pass, s, &z, y),
            5 => shift_sum::<T, 5>(pass, s, &z, y),
            6 => shift_sum::<T, 6>(pass, s, &z, y),
            7 => shift_sum::<T, 7>(pass, s, &z, y),
            8 => shift_sum::<T, 8>(pass, s, &z, y),
            _ => unreachable!("narrow path takes at most NARROW_COUT channels"),
        }
        pool.put_all([wa, z]);
    }

    #[allow(clippy::too_many_arguments)]
    fn narrow_backward<T: Scalar>(
        &self,
        pass: &Pass,
        s: &ConvShape,
        dy: &[T],
        x: &[T],
        weight: &[T],
        dweight: &mut [T],
        dx: Option<&mut [T]>,
        pool: &mut BufferPool<T>,
    ) {
        let (cin, n) = (self.cin, self.cout);
        let tn = pass.taps() * n;
        let pixels = x.len() / cin;
        let wa = self.tap_major_weight(pass, weight, pool);
        let mut dz = pool.take(pixels * tn);
        match n {
            1 => shift_spread::<T, 1>(pass, s, dy, &mut dz),
            2 => shift_spread::<T, 2>(pass, s, dy, &mut dz),
            3 => shift_spread::<T, 3>(pass, s, dy, &mut dz),
            4 => shift_spread::<T, 4>(pass, s, dy, &mut dz),
            5 => shift_spread::<T, 5>(pass, s, dy, &mut dz),
            6 => shift_spread::<T, 6>(pass, s, dy, &mut dz),
            7 => shift_spread::<T, 7>(pass, s, dy, &mut dz),
            8 => shift_spread::<T, 8>(pass, s, dy, &mut dz),
            _ => unreachable!("narrow path takes at most NARROW_COUT channels"),
        }
        let mut dwa = pool.take(cin * tn);
        T::gemm(
            cin,
            pixels,
            tn,
            T::one(),
            x,
            1,
            cin as isize,
            &dz,
            tn as isize,
            1,
            T::zero(),
            &mut dwa,
            tn as isize,
            1,
        );
        if let Some(dx) = dx {
            T::gemm(pixels, tn, cin, T::one(), &dz, tn as isize, 1, &wa, 1, tn as isize, T::one(), dx, cin as isize, 1);
        }
        self.fold(pass, |pr, kr| {
            let (tap, c) = (pr / cin, pr % cin);
            for co in 0..n {
                dweight[kr * n + co] += dwa[c * tn + tap * n + co];
            }
        });
        pool.put_all([wa, dz, dwa]);
    }

    /// Pass weights rearranged to `cin x (taps * cout)`.
    fn tap_major_weight<T: Scalar>(&self, pass: &Pass, weight: &[T], pool: &mut BufferPool<T>) -> Vec<T> {
        let (cin, n) = (self.cin, self.cout);
        let tn = pass.taps() * n;
        let mut wa = pool.take(cin * tn);
        self.fold(pass, |pr, kr| {
            let (tap, c) = (pr / cin, pr % cin);
            for co in 0..n {
                wa[c * tn + tap * n + co] += weight[kr * n + co];
            }
        });
        wa
    }

    fn chunk_rows(k: usize) -> usize {
        (CHUNK_ELEMS / k).max(16)
    }

    fn narrow(&self) -> bool {
        self.cout <= NARROW_COUT && self.stride == 1
    }

    /// Returns the `batch x out_h x out_w x cout` output.
    pub fn forward<T: Scalar>(&self, x: &[T], s: &ConvShape, weight: &[T], bias: &[T]) -> Vec<T> {
        self.forward_pooled(x, s, weight, bias, &mut BufferPool::new())
    }

    pub fn forward_pooled<T: Scalar>(
        &self,
        x: &[T],
        s: &ConvShape,
        weight: &[T],
        bias: &[T],
        pool: &mut BufferPool<T>,
    ) -> Vec<T> {
        debug_assert_eq!(x.len(), s.batch * s.in_h * s.in_w * self.cin);
        debug_assert_eq!(weight.len(), self.weight_len());
        let n = self.cout;
        let mut y = pool.take(s.batch * s.out_h * s.out_w * n);
        for pass in self.passes(s) {
            let k = pass.taps() * self.cin;
            if self.narrow() {
                self.narrow_forward(&pass, s, x, weight, &mut y, pool);
                continue;
            }
            let wp = self.pass_weight(&pass, weight, pool);
            let total = pass.rows(s.batch);
            let chunk = Self::chunk_rows(k).min(total);
            let mut col = pool.take(chunk * k);
            let mut yb = pool.take(chunk * n);
            let mut q0 = 0;
            while q0 < total {
                let m = chunk.min(total - q0);
                let (col, yb) = (&mut col[..m * k], &mut yb[..m * n]);
                self.gather(&pass, s, x, q0, col);
                T::gemm(m, k, n, T::one(), col, k as isize, 1, &wp, n as isize, 1, T::zero(), yb, n as isize, 1);
                for (r, out) in yb.chunks_exact(n).enumerate() {
                    let o = pass.out_row(q0 + r, s);
                    for ((d, &v), &b) in y[o * n..(o + 1) * n].iter_mut().zip(out).zip(bias) {
                        *d = v + b;
                    }
                }
                q0 += m;
            }
            pool.put_all([wp, col, yb]);
        }
        if self.narrow() {
            for px in y.chunks_exact_mut(n) {
                for (d, &b) in px.iter_mut().zip(bias) {
                    *d += b;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `dweight`/`dbias` and returns the
    /// input gradient when requested. `x` is the forward input.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        dy: &[T],
        x: &[T],
        s: &ConvShape,
        weight: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        self.backward_pooled(dy, x, s, weight, dweight, dbias, want_input_grad, &mut BufferPool::new())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward_pooled<T: Scalar>(
        &self,
        dy: &[T],
        x: &[T],
        s: &ConvShape,
        weight: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        want_input_grad: bool,
        pool: &mut BufferPool<T>,
    ) -> Option<Vec<T>> {
        let n = self.cout;
        debug_assert_eq!(dy.len(), s.batch * s.out_h * s.out_w * n);
        for row in dy.chunks_exact(n) {
            for (b, &g) in dbias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = if want_input_grad { pool.take(x.len()) } else { Vec::new() };
        for pass in self.passes(s) {
            if self.narrow() {
                let dx = want_input_grad.then_some(&mut dx[..]);
                self.narrow_backward(&pass, s, dy, x, weight, dweight, dx, pool);
                continue;
            }
            let k = pass.taps() * self.cin;
            let wp = self.pass_weight(&pass, weight, pool);
            let mut dwp = pool.take(k * n);
            let total = pass.rows(s.batch);
            let chunk = Self::chunk_rows(k).min(total);
            let mut col = pool.take(chunk * k);
            let mut dyb = pool.take(chunk * n);
            let mut q0 = 0;
            while q0 < total {
                let m = chunk.min(total - q0);
                let (col, dyb) = (&mut col[..m * k], &mut dyb[..m * n]);
                self.gather(&pass, s, x, q0, col);
                for (r, out) in dyb.chunks_exact_mut(n).enumerate() {
                    let o = pass.out_row(q0 + r, s);
                    out.copy_from_slice(&dy[o * n..(o + 1) * n]);
                }
                T::gemm(k, m, n, T::one(), col, 1, k as isize, dyb, n as isize, 1, T::one(), &mut dwp, n as isize, 1);
                if want_input_grad {
                    let dcol = &mut col[..];
                    T::gemm(m, n, k, T::one(), dyb, n as isize, 1, &wp, 1, n as isize, T::zero(), dcol, k as isize, 1);
                    self.scatter_add(&pass, s, dcol, q0, &mut dx);
                }
                q0 += m;
            }
            self.fold(&pass, |pr, kr| {
                for co in 0..n {
                    dweight[kr * n + co] += dwp[pr * n + co];
                }
            });
            pool.put_all([wp, dwp, col, dyb]);
        }
        want_input_grad.then_some(dx)
    }
}

/// Grid rows (or columns) `g` of a stride-1 pass whose source `g + offset`
/// lies inside `0..len`.
#[inline]
fn valid_range(offset: isize, grid: usize, len: usize) -> core::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, grid as isize) as usize;
    lo..hi.max(lo)
}

/// Calls `f(out_pixel, source_pixel, len, tap)` for every in-bounds run of
/// a stride-1 pass: `len` consecutive grid columns starting at those pixels.
#[inline]
fn shift_runs(pass: &Pass, s: &ConvShape, mut f: impl FnMut(usize, usize, usize, usize)) {
    debug_assert_eq!(pass.stride, 1);
    for img in 0..s.batch {
        for a in 0..pass.ty.len {
            let oy = pass.ty.offset[a];
            for b in 0..pass.tx.len {
                let ox = pass.tx.offset[b];
                let tap = a * pass.tx.len + b;
                let cols = valid_range(ox, pass.grid_w, s.in_w);
                if cols.is_empty() {
                    continue;
                }
                for gy in valid_range(oy, pass.grid_h, s.in_h) {
                    let src =
                        (img * s.in_h + (gy as isize + oy) as usize) * s.in_w + (cols.start as isize + ox) as usize;
                    let out = (img * s.out_h + gy * pass.scale + pass.phase_y) * s.out_w
                        + cols.start * pass.scale
                        + pass.phase_x;
                    f(out, src, cols.len(), tap);
                }
            }
        }
    }
}

/// `y[out] += z[source, tap]` over every tap of a stride-1 pass, `N` channels.
fn shift_sum<T: Scalar, const N: usize>(pass: &Pass, s: &ConvShape, z: &[T], y: &mut [T]) {
    let tn = pass.taps() * N;
    let step = pass.scale * N;
    shift_runs(pass, s, |out, src, len, tap| {
        let zs = &z[src * tn + tap * N..];
        let ys = &mut y[out * N..];
        for i in 0..len {
            let (zi, yi) = (&zs[i * tn..i * tn + N], &mut ys[i * step..i * step + N]);
            for c in 0..N {
                yi[c] += zi[c];
            }
        }
    });
}

/// `dz[source, tap] = dy[out]`, the adjoint of [`shift_sum`]; `dz` must
/// start zeroed.
fn shift_spread<T: Scalar, const N: usize>(pass: &Pass, s: &ConvShape, dy: &[T], dz: &mut [T]) {
    let tn = pass.taps() * N;
    let step = pass.scale * N;
    shift_runs(pass, s, |out, src, len, tap| {
        let gs = &dy[out * N..];
        let zs = &mut dz[src * tn + tap * N..];
        for i in 0..len {
            zs[i * tn..i * tn + N].copy_from_slice(&gs[i * step..i * step + N]);
        }
    });
}

/// Copies a channel vector in fixed-size pieces so short copies stay inline.
#[inline]
fn copy_short<T: Scalar>(dst: &mut [T], src: &[T]) {
    let mut d = dst.chunks_exact_mut(8);
    let mut s = src.chunks_exact(8);
    for (a, b) in (&mut d).zip(&mut s) {
        a.copy_from_slice(b);
    }
    for (a, b) in d.into_remainder().iter_mut().zip(s.remainder()) {
        *a = *b;
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

/// Fully connected layer, weight layout `(in, out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
}

impl Dense {
    pub const fn new(nin: usize, nout: usize) -> Self {
        Self { nin, nout }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], batch: usize, weight: &[T], bias: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), batch * self.nin);
        let mut y = Vec::with_capacity(batch * self.nout);
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        T::gemm(
            batch,
            self.nin,
            self.nout,
            T::one(),
            x,
            self.nin as isize,
            1,
            weight,
            self.nout as isize,
            1,
            T::one(),
            &mut y,
            self.nout as isize,
            1,
        );
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        dy: &[T],
        x: &[T],
        batch: usize,
        weight: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (nin, nout) = (self.nin, self.nout);
        for row in dy.chunks_exact(nout) {
            for (b, &g) in dbias.iter_mut().zip(row) {
                *b += g;
            }
        }
        T::gemm(
            nin,
            batch,
            nout,
            T::one(),
            x,
            1,
            nin as isize,
            dy,
            nout as isize,
            1,
            T::one(),
            dweight,
            nout as isize,
            1,
        );
        if !want_input_grad {
            return None;
        }
        let mut dx = vec![T::zero(); batch * nin];
        T::gemm(
            batch,
            nout,
            nin,
            T::one(),
            dy,
            nout as isize,
            1,
            weight,
            1,
            nout as isize,
            T::zero(),
            &mut dx,
            nin as isize,
            1,
        );
        Some(dx)
    }
}

/// ELU with unit alpha, in place.
pub fn elu_forward<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v <= T::zero() {
            *v = v.exp_m1();
        }
    }
}

/// Multiplies `dy` by the ELU derivative expressed through the outputs `y`.
pub fn elu_backward<T: Scalar>(dy: &mut [T], y: &[T]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *g *= o + T::one();
        }
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

pub fn sigmoid_backward<T: Scalar>(dy: &mut [T], y: &[T]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        *g *= o * (T::one() - o);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col.
    fn direct_conv(conv: &Conv2d, x: &[f64], batch: usize, h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let (uh, uw) = if conv.upsample { (2 * h, 2 * w) } else { (h, w) };
        let up = |n: usize, y: usize, xx: usize, c: usize| {
            let (sy, sx) = if conv.upsample { (y / 2, xx / 2) } else { (y, xx) };
            x[((n * h + sy) * w + sx) * conv.cin + c]
        };
        let (oh, ow) = conv.out_dims(h, w);
        let mut out = vec![0.0; batch * oh * ow * conv.cout];
        for n in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..conv.cout {
                        let mut acc = b[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * conv.stride + ky) as isize - 1;
                                let ix = (ox * conv.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= uh as isize || ix >= uw as isize {
                                    continue;
                                }
                                for ci in 0..conv.cin {
                                    acc += wt[((ky * 3 + kx) * conv.cin + ci) * conv.cout + co]
                                        * up(n, iy as usize, ix as usize, ci);
                                }
                            }
                        }
                        out[((n * oh + oy) * ow + ox) * conv.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * k)).collect()
    }

    const VARIANTS: [Conv2d; 7] = [
        Conv2d::new(3, 4, 1),
        Conv2d::new(2, 5, 2),
        Conv2d::new(4, 1, 1),
        Conv2d::new(5, 3, 2),
        Conv2d::upsampling(3, 2),
        Conv2d::upsampling(2, 6),
        Conv2d::upsampling(4, 1),
    ];

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_variants_match_direct_loops() {
        for conv in VARIANTS {
            for (batch, h, w) in [(2, 6, 4), (1, 5, 7), (3, 1, 2)] {
                let x = seq(batch * h * w * conv.cin, 0.37);
                let wt = seq(conv.weight_len(), 1.3);
                let b = seq(conv.cout, 2.1);
                let y = conv.forward(&x, &conv.shape(batch, h, w), &wt, &b);
                let want = direct_conv(&conv, &x, batch, h, w, &wt, &b);
                assert_eq!(y.len(), want.len());
                for (p, q) in y.iter().zip(&want) {
                    assert!((p - q).abs() < 1e-12, "{conv:?}");
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint_of_direct_loops() {
        for conv in VARIANTS {
            let (batch, h, w) = (2, 5, 6);
            let s = conv.shape(batch, h, w);
            let x = seq(batch * h * w * conv.cin, 0.71);
            let wt = seq(conv.weight_len(), 0.53);
            let dy = seq(batch * s.out_h * s.out_w * conv.cout, 1.9);
            let (mut dw, mut db) = (vec![0.0; wt.len()], vec![0.0; conv.cout]);
            let dx = conv.backward(&dy, &x, &s, &wt, &mut dw, &mut db, true).unwrap();
            let zero = vec![0.0; conv.cout];
            let dxp = seq(x.len(), 2.7);
            let dwp = seq(wt.len(), 3.1);
            let jx = direct_conv(&conv, &dxp, batch, h, w, &wt, &zero);
            let jw = direct_conv(&conv, &x, batch, h, w, &dwp, &zero);
            assert!((inner(&dy, &jx) - inner(&dx, &dxp)).abs() < 1e-10, "{conv:?}");
            assert!((inner(&dy, &jw) - inner(&dw, &dwp)).abs() < 1e-10, "{conv:?}");
            for (co, g) in db.iter().enumerate() {
                let want: f64 = dy.iter().skip(co).step_by(conv.cout).sum();
                assert!((g - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(Conv2d::new(3, 16, 2).out_dims(48, 48), (24, 24));
        assert_eq!(Conv2d::new(3, 16, 1).out_dims(7, 5), (7, 5));
        assert_eq!(Conv2d::upsampling(8, 8).out_dims(6, 6), (12, 12));
    }

    #[test]
    fn elu_and_sigmoid_values() {
        let mut v = vec![-1.0f64, 0.0, 2.0];
        elu_forward(&mut v);
        assert!((v[0] - (libm::exp(-1.0) - 1.0)).abs() < 1e-15);
        assert_eq!(&v[1..], &[0.0, 2.0]);
        let mut s = vec![0.0f64];
        sigmoid_forward(&mut s);
        assert_eq!(s[0], 0.5);
    }

    #[test]
    fn dense_matches_manual_product() {
        let d = Dense::new(3, 2);
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let wt = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let y = d.forward(&x, 2, &wt, &[0.5, -0.5]);
        assert_eq!(y, vec![4.5, 4.5, -0.5, 0.0]);
    }
}
