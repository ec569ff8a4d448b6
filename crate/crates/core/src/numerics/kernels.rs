//! Raw forward/backward kernels over flat slices. The tape in `tape.rs`
//! owns shape checking and bookkeeping; everything here assumes valid extents.

/// `c = a · b + beta · c` for an `m×k` times `k×n` product with explicit
/// (row, column) strides on every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs
    };
    assert!(k == 0 || reach(m, k, a_strides) < a.len() as isize);
    assert!(k == 0 || reach(k, n, b_strides) < b.len() as isize);
    assert!(reach(m, n, c_strides) < c.len() as isize);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `[lo, hi)` of a row whose input index `ox + v - pad` lands
/// inside `[0, w)`.
fn valid_span(v: usize, pad: usize, w: usize, w_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(v).min(w_out);
    let hi = (w + pad).saturating_sub(v).min(w_out).max(lo);
    (lo, hi)
}

/// Unfolds one `[c_in, h, w]` image into a `[c_in·kh·kw, h_out·w_out]` matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let area = g.out_area();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((ci * g.kh + u) * g.kw + v) * area;
                let dst = &mut cols[row..row + area];
                let (lo, hi) = valid_span(v, g.pad_left, g.w, g.w_out);
                for oy in 0..g.h_out {
                    let iy = oy as isize + u as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if hi > lo {
                        let start = lo + v - g.pad_left;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let area = g.out_area();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((ci * g.kh + u) * g.kw + v) * area;
                let src = &cols[row..row + area];
                let (lo, hi) = valid_span(v, g.pad_left, g.w, g.w_out);
                for oy in 0..g.h_out {
                    let iy = oy as isize + u as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize || hi == lo {
                        continue;
                    }
                    let line = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    let start = iy as usize * g.w + lo + v - g.pad_left;
                    for (d, &val) in plane[start..start + hi - lo].iter_mut().zip(line) {
                        *d += val;
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation, `x: [b, c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let k = g.patch_len();
    let area = g.out_area();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * area;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; k * area];
    for b in 0..batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        let y = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, row) in y.chunks_exact_mut(area).enumerate() {
                row.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            g.c_out,
            k,
            area,
            weight,
            (k as isize, 1),
            &cols,
            (area as isize, 1),
            beta,
            y,
            (area as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dweight: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let k = g.patch_len();
    let area = g.out_area();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * area;
    let mut dx = want_dx.then(|| vec![0.0; batch * in_len]);
    let mut dweight = want_dw.then(|| vec![0.0; g.c_out * k]);
    let mut dbias = want_db.then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; k * area];
    for b in 0..batch {
        let dy_b = &dy[b * out_len..(b + 1) * out_len];
        if let Some(db) = dbias.as_mut() {
            for (co, row) in dy_b.chunks_exact(area).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            // dW[c_out, k] += dY[c_out, area] · colsᵀ[area, k]
            gemm(
                g.c_out,
                area,
                k,
                dy_b,
                (area as isize, 1),
                &cols,
                (1, area as isize),
                1.0,
                dw,
                (k as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[k, area] = Wᵀ[k, c_out] · dY[c_out, area]
            gemm(
                k,
                g.c_out,
                area,
                weight,
                (1, k as isize),
                dy_b,
                (area as isize, 1),
                0.0,
                &mut cols,
                (area as isize, 1),
            );
            col2im_add(g, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// 2×2 stride-2 max pooling over `[planes, h, w]`. Returns the pooled values
/// and, per output cell, the flat input index that won (first row-major on ties).
pub(crate) fn maxpool2x2_forward(
    planes: usize,
    h: usize,
    w: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics over `[b, c, inner]` data.
pub(crate) fn channel_moments(b: usize, c: usize, inner: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = (b * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let s = &x[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
            mean[ci] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ci in 0..c {
            let s = &x[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
            var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Scatters `sl: [ny, nx, n]` placements of `bank: [n, c, sy, sx]` onto a
/// `[c, ny+sy-1, nx+sx-1]` canvas for one sample, accumulating into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stamp_forward_sample(
    ny: usize,
    nx: usize,
    n: usize,
    c: usize,
    sy: usize,
    sx: usize,
    sl: &[f64],
    bank: &[f64],
    patches: &mut [f64],
    out: &mut [f64],
) {
    let plen = c * sy * sx;
    let positions = ny * nx;
    // patches[pos, c·sy·sx] = sl[pos, n] · bank[n, c·sy·sx]
    gemm(
        positions,
        n,
        plen,
        sl,
        (n as isize, 1),
        bank,
        (plen as isize, 1),
        0.0,
        patches,
        (plen as isize, 1),
    );
    let (h, w) = (ny + sy - 1, nx + sx - 1);
    for y in 0..ny {
        for x in 0..nx {
            let patch = &patches[(y * nx + x) * plen..(y * nx + x + 1) * plen];
            for ci in 0..c {
                for u in 0..sy {
                    let src = &patch[(ci * sy + u) * sx..(ci * sy + u + 1) * sx];
                    let row = (ci * h + y + u) * w + x;
                    for (o, &p) in out[row..row + sx].iter_mut().zip(src) {
                        *o += p;
                    }
                }
            }
        }
    }
}

/// Gathers the upstream canvas gradient into per-position patches (the
/// adjoint of the scatter in [`stamp_forward_sample`]).
pub(crate) fn stamp_gather_sample(
    ny: usize,
    nx: usize,
    c: usize,
    sy: usize,
    sx: usize,
    dout: &[f64],
    patches: &mut [f64],
) {
    let plen = c * sy * sx;
    let (h, w) = (ny + sy - 1, nx + sx - 1);
    for y in 0..ny {
        for x in 0..nx {
            let patch = &mut patches[(y * nx + x) * plen..(y * nx + x + 1) * plen];
            for ci in 0..c {
                for u in 0..sy {
                    let row = (ci * h + y + u) * w + x;
                    patch[(ci * sy + u) * sx..(ci * sy + u + 1) * sx]
                        .copy_from_slice(&dout[row..row + sx]);
                }
            }
        }
    }
}

/// Extents of a separable stamp render: `ny`/`nx` positions, `n` stamps of
/// `c`×`sy`×`sx`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SeparableDims {
    pub ny: usize,
    pub nx: usize,
    pub n: usize,
    pub c: usize,
    pub sy: usize,
    pub sx: usize,
}

impl SeparableDims {
    pub fn height(&self) -> usize {
        self.ny + self.sy - 1
    }

    pub fn width(&self) -> usize {
        self.nx + self.sx - 1
    }
}

/// Mixes the bank by `ps` (`eff = Σ_k ps[k]·bank[k]`, `[c, sy, sx]`) and
/// correlates it with `py` along rows (`rows`, `[c, h, sx]`).
pub(crate) fn separable_intermediates(
    d: SeparableDims,
    py: &[f64],
    ps: &[f64],
    bank: &[f64],
    eff: &mut [f64],
    rows: &mut [f64],
) {
    let plen = d.c * d.sy * d.sx;
    let h = d.height();
    eff.fill(0.0);
    for (k, &p) in ps.iter().enumerate() {
        for (e, &b) in eff.iter_mut().zip(&bank[k * plen..(k + 1) * plen]) {
            *e += p * b;
        }
    }
    rows.fill(0.0);
    for ci in 0..d.c {
        for (y, &p) in py.iter().enumerate() {
            for r in 0..d.sy {
                let src = &eff[(ci * d.sy + r) * d.sx..][..d.sx];
                let dst = &mut rows[(ci * h + y + r) * d.sx..][..d.sx];
                for (o, &e) in dst.iter_mut().zip(src) {
                    *o += p * e;
                }
            }
        }
    }
}

/// Renders one sample of the stamp layer for a rank-one SL tensor
/// `py ⊗ px ⊗ ps` into `out` (`[c, h, w]`, overwritten).
#[allow(clippy::too_many_arguments)]
pub(crate) fn separable_stamp_sample(
    d: SeparableDims,
    py: &[f64],
    px: &[f64],
    ps: &[f64],
    bank: &[f64],
    eff: &mut [f64],
    rows: &mut [f64],
    out: &mut [f64],
) {
    separable_intermediates(d, py, ps, bank, eff, rows);
    let (h, w) = (d.height(), d.width());
    out.fill(0.0);
    for ci in 0..d.c {
        for yy in 0..h {
            let src = &rows[(ci * h + yy) * d.sx..][..d.sx];
            let line = &mut out[(ci * h + yy) * w..][..w];
            for (x, &p) in px.iter().enumerate() {
                for (o, &r) in line[x..x + d.sx].iter_mut().zip(src) {
                    *o += p * r;
                }
            }
        }
    }
}

/// Gradients of [`separable_stamp_sample`] for upstream gradient `g`
/// (`[c, h, w]`). Fills `dpy`, `dpx`, `dps` and adds into `dbank`.
pub(crate) fn separable_stamp_backward_sample(
    d: SeparableDims,
    py: &[f64],
    px: &[f64],
    ps: &[f64],
    bank: &[f64],
    g: &[f64],
    mut grads: SeparableGrads<'_>,
) {
    let plen = d.c * d.sy * d.sx;
    let (h, w) = (d.height(), d.width());
    let mut eff = vec![0.0; plen];
    let mut rows = vec![0.0; d.c * h * d.sx];
    separable_intermediates(d, py, ps, bank, &mut eff, &mut rows);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut drows = vec![0.0; d.c * h * d.sx];
    grads.dpx.fill(0.0);
    for ci in 0..d.c {
        for yy in 0..h {
            let line = &g[(ci * h + yy) * w..][..w];
            let a = &rows[(ci * h + yy) * d.sx..][..d.sx];
            let da = &mut drows[(ci * h + yy) * d.sx..][..d.sx];
            for (x, &p) in px.iter().enumerate() {
                let window = &line[x..x + d.sx];
                grads.dpx[x] += dot(window, a);
                for (o, &gv) in da.iter_mut().zip(window) {
                    *o += p * gv;
                }
            }
        }
    }
    let mut deff = vec![0.0; plen];
    grads.dpy.fill(0.0);
    for ci in 0..d.c {
        for (y, &p) in py.iter().enumerate() {
            for r in 0..d.sy {
                let da = &drows[(ci * h + y + r) * d.sx..][..d.sx];
                let e = &eff[(ci * d.sy + r) * d.sx..][..d.sx];
                grads.dpy[y] += dot(da, e);
                for (o, &v) in deff[(ci * d.sy + r) * d.sx..][..d.sx].iter_mut().zip(da) {
                    *o += p * v;
                }
            }
        }
    }
    for (k, &p) in ps.iter().enumerate() {
        let stamp = &bank[k * plen..(k + 1) * plen];
        grads.dps[k] = dot(&deff, stamp);
        if let Some(dbank) = grads.dbank.as_deref_mut() {
            for (o, &v) in dbank[k * plen..(k + 1) * plen].iter_mut().zip(&deff) {
                *o += p * v;
            }
        }
    }
}

pub(crate) struct SeparableGrads<'a> {
    pub dpy: &'a mut [f64],
    pub dpx: &'a mut [f64],
    pub dps: &'a mut [f64],
    pub dbank: Option<&'a mut [f64]>,
}

pub(crate) fn softmax_rows(k: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}
