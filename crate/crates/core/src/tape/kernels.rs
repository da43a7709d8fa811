//! Raw forward/backward loops on row-major slices.
//!
//! Layouts: activations `T x C`, depthwise kernels `K x C`, dense weights
//! `C_out x C_in`, full convolution weights `C_out x C_in x K`.

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T . b` for `a: m x k`, `b: m x n` giving `k x n`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a . b^T` for `a: m x k`, `b: n x k` giving `m x n`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid output range `[lo, hi)` for a tap at time offset `off` over `t` frames.
#[inline]
fn tap_range(off: isize, t: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (t as isize - off).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    t: usize,
    c: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; t * c];
    let half = (k / 2) as isize;
    for tap in 0..k {
        let off = dilation as isize * (tap as isize - half);
        let (lo, hi) = tap_range(off, t);
        let wk = &w[tap * c..(tap + 1) * c];
        for ti in lo..hi {
            let src = (ti as isize + off) as usize;
            let yrow = &mut y[ti * c..(ti + 1) * c];
            let xrow = &x[src * c..(src + 1) * c];
            for ((yv, &xv), &wv) in yrow.iter_mut().zip(xrow).zip(wk) {
                *yv += wv * xv;
            }
        }
    }
    y
}

/// Returns `(dx, dw)`.
pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    t: usize,
    c: usize,
    k: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; t * c];
    let mut dw = vec![0.0; k * c];
    let half = (k / 2) as isize;
    for tap in 0..k {
        let off = dilation as isize * (tap as isize - half);
        let (lo, hi) = tap_range(off, t);
        let wk = &w[tap * c..(tap + 1) * c];
        let dwk = &mut dw[tap * c..(tap + 1) * c];
        for ti in lo..hi {
            let src = (ti as isize + off) as usize;
            let dyrow = &dy[ti * c..(ti + 1) * c];
            let xrow = &x[src * c..(src + 1) * c];
            let dxrow = &mut dx[src * c..(src + 1) * c];
            for ch in 0..c {
                dxrow[ch] += wk[ch] * dyrow[ch];
                dwk[ch] += xrow[ch] * dyrow[ch];
            }
        }
    }
    (dx, dw)
}

/// Reorders `C_out x C_in x K` into `K x C_in x C_out` so the inner loop runs over outputs.
fn conv_weight_by_tap(w: &[f64], cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let mut wt = vec![0.0; k * cin * cout];
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..k {
                wt[(tap * cin + i) * cout + o] = w[(o * cin + i) * k + tap];
            }
        }
    }
    wt
}

pub(crate) fn conv_out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let tout = conv_out_len(t, stride);
    let wt = conv_weight_by_tap(w, cout, cin, k);
    let half = (k / 2) as isize;
    let mut y = vec![0.0; tout * cout];
    for to in 0..tout {
        let yrow = &mut y[to * cout..(to + 1) * cout];
        if let Some(b) = bias {
            yrow.copy_from_slice(b);
        }
        let center = (to * stride) as isize;
        for tap in 0..k {
            let src = center + tap as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let xrow = &x[src * cin..(src + 1) * cin];
            for (i, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wt[(tap * cin + i) * cout..(tap * cin + i + 1) * cout];
                for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, dbias)` with `dw` in the `C_out x C_in x K` layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let tout = conv_out_len(t, stride);
    let wt = conv_weight_by_tap(w, cout, cin, k);
    let half = (k / 2) as isize;
    let mut dx = vec![0.0; t * cin];
    let mut dwt = vec![0.0; k * cin * cout];
    let mut db = vec![0.0; cout];
    for to in 0..tout {
        let dyrow = &dy[to * cout..(to + 1) * cout];
        for (b, &g) in db.iter_mut().zip(dyrow) {
            *b += g;
        }
        let center = (to * stride) as isize;
        for tap in 0..k {
            let src = center + tap as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for i in 0..cin {
                let base = (tap * cin + i) * cout;
                let wrow = &wt[base..base + cout];
                dx[src * cin + i] += dot(wrow, dyrow);
                let xv = x[src * cin + i];
                if xv != 0.0 {
                    for (d, &g) in dwt[base..base + cout].iter_mut().zip(dyrow) {
                        *d += xv * g;
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; cout * cin * k];
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..k {
                dw[(o * cin + i) * k + tap] = dwt[(tap * cin + i) * cout + o];
            }
        }
    }
    (dx, dw, db)
}
