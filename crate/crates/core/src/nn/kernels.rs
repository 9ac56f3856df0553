//! Dense, convolution and pooling kernels over flat row-major buffers.

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, which keeps results bit-reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let split = a.len() - a.len() % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        sum += x * y;
    }
    sum
}

/// Four dot products against one shared row, each summed in exactly the
/// order [`dot`] uses.
fn dot4(w: &[f64], x: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [[0.0f64; 8]; 4];
    let split = w.len() - w.len() % 8;
    for (c, cw) in w[..split].chunks_exact(8).enumerate() {
        let base = c * 8;
        for (a, xi) in acc.iter_mut().zip(&x) {
            let cx = &xi[base..base + 8];
            for k in 0..8 {
                a[k] += cw[k] * cx[k];
            }
        }
    }
    let mut out = [0.0; 4];
    for ((o, a), xi) in out.iter_mut().zip(&acc).zip(&x) {
        let mut sum = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
        for (p, q) in w[split..].iter().zip(&xi[split..]) {
            sum += p * q;
        }
        *o = sum;
    }
    out
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

/// [`dense_forward`] for several inputs, visiting each weight row once.
/// Every output equals the single-input result bit for bit.
pub(crate) fn dense_forward_many(w: &[f64], b: &[f64], xs: &[Vec<f64>], outs: &mut [Vec<f64>]) {
    let Some(n_in) = xs.first().map(Vec::len) else {
        return;
    };
    let quads = xs.len() / 4 * 4;
    for o in 0..b.len() {
        let row = &w[o * n_in..(o + 1) * n_in];
        for q in (0..quads).step_by(4) {
            let d = dot4(row, [&xs[q], &xs[q + 1], &xs[q + 2], &xs[q + 3]]);
            for k in 0..4 {
                outs[q + k][o] = b[o] + d[k];
            }
        }
        for (x, out) in xs[quads..].iter().zip(outs[quads..].iter_mut()) {
            out[o] = b[o] + dot(row, x);
        }
    }
}

/// [`dense_backward`] for several samples. Per element, contributions are
/// summed in sample order, as repeated single-sample calls would.
pub(crate) fn dense_backward_many(
    w: &[f64],
    xs: &[&[f64]],
    grads_out: &[&[f64]],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grads_x: Option<&mut [Vec<f64>]>,
) {
    let Some(n_in) = xs.first().map(|x| x.len()) else {
        return;
    };
    for o in 0..grad_b.len() {
        let row = &mut grad_w[o * n_in..(o + 1) * n_in];
        for (x, g) in xs.iter().zip(grads_out) {
            let g = g[o];
            if g != 0.0 {
                grad_b[o] += g;
                axpy(g, x, row);
            }
        }
    }
    if let Some(gxs) = grads_x {
        for o in 0..grad_b.len() {
            let row = &w[o * n_in..(o + 1) * n_in];
            for (gx, g) in gxs.iter_mut().zip(grads_out) {
                if g[o] != 0.0 {
                    axpy(g[o], row, gx);
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_x: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        axpy(g, x, &mut grad_w[o * n_in..(o + 1) * n_in]);
    }
    if let Some(gx) = grad_x {
        for (o, &g) in grad_out.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[o * n_in..(o + 1) * n_in], gx);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h - self.k_h + 1
    }
    pub fn out_w(&self) -> usize {
        self.in_w - self.k_w + 1
    }
    fn w_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_c + ic) * self.k_h + ky) * self.k_w + kx
    }
}

/// Valid (unpadded) stride-1 cross-correlation.
pub(crate) fn conv_forward(g: ConvGeom, w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oc in 0..g.out_c {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(b[oc]);
        for ic in 0..g.in_c {
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let wv = w[g.w_index(oc, ic, ky, kx)];
                    for y in 0..oh {
                        let row = (ic * g.in_h + y + ky) * g.in_w + kx;
                        axpy(wv, &x[row..row + ow], &mut plane[y * ow..(y + 1) * ow]);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_backward(
    g: ConvGeom,
    w: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_x: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for oc in 0..g.out_c {
        let plane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        grad_b[oc] += plane.iter().sum::<f64>();
        for ic in 0..g.in_c {
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let wi = g.w_index(oc, ic, ky, kx);
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = (ic * g.in_h + y + ky) * g.in_w + kx;
                        let go = &plane[y * ow..(y + 1) * ow];
                        acc += dot(go, &x[row..row + ow]);
                        if let Some(gx) = grad_x.as_deref_mut() {
                            axpy(w[wi], go, &mut gx[row..row + ow]);
                        }
                    }
                    grad_w[wi] += acc;
                }
            }
        }
    }
}

/// Non-overlapping max pooling over `[C, H, W]`; trailing rows/columns that
/// do not fill a window are dropped. Ties go to the first position in
/// row-major window order.
pub(crate) fn maxpool_argmax(
    shape: [usize; 3],
    window: (usize, usize),
    x: &[f64],
) -> Vec<usize> {
    let [c, h, w] = shape;
    let (ph, pw) = window;
    let (oh, ow) = (h / ph, w / pw);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * ph) * w + ox * pw;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let i = (ch * h + oy * ph + dy) * w + ox * pw + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_odd_lengths() {
        for n in [0, 1, 7, 8, 9, 33] {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
            let b: Vec<f64> = (0..n).map(|i| 1.0 - i as f64).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_by_hand() {
        // 1x3x3 input, 1x1x2x2 kernel of ones -> sums of each 2x2 window.
        let g = ConvGeom {
            in_c: 1,
            in_h: 3,
            in_w: 3,
            out_c: 1,
            k_h: 2,
            k_w: 2,
        };
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut out = vec![0.0; 4];
        conv_forward(g, &[1.0; 4], &[0.5], &x, &mut out);
        assert_eq!(out, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn maxpool_picks_first_of_ties() {
        let x = vec![1.0, 3.0, 3.0, 0.0, 2.0, 2.0, 2.0, 2.0];
        let idx = maxpool_argmax([2, 2, 2], (2, 2), &x);
        assert_eq!(idx, vec![1, 4]);
    }
}
