//! Forward and backward kernels for the graph primitives.
//!
//! Everything here works on flat row-major slices. Reductions always run in
//! the same order for a given shape, so results are bitwise reproducible.

use std::ops::Range;
use std::str::FromStr;

use super::GraphError;

/// `c = a · b` (or `c += a · b` when `accumulate`), with explicit strides so
/// transposed operands need no copy.
///
/// `a` is `m × k` with strides `(rsa, csa)`, `b` is `k × n` with `(rsb, csb)`,
/// `c` is a dense row-major `m × n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

/// Causal mask variant. `A` excludes the current raster position, `B`
/// admits it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    A,
    B,
}

impl FromStr for MaskKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(MaskKind::A),
            "B" | "b" => Ok(MaskKind::B),
            other => Err(GraphError::UnknownMask(other.to_string())),
        }
    }
}

/// Raster-order mask for a convolution.
///
/// `color_groups` splits both input and output channels into contiguous
/// blocks (R, G, B for color images); at the center tap an output block may
/// read input blocks strictly before it (mask A) or up to and including it
/// (mask B).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvMask {
    pub kind: MaskKind,
    pub color_groups: usize,
}

impl ConvMask {
    pub fn new(kind: MaskKind) -> Self {
        Self { kind, color_groups: 1 }
    }

    pub fn with_groups(kind: MaskKind, color_groups: usize) -> Self {
        Self { kind, color_groups }
    }
}

pub(crate) fn channel_group(c: usize, channels: usize, groups: usize) -> usize {
    c * groups / channels
}

/// Whether weight `(co, ci, ky, kx)` is live under `mask`.
pub fn tap_active(
    mask: Option<ConvMask>,
    co: usize,
    cout: usize,
    ci: usize,
    cin: usize,
    ky: usize,
    kx: usize,
    k: usize,
) -> bool {
    let Some(mask) = mask else { return true };
    let c = k / 2;
    if ky < c || (ky == c && kx < c) {
        return true;
    }
    if ky != c || kx != c {
        return false;
    }
    let go = channel_group(co, cout, mask.color_groups);
    let gi = channel_group(ci, cin, mask.color_groups);
    match mask.kind {
        MaskKind::A => gi < go,
        MaskKind::B => gi <= go,
    }
}

/// Output channels that share one set of live taps.
#[derive(Clone, Debug)]
pub(crate) struct TapGroup {
    pub out: Range<usize>,
    /// `(ci, ky, kx)` in ascending order.
    pub taps: Vec<(usize, usize, usize)>,
}

pub(crate) fn tap_plan(cout: usize, cin: usize, k: usize, mask: Option<ConvMask>) -> Vec<TapGroup> {
    let groups = mask.map_or(1, |m| m.color_groups);
    let mut plan = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let mut end = start;
        while end < cout && channel_group(end, cout, groups) == g {
            end += 1;
        }
        if end == start {
            continue;
        }
        let mut taps = Vec::new();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    if tap_active(mask, start, cout, ci, cin, ky, kx, k) {
                        taps.push((ci, ky, kx));
                    }
                }
            }
        }
        plan.push(TapGroup { out: start..end, taps });
        start = end;
    }
    plan
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(
        x: &[usize],
        wshape: &[usize],
        padding: Padding,
    ) -> Result<Self, String> {
        if x.len() != 4 {
            return Err(format!("input must be [N, C, H, W], got {x:?}"));
        }
        if wshape.len() != 4 || wshape[2] != wshape[3] {
            return Err(format!("weights must be [Cout, Cin, k, k], got {wshape:?}"));
        }
        if wshape[1] != x[1] {
            return Err(format!("weights expect {} input channels, input has {}", wshape[1], x[1]));
        }
        let k = wshape[2];
        let (pad, ho, wo) = match padding {
            Padding::Same => (k / 2, x[2], x[3]),
            Padding::Valid => {
                if x[2] < k || x[3] < k {
                    return Err(format!("input {}x{} smaller than kernel {k}", x[2], x[3]));
                }
                (0, x[2] - k + 1, x[3] - k + 1)
            }
        };
        Ok(Self { n: x[0], cin: x[1], h: x[2], w: x[3], cout: wshape[0], k, pad, ho, wo })
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], d: &ConvDims, taps: &[(usize, usize, usize)], cols: &mut Vec<f64>) {
    let p = d.positions();
    let np = d.n * p;
    cols.clear();
    cols.resize(taps.len() * np, 0.0);
    for (t, &(ci, ky, kx)) in taps.iter().enumerate() {
        let row = &mut cols[t * np..(t + 1) * np];
        for n in 0..d.n {
            let plane = &x[(n * d.cin + ci) * d.h * d.w..(n * d.cin + ci + 1) * d.h * d.w];
            for oy in 0..d.ho {
                let iy = oy + ky;
                if iy < d.pad || iy - d.pad >= d.h {
                    continue;
                }
                let iy = iy - d.pad;
                let dst = &mut row[n * p + oy * d.wo..n * p + (oy + 1) * d.wo];
                for (ox, v) in dst.iter_mut().enumerate() {
                    let ix = ox + kx;
                    if ix >= d.pad && ix - d.pad < d.w {
                        *v = plane[iy * d.w + ix - d.pad];
                    }
                }
            }
        }
    }
}

fn col2im_add(dcols: &[f64], d: &ConvDims, taps: &[(usize, usize, usize)], dx: &mut [f64]) {
    let p = d.positions();
    let np = d.n * p;
    for (t, &(ci, ky, kx)) in taps.iter().enumerate() {
        let row = &dcols[t * np..(t + 1) * np];
        for n in 0..d.n {
            let base = (n * d.cin + ci) * d.h * d.w;
            for oy in 0..d.ho {
                let iy = oy + ky;
                if iy < d.pad || iy - d.pad >= d.h {
                    continue;
                }
                let iy = iy - d.pad;
                let src = &row[n * p + oy * d.wo..n * p + (oy + 1) * d.wo];
                for (ox, &g) in src.iter().enumerate() {
                    let ix = ox + kx;
                    if ix >= d.pad && ix - d.pad < d.w {
                        dx[base + iy * d.w + ix - d.pad] += g;
                    }
                }
            }
        }
    }
}

fn gather_weights(w: &[f64], d: &ConvDims, group: &TapGroup) -> Vec<f64> {
    let kk = d.k * d.k;
    let mut out = Vec::with_capacity(group.out.len() * group.taps.len());
    for co in group.out.clone() {
        for &(ci, ky, kx) in &group.taps {
            out.push(w[(co * d.cin + ci) * kk + ky * d.k + kx]);
        }
    }
    out
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    d: &ConvDims,
    plan: &[TapGroup],
) -> Vec<f64> {
    let p = d.positions();
    let np = d.n * p;
    let mut out = vec![0.0; d.n * d.cout * p];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for group in plan {
        let cg = group.out.len();
        let kt = group.taps.len();
        tmp.clear();
        tmp.resize(cg * np, 0.0);
        if kt > 0 {
            im2col(x, d, &group.taps, &mut cols);
            let wm = gather_weights(w, d, group);
            gemm(cg, kt, np, &wm, kt, 1, &cols, np, 1, &mut tmp, false);
        }
        for (gi, co) in group.out.clone().enumerate() {
            let bias = b.map_or(0.0, |b| b[co]);
            for n in 0..d.n {
                let src = &tmp[gi * np + n * p..gi * np + (n + 1) * p];
                let dst = &mut out[(n * d.cout + co) * p..(n * d.cout + co + 1) * p];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o = s + bias;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: &ConvDims,
    plan: &[TapGroup],
) -> ConvGrads {
    let p = d.positions();
    let np = d.n * p;
    let kk = d.k * d.k;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.cout];
    let mut cols = Vec::new();
    for co in 0..d.cout {
        let mut s = 0.0;
        for n in 0..d.n {
            s += dout[(n * d.cout + co) * p..(n * d.cout + co + 1) * p].iter().sum::<f64>();
        }
        db[co] = s;
    }
    for group in plan {
        let cg = group.out.len();
        let kt = group.taps.len();
        if kt == 0 {
            continue;
        }
        let mut dtmp = vec![0.0; cg * np];
        for (gi, co) in group.out.clone().enumerate() {
            for n in 0..d.n {
                dtmp[gi * np + n * p..gi * np + (n + 1) * p]
                    .copy_from_slice(&dout[(n * d.cout + co) * p..(n * d.cout + co + 1) * p]);
            }
        }
        im2col(x, d, &group.taps, &mut cols);
        // dW = dtmp · colsᵀ
        let mut dwm = vec![0.0; cg * kt];
        gemm(cg, np, kt, &dtmp, np, 1, &cols, 1, np, &mut dwm, false);
        for (gi, co) in group.out.clone().enumerate() {
            for (t, &(ci, ky, kx)) in group.taps.iter().enumerate() {
                dw[(co * d.cin + ci) * kk + ky * d.k + kx] += dwm[gi * kt + t];
            }
        }
        // dcols = Wᵀ · dtmp
        let wm = gather_weights(w, d, group);
        let mut dcols = vec![0.0; kt * np];
        gemm(kt, cg, np, &wm, 1, kt, &dtmp, np, 1, &mut dcols, false);
        col2im_add(&dcols, d, &group.taps, &mut dx);
    }
    ConvGrads { dx, dw, db }
}

/// `y = x · Wᵀ + b` with `x: [n, din]`, `w: [dout, din]`.
pub(crate) fn affine_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    gemm(n, din, dout, x, din, 1, w, 1, din, &mut y, false);
    for row in y.chunks_exact_mut(dout) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

pub(crate) fn affine_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * din];
    gemm(n, dout, din, dy, dout, 1, w, din, 1, &mut dx, false);
    let mut dw = vec![0.0; dout * din];
    gemm(dout, n, din, dy, 1, dout, x, din, 1, &mut dw, false);
    let mut db = vec![0.0; dout];
    for row in dy.chunks_exact(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2 (floor). Returns values and the flat input
/// index of each maximum; ties go to the first element in scan order.
pub(crate) fn maxpool2_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn global_maxpool_forward(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let base = plane * hw;
        let mut best = base;
        for idx in base + 1..base + hw {
            if x[idx] > x[best] {
                best = idx;
            }
        }
        out.push(x[best]);
        arg.push(best);
    }
    (out, arg)
}

/// Source index map for nearest-neighbor resize of `[n, c, h, w]` to
/// `[n, c, ho, wo]`: `src = floor(dst · in / out)` per axis.
pub(crate) fn resize_nearest_index(n: usize, c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            let iy = oy * h / ho;
            for ox in 0..wo {
                let ix = ox * w / wo;
                idx.push(plane * h * w + iy * w + ix);
            }
        }
    }
    idx
}

/// Log-softmax over blocks of `classes` channels. `x` is `[n, g·classes, rest]`.
pub(crate) fn log_softmax(x: &[f64], n: usize, groups: usize, classes: usize, rest: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for g in 0..groups {
            let base = (b * groups + g) * classes * rest;
            for r in 0..rest {
                let mut max = f64::NEG_INFINITY;
                for c in 0..classes {
                    max = max.max(x[base + c * rest + r]);
                }
                let mut s = 0.0;
                for c in 0..classes {
                    s += (x[base + c * rest + r] - max).exp();
                }
                let lse = max + s.ln();
                for c in 0..classes {
                    out[base + c * rest + r] = x[base + c * rest + r] - lse;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_count(kind: MaskKind, k: usize) -> usize {
        (0..k)
            .flat_map(|ky| (0..k).map(move |kx| (ky, kx)))
            .filter(|&(ky, kx)| tap_active(Some(ConvMask::new(kind)), 0, 1, 0, 1, ky, kx, k))
            .count()
    }

    #[test]
    fn mask_tap_counts() {
        assert_eq!(mask_count(MaskKind::A, 3), 4);
        assert_eq!(mask_count(MaskKind::B, 3), 5);
        assert_eq!(mask_count(MaskKind::A, 5), 12);
        assert_eq!(mask_count(MaskKind::B, 5), 13);
        assert_eq!(mask_count(MaskKind::A, 1), 0);
        assert_eq!(mask_count(MaskKind::B, 1), 1);
    }

    #[test]
    fn color_group_center_taps() {
        let m = Some(ConvMask::with_groups(MaskKind::A, 3));
        // R output sees no center input, G sees R, B sees R and G.
        let live = |co, ci| tap_active(m, co, 3, ci, 3, 1, 1, 3);
        assert!(!live(0, 0) && !live(0, 1) && !live(0, 2));
        assert!(live(1, 0) && !live(1, 1));
        assert!(live(2, 0) && live(2, 1) && !live(2, 2));
        let mb = Some(ConvMask::with_groups(MaskKind::B, 3));
        assert!(tap_active(mb, 1, 3, 1, 3, 1, 1, 3));
        assert!(!tap_active(mb, 1, 3, 2, 3, 1, 1, 3));
    }

    #[test]
    fn mask_kind_parsing() {
        assert_eq!("A".parse::<MaskKind>().unwrap(), MaskKind::A);
        assert_eq!("b".parse::<MaskKind>().unwrap(), MaskKind::B);
        assert!(matches!("C".parse::<MaskKind>(), Err(GraphError::UnknownMask(_))));
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, k, 1, &b, n, 1, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_nearest_doubles() {
        let idx = resize_nearest_index(1, 1, 2, 2, 4, 4);
        assert_eq!(&idx[..4], &[0, 0, 1, 1]);
        assert_eq!(&idx[8..12], &[2, 2, 3, 3]);
    }
}
