//! Forward and backward kernels for the fused graph nodes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, Ix4, IxDyn};

use super::{c, sigmoid, BatchStats, Float, NormStats};

pub(crate) struct GruCache<T> {
    batch: usize,
    steps: usize,
    hidden: usize,
    h_prev: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hh_n: Vec<T>,
    active: Vec<bool>,
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    (ph, pw): (usize, usize),
) -> (ArrayD<T>, Vec<T>) {
    let x = x.view().into_dimensionality::<Ix4>().expect("conv2d: x must be 4-D");
    let w = w.view().into_dimensionality::<Ix4>().expect("conv2d: w must be 4-D");
    let (bs, ch, h, wd) = x.dim();
    let (co, ci, kh, kw) = w.dim();
    assert_eq!(ch, ci, "conv2d: channel mismatch");
    let ho = h + 2 * ph + 1 - kh;
    let wo = wd + 2 * pw + 1 - kw;
    let k = ci * kh * kw;
    let hw = ho * wo;
    let w2 = w
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, k))
        .unwrap();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut cols = vec![T::zero(); bs * k * hw];
    let mut out = ndarray::Array4::<T>::zeros((bs, co, ho, wo));
    let bias = b.as_slice().expect("conv2d: contiguous bias");
    for bi in 0..bs {
        let col = &mut cols[bi * k * hw..(bi + 1) * k * hw];
        let xb = &xs[bi * ch * h * wd..(bi + 1) * ch * h * wd];
        for cc in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (cc * kh + ki) * kw + kj;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy + ki;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let src = &xb[(cc * h + iy - ph) * wd..(cc * h + iy - ph + 1) * wd];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        // ix = ox + kj - pw must land in [0, wd)
                        let lo = pw.saturating_sub(kj);
                        let hi = (wd + pw).saturating_sub(kj).min(wo);
                        if lo < hi {
                            let off = lo + kj - pw;
                            drow[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                    }
                }
            }
        }
        let colv = ArrayView2::from_shape((k, hw), col).unwrap();
        let mut ob = out.slice_mut(s![bi, .., .., ..]);
        let mut ob2 = ob.view_mut().into_shape_with_order((co, hw)).unwrap();
        for (o, &bv) in ob2.axis_iter_mut(Axis(0)).zip(bias) {
            let mut o = o;
            o.fill(bv);
        }
        general_mat_mul(T::one(), &w2, &colv, T::one(), &mut ob2);
    }
    (out.into_dyn(), cols)
}

pub(crate) fn conv2d_backward<T: Float>(
    g: &ArrayD<T>,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    (ph, pw): (usize, usize),
    cols: &[T],
    need_x: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let g = g.view().into_dimensionality::<Ix4>().unwrap();
    let (bs, ch, h, wd) = x.view().into_dimensionality::<Ix4>().unwrap().dim();
    let wv = w.view().into_dimensionality::<Ix4>().unwrap();
    let (co, ci, kh, kw) = wv.dim();
    let (_, _, ho, wo) = g.dim();
    let k = ci * kh * kw;
    let hw = ho * wo;
    let w2 = wv
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, k))
        .unwrap();
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let mut gw2 = Array2::<T>::zeros((co, k));
    let mut gb = vec![T::zero(); co];
    let mut gx = if need_x {
        Some(vec![T::zero(); bs * ch * h * wd])
    } else {
        None
    };
    let mut dcol = Array2::<T>::zeros((k, hw));
    for bi in 0..bs {
        let gb2 = ArrayView2::from_shape((co, hw), &gs[bi * co * hw..(bi + 1) * co * hw]).unwrap();
        for (o, row) in gb.iter_mut().zip(gb2.axis_iter(Axis(0))) {
            *o += row.sum();
        }
        let colv = ArrayView2::from_shape((k, hw), &cols[bi * k * hw..(bi + 1) * k * hw]).unwrap();
        general_mat_mul(T::one(), &gb2, &colv.t(), T::one(), &mut gw2);
        if let Some(gx) = gx.as_mut() {
            general_mat_mul(T::one(), &w2.t(), &gb2, T::zero(), &mut dcol);
            let dcs = dcol.as_slice().unwrap();
            let gxb = &mut gx[bi * ch * h * wd..(bi + 1) * ch * h * wd];
            for cc in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (cc * kh + ki) * kw + kj;
                        let src = &dcs[row * hw..(row + 1) * hw];
                        for oy in 0..ho {
                            let iy = oy + ki;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let dst =
                                &mut gxb[(cc * h + iy - ph) * wd..(cc * h + iy - ph + 1) * wd];
                            let lo = pw.saturating_sub(kj);
                            let hi = (wd + pw).saturating_sub(kj).min(wo);
                            for ox in lo..hi {
                                dst[ox + kj - pw] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = gx.map(|v| ArrayD::from_shape_vec(IxDyn(&[bs, ch, h, wd]), v).unwrap());
    let gw = gw2.into_shape_with_order(IxDyn(&[co, ci, kh, kw])).unwrap();
    (gx, gw, ArrayD::from_shape_vec(IxDyn(&[co]), gb).unwrap())
}

pub(crate) fn max_pool_forward<T: Float>(
    x: &ArrayD<T>,
    (kh, kw): (usize, usize),
) -> (ArrayD<T>, Vec<usize>) {
    let xv = x.view().into_dimensionality::<Ix4>().expect("max_pool2d: 4-D input");
    let (bs, ch, h, w) = xv.dim();
    assert!(
        h % kh == 0 && w % kw == 0,
        "max_pool2d: {h}x{w} not divisible by {kh}x{kw}"
    );
    let (ho, wo) = (h / kh, w / kw);
    let xs = xv.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut out = Vec::with_capacity(bs * ch * ho * wo);
    let mut arg = Vec::with_capacity(bs * ch * ho * wo);
    for plane in 0..bs * ch {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * kh * w + ox * kw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let idx = base + (oy * kh + dy) * w + ox * kw + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[bs, ch, ho, wo]), out).unwrap(),
        arg,
    )
}

/// `(batch, channels, elements per channel plane, last-axis length)` of `[B, C, ..., L]`.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize, usize) {
    let b = shape[0];
    let ch = shape[1];
    let inner: usize = shape[2..].iter().product();
    let last = if shape.len() > 2 { shape[shape.len() - 1] } else { 1 };
    (b, ch, inner, last)
}

pub(crate) fn batch_norm_forward<T: Float>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    stats: NormStats<'_, T>,
    valid: Option<&[usize]>,
    eps: T,
) -> (ArrayD<T>, ArrayD<T>, Vec<T>, Option<BatchStats<T>>) {
    let shape = x.shape().to_vec();
    assert!(shape.len() >= 2, "batch_norm: needs [B, C, ...]");
    if valid.is_some() {
        assert!(shape.len() >= 3, "batch_norm: masking needs a position axis");
    }
    let (bs, ch, inner, last) = channel_layout(&shape);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let is_valid = |b: usize, j: usize| valid.is_none_or(|v| j % last < v[b]);
    let gamma = gamma.as_slice().unwrap();
    let beta = beta.as_slice().unwrap();

    let (mean, var_biased, out_stats) = match stats {
        NormStats::Batch => {
            let mut sum = vec![T::zero(); ch];
            let mut cnt = vec![0usize; ch];
            for b in 0..bs {
                for cc in 0..ch {
                    let base = (b * ch + cc) * inner;
                    for j in 0..inner {
                        if is_valid(b, j) {
                            sum[cc] += xs[base + j];
                            cnt[cc] += 1;
                        }
                    }
                }
            }
            let mean: Vec<T> = sum
                .iter()
                .zip(&cnt)
                .map(|(&s, &n)| if n > 0 { s / c(n as f64) } else { T::zero() })
                .collect();
            let mut sq = vec![T::zero(); ch];
            for b in 0..bs {
                for cc in 0..ch {
                    let base = (b * ch + cc) * inner;
                    for j in 0..inner {
                        if is_valid(b, j) {
                            let d = xs[base + j] - mean[cc];
                            sq[cc] += d * d;
                        }
                    }
                }
            }
            let biased: Vec<T> = sq
                .iter()
                .zip(&cnt)
                .map(|(&s, &n)| if n > 0 { s / c(n as f64) } else { T::zero() })
                .collect();
            let unbiased: Vec<T> = sq
                .iter()
                .zip(&cnt)
                .map(|(&s, &n)| if n > 1 { s / c((n - 1) as f64) } else { T::zero() })
                .collect();
            let st = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, biased, Some(st))
        }
        NormStats::Fixed { mean, var } => (mean.to_vec(), var.to_vec(), None),
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = vec![T::zero(); xs.len()];
    for b in 0..bs {
        for cc in 0..ch {
            let base = (b * ch + cc) * inner;
            for j in 0..inner {
                if is_valid(b, j) {
                    let xh = (xs[base + j] - mean[cc]) * inv_std[cc];
                    xhat[base + j] = xh;
                    y[base + j] = gamma[cc] * xh + beta[cc];
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&shape), y).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&shape), xhat).unwrap(),
        inv_std,
        out_stats,
    )
}

pub(crate) fn batch_norm_backward<T: Float>(
    g: &ArrayD<T>,
    xhat: &ArrayD<T>,
    gamma: &ArrayD<T>,
    inv_std: &[T],
    valid: Option<&[usize]>,
    batch_stats: bool,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let shape = xhat.shape().to_vec();
    let (bs, ch, inner, last) = channel_layout(&shape);
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let xh = xhat.as_slice().unwrap();
    let gamma = gamma.as_slice().unwrap();
    let is_valid = |b: usize, j: usize| valid.is_none_or(|v| j % last < v[b]);

    let mut ggamma = vec![T::zero(); ch];
    let mut gbeta = vec![T::zero(); ch];
    let mut cnt = vec![0usize; ch];
    for b in 0..bs {
        for cc in 0..ch {
            let base = (b * ch + cc) * inner;
            for j in 0..inner {
                if is_valid(b, j) {
                    ggamma[cc] += gs[base + j] * xh[base + j];
                    gbeta[cc] += gs[base + j];
                    cnt[cc] += 1;
                }
            }
        }
    }
    let mut gx = vec![T::zero(); xh.len()];
    for b in 0..bs {
        for cc in 0..ch {
            let base = (b * ch + cc) * inner;
            let m = c::<T>(cnt[cc].max(1) as f64);
            for j in 0..inner {
                if !is_valid(b, j) {
                    continue;
                }
                let dxhat = gs[base + j] * gamma[cc];
                gx[base + j] = if batch_stats {
                    // sum(dxhat) = gamma * gbeta, sum(dxhat * xhat) = gamma * ggamma
                    inv_std[cc] / m
                        * (m * dxhat - gamma[cc] * gbeta[cc] - xh[base + j] * gamma[cc] * ggamma[cc])
                } else {
                    dxhat * inv_std[cc]
                };
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[ch]), ggamma).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[ch]), gbeta).unwrap(),
    )
}

pub(crate) fn apply_position_mask<T: Float>(a: &mut ArrayD<T>, axis: usize, valid: &[usize]) {
    assert!(axis >= 1, "mask axis must not be the batch axis");
    assert_eq!(a.shape()[0], valid.len(), "mask: one length per item");
    let len = a.shape()[axis];
    for (b, &v) in valid.iter().enumerate() {
        if v >= len {
            continue;
        }
        let mut item = a.index_axis_mut(Axis(0), b);
        item.slice_axis_mut(Axis(axis - 1), ndarray::Slice::from(v..))
            .fill(T::zero());
    }
}

pub(crate) fn gru_forward<T: Float>(
    gx: &ArrayD<T>,
    h0: Option<&ArrayD<T>>,
    whh: &ArrayD<T>,
    bhh: &ArrayD<T>,
    lengths: Option<&[usize]>,
    reverse: bool,
) -> (ArrayD<T>, GruCache<T>) {
    let gx = gx.view().into_dimensionality::<Ix3>().expect("gru: gx must be [B,N,3H]");
    let whh = whh.view().into_dimensionality::<Ix2>().expect("gru: whh must be 2-D");
    let (bs, steps, h3) = gx.dim();
    let hid = h3 / 3;
    assert_eq!(whh.dim(), (hid, h3), "gru: whh shape");
    let bhh = bhh.as_slice().unwrap();
    let mut h = match h0 {
        Some(h0) => h0.view().into_dimensionality::<Ix2>().unwrap().to_owned(),
        None => Array2::zeros((bs, hid)),
    };
    let per = bs * hid;
    let mut cache = GruCache {
        batch: bs,
        steps,
        hidden: hid,
        h_prev: vec![T::zero(); steps * per],
        r: vec![T::zero(); steps * per],
        z: vec![T::zero(); steps * per],
        n: vec![T::zero(); steps * per],
        hh_n: vec![T::zero(); steps * per],
        active: vec![false; steps * bs],
    };
    let mut out = Array3::<T>::zeros((bs, steps, hid));
    let mut hh = Array2::<T>::zeros((bs, h3));
    for st in 0..steps {
        let t = if reverse { steps - 1 - st } else { st };
        for mut row in hh.axis_iter_mut(Axis(0)) {
            row.as_slice_mut().unwrap().copy_from_slice(bhh);
        }
        general_mat_mul(T::one(), &h, &whh, T::one(), &mut hh);
        for b in 0..bs {
            let active = lengths.is_none_or(|l| t < l[b]);
            cache.active[st * bs + b] = active;
            let gxr = gx.slice(s![b, t, ..]);
            for j in 0..hid {
                let idx = st * per + b * hid + j;
                let hp = h[[b, j]];
                let r = sigmoid(gxr[j] + hh[[b, j]]);
                let z = sigmoid(gxr[hid + j] + hh[[b, hid + j]]);
                let hn = hh[[b, 2 * hid + j]];
                let n = (gxr[2 * hid + j] + r * hn).tanh();
                cache.h_prev[idx] = hp;
                cache.r[idx] = r;
                cache.z[idx] = z;
                cache.n[idx] = n;
                cache.hh_n[idx] = hn;
                if active {
                    h[[b, j]] = (T::one() - z) * n + z * hp;
                }
                out[[b, t, j]] = h[[b, j]];
            }
        }
    }
    (out.into_dyn(), cache)
}

pub(crate) fn gru_backward<T: Float>(
    g: &ArrayD<T>,
    whh: &ArrayD<T>,
    cache: &GruCache<T>,
    reverse: bool,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (bs, steps, hid) = (cache.batch, cache.steps, cache.hidden);
    let per = bs * hid;
    let g = g.view().into_dimensionality::<Ix3>().unwrap();
    let whh = whh.view().into_dimensionality::<Ix2>().unwrap();
    let mut ggx = Array3::<T>::zeros((bs, steps, 3 * hid));
    let mut gw = Array2::<T>::zeros((hid, 3 * hid));
    let mut gb = vec![T::zero(); 3 * hid];
    let mut dh = Array2::<T>::zeros((bs, hid));
    let mut dhh = Array2::<T>::zeros((bs, 3 * hid));
    let mut dh_prev = Array2::<T>::zeros((bs, hid));
    for st in (0..steps).rev() {
        let t = if reverse { steps - 1 - st } else { st };
        dh += &g.slice(s![.., t, ..]);
        dhh.fill(T::zero());
        for b in 0..bs {
            if !cache.active[st * bs + b] {
                for j in 0..hid {
                    dh_prev[[b, j]] = dh[[b, j]];
                }
                continue;
            }
            for j in 0..hid {
                let idx = st * per + b * hid + j;
                let (r, z, n, hn, hp) = (
                    cache.r[idx],
                    cache.z[idx],
                    cache.n[idx],
                    cache.hh_n[idx],
                    cache.h_prev[idx],
                );
                let d = dh[[b, j]];
                let dn = d * (T::one() - z);
                let dz = d * (hp - n);
                let dan = dn * (T::one() - n * n);
                let daz = dz * z * (T::one() - z);
                let dar = dan * hn * r * (T::one() - r);
                ggx[[b, t, j]] = dar;
                ggx[[b, t, hid + j]] = daz;
                ggx[[b, t, 2 * hid + j]] = dan;
                dhh[[b, j]] = dar;
                dhh[[b, hid + j]] = daz;
                dhh[[b, 2 * hid + j]] = dan * r;
                dh_prev[[b, j]] = d * z;
            }
        }
        let hp = ArrayView2::from_shape((bs, hid), &cache.h_prev[st * per..(st + 1) * per]).unwrap();
        general_mat_mul(T::one(), &hp.t(), &dhh, T::one(), &mut gw);
        for row in dhh.axis_iter(Axis(0)) {
            for (o, &v) in gb.iter_mut().zip(row) {
                *o += v;
            }
        }
        general_mat_mul(T::one(), &dhh, &whh.t(), T::one(), &mut dh_prev);
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    (
        ggx.into_dyn(),
        dh.into_dyn(),
        gw.into_dyn(),
        ArrayD::from_shape_vec(IxDyn(&[3 * hid]), gb).unwrap(),
    )
}

pub(crate) fn masked_softmax<T: Float>(e: &ArrayD<T>, valid: &[usize]) -> ArrayD<T> {
    let e = e.view().into_dimensionality::<Ix2>().expect("softmax: [B, N]");
    let (bs, n) = e.dim();
    assert_eq!(bs, valid.len());
    let mut out = Array2::<T>::zeros((bs, n));
    for b in 0..bs {
        let v = valid[b].min(n);
        assert!(v >= 1, "softmax over zero valid positions");
        let m = (0..v).map(|i| e[[b, i]]).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for i in 0..v {
            let x = (e[[b, i]] - m).exp();
            out[[b, i]] = x;
            sum += x;
        }
        for i in 0..v {
            out[[b, i]] = out[[b, i]] / sum;
        }
    }
    out.into_dyn()
}

pub(crate) fn unfold1d<T: Float>(a: &ArrayD<T>, r: usize) -> ArrayD<T> {
    let a = a.view().into_dimensionality::<Ix2>().expect("unfold1d: [B, N]");
    let (bs, n) = a.dim();
    let half = r / 2;
    let mut out = Array3::<T>::zeros((bs, n, r));
    for b in 0..bs {
        for i in 0..n {
            for j in 0..r {
                let src = i + j;
                if src >= half && src - half < n {
                    out[[b, i, j]] = a[[b, src - half]];
                }
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn unfold1d_backward<T: Float>(g: &ArrayD<T>, r: usize) -> ArrayD<T> {
    let g = g.view().into_dimensionality::<Ix3>().unwrap();
    let (bs, n, _) = g.dim();
    let half = r / 2;
    let mut out = Array2::<T>::zeros((bs, n));
    for b in 0..bs {
        for i in 0..n {
            for j in 0..r {
                let src = i + j;
                if src >= half && src - half < n {
                    out[[b, src - half]] += g[[b, i, j]];
                }
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn weighted_sum<T: Float>(alpha: &ArrayD<T>, h: &ArrayD<T>) -> ArrayD<T> {
    let a = alpha.view().into_dimensionality::<Ix2>().unwrap();
    let h = h.view().into_dimensionality::<Ix3>().unwrap();
    let (bs, n, d) = h.dim();
    let mut out = Array2::<T>::zeros((bs, d));
    for b in 0..bs {
        for i in 0..n {
            let w = a[[b, i]];
            if w == T::zero() {
                continue;
            }
            out.row_mut(b).scaled_add(w, &h.slice(s![b, i, ..]));
        }
    }
    out.into_dyn()
}

pub(crate) fn weighted_sum_backward<T: Float>(
    g: &ArrayD<T>,
    alpha: &ArrayD<T>,
    h: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>) {
    let g = g.view().into_dimensionality::<Ix2>().unwrap();
    let a = alpha.view().into_dimensionality::<Ix2>().unwrap();
    let h = h.view().into_dimensionality::<Ix3>().unwrap();
    let (bs, n, _) = h.dim();
    let mut ga = Array2::<T>::zeros((bs, n));
    let mut gh = Array3::<T>::zeros(h.raw_dim());
    for b in 0..bs {
        let gb = g.row(b);
        for i in 0..n {
            ga[[b, i]] = h.slice(s![b, i, ..]).dot(&gb);
            gh.slice_mut(s![b, i, ..]).scaled_add(a[[b, i]], &gb);
        }
    }
    (ga.into_dyn(), gh.into_dyn())
}

pub(crate) fn masked_mean<T: Float>(x: &ArrayD<T>, valid: &[usize]) -> ArrayD<T> {
    let x = x.view().into_dimensionality::<Ix3>().expect("masked_mean: [B, N, D]");
    let (bs, n, d) = x.dim();
    let mut out = Array2::<T>::zeros((bs, d));
    for b in 0..bs {
        let v = valid[b].min(n);
        assert!(v >= 1, "mean over zero valid positions");
        for i in 0..v {
            out.row_mut(b).scaled_add(T::one(), &x.slice(s![b, i, ..]));
        }
        out.row_mut(b).mapv_inplace(|s| s / c(v as f64));
    }
    out.into_dyn()
}

pub(crate) fn masked_mean_backward<T: Float>(
    g: &ArrayD<T>,
    shape: &[usize],
    valid: &[usize],
) -> ArrayD<T> {
    let g = g.view().into_dimensionality::<Ix2>().unwrap();
    let (bs, n, d) = (shape[0], shape[1], shape[2]);
    let mut out = Array3::<T>::zeros((bs, n, d));
    for b in 0..bs {
        let v = valid[b].min(n);
        let scale = T::one() / c(v as f64);
        for i in 0..v {
            out.slice_mut(s![b, i, ..]).scaled_add(scale, &g.row(b));
        }
    }
    out.into_dyn()
}

/// Bin `i` of `parts` equal splits over `len` elements: `[floor(i*len/parts), ceil((i+1)*len/parts))`.
pub(crate) fn bin_range(i: usize, parts: usize, len: usize) -> (usize, usize) {
    let lo = i * len / parts;
    let hi = ((i + 1) * len).div_ceil(parts);
    (lo, hi.max(lo + 1).min(len.max(1)))
}

pub(crate) fn pyramid_max<T: Float>(
    x: &ArrayD<T>,
    valid: &[usize],
    levels: &[(usize, usize)],
) -> (ArrayD<T>, Vec<usize>) {
    let xv = x.view().into_dimensionality::<Ix4>().expect("pyramid pool: [B,C,H,W]");
    let (bs, ch, h, w) = xv.dim();
    let xs = xv.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let cells: usize = levels.iter().map(|&(a, b)| a * b).sum();
    let mut out = Vec::with_capacity(bs * ch * cells);
    let mut arg = Vec::with_capacity(bs * ch * cells);
    for b in 0..bs {
        let wv = valid[b].min(w);
        assert!(wv >= 1, "pyramid pool over zero valid columns");
        for &(lh, lw) in levels {
            for i in 0..lh {
                let (r0, r1) = bin_range(i, lh, h);
                for j in 0..lw {
                    let (c0, c1) = bin_range(j, lw, wv);
                    for cc in 0..ch {
                        let base = (b * ch + cc) * h * w;
                        let mut best = base + r0 * w + c0;
                        for y in r0..r1 {
                            for xx in c0..c1 {
                                let idx = base + y * w + xx;
                                if xs[idx] > xs[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(xs[best]);
                        arg.push(best);
                    }
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[bs, ch * cells]), out).unwrap(),
        arg,
    )
}

pub(crate) fn cross_entropy<T: Float>(
    logits: &ArrayD<T>,
    targets: &[usize],
    weights: &[T],
) -> (T, Array2<T>) {
    let cdim = *logits.shape().last().unwrap();
    let rows = logits.len() / cdim;
    assert_eq!(rows, targets.len(), "cross_entropy: one target per row");
    assert_eq!(rows, weights.len(), "cross_entropy: one weight per row");
    let l = logits
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cdim))
        .unwrap();
    let mut probs = Array2::<T>::zeros((rows, cdim));
    let mut total = T::zero();
    let mut wsum = T::zero();
    for i in 0..rows {
        let row = l.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let se: T = row.iter().map(|&z| (z - m).exp()).sum();
        let lse = m + se.ln();
        for k in 0..cdim {
            probs[[i, k]] = (row[k] - lse).exp();
        }
        if weights[i] != T::zero() {
            total += weights[i] * (lse - row[targets[i]]);
            wsum += weights[i];
        }
    }
    let loss = if wsum > T::zero() { total / wsum } else { T::zero() };
    (loss, probs)
}

pub(crate) fn cross_entropy_backward<T: Float>(
    probs: &Array2<T>,
    targets: &[usize],
    weights: &[T],
    scale: T,
) -> Array2<T> {
    let wsum: T = weights.iter().copied().sum();
    let mut g = Array2::<T>::zeros(probs.raw_dim());
    if wsum <= T::zero() {
        return g;
    }
    for (i, &t) in targets.iter().enumerate() {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        let f = w * scale / wsum;
        for k in 0..probs.ncols() {
            g[[i, k]] = probs[[i, k]] * f;
        }
        g[[i, t]] -= f;
    }
    g
}
