//! Forward and backward kernels. Backward functions accumulate into
//! parameter gradients and return the input gradient.

use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Fmap};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

/// 1×1 projection, `w` is `cout × cin`.
pub fn linear(x: &Fmap, w: &[f64], b: &[f64], cout: usize) -> Fmap {
    debug_assert_eq!(w.len(), cout * x.c);
    let hw = x.hw();
    let mut y = Fmap::zeros(cout, x.h, x.w);
    for (o, &bo) in b.iter().enumerate() {
        y.data[o * hw..(o + 1) * hw].fill(bo);
    }
    matmul_acc(w, &x.data, &mut y.data, cout, x.c, hw);
    y
}

pub fn linear_backward(x: &Fmap, w: &[f64], dy: &Fmap, dw: &mut [f64], db: &mut [f64]) -> Fmap {
    let hw = x.hw();
    for (o, g) in db.iter_mut().enumerate() {
        *g += dy.plane(o).iter().sum::<f64>();
    }
    matmul_a_bt_acc(&dy.data, &x.data, dw, dy.c, hw, x.c);
    let mut dx = Fmap::zeros(x.c, x.h, x.w);
    matmul_at_b_acc(w, &dy.data, &mut dx.data, dy.c, x.c, hw);
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, n: usize) -> Result<usize> {
        let span = n + 2 * self.pad;
        if self.k == 0 || self.stride == 0 || span < self.k {
            return Err(Error::Argument(format!("kernel {self:?} does not fit size {n}")));
        }
        Ok((span - self.k) / self.stride + 1)
    }

    /// Source index per output position for kernel offset `kk`, clamped
    /// to the border.
    fn taps(&self, n: usize, out: usize, kk: usize) -> Vec<usize> {
        (0..out)
            .map(|o| {
                let s = (o * self.stride + kk) as isize - self.pad as isize;
                s.clamp(0, n as isize - 1) as usize
            })
            .collect()
    }
}

/// Unfolded input with replicate padding, `(cin·k²) × (oh·ow)`.
pub struct Im2Col {
    pub data: Vec<f64>,
    pub oh: usize,
    pub ow: usize,
}

fn im2col(x: &Fmap, g: ConvGeom) -> Result<Im2Col> {
    let (oh, ow) = (g.out_dim(x.h)?, g.out_dim(x.w)?);
    let n = oh * ow;
    let mut data = vec![0.0; x.c * g.k * g.k * n];
    let rows: Vec<Vec<usize>> = (0..g.k).map(|kr| g.taps(x.h, oh, kr)).collect();
    let cols: Vec<Vec<usize>> = (0..g.k).map(|kc| g.taps(x.w, ow, kc)).collect();
    for i in 0..x.c {
        let plane = x.plane(i);
        for kr in 0..g.k {
            for kc in 0..g.k {
                let row = ((i * g.k + kr) * g.k + kc) * n;
                let dst = &mut data[row..row + n];
                for (orow, &sr) in rows[kr].iter().enumerate() {
                    let src = &plane[sr * x.w..(sr + 1) * x.w];
                    for (ocol, &sc) in cols[kc].iter().enumerate() {
                        dst[orow * ow + ocol] = src[sc];
                    }
                }
            }
        }
    }
    Ok(Im2Col { data, oh, ow })
}

fn col2im(dcol: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize) -> Fmap {
    let n = oh * ow;
    let mut dx = Fmap::zeros(c, h, w);
    let rows: Vec<Vec<usize>> = (0..g.k).map(|kr| g.taps(h, oh, kr)).collect();
    let cols: Vec<Vec<usize>> = (0..g.k).map(|kc| g.taps(w, ow, kc)).collect();
    for i in 0..c {
        let plane = &mut dx.data[i * h * w..(i + 1) * h * w];
        for kr in 0..g.k {
            for kc in 0..g.k {
                let row = ((i * g.k + kr) * g.k + kc) * n;
                let src = &dcol[row..row + n];
                for (orow, &sr) in rows[kr].iter().enumerate() {
                    for (ocol, &sc) in cols[kc].iter().enumerate() {
                        plane[sr * w + sc] += src[orow * ow + ocol];
                    }
                }
            }
        }
    }
    dx
}

/// Dense convolution with replicate padding, `w` is `cout × cin × k × k`.
pub fn conv2d(x: &Fmap, w: &[f64], b: &[f64], cout: usize, g: ConvGeom) -> Result<(Fmap, Im2Col)> {
    let ckk = x.c * g.k * g.k;
    if w.len() != cout * ckk || b.len() != cout {
        return Err(Error::Argument(format!(
            "conv weights {} / bias {} do not match {cout}x{}x{}x{}",
            w.len(),
            b.len(),
            x.c,
            g.k,
            g.k
        )));
    }
    let col = im2col(x, g)?;
    let n = col.oh * col.ow;
    let mut y = Fmap::zeros(cout, col.oh, col.ow);
    for (o, &bo) in b.iter().enumerate() {
        y.data[o * n..(o + 1) * n].fill(bo);
    }
    matmul_acc(w, &col.data, &mut y.data, cout, ckk, n);
    Ok((y, col))
}

pub fn conv2d_backward(
    x_shape: (usize, usize, usize),
    col: &Im2Col,
    w: &[f64],
    dy: &Fmap,
    g: ConvGeom,
    dw: &mut [f64],
    db: &mut [f64],
) -> Fmap {
    let (c, h, wd) = x_shape;
    let ckk = c * g.k * g.k;
    let n = col.oh * col.ow;
    for (o, gb) in db.iter_mut().enumerate() {
        *gb += dy.plane(o).iter().sum::<f64>();
    }
    matmul_a_bt_acc(&dy.data, &col.data, dw, dy.c, n, ckk);
    let mut dcol = vec![0.0; ckk * n];
    matmul_at_b_acc(w, &dy.data, &mut dcol, dy.c, ckk, n);
    col2im(&dcol, c, h, wd, g, col.oh, col.ow)
}

/// Per-pixel normalization over channels.
pub struct LnCache {
    pub xhat: Fmap,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Fmap, gamma: &[f64], beta: &[f64]) -> (Fmap, LnCache) {
    let (c, hw) = (x.c, x.hw());
    let inv_c = 1.0 / c as f64;
    let mut mean = vec![0.0; hw];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(x.plane(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![0.0; hw];
    for ch in 0..c {
        for ((s, v), m) in var.iter_mut().zip(x.plane(ch)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s * inv_c + LN_EPS).sqrt()).collect();
    let mut xhat = Fmap::zeros(c, x.h, x.w);
    let mut y = Fmap::zeros(c, x.h, x.w);
    for ch in 0..c {
        let src = x.plane(ch);
        let xh = &mut xhat.data[ch * hw..(ch + 1) * hw];
        let yo = &mut y.data[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            xh[p] = (src[p] - mean[p]) * inv_std[p];
            yo[p] = gamma[ch] * xh[p] + beta[ch];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    gamma: &[f64],
    dy: &Fmap,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Fmap {
    let xhat = &cache.xhat;
    let (c, hw) = (xhat.c, xhat.hw());
    let inv_c = 1.0 / c as f64;
    let mut m1 = vec![0.0; hw];
    let mut m2 = vec![0.0; hw];
    for ch in 0..c {
        let (g, xh) = (dy.plane(ch), xhat.plane(ch));
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for p in 0..hw {
            sg += g[p];
            sgx += g[p] * xh[p];
            let d = g[p] * gamma[ch];
            m1[p] += d;
            m2[p] += d * xh[p];
        }
        dbeta[ch] += sg;
        dgamma[ch] += sgx;
    }
    let mut dx = Fmap::zeros(c, xhat.h, xhat.w);
    for ch in 0..c {
        let (g, xh) = (dy.plane(ch), xhat.plane(ch));
        let out = &mut dx.data[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            let d = g[p] * gamma[ch];
            out[p] = cache.inv_std[p] * (d - m1[p] * inv_c - xh[p] * m2[p] * inv_c);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: &Fmap) -> Fmap {
    let data = x
        .data
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
        .collect();
    Fmap { c: x.c, h: x.h, w: x.w, data }
}

pub fn gelu_backward(x: &Fmap, dy: &Fmap) -> Fmap {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
            let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
            g * d
        })
        .collect();
    Fmap { c: x.c, h: x.h, w: x.w, data }
}

/// Bilinear sample geometry of one tap at one pixel.
#[derive(Clone, Copy)]
struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fy: f64,
    fx: f64,
    /// Clamp derivative along rows / cols, 0 outside the grid.
    ky: f64,
    kx: f64,
}

fn clamp_axis(pos: f64, n: usize) -> (usize, usize, f64, f64) {
    let hi = (n - 1) as f64;
    let inside = if (0.0..=hi).contains(&pos) { 1.0 } else { 0.0 };
    let p = pos.clamp(0.0, hi);
    let i0 = (p.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64, inside)
}

fn taps_for(j: usize, k: usize, off: &Fmap) -> Vec<Tap> {
    let (h, w) = (off.h, off.w);
    let half = (k / 2) as f64;
    let dr = (j / k) as f64 - half;
    let dc = (j % k) as f64 - half;
    let (oy, ox) = (off.plane(2 * j), off.plane(2 * j + 1));
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let (y0, y1, fy, ky) = clamp_axis(r as f64 + dr + oy[p], h);
            let (x0, x1, fx, kx) = clamp_axis(c as f64 + dc + ox[p], w);
            out.push(Tap { i00: y0 * w + x0, i01: y0 * w + x1, i10: y1 * w + x0, i11: y1 * w + x1, fy, fx, ky, kx });
        }
    }
    out
}

fn check_offset_shapes(x: &Fmap, off: &Fmap, w: &[f64], k: usize) -> Result<()> {
    let kk = k * k;
    if k == 0 || k % 2 == 0 {
        return Err(Error::Argument(format!("offset kernel size {k} must be odd")));
    }
    if off.c != 2 * kk || off.h != x.h || off.w != x.w {
        return Err(Error::Argument(format!(
            "offsets {}x{}x{} do not match (2*{kk}, {}, {})",
            off.c, off.h, off.w, x.h, x.w
        )));
    }
    if w.len() != x.c * kk {
        return Err(Error::Argument(format!("{} aggregation weights for {} channels x {kk} taps", w.len(), x.c)));
    }
    Ok(())
}

/// Depthwise aggregation over a `k × k` grid displaced per pixel by
/// `off` (channel `2j` rows, `2j+1` cols), bilinear with border clamp.
/// `w` is `c × k²`.
pub fn offset_aggregate(x: &Fmap, off: &Fmap, w: &[f64], k: usize) -> Result<Fmap> {
    check_offset_shapes(x, off, w, k)?;
    let (hw, kk) = (x.hw(), k * k);
    let mut y = Fmap::zeros(x.c, x.h, x.w);
    for j in 0..kk {
        let taps = taps_for(j, k, off);
        for ch in 0..x.c {
            let wj = w[ch * kk + j];
            let src = x.plane(ch);
            let out = &mut y.data[ch * hw..(ch + 1) * hw];
            for (o, t) in out.iter_mut().zip(&taps) {
                let top = src[t.i00] + t.fx * (src[t.i01] - src[t.i00]);
                let bot = src[t.i10] + t.fx * (src[t.i11] - src[t.i10]);
                *o += wj * (top + t.fy * (bot - top));
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, doff)` and accumulates into `dw`.
pub fn offset_aggregate_backward(
    x: &Fmap,
    off: &Fmap,
    w: &[f64],
    k: usize,
    dy: &Fmap,
    dw: &mut [f64],
) -> Result<(Fmap, Fmap)> {
    check_offset_shapes(x, off, w, k)?;
    let (hw, kk) = (x.hw(), k * k);
    let mut dx = Fmap::zeros(x.c, x.h, x.w);
    let mut doff = Fmap::zeros(off.c, off.h, off.w);
    for j in 0..kk {
        let taps = taps_for(j, k, off);
        let mut gy = vec![0.0; hw];
        let mut gx = vec![0.0; hw];
        for ch in 0..x.c {
            let wj = w[ch * kk + j];
            let src = x.plane(ch);
            let g = dy.plane(ch);
            let dxc = &mut dx.data[ch * hw..(ch + 1) * hw];
            let mut dwj = 0.0;
            for (p, t) in taps.iter().enumerate() {
                let (v00, v01, v10, v11) = (src[t.i00], src[t.i01], src[t.i10], src[t.i11]);
                let top = v00 + t.fx * (v01 - v00);
                let bot = v10 + t.fx * (v11 - v10);
                dwj += g[p] * (top + t.fy * (bot - top));
                let s = wj * g[p];
                let (ax, ay) = (t.fx, t.fy);
                dxc[t.i00] += s * (1.0 - ay) * (1.0 - ax);
                dxc[t.i01] += s * (1.0 - ay) * ax;
                dxc[t.i10] += s * ay * (1.0 - ax);
                dxc[t.i11] += s * ay * ax;
                gy[p] += s * (bot - top);
                gx[p] += s * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
            }
            dw[ch * kk + j] += dwj;
        }
        let (oy, ox) = doff.data[2 * j * hw..(2 * j + 2) * hw].split_at_mut(hw);
        for (p, t) in taps.iter().enumerate() {
            oy[p] = gy[p] * t.ky;
            ox[p] = gx[p] * t.kx;
        }
    }
    Ok((dx, doff))
}

pub fn upsample_nearest(x: &Fmap, f: usize) -> Fmap {
    let (h, w) = (x.h * f, x.w * f);
    let mut y = Fmap::zeros(x.c, h, w);
    for ch in 0..x.c {
        let src = x.plane(ch);
        let dst = &mut y.data[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = src[(r / f) * x.w + c / f];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(dy: &Fmap, f: usize) -> Fmap {
    let (h, w) = (dy.h / f, dy.w / f);
    let mut dx = Fmap::zeros(dy.c, h, w);
    for ch in 0..dy.c {
        let src = dy.plane(ch);
        let dst = &mut dx.data[ch * h * w..(ch + 1) * h * w];
        for r in 0..dy.h {
            for c in 0..dy.w {
                dst[(r / f) * w + c / f] += src[r * dy.w + c];
            }
        }
    }
    dx
}

fn shuffle_index(c: usize, r: usize, i: usize, j: usize) -> usize {
    (c * r + i) * r + j
}

/// `(c·r², h, w) → (c, h·r, w·r)`.
pub fn pixel_shuffle(x: &Fmap, r: usize) -> Fmap {
    let c = x.c / (r * r);
    let (h, w) = (x.h * r, x.w * r);
    let mut y = Fmap::zeros(c, h, w);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src = x.plane(shuffle_index(ch, r, i, j));
                for a in 0..x.h {
                    let row = &mut y.data[(ch * h + a * r + i) * w..(ch * h + a * r + i + 1) * w];
                    for b in 0..x.w {
                        row[b * r + j] = src[a * x.w + b];
                    }
                }
            }
        }
    }
    y
}

pub fn pixel_unshuffle(y: &Fmap, r: usize) -> Fmap {
    let (h, w) = (y.h / r, y.w / r);
    let mut x = Fmap::zeros(y.c * r * r, h, w);
    for ch in 0..y.c {
        for i in 0..r {
            for j in 0..r {
                let base = shuffle_index(ch, r, i, j) * h * w;
                for a in 0..h {
                    for b in 0..w {
                        x.data[base + a * w + b] = y.at(ch, a * r + i, b * r + j);
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, GradCheck};
    use crate::rng::{keyed, Stream};
    use rand::Rng;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64, scale: f64) -> Fmap {
        let mut rng = keyed(seed, Stream::GradCheck, &[c as u64, h as u64, w as u64]);
        Fmap { c, h, w, data: (0..c * h * w).map(|_| rng.random_range(-scale..scale)).collect() }
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = keyed(seed, Stream::GradCheck, &[n as u64, 99]);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &Fmap, b: &Fmap) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Brute-force depthwise convolution with border clamping.
    fn depthwise_oracle(x: &Fmap, w: &[f64], k: usize, shift_c: isize) -> Fmap {
        let half = (k / 2) as isize;
        let mut y = Fmap::zeros(x.c, x.h, x.w);
        for ch in 0..x.c {
            for r in 0..x.h as isize {
                for c in 0..x.w as isize {
                    let mut s = 0.0;
                    for j in 0..k * k {
                        let rr = (r + (j / k) as isize - half).clamp(0, x.h as isize - 1);
                        let cc = (c + (j % k) as isize - half + shift_c).clamp(0, x.w as isize - 1);
                        s += w[ch * k * k + j] * x.at(ch, rr as usize, cc as usize);
                    }
                    y.data[(ch * x.h + r as usize) * x.w + c as usize] = s;
                }
            }
        }
        y
    }

    #[test]
    fn zero_offsets_are_plain_convolution() {
        let x = rand_map(3, 7, 9, 1, 1.0);
        let w = rand_vec(27, 2);
        let off = Fmap::zeros(18, 7, 9);
        let y = offset_aggregate(&x, &off, &w, 3).unwrap();
        assert!(y.max_abs_diff(&depthwise_oracle(&x, &w, 3, 0)) < 1e-12);
    }

    #[test]
    fn unit_column_offset_shifts_input() {
        let x = rand_map(2, 8, 10, 3, 1.0);
        let w = rand_vec(18, 4);
        let mut off = Fmap::zeros(18, 8, 10);
        for j in 0..9 {
            off.data[(2 * j + 1) * 80..(2 * j + 2) * 80].fill(1.0);
        }
        let y = offset_aggregate(&x, &off, &w, 3).unwrap();
        let want = depthwise_oracle(&x, &w, 3, 1);
        for ch in 0..2 {
            for r in 1..7 {
                for c in 1..8 {
                    assert!((y.at(ch, r, c) - want.at(ch, r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn offset_shape_errors() {
        let x = rand_map(2, 4, 4, 5, 1.0);
        let w = rand_vec(18, 6);
        assert!(offset_aggregate(&x, &Fmap::zeros(16, 4, 4), &w, 3).is_err());
        assert!(offset_aggregate(&x, &Fmap::zeros(18, 4, 5), &w, 3).is_err());
        assert!(offset_aggregate(&x, &Fmap::zeros(18, 4, 4), &w[1..], 3).is_err());
    }

    /// Offsets drawn away from integers so no sample sits on a bilinear kink.
    fn off_integer_offsets(c: usize, h: usize, w: usize, seed: u64) -> Fmap {
        let mut o = rand_map(c, h, w, seed, 1.4);
        for v in &mut o.data {
            let frac = *v - v.round();
            if frac.abs() < 0.05 {
                *v += 0.1;
            }
        }
        o
    }

    #[test]
    fn offset_aggregate_gradients() {
        let (c, h, w, k) = (3, 6, 7, 3);
        let x = rand_map(c, h, w, 7, 1.0);
        let off = off_integer_offsets(2 * k * k, h, w, 8);
        let wt = rand_vec(c * k * k, 9);
        let r = rand_map(c, h, w, 10, 1.0);
        let loss = |x: &Fmap, off: &Fmap, wt: &[f64]| dot(&offset_aggregate(x, off, wt, k).unwrap(), &r);
        let mut dw = vec![0.0; wt.len()];
        let (dx, doff) = offset_aggregate_backward(&x, &off, &wt, k, &r, &mut dw).unwrap();
        let gc = GradCheck { eps: 1e-3, floor: 1e-6, samples: 100, seed: 11 };
        let e_off = check_gradient(&gc, &off.data, &doff.data, |v| {
            loss(&x, &Fmap { data: v.to_vec(), ..off.clone() }, &wt)
        });
        let e_x = check_gradient(&gc, &x.data, &dx.data, |v| loss(&Fmap { data: v.to_vec(), ..x.clone() }, &off, &wt));
        let e_w = check_gradient(&gc, &wt, &dw, |v| loss(&x, &off, v));
        assert!(e_off < 1e-4, "offsets {e_off}");
        assert!(e_x < 1e-6, "features {e_x}");
        assert!(e_w < 1e-6, "weights {e_w}");
    }

    #[test]
    fn linear_gradients() {
        let x = rand_map(5, 3, 4, 12, 1.0);
        let (w, b) = (rand_vec(20, 13), rand_vec(4, 14));
        let r = rand_map(4, 3, 4, 15, 1.0);
        let mut dw = vec![0.0; 20];
        let mut db = vec![0.0; 4];
        let dx = linear_backward(&x, &w, &r, &mut dw, &mut db);
        let gc = GradCheck { eps: 1e-5, floor: 1e-6, samples: 100, seed: 16 };
        let f = |x: &Fmap, w: &[f64], b: &[f64]| dot(&linear(x, w, b, 4), &r);
        assert!(check_gradient(&gc, &w, &dw, |v| f(&x, v, &b)) < 1e-6);
        assert!(check_gradient(&gc, &b, &db, |v| f(&x, &w, v)) < 1e-6);
        assert!(check_gradient(&gc, &x.data, &dx.data, |v| f(&Fmap { data: v.to_vec(), ..x.clone() }, &w, &b)) < 1e-6);
    }

    #[test]
    fn conv_matches_brute_force_and_gradients() {
        for g in [ConvGeom { k: 3, stride: 1, pad: 1 }, ConvGeom { k: 4, stride: 4, pad: 0 }, ConvGeom { k: 2, stride: 2, pad: 0 }] {
            let x = rand_map(3, 8, 8, 17, 1.0);
            let cout = 2;
            let (w, b) = (rand_vec(cout * 3 * g.k * g.k, 18), rand_vec(cout, 19));
            let (y, col) = conv2d(&x, &w, &b, cout, g).unwrap();
            for o in 0..cout {
                for r in 0..y.h {
                    for c in 0..y.w {
                        let mut s = b[o];
                        for i in 0..3 {
                            for kr in 0..g.k {
                                for kc in 0..g.k {
                                    let rr = ((r * g.stride + kr) as isize - g.pad as isize).clamp(0, 7) as usize;
                                    let cc = ((c * g.stride + kc) as isize - g.pad as isize).clamp(0, 7) as usize;
                                    s += w[((o * 3 + i) * g.k + kr) * g.k + kc] * x.at(i, rr, cc);
                                }
                            }
                        }
                        assert!((y.at(o, r, c) - s).abs() < 1e-12);
                    }
                }
            }
            let r = rand_map(cout, y.h, y.w, 20, 1.0);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; cout];
            let dx = conv2d_backward((3, 8, 8), &col, &w, &r, g, &mut dw, &mut db);
            let f = |x: &Fmap, w: &[f64]| dot(&conv2d(x, w, &b, cout, g).unwrap().0, &r);
            let gc = GradCheck { eps: 1e-5, floor: 1e-6, samples: 100, seed: 21 };
            assert!(check_gradient(&gc, &w, &dw, |v| f(&x, v)) < 1e-6);
            assert!(check_gradient(&gc, &x.data, &dx.data, |v| f(&Fmap { data: v.to_vec(), ..x.clone() }, &w)) < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let x = rand_map(6, 3, 5, 22, 2.0);
        let (g, b) = (rand_vec(6, 23), rand_vec(6, 24));
        let r = rand_map(6, 3, 5, 25, 1.0);
        let (y, cache) = layer_norm(&x, &g, &b);
        for p in 0..15 {
            let m: f64 = (0..6).map(|c| cache.xhat.data[c * 15 + p]).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(y.c, 6);
        let mut dg = vec![0.0; 6];
        let mut dbeta = vec![0.0; 6];
        let dx = layer_norm_backward(&cache, &g, &r, &mut dg, &mut dbeta);
        let f = |x: &Fmap, g: &[f64], b: &[f64]| dot(&layer_norm(x, g, b).0, &r);
        let gc = GradCheck { eps: 1e-5, floor: 1e-6, samples: 100, seed: 26 };
        assert!(check_gradient(&gc, &x.data, &dx.data, |v| f(&Fmap { data: v.to_vec(), ..x.clone() }, &g, &b)) < 1e-6);
        assert!(check_gradient(&gc, &g, &dg, |v| f(&x, v, &b)) < 1e-6);
        assert!(check_gradient(&gc, &b, &dbeta, |v| f(&x, &g, v)) < 1e-6);
    }

    #[test]
    fn gelu_values_and_gradient() {
        let x = Fmap::from_vec(1, 1, 3, vec![0.0, 1.0, -1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data[0], 0.0);
        assert!((y.data[1] - 0.841_191_990_607_477_6).abs() < 1e-12);
        assert!((y.data[2] + 0.158_808_009_392_522_4).abs() < 1e-12);
        let x = rand_map(2, 4, 4, 27, 3.0);
        let r = rand_map(2, 4, 4, 28, 1.0);
        let dx = gelu_backward(&x, &r);
        let gc = GradCheck { eps: 1e-5, floor: 1e-6, samples: 32, seed: 29 };
        assert!(check_gradient(&gc, &x.data, &dx.data, |v| dot(&gelu(&Fmap { data: v.to_vec(), ..x.clone() }), &r)) < 1e-6);
    }

    #[test]
    fn resampling_adjoints() {
        let x = rand_map(2, 3, 4, 30, 1.0);
        let u = upsample_nearest(&x, 2);
        assert_eq!((u.h, u.w), (6, 8));
        assert_eq!(u.at(1, 5, 7), x.at(1, 2, 3));
        let r = rand_map(2, 6, 8, 31, 1.0);
        assert!((dot(&u, &r) - dot(&x, &upsample_nearest_backward(&r, 2))).abs() < 1e-12);

        let x = rand_map(32, 2, 3, 32, 1.0);
        let s = pixel_shuffle(&x, 4);
        assert_eq!((s.c, s.h, s.w), (2, 8, 12));
        assert_eq!(s.at(1, 5, 7), x.at((4 + 1) * 4 + 3, 1, 1));
        assert_eq!(pixel_unshuffle(&s, 4), x);
    }
}
