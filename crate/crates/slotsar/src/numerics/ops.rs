//! Forward and adjoint kernels used by the graph.
//!
//! Everything here is plain tensor math with a fixed accumulation order,
//! so results are bit-deterministic for identical inputs.

use crate::numerics::tensor::Tensor;

/// Elementwise binary with scalar broadcast on either side.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.numel() == 1 && b.numel() > 1 {
        let av = a.data()[0];
        return Tensor::new(
            b.shape().to_vec(),
            b.data().iter().map(|&bv| f(av, bv)).collect(),
        )
        .unwrap();
    }
    if b.numel() == 1 && a.numel() > 1 {
        let bv = b.data()[0];
        return Tensor::new(
            a.shape().to_vec(),
            a.data().iter().map(|&av| f(av, bv)).collect(),
        )
        .unwrap();
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&av, &bv)| f(av, bv))
            .collect(),
    )
    .unwrap()
}

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b.data()[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// C[m,p] = A[m,n] · B[p,n]^T (i.e. A · Bᵀ without materializing Bᵀ).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let p = b.rows();
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data()[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b.data()[j * n..(j + 1) * n];
            out[i * p + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, p], out).unwrap()
}

/// C[k,n] = A[m,k]^T · B[m,n] (i.e. Aᵀ · B without materializing Aᵀ).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let brow = &b.data()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![k, n], out).unwrap()
}

pub fn transpose(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x.data()[r * n + c];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

/// Sum along `axis` of a 2-d tensor (0 → [cols], 1 → [rows]).
pub fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    if axis == 0 {
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += x.data()[r * n + c];
            }
        }
        Tensor::new(vec![n], out).unwrap()
    } else {
        let mut out = vec![0.0; m];
        for r in 0..m {
            out[r] = x.data()[r * n..(r + 1) * n].iter().sum();
        }
        Tensor::new(vec![m], out).unwrap()
    }
}

/// Numerically stable softmax along `axis` of a 2-d tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    if axis == 1 {
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..n {
                let e = (row[c] - mx).exp();
                out[r * n + c] = e;
                z += e;
            }
            for c in 0..n {
                out[r * n + c] /= z;
            }
        }
    } else {
        for c in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for r in 0..m {
                mx = mx.max(x.data()[r * n + c]);
            }
            let mut z = 0.0;
            for r in 0..m {
                let e = (x.data()[r * n + c] - mx).exp();
                out[r * n + c] = e;
                z += e;
            }
            for r in 0..m {
                out[r * n + c] /= z;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// dx = y ⊙ (g − Σ_axis(g ⊙ y)) along the normalized axis.
pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (m, n) = (y.rows(), y.cols());
    let mut out = vec![0.0; m * n];
    if axis == 1 {
        for r in 0..m {
            let dot: f64 = (0..n).map(|c| g.data()[r * n + c] * y.data()[r * n + c]).sum();
            for c in 0..n {
                out[r * n + c] = y.data()[r * n + c] * (g.data()[r * n + c] - dot);
            }
        }
    } else {
        for c in 0..n {
            let dot: f64 = (0..m).map(|r| g.data()[r * n + c] * y.data()[r * n + c]).sum();
            for r in 0..m {
                out[r * n + c] = y.data()[r * n + c] * (g.data()[r * n + c] - dot);
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Row-wise normalization of a 2-d tensor: y = (x − μ_row) / √(σ²_row + ε).
/// Returns the normalized tensor and per-row 1/√(σ²+ε).
pub fn layer_norm(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for r in 0..m {
        let row = &x.data()[r * n..(r + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..n {
            out[r * n + c] = (row[c] - mean) * is;
        }
    }
    (Tensor::new(vec![m, n], out).unwrap(), inv_std)
}

/// dx = inv_std ⊙ (g − mean_row(g) − y ⊙ mean_row(g ⊙ y)).
pub fn layer_norm_backward(y: &Tensor, g: &Tensor, inv_std: &[f64]) -> Tensor {
    let (m, n) = (y.rows(), y.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let yr = &y.data()[r * n..(r + 1) * n];
        let gr = &g.data()[r * n..(r + 1) * n];
        let gm: f64 = gr.iter().sum::<f64>() / n as f64;
        let gym: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for c in 0..n {
            out[r * n + c] = inv_std[r] * (gr[c] - gm - yr[c] * gym);
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Column-wise normalization: y = (x − μ_col) / √(σ²_col + ε).
/// Returns (y, mean, biased var, inv_std) per column.
pub fn batch_norm(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            mean[c] += x.data()[r * n + c];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    for r in 0..m {
        for c in 0..n {
            let d = x.data()[r * n + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in &mut var {
        *v /= m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[r * n + c] = (x.data()[r * n + c] - mean[c]) * inv_std[c];
        }
    }
    (Tensor::new(vec![m, n], out).unwrap(), mean, var, inv_std)
}

/// dx = inv_std ⊙ (g − mean_col(g) − y ⊙ mean_col(g ⊙ y)).
pub fn batch_norm_backward(y: &Tensor, g: &Tensor, inv_std: &[f64]) -> Tensor {
    let (m, n) = (y.rows(), y.cols());
    let mut gm = vec![0.0; n];
    let mut gym = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            gm[c] += g.data()[r * n + c];
            gym[c] += g.data()[r * n + c] * y.data()[r * n + c];
        }
    }
    for c in 0..n {
        gm[c] /= m as f64;
        gym[c] /= m as f64;
    }
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[r * n + c] =
                inv_std[c] * (g.data()[r * n + c] - gm[c] - y.data()[r * n + c] * gym[c]);
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Apply f(x[r,c], v[c]) over a 2-d tensor.
pub fn row_broadcast(x: &Tensor, v: &[f64], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[r * n + c] = f(x.data()[r * n + c], v[c]);
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Scale row r of x by v[r].
pub fn scale_rows(x: &Tensor, v: &[f64]) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[r * n + c] = x.data()[r * n + c] * v[r];
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn avg_pool2d(x: &Tensor, f: usize) -> Tensor {
    let (h, w) = (x.rows(), x.cols());
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..f {
                for dj in 0..f {
                    s += x.data()[(i * f + di) * w + (j * f + dj)];
                }
            }
            out[i * ow + j] = s * inv;
        }
    }
    Tensor::new(vec![oh, ow], out).unwrap()
}

pub fn avg_pool2d_backward(g: &Tensor, in_shape: &[usize], f: usize) -> Tensor {
    let (h, w) = (in_shape[0], in_shape[1]);
    let ow = w / f;
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = g.data()[(r / f) * ow + (c / f)] * inv;
        }
    }
    Tensor::new(vec![h, w], out).unwrap()
}

/// Source coordinate and lerp weight for one output index under
/// half-pixel-center mapping.
#[inline]
fn lerp_coords(o: usize, osz: usize, isz: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * isz as f64 / osz as f64 - 0.5;
    let src = src.clamp(0.0, (isz - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(isz - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, wy) = lerp_coords(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = lerp_coords(ox, ow, w);
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            out[oy * ow + ox] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                + wy * ((1.0 - wx) * v10 + wx * v11);
        }
    }
    out
}

pub fn bilinear_resize_backward(
    g: &[f64],
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for oy in 0..oh {
        let (y0, y1, wy) = lerp_coords(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = lerp_coords(ox, ow, w);
            let gv = g[oy * ow + ox];
            out[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
            out[y0 * w + x1] += gv * (1.0 - wy) * wx;
            out[y1 * w + x0] += gv * wy * (1.0 - wx);
            out[y1 * w + x1] += gv * wy * wx;
        }
    }
    out
}

/// Pointwise complex product of [2,H,W] fields.
pub fn complex_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let hw = a.numel() / 2;
    let (ar, ai) = a.data().split_at(hw);
    let (br, bi) = b.data().split_at(hw);
    let mut out = vec![0.0; 2 * hw];
    for k in 0..hw {
        out[k] = ar[k] * br[k] - ai[k] * bi[k];
        out[hw + k] = ar[k] * bi[k] + ai[k] * br[k];
    }
    Tensor::new(a.shape().to_vec(), out).unwrap()
}

/// g · conj(other): the vjp of complex multiplication w.r.t. one factor.
pub fn complex_mul_conj(g: &Tensor, other: &Tensor) -> Tensor {
    let hw = g.numel() / 2;
    let (gr, gi) = g.data().split_at(hw);
    let (or_, oi) = other.data().split_at(hw);
    let mut out = vec![0.0; 2 * hw];
    for k in 0..hw {
        out[k] = gr[k] * or_[k] + gi[k] * oi[k];
        out[hw + k] = gi[k] * or_[k] - gr[k] * oi[k];
    }
    Tensor::new(g.shape().to_vec(), out).unwrap()
}

/// Place an odd [2,s,s] kernel at the origin of a [2,h,w] grid with
/// circular wrapping, zero elsewhere.
pub fn embed_kernel(k: &Tensor, h: usize, w: usize) -> Tensor {
    let s = k.shape()[1];
    let half = (s / 2) as isize;
    let ss = s * s;
    let hw = h * w;
    let mut out = vec![0.0; 2 * hw];
    for dy in -half..=half {
        let ty = dy.rem_euclid(h as isize) as usize;
        let ky = (dy + half) as usize;
        for dx in -half..=half {
            let tx = dx.rem_euclid(w as isize) as usize;
            let kx = (dx + half) as usize;
            out[ty * w + tx] = k.data()[ky * s + kx];
            out[hw + ty * w + tx] = k.data()[ss + ky * s + kx];
        }
    }
    Tensor::new(vec![2, h, w], out).unwrap()
}

pub fn embed_kernel_backward(g: &Tensor, k_shape: &[usize], out_shape: &[usize]) -> Tensor {
    let s = k_shape[1];
    let (h, w) = (out_shape[1], out_shape[2]);
    let half = (s / 2) as isize;
    let ss = s * s;
    let hw = h * w;
    let mut out = vec![0.0; 2 * ss];
    for dy in -half..=half {
        let ty = dy.rem_euclid(h as isize) as usize;
        let ky = (dy + half) as usize;
        for dx in -half..=half {
            let tx = dx.rem_euclid(w as isize) as usize;
            let kx = (dx + half) as usize;
            out[ky * s + kx] = g.data()[ty * w + tx];
            out[ss + ky * s + kx] = g.data()[hw + ty * w + tx];
        }
    }
    Tensor::new(k_shape.to_vec(), out).unwrap()
}

/// out[k,n,:] = m[k,n] · p[n,:].
pub fn slotwise_outer(m: &Tensor, p: &Tensor) -> Tensor {
    let (kk, n) = (m.rows(), m.cols());
    let d = p.cols();
    let mut out = vec![0.0; kk * n * d];
    for k in 0..kk {
        for t in 0..n {
            let mv = m.data()[k * n + t];
            let prow = &p.data()[t * d..(t + 1) * d];
            let orow = &mut out[(k * n + t) * d..(k * n + t + 1) * d];
            for (o, &pv) in orow.iter_mut().zip(prow) {
                *o = mv * pv;
            }
        }
    }
    Tensor::new(vec![kk, n, d], out).unwrap()
}

pub fn slotwise_outer_grad_m(g: &Tensor, p: &Tensor) -> Tensor {
    let (kk, n, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = vec![0.0; kk * n];
    for k in 0..kk {
        for t in 0..n {
            let grow = &g.data()[(k * n + t) * d..(k * n + t + 1) * d];
            let prow = &p.data()[t * d..(t + 1) * d];
            out[k * n + t] = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![kk, n], out).unwrap()
}

pub fn slotwise_outer_grad_p(g: &Tensor, m: &Tensor) -> Tensor {
    let (kk, n, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = vec![0.0; n * d];
    for k in 0..kk {
        for t in 0..n {
            let mv = m.data()[k * n + t];
            let grow = &g.data()[(k * n + t) * d..(k * n + t + 1) * d];
            let orow = &mut out[t * d..(t + 1) * d];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += mv * gv;
            }
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// u[k,:] = Σ_n a[k,n] · (mf[k,n,:] ⊙ v[n,:]).
pub fn fused_slot_reduce(a: &Tensor, mf: &Tensor, v: &Tensor) -> Tensor {
    let (kk, n, d) = (mf.shape()[0], mf.shape()[1], mf.shape()[2]);
    let mut out = vec![0.0; kk * d];
    for k in 0..kk {
        let orow = &mut out[k * d..(k + 1) * d];
        for t in 0..n {
            let av = a.data()[k * n + t];
            if av != 0.0 {
                let mrow = &mf.data()[(k * n + t) * d..(k * n + t + 1) * d];
                let vrow = &v.data()[t * d..(t + 1) * d];
                for ((o, &mv), &vv) in orow.iter_mut().zip(mrow).zip(vrow) {
                    *o += av * mv * vv;
                }
            }
        }
    }
    Tensor::new(vec![kk, d], out).unwrap()
}

#[allow(clippy::type_complexity)]
pub fn fused_slot_reduce_backward(
    g: &Tensor,
    a: &Tensor,
    mf: &Tensor,
    v: &Tensor,
    need_a: bool,
    need_mf: bool,
    need_v: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (kk, n, d) = (mf.shape()[0], mf.shape()[1], mf.shape()[2]);
    let mut da = if need_a { Some(vec![0.0; kk * n]) } else { None };
    let mut dmf = if need_mf {
        Some(vec![0.0; kk * n * d])
    } else {
        None
    };
    let mut dv = if need_v { Some(vec![0.0; n * d]) } else { None };
    for k in 0..kk {
        let grow = &g.data()[k * d..(k + 1) * d];
        for t in 0..n {
            let av = a.data()[k * n + t];
            let mrow = &mf.data()[(k * n + t) * d..(k * n + t + 1) * d];
            let vrow = &v.data()[t * d..(t + 1) * d];
            if let Some(da) = da.as_mut() {
                da[k * n + t] = grow
                    .iter()
                    .zip(mrow)
                    .zip(vrow)
                    .map(|((&gv, &mv), &vv)| gv * mv * vv)
                    .sum();
            }
            if let Some(dmf) = dmf.as_mut() {
                let drow = &mut dmf[(k * n + t) * d..(k * n + t + 1) * d];
                for ((o, &gv), &vv) in drow.iter_mut().zip(grow).zip(vrow) {
                    *o = av * gv * vv;
                }
            }
            if let Some(dv) = dv.as_mut() {
                let drow = &mut dv[t * d..(t + 1) * d];
                for ((o, &gv), &mv) in drow.iter_mut().zip(grow).zip(mrow) {
                    *o += av * gv * mv;
                }
            }
        }
    }
    (
        da.map(|d| Tensor::new(vec![kk, n], d).unwrap()),
        dmf.map(|d| Tensor::new(vec![kk, n, d.len() / (kk * n)], d).unwrap()),
        dv.map(|dd| Tensor::new(vec![n, d], dd).unwrap()),
    )
}
