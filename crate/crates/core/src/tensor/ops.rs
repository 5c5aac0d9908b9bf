//! Forward ops and their gradient rules.
//!
//! Every op returns a fresh contiguous tensor, validates shapes up front and
//! finiteness on the way out. Backward closures accumulate into parent grad
//! buffers; `parents[i]` ordering is fixed per op.

use super::Tensor;
use crate::error::{Error, Result};

// ── raw kernels (shared by forward and backward) ────────────────────

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
}

/// C[m,k] += G[m,n] · Bᵀ where B is [k,n]
fn matmul_acc_transb(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            c_row[l] += s;
        }
    }
}

/// C[k,n] += Aᵀ · G where A is [m,k], G is [m,n]
fn matmul_acc_transa(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += a_il * gv;
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

/// Half-open range of output indices whose input index `o·s + k − p` lands
/// inside `[0, extent)`.
fn valid_out_range(extent: usize, pad: usize, k: usize, stride: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    let hi = if k >= extent + pad {
        0
    } else {
        ((extent + pad - k - 1) / stride + 1).min(out_extent)
    };
    (lo, hi)
}

/// out[b,co,oh,ow] (+)= Σ_{ci,kr,kc} x[b,ci,oh·s−p+kr, ow·s−p+kc] · w[co,ci,kr,kc]
///
/// Inner loop is an AXPY over a contiguous output row for stride 1, which is
/// what the trainer spends most of its time in.
fn conv2d_acc(x: &[f64], wgt: &[f64], out: &mut [f64], d: &ConvDims) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let (s, p) = (d.stride, d.padding);
    for b in 0..d.batch {
        for co in 0..d.cout {
            let out_plane = &mut out[(b * d.cout + co) * oh * ow..][..oh * ow];
            for ci in 0..d.cin {
                let x_plane = &x[(b * d.cin + ci) * h * w..][..h * w];
                let k_plane = &wgt[(co * d.cin + ci) * d.kh * d.kw..][..d.kh * d.kw];
                for kr in 0..d.kh {
                    for kc in 0..d.kw {
                        let wv = k_plane[kr * d.kw + kc];
                        if wv == 0.0 {
                            continue;
                        }
                        let (or_lo, or_hi) = valid_out_range(h, p, kr, s, oh);
                        let (oc_lo, oc_hi) = valid_out_range(w, p, kc, s, ow);
                        if or_lo >= or_hi || oc_lo >= oc_hi {
                            continue;
                        }
                        for orow in or_lo..or_hi {
                            let ir = orow * s + kr - p;
                            let x_row = &x_plane[ir * w..(ir + 1) * w];
                            let o_row = &mut out_plane[orow * ow..(orow + 1) * ow];
                            if s == 1 {
                                let ic0 = oc_lo + kc - p;
                                let xs = &x_row[ic0..ic0 + (oc_hi - oc_lo)];
                                let os = &mut o_row[oc_lo..oc_hi];
                                for (ov, &xv) in os.iter_mut().zip(xs) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for oc in oc_lo..oc_hi {
                                    o_row[oc] += wv * x_row[oc * s + kc - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv2d w.r.t. input and weight, mirroring `conv2d_acc`.
fn conv2d_backward(
    x: &[f64],
    wgt: &[f64],
    g: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    d: &ConvDims,
) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let (s, p) = (d.stride, d.padding);
    for b in 0..d.batch {
        for co in 0..d.cout {
            let g_plane = &g[(b * d.cout + co) * oh * ow..][..oh * ow];
            for ci in 0..d.cin {
                let x_plane = &x[(b * d.cin + ci) * h * w..][..h * w];
                let dx_plane = &mut dx[(b * d.cin + ci) * h * w..][..h * w];
                let k_off = (co * d.cin + ci) * d.kh * d.kw;
                for kr in 0..d.kh {
                    for kc in 0..d.kw {
                        let wv = wgt[k_off + kr * d.kw + kc];
                        let (or_lo, or_hi) = valid_out_range(h, p, kr, s, oh);
                        let (oc_lo, oc_hi) = valid_out_range(w, p, kc, s, ow);
                        if or_lo >= or_hi || oc_lo >= oc_hi {
                            continue;
                        }
                        let mut dw_acc = 0.0;
                        for orow in or_lo..or_hi {
                            let ir = orow * s + kr - p;
                            let g_row = &g_plane[orow * ow..(orow + 1) * ow];
                            if s == 1 {
                                let ic0 = oc_lo + kc - p;
                                let span = oc_hi - oc_lo;
                                let x_row = &x_plane[ir * w + ic0..ir * w + ic0 + span];
                                let dx_row = &mut dx_plane[ir * w + ic0..ir * w + ic0 + span];
                                let g_span = &g_row[oc_lo..oc_hi];
                                for ((dxv, &gv), &xv) in
                                    dx_row.iter_mut().zip(g_span).zip(x_row)
                                {
                                    *dxv += wv * gv;
                                    dw_acc += gv * xv;
                                }
                            } else {
                                for oc in oc_lo..oc_hi {
                                    let ic = oc * s + kc - p;
                                    let gv = g_row[oc];
                                    dx_plane[ir * w + ic] += wv * gv;
                                    dw_acc += gv * x_plane[ir * w + ic];
                                }
                            }
                        }
                        dw[k_off + kr * d.kw + kc] += dw_acc;
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ))
    }
}

impl Tensor {
    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product of `self` [m×k] with `other` [k×n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected 2-D operands, got {sa:?} × {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        self.with_data(|a| other.with_data(|b| matmul_acc(a, b, &mut out, m, k, n)));
        Tensor::result_of(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad_set() {
                    let mut da = vec![0.0; m * k];
                    b.with_data(|bd| matmul_acc_transb(g, bd, &mut da, m, k, n));
                    a.accumulate_grad(&da);
                }
                if b.requires_grad_set() {
                    let mut db = vec![0.0; k * n];
                    a.with_data(|ad| matmul_acc_transa(ad, g, &mut db, m, k, n));
                    b.accumulate_grad(&db);
                }
            },
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        self.with_data(|d| {
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
        });
        Tensor::result_of("transpose", vec![c, r], out, vec![self.clone()], move |g, parents| {
            let mut dg = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    dg[i * c + j] = g[j * r + i];
                }
            }
            parents[0].accumulate_grad(&dg);
        })
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Tensor::result_of("add", self.shape(), out, vec![self.clone(), other.clone()], |g, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Tensor::result_of("sub", self.shape(), out, vec![self.clone(), other.clone()], |g, parents| {
            parents[0].accumulate_grad(g);
            if parents[1].requires_grad_set() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                parents[1].accumulate_grad(&neg);
            }
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        Tensor::result_of("mul", self.shape(), out, vec![self.clone(), other.clone()], |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad_set() {
                let da: Vec<f64> = b.with_data(|bd| g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect());
                a.accumulate_grad(&da);
            }
            if b.requires_grad_set() {
                let db: Vec<f64> = a.with_data(|ad| g.iter().zip(ad).map(|(gv, av)| gv * av).collect());
                b.accumulate_grad(&db);
            }
        })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let out = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x / y).collect()));
        Tensor::result_of("div", self.shape(), out, vec![self.clone(), other.clone()], |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad_set() {
                let da: Vec<f64> = b.with_data(|bd| g.iter().zip(bd).map(|(gv, bv)| gv / bv).collect());
                a.accumulate_grad(&da);
            }
            if b.requires_grad_set() {
                let db: Vec<f64> = a.with_data(|ad| {
                    b.with_data(|bd| {
                        g.iter()
                            .zip(ad)
                            .zip(bd)
                            .map(|((gv, av), bv)| -gv * av / (bv * bv))
                            .collect()
                    })
                });
                b.accumulate_grad(&db);
            }
        })
    }

    /// Adds `row` [d] to every row of `self` [n×d] (bias broadcast).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (s, r) = (self.shape(), row.shape());
        if s.len() != 2 || r.len() != 1 || r[0] != s[1] {
            return Err(Error::shape("add_row", format!("matrix {s:?} with row {r:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let out = self.with_data(|a| {
            row.with_data(|b| {
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    for j in 0..d {
                        out.push(a[i * d + j] + b[j]);
                    }
                }
                out
            })
        });
        Tensor::result_of("add_row", vec![n, d], out, vec![self.clone(), row.clone()], move |g, parents| {
            parents[0].accumulate_grad(g);
            if parents[1].requires_grad_set() {
                let mut dr = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] += g[i * d + j];
                    }
                }
                parents[1].accumulate_grad(&dr);
            }
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let out = self.with_data(|a| a.iter().map(|v| v * factor).collect());
        Tensor::result_of("scale", self.shape(), out, vec![self.clone()], move |g, parents| {
            let dg: Vec<f64> = g.iter().map(|v| v * factor).collect();
            parents[0].accumulate_grad(&dg);
        })
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        let out = self.with_data(|a| a.iter().map(|v| v + value).collect());
        Tensor::result_of("add_scalar", self.shape(), out, vec![self.clone()], |g, parents| {
            parents[0].accumulate_grad(g);
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = self.with_data(|a| a.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect());
        Tensor::result_of("relu", self.shape(), out, vec![self.clone()], |g, parents| {
            let dg: Vec<f64> = parents[0].with_data(|x| {
                g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect()
            });
            parents[0].accumulate_grad(&dg);
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        let out: Vec<f64> = self.with_data(|a| a.iter().map(|&v| sig(v)).collect());
        let saved = out.clone();
        Tensor::result_of("sigmoid", self.shape(), out, vec![self.clone()], move |g, parents| {
            let dg: Vec<f64> = g.iter().zip(&saved).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
            parents[0].accumulate_grad(&dg);
        })
    }

    // ── normalization and attention primitives ──────────────────────

    /// Row-wise softmax of a 2-D tensor, computed with per-row max
    /// subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        self.with_data(|x| {
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[i * c..(i + 1) * c];
                let mut sum = 0.0;
                for (ov, &v) in o.iter_mut().zip(row) {
                    *ov = (v - m).exp();
                    sum += *ov;
                }
                for ov in o.iter_mut() {
                    *ov /= sum;
                }
            }
        });
        let saved = out.clone();
        Tensor::result_of("softmax_rows", vec![r, c], out, vec![self.clone()], move |g, parents| {
            let mut dg = vec![0.0; r * c];
            for i in 0..r {
                let y = &saved[i * c..(i + 1) * c];
                let gi = &g[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gi).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..c {
                    dg[i * c + j] = y[j] * (gi[j] - dot);
                }
            }
            parents[0].accumulate_grad(&dg);
        })
    }

    /// Layer normalization over the last axis of a 2-D tensor with affine
    /// gain/bias, using the population variance.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (s, sg, sb) = (self.shape(), gain.shape(), bias.shape());
        if s.len() != 2 || sg != vec![s[1]] || sb != vec![s[1]] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {s:?} with gain {sg:?} / bias {sb:?}"),
            ));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; n * d];
        let mut normed = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        self.with_data(|x| {
            gain.with_data(|gw| {
                bias.with_data(|bw| {
                    for i in 0..n {
                        let row = &x[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        inv_std[i] = inv;
                        for j in 0..d {
                            let y = (row[j] - mean) * inv;
                            normed[i * d + j] = y;
                            out[i * d + j] = y * gw[j] + bw[j];
                        }
                    }
                })
            })
        });
        Tensor::result_of(
            "layer_norm",
            vec![n, d],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g, parents| {
                let (x, gain, bias) = (&parents[0], &parents[1], &parents[2]);
                if gain.requires_grad_set() {
                    let mut dgain = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dgain[j] += g[i * d + j] * normed[i * d + j];
                        }
                    }
                    gain.accumulate_grad(&dgain);
                }
                if bias.requires_grad_set() {
                    let mut dbias = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dbias[j] += g[i * d + j];
                        }
                    }
                    bias.accumulate_grad(&dbias);
                }
                if x.requires_grad_set() {
                    let mut dx = vec![0.0; n * d];
                    gain.with_data(|gw| {
                        for i in 0..n {
                            let gi = &g[i * d..(i + 1) * d];
                            let yi = &normed[i * d..(i + 1) * d];
                            let mut mean_gh = 0.0;
                            let mut mean_ghy = 0.0;
                            for j in 0..d {
                                let gh = gi[j] * gw[j];
                                mean_gh += gh;
                                mean_ghy += gh * yi[j];
                            }
                            mean_gh /= d as f64;
                            mean_ghy /= d as f64;
                            for j in 0..d {
                                let gh = gi[j] * gw[j];
                                dx[i * d + j] = inv_std[i] * (gh - mean_gh - yi[j] * mean_ghy);
                            }
                        }
                    });
                    x.accumulate_grad(&dx);
                }
            },
        )
    }

    // ── convolution and spatial ops ─────────────────────────────────

    /// 2-D cross-correlation of `self` [B×Cin×H×W] with `weight`
    /// [Cout×Cin×kh×kw], zero padding, optional per-channel bias. Output
    /// spatial extent is floor((H+2p−kh)/s)+1.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected 4-D input/weight, got {sx:?} / {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("channel mismatch: input {sx:?}, weight {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be ≥ 1".to_string()));
        }
        let (batch, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != vec![cout] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{cout}]", b.shape())));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims { batch, cin, h, w, cout, kh, kw, oh, ow, stride, padding };

        let mut out = vec![0.0; batch * cout * oh * ow];
        if let Some(b) = bias {
            b.with_data(|bd| {
                for bi in 0..batch {
                    for co in 0..cout {
                        out[(bi * cout + co) * oh * ow..][..oh * ow].fill(bd[co]);
                    }
                }
            });
        }
        self.with_data(|x| weight.with_data(|wd| conv2d_acc(x, wd, &mut out, &dims)));

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::result_of(
            "conv2d",
            vec![batch, cout, oh, ow],
            out,
            parents,
            move |g, parents| {
                let (x, wgt) = (&parents[0], &parents[1]);
                let need_dx = x.requires_grad_set();
                let need_dw = wgt.requires_grad_set();
                if need_dx || need_dw {
                    let mut dx = vec![0.0; dims.batch * dims.cin * dims.h * dims.w];
                    let mut dw = vec![0.0; dims.cout * dims.cin * dims.kh * dims.kw];
                    x.with_data(|xd| wgt.with_data(|wd| conv2d_backward(xd, wd, g, &mut dx, &mut dw, &dims)));
                    if need_dx {
                        x.accumulate_grad(&dx);
                    }
                    if need_dw {
                        wgt.accumulate_grad(&dw);
                    }
                }
                if let Some(b) = parents.get(2) {
                    if b.requires_grad_set() {
                        let mut db = vec![0.0; dims.cout];
                        for bi in 0..dims.batch {
                            for co in 0..dims.cout {
                                db[co] += g[(bi * dims.cout + co) * dims.oh * dims.ow..][..dims.oh * dims.ow]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                }
            },
        )
    }

    /// Nearest-neighbor ×2 upsampling of a 4-D tensor.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest2", format!("expected 4-D, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        self.with_data(|x| {
            for plane in 0..b * c {
                let xp = &x[plane * h * w..][..h * w];
                let op = &mut out[plane * oh * ow..][..oh * ow];
                for i in 0..oh {
                    for j in 0..ow {
                        op[i * ow + j] = xp[(i / 2) * w + j / 2];
                    }
                }
            }
        });
        Tensor::result_of("upsample_nearest2", vec![b, c, oh, ow], out, vec![self.clone()], move |g, parents| {
            let mut dg = vec![0.0; b * c * h * w];
            for plane in 0..b * c {
                let gp = &g[plane * oh * ow..][..oh * ow];
                let dp = &mut dg[plane * h * w..][..h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        dp[(i / 2) * w + j / 2] += gp[i * ow + j];
                    }
                }
            }
            parents[0].accumulate_grad(&dg);
        })
    }

    /// Max pooling over k×k windows (no padding).
    pub fn maxpool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected 4-D, got {s:?}")));
        }
        if k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(Error::shape("maxpool2d", format!("window {k} stride {stride} on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        self.with_data(|x| {
            for plane in 0..b * c {
                let xp = &x[plane * h * w..][..h * w];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_ix = 0;
                        for di in 0..k {
                            for dj in 0..k {
                                let ix = (oi * stride + di) * w + oj * stride + dj;
                                if xp[ix] > best {
                                    best = xp[ix];
                                    best_ix = ix;
                                }
                            }
                        }
                        out[plane * oh * ow + oi * ow + oj] = best;
                        argmax[plane * oh * ow + oi * ow + oj] = plane * h * w + best_ix;
                    }
                }
            }
        });
        Tensor::result_of("maxpool2d", vec![b, c, oh, ow], out, vec![self.clone()], move |g, parents| {
            let mut dg = vec![0.0; b * c * h * w];
            for (i, &src) in argmax.iter().enumerate() {
                dg[src] += g[i];
            }
            parents[0].accumulate_grad(&dg);
        })
    }

    // ── shape ops ───────────────────────────────────────────────────

    /// Copy into a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} ({} elements) to {:?}", self.shape(), self.numel(), new_shape),
            ));
        }
        let out = self.to_vec();
        Tensor::result_of("reshape", new_shape.to_vec(), out, vec![self.clone()], |g, parents| {
            parents[0].accumulate_grad(g);
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let dim = s[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        self.with_data(|x| {
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        });
        let mut new_shape = s.clone();
        new_shape[axis] = len;
        let full = self.numel();
        Tensor::result_of("narrow", new_shape, out, vec![self.clone()], move |g, parents| {
            let mut dg = vec![0.0; full];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * dim + start) * inner;
                dg[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            parents[0].accumulate_grad(&dg);
        })
    }

    /// Concatenation along `axis`. All parts must agree on every other axis.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors given".to_string()));
        }
        let base = parts[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("incompatible shapes {base:?} and {s:?}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let dim = p.shape()[axis];
                p.with_data(|x| out.extend_from_slice(&x[o * dim * inner..(o + 1) * dim * inner]));
            }
        }
        let part_dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::result_of("concat", out_shape, out, parents, move |g, parents| {
            let mut row = Vec::new();
            for (pi, parent) in parents.iter().enumerate() {
                if !parent.requires_grad_set() {
                    continue;
                }
                let dim = part_dims[pi];
                row.clear();
                row.reserve(outer * dim * inner);
                let before: usize = part_dims[..pi].iter().sum();
                for o in 0..outer {
                    let base = (o * axis_total + before) * inner;
                    row.extend_from_slice(&g[base..base + dim * inner]);
                }
                parent.accumulate_grad(&row);
            }
        })
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements → shape [1].
    pub fn sum_all(&self) -> Result<Tensor> {
        let total = self.with_data(|x| x.iter().sum::<f64>());
        let n = self.numel();
        Tensor::result_of("sum_all", vec![1], vec![total], vec![self.clone()], move |g, parents| {
            parents[0].accumulate_grad(&vec![g[0]; n]);
        })
    }

    /// Mean of all elements → shape [1].
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        let total = self.with_data(|x| x.iter().sum::<f64>());
        Tensor::result_of("mean_all", vec![1], vec![total / n as f64], vec![self.clone()], move |g, parents| {
            parents[0].accumulate_grad(&vec![g[0] / n as f64; n]);
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(x.softmax_rows().unwrap().to_vec(), vec![0.5, 0.5]);

        let big = t(&[1, 3], &[1000.0, 1000.0, 1000.0]);
        for v in big.softmax_rows().unwrap().to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] → [1/4, 3/4]
        let x = t(&[1, 2], &[0.0, 3f64.ln()]);
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let gain = Tensor::ones(&[4]);
        let bias = Tensor::zeros(&[4]);
        let x = t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]);
        for v in x.layer_norm(&gain, &bias, 1e-5).unwrap().to_vec() {
            assert!(v.abs() < 1e-6, "constant row must normalize to ~0, got {v}");
        }

        let gain2 = Tensor::ones(&[2]);
        let bias2 = Tensor::zeros(&[2]);
        let x2 = t(&[1, 2], &[1.0, 3.0]);
        let y2 = x2.layer_norm(&gain2, &bias2, 0.0).unwrap().to_vec();
        assert!((y2[0] + 1.0).abs() < 1e-9 && (y2[1] - 1.0).abs() < 1e-9, "got {y2:?}");

        // gain 0, bias 7 collapses any row to all-7
        let gain3 = Tensor::zeros(&[3]);
        let bias3 = Tensor::full(&[3], 7.0);
        let x3 = t(&[2, 3], &[0.3, -1.0, 2.0, 4.0, 4.5, -2.0]);
        for v in x3.layer_norm(&gain3, &bias3, 1e-5).unwrap().to_vec() {
            assert_eq!(v, 7.0);
        }
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_impulse_stamps_flipped_kernel() {
        // cross-correlation with a delta at (2,2): out[2−a, 2−b] picks up
        // w[a, b], i.e. the kernel appears reflected about the impulse
        let mut img = vec![0.0; 25];
        img[2 * 5 + 2] = 1.0;
        let x = t(&[1, 1, 5, 5], &img);
        let w = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 5, 5]);
        for di in 0..3 {
            for dj in 0..3 {
                assert_eq!(y.at(&[0, 0, 1 + di, 1 + dj]), w.at(&[0, 0, 2 - di, 2 - dj]));
            }
        }
        assert_eq!(y.at(&[0, 0, 0, 0]), 0.0);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 5, 5]);
        assert!(matches!(x.conv2d(&w, None, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn upsample_block_replicates() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.upsample_nearest2().unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn concat_axis0_preserves_rows() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[1, 3], &[7.0, 8.0, 9.0]);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), vec![3, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_axis_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 4], &[0.0; 8]);
        assert!(matches!(Tensor::concat(&[&a, &b], 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn reshape_preserves_count() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(b.to_vec(), a.to_vec());
        assert!(matches!(a.reshape(&[4, 2]), Err(Error::Shape { .. })));
    }

    #[test]
    fn transpose_involution() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(b.shape(), a.shape());
        assert_eq!(b.to_vec(), a.to_vec());
    }

    #[test]
    fn narrow_extracts_columns() {
        let a = t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let b = a.narrow(1, 1, 2).unwrap();
        assert_eq!(b.shape(), vec![2, 2]);
        assert_eq!(b.to_vec(), vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn maxpool_basic() {
        let a = t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let y = a.maxpool2d(2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
    }

    #[test]
    fn division_by_zero_fails_fast() {
        let a = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(a.div(&b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn global_mean() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(a.mean_all().unwrap().item(), 3.0);
    }
}
