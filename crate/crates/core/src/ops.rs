//! Differentiable ops recorded on a [`Graph`].
//!
//! Layout conventions: feature maps are channel-last (`[B, H, W, C]`), row ops
//! treat any tensor as `[rows, last_dim]`.

use std::rc::Rc;

use crate::graph::{Graph, Var};
use crate::tensor::{gemm, Tensor};

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

/// Per-row `log(sum(exp(x)))`.
fn row_logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// In-place max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Source indices and weights for half-pixel bilinear resampling along one axis.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, w)
        })
        .collect()
}

/// Prompt keys and values attended by every window of one sample.
#[derive(Clone, Copy, Debug)]
pub struct PromptKv {
    pub k: Var,
    pub v: Var,
    /// Additive score per prompt token and head, `[Np, heads]`.
    pub bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionGeometry {
    pub heads: usize,
    /// Cells per window.
    pub window_len: usize,
    /// Multiplier applied to `q·k`.
    pub scale: f64,
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add: {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, &[a, b], |args| vec![Some(args.grad.clone()), Some(args.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape(), data).unwrap();
        self.push(out, &[a, b], |args| {
            let neg = Tensor::from_fn(args.grad.shape(), |i| -args.grad.data()[i]);
            vec![Some(args.grad.clone()), Some(neg)]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data).unwrap();
        self.push(out, &[a, b], |args| {
            let g = args.grad.data();
            let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
            vec![
                args.needs[0].then(|| Tensor::from_fn(args.grad.shape(), |i| g[i] * y[i])),
                args.needs[1].then(|| Tensor::from_fn(args.grad.shape(), |i| g[i] * x[i])),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * s);
        self.push(out, &[a], move |args| {
            vec![Some(Tensor::from_fn(args.grad.shape(), |i| args.grad.data()[i] * s))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(out, &[a], |args| {
            vec![Some(args.grad.clone().reshape(args.inputs[0].shape()).unwrap())]
        })
    }

    /// `x + b` with `b` broadcast over rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.last_dim();
        assert_eq!(vb.len(), c, "add_bias: bias {:?} for {:?}", vb.shape(), vx.shape());
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        self.push(out, &[x, b], move |args| {
            let db = args.needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in args.grad.data().chunks(c) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                Tensor::new(&[c], acc).unwrap()
            });
            vec![Some(args.grad.clone()), db]
        })
    }

    /// `[.., K] · [K, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.last_dim();
        assert_eq!(vb.shape().len(), 2);
        assert_eq!(vb.shape()[0], k, "matmul: {:?} x {:?}", va.shape(), vb.shape());
        let m = vb.shape()[1];
        let n = va.rows();
        let mut out = Tensor::zeros(&with_last(va.shape(), m));
        gemm(n, k, m, 1.0, va.data(), false, vb.data(), false, 0.0, out.data_mut());
        self.push(out, &[a, b], move |args| {
            let (va, vb, g) = (args.inputs[0], args.inputs[1], args.grad);
            let da = args.needs[0].then(|| {
                let mut d = Tensor::zeros(va.shape());
                gemm(n, m, k, 1.0, g.data(), false, vb.data(), true, 0.0, d.data_mut());
                d
            });
            let db = args.needs[1].then(|| {
                let mut d = Tensor::zeros(vb.shape());
                gemm(k, n, m, 1.0, va.data(), true, g.data(), false, 0.0, d.data_mut());
                d
            });
            vec![da, db]
        })
    }

    /// `x · wᵀ (+ b)` with `w: [M, K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = vx.last_dim();
        assert_eq!(vw.shape().len(), 2);
        assert_eq!(vw.shape()[1], k, "linear: x {:?} w {:?}", vx.shape(), vw.shape());
        let m = vw.shape()[0];
        let n = vx.rows();
        let mut out = Tensor::zeros(&with_last(vx.shape(), m));
        gemm(n, k, m, 1.0, vx.data(), false, vw.data(), true, 0.0, out.data_mut());
        let y = self.push(out, &[x, w], move |args| {
            let (vx, vw, g) = (args.inputs[0], args.inputs[1], args.grad);
            let dx = args.needs[0].then(|| {
                let mut d = Tensor::zeros(vx.shape());
                gemm(n, m, k, 1.0, g.data(), false, vw.data(), false, 0.0, d.data_mut());
                d
            });
            let dw = args.needs[1].then(|| {
                let mut d = Tensor::zeros(vw.shape());
                gemm(m, n, k, 1.0, g.data(), true, vx.data(), false, 0.0, d.data_mut());
                d
            });
            vec![dx, dw]
        });
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape(), |i| {
            let v = vx.data()[i];
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        });
        self.push(out, &[x], move |args| {
            let (x, g) = (args.inputs[0].data(), args.grad.data());
            vec![Some(Tensor::from_fn(args.grad.shape(), |i| {
                if x[i] > 0.0 {
                    g[i]
                } else {
                    slope * g[i]
                }
            }))]
        })
    }

    /// Row gather on the `[rows, last_dim]` view: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        assert_eq!(out_shape.iter().product::<usize>(), idx.len() * c);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            data.extend_from_slice(vx.row(r));
        }
        let out = Tensor::new(out_shape, data).unwrap();
        self.push(out, &[x], move |args| {
            let mut d = Tensor::zeros(args.inputs[0].shape());
            let g = args.grad.data();
            let dd = d.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                for j in 0..c {
                    dd[r * c + j] += g[i * c + j];
                }
            }
            vec![Some(d)]
        })
    }

    /// Flat element gather: `out[i] = x[idx[i]]`.
    pub fn gather_elems(&mut self, x: Var, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(out_shape.iter().product::<usize>(), idx.len());
        let out = Tensor::new(out_shape, idx.iter().map(|&i| vx.data()[i]).collect()).unwrap();
        self.push(out, &[x], move |args| {
            let mut d = Tensor::zeros(args.inputs[0].shape());
            for (g, &i) in args.grad.data().iter().zip(idx.iter()) {
                d.data_mut()[i] += g;
            }
            vec![Some(d)]
        })
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, cb) = (va.last_dim(), vb.last_dim());
        assert_eq!(va.rows(), vb.rows(), "concat_last: {:?} vs {:?}", va.shape(), vb.shape());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(&with_last(va.shape(), ca + cb), data).unwrap();
        self.push(out, &[a, b], move |args| {
            let g = args.grad;
            let rows = g.rows();
            let mut da = Vec::with_capacity(rows * ca);
            let mut db = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                let row = g.row(r);
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..]);
            }
            vec![
                Some(Tensor::new(args.inputs[0].shape(), da).unwrap()),
                Some(Tensor::new(args.inputs[1].shape(), db).unwrap()),
            ]
        })
    }

    /// Stacks `[n_i, C]` row blocks into `[Σ n_i, C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.last_dim(), c, "concat_rows: width {} vs {c}", v.last_dim());
            data.extend_from_slice(v.data());
            sizes.push(v.len());
        }
        let rows = data.len() / c;
        let out = Tensor::new(&[rows, c], data).unwrap();
        self.push(out, parts, move |args| {
            let g = args.grad.data();
            let mut off = 0;
            sizes
                .iter()
                .zip(&args.inputs)
                .zip(&args.needs)
                .map(|((&n, x), &need)| {
                    let d = need.then(|| Tensor::new(x.shape(), g[off..off + n].to_vec()).unwrap());
                    off += n;
                    d
                })
                .collect()
        })
    }

    /// 2D convolution, `x: [B, H, W, Ci]`, `w: [Co, kh, kw, Ci]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let [b, h, wd, ci] = <[usize; 4]>::try_from(vx.shape()).expect("conv2d input rank");
        let [co, kh, kw, wci] = <[usize; 4]>::try_from(vw.shape()).expect("conv2d weight rank");
        assert_eq!(ci, wci, "conv2d channels");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeo { b, h, w: wd, ci, kh, kw, stride, pad, ho, wo };
        let cols = geo.im2col(vx.data());
        let n = b * ho * wo;
        let kk = kh * kw * ci;
        let mut out = Tensor::zeros(&[b, ho, wo, co]);
        gemm(n, kk, co, 1.0, &cols, false, vw.data(), true, 0.0, out.data_mut());
        self.push(out, &[x, w], move |args| {
            let (vx, vw, g) = (args.inputs[0], args.inputs[1], args.grad);
            let dw = args.needs[1].then(|| {
                let cols = geo.im2col(vx.data());
                let mut d = Tensor::zeros(vw.shape());
                gemm(co, n, kk, 1.0, g.data(), true, &cols, false, 0.0, d.data_mut());
                d
            });
            let dx = args.needs[0].then(|| {
                let mut dcols = vec![0.0; n * kk];
                gemm(n, co, kk, 1.0, g.data(), false, vw.data(), false, 0.0, &mut dcols);
                let mut d = Tensor::zeros(vx.shape());
                geo.col2im(&dcols, d.data_mut());
                d
            });
            vec![dx, dw]
        })
    }

    /// Batch norm with batch statistics over all rows. Returns the output and the
    /// per-channel batch mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let vx = self.value(x);
        let c = vx.last_dim();
        let n = vx.rows();
        let (mean, var) = column_moments(vx.data(), n, c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased: Vec<f64> =
            var.iter().map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v }).collect();
        let out = normalize_rows(vx.data(), vx.shape(), &mean, &inv_std, self.value(gamma), self.value(beta));
        let m2 = mean.clone();
        let y = self.push(out, &[x, gamma, beta], move |args| {
            norm_backward(args.inputs[0], args.inputs[1], args.grad, &args.needs, &[(0, n)], &m2, &inv_std, true)
        });
        (y, mean, unbiased)
    }

    /// Batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let n = vx.rows();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let out = normalize_rows(vx.data(), vx.shape(), &mean, &inv_std, self.value(gamma), self.value(beta));
        self.push(out, &[x, gamma, beta], move |args| {
            norm_backward(args.inputs[0], args.inputs[1], args.grad, &args.needs, &[(0, n)], &mean, &inv_std, false)
        })
    }

    /// Instance norm over `x: [B, L, C]`: statistics per sample and channel.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        assert_eq!(shape.len(), 3, "instance_norm expects [B, L, C]");
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let mut mean = vec![0.0; b * c];
        let mut inv_std = vec![0.0; b * c];
        let mut out = Tensor::zeros(&shape);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        for s in 0..b {
            let chunk = &vx.data()[s * l * c..(s + 1) * l * c];
            let (m, v) = column_moments(chunk, l, c);
            for ch in 0..c {
                mean[s * c + ch] = m[ch];
                inv_std[s * c + ch] = 1.0 / (v[ch] + eps).sqrt();
            }
            let o = &mut out.data_mut()[s * l * c..(s + 1) * l * c];
            for r in 0..l {
                for ch in 0..c {
                    let xh = (chunk[r * c + ch] - m[ch]) * inv_std[s * c + ch];
                    o[r * c + ch] = xh * g[ch] + bt[ch];
                }
            }
        }
        let groups: Vec<(usize, usize)> = (0..b).map(|s| (s * l, (s + 1) * l)).collect();
        self.push(out, &[x, gamma, beta], move |args| {
            norm_backward(args.inputs[0], args.inputs[1], args.grad, &args.needs, &groups, &mean, &inv_std, true)
        })
    }

    /// Half-pixel bilinear resampling of `[B, H, W, C]` to `[B, oh, ow, C]`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let [b, h, w, c] = <[usize; 4]>::try_from(vx.shape()).expect("resize rank");
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let src = vx.data();
        let mut out = Tensor::zeros(&[b, oh, ow, c]);
        {
            let o = out.data_mut();
            for s in 0..b {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let base = ((s * oh + oy) * ow + ox) * c;
                        let taps = [
                            (y0, x0, (1.0 - wy) * (1.0 - wx)),
                            (y0, x1, (1.0 - wy) * wx),
                            (y1, x0, wy * (1.0 - wx)),
                            (y1, x1, wy * wx),
                        ];
                        for (yy, xx, wt) in taps {
                            let si = ((s * h + yy) * w + xx) * c;
                            for ch in 0..c {
                                o[base + ch] += wt * src[si + ch];
                            }
                        }
                    }
                }
            }
        }
        self.push(out, &[x], move |args| {
            let g = args.grad.data();
            let mut d = Tensor::zeros(args.inputs[0].shape());
            let dd = d.data_mut();
            for s in 0..b {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let base = ((s * oh + oy) * ow + ox) * c;
                        let taps = [
                            (y0, x0, (1.0 - wy) * (1.0 - wx)),
                            (y0, x1, (1.0 - wy) * wx),
                            (y1, x0, wy * (1.0 - wx)),
                            (y1, x1, wy * wx),
                        ];
                        for (yy, xx, wt) in taps {
                            let si = ((s * h + yy) * w + xx) * c;
                            for ch in 0..c {
                                dd[si + ch] += wt * g[base + ch];
                            }
                        }
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Pairwise cosine similarity of rows, `a: [N, C]`, `b: [K, C]` -> `[N, K]`.
    /// Norms below `eps` are clamped to `eps`.
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.last_dim();
        assert_eq!(vb.last_dim(), c, "cosine_sim: {:?} vs {:?}", va.shape(), vb.shape());
        let (n, k) = (va.rows(), vb.rows());
        let (ua, na) = unit_rows(va.data(), c, eps);
        let (ub, nb) = unit_rows(vb.data(), c, eps);
        let mut out = Tensor::zeros(&[n, k]);
        gemm(n, c, k, 1.0, &ua, false, &ub, true, 0.0, out.data_mut());
        self.push(out, &[a, b], move |args| {
            let g = args.grad.data();
            let da = args.needs[0].then(|| {
                let mut du = vec![0.0; n * c];
                gemm(n, k, c, 1.0, g, false, &ub, false, 0.0, &mut du);
                Tensor::new(args.inputs[0].shape(), unit_backward(&du, &ua, &na, c, eps)).unwrap()
            });
            let db = args.needs[1].then(|| {
                let mut du = vec![0.0; k * c];
                gemm(k, n, c, 1.0, g, true, &ua, false, 0.0, &mut du);
                Tensor::new(args.inputs[1].shape(), unit_backward(&du, &ub, &nb, c, eps)).unwrap()
            });
            vec![da, db]
        })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = row_logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, &[x], move |args| {
            let (y, g) = (args.output.data(), args.grad.data());
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let gs: f64 = gr.iter().sum();
                for j in 0..c {
                    dr[j] = gr[j] - yr[j].exp() * gs;
                }
            }
            vec![Some(Tensor::new(args.output.shape(), d).unwrap())]
        })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, &[x], move |args| {
            let (y, g) = (args.output.data(), args.grad.data());
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new(args.output.shape(), d).unwrap())]
        })
    }

    /// `out[n] = x[n, idx[n]]` for `x: [N, K]`.
    pub fn pick(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let vx = self.value(x);
        let k = vx.last_dim();
        assert_eq!(vx.rows(), idx.len());
        let out = Tensor::new(&[idx.len()], idx.iter().enumerate().map(|(n, &j)| vx.data()[n * k + j]).collect()).unwrap();
        self.push(out, &[x], move |args| {
            let mut d = Tensor::zeros(args.inputs[0].shape());
            for (n, &j) in idx.iter().enumerate() {
                d.data_mut()[n * k + j] = args.grad.data()[n];
            }
            vec![Some(d)]
        })
    }

    /// Elementwise focal term `-α(1-e^l)^γ·l` of a log-probability `l`.
    pub fn focal_term(&mut self, logp: Var, alpha: Rc<Vec<f64>>, gamma: f64) -> Var {
        let vl = self.value(logp);
        assert_eq!(vl.len(), alpha.len());
        let out = Tensor::from_fn(vl.shape(), |i| {
            let l = vl.data()[i];
            -alpha[i] * (1.0 - l.exp()).max(0.0).powf(gamma) * l
        });
        self.push(out, &[logp], move |args| {
            let (l, g) = (args.inputs[0].data(), args.grad.data());
            let d = Tensor::from_fn(args.grad.shape(), |i| {
                let p = l[i].exp();
                let q = (1.0 - p).max(0.0);
                let second = if gamma == 0.0 || (q == 0.0 && gamma < 1.0) {
                    0.0
                } else {
                    gamma * q.powf(gamma - 1.0) * p * l[i]
                };
                -alpha[i] * (q.powf(gamma) - second) * g[i]
            });
            vec![Some(d)]
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], |args| {
            vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ x ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), c.len());
        let s = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), &[x], move |args| {
            let g = args.grad.item();
            vec![Some(Tensor::from_fn(args.inputs[0].shape(), |i| g * c.data()[i]))]
        })
    }

    /// Windowed multi-head attention over `q, k, v: [B, L, C]` in window order
    /// (`L / window_len` windows of consecutive rows). Every window of sample `b`
    /// additionally attends to the prompt keys/values `prompts[b]`. Scores are
    /// `scale·q·k + bias`, where `content_bias: [heads, Nw, Nw]` is shared by all
    /// windows and the prompt bias `[Np, heads]` is broadcast over query rows.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        content_bias: Option<Var>,
        prompts: &[Option<PromptKv>],
        geo: AttentionGeometry,
    ) -> Var {
        let shape = self.value(q).shape().to_vec();
        let [bsz, l, c] = <[usize; 3]>::try_from(shape.as_slice()).expect("attention rank");
        assert_eq!(prompts.len(), bsz);
        let AttentionGeometry { heads, window_len: nw, scale } = geo;
        assert_eq!(l % nw, 0);
        assert_eq!(c % heads, 0);
        let ch = c / heads;
        let nwin = l / nw;

        let mut inputs = vec![q, k, v];
        let bc_idx = content_bias.map(|b| {
            inputs.push(b);
            inputs.len() - 1
        });
        // Per sample: (k index, v index, optional bias index, Np).
        let mut prompt_idx: Vec<Option<(usize, usize, Option<usize>, usize)>> = Vec::with_capacity(bsz);
        for p in prompts {
            prompt_idx.push(p.as_ref().map(|p| {
                let np = self.value(p.k).rows();
                inputs.push(p.k);
                let ki = inputs.len() - 1;
                inputs.push(p.v);
                let vi = inputs.len() - 1;
                let bi = p.bias.map(|b| {
                    inputs.push(b);
                    inputs.len() - 1
                });
                (ki, vi, bi, np)
            }));
        }

        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let (qd, kd, vd) = (vals[0].data(), vals[1].data(), vals[2].data());
        let bc = bc_idx.map(|i| vals[i].data());
        let mut out = vec![0.0; bsz * l * c];
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(bsz);
        for s in 0..bsz {
            let pinfo = prompt_idx[s];
            let np = pinfo.map_or(0, |p| p.3);
            let nk = nw + np;
            let (kp, vp, bp) = match pinfo {
                Some((ki, vi, bi, _)) => (vals[ki].data(), vals[vi].data(), bi.map(|b| vals[b].data())),
                None => (&[][..], &[][..], None),
            };
            let mut pr = vec![0.0; nwin * heads * nw * nk];
            let mut scores = vec![0.0; nk];
            for wi in 0..nwin {
                let row0 = s * l + wi * nw;
                for h in 0..heads {
                    let ho = h * ch;
                    for i in 0..nw {
                        let qi = &qd[(row0 + i) * c + ho..(row0 + i) * c + ho + ch];
                        for j in 0..nw {
                            let kj = &kd[(row0 + j) * c + ho..(row0 + j) * c + ho + ch];
                            let mut sc = scale * dot(qi, kj);
                            if let Some(bc) = bc {
                                sc += bc[(h * nw + i) * nw + j];
                            }
                            scores[j] = sc;
                        }
                        for t in 0..np {
                            let kt = &kp[t * c + ho..t * c + ho + ch];
                            let mut sc = scale * dot(qi, kt);
                            if let Some(bp) = bp {
                                sc += bp[t * heads + h];
                            }
                            scores[nw + t] = sc;
                        }
                        softmax_in_place(&mut scores);
                        let o = &mut out[(row0 + i) * c + ho..(row0 + i) * c + ho + ch];
                        for j in 0..nw {
                            let vj = &vd[(row0 + j) * c + ho..(row0 + j) * c + ho + ch];
                            axpy(scores[j], vj, o);
                        }
                        for t in 0..np {
                            axpy(scores[nw + t], &vp[t * c + ho..t * c + ho + ch], o);
                        }
                        let p0 = ((wi * heads + h) * nw + i) * nk;
                        pr[p0..p0 + nk].copy_from_slice(&scores);
                    }
                }
            }
            probs.push(pr);
        }
        let out = Tensor::new(&shape, out).unwrap();
        let n_inputs = inputs.len();
        self.push(out, &inputs, move |args| {
            let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
            let g = args.grad.data();
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut dbc = bc_idx.map(|_| vec![0.0; heads * nw * nw]);
            let mut grads: Vec<Option<Tensor>> = (0..n_inputs).map(|_| None).collect();
            for s in 0..bsz {
                let pinfo = prompt_idx[s];
                let np = pinfo.map_or(0, |p| p.3);
                let nk = nw + np;
                let (kp, vp) = match pinfo {
                    Some((ki, vi, _, _)) => (args.inputs[ki].data(), args.inputs[vi].data()),
                    None => (&[][..], &[][..]),
                };
                let mut dkp = vec![0.0; np * c];
                let mut dvp = vec![0.0; np * c];
                let mut dbp = vec![0.0; np * heads];
                let pr = &probs[s];
                let mut ds = vec![0.0; nk];
                for wi in 0..nwin {
                    let row0 = s * l + wi * nw;
                    for h in 0..heads {
                        let ho = h * ch;
                        for i in 0..nw {
                            let p0 = ((wi * heads + h) * nw + i) * nk;
                            let p = &pr[p0..p0 + nk];
                            let gi = &g[(row0 + i) * c + ho..(row0 + i) * c + ho + ch];
                            let mut acc = 0.0;
                            for j in 0..nw {
                                let vj = &vd[(row0 + j) * c + ho..(row0 + j) * c + ho + ch];
                                ds[j] = dot(gi, vj);
                                acc += p[j] * ds[j];
                                axpy(p[j], gi, &mut dv[(row0 + j) * c + ho..(row0 + j) * c + ho + ch]);
                            }
                            for t in 0..np {
                                ds[nw + t] = dot(gi, &vp[t * c + ho..t * c + ho + ch]);
                                acc += p[nw + t] * ds[nw + t];
                                axpy(p[nw + t], gi, &mut dvp[t * c + ho..t * c + ho + ch]);
                            }
                            for j in 0..nk {
                                ds[j] = p[j] * (ds[j] - acc);
                            }
                            let qi_off = (row0 + i) * c + ho;
                            for j in 0..nw {
                                let kj_off = (row0 + j) * c + ho;
                                let w = scale * ds[j];
                                for e in 0..ch {
                                    dq[qi_off + e] += w * kd[kj_off + e];
                                    dk[kj_off + e] += w * qd[qi_off + e];
                                }
                                if let Some(dbc) = dbc.as_mut() {
                                    dbc[(h * nw + i) * nw + j] += ds[j];
                                }
                            }
                            for t in 0..np {
                                let w = scale * ds[nw + t];
                                for e in 0..ch {
                                    dq[qi_off + e] += w * kp[t * c + ho + e];
                                    dkp[t * c + ho + e] += w * qd[qi_off + e];
                                }
                                dbp[t * heads + h] += ds[nw + t];
                            }
                        }
                    }
                }
                if let Some((ki, vi, bi, _)) = pinfo {
                    grads[ki] = Some(Tensor::new(args.inputs[ki].shape(), dkp).unwrap());
                    grads[vi] = Some(Tensor::new(args.inputs[vi].shape(), dvp).unwrap());
                    if let Some(bi) = bi {
                        grads[bi] = Some(Tensor::new(args.inputs[bi].shape(), dbp).unwrap());
                    }
                }
            }
            grads[0] = Some(Tensor::new(args.inputs[0].shape(), dq).unwrap());
            grads[1] = Some(Tensor::new(args.inputs[1].shape(), dk).unwrap());
            grads[2] = Some(Tensor::new(args.inputs[2].shape(), dv).unwrap());
            if let (Some(i), Some(d)) = (bc_idx, dbc) {
                grads[i] = Some(Tensor::new(args.inputs[i].shape(), d).unwrap());
            }
            grads
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-column mean and biased variance of a `[n, c]` buffer.
fn column_moments(data: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for row in data.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for row in data.chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in var.iter_mut() {
        *s /= n as f64;
    }
    (mean, var)
}

fn normalize_rows(x: &[f64], shape: &[usize], mean: &[f64], inv_std: &[f64], gamma: &Tensor, beta: &Tensor) -> Tensor {
    let c = mean.len();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Tensor::zeros(shape);
    for (o, xr) in out.data_mut().chunks_mut(c).zip(x.chunks(c)) {
        for ch in 0..c {
            o[ch] = (xr[ch] - mean[ch]) * inv_std[ch] * g[ch] + b[ch];
        }
    }
    out
}

/// Shared backward for batch/instance norm. `groups` are row ranges that share
/// statistics; `mean`/`inv_std` are laid out `[group, channel]`. With
/// `batch_stats == false` the statistics are constants.
#[allow(clippy::too_many_arguments)]
fn norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    grad: &Tensor,
    needs: &[bool],
    groups: &[(usize, usize)],
    mean: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
) -> Vec<Option<Tensor>> {
    let c = x.last_dim();
    let (xd, gd, gm) = (x.data(), grad.data(), gamma.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gi, &(r0, r1)) in groups.iter().enumerate() {
        let n = (r1 - r0) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for r in r0..r1 {
            for ch in 0..c {
                let xh = (xd[r * c + ch] - mean[gi * c + ch]) * inv_std[gi * c + ch];
                let g = gd[r * c + ch];
                sum_g[ch] += g;
                sum_gx[ch] += g * xh;
            }
        }
        for ch in 0..c {
            dgamma[ch] += sum_gx[ch];
            dbeta[ch] += sum_g[ch];
        }
        if needs[0] {
            for r in r0..r1 {
                for ch in 0..c {
                    let is = inv_std[gi * c + ch];
                    let g = gd[r * c + ch];
                    dx[r * c + ch] = if batch_stats {
                        let xh = (xd[r * c + ch] - mean[gi * c + ch]) * is;
                        gm[ch] * is * (g - sum_g[ch] / n - xh * sum_gx[ch] / n)
                    } else {
                        gm[ch] * is * g
                    };
                }
            }
        }
    }
    vec![
        needs[0].then(|| Tensor::new(x.shape(), dx).unwrap()),
        needs[1].then(|| Tensor::new(gamma.shape(), dgamma).unwrap()),
        needs[2].then(|| Tensor::new(gamma.shape(), dbeta).unwrap()),
    ]
}

/// Rows scaled to unit length (norm clamped at `eps`) and the clamped norms.
pub fn unit_rows(data: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut unit = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / c.max(1));
    for row in unit.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (unit, norms)
}

/// Chain rule through `u = x / max(|x|, eps)` given `du`.
fn unit_backward(du: &[f64], unit: &[f64], norms: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut dx = vec![0.0; du.len()];
    for (r, &n) in norms.iter().enumerate() {
        let (dr, ur) = (&du[r * c..(r + 1) * c], &unit[r * c..(r + 1) * c]);
        let out = &mut dx[r * c..(r + 1) * c];
        if n > eps {
            let proj = dot(dr, ur);
            for j in 0..c {
                out[j] = (dr[j] - proj * ur[j]) / n;
            }
        } else {
            for j in 0..c {
                out[j] = dr[j] / n;
            }
        }
    }
    dx
}

#[derive(Clone, Copy)]
struct ConvGeo {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let kk = self.kh * self.kw * self.ci;
        let mut cols = vec![0.0; self.b * self.ho * self.wo * kk];
        self.for_each_tap(|row, col, src| {
            cols[row * kk + col..row * kk + col + self.ci].copy_from_slice(&x[src..src + self.ci]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let kk = self.kh * self.kw * self.ci;
        self.for_each_tap(|row, col, src| {
            for c in 0..self.ci {
                dx[src + c] += cols[row * kk + col + c];
            }
        });
    }

    /// Visits every in-bounds (output row, column offset, input offset) tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for s in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (s * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((s * self.h + iy as usize) * self.w + ix as usize) * self.ci;
                            f(row, (ky * self.kw + kx) * self.ci, src);
                        }
                    }
                }
            }
        }
    }
}
