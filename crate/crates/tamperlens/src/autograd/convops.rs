//! Spatial operations for the autodiff graph: convolutions (via im2col),
//! pooling, and batch normalization over `[B, C, H, W]` tensors.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView4, Axis, Ix1, Ix4};

use super::{Graph, V};

/// Output spatial size for a convolution/pool dimension.
fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Unrolls one batch item `[C, H, W]` into a `[C*kh*kw, H2*W2]` matrix with
/// zero padding, so convolution becomes a matrix product.
fn im2col(
    x: &ArrayView4<'_, f64>,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let h2 = out_len(h, kh, stride, pad);
    let w2 = out_len(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, h2 * w2));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..h2 {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..w2 {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col[[row, oi * w2 + oj]] = x[[b, ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `[C*kh*kw, H2*W2]` gradient matrix back into `[C, H, W]`.
fn col2im_into(
    dcol: &Array2<f64>,
    dx: &mut Array4<f64>,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (_, c, h, w) = dx.dim();
    let h2 = out_len(h, kh, stride, pad);
    let w2 = out_len(w, kw, stride, pad);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..h2 {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..w2 {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[b, ci, ii as usize, jj as usize]] += dcol[[row, oi * w2 + oj]];
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D convolution: input `[B, C, H, W]`, weights `[O, C, kh, kw]`,
    /// bias `[O]`, zero padding. The im2col matrix is recomputed in the
    /// backward pass rather than stored, trading flops for memory.
    pub fn conv2d(&mut self, x: V, w: V, bias: V, stride: usize, pad: usize) -> V {
        let xv = Rc::clone(&self.values[x.0]);
        let wv = Rc::clone(&self.values[w.0]);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
        let b1 = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
        let (bn, c, h, wd) = x4.dim();
        let (o, wc, kh, kw) = w4.dim();
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(b1.len(), o, "conv2d bias mismatch");
        let h2 = out_len(h, kh, stride, pad);
        let w2 = out_len(wd, kw, stride, pad);
        let w_mat = w4
            .to_owned()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let mut out = Array4::<f64>::zeros((bn, o, h2, w2));
        for b in 0..bn {
            let col = im2col(&x4, b, kh, kw, stride, pad);
            let mut prod = Array2::<f64>::zeros((o, h2 * w2));
            general_mat_mul(1.0, &w_mat, &col, 0.0, &mut prod);
            for oi in 0..o {
                let bias_o = b1[oi];
                for (idx, &v) in prod.row(oi).iter().enumerate() {
                    out[[b, oi, idx / w2, idx % w2]] = v + bias_o;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
                let (bn, c, _, _) = x4.dim();
                let (o, _, kh, kw) = w4.dim();
                let w_mat = w4
                    .to_owned()
                    .into_shape_with_order((o, c * kh * kw))
                    .unwrap();
                let mut dx = Array4::<f64>::zeros(x4.raw_dim());
                let mut dw_mat = Array2::<f64>::zeros((o, c * kh * kw));
                let mut db = Array1::<f64>::zeros(o);
                for b in 0..bn {
                    let g_b = g4
                        .index_axis(Axis(0), b)
                        .to_owned()
                        .into_shape_with_order((o, h2 * w2))
                        .unwrap();
                    let col = im2col(&x4, b, kh, kw, stride, pad);
                    general_mat_mul(1.0, &g_b, &col.t(), 1.0, &mut dw_mat);
                    let mut dcol = Array2::<f64>::zeros((c * kh * kw, h2 * w2));
                    general_mat_mul(1.0, &w_mat.t(), &g_b, 0.0, &mut dcol);
                    col2im_into(&dcol, &mut dx, b, kh, kw, stride, pad);
                    db += &g_b.sum_axis(Axis(1));
                }
                let dw = dw_mat.into_shape_with_order((o, c, kh, kw)).unwrap();
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (bias, db.into_dyn()),
                ]
            })),
        )
    }

    /// Depthwise 2-D convolution: each input channel is filtered by its own
    /// `[kh, kw]` kernel (weights `[C, kh, kw]`, bias `[C]`).
    pub fn depthwise_conv2d(&mut self, x: V, w: V, bias: V, stride: usize, pad: usize) -> V {
        let xv = Rc::clone(&self.values[x.0]);
        let wv = Rc::clone(&self.values[w.0]);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let w3 = wv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b1 = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
        let (bn, c, h, wd) = x4.dim();
        let (wc, kh, kw) = w3.dim();
        assert_eq!(c, wc, "depthwise_conv2d channel mismatch");
        assert_eq!(b1.len(), c, "depthwise_conv2d bias mismatch");
        let h2 = out_len(h, kh, stride, pad);
        let w2 = out_len(wd, kw, stride, pad);
        let mut out = Array4::<f64>::zeros((bn, c, h2, w2));
        for b in 0..bn {
            for ci in 0..c {
                for oi in 0..h2 {
                    for oj in 0..w2 {
                        let mut acc = b1[ci];
                        for ki in 0..kh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                acc += x4[[b, ci, ii as usize, jj as usize]] * w3[[ci, ki, kj]];
                            }
                        }
                        out[[b, ci, oi, oj]] = acc;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
                let w3 = wv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (bn, c, h, wd) = x4.dim();
                let (_, kh, kw) = w3.dim();
                let mut dx = Array4::<f64>::zeros(x4.raw_dim());
                let mut dw = ndarray::Array3::<f64>::zeros(w3.raw_dim());
                let mut db = Array1::<f64>::zeros(c);
                for b in 0..bn {
                    for ci in 0..c {
                        for oi in 0..h2 {
                            for oj in 0..w2 {
                                let go = g4[[b, ci, oi, oj]];
                                if go == 0.0 {
                                    continue;
                                }
                                db[ci] += go;
                                for ki in 0..kh {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let jj = (oj * stride + kj) as isize - pad as isize;
                                        if jj < 0 || jj >= wd as isize {
                                            continue;
                                        }
                                        dw[[ci, ki, kj]] +=
                                            go * x4[[b, ci, ii as usize, jj as usize]];
                                        dx[[b, ci, ii as usize, jj as usize]] +=
                                            go * w3[[ci, ki, kj]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (bias, db.into_dyn()),
                ]
            })),
        )
    }

    /// Max pooling with square window `k` and stride `s` (no padding).
    /// Gradient routes to the first maximal element of each window.
    pub fn maxpool2d(&mut self, x: V, k: usize, s: usize) -> V {
        let xv = Rc::clone(&self.values[x.0]);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let (bn, c, h, w) = x4.dim();
        let h2 = out_len(h, k, s, 0);
        let w2 = out_len(w, k, s, 0);
        let mut out = Array4::<f64>::zeros((bn, c, h2, w2));
        let mut argmax = vec![0usize; bn * c * h2 * w2];
        for b in 0..bn {
            for ci in 0..c {
                for oi in 0..h2 {
                    for oj in 0..w2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = oi * s + ki;
                                let jj = oj * s + kj;
                                let v = x4[[b, ci, ii, jj]];
                                if v > best {
                                    best = v;
                                    best_idx = ii * w + jj;
                                }
                            }
                        }
                        out[[b, ci, oi, oj]] = best;
                        argmax[((b * c + ci) * h2 + oi) * w2 + oj] = best_idx;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((bn, c, h, w));
                for b in 0..bn {
                    for ci in 0..c {
                        for oi in 0..h2 {
                            for oj in 0..w2 {
                                let flat = argmax[((b * c + ci) * h2 + oi) * w2 + oj];
                                dx[[b, ci, flat / w, flat % w]] += g4[[b, ci, oi, oj]];
                            }
                        }
                    }
                }
                vec![(x, dx.into_dyn())]
            })),
        )
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: V) -> V {
        let x4 = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bn, c, h, w) = x4.dim();
        let denom = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((bn, c));
        for b in 0..bn {
            for ci in 0..c {
                out[[b, ci]] = x4.index_axis(Axis(0), b).index_axis(Axis(0), ci).sum() / denom;
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = Array4::<f64>::zeros((bn, c, h, w));
                for b in 0..bn {
                    for ci in 0..c {
                        let v = g2[[b, ci]] / denom;
                        dx.index_axis_mut(Axis(0), b)
                            .index_axis_mut(Axis(0), ci)
                            .fill(v);
                    }
                }
                vec![(x, dx.into_dyn())]
            })),
        )
    }

    /// Batch normalization over `[B, C, H, W]`. In training mode the batch
    /// statistics normalize the input and an exponential-moving-average
    /// update for the running buffers is recorded as a deferred
    /// [`super::StatUpdate`]; in inference mode the running buffers are used
    /// directly and treated as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: V,
        gamma: V,
        beta: V,
        running_mean: &super::Param,
        running_var: &super::Param,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> V {
        let xv = Rc::clone(&self.values[x.0]);
        let gv = Rc::clone(&self.values[gamma.0]);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b1 = self.values[beta.0]
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let (bn, c, h, w) = x4.dim();
        let n = (bn * h * w) as f64;

        let (mean, var) = if training {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let lane = x4.index_axis(Axis(1), ci);
                let m = lane.sum() / n;
                mean[ci] = m;
                var[ci] = lane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
            }
            (mean, var)
        } else {
            (
                running_mean
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned(),
                running_var
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned(),
            )
        };

        if training {
            let rm = running_mean.value.view().into_dimensionality::<Ix1>().unwrap();
            let rv = running_var.value.view().into_dimensionality::<Ix1>().unwrap();
            let new_mean = &rm * (1.0 - momentum) + &mean * momentum;
            let new_var = &rv * (1.0 - momentum) + &var * momentum;
            self.record_stat_update(running_mean.id(), new_mean.into_dyn());
            self.record_stat_update(running_var.id(), new_var.into_dyn());
        }

        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut out = Array4::<f64>::zeros((bn, c, h, w));
        for b in 0..bn {
            for ci in 0..c {
                let (m, is, gm, bt) = (mean[ci], inv_std[ci], g1[ci], b1[ci]);
                ndarray::Zip::from(out.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), ci))
                    .and(x4.index_axis(Axis(0), b).index_axis(Axis(0), ci))
                    .for_each(|o, &v| *o = (v - m) * is * gm + bt);
            }
        }

        let mean_bw = mean.clone();
        let inv_std_bw = inv_std.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
                let gm1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array4::<f64>::zeros(x4.raw_dim());
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let m = mean_bw[ci];
                    let is = inv_std_bw[ci];
                    let gmc = gm1[ci];
                    // Per-channel sums needed by the batch-norm backward identity.
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for b in 0..bn {
                        let gl = g4.index_axis(Axis(0), b);
                        let xl = x4.index_axis(Axis(0), b);
                        let gl = gl.index_axis(Axis(0), ci);
                        let xl = xl.index_axis(Axis(0), ci);
                        ndarray::Zip::from(&gl).and(&xl).for_each(|&dy, &xval| {
                            sum_dy += dy;
                            sum_dy_xhat += dy * (xval - m) * is;
                        });
                    }
                    dgamma[ci] = sum_dy_xhat;
                    dbeta[ci] = sum_dy;
                    for b in 0..bn {
                        let gl = g4.index_axis(Axis(0), b);
                        let xl = x4.index_axis(Axis(0), b);
                        let gl = gl.index_axis(Axis(0), ci);
                        let xl = xl.index_axis(Axis(0), ci);
                        let mut dxl = dx.index_axis_mut(Axis(0), b);
                        let mut dxl = dxl.index_axis_mut(Axis(0), ci);
                        if training {
                            ndarray::Zip::from(&mut dxl).and(&gl).and(&xl).for_each(
                                |d, &dy, &xval| {
                                    let xhat = (xval - m) * is;
                                    *d += gmc * is * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
                                },
                            );
                        } else {
                            ndarray::Zip::from(&mut dxl).and(&gl).for_each(|d, &dy| {
                                *d += gmc * is * dy;
                            });
                        }
                    }
                }
                vec![
                    (x, dx.into_dyn()),
                    (gamma, dgamma.into_dyn()),
                    (beta, dbeta.into_dyn()),
                ]
            })),
        )
    }
}

/// Converts a `[B, C, H, W]` node to `[B, C*H*W]` rows.
impl Graph {
    pub fn flatten_spatial(&mut self, x: V) -> V {
        let shape: Vec<usize> = self.values[x.0].shape().to_vec();
        assert_eq!(shape.len(), 4, "flatten_spatial expects a 4-d tensor");
        let flat = shape[1] * shape[2] * shape[3];
        self.reshape(x, &[shape[0], flat])
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, Param};
    use crate::autograd::gradcheck::{check_param_grads, rand_arr};
    use ndarray::{Array4, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2d_matches_direct_convolution() {
        // 1x1 batch, known kernel: compare against hand-computed values.
        let mut g = Graph::recording();
        let x = g.constant(
            Array4::from_shape_vec(
                (1, 1, 3, 3),
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            )
            .unwrap()
            .into_dyn(),
        );
        let w = g.constant(
            Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, -1.0])
                .unwrap()
                .into_dyn(),
        );
        let b = g.constant(ndarray::arr1(&[0.5]).into_dyn());
        let y = g.conv2d(x, w, b, 1, 0);
        let yv = g.value(y);
        // Window differences: x[i][j] - x[i+1][j+1], plus bias.
        assert_eq!(yv.shape(), &[1, 1, 2, 2]);
        assert_eq!(yv[[0, 0, 0, 0]], 1.0 - 5.0 + 0.5);
        assert_eq!(yv[[0, 0, 1, 1]], 5.0 - 9.0 + 0.5);
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Param::new("x", rand_arr(&mut rng, &[2, 3, 5, 4]));
        let w = Param::new("w", rand_arr(&mut rng, &[4, 3, 3, 3]));
        let b = Param::new("b", rand_arr(&mut rng, &[4]));
        check_param_grads(&[&x, &w, &b], 1e-6, 1e-6, |g| {
            let xv = g.param(&x);
            let wv = g.param(&w);
            let bv = g.param(&b);
            let y = g.conv2d(xv, wv, bv, 1, 1);
            let s = g.sigmoid(y);
            g.sum_all(s)
        });
    }

    #[test]
    fn conv2d_strided_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Param::new("x", rand_arr(&mut rng, &[1, 2, 6, 6]));
        let w = Param::new("w", rand_arr(&mut rng, &[3, 2, 3, 3]));
        let b = Param::new("b", rand_arr(&mut rng, &[3]));
        check_param_grads(&[&x, &w, &b], 1e-6, 1e-6, |g| {
            let xv = g.param(&x);
            let wv = g.param(&w);
            let bv = g.param(&b);
            let y = g.conv2d(xv, wv, bv, 2, 1);
            g.sum_all(y)
        });
    }

    #[test]
    fn depthwise_conv2d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Param::new("x", rand_arr(&mut rng, &[2, 3, 5, 5]));
        let w = Param::new("w", rand_arr(&mut rng, &[3, 3, 3]));
        let b = Param::new("b", rand_arr(&mut rng, &[3]));
        check_param_grads(&[&x, &w, &b], 1e-6, 1e-6, |g| {
            let xv = g.param(&x);
            let wv = g.param(&w);
            let bv = g.param(&b);
            let y = g.depthwise_conv2d(xv, wv, bv, 1, 1);
            let s = g.sigmoid(y);
            g.sum_all(s)
        });
    }

    #[test]
    fn maxpool_routes_gradient_to_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Param::new("x", rand_arr(&mut rng, &[2, 2, 4, 4]));
        check_param_grads(&[&x], 1e-6, 1e-6, |g| {
            let xv = g.param(&x);
            let y = g.maxpool2d(xv, 2, 2);
            let s = g.sigmoid(y);
            g.sum_all(s)
        });
    }

    #[test]
    fn global_avg_pool_value_and_grad() {
        let mut g = Graph::recording();
        let x = g.constant(
            Array4::from_shape_vec((1, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0])
                .unwrap()
                .into_dyn(),
        );
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y)[[0, 0]], 2.5);
        assert_eq!(g.value(y)[[0, 1]], 25.0);

        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = Param::new("p", rand_arr(&mut rng, &[2, 3, 3, 4]));
        check_param_grads(&[&p], 1e-6, 1e-7, |g| {
            let xv = g.param(&p);
            let y = g.global_avg_pool(xv);
            let s = g.sigmoid(y);
            g.sum_all(s)
        });
    }

    #[test]
    fn batch_norm_train_grads_and_stat_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Param::new("x", rand_arr(&mut rng, &[3, 2, 4, 4]));
        let gamma = Param::new("gamma", rand_arr(&mut rng, &[2]));
        let beta = Param::new("beta", rand_arr(&mut rng, &[2]));
        let rm = Param::buffer("rm", ndarray::ArrayD::zeros(IxDyn(&[2])));
        let rv = Param::buffer("rv", ndarray::ArrayD::ones(IxDyn(&[2])));
        check_param_grads(&[&x, &gamma, &beta], 1e-6, 1e-5, |g| {
            let xv = g.param(&x);
            let gm = g.param(&gamma);
            let bt = g.param(&beta);
            let y = g.batch_norm2d(xv, gm, bt, &rm, &rv, true, 0.1, 1e-5);
            let s = g.sigmoid(y);
            g.sum_all(s)
        });

        // Training forward records one update per buffer.
        let mut g = Graph::recording();
        let xv = g.param(&x);
        let gm = g.param(&gamma);
        let bt = g.param(&beta);
        let _ = g.batch_norm2d(xv, gm, bt, &rm, &rv, true, 0.1, 1e-5);
        let updates = g.take_stat_updates();
        assert_eq!(updates.len(), 2);
        assert!(updates.iter().any(|u| u.param_id == rm.id()));
        assert!(updates.iter().any(|u| u.param_id == rv.id()));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Param::new("x", rand_arr(&mut rng, &[2, 2, 3, 3]));
        let gamma = Param::new("gamma", ndarray::ArrayD::ones(IxDyn(&[2])));
        let beta = Param::buffer("beta", ndarray::ArrayD::zeros(IxDyn(&[2])));
        let rm = Param::buffer("rm", ndarray::arr1(&[0.25, -0.5]).into_dyn());
        let rv = Param::buffer("rv", ndarray::arr1(&[4.0, 0.25]).into_dyn());
        let mut g = Graph::inference();
        let xv = g.param(&x);
        let gm = g.param(&gamma);
        let bt = g.param(&beta);
        let y = g.batch_norm2d(xv, gm, bt, &rm, &rv, false, 0.1, 0.0);
        // Channel 0: (x - 0.25) / 2; channel 1: (x + 0.5) / 0.5.
        let x0 = x.value[[0, 0, 1, 1]];
        let y0 = g.value(y)[[0, 0, 1, 1]];
        assert!((y0 - (x0 - 0.25) / 2.0).abs() < 1e-12);
        assert!(g.take_stat_updates().is_empty());
    }
}
