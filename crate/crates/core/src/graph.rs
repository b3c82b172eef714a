//! Tape-based reverse-mode automatic differentiation.
//!
//! Each forward builder evaluates eagerly and records a node; `backward`
//! walks the tape in reverse and accumulates gradients for every variable.
//! The op set is exactly what the colourisation network needs: dense/conv
//! primitives, instance normalisation, resizes, and the capsule routing
//! einsums. All hand-written backward passes are covered by the
//! finite-difference checks in the test suites.

use crate::tensor::{idx3, idx4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    SumAll,
    Relu,
    LeakyRelu(f64),
    Conv2d {
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    ConvTranspose2d {
        stride: usize,
    },
    InstanceNorm {
        eps: f64,
    },
    ChannelAffine,
    MaxPool2,
    ResizeNearest {
        h: usize,
        w: usize,
    },
    ResizeBilinear {
        h: usize,
        w: usize,
    },
    ConcatChannels,
    SliceChannels {
        from: usize,
        to: usize,
    },
    /// Softmax over axis 0, independently for every trailing index.
    Softmax0,
    Dense,
    GlobalAvgPool,
    BroadcastSpatial {
        h: usize,
        w: usize,
    },
    /// capsule fields `[c,h,w]` each -> bank `[I, h*w, c]`
    PackCapsules,
    /// bank `[I,P,c]` -> field `[c,h,w]` of one capsule
    CapsuleField {
        index: usize,
        h: usize,
        w: usize,
    },
    /// `U[I,P,c], W[I,J,d,c] -> [I,J,P,d]`
    PredictTransform,
    /// `Uhat[I,J,P,d], C[I,J] -> S[J,P,d]`
    RouteAggregate,
    /// `Uhat[I,J,P,d], V[J,P,d] -> A[I,J]`
    RouteAgreement,
    /// row-wise softmax of `[I,J]` over the J axis
    SoftmaxRows,
    /// per-row squash of `[J, ...]`
    SquashRows,
    /// `S[J,P,c], L[J,d,c] -> [J,P,d]`
    PoseMap,
    /// `V[J,P,d], Wr[J,I,c,d] -> R[J,I,P,c]`
    PairMapJ,
    /// `R[J,I,P,c], C[I,J] -> [I,P,c]`
    CouplingSum,
    /// rebalanced soft-target cross-entropy, mean over pixels
    WeightedSoftCrossEntropy {
        target: Tensor,
        weights: Tensor,
    },
    BceWithLogits {
        target_real: bool,
    },
    CrossEntropyLogits {
        label: usize,
    },
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients harvested from one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; zeros if the var did not
    /// participate in the root's computation.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub fn conv_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> usize {
    let eff = dilation * (kernel - 1) + 1;
    assert!(
        input + 2 * pad >= eff,
        "conv input {} too small for kernel {} (dilation {})",
        input,
        kernel,
        dilation
    );
    (input + 2 * pad - eff) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(Op::Sub, vec![a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(Op::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(Op::Scale(c), vec![a], out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(Op::Relu, vec![a], out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(Op::LeakyRelu(slope), vec![a], out)
    }

    /// 2-d convolution; `x` is `[Ci,H,W]`, `w` is `[Co,Ci,kh,kw]`, `b` is `[Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, wci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(bv.shape(), &[co]);
        let oh = conv_out_size(h, kh, stride, pad, dilation);
        let ow = conv_out_size(wd, kw, stride, pad, dilation);
        let mut out = Tensor::zeros(&[co, oh, ow]);
        let os = [co, oh, ow];
        let xs = [ci, h, wd];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bv.data()[o];
                    for i in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv.data()[idx3(&xs, i, iy as usize, ix as usize)]
                                    * wv.data()[idx4(wv.shape(), o, i, ky, kx)];
                            }
                        }
                    }
                    out.data_mut()[idx3(&os, o, oy, ox)] = acc;
                }
            }
        }
        self.push(
            Op::Conv2d {
                stride,
                pad,
                dilation,
            },
            vec![x, w, b],
            out,
        )
    }

    /// Transposed 2-d convolution; `x` is `[Ci,H,W]`, `w` is `[Ci,Co,kh,kw]`,
    /// `b` is `[Co]`, output `[Co,(H-1)*s+kh,(W-1)*s+kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (wci, co, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(ci, wci, "conv_transpose2d channel mismatch");
        assert_eq!(bv.shape(), &[co]);
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        let os = [co, oh, ow];
        let xs = [ci, h, wd];
        // bias first
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.data_mut()[idx3(&os, o, oy, ox)] = bv.data()[o];
                }
            }
        }
        for i in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let xval = xv.data()[idx3(&xs, i, iy, ix)];
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = iy * stride + ky;
                                let ox = ix * stride + kx;
                                out.data_mut()[idx3(&os, o, oy, ox)] +=
                                    xval * wv.data()[idx4(wv.shape(), i, o, ky, kx)];
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::ConvTranspose2d { stride }, vec![x, w, b], out)
    }

    /// Instance normalisation without affine terms: per-channel zero mean and
    /// unit variance over the spatial extent. A constant channel normalises
    /// to exactly zero (guarded; the epsilon alone would leave rounding
    /// residue scaled by 1/sqrt(eps)).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = (h * w) as f64;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let sl = &xv.data()[ch * h * w..(ch + 1) * h * w];
            if channel_is_constant(sl) {
                continue; // output stays zero
            }
            let mean = sl.iter().sum::<f64>() / n;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + eps).sqrt();
            let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
            for (d, s) in dst.iter_mut().zip(sl.iter()) {
                *d = (s - mean) * istd;
            }
        }
        self.push(Op::InstanceNorm { eps }, vec![x], out)
    }

    /// `y[c,..] = x[c,..] * gamma[c] + beta[c]`
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let g = gv.data()[ch];
            let b = bv.data()[ch];
            for p in 0..h * w {
                out.data_mut()[ch * h * w + p] = xv.data()[ch * h * w + p] * g + b;
            }
        }
        self.push(Op::ChannelAffine, vec![x, gamma, beta], out)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// scan order so the backward pass is deterministic.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h >= 2 && w >= 2, "max_pool2 input too small");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let xs = [c, h, w];
        let os = [c, oh, ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = xv.data()[idx3(&xs, ch, oy * 2 + dy, ox * 2 + dx)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.data_mut()[idx3(&os, ch, oy, ox)] = best;
                }
            }
        }
        self.push(Op::MaxPool2, vec![x], out)
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, ih, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[c, h, w]);
        let xs = [c, ih, iw];
        let os = [c, h, w];
        for ch in 0..c {
            for oy in 0..h {
                let sy = (oy * ih / h).min(ih - 1);
                for ox in 0..w {
                    let sx = (ox * iw / w).min(iw - 1);
                    out.data_mut()[idx3(&os, ch, oy, ox)] = xv.data()[idx3(&xs, ch, sy, sx)];
                }
            }
        }
        self.push(Op::ResizeNearest { h, w }, vec![x], out)
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, ih, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[c, h, w]);
        let xs = [c, ih, iw];
        let os = [c, h, w];
        for oy in 0..h {
            let (y0, y1, wy) = bilinear_taps(oy, ih, h);
            for ox in 0..w {
                let (x0, x1, wx) = bilinear_taps(ox, iw, w);
                for ch in 0..c {
                    let v00 = xv.data()[idx3(&xs, ch, y0, x0)];
                    let v01 = xv.data()[idx3(&xs, ch, y0, x1)];
                    let v10 = xv.data()[idx3(&xs, ch, y1, x0)];
                    let v11 = xv.data()[idx3(&xs, ch, y1, x1)];
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    out.data_mut()[idx3(&os, ch, oy, ox)] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        self.push(Op::ResizeBilinear { h, w }, vec![x], out)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let t = &self.nodes[parts[0].0].value;
            (t.shape()[1], t.shape()[2])
        };
        let mut total_c = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.shape()[1], h, "concat spatial mismatch");
            assert_eq!(t.shape()[2], w, "concat spatial mismatch");
            total_c += t.shape()[0];
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::from_vec(&[total_c, h, w], data);
        self.push(Op::ConcatChannels, parts.to_vec(), out)
    }

    /// Channel range `[from, to)` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(
            from < to && to <= c,
            "bad channel slice {from}..{to} of {c}"
        );
        let data = xv.data()[from * h * w..to * h * w].to_vec();
        let out = Tensor::from_vec(&[to - from, h, w], data);
        self.push(Op::SliceChannels { from, to }, vec![x], out)
    }

    /// Softmax over axis 0 for every trailing index; works on `[C]`,
    /// `[C,H,W]`, etc.
    pub fn softmax0(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[0];
        let rest: usize = xv.shape()[1..].iter().product::<usize>().max(1);
        let mut out = Tensor::zeros(xv.shape());
        for p in 0..rest {
            let mut mx = f64::NEG_INFINITY;
            for q in 0..c {
                mx = mx.max(xv.data()[q * rest + p]);
            }
            let mut z = 0.0;
            for q in 0..c {
                z += (xv.data()[q * rest + p] - mx).exp();
            }
            for q in 0..c {
                out.data_mut()[q * rest + p] = (xv.data()[q * rest + p] - mx).exp() / z;
            }
        }
        self.push(Op::Softmax0, vec![x], out)
    }

    /// `y = W x + b` with `x: [n]`, `w: [m,n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let n = xv.len();
        let (m, wn) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(n, wn, "dense shape mismatch");
        assert_eq!(bv.shape(), &[m]);
        let mut out = Tensor::zeros(&[m]);
        for r in 0..m {
            let mut acc = bv.data()[r];
            for cidx in 0..n {
                acc += wv.data()[r * n + cidx] * xv.data()[cidx];
            }
            out.data_mut()[r] = acc;
        }
        self.push(Op::Dense, vec![x, w, b], out)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = (h * w) as f64;
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] = xv.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n;
        }
        self.push(Op::GlobalAvgPool, vec![x], out)
    }

    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[0];
        assert_eq!(xv.shape().len(), 1);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let v = xv.data()[ch];
            for p in 0..h * w {
                out.data_mut()[ch * h * w + p] = v;
            }
        }
        self.push(Op::BroadcastSpatial { h, w }, vec![x], out)
    }

    /// Stacks per-capsule fields `[c,h,w]` into a bank `[I, h*w, c]`.
    pub fn pack_capsules(&mut self, fields: &[Var]) -> Var {
        assert!(!fields.is_empty());
        let (c, h, w) = {
            let t = &self.nodes[fields[0].0].value;
            (t.shape()[0], t.shape()[1], t.shape()[2])
        };
        let count = fields.len();
        let p = h * w;
        let mut out = Tensor::zeros(&[count, p, c]);
        for (i, f) in fields.iter().enumerate() {
            let t = &self.nodes[f.0].value;
            assert_eq!(t.shape(), &[c, h, w], "pack_capsules shape mismatch");
            for ch in 0..c {
                for pos in 0..p {
                    out.data_mut()[(i * p + pos) * c + ch] = t.data()[ch * p + pos];
                }
            }
        }
        self.push(Op::PackCapsules, fields.to_vec(), out)
    }

    /// Extracts capsule `index` of a bank `[I,P,c]` as a field `[c,h,w]`.
    pub fn capsule_field(&mut self, bank: Var, index: usize, h: usize, w: usize) -> Var {
        let bv = &self.nodes[bank.0].value;
        let (count, p, c) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert!(index < count);
        assert_eq!(p, h * w, "capsule_field spatial mismatch");
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for pos in 0..p {
                out.data_mut()[ch * p + pos] = bv.data()[(index * p + pos) * c + ch];
            }
        }
        self.push(Op::CapsuleField { index, h, w }, vec![bank], out)
    }

    /// `Uhat[i,j,p,d] = sum_c W[i,j,d,c] * U[i,p,c]`
    pub fn predict_transform(&mut self, u: Var, w: Var) -> Var {
        let uv = &self.nodes[u.0].value;
        let wv = &self.nodes[w.0].value;
        let (i_n, p_n, c_n) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
        let (wi, j_n, d_n, wc) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(i_n, wi);
        assert_eq!(c_n, wc);
        let mut out = Tensor::zeros(&[i_n, j_n, p_n, d_n]);
        for i in 0..i_n {
            for j in 0..j_n {
                for p in 0..p_n {
                    for d in 0..d_n {
                        let mut acc = 0.0;
                        for c in 0..c_n {
                            acc += wv.data()[idx4(wv.shape(), i, j, d, c)]
                                * uv.data()[(i * p_n + p) * c_n + c];
                        }
                        out.data_mut()[idx4(&[i_n, j_n, p_n, d_n], i, j, p, d)] = acc;
                    }
                }
            }
        }
        self.push(Op::PredictTransform, vec![u, w], out)
    }

    /// `S[j,p,d] = sum_i C[i,j] * Uhat[i,j,p,d]`
    pub fn route_aggregate(&mut self, uhat: Var, coupling: Var) -> Var {
        let uv = &self.nodes[uhat.0].value;
        let cv = &self.nodes[coupling.0].value;
        let (i_n, j_n, p_n, d_n) = (uv.shape()[0], uv.shape()[1], uv.shape()[2], uv.shape()[3]);
        assert_eq!(cv.shape(), &[i_n, j_n]);
        let mut out = Tensor::zeros(&[j_n, p_n, d_n]);
        for i in 0..i_n {
            for j in 0..j_n {
                let cw = cv.data()[i * j_n + j];
                for pd in 0..p_n * d_n {
                    out.data_mut()[j * p_n * d_n + pd] +=
                        cw * uv.data()[(i * j_n + j) * p_n * d_n + pd];
                }
            }
        }
        self.push(Op::RouteAggregate, vec![uhat, coupling], out)
    }

    /// `A[i,j] = sum_{p,d} Uhat[i,j,p,d] * V[j,p,d]`
    pub fn route_agreement(&mut self, uhat: Var, v: Var) -> Var {
        let uv = &self.nodes[uhat.0].value;
        let vv = &self.nodes[v.0].value;
        let (i_n, j_n, p_n, d_n) = (uv.shape()[0], uv.shape()[1], uv.shape()[2], uv.shape()[3]);
        assert_eq!(vv.shape(), &[j_n, p_n, d_n]);
        let mut out = Tensor::zeros(&[i_n, j_n]);
        for i in 0..i_n {
            for j in 0..j_n {
                let mut acc = 0.0;
                for pd in 0..p_n * d_n {
                    acc +=
                        uv.data()[(i * j_n + j) * p_n * d_n + pd] * vv.data()[j * p_n * d_n + pd];
                }
                out.data_mut()[i * j_n + j] = acc;
            }
        }
        self.push(Op::RouteAgreement, vec![uhat, v], out)
    }

    /// Row-wise softmax of `[I,J]` over J.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (i_n, j_n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(&[i_n, j_n]);
        for i in 0..i_n {
            let row = &xv.data()[i * j_n..(i + 1) * j_n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..j_n {
                out.data_mut()[i * j_n + j] = (row[j] - mx).exp() / z;
            }
        }
        self.push(Op::SoftmaxRows, vec![x], out)
    }

    /// Per-row squash of `[J, ...]`: `v = s * |s| / (1 + |s|^2)` with a
    /// guarded zero case.
    pub fn squash_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let j_n = xv.shape()[0];
        let k: usize = xv.shape()[1..].iter().product::<usize>().max(1);
        let mut out = Tensor::zeros(xv.shape());
        for j in 0..j_n {
            let row = &xv.data()[j * k..(j + 1) * k];
            let n2: f64 = row.iter().map(|v| v * v).sum();
            let n = n2.sqrt();
            let g = if n < SQUASH_GUARD {
                0.0
            } else {
                n / (1.0 + n2)
            };
            for t in 0..k {
                out.data_mut()[j * k + t] = row[t] * g;
            }
        }
        self.push(Op::SquashRows, vec![x], out)
    }

    /// `Y[j,p,d] = sum_c L[j,d,c] * S[j,p,c]`
    pub fn pose_map(&mut self, s: Var, l: Var) -> Var {
        let sv = &self.nodes[s.0].value;
        let lv = &self.nodes[l.0].value;
        let (j_n, p_n, c_n) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        let (lj, d_n, lc) = (lv.shape()[0], lv.shape()[1], lv.shape()[2]);
        assert_eq!(j_n, lj);
        assert_eq!(c_n, lc);
        let mut out = Tensor::zeros(&[j_n, p_n, d_n]);
        for j in 0..j_n {
            for p in 0..p_n {
                for d in 0..d_n {
                    let mut acc = 0.0;
                    for c in 0..c_n {
                        acc +=
                            lv.data()[(j * d_n + d) * c_n + c] * sv.data()[(j * p_n + p) * c_n + c];
                    }
                    out.data_mut()[(j * p_n + p) * d_n + d] = acc;
                }
            }
        }
        self.push(Op::PoseMap, vec![s, l], out)
    }

    /// `R[j,i,p,c] = sum_d Wr[j,i,c,d] * V[j,p,d]`
    pub fn pair_map_j(&mut self, v: Var, wr: Var) -> Var {
        let vv = &self.nodes[v.0].value;
        let wv = &self.nodes[wr.0].value;
        let (j_n, p_n, d_n) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        let (wj, i_n, c_n, wd) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(j_n, wj);
        assert_eq!(d_n, wd);
        let mut out = Tensor::zeros(&[j_n, i_n, p_n, c_n]);
        for j in 0..j_n {
            for i in 0..i_n {
                for p in 0..p_n {
                    for c in 0..c_n {
                        let mut acc = 0.0;
                        for d in 0..d_n {
                            acc += wv.data()[idx4(wv.shape(), j, i, c, d)]
                                * vv.data()[(j * p_n + p) * d_n + d];
                        }
                        out.data_mut()[idx4(&[j_n, i_n, p_n, c_n], j, i, p, c)] = acc;
                    }
                }
            }
        }
        self.push(Op::PairMapJ, vec![v, wr], out)
    }

    /// `U[i,p,c] = sum_j C[i,j] * R[j,i,p,c]`
    pub fn coupling_sum(&mut self, r: Var, coupling: Var) -> Var {
        let rv = &self.nodes[r.0].value;
        let cv = &self.nodes[coupling.0].value;
        let (j_n, i_n, p_n, c_n) = (rv.shape()[0], rv.shape()[1], rv.shape()[2], rv.shape()[3]);
        assert_eq!(cv.shape(), &[i_n, j_n]);
        let mut out = Tensor::zeros(&[i_n, p_n, c_n]);
        for j in 0..j_n {
            for i in 0..i_n {
                let cw = cv.data()[i * j_n + j];
                for pc in 0..p_n * c_n {
                    out.data_mut()[i * p_n * c_n + pc] +=
                        cw * rv.data()[(j * i_n + i) * p_n * c_n + pc];
                }
            }
        }
        self.push(Op::CouplingSum, vec![r, coupling], out)
    }

    /// Rebalanced cross-entropy against a per-pixel soft target distribution.
    /// `logits` and `target` are `[Q,h,w]`, `weights` is `[h,w]`; the result
    /// is the weighted per-pixel cross-entropy averaged over pixels.
    pub fn weighted_soft_cross_entropy(
        &mut self,
        logits: Var,
        target: Tensor,
        weights: Tensor,
    ) -> Var {
        let lv = &self.nodes[logits.0].value;
        let (q, h, w) = (lv.shape()[0], lv.shape()[1], lv.shape()[2]);
        assert_eq!(target.shape(), &[q, h, w], "target shape mismatch");
        assert_eq!(weights.shape(), &[h, w], "weight shape mismatch");
        let px = h * w;
        let mut total = 0.0;
        for p in 0..px {
            let mut mx = f64::NEG_INFINITY;
            for qq in 0..q {
                mx = mx.max(lv.data()[qq * px + p]);
            }
            let mut z = 0.0;
            for qq in 0..q {
                z += (lv.data()[qq * px + p] - mx).exp();
            }
            let logz = z.ln() + mx;
            let mut ce = 0.0;
            for qq in 0..q {
                let t = target.data()[qq * px + p];
                if t != 0.0 {
                    ce -= t * (lv.data()[qq * px + p] - logz);
                }
            }
            total += weights.data()[p] * ce;
        }
        let out = Tensor::scalar(total / px as f64);
        self.push(
            Op::WeightedSoftCrossEntropy { target, weights },
            vec![logits],
            out,
        )
    }

    /// Mean binary cross-entropy with logits against an all-real or all-fake
    /// target map.
    pub fn bce_with_logits(&mut self, logits: Var, target_real: bool) -> Var {
        let lv = &self.nodes[logits.0].value;
        let t = if target_real { 1.0 } else { 0.0 };
        let mut total = 0.0;
        for &x in lv.data() {
            // stable: max(x,0) - x*t + ln(1 + e^{-|x|})
            total += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        }
        let out = Tensor::scalar(total / lv.len() as f64);
        self.push(Op::BceWithLogits { target_real }, vec![logits], out)
    }

    /// Softmax cross-entropy of a logit vector against a hard label.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert!(label < lv.len(), "label out of range");
        let mx = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lv.data().iter().map(|v| (v - mx).exp()).sum();
        let loss = z.ln() + mx - lv.data()[label];
        let out = Tensor::scalar(loss);
        self.push(Op::CrossEntropyLogits { label }, vec![logits], out)
    }

    /// Reverse pass from a scalar root; returns one gradient slot per var.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let g_out = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            self.accumulate(node, &g_out, &mut grads);
            grads[idx] = Some(g_out);
        }
        Gradients { grads }
    }

    fn accumulate(&self, node: &Node, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let add_into =
            |grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor| match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_into(grads, node.inputs[0], g.clone());
                add_into(grads, node.inputs[1], g.clone());
            }
            Op::Sub => {
                add_into(grads, node.inputs[0], g.clone());
                let neg = Tensor::from_vec(g.shape(), g.data().iter().map(|v| -v).collect());
                add_into(grads, node.inputs[1], neg);
            }
            Op::Mul => {
                let a = &self.nodes[node.inputs[0].0].value;
                let b = &self.nodes[node.inputs[1].0].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(b.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(a.data())
                        .map(|(gv, av)| gv * av)
                        .collect(),
                );
                add_into(grads, node.inputs[0], da);
                add_into(grads, node.inputs[1], db);
            }
            Op::Scale(c) => {
                let d = Tensor::from_vec(g.shape(), g.data().iter().map(|v| v * c).collect());
                add_into(grads, node.inputs[0], d);
            }
            Op::SumAll => {
                let x = &self.nodes[node.inputs[0].0].value;
                add_into(grads, node.inputs[0], Tensor::full(x.shape(), g.item()));
            }
            Op::Relu => {
                let x = &self.nodes[node.inputs[0].0].value;
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                add_into(grads, node.inputs[0], d);
            }
            Op::LeakyRelu(slope) => {
                let x = &self.nodes[node.inputs[0].0].value;
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { gv * slope })
                        .collect(),
                );
                add_into(grads, node.inputs[0], d);
            }
            Op::Conv2d {
                stride,
                pad,
                dilation,
            } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let w = &self.nodes[node.inputs[1].0].value;
                let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                let mut db = Tensor::zeros(&[co]);
                let xs = [ci, h, wd];
                let os = [co, oh, ow];
                for o in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[idx3(&os, o, oy, ox)];
                            if gv == 0.0 {
                                continue;
                            }
                            db.data_mut()[o] += gv;
                            for i in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky * dilation) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix =
                                            (ox * stride + kx * dilation) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = idx3(&xs, i, iy as usize, ix as usize);
                                        let wi = idx4(w.shape(), o, i, ky, kx);
                                        dw.data_mut()[wi] += gv * x.data()[xi];
                                        dx.data_mut()[xi] += gv * w.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                add_into(grads, node.inputs[0], dx);
                add_into(grads, node.inputs[1], dw);
                add_into(grads, node.inputs[2], db);
            }
            Op::ConvTranspose2d { stride } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let w = &self.nodes[node.inputs[1].0].value;
                let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (_, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                let mut db = Tensor::zeros(&[co]);
                let xs = [ci, h, wd];
                let os = [co, oh, ow];
                for o in 0..co {
                    for p in 0..oh * ow {
                        db.data_mut()[o] += g.data()[o * oh * ow + p];
                    }
                }
                for i in 0..ci {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let xi = idx3(&xs, i, iy, ix);
                            let xval = x.data()[xi];
                            for o in 0..co {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let oy = iy * stride + ky;
                                        let ox = ix * stride + kx;
                                        let gv = g.data()[idx3(&os, o, oy, ox)];
                                        let wi = idx4(w.shape(), i, o, ky, kx);
                                        dw.data_mut()[wi] += gv * xval;
                                        dx.data_mut()[xi] += gv * w.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                add_into(grads, node.inputs[0], dx);
                add_into(grads, node.inputs[1], dw);
                add_into(grads, node.inputs[2], db);
            }
            Op::InstanceNorm { eps } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let y = &node.value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = (h * w) as f64;
                let mut dx = Tensor::zeros(x.shape());
                for ch in 0..c {
                    let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
                    if channel_is_constant(xs) {
                        continue; // guarded forward is locally constant
                    }
                    let ys = &y.data()[ch * h * w..(ch + 1) * h * w];
                    let gs = &g.data()[ch * h * w..(ch + 1) * h * w];
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let istd = 1.0 / (var + eps).sqrt();
                    let g_mean = gs.iter().sum::<f64>() / n;
                    let gy_mean = gs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    let dst = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
                    for t in 0..dst.len() {
                        dst[t] = istd * (gs[t] - g_mean - ys[t] * gy_mean);
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::ChannelAffine => {
                let x = &self.nodes[node.inputs[0].0].value;
                let gamma = &self.nodes[node.inputs[1].0].value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let gm = gamma.data()[ch];
                    for p in 0..h * w {
                        let gv = g.data()[ch * h * w + p];
                        dx.data_mut()[ch * h * w + p] = gv * gm;
                        dgamma.data_mut()[ch] += gv * x.data()[ch * h * w + p];
                        dbeta.data_mut()[ch] += gv;
                    }
                }
                add_into(grads, node.inputs[0], dx);
                add_into(grads, node.inputs[1], dgamma);
                add_into(grads, node.inputs[2], dbeta);
            }
            Op::MaxPool2 => {
                let x = &self.nodes[node.inputs[0].0].value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(x.shape());
                let xs = [c, h, w];
                let os = [c, oh, ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut by = 0;
                            let mut bx = 0;
                            for dy in 0..2 {
                                for dxx in 0..2 {
                                    let v = x.data()[idx3(&xs, ch, oy * 2 + dy, ox * 2 + dxx)];
                                    if v > best {
                                        best = v;
                                        by = oy * 2 + dy;
                                        bx = ox * 2 + dxx;
                                    }
                                }
                            }
                            dx.data_mut()[idx3(&xs, ch, by, bx)] += g.data()[idx3(&os, ch, oy, ox)];
                        }
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::ResizeNearest { h, w } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = Tensor::zeros(x.shape());
                let xs = [c, ih, iw];
                let os = [c, *h, *w];
                for ch in 0..c {
                    for oy in 0..*h {
                        let sy = (oy * ih / h).min(ih - 1);
                        for ox in 0..*w {
                            let sx = (ox * iw / w).min(iw - 1);
                            dx.data_mut()[idx3(&xs, ch, sy, sx)] += g.data()[idx3(&os, ch, oy, ox)];
                        }
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::ResizeBilinear { h, w } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = Tensor::zeros(x.shape());
                let xs = [c, ih, iw];
                let os = [c, *h, *w];
                for oy in 0..*h {
                    let (y0, y1, wy) = bilinear_taps(oy, ih, *h);
                    for ox in 0..*w {
                        let (x0, x1, wx) = bilinear_taps(ox, iw, *w);
                        for ch in 0..c {
                            let gv = g.data()[idx3(&os, ch, oy, ox)];
                            dx.data_mut()[idx3(&xs, ch, y0, x0)] += gv * (1.0 - wy) * (1.0 - wx);
                            dx.data_mut()[idx3(&xs, ch, y0, x1)] += gv * (1.0 - wy) * wx;
                            dx.data_mut()[idx3(&xs, ch, y1, x0)] += gv * wy * (1.0 - wx);
                            dx.data_mut()[idx3(&xs, ch, y1, x1)] += gv * wy * wx;
                        }
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::ConcatChannels => {
                let mut offset = 0;
                let (h, w) = (node.value.shape()[1], node.value.shape()[2]);
                for inp in &node.inputs {
                    let c = self.nodes[inp.0].value.shape()[0];
                    let len = c * h * w;
                    let d = Tensor::from_vec(&[c, h, w], g.data()[offset..offset + len].to_vec());
                    add_into(grads, *inp, d);
                    offset += len;
                }
            }
            Op::SliceChannels { from, to } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                debug_assert_eq!(g.len(), (to - from) * h * w);
                let mut dx = Tensor::zeros(x.shape());
                let base = from * h * w;
                for (i, gv) in g.data().iter().enumerate() {
                    dx.data_mut()[base + i] = *gv;
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::Softmax0 => {
                let y = &node.value;
                let c = y.shape()[0];
                let rest: usize = y.shape()[1..].iter().product::<usize>().max(1);
                let mut dx = Tensor::zeros(y.shape());
                for p in 0..rest {
                    let mut dot = 0.0;
                    for q in 0..c {
                        dot += g.data()[q * rest + p] * y.data()[q * rest + p];
                    }
                    for q in 0..c {
                        dx.data_mut()[q * rest + p] =
                            y.data()[q * rest + p] * (g.data()[q * rest + p] - dot);
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::Dense => {
                let x = &self.nodes[node.inputs[0].0].value;
                let w = &self.nodes[node.inputs[1].0].value;
                let n = x.len();
                let m = w.shape()[0];
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                let mut db = Tensor::zeros(&[m]);
                for r in 0..m {
                    let gv = g.data()[r];
                    db.data_mut()[r] = gv;
                    for cidx in 0..n {
                        dw.data_mut()[r * n + cidx] += gv * x.data()[cidx];
                        dx.data_mut()[cidx] += gv * w.data()[r * n + cidx];
                    }
                }
                add_into(grads, node.inputs[0], dx);
                add_into(grads, node.inputs[1], dw);
                add_into(grads, node.inputs[2], db);
            }
            Op::GlobalAvgPool => {
                let x = &self.nodes[node.inputs[0].0].value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = (h * w) as f64;
                let mut dx = Tensor::zeros(x.shape());
                for ch in 0..c {
                    let gv = g.data()[ch] / n;
                    for p in 0..h * w {
                        dx.data_mut()[ch * h * w + p] = gv;
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::BroadcastSpatial { h, w } => {
                let c = node.value.shape()[0];
                let mut dx = Tensor::zeros(&[c]);
                for ch in 0..c {
                    dx.data_mut()[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::PackCapsules => {
                let p = node.value.shape()[1];
                let c = node.value.shape()[2];
                for (i, inp) in node.inputs.iter().enumerate() {
                    let shape = self.nodes[inp.0].value.shape().to_vec();
                    let mut d = Tensor::zeros(&shape);
                    for ch in 0..c {
                        for pos in 0..p {
                            d.data_mut()[ch * p + pos] = g.data()[(i * p + pos) * c + ch];
                        }
                    }
                    add_into(grads, *inp, d);
                }
            }
            Op::CapsuleField { index, h, w } => {
                let bank = &self.nodes[node.inputs[0].0].value;
                let (_, p, c) = (bank.shape()[0], bank.shape()[1], bank.shape()[2]);
                let mut d = Tensor::zeros(bank.shape());
                for ch in 0..c {
                    for pos in 0..h * w {
                        d.data_mut()[(index * p + pos) * c + ch] = g.data()[ch * h * w + pos];
                    }
                }
                add_into(grads, node.inputs[0], d);
            }
            Op::PredictTransform => {
                let u = &self.nodes[node.inputs[0].0].value;
                let w = &self.nodes[node.inputs[1].0].value;
                let (i_n, p_n, c_n) = (u.shape()[0], u.shape()[1], u.shape()[2]);
                let (j_n, d_n) = (w.shape()[1], w.shape()[2]);
                let mut du = Tensor::zeros(u.shape());
                let mut dw = Tensor::zeros(w.shape());
                for i in 0..i_n {
                    for j in 0..j_n {
                        for p in 0..p_n {
                            for d in 0..d_n {
                                let gv = g.data()[idx4(&[i_n, j_n, p_n, d_n], i, j, p, d)];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..c_n {
                                    du.data_mut()[(i * p_n + p) * c_n + c] +=
                                        gv * w.data()[idx4(w.shape(), i, j, d, c)];
                                    dw.data_mut()[idx4(w.shape(), i, j, d, c)] +=
                                        gv * u.data()[(i * p_n + p) * c_n + c];
                                }
                            }
                        }
                    }
                }
                add_into(grads, node.inputs[0], du);
                add_into(grads, node.inputs[1], dw);
            }
            Op::RouteAggregate => {
                let uhat = &self.nodes[node.inputs[0].0].value;
                let coupling = &self.nodes[node.inputs[1].0].value;
                let (i_n, j_n, p_n, d_n) = (
                    uhat.shape()[0],
                    uhat.shape()[1],
                    uhat.shape()[2],
                    uhat.shape()[3],
                );
                let mut du = Tensor::zeros(uhat.shape());
                let mut dc = Tensor::zeros(coupling.shape());
                for i in 0..i_n {
                    for j in 0..j_n {
                        let cw = coupling.data()[i * j_n + j];
                        let mut acc = 0.0;
                        for pd in 0..p_n * d_n {
                            let gv = g.data()[j * p_n * d_n + pd];
                            du.data_mut()[(i * j_n + j) * p_n * d_n + pd] += gv * cw;
                            acc += gv * uhat.data()[(i * j_n + j) * p_n * d_n + pd];
                        }
                        dc.data_mut()[i * j_n + j] += acc;
                    }
                }
                add_into(grads, node.inputs[0], du);
                add_into(grads, node.inputs[1], dc);
            }
            Op::RouteAgreement => {
                let uhat = &self.nodes[node.inputs[0].0].value;
                let v = &self.nodes[node.inputs[1].0].value;
                let (i_n, j_n, p_n, d_n) = (
                    uhat.shape()[0],
                    uhat.shape()[1],
                    uhat.shape()[2],
                    uhat.shape()[3],
                );
                let mut du = Tensor::zeros(uhat.shape());
                let mut dv = Tensor::zeros(v.shape());
                for i in 0..i_n {
                    for j in 0..j_n {
                        let gv = g.data()[i * j_n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for pd in 0..p_n * d_n {
                            du.data_mut()[(i * j_n + j) * p_n * d_n + pd] +=
                                gv * v.data()[j * p_n * d_n + pd];
                            dv.data_mut()[j * p_n * d_n + pd] +=
                                gv * uhat.data()[(i * j_n + j) * p_n * d_n + pd];
                        }
                    }
                }
                add_into(grads, node.inputs[0], du);
                add_into(grads, node.inputs[1], dv);
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (i_n, j_n) = (y.shape()[0], y.shape()[1]);
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..i_n {
                    let mut dot = 0.0;
                    for j in 0..j_n {
                        dot += g.data()[i * j_n + j] * y.data()[i * j_n + j];
                    }
                    for j in 0..j_n {
                        dx.data_mut()[i * j_n + j] =
                            y.data()[i * j_n + j] * (g.data()[i * j_n + j] - dot);
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::SquashRows => {
                let x = &self.nodes[node.inputs[0].0].value;
                let j_n = x.shape()[0];
                let k: usize = x.shape()[1..].iter().product::<usize>().max(1);
                let mut dx = Tensor::zeros(x.shape());
                for j in 0..j_n {
                    let row = &x.data()[j * k..(j + 1) * k];
                    let gr = &g.data()[j * k..(j + 1) * k];
                    let n2: f64 = row.iter().map(|v| v * v).sum();
                    let n = n2.sqrt();
                    if n < SQUASH_GUARD {
                        continue;
                    }
                    let gfac = n / (1.0 + n2);
                    let gprime = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                    let dot: f64 = gr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    let dst = &mut dx.data_mut()[j * k..(j + 1) * k];
                    for t in 0..k {
                        dst[t] = gr[t] * gfac + row[t] * dot * gprime / n;
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::PoseMap => {
                let s = &self.nodes[node.inputs[0].0].value;
                let l = &self.nodes[node.inputs[1].0].value;
                let (j_n, p_n, c_n) = (s.shape()[0], s.shape()[1], s.shape()[2]);
                let d_n = l.shape()[1];
                let mut ds = Tensor::zeros(s.shape());
                let mut dl = Tensor::zeros(l.shape());
                for j in 0..j_n {
                    for p in 0..p_n {
                        for d in 0..d_n {
                            let gv = g.data()[(j * p_n + p) * d_n + d];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..c_n {
                                ds.data_mut()[(j * p_n + p) * c_n + c] +=
                                    gv * l.data()[(j * d_n + d) * c_n + c];
                                dl.data_mut()[(j * d_n + d) * c_n + c] +=
                                    gv * s.data()[(j * p_n + p) * c_n + c];
                            }
                        }
                    }
                }
                add_into(grads, node.inputs[0], ds);
                add_into(grads, node.inputs[1], dl);
            }
            Op::PairMapJ => {
                let v = &self.nodes[node.inputs[0].0].value;
                let wr = &self.nodes[node.inputs[1].0].value;
                let (j_n, p_n, d_n) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let (i_n, c_n) = (wr.shape()[1], wr.shape()[2]);
                let mut dv = Tensor::zeros(v.shape());
                let mut dwr = Tensor::zeros(wr.shape());
                for j in 0..j_n {
                    for i in 0..i_n {
                        for p in 0..p_n {
                            for c in 0..c_n {
                                let gv = g.data()[idx4(&[j_n, i_n, p_n, c_n], j, i, p, c)];
                                if gv == 0.0 {
                                    continue;
                                }
                                for d in 0..d_n {
                                    dv.data_mut()[(j * p_n + p) * d_n + d] +=
                                        gv * wr.data()[idx4(wr.shape(), j, i, c, d)];
                                    dwr.data_mut()[idx4(wr.shape(), j, i, c, d)] +=
                                        gv * v.data()[(j * p_n + p) * d_n + d];
                                }
                            }
                        }
                    }
                }
                add_into(grads, node.inputs[0], dv);
                add_into(grads, node.inputs[1], dwr);
            }
            Op::CouplingSum => {
                let r = &self.nodes[node.inputs[0].0].value;
                let coupling = &self.nodes[node.inputs[1].0].value;
                let (j_n, i_n, p_n, c_n) = (r.shape()[0], r.shape()[1], r.shape()[2], r.shape()[3]);
                let mut dr = Tensor::zeros(r.shape());
                let mut dc = Tensor::zeros(coupling.shape());
                for j in 0..j_n {
                    for i in 0..i_n {
                        let cw = coupling.data()[i * j_n + j];
                        let mut acc = 0.0;
                        for pc in 0..p_n * c_n {
                            let gv = g.data()[i * p_n * c_n + pc];
                            dr.data_mut()[(j * i_n + i) * p_n * c_n + pc] += gv * cw;
                            acc += gv * r.data()[(j * i_n + i) * p_n * c_n + pc];
                        }
                        dc.data_mut()[i * j_n + j] += acc;
                    }
                }
                add_into(grads, node.inputs[0], dr);
                add_into(grads, node.inputs[1], dc);
            }
            Op::WeightedSoftCrossEntropy { target, weights } => {
                let logits = &self.nodes[node.inputs[0].0].value;
                let (q, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
                let px = h * w;
                let gv = g.item();
                let mut dx = Tensor::zeros(logits.shape());
                for p in 0..px {
                    let mut mx = f64::NEG_INFINITY;
                    for qq in 0..q {
                        mx = mx.max(logits.data()[qq * px + p]);
                    }
                    let mut z = 0.0;
                    for qq in 0..q {
                        z += (logits.data()[qq * px + p] - mx).exp();
                    }
                    let scale = gv * weights.data()[p] / px as f64;
                    for qq in 0..q {
                        let sm = (logits.data()[qq * px + p] - mx).exp() / z;
                        dx.data_mut()[qq * px + p] = scale * (sm - target.data()[qq * px + p]);
                    }
                }
                add_into(grads, node.inputs[0], dx);
            }
            Op::BceWithLogits { target_real } => {
                let logits = &self.nodes[node.inputs[0].0].value;
                let t = if *target_real { 1.0 } else { 0.0 };
                let gv = g.item() / logits.len() as f64;
                let d = Tensor::from_vec(
                    logits.shape(),
                    logits
                        .data()
                        .iter()
                        .map(|&x| gv * (1.0 / (1.0 + (-x).exp()) - t))
                        .collect(),
                );
                add_into(grads, node.inputs[0], d);
            }
            Op::CrossEntropyLogits { label } => {
                let logits = &self.nodes[node.inputs[0].0].value;
                let mx = logits
                    .data()
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.data().iter().map(|v| (v - mx).exp()).sum();
                let gv = g.item();
                let d = Tensor::from_vec(
                    logits.shape(),
                    logits
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let sm = (x - mx).exp() / z;
                            gv * (sm - if i == *label { 1.0 } else { 0.0 })
                        })
                        .collect(),
                );
                add_into(grads, node.inputs[0], d);
            }
        }
    }
}

const SQUASH_GUARD: f64 = 1e-12;

fn channel_is_constant(slice: &[f64]) -> bool {
    slice.windows(2).all(|w| w[0] == w[1])
}

/// Source taps and blend weight for one output coordinate of a bilinear
/// resize (half-pixel centre convention, clamped at the border).
fn bilinear_taps(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let f = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let f = f.clamp(0.0, (in_len - 1) as f64);
    let lo = f.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, f - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_scalar_fn, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1234)
    }

    #[test]
    fn add_sub_mul_values() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let b = g.leaf(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
        let s = g.add(a, b);
        assert_eq!(g.value(s).data(), &[1.5, 1.0, 5.0]);
        let d = g.sub(a, b);
        assert_eq!(g.value(d).data(), &[0.5, 3.0, 1.0]);
        let m = g.mul(a, b);
        assert_eq!(g.value(m).data(), &[0.5, -2.0, 6.0]);
    }

    #[test]
    fn conv2d_shapes_and_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(
            &[1, 3, 3],
            (1..=9).map(|v| v as f64).collect(),
        ));
        // 1x1 identity kernel
        let w = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0, 1);
        assert_eq!(g.value(y).data(), g.value(x).data());
        // stride 2 3x3 with pad 1 halves spatial dims
        let w3 = g.leaf(Tensor::full(&[2, 1, 3, 3], 0.1));
        let b3 = g.leaf(Tensor::zeros(&[2]));
        let y3 = g.conv2d(x, w3, b3, 2, 1, 1);
        assert_eq!(g.value(y3).shape(), &[2, 2, 2]);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut r = rng();
        let t = Tensor::randn(&[3, 6, 6], 2.5, &mut r);
        let mut g = Graph::new();
        let x = g.leaf(t);
        let y = g.instance_norm(x, 1e-5);
        let yv = g.value(y);
        for c in 0..3 {
            let sl = &yv.data()[c * 36..(c + 1) * 36];
            let mean = sl.iter().sum::<f64>() / 36.0;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-5, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn instance_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 4, 4], 3.7));
        let y = g.instance_norm(x, 1e-5);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax0_rows_sum_to_one() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[5, 2, 2], 3.0, &mut r));
        let y = g.softmax0(x);
        let yv = g.value(y);
        for p in 0..4 {
            let s: f64 = (0..5).map(|q| yv.data()[q * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_picks_first_on_ties() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let y = g.max_pool2(x);
        let grads = {
            let s = g.sum_all(y);
            g.backward(s)
        };
        let dx = grads.get(x, &[1, 2, 2]);
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3, 3], 0.7));
        let y = g.resize_bilinear(x, 12, 12);
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn gradcheck_elementwise_and_reductions() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        check_scalar_fn(&x, 1e-3, 1e-3, |g, v| {
            let a = g.relu(v);
            let b = g.leaky_relu(a, 0.2);
            let m = g.mul(b, b);
            g.sum_all(m)
        });
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("x", &x), ("w", &w), ("b", &b)])
            .run(|g, vars| {
                let y = g.conv2d(vars[0], vars[1], vars[2], 1, 1, 1);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            });
    }

    #[test]
    fn gradcheck_conv2d_strided_dilated() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[2, 1, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[2], 0.5, &mut r);
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("x", &x), ("w", &w), ("b", &b)])
            .run(|g, vars| {
                let y = g.conv2d(vars[0], vars[1], vars[2], 2, 1, 2);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            });
    }

    #[test]
    fn gradcheck_conv_transpose() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, 2, 2], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("x", &x), ("w", &w), ("b", &b)])
            .run(|g, vars| {
                let y = g.conv_transpose2d(vars[0], vars[1], vars[2], 2);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            });
    }

    #[test]
    fn gradcheck_instance_norm_affine() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4], 1.5, &mut r);
        let gamma = Tensor::randn(&[2], 0.5, &mut r);
        let beta = Tensor::randn(&[2], 0.5, &mut r);
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("x", &x), ("g", &gamma), ("b", &beta)])
            .run(|g, vars| {
                let n = g.instance_norm(vars[0], 1e-5);
                let y = g.channel_affine(n, vars[1], vars[2]);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            });
    }

    #[test]
    fn gradcheck_pool_resize_concat() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        check_scalar_fn(&x, 1e-3, 1e-3, |g, v| {
            let p = g.max_pool2(v);
            let up = g.resize_nearest(p, 3, 3);
            let bl = g.resize_bilinear(up, 5, 5);
            let cat = g.concat_channels(&[bl, bl]);
            let sq = g.mul(cat, cat);
            g.sum_all(sq)
        });
    }

    #[test]
    fn gradcheck_dense_gap_broadcast_softmax() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[5, 3], 0.7, &mut r);
        let b = Tensor::randn(&[5], 0.2, &mut r);
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("x", &x), ("w", &w), ("b", &b)])
            .run(|g, vars| {
                let pooled = g.global_avg_pool(vars[0]);
                let logits = g.dense(pooled, vars[1], vars[2]);
                let probs = g.softmax0(logits);
                let field = g.broadcast_spatial(probs, 3, 3);
                let sq = g.mul(field, field);
                g.sum_all(sq)
            });
    }

    #[test]
    fn gradcheck_losses() {
        let mut r = rng();
        let logits = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
        // soft target rows summing to one
        let mut target = Tensor::zeros(&[4, 2, 2]);
        for p in 0..4 {
            let mut vals = [0.0; 4];
            let mut z = 0.0;
            for (q, slot) in vals.iter_mut().enumerate() {
                *slot = ((q + p) as f64 * 0.37).sin().abs() + 0.1;
                z += *slot;
            }
            for q in 0..4 {
                target.data_mut()[q * 4 + p] = vals[q] / z;
            }
        }
        let weights = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 0.5, 1.5]);
        check_scalar_fn(&logits, 1e-3, 1e-3, |g, v| {
            g.weighted_soft_cross_entropy(v, target.clone(), weights.clone())
        });

        let d_logits = Tensor::randn(&[1, 3, 3], 1.0, &mut r);
        check_scalar_fn(&d_logits, 1e-3, 1e-3, |g, v| g.bce_with_logits(v, true));
        check_scalar_fn(&d_logits, 1e-3, 1e-3, |g, v| g.bce_with_logits(v, false));

        let c_logits = Tensor::randn(&[7], 1.0, &mut r);
        check_scalar_fn(&c_logits, 1e-3, 1e-3, |g, v| g.cross_entropy_logits(v, 3));
    }

    #[test]
    fn gradcheck_capsule_ops() {
        let mut r = rng();
        let u = Tensor::randn(&[2, 3, 2], 0.8, &mut r); // I=2, P=3, c=2
        let w = Tensor::randn(&[2, 2, 4, 2], 0.5, &mut r); // J=2, d=4
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("u", &u), ("w", &w)])
            .run(|g, vars| {
                let uhat = g.predict_transform(vars[0], vars[1]);
                let b0 = g.leaf(Tensor::zeros(&[2, 2]));
                let c = g.softmax_rows(b0);
                let s = g.route_aggregate(uhat, c);
                let v = g.squash_rows(s);
                let a = g.route_agreement(uhat, v);
                let b1 = g.add(b0, a);
                let c1 = g.softmax_rows(b1);
                let s1 = g.route_aggregate(uhat, c1);
                let v1 = g.squash_rows(s1);
                let sq = g.mul(v1, v1);
                g.sum_all(sq)
            });
    }

    #[test]
    fn gradcheck_reverse_capsule_ops() {
        let mut r = rng();
        let v = Tensor::randn(&[2, 3, 4], 0.8, &mut r); // J=2, P=3, d=4
        let wr = Tensor::randn(&[2, 2, 2, 4], 0.5, &mut r); // I=2, c=2
        let l = Tensor::randn(&[2, 5, 4], 0.5, &mut r); // pose map d=4 -> 5
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("v", &v), ("wr", &wr), ("l", &l)])
            .run(|g, vars| {
                let mapped = g.pose_map(vars[0], vars[2]);
                let sq0 = g.mul(mapped, mapped);
                let t0 = g.sum_all(sq0);
                let coupling = {
                    let b = g.leaf(Tensor::zeros(&[2, 2]));
                    g.softmax_rows(b)
                };
                let rmap = g.pair_map_j(vars[0], vars[1]);
                let ur = g.coupling_sum(rmap, coupling);
                let sq1 = g.mul(ur, ur);
                let t1 = g.sum_all(sq1);
                g.add(t0, t1)
            });
    }

    #[test]
    fn gradcheck_pack_and_field() {
        let mut r = rng();
        let f0 = Tensor::randn(&[2, 2, 2], 1.0, &mut r);
        let f1 = Tensor::randn(&[2, 2, 2], 1.0, &mut r);
        GradCheck::new(1e-3, 1e-3)
            .inputs(&[("f0", &f0), ("f1", &f1)])
            .run(|g, vars| {
                let bank = g.pack_capsules(&[vars[0], vars[1]]);
                let a = g.capsule_field(bank, 0, 2, 2);
                let b = g.capsule_field(bank, 1, 2, 2);
                let cat = g.concat_channels(&[a, b]);
                let sq = g.mul(cat, cat);
                g.sum_all(sq)
            });
    }

    #[test]
    fn slice_channels_values_and_gradient() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let top = g.slice_channels(v, 0, 2);
            let rest = g.slice_channels(v, 2, 4);
            assert_eq!(g.value(top).data(), &x.data()[0..18]);
            assert_eq!(g.value(rest).data(), &x.data()[18..36]);
        }
        check_scalar_fn(&x, 1e-3, 1e-3, |g, v| {
            let top = g.slice_channels(v, 0, 2);
            let rest = g.slice_channels(v, 2, 4);
            let sq1 = g.mul(top, top);
            let s1 = g.sum_all(sq1);
            let sq2 = g.mul(rest, rest);
            let s2 = g.sum_all(sq2);
            g.add(s1, s2)
        });
    }

    #[test]
    fn gradcheck_downscale_resizes() {
        // nearest and bilinear resizes shrinking the grid
        let mut r = rng();
        let x = Tensor::randn(&[2, 7, 7], 1.0, &mut r);
        check_scalar_fn(&x, 1e-3, 1e-3, |g, v| {
            let n = g.resize_nearest(v, 4, 4);
            let b = g.resize_bilinear(n, 3, 3);
            let sq = g.mul(b, b);
            g.sum_all(sq)
        });
    }
}
