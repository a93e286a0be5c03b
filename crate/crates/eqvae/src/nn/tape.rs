//! The autodiff tape and its operation set.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes.
//! [`Tape::backward`] sweeps it once in reverse, returning gradients for
//! every parameter leaf (and any explicitly watched leaf). Nodes hold
//! `Arc` copies of the arrays they need, so tapes never borrow from the
//! parameter registry.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, Ix3, IxDyn};

use super::params::{GradAccum, PRef, Params};
use crate::transform2d::{bicubic_taps, rotate_exact};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: Arc<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

/// Result of a backward sweep.
pub struct GradSet {
    node_grads: Vec<Option<ArrayD<f64>>>,
    accum: GradAccum,
}

impl GradSet {
    /// Gradient of the loss w.r.t. a tape variable, if it was reached.
    pub fn of(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn accum(&self) -> &GradAccum {
        &self.accum
    }

    pub fn into_accum(self) -> GradAccum {
        self.accum
    }
}

fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        param: Option<usize>,
    ) -> Var {
        let requires_grad =
            param.is_some() || parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, None)
    }

    /// Leaf whose gradient is reported in the [`GradSet`] without being a
    /// parameter.
    pub fn watch(&mut self, value: ArrayD<f64>) -> Var {
        let v = self.push(value, vec![], None, None);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf bound to a parameter; its gradient lands in the accumulator.
    /// While the tape is frozen (see [`Tape::set_frozen`]) parameters
    /// enter as plain constants instead.
    pub fn param(&mut self, params: &Params, p: PRef) -> Var {
        let value = params.value_arc(p);
        let frozen = self.frozen;
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: !frozen,
            param: (!frozen).then_some(p.0),
        });
        Var(self.nodes.len() - 1)
    }

    /// Toggles frozen-parameter mode: a frozen tape treats subsequently
    /// loaded parameters as constants (values flow, no gradients). Used
    /// to score reconstructions against the discriminator inside the
    /// generator's graph.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let arr = self.value(v);
        debug_assert_eq!(arr.len(), 1, "scalar() on non-scalar node");
        *arr.iter().next().expect("scalar node")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Same value, gradient flow severed.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value_arc(x);
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![Some(g.clone()), Some(g.clone())])),
            None,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![Some(g.clone()), Some(g.mapv(|x| -x))])),
            None,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![Some(g * &*vb), Some(g * &*va)])),
            None,
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let va = self.value_arc(a);
        let out = va.mapv(|x| k * x);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![Some(g.mapv(|x| k * x))])),
            None,
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let va = self.value_arc(a);
        let out = va.mapv(|x| x + k);
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![Some(g.clone())])), None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let out = Arc::new(va.mapv(f64::exp));
        let cap = Arc::clone(&out);
        self.push(
            (*out).clone(),
            vec![a.0],
            Some(Box::new(move |g| vec![Some(g * &*cap)])),
            None,
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let out = Arc::new(va.mapv(f64::tanh));
        let cap = Arc::clone(&out);
        self.push(
            (*out).clone(),
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&cap, |gi, &y| *gi *= 1.0 - y * y);
                vec![Some(dx)]
            })),
            None,
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let out = va.mapv(|x| x / (1.0 + (-x).exp()));
        let cap = Arc::clone(&va);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&cap, |gi, &x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *gi *= s * (1.0 + x * (1.0 - s));
                });
                vec![Some(dx)]
            })),
            None,
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let va = self.value_arc(a);
        let out = va.mapv(|x| if x > 0.0 { x } else { slope * x });
        let cap = Arc::clone(&va);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&cap, |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope;
                    }
                });
                vec![Some(dx)]
            })),
            None,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.value_arc(a);
        let out = va.mapv(|x| x.clamp(lo, hi));
        let cap = Arc::clone(&va);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&cap, |gi, &x| {
                    if x < lo || x > hi {
                        *gi = 0.0;
                    }
                });
                vec![Some(dx)]
            })),
            None,
        )
    }

    // ---- reductions and losses ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let n = va.len() as f64;
        let out = scalar_array(va.sum() / n);
        let shape = va.raw_dim();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let gv = g.iter().next().copied().unwrap_or(0.0) / n;
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            })),
            None,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let out = scalar_array(va.sum());
        let shape = va.raw_dim();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            })),
            None,
        )
    }

    /// Mean absolute error between two same-shape arrays; the subgradient
    /// at zero difference is zero.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "l1_mean shape mismatch");
        let n = va.len() as f64;
        let sum: f64 = va.iter().zip(vb.iter()).map(|(x, y)| (x - y).abs()).sum();
        let out = scalar_array(sum / n);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let gv = g.iter().next().copied().unwrap_or(0.0) / n;
                let mut da = ArrayD::zeros(va.raw_dim());
                for ((d, x), y) in da.iter_mut().zip(va.iter()).zip(vb.iter()) {
                    *d = gv * (x - y).signum() * if x == y { 0.0 } else { 1.0 };
                }
                let db = da.mapv(|x| -x);
                vec![Some(da), Some(db)]
            })),
            None,
        )
    }

    /// Mean squared error between two same-shape arrays.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "mse_mean shape mismatch");
        let n = va.len() as f64;
        let sum: f64 = va
            .iter()
            .zip(vb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = scalar_array(sum / n);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let gv = g.iter().next().copied().unwrap_or(0.0) * 2.0 / n;
                let mut da = ArrayD::zeros(va.raw_dim());
                for ((d, x), y) in da.iter_mut().zip(va.iter()).zip(vb.iter()) {
                    *d = gv * (x - y);
                }
                let db = da.mapv(|x| -x);
                vec![Some(da), Some(db)]
            })),
            None,
        )
    }

    // ---- shape ops ----

    /// Copies channels `[from, to)` of a `(C, H, W)` array.
    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Var {
        let va = self.value_arc(a);
        let v3 = va.view().into_dimensionality::<Ix3>().expect("slice_channels wants 3d");
        let (c, h, w) = v3.dim();
        assert!(from < to && to <= c, "channel slice out of range");
        let out = v3.slice(ndarray::s![from..to, .., ..]).to_owned().into_dyn();
        let full = (c, h, w);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad");
                let mut dx = ndarray::Array3::<f64>::zeros(full);
                dx.slice_mut(ndarray::s![from..to, .., ..]).assign(&g3);
                vec![Some(dx.into_dyn())]
            })),
            None,
        )
    }

    /// Copies entries `[from, to)` of a `(n,)` vector.
    pub fn slice_vec(&mut self, a: Var, from: usize, to: usize) -> Var {
        let va = self.value_arc(a);
        let v1 = va.view().into_dimensionality::<Ix1>().expect("slice_vec wants 1d");
        let n = v1.len();
        assert!(from < to && to <= n, "vector slice out of range");
        let out = v1.slice(ndarray::s![from..to]).to_owned().into_dyn();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1d grad");
                let mut dx = Array1::<f64>::zeros(n);
                dx.slice_mut(ndarray::s![from..to]).assign(&g1);
                vec![Some(dx.into_dyn())]
            })),
            None,
        )
    }

    /// Global average pool of `(C, H, W)` to `(C,)`.
    pub fn gap(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let v3 = va.view().into_dimensionality::<Ix3>().expect("gap wants 3d");
        let (c, h, w) = v3.dim();
        let n = (h * w) as f64;
        let mut out = Array1::<f64>::zeros(c);
        for ch in 0..c {
            out[ch] = v3.index_axis(ndarray::Axis(0), ch).sum() / n;
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1d grad");
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    dx.index_axis_mut(ndarray::Axis(0), ch).fill(g1[ch] / n);
                }
                vec![Some(dx.into_dyn())]
            })),
            None,
        )
    }

    /// Nearest-neighbor 2x upsample of `(C, H, W)`.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let v3 = va.view().into_dimensionality::<Ix3>().expect("upsample wants 3d");
        let (c, h, w) = v3.dim();
        let mut out = ndarray::Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let v = v3[(ch, r, col)];
                    out[(ch, 2 * r, 2 * col)] = v;
                    out[(ch, 2 * r, 2 * col + 1)] = v;
                    out[(ch, 2 * r + 1, 2 * col)] = v;
                    out[(ch, 2 * r + 1, 2 * col + 1)] = v;
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad");
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            dx[(ch, r, col)] = g3[(ch, 2 * r, 2 * col)]
                                + g3[(ch, 2 * r, 2 * col + 1)]
                                + g3[(ch, 2 * r + 1, 2 * col)]
                                + g3[(ch, 2 * r + 1, 2 * col + 1)];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
            None,
        )
    }

    /// Spatial transform of a `(C, H, W)` grid: exact rotation by quarter
    /// turns, then bicubic resample to `(h_out, w_out)`. Linear in the
    /// input; the backward pass scatters through the same taps and undoes
    /// the rotation. Identity transforms (no turn, same size) pass values
    /// through untouched, so this node is bit-transparent for them.
    pub fn resample(&mut self, a: Var, quarter_turns: u8, h_out: usize, w_out: usize) -> Var {
        let va = self.value_arc(a);
        let v3 = va
            .view()
            .into_dimensionality::<Ix3>()
            .expect("resample wants 3d")
            .to_owned();
        let (_, h_in, w_in) = v3.dim();
        let rotated = rotate_exact(&v3, quarter_turns);
        let (_, h_rot, w_rot) = rotated.dim();
        let out = crate::transform2d::resample_bicubic(&rotated, h_out, w_out);
        let row_taps = Arc::new(bicubic_taps(h_rot, h_out));
        let col_taps = Arc::new(bicubic_taps(w_rot, w_out));
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad");
                let (c, _, _) = g3.dim();
                // Transpose of columns-stage, then of rows-stage.
                let mut mid = ndarray::Array3::<f64>::zeros((c, h_out, w_rot));
                for ch in 0..c {
                    for r in 0..h_out {
                        for (col, (idx, wt)) in col_taps.iter().enumerate() {
                            let gv = g3[(ch, r, col)];
                            for k in 0..4 {
                                mid[(ch, r, idx[k])] += wt[k] * gv;
                            }
                        }
                    }
                }
                let mut d_rot = ndarray::Array3::<f64>::zeros((c, h_rot, w_rot));
                for ch in 0..c {
                    for (r, (idx, wt)) in row_taps.iter().enumerate() {
                        for col in 0..w_rot {
                            let gv = mid[(ch, r, col)];
                            for k in 0..4 {
                                d_rot[(ch, idx[k], col)] += wt[k] * gv;
                            }
                        }
                    }
                }
                let dx = rotate_exact(&d_rot, (4 - quarter_turns % 4) % 4);
                debug_assert_eq!(dx.dim().1, h_in);
                debug_assert_eq!(dx.dim().2, w_in);
                vec![Some(dx.into_dyn())]
            })),
            None,
        )
    }

    // ---- linear algebra ----

    /// `y = W x + b` with `x: (n,)`, `W: (m, n)`, `b: (m,)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value_arc(x), self.value_arc(w), self.value_arc(b));
        let x1 = vx.view().into_dimensionality::<Ix1>().expect("linear x 1d").to_owned();
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear w 2d").to_owned();
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("linear b 1d").to_owned();
        assert_eq!(w2.dim().1, x1.len(), "linear shape mismatch");
        assert_eq!(w2.dim().0, b1.len(), "linear bias mismatch");
        let out = w2.dot(&x1) + &b1;
        let needs = [
            self.nodes[x.0].requires_grad,
            self.nodes[w.0].requires_grad,
            self.nodes[b.0].requires_grad,
        ];
        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1d grad").to_owned();
                let dx = needs[0].then(|| w2.t().dot(&g1).into_dyn());
                let dw = needs[1].then(|| {
                    let mut dw = Array2::<f64>::zeros(w2.dim());
                    for i in 0..w2.dim().0 {
                        for j in 0..w2.dim().1 {
                            dw[(i, j)] = g1[i] * x1[j];
                        }
                    }
                    dw.into_dyn()
                });
                let db = needs[2].then(|| g1.clone().into_dyn());
                vec![dx, dw, db]
            })),
            None,
        )
    }

    /// 2D convolution via im2col + GEMM.
    ///
    /// `x: (C_in, H, W)`, `w: (C_out, C_in, kh, kw)`, `b: (C_out,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value_arc(x), self.value_arc(w), self.value_arc(b));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("conv x 3d").to_owned();
        let (c_in, h, win) = x3.dim();
        let wshape = vw.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv w 4d");
        let (c_out, wc_in, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(wc_in, c_in, "conv channel mismatch");
        assert_eq!(vb.len(), c_out, "conv bias mismatch");
        assert!(h + 2 * pad >= kh && win + 2 * pad >= kw, "conv input too small");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (win + 2 * pad - kw) / stride + 1;
        let m = h_out * w_out;
        let k_len = c_in * kh * kw;

        let col = Arc::new(im2col(&x3, kh, kw, stride, pad, h_out, w_out));
        let w2 = Arc::new(
            vw.view()
                .into_shape_with_order((c_out, k_len))
                .expect("conv weight reshape")
                .to_owned(),
        );
        // dot() may hand back a reversed-layout result for thin shapes;
        // force standard layout before any reshape.
        let mut out2 = w2.dot(&*col).as_standard_layout().into_owned();
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias 1d").to_owned();
        for o in 0..c_out {
            let bo = b1[o];
            out2.row_mut(o).mapv_inplace(|v| v + bo);
        }
        let out = out2
            .into_shape_with_order((c_out, h_out, w_out))
            .expect("conv out reshape")
            .into_dyn();

        let needs = [
            self.nodes[x.0].requires_grad,
            self.nodes[w.0].requires_grad,
            self.nodes[b.0].requires_grad,
        ];
        let col_b = Arc::clone(&col);
        let w2_b = Arc::clone(&w2);
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g| {
                let g2 = g
                    .view()
                    .into_shape_with_order((c_out, m))
                    .expect("grad reshape")
                    .to_owned();
                let dx = needs[0].then(|| {
                    let dcol = w2_b.t().dot(&g2).as_standard_layout().into_owned();
                    col2im(&dcol, c_in, h, win, kh, kw, stride, pad, h_out, w_out).into_dyn()
                });
                let dw = needs[1].then(|| {
                    g2.dot(&col_b.t())
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw]))
                        .expect("dw reshape")
                });
                let db = needs[2].then(|| g2.sum_axis(ndarray::Axis(1)).into_dyn());
                vec![dx, dw, db]
            })),
            None,
        )
    }

    /// Group normalization with per-channel affine parameters.
    ///
    /// `x: (C, H, W)`, `gamma, beta: (C,)`; `C` must divide into `groups`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value_arc(x), self.value_arc(gamma), self.value_arc(beta));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("gn x 3d").to_owned();
        let (c, h, w) = x3.dim();
        assert!(groups >= 1 && c % groups == 0, "groups must divide channels");
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("gamma 1d").to_owned();
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("beta 1d").to_owned();
        assert_eq!(g1.len(), c);
        assert_eq!(b1.len(), c);
        let ch_per = c / groups;
        let n_group = (ch_per * h * w) as f64;

        let mut xhat = ndarray::Array3::<f64>::zeros((c, h, w));
        let mut inv_std = vec![0.0f64; groups];
        for gi in 0..groups {
            let lo = gi * ch_per;
            let hi = lo + ch_per;
            let block = x3.slice(ndarray::s![lo..hi, .., ..]);
            let mean = block.sum() / n_group;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_group;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            let mut dst = xhat.slice_mut(ndarray::s![lo..hi, .., ..]);
            dst.assign(&block);
            dst.mapv_inplace(|v| (v - mean) * is);
        }
        let mut out = xhat.clone();
        for ch in 0..c {
            let (gc, bc) = (g1[ch], b1[ch]);
            out.index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v * gc + bc);
        }

        let xhat = Arc::new(xhat);
        let needs = [
            self.nodes[x.0].requires_grad,
            self.nodes[gamma.0].requires_grad,
            self.nodes[beta.0].requires_grad,
        ];
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad").to_owned();
                let dgamma = needs[1].then(|| {
                    let mut d = Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        d[ch] = g3
                            .index_axis(ndarray::Axis(0), ch)
                            .iter()
                            .zip(xhat.index_axis(ndarray::Axis(0), ch).iter())
                            .map(|(gi, xi)| gi * xi)
                            .sum();
                    }
                    d.into_dyn()
                });
                let dbeta = needs[2].then(|| {
                    let mut d = Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        d[ch] = g3.index_axis(ndarray::Axis(0), ch).sum();
                    }
                    d.into_dyn()
                });
                let dx = needs[0].then(|| {
                    let mut ghat = g3.clone();
                    for ch in 0..c {
                        let gc = g1[ch];
                        ghat.index_axis_mut(ndarray::Axis(0), ch)
                            .mapv_inplace(|v| v * gc);
                    }
                    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                    for gi in 0..groups {
                        let lo = gi * ch_per;
                        let hi = lo + ch_per;
                        let gh = ghat.slice(ndarray::s![lo..hi, .., ..]);
                        let xh = xhat.slice(ndarray::s![lo..hi, .., ..]);
                        let mean_g = gh.sum() / n_group;
                        let mean_gx = gh
                            .iter()
                            .zip(xh.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n_group;
                        let is = inv_std[gi];
                        let mut dst = dx.slice_mut(ndarray::s![lo..hi, .., ..]);
                        ndarray::Zip::from(&mut dst).and(&gh).and(&xh).for_each(
                            |d, &gv, &xv| {
                                *d = is * (gv - mean_g - xv * mean_gx);
                            },
                        );
                    }
                    dx.into_dyn()
                });
                vec![dx, dgamma, dbeta]
            })),
            None,
        )
    }

    /// Per-channel affine on a `(C, H, W)` map with vectors `(C,)`:
    /// `y[c] = x[c] * (1 + scale[c]) + shift[c]`.
    pub fn channel_film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (vx, vs, vt) = (self.value_arc(x), self.value_arc(scale), self.value_arc(shift));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("film x 3d").to_owned();
        let (c, _, _) = x3.dim();
        let s1 = vs.view().into_dimensionality::<Ix1>().expect("scale 1d").to_owned();
        let t1 = vt.view().into_dimensionality::<Ix1>().expect("shift 1d").to_owned();
        assert_eq!(s1.len(), c);
        assert_eq!(t1.len(), c);
        let mut out = x3.clone();
        for ch in 0..c {
            let (sc, tc) = (1.0 + s1[ch], t1[ch]);
            out.index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v * sc + tc);
        }
        let needs = [
            self.nodes[x.0].requires_grad,
            self.nodes[scale.0].requires_grad,
            self.nodes[shift.0].requires_grad,
        ];
        self.push(
            out.into_dyn(),
            vec![x.0, scale.0, shift.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad").to_owned();
                let dx = needs[0].then(|| {
                    let mut dx = g3.clone();
                    for ch in 0..c {
                        let sc = 1.0 + s1[ch];
                        dx.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v * sc);
                    }
                    dx.into_dyn()
                });
                let ds = needs[1].then(|| {
                    let mut d = Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        d[ch] = g3
                            .index_axis(ndarray::Axis(0), ch)
                            .iter()
                            .zip(x3.index_axis(ndarray::Axis(0), ch).iter())
                            .map(|(gi, xi)| gi * xi)
                            .sum();
                    }
                    d.into_dyn()
                });
                let dt = needs[2].then(|| {
                    let mut d = Array1::<f64>::zeros(c);
                    for ch in 0..c {
                        d[ch] = g3.index_axis(ndarray::Axis(0), ch).sum();
                    }
                    d.into_dyn()
                });
                vec![dx, ds, dt]
            })),
            None,
        )
    }

    /// Assembles a `(c, h, w)` grid whose site `(r, col)` is codebook row
    /// `indices[r * w + col]`. Gradients scatter into the selected rows.
    pub fn codebook_gather(&mut self, codebook: Var, indices: Arc<Vec<usize>>, h: usize, w: usize) -> Var {
        let vcb = self.value_arc(codebook);
        let cb2 = vcb.view().into_dimensionality::<Ix2>().expect("codebook 2d").to_owned();
        let (k, c) = cb2.dim();
        assert_eq!(indices.len(), h * w, "index grid mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
        for (site, &row) in indices.iter().enumerate() {
            assert!(row < k, "codebook index out of range");
            let (r, col) = (site / w, site % w);
            for ch in 0..c {
                out[(ch, r, col)] = cb2[(row, ch)];
            }
        }
        let idx = Arc::clone(&indices);
        self.push(
            out.into_dyn(),
            vec![codebook.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad");
                let mut dcb = Array2::<f64>::zeros((k, c));
                for (site, &row) in idx.iter().enumerate() {
                    let (r, col) = (site / w, site % w);
                    for ch in 0..c {
                        dcb[(row, ch)] += g3[(ch, r, col)];
                    }
                }
                vec![Some(dcb.into_dyn())]
            })),
            None,
        )
    }

    /// Reverse sweep from `loss`, which must be scalar-shaped.
    pub fn backward(&self, loss: Var) -> GradSet {
        let mut node_grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        node_grads[loss.0] = Some(scalar_array(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (slot, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[*slot].requires_grad {
                        continue;
                    }
                    match &mut node_grads[*slot] {
                        Some(acc) => acc.zip_mut_with(&pg, |a, b| *a += b),
                        g @ None => *g = Some(pg),
                    }
                }
            }
            // Leaves keep their gradient for reporting.
            if node.backward.is_none() && (node.param.is_some() || node.requires_grad) {
                node_grads[idx] = Some(grad);
            }
        }
        let mut accum = GradAccum::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pidx), Some(g)) = (node.param, node_grads[idx].as_ref()) {
                accum.per_param.push((pidx, g.clone()));
            }
        }
        GradSet { node_grads, accum }
    }
}

fn im2col(
    x: &ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c_in * kh * kw, h_out * w_out));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oh in 0..h_out {
                    let ir = (oh * stride + ki) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for ow in 0..w_out {
                        let ic = (ow * stride + kj) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        col[(row, oh * w_out + ow)] = x[(ci, ir as usize, ic as usize)];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oh in 0..h_out {
                    let ir = (oh * stride + ki) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for ow in 0..w_out {
                        let ic = (ow * stride + kj) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        dx[(ci, ir as usize, ic as usize)] += dcol[(row, oh * w_out + ow)];
                    }
                }
            }
        }
    }
    dx
}
