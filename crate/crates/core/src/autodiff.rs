//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records a Wengert list of operations; [`Tape::backward`] walks
//! it in reverse and accumulates gradients. The implementation is generic
//! over `f32`/`f64` so the same network code can be gradient-checked at
//! 64-bit precision and trained at 32-bit. Matrix products go through
//! `ndarray`'s `general_mat_mul`, which dispatches to `matrixmultiply`.
//!
//! Design points that matter for callers:
//! * tensors passed in as [`Tape::constant`] never receive gradients, so
//!   detaching (e.g. advantages, pasted observations) is done by feeding
//!   plain arrays rather than tape vars;
//! * all op outputs are freshly allocated in standard layout, which keeps
//!   `reshape` sound;
//! * a `Tape` is single-threaded; parallel workers each build their own tape
//!   and merge parameter gradients afterwards.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Floating point element type usable on the tape.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64")
    }
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    back: Option<BackFn<F>>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<F: Scalar> {
    by_node: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient for `v`, zeros if the node was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.by_node[v.0].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2d tensor")
}

fn as1<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("1d tensor")
}

/// Copy into standard (row-major) layout so reshapes are valid.
fn standardize<F: Scalar>(a: &ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn matmul_nn<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> Array2<F> {
    let (a, b) = (as2(a), as2(b));
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

fn matmul_nt<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> Array2<F> {
    let (a, b) = (as2(a), as2(b));
    let bt = b.t();
    let mut out = Array2::zeros((a.nrows(), bt.ncols()));
    general_mat_mul(F::one(), &a, &bt, F::zero(), &mut out);
    out
}

fn matmul_tn<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> Array2<F> {
    let (a, b) = (as2(a), as2(b));
    let at = a.t();
    let mut out = Array2::zeros((at.nrows(), b.ncols()));
    general_mat_mul(F::one(), &at, &b, F::zero(), &mut out);
    out
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, parents: Vec<usize>, back: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable leaf (parameters, or inputs whose grads are wanted).
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], None)
    }

    /// Current value of a var (cheap Rc clone).
    pub fn value(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ----- elementwise -----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g * &*vb, g * &*va])),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * x);
        let two = F::cast(2.0);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g * &va.mapv(|x| x * two)])),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.tanh());
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g * &y.mapv(|v| F::one() - v * v)])),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| F::one() / (F::one() + (-x).exp()));
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g * &y.mapv(|v| v * (F::one() - v))])),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.exp());
        let y = Rc::new(out.clone());
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g * &*y])))
    }

    /// Add a constant array (no gradient to the constant).
    pub fn add_const(&self, a: Var, c: &ArrayD<F>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "add_const shape mismatch");
        let out = &*va + c;
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g.clone()])))
    }

    /// Multiply by a constant array elementwise (no gradient to the constant).
    pub fn mul_const(&self, a: Var, c: &ArrayD<F>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "mul_const shape mismatch");
        let out = &*va * c;
        let cc = c.clone();
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g * &cc])))
    }

    // ----- linear algebra -----

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = matmul_nn(&va, &vb).into_dyn();
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![
                    matmul_nt(g, &vb).into_dyn(),
                    matmul_tn(&va, g).into_dyn(),
                ]
            })),
        )
    }

    /// x: (m,n) plus row-broadcast bias b: (n,)
    pub fn add_row_bias(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let x2 = as2(&vx);
        let b1 = as1(&vb);
        assert_eq!(x2.ncols(), b1.len(), "bias length mismatch");
        let out = (&x2 + &b1).into_dyn();
        self.push(
            out,
            vec![x.0, b.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Dense layer: x (m,n) * w (n,k) + b (k,)
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    // ----- shape -----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old: Vec<usize> = va.shape().to_vec();
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let out = standardize(&va)
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![standardize(g)
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape back")]
            })),
        )
    }

    /// Columns [lo, lo+len) of a (m,n) matrix.
    pub fn narrow_cols(&self, a: Var, lo: usize, len: usize) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let n = a2.ncols();
        assert!(lo + len <= n);
        let out = a2.slice(ndarray::s![.., lo..lo + len]).to_owned().into_dyn();
        let rows = a2.nrows();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut dx = Array2::<F>::zeros((rows, n));
                dx.slice_mut(ndarray::s![.., lo..lo + len]).assign(&as2(g));
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Concatenate two matrices along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (a2, b2) = (as2(&va), as2(&vb));
        assert_eq!(a2.nrows(), b2.nrows());
        let (n1, n2) = (a2.ncols(), b2.ncols());
        let out = standardize(
            &ndarray::concatenate(Axis(1), &[a2.view(), b2.view()])
                .expect("concat")
                .into_dyn(),
        );
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![
                    g2.slice(ndarray::s![.., 0..n1]).to_owned().into_dyn(),
                    g2.slice(ndarray::s![.., n1..n1 + n2]).to_owned().into_dyn(),
                ]
            })),
        )
    }

    // ----- reductions -----

    /// Mean over every element -> shape [1].
    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len();
        let inv = F::cast(1.0 / n as f64);
        let s = va.iter().fold(F::zero(), |acc, &x| acc + x) * inv;
        let shape: Vec<usize> = va.shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a.0],
            Some(Box::new(move |g| {
                let gv = g[[0]] * inv;
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    /// Sum over every element -> shape [1].
    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.iter().fold(F::zero(), |acc, &x| acc + x);
        let shape: Vec<usize> = va.shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a.0],
            Some(Box::new(move |g| {
                vec![ArrayD::from_elem(IxDyn(&shape), g[[0]])]
            })),
        )
    }

    /// Row sums of a (m,n) matrix -> (m,1).
    pub fn row_sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let (m, n) = (a2.nrows(), a2.ncols());
        let out = a2.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<F>::zeros((m, n));
                for i in 0..m {
                    let gi = g2[[i, 0]];
                    dx.row_mut(i).fill(gi);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Per-row mean squared error against a constant target: (m,n) -> (m,1).
    pub fn row_mse(&self, x: Var, target: &ArrayD<F>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), target.shape(), "row_mse shape mismatch");
        let x2 = as2(&vx);
        let t2 = as2(target);
        let (m, n) = (x2.nrows(), x2.ncols());
        let invn = F::cast(1.0 / n as f64);
        let mut out = Array2::<F>::zeros((m, 1));
        for i in 0..m {
            let mut acc = F::zero();
            for j in 0..n {
                let d = x2[[i, j]] - t2[[i, j]];
                acc = acc + d * d;
            }
            out[[i, 0]] = acc * invn;
        }
        let tcl = target.clone();
        let two = F::cast(2.0);
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let x2 = as2(&vx);
                let t2 = as2(&tcl);
                let mut dx = Array2::<F>::zeros((m, n));
                for i in 0..m {
                    let gi = g2[[i, 0]] * two * invn;
                    for j in 0..n {
                        dx[[i, j]] = gi * (x2[[i, j]] - t2[[i, j]]);
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    // ----- softmax / policy -----

    /// Row-wise log-softmax of a (m,n) matrix.
    pub fn log_softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x2 = as2(&vx);
        let (m, n) = (x2.nrows(), x2.ncols());
        let mut out = Array2::<F>::zeros((m, n));
        for i in 0..m {
            let row = x2.row(i);
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut lse = F::zero();
            for &v in row.iter() {
                lse = lse + (v - mx).exp();
            }
            let lse = mx + lse.ln();
            for j in 0..n {
                out[[i, j]] = x2[[i, j]] - lse;
            }
        }
        let probs = Rc::new(out.mapv(|v| v.exp()));
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<F>::zeros((m, n));
                for i in 0..m {
                    let mut gsum = F::zero();
                    for j in 0..n {
                        gsum = gsum + g2[[i, j]];
                    }
                    for j in 0..n {
                        dx[[i, j]] = g2[[i, j]] - probs[[i, j]] * gsum;
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Pick one column per row: out[i,0] = x[i, idx[i]].
    pub fn select_cols(&self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let x2 = as2(&vx);
        let (m, n) = (x2.nrows(), x2.ncols());
        assert_eq!(idx.len(), m);
        let mut out = Array2::<F>::zeros((m, 1));
        for i in 0..m {
            out[[i, 0]] = x2[[i, idx[i]]];
        }
        let idx = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<F>::zeros((m, n));
                for i in 0..m {
                    dx[[i, idx[i]]] = g2[[i, 0]];
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    // ----- convolution -----

    /// 2D convolution, x: (B,Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout,),
    /// zero padding `pad`, square stride.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let npos = bsz * ho * wo;

        // im2col
        let mut col = Array2::<F>::zeros((npos, k));
        {
            let x4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut row = 0;
            for bi in 0..bsz {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut cct = 0;
                        for ci in 0..cin {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ih = oh * stride + dh;
                                    let iw = ow * stride + dw;
                                    let v = if ih < pad || iw < pad || ih - pad >= h || iw - pad >= wdt
                                    {
                                        F::zero()
                                    } else {
                                        x4[[bi, ci, ih - pad, iw - pad]]
                                    };
                                    col[[row, cct]] = v;
                                    cct += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }

        // weights as (k, cout)
        let wmat = {
            let w2 = (*vw).clone().into_shape_with_order((cout, k)).unwrap();
            w2.t().to_owned()
        };

        let mut omat = Array2::<F>::zeros((npos, cout));
        general_mat_mul(F::one(), &col.view(), &wmat.view(), F::zero(), &mut omat);
        let b1 = as1(&vb).to_owned();
        for i in 0..npos {
            for c in 0..cout {
                omat[[i, c]] = omat[[i, c]] + b1[c];
            }
        }

        // (b, ho, wo, cout) -> (b, cout, ho, wo)
        let mut out = ndarray::Array4::<F>::zeros((bsz, cout, ho, wo));
        {
            let mut row = 0;
            for bi in 0..bsz {
                for oh in 0..ho {
                    for ow in 0..wo {
                        for c in 0..cout {
                            out[[bi, c, oh, ow]] = omat[[row, c]];
                        }
                        row += 1;
                    }
                }
            }
        }

        let col = Rc::new(col);
        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                // gather grad into (npos, cout)
                let mut gmat = Array2::<F>::zeros((npos, cout));
                let mut row = 0;
                for bi in 0..bsz {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for c in 0..cout {
                                gmat[[row, c]] = g4[[bi, c, oh, ow]];
                            }
                            row += 1;
                        }
                    }
                }
                // dw = (col^T gmat)^T reshaped to (cout, cin, kh, kw)
                let mut dwk = Array2::<F>::zeros((k, cout));
                general_mat_mul(F::one(), &col.t(), &gmat.view(), F::zero(), &mut dwk);
                let dw = standardize(&dwk.t().to_owned().into_dyn())
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .unwrap();
                // db
                let db = gmat.sum_axis(Axis(0)).into_dyn();
                // dcol = gmat wmat^T
                let mut dcol = Array2::<F>::zeros((npos, k));
                general_mat_mul(F::one(), &gmat.view(), &wmat.t(), F::zero(), &mut dcol);
                // col2im scatter
                let mut dx = ndarray::Array4::<F>::zeros((bsz, cin, h, wdt));
                let mut row = 0;
                for bi in 0..bsz {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut cct = 0;
                            for ci in 0..cin {
                                for dh in 0..kh {
                                    for dw_ in 0..kw {
                                        let ih = oh * stride + dh;
                                        let iw = ow * stride + dw_;
                                        if !(ih < pad
                                            || iw < pad
                                            || ih - pad >= h
                                            || iw - pad >= wdt)
                                        {
                                            dx[[bi, ci, ih - pad, iw - pad]] =
                                                dx[[bi, ci, ih - pad, iw - pad]]
                                                    + dcol[[row, cct]];
                                        }
                                        cct += 1;
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
                vec![dx.into_dyn(), dw, db]
            })),
        )
    }

    /// Learned 2x upsampling: transposed convolution with a 2x2 kernel and
    /// stride 2 (non-overlapping blocks). x: (B,Cin,H,W), w: (Cin,Cout,2,2),
    /// b: (Cout,) -> (B,Cout,2H,2W).
    pub fn deconv2x(&self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cin_w, cout) = (ws[0], ws[1]);
        assert_eq!(cin, cin_w, "deconv2x channel mismatch");
        assert_eq!(&ws[2..], &[2, 2], "deconv2x kernel must be 2x2");
        let npos = bsz * h * wdt;

        // xmat: (npos, cin)
        let x4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut xmat = Array2::<F>::zeros((npos, cin));
        {
            let mut row = 0;
            for bi in 0..bsz {
                for i in 0..h {
                    for j in 0..wdt {
                        for c in 0..cin {
                            xmat[[row, c]] = x4[[bi, c, i, j]];
                        }
                        row += 1;
                    }
                }
            }
        }
        // wmat: (cin, cout*4)
        let wmat = (*vw).clone().into_shape_with_order((cin, cout * 4)).unwrap();
        let mut omat = Array2::<F>::zeros((npos, cout * 4));
        general_mat_mul(F::one(), &xmat.view(), &wmat.view(), F::zero(), &mut omat);

        let b1 = as1(&vb).to_owned();
        let mut out = ndarray::Array4::<F>::zeros((bsz, cout, 2 * h, 2 * wdt));
        {
            let mut row = 0;
            for bi in 0..bsz {
                for i in 0..h {
                    for j in 0..wdt {
                        for c in 0..cout {
                            for di in 0..2 {
                                for dj in 0..2 {
                                    out[[bi, c, 2 * i + di, 2 * j + dj]] =
                                        omat[[row, c * 4 + di * 2 + dj]] + b1[c];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }

        let xmat = Rc::new(xmat);
        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gmat = Array2::<F>::zeros((npos, cout * 4));
                let mut db = Array1::<F>::zeros(cout);
                let mut row = 0;
                for bi in 0..bsz {
                    for i in 0..h {
                        for j in 0..wdt {
                            for c in 0..cout {
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let gv = g4[[bi, c, 2 * i + di, 2 * j + dj]];
                                        gmat[[row, c * 4 + di * 2 + dj]] = gv;
                                        db[c] = db[c] + gv;
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
                // dx = gmat wmat^T -> (npos, cin)
                let mut dxm = Array2::<F>::zeros((npos, cin));
                general_mat_mul(F::one(), &gmat.view(), &wmat.t(), F::zero(), &mut dxm);
                let mut dx = ndarray::Array4::<F>::zeros((bsz, cin, h, wdt));
                let mut row = 0;
                for bi in 0..bsz {
                    for i in 0..h {
                        for j in 0..wdt {
                            for c in 0..cin {
                                dx[[bi, c, i, j]] = dxm[[row, c]];
                            }
                            row += 1;
                        }
                    }
                }
                // dw = xmat^T gmat -> (cin, cout*4)
                let mut dwm = Array2::<F>::zeros((cin, cout * 4));
                general_mat_mul(F::one(), &xmat.t(), &gmat.view(), F::zero(), &mut dwm);
                let dw = dwm.into_shape_with_order(IxDyn(&[cin, cout, 2, 2])).unwrap();
                vec![dx.into_dyn(), dw, db.into_dyn()]
            })),
        )
    }

    /// Overwrite masked entries with constant values:
    /// out = x * (1 - mask) + obs * mask. Gradient is blocked on pasted
    /// entries. `mask` entries must be 0 or 1.
    pub fn paste(&self, x: Var, obs: &ArrayD<F>, mask: &ArrayD<F>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), obs.shape());
        assert_eq!(vx.shape(), mask.shape());
        let keep = mask.mapv(|m| F::one() - m);
        let out = &*vx * &keep + &(obs * mask);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g| vec![g * &keep])),
        )
    }

    // ----- backward -----

    /// Reverse sweep from a scalar (single element) root.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), F::one()));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, c) in node.parents.iter().zip(contribs) {
                    match &mut grads[*p] {
                        Some(acc) => *acc = &*acc + &c,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randd(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of a scalar loss against analytic gradients.
    fn fd_check(
        build: impl Fn(&Tape<f64>, &[Var]) -> Var,
        inputs: &[ArrayD<f64>],
        eps: f64,
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss);

        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.shape());
            for flat in 0..input.len() {
                let eval = |delta: f64| {
                    let tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == i {
                                x.as_slice_mut().unwrap()[flat] += delta;
                            }
                            tape.leaf(x)
                        })
                        .collect();
                    let l = build(&tape, &vars);
                    tape.value(l)[[0]]
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[flat];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(
                    err < tol,
                    "input {i} flat {flat}: fd {fd} vs analytic {an} (err {err})"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randd(&mut rng, &[3, 4]);
        let b = randd(&mut rng, &[3, 4]);
        fd_check(
            |t, v| {
                let x = t.mul(v[0], v[1]);
                let y = t.tanh(x);
                let z = t.sigmoid(t.add(y, v[0]));
                let w = t.square(t.sub(z, v[1]));
                t.mean_all(t.exp(t.scale(w, 0.3)))
            },
            &[a, b],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn linear_and_softmax_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randd(&mut rng, &[4, 5]);
        let w = randd(&mut rng, &[5, 3]);
        let b = randd(&mut rng, &[3]);
        fd_check(
            |t, v| {
                let lp = t.log_softmax(t.linear(v[0], v[1], v[2]));
                let picked = t.select_cols(lp, &[0, 2, 1, 2]);
                t.sum_all(picked)
            },
            &[x, w, b],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn reductions_and_shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randd(&mut rng, &[2, 6]);
        let target = randd(&mut rng, &[2, 6]);
        fd_check(
            |t, v| {
                let a = t.narrow_cols(v[0], 1, 3);
                let b = t.narrow_cols(v[0], 3, 3);
                let c = t.concat_cols(a, b);
                let r = t.reshape(c, &[2, 6]);
                let m = t.row_mse(r, &target);
                let s = t.row_sum(t.concat_cols(m, m));
                t.mean_all(s)
            },
            &[x],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randd(&mut rng, &[2, 2, 5, 5]);
        let w = randd(&mut rng, &[3, 2, 3, 3]);
        let b = randd(&mut rng, &[3]);
        fd_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1);
                let y = t.tanh(y);
                t.mean_all(t.square(y))
            },
            &[x, w, b],
            1e-5,
            1e-6,
        );

        let x = randd(&mut rng, &[2, 3, 2, 2]);
        let w = randd(&mut rng, &[3, 2, 2, 2]);
        let b = randd(&mut rng, &[2]);
        fd_check(
            |t, v| {
                let y = t.deconv2x(v[0], v[1], v[2]);
                t.mean_all(t.square(t.sigmoid(y)))
            },
            &[x, w, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn paste_blocks_gradient_on_masked_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randd(&mut rng, &[2, 4]);
        let obs = randd(&mut rng, &[2, 4]);
        let mut mask = ArrayD::zeros(IxDyn(&[2, 4]));
        mask[[0, 1]] = 1.0;
        mask[[1, 3]] = 1.0;

        let tape: Tape<f64> = Tape::new();
        let v = tape.leaf(x.clone());
        let out = tape.paste(v, &obs, &mask);
        assert_eq!(tape.value(out)[[0, 1]], obs[[0, 1]]);
        assert_eq!(tape.value(out)[[0, 0]], x[[0, 0]]);

        let loss = tape.sum_all(tape.square(out));
        let grads = tape.backward(loss);
        let gx = grads.get(v).unwrap();
        assert_eq!(gx[[0, 1]], 0.0);
        assert_eq!(gx[[1, 3]], 0.0);
        assert_ne!(gx[[0, 0]], 0.0);
    }

    #[test]
    fn backward_accumulates_over_shared_nodes() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        // y = x*x + x => dy/dx = 2x + 1 = 7
        let y = tape.add(tape.mul(x, x), x);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0]], 7.0);
    }
}
