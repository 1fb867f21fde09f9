//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for input and parameter leaves. A graph
//! is single-threaded; independent samples use independent graphs.

use std::collections::BTreeMap;

use super::params::{GradBuffer, ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride_h: usize,
    pad_left: usize,
    ho: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Unrolls the input into a `patch x (ho * w)` matrix, wrapping columns.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let cols = self.ho * self.w;
        let mut out = vec![T::zero(); self.patch() * cols];
        for ci in 0..self.cin {
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let p = (ci * self.kh + r) * self.kw + s;
                    let dst = &mut out[p * cols..(p + 1) * cols];
                    for oh in 0..self.ho {
                        let src = &x[(ci * self.h + oh * self.stride_h + r) * self.w..][..self.w];
                        let d = &mut dst[oh * self.w..(oh + 1) * self.w];
                        if self.kw == 1 {
                            d.copy_from_slice(src);
                        } else {
                            for u in 0..self.w {
                                let su = (u + s + self.w - self.pad_left % self.w) % self.w;
                                d[u] = src[su];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let cols = self.ho * self.w;
        for ci in 0..self.cin {
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let p = (ci * self.kh + r) * self.kw + s;
                    let srcp = &col[p * cols..(p + 1) * cols];
                    for oh in 0..self.ho {
                        let dst =
                            &mut dx[(ci * self.h + oh * self.stride_h + r) * self.w..][..self.w];
                        let c = &srcp[oh * self.w..(oh + 1) * self.w];
                        for u in 0..self.w {
                            let su = if self.kw == 1 {
                                u
                            } else {
                                (u + s + self.w - self.pad_left % self.w) % self.w
                            };
                            dst[su] += c[u];
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Linear {
        w: Var,
        x: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNormCols {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    VladResidual {
        assign: Var,
        x: Var,
        centers: Var,
        asum: Vec<T>,
    },
    Gem {
        x: Var,
        rho: Var,
        eps: T,
    },
    LazyTriplet {
        q: Var,
        pos: Var,
        neg: Var,
        hardest: usize,
        active: Vec<bool>,
    },
    DotConst {
        x: Var,
        w: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients of the leaves of a graph after [`Graph::backward`].
pub struct Grads<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }
}

/// `p = 1 + softplus(rho)`, the unconstrained parameterisation of a GeM
/// exponent.
pub fn gem_exponent<T: Scalar>(rho: T) -> T {
    T::one() + softplus(rho)
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverse of [`gem_exponent`].
pub fn gem_rho_for_exponent(p: f64) -> f64 {
    assert!(
        p > 1.0,
        "GeM exponent must exceed 1 under this parameterisation"
    );
    let y = p - 1.0;
    // softplus^-1(y) = log(e^y - 1)
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sqdist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a parameter. Repeated requests for the same parameter
    /// return the same leaf so gradients accumulate in one place.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// `op(a) * op(b)` for matrices, where `ta`/`tb` select the transpose.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    /// `w [o, i] * x [i, n] + b [o]` broadcast over columns.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (o, i) = self.value(w).dims2();
        let (xi, n) = self.value(x).dims2();
        assert_eq!(i, xi, "linear: weight expects {i} inputs, got {xi}");
        assert_eq!(self.value(b).len(), o, "linear: bias length");
        let mut out = Tensor::zeros(&[o, n]);
        {
            let bias = self.value(b).data();
            let d = out.data_mut();
            for r in 0..o {
                d[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = bias[r]);
            }
        }
        T::gemm(
            o,
            i,
            n,
            self.value(w).data(),
            false,
            self.value(x).data(),
            false,
            out.data_mut(),
            true,
        );
        self.push(out, Op::Linear { w, x, b })
    }

    /// Cross-correlation of `x [cin, h, w]` with `w [cout, cin, kh, kw]`.
    /// Height is valid (unpadded) with stride `stride_h`; width uses stride 1
    /// and circular padding so the output keeps width `w`. Callers validate
    /// the geometry through [`super::layers::Conv2dSpec`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride_h: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [cout, cin, kh, kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert!(xs[1] >= ws[2], "conv2d kernel taller than input");
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride_h,
            pad_left: (ws[3] - 1) / 2,
            ho: (xs[1] - ws[2]) / stride_h + 1,
        };
        let col = geom.im2col(self.value(x).data());
        let cols = geom.ho * geom.w;
        let mut out = Tensor::zeros(&[geom.cout, geom.ho, geom.w]);
        {
            let bias = self.value(b).data();
            let d = out.data_mut();
            for co in 0..geom.cout {
                d[co * cols..(co + 1) * cols]
                    .iter_mut()
                    .for_each(|v| *v = bias[co]);
            }
        }
        T::gemm(
            geom.cout,
            geom.patch(),
            cols,
            self.value(w).data(),
            false,
            &col,
            false,
            out.data_mut(),
            true,
        );
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add shape mismatch"
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Softmax along each row of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c).take(r) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Softmax down each column of a matrix.
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for j in 0..c {
            let m = (0..r).map(|i| d[i * c + j]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for i in 0..r {
                let e = (d[i * c + j] - m).exp();
                d[i * c + j] = e;
                s += e;
            }
            for i in 0..r {
                d[i * c + j] = d[i * c + j] / s;
            }
        }
        self.push(out, Op::SoftmaxCols(x))
    }

    /// Layer normalisation of each column of `x [d, n]` over its `d`
    /// channels, with per-channel affine `gamma`, `beta`.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (d, n) = self.value(x).dims2();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); d * n];
        let mut rstd = vec![T::zero(); n];
        let mut out = Tensor::zeros(&[d, n]);
        let o = out.data_mut();
        for j in 0..n {
            let mean = (0..d).map(|i| xv[i * n + j]).sum::<T>() / dn;
            let var = (0..d)
                .map(|i| {
                    let c = xv[i * n + j] - mean;
                    c * c
                })
                .sum::<T>()
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[j] = rs;
            for i in 0..d {
                let h = (xv[i * n + j] - mean) * rs;
                xhat[i * n + j] = h;
                o[i * n + j] = h * g[i] + b[i];
            }
        }
        self.push(
            out,
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(x).dims2();
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(&[len, c], data).expect("slice shape");
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data).expect("concat shape");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.value(p).dims2();
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            let dst = out.data_mut();
            for i in 0..r {
                dst[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshaped(shape)
            .expect("reshape must preserve element count");
        self.push(out, Op::Reshape(x))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(r);
        for row in out.data_mut().chunks_exact_mut(c) {
            let n = row
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::from_f64(1e-12));
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        self.push(out, Op::L2NormRows { x, norms })
    }

    /// Soft-assignment residual aggregation: for assignment `a [k, n]`,
    /// features `x [d, n]` and centres `c [k, d]`, returns
    /// `v[k, :] = sum_n a[k, n] * (x[:, n] - c[k, :])`.
    pub fn vlad_residual(&mut self, assign: Var, x: Var, centers: Var) -> Var {
        let (k, n) = self.value(assign).dims2();
        let (d, xn) = self.value(x).dims2();
        assert_eq!(n, xn, "vlad: assignment/feature count mismatch");
        assert_eq!(self.value(centers).shape(), &[k, d], "vlad: centre shape");
        let a = self.value(assign).data();
        let asum: Vec<T> = a.chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        let mut out = Tensor::zeros(&[k, d]);
        T::gemm(
            k,
            n,
            d,
            a,
            false,
            self.value(x).data(),
            true,
            out.data_mut(),
            false,
        );
        let c = self.value(centers).data();
        for (kk, s) in asum.iter().enumerate() {
            for j in 0..d {
                out.data_mut()[kk * d + j] = out.data()[kk * d + j] - *s * c[kk * d + j];
            }
        }
        self.push(
            out,
            Op::VladResidual {
                assign,
                x,
                centers,
                asum,
            },
        )
    }

    /// Generalised mean over the rows of `x [s, d]` with exponent
    /// `1 + softplus(rho)`; inputs below `eps` are clamped. Returns `[1, d]`.
    pub fn gem(&mut self, x: Var, rho: Var, eps: T) -> Var {
        let (s, d) = self.value(x).dims2();
        assert!(s > 0, "gem over an empty set");
        let p = gem_exponent(self.value(rho).data()[0]);
        let xv = self.value(x).data();
        let sn = T::from_f64(s as f64);
        let mut out = Tensor::zeros(&[1, d]);
        for j in 0..d {
            let m = (0..s).map(|i| xv[i * d + j].max(eps).powf(p)).sum::<T>() / sn;
            out.data_mut()[j] = m.powf(T::one() / p);
        }
        self.push(out, Op::Gem { x, rho, eps })
    }

    /// Hinged lazy triplet loss with squared Euclidean distance:
    /// `sum_n max(0, alpha + max_p d(q, pos_p) - d(q, neg_n))`.
    pub fn lazy_triplet(&mut self, q: Var, pos: Var, neg: Var, alpha: T) -> Var {
        let d = self.value(q).len();
        let (np, pd) = self.value(pos).dims2();
        let (nn, nd) = self.value(neg).dims2();
        assert!(np > 0 && nn > 0, "triplet sets must be non-empty");
        assert!(pd == d && nd == d, "triplet dimension mismatch");
        let qv = self.value(q).data();
        let pv = self.value(pos).data();
        let nv = self.value(neg).data();
        let mut hardest = 0;
        let mut dmax = T::neg_infinity();
        for i in 0..np {
            let di = sqdist(qv, &pv[i * d..(i + 1) * d]);
            if di > dmax {
                dmax = di;
                hardest = i;
            }
        }
        let mut loss = T::zero();
        let mut active = Vec::with_capacity(nn);
        for i in 0..nn {
            let t = alpha + dmax - sqdist(qv, &nv[i * d..(i + 1) * d]);
            active.push(t > T::zero());
            if t > T::zero() {
                loss += t;
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::LazyTriplet {
                q,
                pos,
                neg,
                hardest,
                active,
            },
        )
    }

    /// `sum(x * w)` for a constant `w`; a scalar objective for checks.
    pub fn dot_const(&mut self, x: Var, w: Tensor<T>) -> Var {
        assert_eq!(self.value(x).len(), w.len());
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::DotConst { x, w })
    }

    /// Reverse pass from `root` seeded with `seed` (same shape as the root).
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Grads<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut leaves = BTreeMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                leaves.insert(i, g);
            }
        }
        Grads { leaves }
    }

    /// Adds parameter gradients from `grads` into `buf`.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, buf: &mut GradBuffer<T>) {
        for (&id, v) in &self.params {
            if let Some(g) = grads.get(*v) {
                buf.accumulate(id, g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
            match &mut grads[v.0] {
                Some(x) => x.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (ar, ac) = av.dims2();
                let (br, bc) = bv.dims2();
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                let mut da = Tensor::zeros(av.shape());
                if ta {
                    T::gemm(k, n, m, bv.data(), tb, gd, true, da.data_mut(), false);
                } else {
                    T::gemm(m, n, k, gd, false, bv.data(), !tb, da.data_mut(), false);
                }
                let mut db = Tensor::zeros(bv.shape());
                if tb {
                    T::gemm(n, m, k, gd, true, av.data(), ta, db.data_mut(), false);
                } else {
                    T::gemm(k, m, n, av.data(), !ta, gd, false, db.data_mut(), false);
                }
                acc(grads, a, da);
                acc(grads, b, db);
            }
            &Op::Linear { w, x, b } => {
                let wv = self.value(w);
                let xv = self.value(x);
                let (o, inp) = wv.dims2();
                let n = xv.dims2().1;
                let mut dw = Tensor::zeros(&[o, inp]);
                T::gemm(o, n, inp, gd, false, xv.data(), true, dw.data_mut(), false);
                let mut dx = Tensor::zeros(&[inp, n]);
                T::gemm(inp, o, n, wv.data(), true, gd, false, dx.data_mut(), false);
                let db: Vec<T> = gd
                    .chunks_exact(n)
                    .map(|r| r.iter().copied().sum())
                    .collect();
                acc(grads, w, dw);
                acc(grads, x, dx);
                acc(
                    grads,
                    b,
                    Tensor::new(self.value(b).shape(), db).expect("bias shape"),
                );
            }
            &Op::Conv2d { x, w, b, geom } => {
                let cols = geom.ho * geom.w;
                let col = geom.im2col(self.value(x).data());
                let mut dw = Tensor::zeros(self.value(w).shape());
                T::gemm(
                    geom.cout,
                    cols,
                    geom.patch(),
                    gd,
                    false,
                    &col,
                    true,
                    dw.data_mut(),
                    false,
                );
                let mut dcol = vec![T::zero(); geom.patch() * cols];
                T::gemm(
                    geom.patch(),
                    geom.cout,
                    cols,
                    self.value(w).data(),
                    true,
                    gd,
                    false,
                    &mut dcol,
                    false,
                );
                let mut dx = Tensor::zeros(self.value(x).shape());
                geom.col2im(&dcol, dx.data_mut());
                let db: Vec<T> = gd
                    .chunks_exact(cols)
                    .map(|r| r.iter().copied().sum())
                    .collect();
                acc(grads, w, dw);
                acc(grads, x, dx);
                acc(grads, b, Tensor::new(&[geom.cout], db).expect("bias shape"));
            }
            &Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                acc(grads, x, dx);
            }
            &Op::Add(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            &Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v = *v * s);
                acc(grads, x, dx);
            }
            &Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (_, c) = y.dims2();
                let mut dx = Tensor::zeros(y.shape());
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(gd.chunks_exact(c))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, x, dx);
            }
            &Op::SoftmaxCols(x) => {
                let y = &self.nodes[i].value;
                let (r, c) = y.dims2();
                let yd = y.data();
                let mut dx = Tensor::zeros(y.shape());
                for j in 0..c {
                    let dot: T = (0..r).map(|k| yd[k * c + j] * gd[k * c + j]).sum();
                    for k in 0..r {
                        dx.data_mut()[k * c + j] = yd[k * c + j] * (gd[k * c + j] - dot);
                    }
                }
                acc(grads, x, dx);
            }
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (d, n) = self.value(*x).dims2();
                let gam = self.value(*gamma).data();
                let dn = T::from_f64(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = Tensor::zeros(&[d, n]);
                for j in 0..n {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for k in 0..d {
                        let idx = k * n + j;
                        let dh = gd[idx] * gam[k];
                        s1 += dh;
                        s2 += dh * xhat[idx];
                        dgamma[k] += gd[idx] * xhat[idx];
                        dbeta[k] += gd[idx];
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    for k in 0..d {
                        let idx = k * n + j;
                        let dh = gd[idx] * gam[k];
                        dx.data_mut()[idx] = rstd[j] * (dh - m1 - xhat[idx] * m2);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, Tensor::new(&[d], dgamma).expect("gamma"));
                acc(grads, *beta, Tensor::new(&[d], dbeta).expect("beta"));
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = self.value(x).dims2();
                let mut dx = Tensor::zeros(self.value(x).shape());
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(grads, x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let t = Tensor::new(self.value(p).shape(), gd[off..off + len].to_vec())
                        .expect("concat part");
                    acc(grads, p, t);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    let mut t = Tensor::zeros(&[r, w]);
                    for k in 0..r {
                        t.data_mut()[k * w..(k + 1) * w]
                            .copy_from_slice(&gd[k * total + off..k * total + off + w]);
                    }
                    acc(grads, p, t);
                    off += w;
                }
            }
            &Op::Reshape(x) => {
                let t = g
                    .clone()
                    .reshaped(self.value(x).shape())
                    .expect("reshape back");
                acc(grads, x, t);
            }
            Op::L2NormRows { x, norms } => {
                let y = &self.nodes[i].value;
                let (_, c) = y.dims2();
                let mut dx = Tensor::zeros(y.shape());
                for (r, ((dxr, yr), gr)) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(gd.chunks_exact(c))
                    .enumerate()
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::VladResidual {
                assign,
                x,
                centers,
                asum,
            } => {
                let (k, n) = self.value(*assign).dims2();
                let d = self.value(*x).dims2().0;
                let xv = self.value(*x).data();
                let cv = self.value(*centers).data();
                // dA = dV * x - rowdot(dV, C)
                let mut da = Tensor::zeros(&[k, n]);
                T::gemm(k, d, n, gd, false, xv, false, da.data_mut(), false);
                for kk in 0..k {
                    let dc: T = (0..d).map(|j| gd[kk * d + j] * cv[kk * d + j]).sum();
                    da.data_mut()[kk * n..(kk + 1) * n]
                        .iter_mut()
                        .for_each(|v| *v = *v - dc);
                }
                let mut dx = Tensor::zeros(&[d, n]);
                T::gemm(
                    d,
                    k,
                    n,
                    gd,
                    true,
                    self.value(*assign).data(),
                    false,
                    dx.data_mut(),
                    false,
                );
                let mut dcent = Tensor::zeros(&[k, d]);
                for kk in 0..k {
                    for j in 0..d {
                        dcent.data_mut()[kk * d + j] = -gd[kk * d + j] * asum[kk];
                    }
                }
                acc(grads, *assign, da);
                acc(grads, *x, dx);
                acc(grads, *centers, dcent);
            }
            &Op::Gem { x, rho, eps } => {
                let (s, d) = self.value(x).dims2();
                let xv = self.value(x).data();
                let y = self.nodes[i].value.data();
                let r = self.value(rho).data()[0];
                let p = gem_exponent(r);
                let sn = T::from_f64(s as f64);
                let mut dx = Tensor::zeros(&[s, d]);
                let mut dp = T::zero();
                for j in 0..d {
                    let mut m = T::zero();
                    let mut ml = T::zero();
                    for k in 0..s {
                        let z = xv[k * d + j].max(eps);
                        let zp = z.powf(p);
                        m += zp;
                        ml += zp * z.ln();
                    }
                    m = m / sn;
                    ml = ml / sn;
                    // dy/dz = M^(1/p - 1) z^(p-1) / S
                    let coef = y[j] / m / sn;
                    for k in 0..s {
                        let v = xv[k * d + j];
                        if v > eps {
                            dx.data_mut()[k * d + j] = gd[j] * coef * v.powf(p - T::one());
                        }
                    }
                    // dy/dp = y (ml / (p M) - ln M / p^2)
                    dp += gd[j] * y[j] * (ml / (p * m) - m.ln() / (p * p));
                }
                acc(grads, x, dx);
                acc(grads, rho, Tensor::scalar(dp * sigmoid(r)));
            }
            Op::LazyTriplet {
                q,
                pos,
                neg,
                hardest,
                active,
            } => {
                let g0 = gd[0];
                let two = T::from_f64(2.0);
                let qv = self.value(*q).data();
                let d = qv.len();
                let pv = &self.value(*pos).data()[hardest * d..(hardest + 1) * d];
                let nv = self.value(*neg).data();
                let n_active = T::from_f64(active.iter().filter(|&&a| a).count() as f64);
                let mut dq = Tensor::zeros(self.value(*q).shape());
                let mut dpos = Tensor::zeros(self.value(*pos).shape());
                let mut dneg = Tensor::zeros(self.value(*neg).shape());
                for j in 0..d {
                    let gp = two * (qv[j] - pv[j]) * g0;
                    dq.data_mut()[j] += gp * n_active;
                    dpos.data_mut()[hardest * d + j] = -gp * n_active;
                }
                for (k, &a) in active.iter().enumerate() {
                    if !a {
                        continue;
                    }
                    for j in 0..d {
                        let gn = two * (qv[j] - nv[k * d + j]) * g0;
                        dq.data_mut()[j] -= gn;
                        dneg.data_mut()[k * d + j] = gn;
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *pos, dpos);
                acc(grads, *neg, dneg);
            }
            Op::DotConst { x, w } => {
                let mut dx = w
                    .clone()
                    .reshaped(self.value(*x).shape())
                    .expect("dot shape");
                dx.data_mut().iter_mut().for_each(|v| *v = *v * gd[0]);
                acc(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for p in [1.5, 2.0, 3.0, 10.0, 40.0] {
            let r = gem_rho_for_exponent(p);
            assert!((gem_exponent(r) - p).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 100.0]).unwrap());
        let y = g.softmax_rows(x);
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vlad_residual_small_case() {
        let mut g = Graph::<f64>::new();
        // one cluster, two features in 2-d
        let a = g.input(Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap());
        let x = g.input(Tensor::new(&[2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap());
        let c = g.input(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let v = g.vlad_residual(a, x, c);
        // 0.25*(1-1,2-1) + 0.75*(3-1,4-1) = (1.5, 2.5)
        assert_eq!(g.value(v).data(), &[1.5, 2.5]);
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&ps, id);
        let b = g.param(&ps, id);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let grads = g.backward(s, Tensor::scalar(1.0));
        let mut buf = GradBuffer::for_params(&ps);
        g.accumulate_param_grads(&grads, &mut buf);
        assert_eq!(buf.get(id).unwrap().data(), &[2.0]);
    }
}
