//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable computation in the crate (encoder forward passes,
//! SSL losses, probe heads, dense field losses) is expressed as ops pushed
//! onto a [`Tape`]. Values are `f64` `ndarray` arrays of any rank; matrix
//! ops expect rank 2, image ops rank 3 `(h, w, c)`. Gradient accumulation
//! order is the fixed reverse tape order, so a given op sequence produces
//! bit-identical gradients on every run.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};

/// Dynamic-rank value stored on the tape.
pub type Arr = ArrayD<f64>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tid(usize);

type BackFn = Box<dyn Fn(&Arr, &[Arr]) -> Vec<Arr>>;

struct BackStep {
    parents: Vec<usize>,
    back: BackFn,
}

/// Computation tape. Build a graph with the op methods, then call
/// [`Tape::backward`] on a scalar root to get gradients for every node.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Arr>,
    steps: Vec<Option<BackStep>>,
}

/// Gradients produced by [`Tape::backward`], addressable by node handle.
pub struct Grads {
    by_id: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, t: Tid) -> Option<&Arr> {
        self.by_id[t.0].as_ref()
    }

    /// Gradient of a node, zeros if the node never received one.
    pub fn get_or_zeros(&self, t: Tid, shape: &[usize]) -> Arr {
        self.by_id[t.0]
            .clone()
            .unwrap_or_else(|| Arr::zeros(IxDyn(shape)))
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 value")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Value of a node.
    pub fn val(&self, t: Tid) -> &Arr {
        &self.vals[t.0]
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        self.vals[t.0].shape()
    }

    fn push(&mut self, v: Arr, step: Option<BackStep>) -> Tid {
        self.vals.push(v);
        self.steps.push(step);
        Tid(self.vals.len() - 1)
    }

    /// Differentiable leaf (parameters, trainable inputs).
    pub fn leaf(&mut self, v: Arr) -> Tid {
        self.push(v, None)
    }

    /// Non-differentiable input. Gradients may still be accumulated for it
    /// during backward but are discarded by callers.
    pub fn constant(&mut self, v: Arr) -> Tid {
        self.push(v, None)
    }

    fn unary(&mut self, a: Tid, v: Arr, back: impl Fn(&Arr, &[Arr]) -> Vec<Arr> + 'static) -> Tid {
        self.push(
            v,
            Some(BackStep {
                parents: vec![a.0],
                back: Box::new(back),
            }),
        )
    }

    fn binary(
        &mut self,
        a: Tid,
        b: Tid,
        v: Arr,
        back: impl Fn(&Arr, &[Arr]) -> Vec<Arr> + 'static,
    ) -> Tid {
        self.push(
            v,
            Some(BackStep {
                parents: vec![a.0, b.0],
                back: Box::new(back),
            }),
        )
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.binary(a, b, v, |g, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.binary(a, b, v, |g, _| vec![g.clone(), g.mapv(|x| -x)])
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.vals[a.0] * &self.vals[b.0];
        let (ai, bi) = (a.0, b.0);
        self.binary(a, b, v, move |g, vals| {
            vec![g * &vals[bi], g * &vals[ai]]
        })
    }

    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.vals[a.0] / &self.vals[b.0];
        let (ai, bi) = (a.0, b.0);
        self.binary(a, b, v, move |g, vals| {
            let db = g * &vals[ai] / (&vals[bi] * &vals[bi]);
            vec![g / &vals[bi], db.mapv(|x| -x)]
        })
    }

    pub fn scale(&mut self, a: Tid, k: f64) -> Tid {
        let v = self.vals[a.0].mapv(|x| k * x);
        self.unary(a, v, move |g, _| vec![g.mapv(|x| k * x)])
    }

    pub fn neg(&mut self, a: Tid) -> Tid {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Tid, k: f64) -> Tid {
        let v = self.vals[a.0].mapv(|x| x + k);
        self.unary(a, v, |g, _| vec![g.clone()])
    }

    /// `a + c` with `c` a plain array (no gradient tracked for it).
    pub fn add_const(&mut self, a: Tid, c: &Arr) -> Tid {
        assert_eq!(self.shape(a), c.shape(), "add_const shape mismatch");
        let v = &self.vals[a.0] + c;
        self.unary(a, v, |g, _| vec![g.clone()])
    }

    pub fn sub_const(&mut self, a: Tid, c: &Arr) -> Tid {
        assert_eq!(self.shape(a), c.shape(), "sub_const shape mismatch");
        let v = &self.vals[a.0] - c;
        self.unary(a, v, |g, _| vec![g.clone()])
    }

    pub fn mul_const(&mut self, a: Tid, c: &Arr) -> Tid {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let v = &self.vals[a.0] * c;
        let c = c.clone();
        self.unary(a, v, move |g, _| vec![g * &c])
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let v = self.vals[a.0].mapv(|x| x.max(0.0));
        let ai = a.0;
        self.unary(a, v, move |g, vals| {
            vec![g * &vals[ai].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
        })
    }

    pub fn gelu(&mut self, a: Tid) -> Tid {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let v = self.vals[a.0].mapv(gelu_tanh);
        let ai = a.0;
        self.unary(a, v, move |g, vals| {
            let d = vals[ai].mapv(|x| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            });
            vec![g * &d]
        })
    }

    pub fn softplus(&mut self, a: Tid) -> Tid {
        let v = self.vals[a.0].mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let ai = a.0;
        self.unary(a, v, move |g, vals| {
            vec![g * &vals[ai].mapv(|x| 1.0 / (1.0 + (-x).exp()))]
        })
    }

    pub fn abs(&mut self, a: Tid) -> Tid {
        let v = self.vals[a.0].mapv(f64::abs);
        let ai = a.0;
        self.unary(a, v, move |g, vals| {
            vec![g * &vals[ai].mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })]
        })
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.vals[a.0].mapv(f64::sqrt);
        let vi = v.clone();
        self.unary(a, v, move |g, _| vec![g / &vi.mapv(|y| 2.0 * y)])
    }

    pub fn log(&mut self, a: Tid) -> Tid {
        let v = self.vals[a.0].mapv(f64::ln);
        let ai = a.0;
        self.unary(a, v, move |g, vals| vec![g / &vals[ai]])
    }

    pub fn square(&mut self, a: Tid) -> Tid {
        self.mul(a, a)
    }

    // ---- matrix ----

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let av = as2(&self.vals[a.0]);
        let bv = as2(&self.vals[b.0]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        let (ai, bi) = (a.0, b.0);
        self.binary(a, b, v, move |g, vals| {
            let g2 = as2(g);
            let av = as2(&vals[ai]);
            let bv = as2(&vals[bi]);
            vec![g2.dot(&bv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
        })
    }

    pub fn transpose(&mut self, a: Tid) -> Tid {
        let v = as2(&self.vals[a.0]).t().to_owned().into_dyn();
        self.unary(a, v, |g, _| vec![as2(g).t().to_owned().into_dyn()])
    }

    /// `m + b` where `b` (len c) broadcasts over the rows of `m` (r x c).
    pub fn add_bias(&mut self, m: Tid, b: Tid) -> Tid {
        let mv = as2(&self.vals[m.0]);
        let bv = &self.vals[b.0];
        assert_eq!(bv.ndim(), 1, "bias must be rank 1");
        assert_eq!(mv.ncols(), bv.len(), "bias length");
        let mut v = mv.to_owned();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in v.rows_mut() {
            row += &b1;
        }
        self.binary(m, b, v.into_dyn(), |g, _| {
            let g2 = as2(g);
            vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
        })
    }

    // ---- rows: softmax family, normalization ----

    pub fn row_softmax(&mut self, a: Tid) -> Tid {
        let x = as2(&self.vals[a.0]);
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yv = y.clone();
        self.unary(a, y.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros(g2.raw_dim());
            for (i, gr) in g2.rows().into_iter().enumerate() {
                let yr = yv.row(i);
                let dot = gr.dot(&yr);
                let mut d = dx.row_mut(i);
                for j in 0..yr.len() {
                    d[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![dx.into_dyn()]
        })
    }

    pub fn row_log_softmax(&mut self, a: Tid) -> Tid {
        let x = as2(&self.vals[a.0]);
        let mut y = x.to_owned();
        let mut sm = x.to_owned();
        for (mut row, mut srow) in y.rows_mut().into_iter().zip(sm.rows_mut()) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
            srow.mapv_inplace(|v| (v - lse).exp());
        }
        self.unary(a, y.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut dx = g2.to_owned();
            for (i, mut d) in dx.rows_mut().into_iter().enumerate() {
                let gsum = g2.row(i).sum();
                let s = sm.row(i);
                for j in 0..d.len() {
                    d[j] -= s[j] * gsum;
                }
            }
            vec![dx.into_dyn()]
        })
    }

    /// Row-wise layer norm with affine params `gamma`, `beta` (rank 1, len c).
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Tid {
        let xv = as2(&self.vals[x.0]).to_owned();
        let gv = self.vals[gamma.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bv = self.vals[beta.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            row.mapv_inplace(|v| (v - mu) * s);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for j in 0..row.len() {
                row[j] = row[j] * gv[j] + bv[j];
            }
        }
        let xhat_c = xhat;
        let g_c = gv;
        self.push(
            y.into_dyn(),
            Some(BackStep {
                parents: vec![x.0, gamma.0, beta.0],
                back: Box::new(move |g, _| {
                    let g2 = as2(g);
                    let (r, c) = (g2.nrows(), g2.ncols());
                    let mut dx = Array2::<f64>::zeros((r, c));
                    let mut dgamma = ndarray::Array1::<f64>::zeros(c);
                    let mut dbeta = ndarray::Array1::<f64>::zeros(c);
                    for i in 0..r {
                        let gr = g2.row(i);
                        let xh = xhat_c.row(i);
                        for j in 0..c {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                        }
                        let dxhat: Vec<f64> = (0..c).map(|j| gr[j] * g_c[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(xh.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        let s = inv_std[i];
                        let mut d = dx.row_mut(i);
                        for j in 0..c {
                            d[j] = s * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
                }),
            }),
        )
    }

    /// Row-wise L2 normalization: `y = x / sqrt(|x|^2 + eps)`.
    pub fn row_l2_normalize(&mut self, a: Tid, eps: f64) -> Tid {
        let x = as2(&self.vals[a.0]).to_owned();
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let yc = y.clone();
        self.unary(a, y.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut dx = g2.to_owned();
            for (i, mut d) in dx.rows_mut().into_iter().enumerate() {
                let yr = yc.row(i);
                let dot = g2.row(i).dot(&yr);
                for j in 0..d.len() {
                    d[j] = (d[j] - yr[j] * dot) / norms[i];
                }
            }
            vec![dx.into_dyn()]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let s = self.vals[a.0].sum();
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.unary(a, ndarray::arr0(s).into_dyn(), move |g, _| {
            let gs = g[[]];
            vec![Arr::from_elem(IxDyn(&shape), gs)]
        })
    }

    pub fn mean_all(&mut self, a: Tid) -> Tid {
        let n = self.vals[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum a list of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Tid]) -> Tid {
        assert!(!xs.is_empty());
        let mut v = self.vals[xs[0].0].clone();
        for t in &xs[1..] {
            v = v + &self.vals[t.0];
        }
        let k = xs.len();
        self.push(
            v,
            Some(BackStep {
                parents: xs.iter().map(|t| t.0).collect(),
                back: Box::new(move |g, _| (0..k).map(|_| g.clone()).collect()),
            }),
        )
    }

    pub fn mean_of(&mut self, xs: &[Tid]) -> Tid {
        let s = self.add_n(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    // ---- structure ----

    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Tid {
        let v = self.vals[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let orig: Vec<usize> = self.shape(a).to_vec();
        self.unary(a, v, move |g, _| {
            vec![g.clone().into_shape_with_order(IxDyn(&orig)).unwrap()]
        })
    }

    pub fn slice_cols(&mut self, a: Tid, c0: usize, len: usize) -> Tid {
        let av = as2(&self.vals[a.0]);
        let v = av.slice(ndarray::s![.., c0..c0 + len]).to_owned();
        let full = av.ncols();
        self.unary(a, v.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut out = Array2::<f64>::zeros((g2.nrows(), full));
            out.slice_mut(ndarray::s![.., c0..c0 + len]).assign(&g2);
            vec![out.into_dyn()]
        })
    }

    pub fn slice_rows(&mut self, a: Tid, r0: usize, len: usize) -> Tid {
        let av = as2(&self.vals[a.0]);
        let v = av.slice(ndarray::s![r0..r0 + len, ..]).to_owned();
        let full = av.nrows();
        self.unary(a, v.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut out = Array2::<f64>::zeros((full, g2.ncols()));
            out.slice_mut(ndarray::s![r0..r0 + len, ..]).assign(&g2);
            vec![out.into_dyn()]
        })
    }

    pub fn concat_cols(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| as2(&self.vals[t.0])).collect();
        let v = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        self.push(
            v.into_dyn(),
            Some(BackStep {
                parents: parts.iter().map(|t| t.0).collect(),
                back: Box::new(move |g, _| {
                    let g2 = as2(g);
                    let mut out = Vec::with_capacity(widths.len());
                    let mut c = 0;
                    for w in &widths {
                        out.push(g2.slice(ndarray::s![.., c..c + w]).to_owned().into_dyn());
                        c += w;
                    }
                    out
                }),
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| as2(&self.vals[t.0])).collect();
        let v = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        self.push(
            v.into_dyn(),
            Some(BackStep {
                parents: parts.iter().map(|t| t.0).collect(),
                back: Box::new(move |g, _| {
                    let g2 = as2(g);
                    let mut out = Vec::with_capacity(heights.len());
                    let mut r = 0;
                    for h in &heights {
                        out.push(g2.slice(ndarray::s![r..r + h, ..]).to_owned().into_dyn());
                        r += h;
                    }
                    out
                }),
            }),
        )
    }

    /// Select rows by index (indices may repeat; backward scatter-adds).
    pub fn gather_rows(&mut self, a: Tid, idx: &[usize]) -> Tid {
        let av = as2(&self.vals[a.0]);
        let mut v = Array2::<f64>::zeros((idx.len(), av.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&av.row(r));
        }
        let idx = idx.to_vec();
        let full = av.nrows();
        self.unary(a, v.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut out = Array2::<f64>::zeros((full, g2.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                let mut row = out.row_mut(r);
                row += &g2.row(i);
            }
            vec![out.into_dyn()]
        })
    }

    /// Build an `(|idx_a| + |idx_b|) x c` matrix with `out[idx_a[i]] = a[i]`
    /// and `out[idx_b[j]] = b[j]`. The two index sets must partition the rows.
    pub fn stitch_rows(&mut self, a: Tid, b: Tid, idx_a: &[usize], idx_b: &[usize]) -> Tid {
        let av = as2(&self.vals[a.0]);
        let bv = as2(&self.vals[b.0]);
        assert_eq!(av.nrows(), idx_a.len());
        assert_eq!(bv.nrows(), idx_b.len());
        assert_eq!(av.ncols(), bv.ncols());
        let n = idx_a.len() + idx_b.len();
        let mut v = Array2::<f64>::zeros((n, av.ncols()));
        for (i, &r) in idx_a.iter().enumerate() {
            v.row_mut(r).assign(&av.row(i));
        }
        for (j, &r) in idx_b.iter().enumerate() {
            v.row_mut(r).assign(&bv.row(j));
        }
        let (ia, ib) = (idx_a.to_vec(), idx_b.to_vec());
        self.binary(a, b, v.into_dyn(), move |g, _| {
            let g2 = as2(g);
            let mut da = Array2::<f64>::zeros((ia.len(), g2.ncols()));
            let mut db = Array2::<f64>::zeros((ib.len(), g2.ncols()));
            for (i, &r) in ia.iter().enumerate() {
                da.row_mut(i).assign(&g2.row(r));
            }
            for (j, &r) in ib.iter().enumerate() {
                db.row_mut(j).assign(&g2.row(r));
            }
            vec![da.into_dyn(), db.into_dyn()]
        })
    }

    /// Repeat a `1 x c` row `n` times.
    pub fn tile_rows(&mut self, a: Tid, n: usize) -> Tid {
        let av = as2(&self.vals[a.0]);
        assert_eq!(av.nrows(), 1, "tile_rows expects a single row");
        let mut v = Array2::<f64>::zeros((n, av.ncols()));
        for mut row in v.rows_mut() {
            row.assign(&av.row(0));
        }
        self.unary(a, v.into_dyn(), |g, _| {
            let g2 = as2(g);
            vec![g2
                .sum_axis(Axis(0))
                .insert_axis(Axis(0))
                .into_dyn()]
        })
    }

    // ---- image ops (rank 3: h x w x c) ----

    /// Bilinear resize with half-pixel sample centers and border clamp.
    pub fn resize_bilinear(&mut self, a: Tid, out_h: usize, out_w: usize) -> Tid {
        let img = as3(&self.vals[a.0]).to_owned();
        let (h, w, c) = img.dim();
        let v = resize_bilinear_raw(&img, out_h, out_w);
        self.unary(a, v.into_dyn(), move |g, _| {
            let g3 = as3(g);
            let mut dx = Array3::<f64>::zeros((h, w, c));
            for oy in 0..out_h {
                let (y0, y1, fy) = src_coords(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = src_coords(ox, out_w, w);
                    for ch in 0..c {
                        let gv = g3[[oy, ox, ch]];
                        dx[[y0, x0, ch]] += gv * (1.0 - fy) * (1.0 - fx);
                        dx[[y0, x1, ch]] += gv * (1.0 - fy) * fx;
                        dx[[y1, x0, ch]] += gv * fy * (1.0 - fx);
                        dx[[y1, x1, ch]] += gv * fy * fx;
                    }
                }
            }
            vec![dx.into_dyn()]
        })
    }

    /// Separable convolution with a fixed 1-D kernel (zero padding, same size),
    /// applied along rows then columns.
    pub fn blur_separable(&mut self, a: Tid, kernel: &[f64]) -> Tid {
        let img = as3(&self.vals[a.0]).to_owned();
        let k = kernel.to_vec();
        let v = blur_sep_raw(&img, &k);
        let kr: Vec<f64> = k.iter().rev().copied().collect();
        self.unary(a, v.into_dyn(), move |g, _| {
            let g3 = as3(g).to_owned();
            vec![blur_sep_raw(&g3, &kr).into_dyn()]
        })
    }

    /// Sample a constant image at coordinates `(u, v)` (rank 2, same shape),
    /// bilinear with border clamp. Gradients flow to the coordinates only.
    pub fn bilinear_sample(&mut self, img: &Array3<f64>, u: Tid, v: Tid) -> Tid {
        let (h, w, c) = img.dim();
        let uv = as2(&self.vals[u.0]).to_owned();
        let vv = as2(&self.vals[v.0]).to_owned();
        assert_eq!(uv.dim(), vv.dim(), "u/v coordinate shapes");
        let (oh, ow) = uv.dim();
        let mut out = Array3::<f64>::zeros((oh, ow, c));
        for y in 0..oh {
            for x in 0..ow {
                let (cell, fx, fy, _, _) = sample_cell(&uv, &vv, y, x, h, w);
                let (x0, y0) = cell;
                for ch in 0..c {
                    out[[y, x, ch]] = (1.0 - fy) * (1.0 - fx) * img[[y0, x0, ch]]
                        + (1.0 - fy) * fx * img[[y0, x0 + 1, ch]]
                        + fy * (1.0 - fx) * img[[y0 + 1, x0, ch]]
                        + fy * fx * img[[y0 + 1, x0 + 1, ch]];
                }
            }
        }
        let img = img.clone();
        self.binary(u, v, out.into_dyn(), move |g, _| {
            let g3 = as3(g);
            let mut du = Array2::<f64>::zeros((oh, ow));
            let mut dv = Array2::<f64>::zeros((oh, ow));
            for y in 0..oh {
                for x in 0..ow {
                    let (cell, fx, fy, in_x, in_y) = sample_cell(&uv, &vv, y, x, h, w);
                    let (x0, y0) = cell;
                    let (c_count, _) = (g3.dim().2, ());
                    for ch in 0..c_count {
                        let gv = g3[[y, x, ch]];
                        if in_x {
                            let dx = (1.0 - fy)
                                * (img[[y0, x0 + 1, ch]] - img[[y0, x0, ch]])
                                + fy * (img[[y0 + 1, x0 + 1, ch]] - img[[y0 + 1, x0, ch]]);
                            du[[y, x]] += gv * dx;
                        }
                        if in_y {
                            let dy = (1.0 - fx)
                                * (img[[y0 + 1, x0, ch]] - img[[y0, x0, ch]])
                                + fx * (img[[y0 + 1, x0 + 1, ch]] - img[[y0, x0 + 1, ch]]);
                            dv[[y, x]] += gv * dy;
                        }
                    }
                }
            }
            vec![du.into_dyn(), dv.into_dyn()]
        })
    }

    /// Crop a rank-3 image; backward zero-pads back to the full extent.
    pub fn crop3(&mut self, a: Tid, y0: usize, h: usize, x0: usize, w: usize) -> Tid {
        let img = as3(&self.vals[a.0]);
        let (fh, fw, c) = img.dim();
        let v = img
            .slice(ndarray::s![y0..y0 + h, x0..x0 + w, ..])
            .to_owned();
        self.unary(a, v.into_dyn(), move |g, _| {
            let g3 = as3(g);
            let mut out = Array3::<f64>::zeros((fh, fw, c));
            out.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w, ..])
                .assign(&g3);
            vec![out.into_dyn()]
        })
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that participates in the root's computation.
    pub fn backward(&self, root: Tid) -> Grads {
        assert_eq!(
            self.vals[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut by_id: Vec<Option<Arr>> = vec![None; self.vals.len()];
        by_id[root.0] = Some(Arr::from_elem(
            IxDyn(self.vals[root.0].shape()),
            1.0,
        ));
        for i in (0..=root.0).rev() {
            let g = match by_id[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(step) = &self.steps[i] {
                let contribs = (step.back)(&g, &self.vals);
                debug_assert_eq!(contribs.len(), step.parents.len());
                for (p, c) in step.parents.iter().zip(contribs) {
                    match &mut by_id[*p] {
                        Some(acc) => *acc += &c,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            by_id[i] = Some(g);
        }
        Grads { by_id }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Source interpolation cell for output index `o` of `out_n` mapped into
/// `in_n` samples, half-pixel convention with border clamp.
fn src_coords(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_n - 1) as f64);
    if in_n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (s.floor() as usize).min(in_n - 2);
    (i0, i0 + 1, s - i0 as f64)
}

pub(crate) fn resize_bilinear_raw(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let (y0, y1, fy) = src_coords(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src_coords(ox, out_w, w);
            for ch in 0..c {
                out[[oy, ox, ch]] = (1.0 - fy) * (1.0 - fx) * img[[y0, x0, ch]]
                    + (1.0 - fy) * fx * img[[y0, x1, ch]]
                    + fy * (1.0 - fx) * img[[y1, x0, ch]]
                    + fy * fx * img[[y1, x1, ch]];
            }
        }
    }
    out
}

fn blur_sep_raw(img: &Array3<f64>, k: &[f64]) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let r = k.len() / 2;
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = x as isize + i as isize - r as isize;
                    if xx >= 0 && (xx as usize) < w {
                        acc += kv * img[[y, xx as usize, ch]];
                    }
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = y as isize + i as isize - r as isize;
                    if yy >= 0 && (yy as usize) < h {
                        acc += kv * tmp[[yy as usize, x, ch]];
                    }
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Interpolation cell + fractions for a sampled coordinate, with border
/// clamp. Returns whether the coordinate is strictly inside the x/y extents
/// (gradient is zero where the clamp is active).
fn sample_cell(
    u: &Array2<f64>,
    v: &Array2<f64>,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
) -> ((usize, usize), f64, f64, bool, bool) {
    let xs = u[[y, x]];
    let ys = v[[y, x]];
    let in_x = xs > 0.0 && xs < (w - 1) as f64 && w > 1;
    let in_y = ys > 0.0 && ys < (h - 1) as f64 && h > 1;
    let xc = xs.clamp(0.0, (w - 1) as f64);
    let yc = ys.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let fx = if w == 1 { 0.0 } else { xc - x0 as f64 };
    let fy = if h == 1 { 0.0 } else { yc - y0 as f64 };
    ((x0, y0), fx, fy, in_x, in_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Central finite-difference check of a scalar-valued graph builder
    /// against the analytic gradient of each input.
    fn check_grads(
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape, &[Tid]) -> Tid,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(s, &mut rng)).collect();

        let mut tape = Tape::new();
        let ids: Vec<Tid> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let eval = |perturbed: &[Arr]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<Tid> = perturbed.iter().map(|v| t.leaf(v.clone())).collect();
            let r = build(&mut t, &ids);
            t.val(r)[[]]
        };

        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[i], input.shape());
            for (j, _) in input.iter().enumerate() {
                let h = 1e-5;
                let mut plus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[j] += h;
                let mut minus = inputs.clone();
                minus[i].as_slice_mut().unwrap()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[j];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {i} elem {j}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        check_grads(
            &[&[3, 4], &[3, 4]],
            |t, ids| {
                let m = t.mul(ids[0], ids[1]);
                let s = t.sub(m, ids[1]);
                let a = t.add(s, ids[0]);
                let sc = t.scale(a, 0.7);
                t.mean_all(sc)
            },
            1,
            1e-6,
        );
        check_grads(
            &[&[2, 5]],
            |t, ids| {
                let r = t.gelu(ids[0]);
                let q = t.square(r);
                t.mean_all(q)
            },
            2,
            1e-6,
        );
        check_grads(
            &[&[4, 3]],
            |t, ids| {
                let sp = t.softplus(ids[0]);
                let l = t.log(sp);
                t.sum_all(l)
            },
            3,
            1e-6,
        );
        check_grads(
            &[&[3, 3], &[3, 3]],
            |t, ids| {
                let sq = t.square(ids[1]);
                let denom = t.add_scalar(sq, 2.0);
                let d = t.div(ids[0], denom);
                t.mean_all(d)
            },
            4,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_bias_grads() {
        check_grads(
            &[&[3, 4], &[4, 2], &[2]],
            |t, ids| {
                let mm = t.matmul(ids[0], ids[1]);
                let b = t.add_bias(mm, ids[2]);
                let r = t.relu(b);
                t.mean_all(r)
            },
            5,
            1e-6,
        );
        check_grads(
            &[&[3, 4]],
            |t, ids| {
                let tr = t.transpose(ids[0]);
                let mm = t.matmul(tr, ids[0]);
                t.sum_all(mm)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn softmax_layernorm_grads() {
        check_grads(
            &[&[3, 5]],
            |t, ids| {
                let s = t.row_softmax(ids[0]);
                let q = t.square(s);
                t.mean_all(q)
            },
            7,
            1e-6,
        );
        check_grads(
            &[&[3, 5]],
            |t, ids| {
                let s = t.row_log_softmax(ids[0]);
                let q = t.mul(s, s);
                t.mean_all(q)
            },
            8,
            1e-6,
        );
        check_grads(
            &[&[4, 6], &[6], &[6]],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-6);
                let q = t.square(y);
                t.mean_all(q)
            },
            9,
            1e-5,
        );
        check_grads(
            &[&[3, 4]],
            |t, ids| {
                let y = t.row_l2_normalize(ids[0], 1e-8);
                let q = t.square(y);
                t.sum_all(q)
            },
            10,
            1e-6,
        );
    }

    #[test]
    fn structural_grads() {
        check_grads(
            &[&[4, 6], &[2, 6]],
            |t, ids| {
                let a = t.slice_cols(ids[0], 1, 3);
                let b = t.slice_rows(ids[0], 0, 2);
                let c = t.concat_cols(&[a, a]);
                let d = t.concat_rows(&[b, ids[1]]);
                let e = t.gather_rows(d, &[0, 0, 3, 2]);
                let s1 = t.sum_all(c);
                let s2 = t.sum_all(e);
                let sq = t.square(s2);
                t.add(s1, sq)
            },
            11,
            1e-6,
        );
        check_grads(
            &[&[2, 3], &[3, 3], &[1, 4]],
            |t, ids| {
                let st = t.stitch_rows(ids[0], ids[1], &[1, 3], &[0, 2, 4]);
                let tl = t.tile_rows(ids[2], 3);
                let s1 = t.sum_all(st);
                let q = t.square(tl);
                let s2 = t.sum_all(q);
                t.add(s1, s2)
            },
            12,
            1e-6,
        );
        check_grads(
            &[&[2, 6]],
            |t, ids| {
                let r = t.reshape(ids[0], &[3, 4]);
                let q = t.square(r);
                t.mean_all(q)
            },
            13,
            1e-6,
        );
    }

    #[test]
    fn image_op_grads() {
        check_grads(
            &[&[4, 5, 2]],
            |t, ids| {
                let r = t.resize_bilinear(ids[0], 7, 3);
                let q = t.square(r);
                t.mean_all(q)
            },
            14,
            1e-6,
        );
        check_grads(
            &[&[5, 4, 1]],
            |t, ids| {
                let b = t.blur_separable(ids[0], &[0.25, 0.5, 0.25]);
                let q = t.square(b);
                t.mean_all(q)
            },
            15,
            1e-6,
        );
        check_grads(
            &[&[4, 4, 2]],
            |t, ids| {
                let c = t.crop3(ids[0], 1, 2, 0, 3);
                let q = t.square(c);
                t.sum_all(q)
            },
            16,
            1e-6,
        );
    }

    #[test]
    fn bilinear_sample_grads() {
        // coords strictly interior so the clamp subgradient does not bite
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = Array3::from_shape_fn((6, 7, 2), |_| rng.random_range(0.0..1.0));
        let u0 = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.7..5.2));
        let v0 = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.7..4.2));
        // keep away from exact integers where bilinear is non-smooth
        let nudge = |x: f64| {
            if (x - x.round()).abs() < 0.05 {
                x + 0.1
            } else {
                x
            }
        };
        let u0 = u0.mapv(nudge);
        let v0 = v0.mapv(nudge);

        let build = |t: &mut Tape, u: Tid, v: Tid, img: &Array3<f64>| {
            let s = t.bilinear_sample(img, u, v);
            let q = t.square(s);
            t.mean_all(q)
        };

        let mut tape = Tape::new();
        let u = tape.leaf(u0.clone().into_dyn());
        let v = tape.leaf(v0.clone().into_dyn());
        let root = build(&mut tape, u, v, &img);
        let grads = tape.backward(root);
        let du = grads.get_or_zeros(u, &[3, 4]);
        let dv = grads.get_or_zeros(v, &[3, 4]);

        let eval = |uu: &Array2<f64>, vv: &Array2<f64>| {
            let mut t = Tape::new();
            let u = t.leaf(uu.clone().into_dyn());
            let v = t.leaf(vv.clone().into_dyn());
            let r = build(&mut t, u, v, &img);
            t.val(r)[[]]
        };

        let h = 1e-6;
        for y in 0..3 {
            for x in 0..4 {
                let mut up = u0.clone();
                up[[y, x]] += h;
                let mut um = u0.clone();
                um[[y, x]] -= h;
                let fd = (eval(&up, &v0) - eval(&um, &v0)) / (2.0 * h);
                assert!(
                    (du[[y, x]] - fd).abs() < 1e-5,
                    "du mismatch at ({y},{x}): {} vs {}",
                    du[[y, x]],
                    fd
                );
                let mut vp = v0.clone();
                vp[[y, x]] += h;
                let mut vm = v0.clone();
                vm[[y, x]] -= h;
                let fd = (eval(&u0, &vp) - eval(&u0, &vm)) / (2.0 * h);
                assert!(
                    (dv[[y, x]] - fd).abs() < 1e-5,
                    "dv mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn repeated_parent_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[3.0]).into_dyn());
        let sq = t.mul(x, x);
        let root = t.sum_all(sq);
        let g = t.backward(root);
        assert_eq!(g.get(x).unwrap()[[0]], 6.0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f64);
        let same = resize_bilinear_raw(&img, 4, 4);
        assert_eq!(img, same);
        let c = Array3::from_elem((5, 3, 2), 0.3);
        let r = resize_bilinear_raw(&c, 9, 7);
        assert!(r.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[0.1, 2.0, -1.0], [5.0, 5.0, 5.0]]).into_dyn());
        let s = t.row_softmax(x);
        let v = as2(t.val(s));
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
