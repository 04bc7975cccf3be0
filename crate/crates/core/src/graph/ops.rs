//! Elementwise, reduction, and tensor-layout operations on the tape.

use super::{Graph, Scalar, Var};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

impl<F: Scalar> Graph<F> {
    fn value_owned(&self, v: Var) -> ArrayD<F> {
        self.value(v).to_owned()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value_owned(a);
        let bv = self.value_owned(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let y = &av + &bv;
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value_owned(a);
        let bv = self.value_owned(b);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let y = &av - &bv;
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.mapv(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value_owned(a);
        let bv = self.value_owned(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let y = &av * &bv;
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g, need| {
                vec![need[0].then(|| g * &bv), need[1].then(|| g * &av)]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let y = self.value_owned(a).mapv(|v| -v);
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g.mapv(|v| -v))]),
        )
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let y = &self.value_owned(a) * c;
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g * c)]),
        )
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let y = &self.value_owned(a) + c;
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g.clone())]),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let y = self.value_owned(a).mapv(F::exp);
        let yc = y.clone();
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g * &yc)]),
        )
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&self, a: Var) -> Var {
        let av = self.value_owned(a);
        let y = av.mapv(F::ln);
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| *d = *d / x);
                    da
                })]
            }),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let av = self.value_owned(a);
        let y = &av * &av;
        let two = F::from_f64(2.0);
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| vec![need[0].then(|| g * &av * two)]),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let y = self.value_owned(a).mapv(stable_sigmoid);
        let yc = y.clone();
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut da = g.clone();
                    da.zip_mut_with(&yc, |d, &s| *d = *d * s * (F::one() - s));
                    da
                })]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value_owned(a);
        let y = av.mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| {
                        if x <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    da
                })]
            }),
        )
    }

    /// Elementwise clamp. Gradient is passed through strictly inside
    /// `(lo, hi)` and zero elsewhere.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        assert!(lo < hi, "clamp: empty interval");
        let av = self.value_owned(a);
        let y = av.mapv(|v| num_traits::clamp(v, lo, hi));
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut da = g.clone();
                    da.zip_mut_with(&av, |d, &x| {
                        if x <= lo || x >= hi {
                            *d = F::zero();
                        }
                    });
                    da
                })]
            }),
        )
    }

    /// Full reduction to a 0-dim scalar node.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.raw_dim();
        let y = ArrayD::from_elem(IxDyn(&[]), av.sum());
        drop(av);
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| {
                let gs = *g.iter().next().unwrap();
                vec![need[0].then(|| ArrayD::from_elem(shape.clone(), gs))]
            }),
        )
    }

    /// Fused `sum(a ⊙ b)`; the workhorse of masked log-density sums.
    pub fn mul_sum(&self, a: Var, b: Var) -> Var {
        let av = self.value_owned(a);
        let bv = self.value_owned(b);
        assert_eq!(av.shape(), bv.shape(), "mul_sum: shape mismatch");
        let total: F = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).sum();
        let y = ArrayD::from_elem(IxDyn(&[]), total);
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g, need| {
                let gs = *g.iter().next().unwrap();
                vec![need[0].then(|| &bv * gs), need[1].then(|| &av * gs)]
            }),
        )
    }

    /// Mean over all elements.
    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Adds a per-channel bias `b` of shape `[C]` to a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Var {
        let xv = self.value_owned(x);
        let bv = self.value_owned(b);
        assert_eq!(xv.ndim(), 3, "add_channel_bias: expected [C,H,W]");
        assert_eq!(bv.ndim(), 1, "add_channel_bias: bias must be [C]");
        let c = xv.shape()[0];
        assert_eq!(bv.len(), c, "add_channel_bias: channel mismatch");
        let mut y = xv;
        for (mut plane, &bias) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            plane += bias;
        }
        self.push_op(
            y,
            vec![x, b],
            Box::new(move |g, need| {
                let dx = need[0].then(|| g.clone());
                let db = need[1].then(|| {
                    let sums: Vec<F> = g.axis_iter(Axis(0)).map(|plane| plane.sum()).collect();
                    ArrayD::from_shape_vec(IxDyn(&[sums.len()]), sums).unwrap()
                });
                vec![dx, db]
            }),
        )
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: empty input");
        let values: Vec<ArrayD<F>> = parts.iter().map(|&p| self.value_owned(p)).collect();
        let (h, w) = (values[0].shape()[1], values[0].shape()[2]);
        let mut channels = Vec::with_capacity(values.len());
        for v in &values {
            assert_eq!(v.ndim(), 3, "concat_channels: expected [C,H,W]");
            assert_eq!((v.shape()[1], v.shape()[2]), (h, w), "spatial mismatch");
            channels.push(v.shape()[0]);
        }
        let total: usize = channels.iter().sum();
        let mut y = ArrayD::zeros(IxDyn(&[total, h, w]));
        let mut offset = 0;
        for v in &values {
            let c = v.shape()[0];
            y.slice_axis_mut(Axis(0), Slice::from(offset..offset + c))
                .assign(v);
            offset += c;
        }
        self.push_op(
            y,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut out = Vec::with_capacity(channels.len());
                let mut offset = 0;
                for (i, &c) in channels.iter().enumerate() {
                    out.push(need[i].then(|| {
                        g.slice_axis(Axis(0), Slice::from(offset..offset + c))
                            .to_owned()
                    }));
                    offset += c;
                }
                out
            }),
        )
    }

    /// Multiplies every channel of a `[C, H, W]` tensor by an `[H, W]` map.
    pub fn mul_spatial(&self, x: Var, m: Var) -> Var {
        let xv = self.value_owned(x);
        let mv = self.value_owned(m);
        assert_eq!(xv.ndim(), 3, "mul_spatial: expected [C,H,W]");
        assert_eq!(
            &xv.shape()[1..],
            mv.shape(),
            "mul_spatial: spatial mismatch"
        );
        let mut y = xv.clone();
        for mut plane in y.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&mv, |p, &m| *p = *p * m);
        }
        self.push_op(
            y,
            vec![x, m],
            Box::new(move |g, need| {
                let dx = need[0].then(|| {
                    let mut dx = g.clone();
                    for mut plane in dx.axis_iter_mut(Axis(0)) {
                        plane.zip_mut_with(&mv, |p, &m| *p = *p * m);
                    }
                    dx
                });
                let dm = need[1].then(|| {
                    let mut dm = ArrayD::zeros(mv.raw_dim());
                    for (gp, xp) in g.axis_iter(Axis(0)).zip(xv.axis_iter(Axis(0))) {
                        dm.zip_mut_with(&(&gp * &xp), |d, &v| *d = *d + v);
                    }
                    dm
                });
                vec![dx, dm]
            }),
        )
    }

    /// Non-overlapping average pooling with window `k` on a `[C, H, W]`
    /// tensor; `H` and `W` must be divisible by `k`.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let xv = self.value_owned(x);
        assert_eq!(xv.ndim(), 3, "avg_pool: expected [C,H,W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % k == 0 && w % k == 0, "avg_pool: size not divisible");
        let (ho, wo) = (h / k, w / k);
        let inv = F::one() / F::from_f64((k * k) as f64);
        let xs = xv.as_slice().expect("avg_pool: standard layout");
        let mut y = ArrayD::zeros(IxDyn(&[c, ho, wo]));
        {
            let ys = y.as_slice_mut().unwrap();
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = F::zero();
                        for dy in 0..k {
                            let base = (ci * h + oy * k + dy) * w + ox * k;
                            for dx in 0..k {
                                acc = acc + xs[base + dx];
                            }
                        }
                        ys[(ci * ho + oy) * wo + ox] = acc * inv;
                    }
                }
            }
        }
        self.push_op(
            y,
            vec![x],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    let dxs = dx.as_slice_mut().unwrap();
                    let gs = g.as_slice().expect("avg_pool grad: standard layout");
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gs[(ci * ho + oy) * wo + ox] * inv;
                                for dy in 0..k {
                                    let base = (ci * h + oy * k + dy) * w + ox * k;
                                    for dx_i in 0..k {
                                        dxs[base + dx_i] = dxs[base + dx_i] + gv;
                                    }
                                }
                            }
                        }
                    }
                    dx
                })]
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value_owned(a);
        let old_shape: Vec<usize> = av.shape().to_vec();
        let new_len: usize = shape.iter().product();
        assert_eq!(av.len(), new_len, "reshape: element count mismatch");
        let y = av.into_shape_with_order(IxDyn(shape)).unwrap();
        self.push_op(
            y,
            vec![a],
            Box::new(move |g, need| {
                vec![need[0].then(|| {
                    g.to_owned()
                        .into_shape_with_order(IxDyn(&old_shape))
                        .unwrap()
                })]
            }),
        )
    }

    /// Sums a list of scalar nodes.
    pub fn sum_scalars(&self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "sum_scalars: empty input");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }
}

fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
