use crate::autograd::Var;
use crate::tensor::{matmul, Scalar, Tensor};

/// Exponents in the differential weight are clamped to `[-20, 20]`.
pub const ALPHA_EXP_CLAMP: f64 = 20.0;

/// Channel Gram matrix: `(B, C, H, W) x (B, D, H, W) -> (B, C, D)` with
/// entries `sum_p q[c, p] * k[d, p]`.
pub fn channel_gram<T: Scalar>(q: &Var<T>, k: &Var<T>) -> Var<T> {
    let (b, c, h, w) = q.value().dims4();
    let (kb, d, kh, kw) = k.value().dims4();
    assert_eq!((b, h, w), (kb, kh, kw), "gram operands disagree");
    let n = h * w;
    let mut out = Tensor::zeros(&[b, c, d]);
    for bi in 0..b {
        matmul(
            c,
            n,
            d,
            &q.value().data()[bi * c * n..],
            false,
            &k.value().data()[bi * d * n..],
            true,
            &mut out.data_mut()[bi * c * d..(bi + 1) * c * d],
            false,
        );
    }
    Var::from_op(
        out,
        &[q, k],
        Box::new(move |args| {
            let (qd, kd, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let gq = args.needs[0].then(|| {
                let mut g = Tensor::zeros(&[b, c, h, w]);
                for bi in 0..b {
                    matmul(
                        c,
                        d,
                        n,
                        &gd[bi * c * d..],
                        false,
                        &kd[bi * d * n..],
                        false,
                        &mut g.data_mut()[bi * c * n..(bi + 1) * c * n],
                        false,
                    );
                }
                g
            });
            let gk = args.needs[1].then(|| {
                let mut g = Tensor::zeros(&[b, d, h, w]);
                for bi in 0..b {
                    matmul(
                        d,
                        c,
                        n,
                        &gd[bi * c * d..],
                        true,
                        &qd[bi * c * n..],
                        false,
                        &mut g.data_mut()[bi * d * n..(bi + 1) * d * n],
                        false,
                    );
                }
                g
            });
            vec![gq, gk]
        }),
    )
}

/// Applies `(B, C, D)` attention to values `(B, D, H, W)`, giving `(B, C, H, W)`.
pub fn attend<T: Scalar>(att: &Var<T>, v: &Var<T>) -> Var<T> {
    let (b, d, h, w) = v.value().dims4();
    let s = att.shape();
    assert!(s.len() == 3 && s[0] == b && s[2] == d, "attention {s:?} vs values {:?}", v.shape());
    let c = s[1];
    let n = h * w;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        matmul(
            c,
            d,
            n,
            &att.value().data()[bi * c * d..],
            false,
            &v.value().data()[bi * d * n..],
            false,
            &mut out.data_mut()[bi * c * n..(bi + 1) * c * n],
            false,
        );
    }
    Var::from_op(
        out,
        &[att, v],
        Box::new(move |args| {
            let (ad, vd, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let ga = args.needs[0].then(|| {
                let mut g = Tensor::zeros(&[b, c, d]);
                for bi in 0..b {
                    matmul(
                        c,
                        n,
                        d,
                        &gd[bi * c * n..],
                        false,
                        &vd[bi * d * n..],
                        true,
                        &mut g.data_mut()[bi * c * d..(bi + 1) * c * d],
                        false,
                    );
                }
                g
            });
            let gv = args.needs[1].then(|| {
                let mut g = Tensor::zeros(&[b, d, h, w]);
                for bi in 0..b {
                    matmul(
                        d,
                        c,
                        n,
                        &ad[bi * c * d..],
                        true,
                        &gd[bi * c * n..],
                        false,
                        &mut g.data_mut()[bi * d * n..(bi + 1) * d * n],
                        false,
                    );
                }
                g
            });
            vec![ga, gv]
        }),
    )
}

/// Softmax over the last axis. Entries whose `keep` flag is false are
/// excluded from the normalization and come out as exactly zero.
pub fn softmax_rows<T: Scalar>(x: &Var<T>, keep: Option<&[bool]>) -> Var<T> {
    let shape = x.shape().to_vec();
    let n = *shape.last().expect("softmax on a 0-d tensor");
    let xd = x.value().data();
    if let Some(k) = keep {
        assert_eq!(k.len(), xd.len(), "mask length");
    }
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut out = Tensor::zeros(&shape);
    {
        let od = out.data_mut();
        for r in 0..xd.len() / n {
            let row = r * n..(r + 1) * n;
            let max = row
                .clone()
                .filter(|&i| kept(i))
                .map(|i| xd[i])
                .fold(T::neg_infinity(), |a, b| a.max(b));
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for i in row.clone() {
                if kept(i) {
                    let e = (xd[i] - max).exp();
                    od[i] = e;
                    total += e;
                }
            }
            for i in row {
                od[i] /= total;
            }
        }
    }
    Var::from_op(
        out,
        &[x],
        Box::new(move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut gx = Tensor::zeros(&shape);
            let gm = gx.data_mut();
            for r in 0..y.len() / n {
                let row = r * n..(r + 1) * n;
                let dot: T = row.clone().map(|i| g[i] * y[i]).sum();
                for i in row {
                    gm[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Replaces entries whose `keep` flag is false with `value`.
pub fn fill_masked<T: Scalar>(x: &Var<T>, keep: &[bool], value: T) -> Var<T> {
    assert_eq!(keep.len(), x.value().len(), "mask length");
    let keep = keep.to_vec();
    let mut out = x.value().clone();
    for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
        if !k {
            *v = value;
        }
    }
    Var::from_op(
        out,
        &[x],
        Box::new(move |args| {
            let mut g = args.grad.clone();
            for (v, &k) in g.data_mut().iter_mut().zip(&keep) {
                if !k {
                    *v = T::zero();
                }
            }
            vec![Some(g)]
        }),
    )
}

/// `exp(q1 * k1) - exp(q2 * k2) + init`, each product clamped to
/// `[-ALPHA_EXP_CLAMP, ALPHA_EXP_CLAMP]` before exponentiation.
pub fn alpha_value<T: Scalar>(q1: &Var<T>, k1: &Var<T>, q2: &Var<T>, k2: &Var<T>, init: f64) -> Var<T> {
    let s = |v: &Var<T>| {
        assert_eq!(v.value().len(), 1, "alpha factors are scalars");
        v.value().data()[0]
    };
    let (a, b, c, d) = (s(q1), s(k1), s(q2), s(k2));
    let lim = T::c(ALPHA_EXP_CLAMP);
    let clamp = move |p: T| p.max(-lim).min(lim);
    let inside = move |p: T| p > -lim && p < lim;
    let (p1, p2) = (a * b, c * d);
    let (e1, e2) = (clamp(p1).exp(), clamp(p2).exp());
    let value = Tensor::scalar(e1 - e2 + T::c(init));
    Var::from_op(
        value,
        &[q1, k1, q2, k2],
        Box::new(move |args| {
            let g = args.grad.data()[0];
            let d1 = if inside(p1) { g * e1 } else { T::zero() };
            let d2 = if inside(p2) { -g * e2 } else { T::zero() };
            [d1 * b, d1 * a, d2 * d, d2 * c]
                .into_iter()
                .zip(&args.inputs)
                .map(|(v, t)| Some(Tensor::scalar(v).reshaped(t.shape())))
                .collect()
        }),
    )
}
