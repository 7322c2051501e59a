//! Dense, loop-by-loop reference implementations used as test oracles.
//! They share no code with the library beyond reading parameter values.
#![allow(dead_code)]

use aibnet_core::blocks_frequency::{HfsBlockParams, MaskMode};
use aibnet_core::blocks_spatial::{Depthwise, Pointwise, SfdhBlockParams, SfemParams};
use aibnet_core::{ParamId, ParamStore, Tensor};

pub mod toy;

/// One feature map `(C, H, W)` in plain storage.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        assert_eq!(s[0], 1, "oracles take a single image");
        Map {
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().to_vec(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channels(&self, start: usize, len: usize) -> Map {
        Map {
            c: len,
            h: self.h,
            w: self.w,
            v: self.v[start * self.hw()..(start + len) * self.hw()].to_vec(),
        }
    }

    fn add(&self, o: &Map) -> Map {
        Map {
            v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
            ..self.clone()
        }
    }
}

fn get(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn pointwise(store: &ParamStore<f64>, p: &Pointwise, x: &Map) -> Map {
    let w = get(store, p.weight);
    let b = p.bias.map(|b| get(store, b));
    let cout = w.len() / x.c;
    let mut v = vec![0.0; cout * x.hw()];
    for o in 0..cout {
        for px in 0..x.hw() {
            let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
            for i in 0..x.c {
                acc += w[o * x.c + i] * x.v[i * x.hw() + px];
            }
            v[o * x.hw() + px] = acc;
        }
    }
    Map { c: cout, v, ..*x }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n as isize {
        i = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
    }
    i as usize
}

/// Per-channel 3x3 (or k x k) correlation with zero or reflect padding.
pub fn depthwise(weights: &[f64], bias: Option<&[f64]>, k: usize, x: &Map, reflect_pad: bool) -> Map {
    let r = (k / 2) as isize;
    let mut v = vec![0.0; x.v.len()];
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias.map_or(0.0, |b| b[c]);
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = y as isize + dy as isize - r;
                        let sx = xx as isize + dx as isize - r;
                        let val = if reflect_pad {
                            x.at(c, reflect(sy, x.h), reflect(sx, x.w))
                        } else if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                            0.0
                        } else {
                            x.at(c, sy as usize, sx as usize)
                        };
                        acc += weights[(c * k + dy) * k + dx] * val;
                    }
                }
                v[(c * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    Map { v, ..*x }
}

pub fn depthwise_block(store: &ParamStore<f64>, p: &Depthwise, x: &Map) -> Map {
    depthwise(&get(store, p.weight), Some(&get(store, p.bias)), 3, x, false)
}

/// Textbook two-pass layer norm over channels at every location.
pub fn layer_norm(x: &Map, scale: &[f64], shift: &[f64], eps: f64) -> Map {
    let mut v = vec![0.0; x.v.len()];
    for px in 0..x.hw() {
        let vals: Vec<f64> = (0..x.c).map(|c| x.v[c * x.hw() + px]).collect();
        let mean = vals.iter().sum::<f64>() / x.c as f64;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.c as f64;
        for c in 0..x.c {
            v[c * x.hw() + px] = (vals[c] - mean) / (var + eps).sqrt() * scale[c] + shift[c];
        }
    }
    Map { v, ..*x }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `Q K^T` over flattened spatial positions: a `C x D` matrix.
pub fn gram(q: &Map, k: &Map) -> Vec<Vec<f64>> {
    (0..q.c)
        .map(|i| {
            (0..k.c)
                .map(|j| (0..q.hw()).map(|p| q.v[i * q.hw() + p] * k.v[j * k.hw() + p]).sum())
                .collect()
        })
        .collect()
}

pub fn apply_attention(att: &[Vec<f64>], v: &Map) -> Map {
    let mut out = vec![0.0; att.len() * v.hw()];
    for (i, row) in att.iter().enumerate() {
        for p in 0..v.hw() {
            out[i * v.hw() + p] = row.iter().enumerate().map(|(j, a)| a * v.v[j * v.hw() + p]).sum();
        }
    }
    Map {
        c: att.len(),
        h: v.h,
        w: v.w,
        v: out,
    }
}

pub fn alpha(store: &ParamStore<f64>, p: &SfemParams) -> f64 {
    let s = |id| store.get(id).data()[0];
    let clamp = |v: f64| v.clamp(-20.0, 20.0);
    clamp(s(p.alpha_q1) * s(p.alpha_k1)).exp() - clamp(s(p.alpha_q2) * s(p.alpha_k2)).exp() + p.alpha_init
}

/// The differential attention module, `alpha_override` replacing the
/// parameterized weight when given.
pub fn sfem(store: &ParamStore<f64>, p: &SfemParams, x: &Map, alpha_override: Option<f64>) -> Map {
    let proj = depthwise_block(store, &p.dw, &pointwise(store, &p.proj_in, x));
    let part = proj.c / 5;
    let (q1, k1, q2, k2, v) = (
        proj.channels(0, part),
        proj.channels(part, part),
        proj.channels(2 * part, part),
        proj.channels(3 * part, part),
        proj.channels(4 * part, part),
    );
    let t = store.get(p.beta).data()[0].abs() + 1e-6;
    let att = |q: &Map, k: &Map| -> Vec<Vec<f64>> {
        gram(q, k)
            .into_iter()
            .map(|row| softmax(&row.iter().map(|s| s / t).collect::<Vec<_>>()))
            .collect()
    };
    let (a1, a2) = (att(&q1, &k1), att(&q2, &k2));
    let al = alpha_override.unwrap_or_else(|| alpha(store, p));
    let diff: Vec<Vec<f64>> = a1
        .iter()
        .zip(&a2)
        .map(|(r1, r2)| r1.iter().zip(r2).map(|(a, b)| a - al * b).collect())
        .collect();
    pointwise(store, &p.proj_out, &apply_attention(&diff, &v))
}

/// Straight-line evaluation of the block:
/// `X' = x + SCA(LN x) + W SFEM(LN x)`, `out = X' + FFN(LN X')`.
pub fn sfdh(store: &ParamStore<f64>, p: &SfdhBlockParams, x: &Map) -> Map {
    let ln = |m: &Map, ids: (ParamId, ParamId)| layer_norm(m, &get(store, ids.0), &get(store, ids.1), 1e-6);
    let xn = ln(x, p.ln1);
    let pooled = Map {
        h: 1,
        w: 1,
        v: (0..xn.c)
            .map(|c| xn.v[c * xn.hw()..(c + 1) * xn.hw()].iter().sum::<f64>() / xn.hw() as f64)
            .collect(),
        ..xn
    };
    let gate = pointwise(store, &p.sca.conv, &pooled);
    let sca = Map {
        v: xn.v.iter().enumerate().map(|(i, a)| a * gate.v[i / xn.hw()]).collect(),
        ..xn.clone()
    };
    let mut mid = x.add(&sca);
    if let Some(b) = &p.sfem {
        let e = sfem(store, &b.sfem, &xn, None);
        let wf = store.get(b.w_fuse).data()[0];
        mid = mid.add(&Map {
            v: e.v.iter().map(|a| a * wf).collect(),
            ..e
        });
    }
    let h = depthwise_block(store, &p.ffn_dw, &pointwise(store, &p.ffn_in, &ln(&mid, p.ln2)));
    let half = h.c / 2;
    let gated = Map {
        c: half,
        v: (0..half * h.hw()).map(|i| h.v[i] * h.v[i + half * h.hw()]).collect(),
        ..h
    };
    mid.add(&pointwise(store, &p.ffn_out, &gated))
}

/// Indices of the `keep` largest entries; ties resolved toward lower indices.
pub fn top_indices(row: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut kept = idx[..keep].to_vec();
    kept.sort();
    kept
}

pub fn kept_count(i: usize, c: usize) -> usize {
    // ceil(i / (i + 1) * c)
    (i * c + i) / (i + 1)
}

/// The high-frequency selection block: sort, mask, softmax, fuse by hand.
pub fn hfs(store: &ParamStore<f64>, p: &HfsBlockParams, x: &Map) -> Map {
    let n_m = p.lambdas.len();
    if n_m == 0 {
        return x.clone();
    }
    let logits = get(store, p.decoupler.logits);
    let k = p.decoupler.kernel;
    let filters: Vec<f64> = logits.chunks(k * k).flat_map(softmax).collect();
    let low = depthwise(&filters, None, k, x, true);
    let high = Map {
        v: x.v.iter().zip(&low.v).map(|(a, b)| a - b).collect(),
        ..x.clone()
    };
    let qkv = depthwise_block(store, &p.dw, &pointwise(store, &p.proj_in, &high));
    let c = x.c;
    let (q, kk, v) = (qkv.channels(0, c), qkv.channels(c, c), qkv.channels(2 * c, c));
    let t = store.get(p.beta).data()[0].abs() + 1e-6;
    let scores: Vec<Vec<f64>> = gram(&q, &kk)
        .into_iter()
        .map(|r| r.into_iter().map(|s| s / t).collect())
        .collect();
    let mut fused = vec![vec![0.0; c]; c];
    for (i, &lid) in p.lambdas.iter().enumerate() {
        let lambda = store.get(lid).data()[0];
        let keep = kept_count(i + 1, c);
        for (r, row) in scores.iter().enumerate() {
            let kept = top_indices(row, keep);
            let m: Vec<f64> = match p.mask_mode {
                MaskMode::Exclude => {
                    let sm = softmax(&kept.iter().map(|&j| row[j]).collect::<Vec<_>>());
                    let mut full = vec![0.0; c];
                    for (&j, s) in kept.iter().zip(sm) {
                        full[j] = s;
                    }
                    full
                }
                MaskMode::ZeroFill => {
                    softmax(&(0..c).map(|j| if kept.contains(&j) { row[j] } else { 0.0 }).collect::<Vec<_>>())
                }
            };
            for j in 0..c {
                fused[r][j] += lambda * m[j];
            }
        }
    }
    x.add(&apply_attention(&fused, &v))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Overwrites every parameter with uniform noise around its current value.
pub fn jitter(store: &mut ParamStore<f64>, amount: f64, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
