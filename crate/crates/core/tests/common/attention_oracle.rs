//! Naive per-token reference for group attention, shared with the CLI acceptance suite.
#![allow(dead_code)]

use evit_core::attention::GroupAttention;
use evit_core::layers::ConvBn;
use evit_core::{AttentionKind, ParamStore};
use evit_tensor::Tensor;

/// Dense `[B, C, H, W]` buffer in f64.
#[derive(Clone)]
pub struct A4 {
    pub d: [usize; 4],
    pub v: Vec<f64>,
}

impl A4 {
    pub fn zeros(d: [usize; 4]) -> A4 {
        A4 { d, v: vec![0.0; d.iter().product()] }
    }

    pub fn from(t: &Tensor<f32>) -> A4 {
        let d = t.dims();
        A4 {
            d: [d[0], d[1], d[2], d[3]],
            v: t.to_f64_vec(),
        }
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.d[1] + c) * self.d[2] + y) * self.d[3] + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, val: f64) {
        let i = ((b * self.d[1] + c) * self.d[2] + y) * self.d[3] + x;
        self.v[i] = val;
    }

    pub fn channels(&self, start: usize, len: usize) -> A4 {
        let mut out = A4::zeros([self.d[0], len, self.d[2], self.d[3]]);
        for b in 0..self.d[0] {
            for c in 0..len {
                for y in 0..self.d[2] {
                    for x in 0..self.d[3] {
                        out.set(b, c, y, x, self.at(b, start + c, y, x));
                    }
                }
            }
        }
        out
    }

    pub fn add(&self, o: &A4) -> A4 {
        A4 {
            d: self.d,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
        }
    }
}

pub fn conv_bn(store: &ParamStore<f32>, l: &ConvBn, x: &A4) -> A4 {
    let w = store.tensor(l.weight).to_f64_vec();
    let [bn, _, h, wd] = x.d;
    let (k, s, p, g) = (l.kernel, l.stride, l.pad as isize, l.groups);
    let (ho, wo) = ((h + 2 * l.pad - k) / s + 1, (wd + 2 * l.pad - k) / s + 1);
    let (cin_g, cout_g) = (l.cin / g, l.cout / g);
    let mut out = A4::zeros([bn, l.cout, ho, wo]);
    for b in 0..bn {
        for co in 0..l.cout {
            let grp = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p;
                                let ix = (ox * s + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * cin_g + ci) * k + ky) * k + kx]
                                    * x.at(b, grp * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(bias) = l.bias {
                        acc += store.tensor(bias).to_f64_vec()[co];
                    }
                    if let Some(n) = &l.bn {
                        let get = |id| store.tensor(id).to_f64_vec()[co];
                        acc = (acc - get(n.running_mean)) / (get(n.running_var) + n.eps).sqrt() * get(n.gamma)
                            + get(n.beta);
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Per-token double loop over queries and keys. Returns the output and each head's maps.
pub fn naive_attention(store: &ParamStore<f32>, a: &GroupAttention, x: &A4) -> (A4, Vec<Vec<f64>>) {
    let [bn, _, h, w] = x.d;
    let n = h * w;
    let scale = 1.0 / (a.qk_dim as f64).sqrt();
    let mut outs: Vec<A4> = Vec::new();
    let mut maps = Vec::new();
    for (j, head) in a.heads.iter().enumerate() {
        let input = match a.kind {
            AttentionKind::Full => x.clone(),
            AttentionKind::Split => x.channels(j * a.head_dim, a.head_dim),
            AttentionKind::Cascaded => {
                let s = x.channels(j * a.head_dim, a.head_dim);
                if j == 0 { s } else { s.add(&outs[j - 1]) }
            }
        };
        let q = conv_bn(store, &head.q_dw, &conv_bn(store, &head.q, &input));
        let k = conv_bn(store, &head.k, &input);
        let v = conv_bn(store, &head.v, &input);
        let mut out = A4::zeros([bn, a.head_dim, h, w]);
        let mut map = vec![0.0; bn * n * n];
        for b in 0..bn {
            for i in 0..n {
                let (iy, ix) = (i / w, i % w);
                let mut logits = vec![0.0; n];
                for (t, l) in logits.iter_mut().enumerate() {
                    let (ty, tx) = (t / w, t % w);
                    *l = (0..a.qk_dim).map(|c| q.at(b, c, iy, ix) * k.at(b, c, ty, tx)).sum::<f64>() * scale;
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..n {
                    map[(b * n + i) * n + t] = e[t] / z;
                }
                for c in 0..a.head_dim {
                    let val = (0..n).map(|t| e[t] / z * v.at(b, c, t / w, t % w)).sum();
                    out.set(b, c, iy, ix, val);
                }
            }
        }
        outs.push(out);
        maps.push(map);
    }
    let mut cat = A4::zeros([bn, a.dim, h, w]);
    for (j, o) in outs.iter().enumerate() {
        for b in 0..bn {
            for c in 0..a.head_dim {
                for y in 0..h {
                    for xx in 0..w {
                        cat.set(b, j * a.head_dim + c, y, xx, o.at(b, c, y, xx));
                    }
                }
            }
        }
    }
    (conv_bn(store, &a.proj, &cat), maps)
}
