//! Brute-force reference implementations in plain f64 loops, and drivers
//! that sweep every small shape and return the worst absolute deviation of
//! the graph ops from them.

#![allow(dead_code)]

use ovseg_core::graph::Graph;
use ovseg_core::metrics::miou;
use ovseg_core::tensor::Tensor;
use ovseg_core::{alignment, decoder, vlm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// `out[b,t,y,x] = bias[b,t] + Σ_c Σ_i Σ_j k[b,t,c,i,j] · x[b,c,y+i−K/2,x+j−K/2]`,
/// zero outside the image.
pub fn correlate(x: &Tensor, k: &Tensor, bias: &Tensor) -> Vec<f64> {
    let [b, c, h, w] = x.shape()[..] else {
        panic!()
    };
    let (t, ks) = (k.shape()[1], k.shape()[3]);
    let r = (ks / 2) as isize;
    let mut out = Vec::new();
    for bi in 0..b {
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.at(&[bi, ti]) as f64;
                    for ci in 0..c {
                        for i in 0..ks {
                            for j in 0..ks {
                                let (sy, sx) =
                                    (y as isize + i as isize - r, xx as isize + j as isize - r);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += k.at(&[bi, ti, ci, i, j]) as f64
                                        * x.at(&[bi, ci, sy as usize, sx as usize]) as f64;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Sweeps `H, W ≤ 5`, `K ∈ {1, 3}`, `T ≤ 4`, `C ≤ 2`, `B ≤ 2`.
pub fn conv_max_err(depthwise: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for b in 1..=2 {
        for c in 1..=2 {
            for t in 1..=4 {
                for k in [1, 3] {
                    for h in 1..=5 {
                        for w in 1..=5 {
                            let x = random(&mut rng, &[b, c, h, w]);
                            let kern = random(&mut rng, &[b, t, c, k, k]);
                            let bias = random(&mut rng, &[b, t]);
                            let mut g = Graph::<f32>::new();
                            let (xv, kv, bv) =
                                (g.constant(&x), g.constant(&kern), g.constant(&bias));
                            let y = if depthwise {
                                g.depthwise_conv2d(xv, kv, bv)
                            } else {
                                g.dyn_conv2d(xv, kv, bv)
                            }
                            .unwrap();
                            worst = worst.max(max_diff(g.value(y), &correlate(&x, &kern, &bias)));
                        }
                    }
                }
            }
        }
    }
    worst
}

/// Half-pixel-centre source coordinate and its two taps.
fn taps(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == n_out {
        return (o, o, 0.0);
    }
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape()[..] else {
        panic!()
    };
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                let (y0, y1, fy) = taps(y, h, oh);
                for xx in 0..ow {
                    let (x0, x1, fx) = taps(xx, w, ow);
                    let v = |yy: usize, xq: usize| x.at(&[ni, ci, yy, xq]) as f64;
                    out.push(
                        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                            + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)),
                    );
                }
            }
        }
    }
    out
}

/// Every input and output size pair in `1..=5` on both axes.
pub fn bilinear_max_err() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for h in 1..=5 {
        for w in 1..=5 {
            let x = random(&mut rng, &[1, 2, h, w]);
            for oh in 1..=5 {
                for ow in 1..=5 {
                    let mut g = Graph::<f32>::new();
                    let xv = g.constant(&x);
                    let y = g.bilinear_resize(xv, oh, ow).unwrap();
                    worst = worst.max(max_diff(g.value(y), &bilinear(&x, oh, ow)));
                }
            }
        }
    }
    worst
}

pub fn softmax(x: &Tensor, axis: usize) -> Vec<f64> {
    let s = x.shape();
    let inner: usize = s[axis + 1..].iter().product();
    let n = s[axis];
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let (outer, a, rest) = (i / (n * inner), (i / inner) % n, i % inner);
        let at = |j: usize| x.data()[(outer * n + j) * inner + rest] as f64;
        let z: f64 = (0..n).map(|j| at(j).exp()).sum();
        *o = at(a).exp() / z;
    }
    out
}

/// Every 3-D shape with sides ≤ 4, along each axis, with logits up to ±10.
pub fn softmax_max_err() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for a in 1..=4 {
        for b in 1..=4 {
            for c in 1..=4 {
                let x = Tensor::from_fn(&[a, b, c], |_| rng.random_range(-10.0..10.0));
                for axis in 0..3 {
                    let mut g = Graph::<f32>::new();
                    let xv = g.constant(&x);
                    let y = g.softmax(xv, axis).unwrap();
                    worst = worst.max(max_diff(g.value(y), &softmax(&x, axis)));
                }
            }
        }
    }
    worst
}

/// Row `i` of `a` against row `i` of `b`: `[N, d] × [N, d] → [N]`.
pub fn cosine(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = a.shape()[1];
    (0..a.shape()[0])
        .map(|i| {
            let u = &a.data()[i * d..(i + 1) * d];
            let v = &b.data()[i * d..(i + 1) * d];
            let dot: f64 = u.iter().zip(v).map(|(&x, &y)| x as f64 * y as f64).sum();
            let nu = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nv = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (nu * nv)
        })
        .collect()
}

pub fn cosine_max_err() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for n in 1..=4 {
        for d in 1..=5 {
            let (a, b) = (random(&mut rng, &[n, d]), random(&mut rng, &[n, d]));
            let got = vlm::cosine_similarity(&a, &b).unwrap();
            worst = worst.max(max_diff(got.data(), &cosine(&a, &b)));
        }
    }
    worst
}

/// `−(1/N) Σ_i log[e^{S_ii/τ} / Σ_j (e^{S_ij/τ} + e^{S_ji/τ})]`.
pub fn contrastive(s: &Tensor, tau: f64) -> f64 {
    let n = s.shape()[0];
    let e = |i: usize, j: usize| (s.at(&[i, j]) as f64 / tau).exp();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| e(i, j) + e(j, i)).sum();
        total += (e(i, i) / denom).ln();
    }
    -total / n as f64
}

pub fn contrastive_max_err() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0.0f64;
    for n in 1..=4 {
        for tau in [0.07, 0.5, 1.0] {
            let s = random(&mut rng, &[n, n]);
            let got = vlm::contrastive_loss(&s, tau).unwrap();
            worst = worst.max((got - contrastive(&s, tau)).abs());
        }
    }
    worst
}

/// Mean over `b, t, p` of `(O − onehot)²`.
pub fn t2p_loss(o: &Tensor, labels: &[usize]) -> f64 {
    let [b, t, h, w] = o.shape()[..] else {
        panic!()
    };
    let hw = h * w;
    let mut sum = 0.0;
    for bi in 0..b {
        for ti in 0..t {
            for p in 0..hw {
                let target = if labels[bi * hw + p] == ti { 1.0 } else { 0.0 };
                sum += (o.at(&[bi, ti, p / w, p % w]) as f64 - target).powi(2);
            }
        }
    }
    sum / (b * t * hw) as f64
}

/// Mean over pixels of `−log softmax_t(Y)[label]`.
pub fn cross_entropy(y: &Tensor, labels: &[usize]) -> f64 {
    let [b, t, h, w] = y.shape()[..] else {
        panic!()
    };
    let hw = h * w;
    let mut sum = 0.0;
    for bi in 0..b {
        for p in 0..hw {
            let at = |ti: usize| y.at(&[bi, ti, p / w, p % w]) as f64;
            let z: f64 = (0..t).map(|ti| at(ti).exp()).sum();
            sum += z.ln() - at(labels[bi * hw + p]);
        }
    }
    sum / (b * hw) as f64
}

fn label_cases(mut f: impl FnMut(usize, usize, usize, usize)) {
    for b in 1..=2 {
        for t in 1..=4 {
            for h in 1..=5 {
                for w in 1..=5 {
                    f(b, t, h, w);
                }
            }
        }
    }
}

pub fn t2p_loss_max_err() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    label_cases(|b, t, h, w| {
        let o = random(&mut rng, &[b, t, h, w]);
        let labels: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..t)).collect();
        let mut g = Graph::<f32>::new();
        let ov = g.constant(&o);
        let l = alignment::t2p_loss(&mut g, ov, &labels).unwrap();
        worst = worst.max((g.scalar(l) as f64 - t2p_loss(&o, &labels)).abs());
    });
    worst
}

/// Both the main classification loss and the auxiliary loss.
pub fn ce_max_err() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    label_cases(|b, t, h, w| {
        let y = Tensor::from_fn(&[b, t, h, w], |_| rng.random_range(-5.0..5.0));
        let labels: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..t)).collect();
        let want = cross_entropy(&y, &labels);
        let mut g = Graph::<f32>::new();
        let yv = g.constant(&y);
        let ce = g.cross_entropy(yv, &labels).unwrap();
        let aux = decoder::aux_loss(&mut g, yv, &labels).unwrap();
        worst = worst.max((g.scalar(ce) as f64 - want).abs());
        worst = worst.max((g.scalar(aux) as f64 - want).abs());
    });
    worst
}

/// Set-based IoU: classes that occur in neither map are skipped.
pub fn miou_reference(pred: &[usize], gt: &[usize], t: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..t {
        let p: std::collections::HashSet<usize> =
            (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let g: std::collections::HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Every (prediction, ground truth) pair of maps with ≤ 4 pixels and T ≤ 3.
pub fn miou_max_err() -> f64 {
    let mut worst = 0.0f64;
    for n in 1..=4usize {
        for t in 1..=3usize {
            let maps = t.pow(n as u32);
            let decode = |mut code: usize| {
                (0..n)
                    .map(|_| {
                        let v = code % t;
                        code /= t;
                        v
                    })
                    .collect::<Vec<_>>()
            };
            for a in 0..maps {
                for b in 0..maps {
                    let (p, g) = (decode(a), decode(b));
                    let got = miou(&p, &g, t).unwrap().mean;
                    worst = worst.max((got - miou_reference(&p, &g, t)).abs());
                }
            }
        }
    }
    worst
}

/// Named drivers, in the order reported by the acceptance gate.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("dyn_conv2d", conv_max_err(false)),
        ("depthwise_conv2d", conv_max_err(true)),
        ("bilinear_resize", bilinear_max_err()),
        ("softmax", softmax_max_err()),
        ("cosine_similarity", cosine_max_err()),
        ("contrastive_loss", contrastive_max_err()),
        ("t2p_loss", t2p_loss_max_err()),
        ("cross_entropy/aux_loss", ce_max_err()),
        ("miou", miou_max_err()),
    ]
}
