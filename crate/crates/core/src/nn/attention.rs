//! CBAM-style channel and spatial attention gates.

use rand::Rng;

use super::conv::{conv_backward, conv_forward, relu_gated, sigmoid, ConvParams, Gates};
use crate::tensor::{lit, FeatureMap, Real};

/// Shared two-layer MLP over average- and max-pooled channel descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<T> {
    pub fc1: ConvParams<T>,
    pub fc2: ConvParams<T>,
}

#[derive(Clone, Debug)]
pub struct ChannelCache<T> {
    avg: Vec<T>,
    max: Vec<T>,
    argmax: Vec<usize>,
    hid_avg: Vec<T>,
    hid_max: Vec<T>,
    pub gate: Vec<T>,
}

fn matvec<T: Real>(p: &ConvParams<T>, x: &[T]) -> Vec<T> {
    (0..p.cout)
        .map(|o| {
            let row = &p.weight[o * p.cin..(o + 1) * p.cin];
            row.iter().zip(x).fold(p.bias[o], |acc, (&w, &v)| acc + w * v)
        })
        .collect()
}

/// Accumulates `dW += g x^T`, `db += g` and returns `W^T g`.
fn matvec_backward<T: Real>(p: &ConvParams<T>, x: &[T], g: &[T], grad: &mut ConvParams<T>) -> Vec<T> {
    let mut gx = vec![T::zero(); p.cin];
    for o in 0..p.cout {
        grad.bias[o] += g[o];
        let row = &p.weight[o * p.cin..(o + 1) * p.cin];
        let grow = &mut grad.weight[o * p.cin..(o + 1) * p.cin];
        for k in 0..p.cin {
            grow[k] += g[o] * x[k];
            gx[k] += row[k] * g[o];
        }
    }
    gx
}

impl<T: Real> ChannelCache<T> {
    /// Appends hidden ReLU states and max-pool winners.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        out.extend(self.argmax.iter().map(|&i| i as u32));
        out.extend(
            self.hid_avg
                .iter()
                .chain(&self.hid_max)
                .map(|&v| (v > T::zero()) as u32),
        );
    }
}

impl<T: Real> ChannelAttention<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: ConvParams::zeros(channels, hidden, 1),
            fc2: ConvParams::zeros(hidden, channels, 1),
        }
    }

    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: ConvParams::fan_in_uniform(channels, hidden, 1, rng),
            fc2: ConvParams::fan_in_uniform(hidden, channels, 1, rng),
        }
    }

    fn mlp(&self, x: &[T], gates: Option<&mut Gates>) -> (Vec<T>, Vec<T>) {
        let mut hid = matvec(&self.fc1, x);
        relu_gated(&mut hid, gates);
        let out = matvec(&self.fc2, &hid);
        (hid, out)
    }

    pub fn forward(&self, u: &FeatureMap<T>, mut gates: Option<&mut Gates>) -> (FeatureMap<T>, ChannelCache<T>) {
        let n = u.hw();
        let inv_n = T::one() / lit::<T>(n as f64);
        let mut avg = Vec::with_capacity(u.c);
        let mut max = Vec::with_capacity(u.c);
        let mut argmax = Vec::with_capacity(u.c);
        let winners = gates.as_deref_mut().map(|g| g.take(u.c));
        for c in 0..u.c {
            let ch = u.channel(c);
            avg.push(ch.iter().copied().sum::<T>() * inv_n);
            let bi = match winners {
                Some(w) => w.get(c).map_or(0, |&i| (i as usize).min(ch.len() - 1)),
                None => {
                    let (mut bi, mut bv) = (0, ch[0]);
                    for (i, &v) in ch.iter().enumerate().skip(1) {
                        if v > bv {
                            bi = i;
                            bv = v;
                        }
                    }
                    bi
                }
            };
            max.push(ch[bi]);
            argmax.push(bi);
        }
        let (hid_avg, o_avg) = self.mlp(&avg, gates.as_deref_mut());
        let (hid_max, o_max) = self.mlp(&max, gates);
        let gate: Vec<T> = o_avg.iter().zip(&o_max).map(|(&a, &b)| sigmoid(a + b)).collect();
        let mut v = u.clone();
        for (c, &g) in gate.iter().enumerate() {
            for x in v.channel_mut(c) {
                *x *= g;
            }
        }
        (
            v,
            ChannelCache {
                avg,
                max,
                argmax,
                hid_avg,
                hid_max,
                gate,
            },
        )
    }

    /// `u` is the gate input; returns the gradient with respect to it.
    pub fn backward(
        &self,
        u: &FeatureMap<T>,
        cache: &ChannelCache<T>,
        gv: &FeatureMap<T>,
        grad: &mut ChannelAttention<T>,
    ) -> FeatureMap<T> {
        let n = u.hw();
        let inv_n = T::one() / lit::<T>(n as f64);
        let mut gu = gv.clone();
        let mut g_pre = Vec::with_capacity(u.c);
        for c in 0..u.c {
            let g = cache.gate[c];
            let dgate: T = gv.channel(c).iter().zip(u.channel(c)).map(|(&a, &b)| a * b).sum();
            g_pre.push(dgate * g * (T::one() - g));
            for x in gu.channel_mut(c) {
                *x *= g;
            }
        }
        for (pooled, hid, is_max) in [(&cache.avg, &cache.hid_avg, false), (&cache.max, &cache.hid_max, true)] {
            let mut g_hid = matvec_backward(&self.fc2, hid, &g_pre, &mut grad.fc2);
            for (gh, &h) in g_hid.iter_mut().zip(hid.iter()) {
                if h <= T::zero() {
                    *gh = T::zero();
                }
            }
            let g_pool = matvec_backward(&self.fc1, pooled, &g_hid, &mut grad.fc1);
            for c in 0..u.c {
                if is_max {
                    gu.channel_mut(c)[cache.argmax[c]] += g_pool[c];
                } else {
                    let d = g_pool[c] * inv_n;
                    for x in gu.channel_mut(c) {
                        *x += d;
                    }
                }
            }
        }
        gu
    }
}

/// Per-pixel gate from a `k x k` convolution over channel mean and max.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention<T> {
    pub conv: ConvParams<T>,
}

#[derive(Clone, Debug)]
pub struct SpatialCache<T> {
    pooled: FeatureMap<T>,
    argmax: Vec<usize>,
    pub gate: Vec<T>,
}

impl<T> SpatialCache<T> {
    /// Appends the winning channel of every pixel's max-pool.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        out.extend(self.argmax.iter().map(|&i| i as u32));
    }
}

impl<T: Real> SpatialAttention<T> {
    pub fn zeros(kernel: usize) -> Self {
        SpatialAttention {
            conv: ConvParams::zeros(2, 1, kernel),
        }
    }

    pub fn init(kernel: usize, rng: &mut impl Rng) -> Self {
        SpatialAttention {
            conv: ConvParams::fan_in_uniform(2, 1, kernel, rng),
        }
    }

    pub fn forward(&self, v: &FeatureMap<T>, gates: Option<&mut Gates>) -> (FeatureMap<T>, SpatialCache<T>) {
        let n = v.hw();
        let inv_c = T::one() / lit::<T>(v.c as f64);
        let mut pooled = FeatureMap::zeros(2, v.h, v.w);
        let mut argmax = vec![0usize; n];
        {
            let (mean, max) = pooled.data.split_at_mut(n);
            max.copy_from_slice(v.channel(0));
            mean.copy_from_slice(v.channel(0));
            for c in 1..v.c {
                for (p, &x) in v.channel(c).iter().enumerate() {
                    mean[p] += x;
                    if x > max[p] {
                        max[p] = x;
                        argmax[p] = c;
                    }
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_c;
            }
            if let Some(g) = gates {
                for (p, &c) in g.take(n).iter().enumerate() {
                    let c = (c as usize).min(v.c - 1);
                    argmax[p] = c;
                    max[p] = v.data[c * n + p];
                }
            }
        }
        let logits = conv_forward(&self.conv, &pooled);
        let gate: Vec<T> = logits.data.iter().map(|&s| sigmoid(s)).collect();
        let mut out = v.clone();
        for c in 0..v.c {
            for (x, &g) in out.channel_mut(c).iter_mut().zip(&gate) {
                *x *= g;
            }
        }
        (out, SpatialCache { pooled, argmax, gate })
    }

    pub fn backward(
        &self,
        v: &FeatureMap<T>,
        cache: &SpatialCache<T>,
        gout: &FeatureMap<T>,
        grad: &mut SpatialAttention<T>,
    ) -> FeatureMap<T> {
        let n = v.hw();
        let inv_c = T::one() / lit::<T>(v.c as f64);
        let mut g_logit = FeatureMap::zeros(1, v.h, v.w);
        for c in 0..v.c {
            for ((gl, &go), &x) in g_logit.data.iter_mut().zip(gout.channel(c)).zip(v.channel(c)) {
                *gl += go * x;
            }
        }
        for (gl, &g) in g_logit.data.iter_mut().zip(&cache.gate) {
            *gl *= g * (T::one() - g);
        }
        let g_pooled = conv_backward(&self.conv, &cache.pooled, &g_logit, &mut grad.conv, true).unwrap();
        let mut gv = gout.clone();
        for c in 0..v.c {
            for (x, &g) in gv.channel_mut(c).iter_mut().zip(&cache.gate) {
                *x *= g;
            }
        }
        let (g_mean, g_max) = g_pooled.data.split_at(n);
        for c in 0..v.c {
            for (x, &gm) in gv.channel_mut(c).iter_mut().zip(g_mean) {
                *x += gm * inv_c;
            }
        }
        for p in 0..n {
            gv.data[cache.argmax[p] * n + p] += g_max[p];
        }
        gv
    }
}
