//! Implicit decoding function: a per-pixel stack of kernel-1 layers with sine
//! activations, each hidden layer modulated element-wise by the fused feature
//! at that pixel. No operation here mixes pixels.

use std::ops::Range;

use rand::Rng;

use super::conv::ConvParams;
use crate::geometry::CoordMap;
use crate::tensor::{lit, FeatureMap, Plane, Real};

/// Sine frequency folded into the first layer's weights at initialization.
pub const OMEGA_0: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct IdfParams<T> {
    /// `layers[0]`: query -> width; `layers[i]`: width -> width.
    pub layers: Vec<ConvParams<T>>,
    /// width -> 1, linear.
    pub head: ConvParams<T>,
}

/// Per-pixel query vector: scale factors and relative coordinates.
#[derive(Clone, Debug)]
pub struct QueryGrid {
    pub scales: Vec<f64>,
    pub coords: Option<CoordMap>,
    pub ref_coords: Option<CoordMap>,
}

impl QueryGrid {
    pub fn width(&self) -> usize {
        self.scales.len() + 2 * self.coords.is_some() as usize + 2 * self.ref_coords.is_some() as usize
    }

    #[inline]
    pub fn fill<T: Real>(&self, i: usize, j: usize, out: &mut [T]) {
        let mut k = 0;
        for &s in &self.scales {
            out[k] = T::of(s);
            k += 1;
        }
        for c in [&self.coords, &self.ref_coords].into_iter().flatten() {
            let (py, px) = c.get(i, j);
            out[k] = T::of(py);
            out[k + 1] = T::of(px);
            k += 2;
        }
    }
}

/// Fused maps for the decoder: layer `i` reads channels
/// `[offset, offset + width)` of `maps[i - 1]`.
pub struct Modulation<'a, T> {
    pub maps: &'a [FeatureMap<T>],
    pub offset: usize,
}

impl<'a, T: Real> Modulation<'a, T> {
    #[inline]
    fn get(&self, layer: usize, c: usize, p: usize) -> T {
        let m = &self.maps[layer - 1];
        m.data[(self.offset + c) * m.hw() + p]
    }
}

fn transpose<T: Real>(p: &ConvParams<T>) -> Vec<T> {
    let mut t = vec![T::zero(); p.weight.len()];
    for o in 0..p.cout {
        for k in 0..p.cin {
            t[k * p.cout + o] = p.weight[o * p.cin + k];
        }
    }
    t
}

/// `out = b + W x` with a transposed weight copy; sums over inputs in order.
#[inline]
fn affine<T: Real>(wt: &[T], bias: &[T], x: &[T], out: &mut [T]) {
    out.copy_from_slice(bias);
    let n_out = out.len();
    for (k, &xv) in x.iter().enumerate() {
        let row = &wt[k * n_out..(k + 1) * n_out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * xv;
        }
    }
}

impl<T: Real> IdfParams<T> {
    pub fn zeros(query_width: usize, width: usize, layers: usize) -> Self {
        let mut l = vec![ConvParams::zeros(query_width, width, 1)];
        l.extend((1..layers).map(|_| ConvParams::zeros(width, width, 1)));
        IdfParams {
            layers: l,
            head: ConvParams::zeros(width, 1, 1),
        }
    }

    /// Sine-network initialization with `omega_0` folded into every layer:
    /// first layer `omega_0 * U(-1/n, 1/n)`, hidden layers
    /// `omega_0 * U(-sqrt(6/n)/omega_0, sqrt(6/n)/omega_0)`.
    pub fn init(query_width: usize, width: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(query_width, width, layers);
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let n = layer.cin.max(1) as f64;
            let bound = if l == 0 { OMEGA_0 / n } else { (6.0 / n).sqrt() };
            for v in layer.weight.iter_mut() {
                *v = lit(rng.random_range(-bound..=bound));
            }
            let bb = 1.0 / n.sqrt();
            for v in layer.bias.iter_mut() {
                *v = lit(rng.random_range(-bb..=bb));
            }
        }
        p.head = ConvParams::fan_in_uniform(width, 1, 1, rng);
        p
    }

    pub fn width(&self) -> usize {
        self.head.cin
    }

    /// Decodes pixels `rows x cols` of the output grid.
    pub fn decode(
        &self,
        query: &QueryGrid,
        mods: &Modulation<'_, T>,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Plane<T> {
        let full_w = mods.maps[0].w;
        let width = self.width();
        let wts: Vec<Vec<T>> = self.layers.iter().map(transpose).collect();
        let head_t = transpose(&self.head);
        let mut q = vec![T::zero(); query.width()];
        let mut f = vec![T::zero(); width];
        let mut z = vec![T::zero(); width];
        let mut out = [T::zero()];
        let mut plane = Plane::zeros(rows.len(), cols.len());
        for (oi, i) in rows.clone().enumerate() {
            for (oj, j) in cols.clone().enumerate() {
                let p = i * full_w + j;
                query.fill(i, j, &mut q);
                affine(&wts[0], &self.layers[0].bias, &q, &mut z);
                for (fv, &zv) in f.iter_mut().zip(&z) {
                    *fv = zv.sin();
                }
                for l in 1..self.layers.len() {
                    affine(&wts[l], &self.layers[l].bias, &f, &mut z);
                    for c in 0..width {
                        f[c] = (z[c] * mods.get(l, c, p)).sin();
                    }
                }
                affine(&head_t, &self.head.bias, &f, &mut out);
                plane.data[oi * cols.len() + oj] = out[0];
            }
        }
        plane
    }

    /// Backward over the full grid. Recomputes the per-pixel forward, adds
    /// parameter gradients into `grad` and modulation gradients into
    /// `g_maps` (same channel layout as `mods.maps`).
    pub fn decode_backward(
        &self,
        query: &QueryGrid,
        mods: &Modulation<'_, T>,
        gout: &Plane<T>,
        grad: &mut IdfParams<T>,
        g_maps: &mut [FeatureMap<T>],
    ) {
        let n_layers = self.layers.len();
        let width = self.width();
        let wts: Vec<Vec<T>> = self.layers.iter().map(transpose).collect();
        let mut q = vec![T::zero(); query.width()];
        // pre-modulation values and activations per layer
        let mut z = vec![vec![T::zero(); width]; n_layers];
        let mut f = vec![vec![T::zero(); width]; n_layers];
        let mut m = vec![vec![T::zero(); width]; n_layers];
        let mut df = vec![T::zero(); width];
        let mut dz = vec![T::zero(); width];
        for i in 0..gout.h {
            for j in 0..gout.w {
                let p = i * gout.w + j;
                let g = gout.data[p];
                if g == T::zero() {
                    continue;
                }
                query.fill(i, j, &mut q);
                affine(&wts[0], &self.layers[0].bias, &q, &mut z[0]);
                for c in 0..width {
                    f[0][c] = z[0][c].sin();
                }
                for l in 1..n_layers {
                    let (prev, cur) = f.split_at_mut(l);
                    affine(&wts[l], &self.layers[l].bias, &prev[l - 1], &mut z[l]);
                    for c in 0..width {
                        m[l][c] = z[l][c] * mods.get(l, c, p);
                        cur[0][c] = m[l][c].sin();
                    }
                }
                // head
                grad.head.bias[0] += g;
                for c in 0..width {
                    grad.head.weight[c] += g * f[n_layers - 1][c];
                    df[c] = g * self.head.weight[c];
                }
                for l in (1..n_layers).rev() {
                    let gm = &mut g_maps[l - 1];
                    let hw = gm.hw();
                    for c in 0..width {
                        let dm = df[c] * m[l][c].cos();
                        let modv = mods.get(l, c, p);
                        gm.data[(mods.offset + c) * hw + p] += dm * z[l][c];
                        dz[c] = dm * modv;
                    }
                    let layer = &self.layers[l];
                    let gl = &mut grad.layers[l];
                    df.iter_mut().for_each(|v| *v = T::zero());
                    for o in 0..width {
                        let d = dz[o];
                        gl.bias[o] += d;
                        let wrow = &layer.weight[o * width..(o + 1) * width];
                        let grow = &mut gl.weight[o * width..(o + 1) * width];
                        let fin = &f[l - 1];
                        for k in 0..width {
                            grow[k] += d * fin[k];
                            df[k] += wrow[k] * d;
                        }
                    }
                }
                let g0 = &mut grad.layers[0];
                let qn = q.len();
                for o in 0..width {
                    let d = df[o] * z[0][o].cos();
                    g0.bias[o] += d;
                    for k in 0..qn {
                        g0.weight[o * qn + k] += d * q[k];
                    }
                }
            }
        }
    }
}

/// Skip branch: `sin(W_s F + b_s)` per pixel.
pub fn skip_forward<T: Real>(
    p: &ConvParams<T>,
    f_up: &FeatureMap<T>,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Plane<T> {
    let n = f_up.hw();
    let mut out = Plane::zeros(rows.len(), cols.len());
    for (oi, i) in rows.clone().enumerate() {
        for (oj, j) in cols.clone().enumerate() {
            let px = i * f_up.w + j;
            let mut acc = p.bias[0];
            for c in 0..p.cin {
                acc += p.weight[c] * f_up.data[c * n + px];
            }
            out.data[oi * cols.len() + oj] = acc.sin();
        }
    }
    out
}

/// Returns the gradient with respect to `f_up`.
pub fn skip_backward<T: Real>(
    p: &ConvParams<T>,
    f_up: &FeatureMap<T>,
    gout: &Plane<T>,
    grad: &mut ConvParams<T>,
) -> FeatureMap<T> {
    let n = f_up.hw();
    let mut g_in = FeatureMap::zeros(f_up.c, f_up.h, f_up.w);
    for px in 0..n {
        let mut acc = p.bias[0];
        for c in 0..p.cin {
            acc += p.weight[c] * f_up.data[c * n + px];
        }
        let d = gout.data[px] * acc.cos();
        grad.bias[0] += d;
        for c in 0..p.cin {
            grad.weight[c] += d * f_up.data[c * n + px];
            g_in.data[c * n + px] += d * p.weight[c];
        }
    }
    g_in
}
