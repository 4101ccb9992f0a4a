//! Zero-padded stride-1 square convolutions on channel-major maps, computed
//! as im2col + GEMM, with the matching backward pass.

use rand::Rng;

use crate::tensor::{gemm, lit, FeatureMap, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout][cin][k][k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        ConvParams {
            cin,
            cout,
            k,
            weight: vec![T::zero(); cout * cin * k * k],
            bias: vec![T::zero(); cout],
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn fan_in_uniform(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(cin, cout, k);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        for v in p.weight.iter_mut().chain(p.bias.iter_mut()) {
            *v = lit(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.k, self.k]
    }

    #[inline]
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Column matrix `[cin * k * k][h * w]` with zero padding.
fn im2col<T: Real>(x: &FeatureMap<T>, k: usize) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let n = h * w;
    let r = (k / 2) as isize;
    let mut col = vec![T::zero(); x.c * k * k * n];
    for c in 0..x.c {
        let src = x.channel(c);
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = &mut col[((c * k + ky) * k + kx) * n..][..n];
                let (j0, j1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize).max(0) as usize);
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let srow = &src[si as usize * w..][..w];
                    let drow = &mut row[i * w..][..w];
                    for j in j0..j1 {
                        drow[j] = srow[(j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-matrix gradient back onto the input grid.
fn col2im<T: Real>(col: &[T], c_in: usize, h: usize, w: usize, k: usize) -> FeatureMap<T> {
    let n = h * w;
    let r = (k / 2) as isize;
    let mut out = FeatureMap::zeros(c_in, h, w);
    for c in 0..c_in {
        let dst = out.channel_mut(c);
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let row = &col[((c * k + ky) * k + kx) * n..][..n];
                let (j0, j1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize).max(0) as usize);
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[si as usize * w..][..w];
                    let grow = &row[i * w..][..w];
                    for j in j0..j1 {
                        drow[(j as isize + dx) as usize] += grow[j];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_forward<T: Real>(p: &ConvParams<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
    assert_eq!(x.c, p.cin, "conv input channels");
    let n = x.hw();
    let mut out = FeatureMap::zeros(p.cout, x.h, x.w);
    for (o, &b) in p.bias.iter().enumerate() {
        out.channel_mut(o).fill(b);
    }
    if p.k == 1 {
        gemm(
            p.cout,
            p.cin,
            n,
            T::one(),
            &p.weight,
            false,
            &x.data,
            false,
            T::one(),
            &mut out.data,
        );
    } else {
        let col = im2col(x, p.k);
        gemm(
            p.cout,
            p.col_rows(),
            n,
            T::one(),
            &p.weight,
            false,
            &col,
            false,
            T::one(),
            &mut out.data,
        );
    }
    out
}

/// Accumulates parameter gradients into `grad` and returns the input gradient
/// (skipped when `need_input_grad` is false).
pub fn conv_backward<T: Real>(
    p: &ConvParams<T>,
    x: &FeatureMap<T>,
    gout: &FeatureMap<T>,
    grad: &mut ConvParams<T>,
    need_input_grad: bool,
) -> Option<FeatureMap<T>> {
    let n = x.hw();
    for (o, gb) in grad.bias.iter_mut().enumerate() {
        *gb += gout.channel(o).iter().copied().sum::<T>();
    }
    let rows = p.col_rows();
    if p.k == 1 {
        gemm(
            p.cout,
            n,
            rows,
            T::one(),
            &gout.data,
            false,
            &x.data,
            true,
            T::one(),
            &mut grad.weight,
        );
        if !need_input_grad {
            return None;
        }
        let mut gx = FeatureMap::zeros(p.cin, x.h, x.w);
        gemm(
            rows,
            p.cout,
            n,
            T::one(),
            &p.weight,
            true,
            &gout.data,
            false,
            T::zero(),
            &mut gx.data,
        );
        Some(gx)
    } else {
        let col = im2col(x, p.k);
        gemm(
            p.cout,
            n,
            rows,
            T::one(),
            &gout.data,
            false,
            &col,
            true,
            T::one(),
            &mut grad.weight,
        );
        if !need_input_grad {
            return None;
        }
        let mut gcol = col;
        gemm(
            rows,
            p.cout,
            n,
            T::one(),
            &p.weight,
            true,
            &gout.data,
            false,
            T::zero(),
            &mut gcol,
        );
        Some(col2im(&gcol, p.cin, x.h, x.w, p.k))
    }
}

/// Recorded gate decisions (ReLU states, max-pool winners) replayed in
/// forward order instead of being decided from the current values.
#[derive(Clone, Debug)]
pub struct Gates<'a> {
    pattern: &'a [u32],
    pos: usize,
    overrun: bool,
}

impl<'a> Gates<'a> {
    pub fn new(pattern: &'a [u32]) -> Self {
        Gates {
            pattern,
            pos: 0,
            overrun: false,
        }
    }

    /// The next `n` decisions; all-off if the pattern is too short.
    pub fn take(&mut self, n: usize) -> &'a [u32] {
        match self.pattern.get(self.pos..self.pos + n) {
            Some(out) => {
                self.pos += n;
                out
            }
            None => {
                self.overrun = true;
                self.pos = self.pattern.len();
                &[]
            }
        }
    }

    /// Whether every decision was consumed exactly.
    pub fn consumed_exactly(&self) -> bool {
        !self.overrun && self.pos == self.pattern.len()
    }
}

/// ReLU, or the recorded on/off states when `gates` is given.
pub fn relu_gated<T: Real>(x: &mut [T], gates: Option<&mut Gates>) {
    match gates {
        None => {
            for v in x.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Some(g) => {
            let states = g.take(x.len());
            for (v, &on) in x.iter_mut().zip(states) {
                if on == 0 {
                    *v = T::zero();
                }
            }
        }
    }
}

/// Masks `g` where the ReLU output `y` was not positive.
pub fn relu_backward_in_place<T: Real>(y: &[T], g: &mut [T]) {
    for (gv, &yv) in g.iter_mut().zip(y) {
        if yv <= T::zero() {
            *gv = T::zero();
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_oracle(p: &ConvParams<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let r = (p.k / 2) as isize;
        let mut out = FeatureMap::zeros(p.cout, x.h, x.w);
        for o in 0..p.cout {
            for i in 0..x.h {
                for j in 0..x.w {
                    let mut acc = p.bias[o];
                    for c in 0..p.cin {
                        for ky in 0..p.k {
                            for kx in 0..p.k {
                                let (si, sj) = (i as isize + ky as isize - r, j as isize + kx as isize - r);
                                if si < 0 || sj < 0 || si >= x.h as isize || sj >= x.w as isize {
                                    continue;
                                }
                                acc += p.weight[((o * p.cin + c) * p.k + ky) * p.k + kx]
                                    * x.at(c, si as usize, sj as usize);
                            }
                        }
                    }
                    out.data[(o * x.h + i) * x.w + j] = acc;
                }
            }
        }
        out
    }

    fn rand_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3, 7] {
            let p = ConvParams::<f64>::fan_in_uniform(3, 4, k, &mut rng);
            let x = rand_map(3, 5, 6, &mut rng);
            let got = conv_forward(&p, &x);
            let want = conv_oracle(&p, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 7] {
            let mut p = ConvParams::<f64>::fan_in_uniform(2, 3, k, &mut rng);
            p.bias.fill(0.0);
            let x = rand_map(2, 4, 5, &mut rng);
            let g = rand_map(3, 4, 5, &mut rng);
            let y = conv_forward(&p, &x);
            let mut grad = ConvParams::zeros(2, 3, k);
            let gx = conv_backward(&p, &x, &g, &mut grad, true).unwrap();
            // <conv(x), g> is bilinear in (W, x): equals <x, gx> and <W, gW>
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let rx: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            let rw: f64 = p.weight.iter().zip(&grad.weight).map(|(a, b)| a * b).sum();
            assert!((lhs - rx).abs() < 1e-10, "k={k}");
            assert!((lhs - rw).abs() < 1e-10, "k={k}");
            let gsum: f64 = g.data.iter().sum();
            let gb: f64 = grad.bias.iter().sum();
            assert!((gsum - gb).abs() < 1e-10);
        }
    }
}
