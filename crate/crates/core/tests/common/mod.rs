#![allow(dead_code)]

use dualarb::geometry::{RefMode, ScaleTask};
use dualarb::kspace::lowpass_mask;
use dualarb::losses::{full_loss_with_grad, k_loss, LossOptions};
use dualarb::model::DualArbNet;
use dualarb::tensor::Plane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane<f64> {
    Plane::from_fn(h, w, |_, _| rng.random::<f64>())
}

fn set_entry(net: &mut DualArbNet<f64>, name: &str, idx: usize, v: f64) -> f64 {
    let mut arrays = net.params.arrays_mut();
    let (_, a) = arrays.iter_mut().find(|(n, _)| n == name).unwrap();
    std::mem::replace(&mut a[idx], v)
}

pub struct GradCheck {
    pub worst: f64,
    pub worst_group: String,
    pub groups: usize,
    pub samples: usize,
    /// Perturbations that would have crossed a ReLU, max-pool or L1 kink.
    pub kinked: usize,
}

/// Checks the full-loss gradient of every parameter group against central
/// differences. Per group the error is `||fd - g|| / max(||fd||, ||g||)`
/// over `picks` random entries. The `+-eps` evaluations keep the base
/// point's ReLU states, max-pool winners and L1 signs, so the difference
/// quotient is taken on the smooth piece whose gradient backprop returns.
/// The target is `n x n`, reference and HR are `2n x 2n`.
pub fn gradient_check(mut net: DualArbNet<f64>, n: usize, picks: usize, eps: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tar = rand_plane(n, n, &mut rng);
    let r = rand_plane(2 * n, 2 * n, &mut rng);
    let hr = rand_plane(2 * n, 2 * n, &mut rng);
    let task = ScaleTask::new((n, n), (2 * n, 2 * n), (2 * n, 2 * n), RefMode::Hr).unwrap();
    let mask = lowpass_mask((2 * n, 2 * n), (n, n)).unwrap();
    let opts = LossOptions::default();

    let (sr, cache) = net.forward_train(&tar, Some(&r), &task).unwrap();
    let pattern = cache.activation_pattern();
    let signs: Vec<f64> = sr
        .data
        .iter()
        .zip(&hr.data)
        .map(|(a, b)| if a > b { 1.0 } else { -1.0 })
        .collect();
    let (_, g_sr) = full_loss_with_grad(&sr, &hr, &mask, &opts).unwrap();
    let grad = net.backward(&cache, &g_sr);
    let analytic: Vec<(String, Vec<f64>)> = grad.arrays().into_iter().map(|(s, d)| (s.name, d.to_vec())).collect();

    let frozen_loss = |net: &DualArbNet<f64>| {
        let (sr, c) = net.forward_train_frozen(&tar, Some(&r), &task, &pattern).unwrap();
        let n = sr.data.len() as f64;
        let l_rec: f64 = sr
            .data
            .iter()
            .zip(&hr.data)
            .zip(&signs)
            .map(|((a, b), s)| s * (a - b))
            .sum::<f64>()
            / n;
        let l_k = k_loss(&sr, &hr, &mask).unwrap();
        let (free, fc) = net.forward_train(&tar, Some(&r), &task).unwrap();
        let free_signs = free
            .data
            .iter()
            .zip(&hr.data)
            .zip(&signs)
            .all(|((a, b), s)| (a > b) == (*s > 0.0));
        let kinked = fc.activation_pattern() != pattern || !free_signs;
        drop(c);
        (l_rec + opts.lambda_k * l_k, kinked)
    };

    let mut out = GradCheck {
        worst: 0.0,
        worst_group: String::new(),
        groups: analytic.len(),
        samples: 0,
        kinked: 0,
    };
    for (name, g) in &analytic {
        let (mut diff, mut nf, mut na) = (0.0, 0.0, 0.0);
        for _ in 0..picks.min(g.len()) {
            let idx = rng.random_range(0..g.len());
            let base = set_entry(&mut net, name, idx, 0.0);
            set_entry(&mut net, name, idx, base + eps);
            let (lp, kp) = frozen_loss(&net);
            set_entry(&mut net, name, idx, base - eps);
            let (lm, km) = frozen_loss(&net);
            set_entry(&mut net, name, idx, base);
            out.kinked += (kp || km) as usize;
            let fd = (lp - lm) / (2.0 * eps);
            diff += (fd - g[idx]).powi(2);
            nf += fd * fd;
            na += g[idx] * g[idx];
            out.samples += 1;
        }
        let rel = diff.sqrt() / nf.sqrt().max(na.sqrt()).max(1e-300);
        if rel > out.worst {
            out.worst = rel;
            out.worst_group = name.clone();
        }
    }
    out
}
