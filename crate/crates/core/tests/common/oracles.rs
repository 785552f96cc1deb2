//! Brute-force reference implementations, written independently of the
//! library code they check.

/// Per-image fraction of pixels whose worst channel error is within `t`.
pub fn pixel_accuracy(pred: &[u8], gt: &[u8], channels: usize, t: u8) -> f64 {
    let hw = gt.len() / channels;
    if hw == 0 {
        return 1.0;
    }
    let mut ok = 0usize;
    for p in 0..hw {
        let mut good = true;
        for c in 0..channels {
            let (a, b) = (pred[c * hw + p] as i64, gt[c * hw + p] as i64);
            if (a - b).abs() > t as i64 {
                good = false;
            }
        }
        if good {
            ok += 1;
        }
    }
    ok as f64 / hw as f64
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn hit_rate(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut hits = 0;
    for i in 0..labels.len() {
        hits += (pred[i] == labels[i]) as usize;
    }
    hits as f64 / labels.len() as f64
}

/// Monte-Carlo estimate of KL(N(mu, I) || N(0, I)) per dimension:
/// mean over samples of log q(z) - log p(z) with z ~ N(mu, I).
pub fn kl_monte_carlo(mu: &[f64], samples: usize, rng: &mut impl rand::Rng) -> f64 {
    use rand_distr::StandardNormal;
    let mut s = 0.0;
    for k in 0..samples {
        let m = mu[k % mu.len()];
        let eta: f64 = rng.sample(StandardNormal);
        let z = m + eta;
        // log N(z; m, 1) - log N(z; 0, 1)
        s += -0.5 * eta * eta + 0.5 * z * z;
    }
    s / samples as f64
}

/// Standard normal deciles.
pub const NORMAL_DECILES: [f64; 9] = [-1.2816, -0.8416, -0.5244, -0.2533, 0.0, 0.2533, 0.5244, 0.8416, 1.2816];

/// Pearson statistic of `xs` over the ten equiprobable normal bins.
pub fn chi_square_normal(xs: &[f64]) -> f64 {
    let mut counts = [0usize; 10];
    for &x in xs {
        counts[NORMAL_DECILES.iter().filter(|&&q| x > q).count()] += 1;
    }
    let e = xs.len() as f64 / 10.0;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// 0.999 quantile of chi-square with 9 degrees of freedom.
pub const CHI2_9_999: f64 = 27.877;
