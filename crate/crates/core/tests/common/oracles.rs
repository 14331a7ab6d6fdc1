//! Reference computations that share no code with the library.

/// Distribution of the number of distinct detectors hit when `j` photons
/// each pick one of `n_detectors` uniformly, by visiting all `N^j`
/// assignments.
pub fn enumerate_clicks(n_detectors: usize, j: usize) -> Vec<f64> {
    let total = n_detectors.pow(j as u32);
    let mut counts = vec![0u64; n_detectors + 1];
    for code in 0..total {
        let mut seen = 0u32;
        let mut c = code;
        for _ in 0..j {
            seen |= 1 << (c % n_detectors);
            c /= n_detectors;
        }
        counts[seen.count_ones() as usize] += 1;
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn binomial(n: u64, k: u64) -> i128 {
    if k > n {
        return 0;
    }
    let mut r: i128 = 1;
    for i in 0..k {
        r = r * (n - i) as i128 / (i + 1) as i128;
    }
    r
}

/// `C(N, n) · #surjections(j → n) / N^j`, the surjection count taken by
/// inclusion–exclusion in exact integers.
pub fn inclusion_exclusion(n_detectors: usize, n: usize, j: usize) -> f64 {
    let mut surj: i128 = 0;
    for k in 0..=n {
        let term = binomial(n as u64, k as u64) * ((n - k) as i128).pow(j as u32);
        if k % 2 == 0 {
            surj += term;
        } else {
            surj -= term;
        }
    }
    let ways = binomial(n_detectors as u64, n as u64) * surj;
    ways as f64 / (n_detectors as f64).powi(j as i32)
}

/// Poisson probabilities by the recurrence `p(n) = p(n-1)·m/n`.
pub fn poisson(mean: f64, n_max: usize) -> Vec<f64> {
    let mut p = vec![0.0; n_max + 1];
    p[0] = (-mean).exp();
    for n in 1..=n_max {
        p[n] = p[n - 1] * mean / n as f64;
    }
    p
}

pub fn moment(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(n, v)| n as f64 * v).sum()
}
