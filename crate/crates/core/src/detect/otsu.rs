//! Otsu's threshold: the intensity `t` maximizing the between-class variance
//! `w0 * w1 * (mu0 - mu1)^2` for classes `[0, t]` and `(t, 255]`.

/// 256-bin histogram of a sample iterator.
pub fn histogram(values: impl IntoIterator<Item = u8>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for v in values {
        hist[v as usize] += 1;
    }
    hist
}

/// Smallest `t` maximizing between-class variance. A histogram with a single
/// occupied bin returns that bin, so bright polarity selects nothing and dark
/// polarity selects everything.
pub fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    let mut best = None::<(f64, u8)>;
    for (t, &count) in hist.iter().enumerate().take(255) {
        w0 += count;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, t as u8));
        }
    }
    match best {
        Some((_, t)) => t,
        None => hist.iter().rposition(|&c| c > 0).unwrap_or(0) as u8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodal_split() {
        let mut hist = [0u64; 256];
        hist[40] = 500;
        hist[200] = 300;
        let t = otsu_threshold(&hist);
        assert!((40..200).contains(&t));
        assert_eq!(t, 40);
    }

    #[test]
    fn constant_image() {
        let hist = histogram(std::iter::repeat_n(0u8, 100));
        assert_eq!(otsu_threshold(&hist), 0);
        let hist = histogram(std::iter::repeat_n(170u8, 100));
        assert_eq!(otsu_threshold(&hist), 170);
    }

    #[test]
    fn brute_force_agreement() {
        // three clusters with spread
        let mut values = Vec::new();
        for i in 0..300u32 {
            values.push((30 + i % 17) as u8);
            values.push((120 + i % 23) as u8);
            if i % 3 == 0 {
                values.push((210 + i % 11) as u8);
            }
        }
        let hist = histogram(values.iter().copied());
        let t = otsu_threshold(&hist);
        // brute force: variance of each split directly from samples
        let score = |t: u8| {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let a: Vec<f64> = values.iter().filter(|&&v| v <= t).map(|&v| v as f64).collect();
                let b: Vec<f64> = values.iter().filter(|&&v| v > t).map(|&v| v as f64).collect();
                (a, b)
            };
            if a.is_empty() || b.is_empty() {
                return 0.0;
            }
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            a.len() as f64 * b.len() as f64 * (ma - mb).powi(2)
        };
        let best = (0..=255u8).map(score).fold(0.0, f64::max);
        assert!((score(t) - best).abs() <= best * 1e-12);
    }
}
