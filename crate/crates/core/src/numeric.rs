//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation of equally long vectors, elementwise.
///
/// The reduction tree depends only on `parts.len()`.
pub fn pairwise_sum_vectors(parts: &[Vec<f64>], len: usize) -> Vec<f64> {
    match parts.len() {
        0 => vec![0.0; len],
        1 => parts[0].clone(),
        n => {
            let (lo, hi) = parts.split_at(n / 2);
            let mut a = pairwise_sum_vectors(lo, len);
            let b = pairwise_sum_vectors(hi, len);
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        }
    }
}

/// Pairwise summation of a slice of scalars.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (lo, hi) = xs.split_at(xs.len() / 2);
    pairwise_sum(lo) + pairwise_sum(hi)
}

/// `floor(fraction * n)` with a tolerance of 1e-9 so that products such as
/// `0.29 * 100` do not round down to 28.
pub fn floor_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    ((raw + 1e-9).floor().max(0.0) as usize).min(n)
}

/// Evenly spaced values over `[lo, hi]`, both ends included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_count_is_robust_to_rounding() {
        assert_eq!(floor_count(0.29, 100), 29);
        assert_eq!(floor_count(0.4, 5), 2);
        assert_eq!(floor_count(0.1, 42), 4);
        assert_eq!(floor_count(1.0, 7), 7);
        assert_eq!(floor_count(0.0, 7), 0);
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let parts: Vec<Vec<f64>> = (0..13).map(|i| vec![i as f64, 1.0]).collect();
        assert_eq!(pairwise_sum_vectors(&parts, 2), vec![78.0, 13.0]);
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-3.0, 3.0, 20);
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], -3.0);
        assert_eq!(g[19], 3.0);
    }
}
