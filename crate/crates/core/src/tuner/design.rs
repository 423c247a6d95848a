//! Quasi-random point sets on the unit cube.

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

pub const MAX_DIMS: usize = PRIMES.len();

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

/// Halton point `index` (1-based to skip the origin) under a
/// Cranley–Patterson rotation by `shift`.
pub fn shifted_halton(index: u64, shift: &[f64]) -> Vec<f64> {
    assert!(shift.len() <= MAX_DIMS, "at most {MAX_DIMS} dimensions");
    shift
        .iter()
        .zip(PRIMES)
        .map(|(s, p)| (radical_inverse(index + 1, p) + s).fract())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        let xs: Vec<f64> = (1..8).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(xs, vec![0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875]);
    }

    #[test]
    fn shifted_points_stay_in_cube() {
        let shift = [0.9, 0.99, 0.5];
        for i in 0..500 {
            assert!(shifted_halton(i, &shift).iter().all(|x| (0.0..1.0).contains(x)));
        }
    }
}
