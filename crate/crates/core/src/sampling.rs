//! Random sampling helpers shared by the estimators.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform direction on the unit sphere `S^{n-1}`.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Uniform point in the ball of the given centre and radius.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let n = center.len();
    let u = unit_vector(rng, n);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    center.iter().zip(u).map(|(c, d)| c + r * d).collect()
}

/// Volume of the Euclidean ball of radius `r` in dimension `n`.
pub fn ball_volume(n: usize, r: f64) -> f64 {
    let mut unit = [1.0, 2.0].to_vec();
    for k in 2..=n {
        let next = unit[k - 2] * 2.0 * std::f64::consts::PI / k as f64;
        unit.push(next);
    }
    unit[n] * r.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ball_volumes() {
        let pi = std::f64::consts::PI;
        assert!((ball_volume(1, 2.0) - 4.0).abs() < 1e-12);
        assert!((ball_volume(2, 1.0) - pi).abs() < 1e-12);
        assert!((ball_volume(3, 1.0) - 4.0 * pi / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = uniform_in_ball(&mut rng, &[1.0, -2.0, 0.5], 0.3);
            let d = ((p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2) + (p[2] - 0.5).powi(2)).sqrt();
            assert!(d <= 0.3 + 1e-15);
        }
    }
}
