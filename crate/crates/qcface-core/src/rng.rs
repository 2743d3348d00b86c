use rand::Rng;

use crate::geometry::{axpy, dot, normalized};

/// Standard normal draw via Box-Muller on the given stream. One uniform
/// pair per draw, second value discarded, so the stream layout is fixed.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| standard_normal(rng)).collect()
}

pub fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        if let Ok(u) = normalized(&normal_vector(rng, d)) {
            return u;
        }
    }
}

/// Random rotation as orthonormal rows, by Gram-Schmidt on normal draws.
pub fn rotation_matrix<R: Rng>(rng: &mut R, d: usize) -> Vec<Vec<f64>> {
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for _ in 0..d {
            let mut v = normal_vector(rng, d);
            for r in &rows {
                let c = dot(&v, r);
                axpy(&mut v, -c, r);
            }
            match normalized(&v) {
                Ok(u) => rows.push(u),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return rows;
        }
    }
}
