use crate::scene::{euclidean, Point3};

/// Discrete Fréchet distance between two polylines with the Euclidean point
/// metric: the smallest, over all monotone couplings of their vertices, of
/// the largest coupled distance.
///
/// # Panics
/// If either polyline is empty.
pub fn discrete_frechet(p: &[Point3], q: &[Point3]) -> f64 {
    assert!(!p.is_empty() && !q.is_empty(), "discrete_frechet needs non-empty polylines");
    let m = q.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            let d = euclidean(*a, *b);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Enumerates every monotone coupling path explicitly.
    fn brute(p: &[Point3], q: &[Point3]) -> f64 {
        fn walk(p: &[Point3], q: &[Point3], i: usize, j: usize, worst: f64) -> f64 {
            let worst = worst.max(euclidean(p[i], q[j]));
            if i + 1 == p.len() && j + 1 == q.len() {
                return worst;
            }
            let mut best = f64::INFINITY;
            if i + 1 < p.len() {
                best = best.min(walk(p, q, i + 1, j, worst));
            }
            if j + 1 < q.len() {
                best = best.min(walk(p, q, i, j + 1, worst));
            }
            if i + 1 < p.len() && j + 1 < q.len() {
                best = best.min(walk(p, q, i + 1, j + 1, worst));
            }
            best
        }
        walk(p, q, 0, 0, 0.0)
    }

    fn random_line(rng: &mut impl Rng) -> Vec<Point3> {
        let n = rng.random_range(1..=6);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (p, q) = (random_line(&mut rng), random_line(&mut rng));
            assert_eq!(discrete_frechet(&p, &q), brute(&p, &q));
        }
    }

    #[test]
    fn translation_by_two() {
        let p: Vec<Point3> = (0..5).map(|i| [i as f64, 0.5 * i as f64, 0.0]).collect();
        let q: Vec<Point3> = p.iter().map(|a| [a[0], a[1] + 2.0, a[2]]).collect();
        assert_eq!(discrete_frechet(&p, &p), 0.0);
        assert!((discrete_frechet(&p, &q) - 2.0).abs() < 1e-12);
        assert_eq!(brute(&p, &q), discrete_frechet(&p, &q));
    }

    #[test]
    fn reversed_direction_is_far() {
        let p: Vec<Point3> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let q: Vec<Point3> = p.iter().rev().copied().collect();
        assert_eq!(discrete_frechet(&p, &q), 3.0);
    }
}
