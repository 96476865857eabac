//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_ITERATIONS: usize = 100;
pub const SHIFT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
    pub iterations: usize,
    /// SSE after every centroid update.
    pub trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sse(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| dist2(p, &centroids[c]))
        .sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in centroids.iter().enumerate() {
        let d = dist2(p, m);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can leave `target` past the last positive weight.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
            pick
        } else {
            // Every point coincides with a center; take any unused index.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Gives every empty cluster the point farthest from its centroid among
/// clusters that can spare one.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &[Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            if sizes[c] < 2 {
                continue;
            }
            let d = dist2(p, &centroids[c]);
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        assignment[far.expect("k <= n leaves a cluster with two points")] = empty;
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= n as f64);
    }
    sums
}

fn validate(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::arg("kmeans", "P must be >= 1"));
    }
    if k > points.len() {
        return Err(Error::arg("kmeans", format!("P = {k} exceeds {} points", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::arg("kmeans", "points must share a nonzero dimension"));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::arg("kmeans", "points must be finite"));
    }
    Ok(())
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> KMeans {
    let mut centroids = plus_plus(points, k, rng);
    let mut assignment = vec![0; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(p, &centroids);
        }
        repair_empty(points, &mut assignment, &centroids);
        let next = means(points, &assignment, k);
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        trace.push(sse(points, &assignment, &centroids));
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    KMeans {
        sse: *trace.last().expect("one iteration"),
        assignment,
        centroids,
        iterations,
        trace,
    }
}

/// Best of `restarts` seeded runs by SSE (earliest on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeans> {
    validate(points, k)?;
    let mut rng = rng::stream(seed, rng::KMEANS);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec<f64>> {
        v.iter().map(|&(x, y)| vec![x, y]).collect()
    }

    #[test]
    fn separated_pairs() {
        let p = pts(&[(0.0, 0.0), (0.1, 0.0), (10.0, 10.0), (10.0, 10.1)]);
        for seed in 0..20 {
            let r = kmeans(&p, 2, seed, 1).unwrap();
            assert_eq!(r.assignment[0], r.assignment[1]);
            assert_eq!(r.assignment[2], r.assignment[3]);
            assert_ne!(r.assignment[0], r.assignment[2]);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (5.0, 5.0)]);
        let r = kmeans(&p, 4, 3, 1).unwrap();
        let mut a = r.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let p = vec![vec![1.0, 2.0]; 5];
        let r = kmeans(&p, 3, 0, 1).unwrap();
        for c in 0..3 {
            assert!(r.assignment.contains(&c));
        }
    }

    #[test]
    fn argument_errors() {
        let p = pts(&[(0.0, 0.0)]);
        assert!(kmeans(&p, 2, 0, 1).is_err());
        assert!(kmeans(&p, 0, 0, 1).is_err());
        assert!(kmeans(&[vec![0.0], vec![0.0, 1.0]], 1, 0, 1).is_err());
    }

    #[test]
    fn seeded_runs_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
        assert_eq!(kmeans(&p, 4, 9, 3).unwrap(), kmeans(&p, 4, 9, 3).unwrap());
    }

    proptest! {
        #[test]
        fn sse_never_increases(
            raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..30),
            k in 1usize..5,
            seed in 0u64..500,
        ) {
            let p = pts(&raw);
            let k = k.min(p.len());
            let r = kmeans(&p, k, seed, 1).unwrap();
            for w in r.trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", r.trace);
            }
            prop_assert!(r.iterations <= MAX_ITERATIONS);
            prop_assert!((sse(&p, &r.assignment, &r.centroids) - r.sse).abs() < 1e-12);
            for c in 0..k {
                prop_assert!(r.assignment.contains(&c));
            }
        }
    }
}
