use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.gen_range(0..points.len()),
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (best, d) = centers
            .iter()
            .enumerate()
            .map(|(c, ctr)| (c, dist2(p, ctr)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *l = best;
        inertia += d;
    }
    inertia
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(points, k, &mut rng);
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let prev = labels.clone();
        trace.push(assign(points, &centers, &mut labels));
        if labels == prev {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    KMeansResult {
        labels,
        centroids: centers,
        inertia: *trace.last().expect("at least one assignment"),
        seed,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm from k-means++ seeding; the lowest-inertia run over
/// `seeds` wins, earlier seeds winning ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, seeds: &[u64], max_iter: usize) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::InsufficientData(format!(
            "k-means with {k} clusters needs at least {k} points, got {}",
            points.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("k-means needs at least one seed".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidParameter("k-means points differ in dimension".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for &s in seeds {
        let r = lloyd(points, k, s, max_iter);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("non-empty seeds"))
}

/// Fraction of points on which two labelings agree under the best mapping of
/// labels in `b` onto labels in `a` (exhaustive over permutations, small k).
pub fn agreement_up_to_permutation(a: &[usize], b: &[usize], k: usize) -> f64 {
    fn permute(perm: &mut Vec<usize>, used: &mut Vec<bool>, k: usize, a: &[usize], b: &[usize], best: &mut usize) {
        if perm.len() == k {
            let hits = a.iter().zip(b).filter(|(&x, &y)| perm[y] == x).count();
            *best = (*best).max(hits);
            return;
        }
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                perm.push(c);
                permute(perm, used, k, a, b, best);
                perm.pop();
                used[c] = false;
            }
        }
    }
    let mut best = 0;
    permute(&mut Vec::new(), &mut vec![false; k], k, a, b, &mut best);
    best as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let centre = if c == 0 { [0.0, 0.0] } else { [5.0, 5.0] };
            points.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect());
            truth.push(c);
        }
        let r = kmeans(&points, 2, &[0, 1, 2], 100).unwrap();
        assert!(agreement_up_to_permutation(&truth, &r.labels, 2) >= 0.99);
    }

    #[test]
    fn singletons_have_zero_inertia() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&points, 5, &[3], 50).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn identical_points_have_zero_inertia() {
        let points = vec![vec![1.0, 2.0]; 6];
        let r = kmeans(&points, 2, &[0, 1], 50).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(kmeans(&[vec![0.0]], 2, &[0], 10).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vec<f64>> = (0..300).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        for seed in 0..10 {
            let r = kmeans(&points, 5, &[seed], 100).unwrap();
            for w in r.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
