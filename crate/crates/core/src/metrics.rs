//! Accuracy and embedding-quality metrics.

use crate::tensor::Real;

/// Mean silhouette coefficient under Euclidean distance.
///
/// A point alone in its group scores 0, and so does the whole set when it
/// has fewer than two groups.
pub fn silhouette(points: &[Vec<Real>], groups: &[usize]) -> Real {
    assert_eq!(points.len(), groups.len(), "one group label per point");
    let n = points.len();
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    groups.iter().for_each(|&g| sizes[g] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }

    let dist = |a: &[Real], b: &[Real]| -> Real {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let gi = groups[i];
        if sizes[gi] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[groups[j]] += dist(&points[i], &points[j]);
            }
        }
        let a = sums[gi] / (sizes[gi] - 1) as Real;
        let b = (0..k)
            .filter(|&g| g != gi && sizes[g] > 0)
            .map(|g| sums[g] / sizes[g] as Real)
            .fold(Real::INFINITY, Real::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as Real
}

/// L2-normalised copies; zero vectors are left as they are.
pub fn unit_rows(points: &[Vec<Real>]) -> Vec<Vec<Real>> {
    points
        .iter()
        .map(|p| {
            let n = p.iter().map(|v| v * v).sum::<Real>().sqrt();
            if n > 0.0 {
                p.iter().map(|v| v / n).collect()
            } else {
                p.clone()
            }
        })
        .collect()
}

/// Overall and per-class top-1 accuracy. Classes with no instances report
/// `None`.
pub fn accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> (Real, Vec<Option<Real>>) {
    assert_eq!(predictions.len(), labels.len());
    let mut hit = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let total_hit: usize = hit.iter().sum();
    let overall = if labels.is_empty() { 0.0 } else { total_hit as Real / labels.len() as Real };
    let per_class = hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| (s > 0).then(|| h as Real / s as Real))
        .collect();
    (overall, per_class)
}
