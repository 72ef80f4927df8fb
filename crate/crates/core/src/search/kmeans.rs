use crate::data::{DemoLibrary, QuerySample};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const MAX_ITERS: usize = 100;
const MAX_RESEEDS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding then Lloyd iterations. Returns (centroids, assignment).
/// A cluster that ends up empty triggers a fresh seeding, at most 10 times.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if k == 0 || points.len() < k {
        return Err(Error::Validation(format!("cannot form {k} clusters from {} points", points.len())));
    }
    for _ in 0..=MAX_RESEEDS {
        if let Some(r) = lloyd(points, k, rng) {
            return Ok(r);
        }
        log::warn!("k-means produced an empty cluster; reseeding");
    }
    Err(Error::Search(format!("k-means left a cluster empty after {MAX_RESEEDS} reseeds")))
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Option<(Vec<Vec<f64>>, Vec<usize>)> {
    let n = points.len();
    let mut cents = vec![points[rng.below(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &cents[0])).collect();
    while cents.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.below(n)
        };
        cents.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &cents[cents.len() - 1]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, m) in cents.iter().enumerate() {
                let d = sq_dist(p, m);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            cents[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    Some((cents, assign))
}

/// Query set and the library left after removing it.
#[derive(Clone, Debug)]
pub struct QuerySplit {
    /// Chosen demos as queries; their responses become ground truths.
    pub queries: Vec<QuerySample>,
    pub library: DemoLibrary,
    pub centroids: Vec<Vec<f64>>,
}

/// Cluster image embeddings into `k` groups and take the `m` members
/// closest to each centroid as queries. The rest form the library.
pub fn select_query_set(lib: &DemoLibrary, k: usize, m: usize, rng: &mut Rng) -> Result<QuerySplit> {
    if k * m > lib.len() {
        return Err(Error::Validation(format!("k*m = {} exceeds library size {}", k * m, lib.len())));
    }
    let points: Vec<Vec<f64>> = lib.demos().iter().map(|d| d.image_emb.clone()).collect();
    let (cents, assign) = kmeans(&points, k, rng)?;
    let mut chosen = Vec::with_capacity(k * m);
    for (c, cent) in cents.iter().enumerate() {
        let mut members: Vec<usize> = (0..points.len()).filter(|&i| assign[i] == c).collect();
        if members.len() < m {
            return Err(Error::Search(format!("cluster {c} has {} members, fewer than m = {m}", members.len())));
        }
        members.sort_by(|&a, &b| sq_dist(&points[a], cent).total_cmp(&sq_dist(&points[b], cent)).then(a.cmp(&b)));
        chosen.extend_from_slice(&members[..m]);
    }
    let queries = chosen.iter().map(|&i| lib.demos()[i].as_query()).collect();
    let mut keep: Vec<usize> = (0..lib.len()).filter(|i| !chosen.contains(i)).collect();
    keep.sort_unstable();
    if keep.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let library = lib.subset(&keep)?;
    Ok(QuerySplit { queries, library, centroids: cents })
}
