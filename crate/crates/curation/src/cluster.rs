use std::collections::VecDeque;

/// Cluster id, or `None` for noise.
pub type Label = Option<usize>;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DBSCAN with Euclidean distance. A point's neighborhood includes itself
/// and every point within `eps` (inclusive); a core point has at least
/// `min_pts` neighbors. Seeds are taken in index order and expanded
/// breadth-first, so a border point joins the first cluster to reach it.
/// Cluster ids count up from 0 in creation order.
pub fn dbscan_cluster(vectors: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Label> {
    let n = vectors.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist2(&vectors[i], &vectors[j]) <= eps2).collect() };
    let mut labels: Vec<Label> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(i);
        if seeds.len() < min_pts {
            continue;
        }
        let id = next;
        next += 1;
        labels[i] = Some(id);
        let mut queue: VecDeque<usize> = seeds.into_iter().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb = neighbors(j);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
    }
    labels
}
