//! Global weighted minimum cut (Stoer–Wagner) and recursive partitioning.
//!
//! Nodes are processed in lexicographic id order; phases start from the
//! lowest id and break max-adjacency ties by lowest index, so results are
//! deterministic. The side containing the lowest id is reported first.

/// Dense symmetric weight matrix over labelled nodes.
#[derive(Clone, Debug)]
pub struct DenseGraph {
    pub labels: Vec<String>,
    pub w: Vec<Vec<u64>>,
}

impl DenseGraph {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Weighted degree of `i` restricted to `members`.
    fn degree_within(&self, i: usize, members: &[usize]) -> u64 {
        members.iter().map(|&j| self.w[i][j]).sum()
    }

    fn volume(&self, side: &[usize], members: &[usize]) -> u64 {
        side.iter().map(|&i| self.degree_within(i, members)).sum()
    }
}

/// A cut of some node subset into two non-empty sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cut {
    pub weight: u64,
    pub side1: Vec<usize>,
    pub side2: Vec<usize>,
}

/// Minimum cut of the subgraph induced by `members` (indices into `g`),
/// which must be sorted by label and have at least two entries.
pub fn stoer_wagner(g: &DenseGraph, members: &[usize]) -> Cut {
    let n = members.len();
    assert!(n >= 2, "a cut needs two nodes");
    let mut w: Vec<Vec<u64>> = members
        .iter()
        .map(|&i| members.iter().map(|&j| g.w[i][j]).collect())
        .collect();
    // groups[v]: original local indices merged into super-node v.
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut alive: Vec<usize> = (0..n).collect();
    let mut best: Option<(u64, Vec<usize>)> = None;

    while alive.len() > 1 {
        let m = alive.len();
        let mut in_a = vec![false; n];
        let mut conn = vec![0u64; n];
        let mut prev = alive[0];
        let mut last = alive[0];
        in_a[alive[0]] = true;
        for &v in &alive {
            conn[v] = w[alive[0]][v];
        }
        for step in 1..m {
            let mut pick = None;
            for &v in &alive {
                if in_a[v] {
                    continue;
                }
                match pick {
                    None => pick = Some(v),
                    Some(p) if conn[v] > conn[p] => pick = Some(v),
                    _ => {}
                }
            }
            let v = pick.expect("unvisited node remains");
            in_a[v] = true;
            if step == m - 1 {
                prev = last;
                last = v;
                let cut_of_phase = conn[v];
                if best.as_ref().is_none_or(|(bw, _)| cut_of_phase < *bw) {
                    best = Some((cut_of_phase, groups[v].clone()));
                }
            } else {
                last = v;
                for &x in &alive {
                    if !in_a[x] {
                        conn[x] += w[v][x];
                    }
                }
            }
        }
        // Merge `last` into `prev`.
        let moved = std::mem::take(&mut groups[last]);
        groups[prev].extend(moved);
        for &x in &alive {
            if x != prev && x != last {
                w[prev][x] += w[last][x];
                w[x][prev] = w[prev][x];
            }
        }
        alive.retain(|&x| x != last);
    }

    let (weight, shore) = best.expect("at least one phase ran");
    let mut in_shore = vec![false; n];
    for &i in &shore {
        in_shore[i] = true;
    }
    // Side 1 holds the lowest label (local index 0).
    let flip = in_shore[0];
    let mut side1 = Vec::new();
    let mut side2 = Vec::new();
    for (local, &orig) in members.iter().enumerate() {
        if in_shore[local] == flip {
            side1.push(orig);
        } else {
            side2.push(orig);
        }
    }
    Cut {
        weight,
        side1,
        side2,
    }
}

/// Recursively split `g` by minimum cut until every component is dense
/// (`cut / min(vol(side1), vol(side2)) > theta`) or has fewer than three
/// nodes. Components are returned ordered by their lowest label.
pub fn min_cut_partition(g: &DenseGraph, theta: f64) -> Vec<Vec<usize>> {
    if g.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g.labels[a].cmp(&g.labels[b]));
    let mut out = Vec::new();
    let mut stack = vec![order];
    while let Some(members) = stack.pop() {
        if members.len() < 3 {
            out.push(members);
            continue;
        }
        let cut = stoer_wagner(g, &members);
        let v1 = g.volume(&cut.side1, &members);
        let v2 = g.volume(&cut.side2, &members);
        let smaller = v1.min(v2);
        let density = if smaller == 0 {
            0.0
        } else {
            cut.weight as f64 / smaller as f64
        };
        if density > theta {
            out.push(members);
        } else {
            stack.push(cut.side2);
            stack.push(cut.side1);
        }
    }
    out.sort_by(|a, b| g.labels[a[0]].cmp(&g.labels[b[0]]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize, u64)]) -> DenseGraph {
        let mut w = vec![vec![0; n]; n];
        for &(a, b, x) in edges {
            w[a][b] = x;
            w[b][a] = x;
        }
        DenseGraph {
            labels: (0..n).map(|i| format!("n{i}")).collect(),
            w,
        }
    }

    /// Exhaustive minimum over all 2^(n-1) - 1 bipartitions.
    fn brute_min_cut(g: &DenseGraph) -> u64 {
        let n = g.len();
        let mut best = u64::MAX;
        for mask in 1u32..(1 << (n - 1)) {
            // Node n-1 is always on the zero side.
            let mut c = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let a = mask >> i & 1 == 1;
                    let b = mask >> j & 1 == 1;
                    if a != b {
                        c += g.w[i][j];
                    }
                }
            }
            best = best.min(c);
        }
        best
    }

    #[test]
    fn two_cliques_and_a_bridge() {
        let mut e = vec![];
        for (a, b) in [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)] {
            e.push((a, b, 5));
        }
        e.push((2, 3, 1));
        let g = graph(6, &e);
        assert_eq!(brute_min_cut(&g), 1);
        let all: Vec<usize> = (0..6).collect();
        let cut = stoer_wagner(&g, &all);
        assert_eq!(cut.weight, 1);
        assert_eq!(cut.side1, vec![0, 1, 2]);
        assert_eq!(min_cut_partition(&g, 0.5), vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }

    #[test]
    fn clique_stays_whole() {
        let mut e = vec![];
        for a in 0..5 {
            for b in (a + 1)..5 {
                e.push((a, b, 3));
            }
        }
        let g = graph(5, &e);
        assert_eq!(min_cut_partition(&g, 0.5), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn small_and_empty() {
        assert!(min_cut_partition(&graph(0, &[]), 0.5).is_empty());
        assert_eq!(min_cut_partition(&graph(2, &[]), 0.5), vec![vec![0, 1]]);
        // Edgeless triple falls apart.
        assert_eq!(
            min_cut_partition(&graph(3, &[]), 0.5),
            vec![vec![0, 1], vec![2]]
        );
    }

    #[test]
    fn matches_exhaustive_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(2..=8);
            let mut e = vec![];
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.random_bool(0.5) {
                        e.push((a, b, rng.random_range(1..10)));
                    }
                }
            }
            let g = graph(n, &e);
            let all: Vec<usize> = (0..n).collect();
            let cut = stoer_wagner(&g, &all);
            assert_eq!(cut.weight, brute_min_cut(&g));
            assert!(!cut.side1.is_empty() && !cut.side2.is_empty());
            assert!(cut.side1.contains(&0));
            let mut crossing = 0;
            for &a in &cut.side1 {
                for &b in &cut.side2 {
                    crossing += g.w[a][b];
                }
            }
            assert_eq!(crossing, cut.weight);
        }
    }
}
