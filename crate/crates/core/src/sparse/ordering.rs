use std::collections::VecDeque;

use super::CsrMatrix;

/// Symmetric ordering applied before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Natural,
    #[default]
    ReverseCuthillMcKee,
}

impl std::str::FromStr for Ordering {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "natural" => Ok(Ordering::Natural),
            "rcm" | "fill-reducing" | "reverse_cuthill_mckee" => Ok(Ordering::ReverseCuthillMcKee),
            _ => Err(format!("unknown ordering '{s}' (expected natural or rcm)")),
        }
    }
}

/// Permutation with `perm[new] = old`.
pub fn compute_ordering(a: &CsrMatrix, ordering: Ordering) -> Vec<usize> {
    match ordering {
        Ordering::Natural => (0..a.nrows()).collect(),
        Ordering::ReverseCuthillMcKee => reverse_cuthill_mckee(a),
    }
}

fn adjacency(a: &CsrMatrix) -> Vec<Vec<usize>> {
    let n = a.nrows();
    let mut adj = vec![Vec::new(); n];
    for (i, j, _) in a.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }
    adj
}

/// BFS level structure from `root` restricted to unvisited nodes; returns
/// (eccentricity, last level).
fn levels(adj: &[Vec<usize>], root: usize, visited: &[bool]) -> (usize, Vec<usize>) {
    let mut depth = vec![usize::MAX; adj.len()];
    depth[root] = 0;
    let mut queue = VecDeque::from([root]);
    let mut max_depth = 0;
    let mut last = vec![root];
    while let Some(u) = queue.pop_front() {
        if depth[u] > max_depth {
            max_depth = depth[u];
            last.clear();
        }
        if depth[u] == max_depth {
            last.push(u);
        }
        for &w in &adj[u] {
            if !visited[w] && depth[w] == usize::MAX {
                depth[w] = depth[u] + 1;
                queue.push_back(w);
            }
        }
    }
    (max_depth, last)
}

fn pseudo_peripheral(adj: &[Vec<usize>], start: usize, visited: &[bool]) -> usize {
    let mut root = start;
    let (mut ecc, mut last) = levels(adj, root, visited);
    loop {
        let cand = *last.iter().min_by_key(|&&u| adj[u].len()).unwrap();
        let (e, l) = levels(adj, cand, visited);
        if e <= ecc {
            return root;
        }
        root = cand;
        ecc = e;
        last = l;
    }
}

/// Reverse Cuthill–McKee on the symmetrized pattern of `a`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let adj = adjacency(a);
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&u| (adj[u].len(), u));
    let mut nbrs = Vec::new();
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let root = pseudo_peripheral(&adj, seed, &visited);
        visited[root] = true;
        let mut head = order.len();
        order.push(root);
        while head < order.len() {
            let u = order[head];
            head += 1;
            nbrs.clear();
            nbrs.extend(adj[u].iter().copied().filter(|&w| !visited[w]));
            nbrs.sort_by_key(|&w| (adj[w].len(), w));
            for &w in &nbrs {
                visited[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Half-bandwidth of `P A Pᵀ` for `perm[new] = old`.
pub fn bandwidth(a: &CsrMatrix, perm: &[usize]) -> usize {
    let mut pinv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        pinv[old] = new;
    }
    a.triplets()
        .map(|(i, j, _)| pinv[i].abs_diff(pinv[j]))
        .max()
        .unwrap_or(0)
}
