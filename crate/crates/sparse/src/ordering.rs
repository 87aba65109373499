//! Fill-reducing orderings for symmetric sparse matrices.
//!
//! All orderings return `perm` with `perm[new] = old`.

use crate::CscMatrix;

/// How to order the unknowns before factorization.
#[derive(Debug, Clone, Default)]
pub enum Ordering {
    /// Keep the given order.
    Natural,
    /// Reverse Cuthill–McKee; profile reduction, no coordinates needed.
    #[default]
    ReverseCuthillMckee,
    /// Geometric nested dissection driven by one point per unknown.
    /// Unknowns with `None` are ordered last (e.g. shared intercepts).
    NestedDissection(Vec<Option<[f64; 3]>>),
}

impl Ordering {
    pub fn compute(&self, a: &CscMatrix) -> Vec<usize> {
        match self {
            Ordering::Natural => (0..a.ncols()).collect(),
            Ordering::ReverseCuthillMckee => reverse_cuthill_mckee(a),
            Ordering::NestedDissection(coords) => nested_dissection(a, coords, ND_LEAF_SIZE),
        }
    }
}

/// Leaf size of the nested-dissection recursion.
pub const ND_LEAF_SIZE: usize = 48;

fn adjacency_degree(a: &CscMatrix, j: usize) -> usize {
    let (rows, _) = a.col(j);
    rows.iter().filter(|&&r| r != j).count()
}

pub fn reverse_cuthill_mckee(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols();
    let deg: Vec<usize> = (0..n).map(|j| adjacency_degree(a, j)).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&j| (deg[j], j));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        let root = pseudo_peripheral(a, start, &deg);
        let begin = order.len();
        visited[root] = true;
        order.push(root);
        let mut head = begin;
        let mut nbrs = Vec::new();
        while head < order.len() {
            let v = order[head];
            head += 1;
            nbrs.clear();
            nbrs.extend(
                a.col(v)
                    .0
                    .iter()
                    .copied()
                    .filter(|&u| u != v && !visited[u]),
            );
            nbrs.sort_by_key(|&u| (deg[u], u));
            for &u in &nbrs {
                visited[u] = true;
                order.push(u);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &CscMatrix, start: usize, deg: &[usize]) -> usize {
    let n = a.ncols();
    let mut level = vec![usize::MAX; n];
    let mut root = start;
    let mut ecc = 0;
    for _ in 0..8 {
        let mut queue = vec![root];
        let mut touched = vec![root];
        level[root] = 0;
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            for &u in a.col(v).0 {
                if level[u] == usize::MAX {
                    level[u] = level[v] + 1;
                    queue.push(u);
                    touched.push(u);
                }
            }
        }
        let far = *queue.last().unwrap();
        let far_level = level[far];
        // among the last level pick the minimum degree node
        let cand = queue
            .iter()
            .copied()
            .filter(|&u| level[u] == far_level)
            .min_by_key(|&u| (deg[u], u))
            .unwrap_or(far);
        for &t in &touched {
            level[t] = usize::MAX;
        }
        if far_level <= ecc {
            break;
        }
        ecc = far_level;
        root = cand;
    }
    root
}

/// Recursive coordinate bisection with graph vertex separators.
///
/// Each level splits the current node set at the median along whichever
/// coordinate axis yields the fewest boundary nodes, then takes as separator the smaller of the two sets of
/// boundary nodes (nodes with a neighbour across the cut). Nodes of very
/// high degree and nodes without coordinates go last.
pub fn nested_dissection(
    a: &CscMatrix,
    coords: &[Option<[f64; 3]>],
    leaf_size: usize,
) -> Vec<usize> {
    let n = a.ncols();
    assert_eq!(coords.len(), n, "one coordinate per unknown");
    let dense_threshold = (10.0 * (n as f64).sqrt()).max(16.0) as usize;
    let mut last = Vec::new();
    let mut active = Vec::with_capacity(n);
    for j in 0..n {
        if coords[j].is_none() || adjacency_degree(a, j) > dense_threshold {
            last.push(j);
        } else {
            active.push(j);
        }
    }
    let mut ctx = Dissection {
        a,
        coords,
        side: vec![0u8; n],
        leaf_size: leaf_size.max(2),
        out: Vec::with_capacity(n),
    };
    ctx.dissect(active);
    let mut out = ctx.out;
    out.extend(last);
    out
}

struct Dissection<'a> {
    a: &'a CscMatrix,
    coords: &'a [Option<[f64; 3]>],
    side: Vec<u8>,
    leaf_size: usize,
    out: Vec<usize>,
}

impl Dissection<'_> {
    fn point(&self, v: usize) -> [f64; 3] {
        self.coords[v].expect("active nodes carry coordinates")
    }

    /// Median split of `nodes` sorted along `axis`, with the boundary flags
    /// of each half (nodes with a neighbour across the cut).
    fn split(&mut self, nodes: &mut [usize], axis: usize) -> (Vec<bool>, Vec<bool>) {
        nodes.sort_by(|&x, &y| {
            self.point(x)[axis]
                .total_cmp(&self.point(y)[axis])
                .then(x.cmp(&y))
        });
        let mid = nodes.len() / 2;
        let (left, right) = nodes.split_at(mid);
        for &v in left {
            self.side[v] = 1;
        }
        for &v in right {
            self.side[v] = 2;
        }
        let boundary = |s: &Self, set: &[usize], other: u8| -> Vec<bool> {
            set.iter()
                .map(|&v| s.a.col(v).0.iter().any(|&u| s.side[u] == other))
                .collect()
        };
        let left_b = boundary(self, left, 2);
        let right_b = boundary(self, right, 1);
        for &v in nodes.iter() {
            self.side[v] = 0;
        }
        (left_b, right_b)
    }

    fn dissect(&mut self, mut nodes: Vec<usize>) {
        if nodes.is_empty() {
            return;
        }
        if nodes.len() <= self.leaf_size {
            self.out.extend(nodes);
            return;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &v in &nodes {
            let p = self.point(v);
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        // cut along the axis giving the smallest separator
        let count = |b: &[bool]| b.iter().filter(|&&x| x).count();
        let mut best: Option<(usize, usize)> = None;
        for axis in (0..3).filter(|&d| hi[d] > lo[d]) {
            let (lb, rb) = self.split(&mut nodes, axis);
            let size = count(&lb).min(count(&rb));
            if best.is_none_or(|(_, s)| size < s) {
                best = Some((axis, size));
            }
        }
        let Some((axis, _)) = best else {
            self.out.extend(nodes);
            return;
        };
        let (left_b, right_b) = self.split(&mut nodes, axis);
        let mid = nodes.len() / 2;
        let (left, right) = nodes.split_at(mid);
        let nl = count(&left_b);
        let nr = count(&right_b);
        let mut sep = Vec::new();
        let mut part_l = Vec::with_capacity(left.len());
        let mut part_r = Vec::with_capacity(right.len());
        if nr <= nl {
            part_l.extend_from_slice(left);
            for (&v, &b) in right.iter().zip(&right_b) {
                if b {
                    sep.push(v)
                } else {
                    part_r.push(v)
                }
            }
        } else {
            part_r.extend_from_slice(right);
            for (&v, &b) in left.iter().zip(&left_b) {
                if b {
                    sep.push(v)
                } else {
                    part_l.push(v)
                }
            }
        }
        if part_l.is_empty() || part_r.is_empty() {
            // cut did not separate anything useful; fall back to a leaf
            self.out.extend(part_l);
            self.out.extend(part_r);
            self.out.extend(sep);
            return;
        }
        self.dissect(part_l);
        self.dissect(part_r);
        self.out.extend(sep);
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_laplacian(nx: usize, ny: usize) -> (CscMatrix, Vec<Option<[f64; 3]>>) {
        let idx = |i: usize, j: usize| i * ny + j;
        let mut t = Vec::new();
        let mut coords = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                coords.push(Some([i as f64, j as f64, 0.0]));
                t.push((idx(i, j), idx(i, j), 4.0));
                if i + 1 < nx {
                    t.push((idx(i, j), idx(i + 1, j), -1.0));
                    t.push((idx(i + 1, j), idx(i, j), -1.0));
                }
                if j + 1 < ny {
                    t.push((idx(i, j), idx(i, j + 1), -1.0));
                    t.push((idx(i, j + 1), idx(i, j), -1.0));
                }
            }
        }
        (
            CscMatrix::from_triplets(nx * ny, nx * ny, &t).unwrap(),
            coords,
        )
    }

    #[test]
    fn orderings_are_permutations() {
        let (a, coords) = grid_laplacian(13, 9);
        assert!(is_permutation(&reverse_cuthill_mckee(&a)));
        assert!(is_permutation(&nested_dissection(&a, &coords, 8)));
    }

    #[test]
    fn coordinate_free_nodes_go_last() {
        let (a, mut coords) = grid_laplacian(4, 4);
        coords[5] = None;
        let p = nested_dissection(&a, &coords, 4);
        assert_eq!(*p.last().unwrap(), 5);
    }

    #[test]
    fn rcm_handles_disconnected_graph() {
        let a = CscMatrix::identity(5);
        let p = reverse_cuthill_mckee(&a);
        assert!(is_permutation(&p));
    }
}
