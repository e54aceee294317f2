//! Zero-dimensional persistent homology over point clouds and the
//! topological consistency loss built on it.
//!
//! A mini-batch is read as a point cloud; connected components of its
//! Vietoris-Rips filtration die exactly at minimum-spanning-tree edge
//! lengths, so the persistence pairing is the MST edge set computed with a
//! deterministic tie rule. The loss compares pairing-selected distances
//! between the input and latent clouds in both directions, and its
//! subgradient treats the pairing as locally constant, which matches how
//! pairings behave under small perturbations.

use crate::autodiff::Tensor;

pub type Result<T> = std::result::Result<T, TopologyError>;

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("non-finite coordinate in point cloud")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pairing has {got} edges, expected {want}")]
    StalePairing { got: usize, want: usize },
    #[error("diagrams have different homology dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("point cloud must contain at least one point")]
    Empty,
}

/// A batch of points: `n` rows of dimension `dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl PointCloud {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        if data.len() != n * dim {
            return Err(TopologyError::DimensionMismatch(format!(
                "{n} x {dim} cloud needs {} values, got {}",
                n * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TopologyError::NonFinite);
        }
        Ok(PointCloud { data, n, dim })
    }

    /// Reads a tensor as a point cloud: the leading dimension indexes rows,
    /// everything else is flattened per row.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let n = t.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let dim = t.numel() / n;
        PointCloud::new(n, dim, t.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[cfg(test)]
    pub(crate) fn coord_mut(&mut self, flat: usize) -> &mut f64 {
        &mut self.data[flat]
    }
}

/// Symmetric matrix of pairwise Euclidean distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    entries: Vec<f64>,
    n: usize,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// The 0-dimensional persistence pairing: MST edges in acceptance order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairing0 {
    edges: Vec<(usize, usize)>,
}

impl Pairing0 {
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Birth/death bars of one homology dimension. For dimension 0 from a Rips
/// filtration all births are zero and the essential bar is omitted.
#[derive(Clone, Debug, PartialEq)]
pub struct PersistenceDiagram {
    pub dim: usize,
    bars: Vec<(f64, f64)>,
}

impl PersistenceDiagram {
    pub fn new(dim: usize, bars: Vec<(f64, f64)>) -> Self {
        debug_assert!(bars.iter().all(|(b, d)| b <= d));
        PersistenceDiagram { dim, bars }
    }

    pub fn bars(&self) -> &[(f64, f64)] {
        &self.bars
    }

    /// CSV rows `dim,birth,death`, one bar per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,birth,death\n");
        for (b, d) in &self.bars {
            out.push_str(&format!("{},{},{}\n", self.dim, b, d));
        }
        out
    }
}

/// Euclidean pairwise distances; the upper triangle is computed once and
/// mirrored so the matrix is exactly symmetric.
pub fn pairwise_distances(cloud: &PointCloud) -> DistanceMatrix {
    let n = cloud.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for (a, b) in cloud.row(i).iter().zip(cloud.row(j)) {
                let d = a - b;
                acc += d * d;
            }
            let d = acc.sqrt();
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    DistanceMatrix { entries, n }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Kruskal's algorithm with the deterministic tie rule: candidate edges are
/// examined in ascending `(distance, i, j)` order and each accepted edge
/// kills one component at filtration value `distance`.
pub fn persistence0(dist: &DistanceMatrix) -> (Pairing0, PersistenceDiagram) {
    let n = dist.len();
    if n == 1 {
        return (Pairing0 { edges: vec![] }, PersistenceDiagram::new(0, vec![]));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            candidates.push((dist.get(i, j), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut uf = UnionFind::new(n);
    let mut edges = Vec::with_capacity(n - 1);
    let mut bars = Vec::with_capacity(n - 1);
    for (d, i, j) in candidates {
        if uf.union(i, j) {
            edges.push((i, j));
            bars.push((0.0, d));
            if edges.len() == n - 1 {
                break;
            }
        }
    }
    (Pairing0 { edges }, PersistenceDiagram::new(0, bars))
}

/// The two directed consistency terms and their sum:
/// `L_xz = 1/2 sum_{(i,j) in pi_x} (A_x[i,j] - A_z[i,j])^2`, mirrored for
/// `L_zx`, and `L_t = L_xz + L_zx`.
pub fn topo_loss(
    a_x: &DistanceMatrix,
    a_z: &DistanceMatrix,
    pi_x: &Pairing0,
    pi_z: &Pairing0,
) -> Result<(f64, f64, f64)> {
    if a_x.len() != a_z.len() {
        return Err(TopologyError::DimensionMismatch(format!(
            "distance matrices of {} and {} points",
            a_x.len(),
            a_z.len()
        )));
    }
    let half_sq_sum = |pairing: &Pairing0, m1: &DistanceMatrix, m2: &DistanceMatrix| {
        0.5 * pairing
            .edges()
            .iter()
            .map(|&(i, j)| {
                let d = m1.get(i, j) - m2.get(i, j);
                d * d
            })
            .sum::<f64>()
    };
    let l_xz = half_sq_sum(pi_x, a_x, a_z);
    let l_zx = half_sq_sum(pi_z, a_z, a_x);
    Ok((l_xz + l_zx, l_xz, l_zx))
}

/// Exact subgradient of `topo_loss` with the pairings held fixed. Each
/// selected squared-difference term contributes through
/// `d||p_i - p_j|| / dp_i = (p_i - p_j) / ||p_i - p_j||`; edges shorter than
/// 1e-12 contribute nothing on the degenerate side.
pub fn topo_loss_backward(
    x: &PointCloud,
    z: &PointCloud,
    pi_x: &Pairing0,
    pi_z: &Pairing0,
) -> Result<(Tensor, Tensor)> {
    if x.len() != z.len() {
        return Err(TopologyError::DimensionMismatch(format!(
            "clouds of {} and {} points",
            x.len(),
            z.len()
        )));
    }
    let want = x.len() - 1;
    for p in [pi_x, pi_z] {
        if p.len() != want {
            return Err(TopologyError::StalePairing { got: p.len(), want });
        }
    }

    let mut grad_x = vec![0.0; x.len() * x.dim()];
    let mut grad_z = vec![0.0; z.len() * z.dim()];

    // One directed term: d/d(clouds) of 1/2 (d_sel(i,j) - d_other(i,j))^2
    // summed over the selecting pairing.
    let add_term = |pairing: &Pairing0,
                        sel: &PointCloud,
                        other: &PointCloud,
                        grad_sel: &mut [f64],
                        grad_other: &mut [f64]| {
        for &(i, j) in pairing.edges() {
            let d_sel = dist_between(sel, i, j);
            let d_other = dist_between(other, i, j);
            let diff = d_sel - d_other;
            if diff == 0.0 {
                continue;
            }
            unit_scaled_accumulate(sel, i, j, d_sel, diff, grad_sel);
            unit_scaled_accumulate(other, i, j, d_other, -diff, grad_other);
        }
    };
    add_term(pi_x, x, z, &mut grad_x, &mut grad_z);
    add_term(pi_z, z, x, &mut grad_z, &mut grad_x);

    Ok((
        Tensor::from_vec(vec![x.len(), x.dim()], grad_x).expect("gradient shape"),
        Tensor::from_vec(vec![z.len(), z.dim()], grad_z).expect("gradient shape"),
    ))
}

fn dist_between(cloud: &PointCloud, i: usize, j: usize) -> f64 {
    cloud
        .row(i)
        .iter()
        .zip(cloud.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// grad[i] += scale * (p_i - p_j)/d, grad[j] gets the negation; degenerate
/// edges (d < 1e-12) take the zero subgradient.
fn unit_scaled_accumulate(cloud: &PointCloud, i: usize, j: usize, d: f64, scale: f64, grad: &mut [f64]) {
    if d < 1e-12 {
        return;
    }
    let dim = cloud.dim();
    for k in 0..dim {
        let u = (cloud.row(i)[k] - cloud.row(j)[k]) / d;
        grad[i * dim + k] += scale * u;
        grad[j * dim + k] -= scale * u;
    }
}

/// Bottleneck distance between two diagrams of the same dimension: the
/// smallest cost `c` such that bars can be matched to each other (L-inf
/// cost) or to the diagonal (half persistence) with every cost at most `c`.
/// Feasibility at a candidate cost is a bipartite perfect-matching test.
pub fn bottleneck0(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> Result<f64> {
    if d1.dim != d2.dim {
        return Err(TopologyError::DimMismatch(d1.dim, d2.dim));
    }
    let a = d1.bars();
    let b = d2.bars();
    if a.is_empty() && b.is_empty() {
        return Ok(0.0);
    }

    let linf = |x: (f64, f64), y: (f64, f64)| (x.0 - y.0).abs().max((x.1 - y.1).abs());
    let diag = |x: (f64, f64)| (x.1 - x.0) / 2.0;

    let mut candidates: Vec<f64> = vec![0.0];
    for &bar_a in a {
        candidates.push(diag(bar_a));
        for &bar_b in b {
            candidates.push(linf(bar_a, bar_b));
        }
    }
    for &bar_b in b {
        candidates.push(diag(bar_b));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let (mut lo, mut hi) = (0, candidates.len() - 1);
    debug_assert!(matching_feasible(a, b, candidates[hi], linf, diag));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if matching_feasible(a, b, candidates[mid], &linf, &diag) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(candidates[lo])
}

/// Perfect matching on the augmented bipartite graph: left vertices are the
/// bars of `a` plus one diagonal slot per bar of `b`, right side symmetric,
/// and diagonal slots pair with each other for free.
fn matching_feasible(
    a: &[(f64, f64)],
    b: &[(f64, f64)],
    c: f64,
    linf: impl Fn((f64, f64), (f64, f64)) -> f64,
    diag: impl Fn((f64, f64)) -> f64,
) -> bool {
    let (m, k) = (a.len(), b.len());
    let left = m + k;
    let right = k + m;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); left];
    for (i, &bar) in a.iter().enumerate() {
        for (j, &other) in b.iter().enumerate() {
            if linf(bar, other) <= c {
                adj[i].push(j);
            }
        }
        if diag(bar) <= c {
            adj[i].push(k + i);
        }
    }
    for (j, &other) in b.iter().enumerate() {
        if diag(other) <= c {
            adj[m + j].push(j);
        }
        for i in 0..m {
            adj[m + j].push(k + i);
        }
    }

    let mut matched_right: Vec<Option<usize>> = vec![None; right];
    let mut size = 0;
    for l in 0..left {
        let mut seen = vec![false; right];
        if augment(l, &adj, &mut matched_right, &mut seen) {
            size += 1;
        }
    }
    size == left
}

fn augment(l: usize, adj: &[Vec<usize>], matched_right: &mut Vec<Option<usize>>, seen: &mut [bool]) -> bool {
    for &r in &adj[l] {
        if seen[r] {
            continue;
        }
        seen[r] = true;
        if matched_right[r].is_none() || augment(matched_right[r].unwrap(), adj, matched_right, seen) {
            matched_right[r] = Some(l);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(rows: &[&[f64]]) -> PointCloud {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PointCloud::new(rows.len(), dim, data).unwrap()
    }

    fn random_cloud(n: usize, dim: usize, seed: u64) -> PointCloud {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, 90);
        let data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PointCloud::new(n, dim, data).unwrap()
    }

    /// Exhaustive-enumeration Kruskal over an explicit edge list; the oracle
    /// for pairing weight.
    fn brute_force_mst_weight(dist: &DistanceMatrix) -> f64 {
        let n = dist.len();
        let mut edges: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((dist.get(i, j), i, j));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut total = 0.0;
        let mut used = 0;
        for (d, i, j) in edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                total += d;
                used += 1;
                if used == n - 1 {
                    break;
                }
            }
        }
        total
    }

    #[test]
    fn single_point_has_zero_matrix_and_empty_diagram() {
        let c = cloud(&[&[1.0, 2.0]]);
        let d = pairwise_distances(&c);
        assert_eq!(d.len(), 1);
        assert_eq!(d.get(0, 0), 0.0);
        let (pairing, diagram) = persistence0(&d);
        assert!(pairing.is_empty());
        assert!(diagram.bars().is_empty());
    }

    #[test]
    fn three_four_five_triangle_distance() {
        let c = cloud(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let d = pairwise_distances(&c);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
    }

    #[test]
    fn pairwise_matches_double_loop_oracle() {
        let c = random_cloud(16, 8, 4);
        let d = pairwise_distances(&c);
        for i in 0..16 {
            for j in 0..16 {
                let naive: f64 = c
                    .row(i)
                    .iter()
                    .zip(c.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_points_pair_along_the_line() {
        // Points at 0, 1, 3: candidate edges 1, 2, 3; the length-3 edge
        // (0,2) closes a cycle and is rejected.
        let c = cloud(&[&[0.0], &[1.0], &[3.0]]);
        let (pairing, diagram) = persistence0(&pairwise_distances(&c));
        assert_eq!(pairing.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(diagram.bars(), &[(0.0, 1.0), (0.0, 2.0)]);
    }

    #[test]
    fn pairing_weight_equals_brute_force_mst() {
        for seed in 0..20 {
            let n = 2 + (seed as usize * 7) % 31;
            let c = random_cloud(n, 3, seed);
            let d = pairwise_distances(&c);
            let (pairing, diagram) = persistence0(&d);
            assert_eq!(pairing.len(), n - 1);
            let weight: f64 = pairing.edges().iter().map(|&(i, j)| d.get(i, j)).sum();
            assert!((weight - brute_force_mst_weight(&d)).abs() < 1e-12);
            let death_sum: f64 = diagram.bars().iter().map(|(_, d)| d).sum();
            assert!((death_sum - weight).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_matrices_give_zero_loss() {
        let c = random_cloud(12, 4, 9);
        let d = pairwise_distances(&c);
        let (p, _) = persistence0(&d);
        let (lt, lxz, lzx) = topo_loss(&d, &d, &p, &p).unwrap();
        assert_eq!(lt, 0.0);
        assert_eq!(lxz, 0.0);
        assert_eq!(lzx, 0.0);
    }

    #[test]
    fn two_point_hand_case() {
        // A single edge of length 2 in X, 1 in Z: both directed terms are
        // 1/2 * (2-1)^2 = 0.5.
        let x = cloud(&[&[0.0], &[2.0]]);
        let z = cloud(&[&[0.0], &[1.0]]);
        let (ax, az) = (pairwise_distances(&x), pairwise_distances(&z));
        let (px, pz) = (persistence0(&ax).0, persistence0(&az).0);
        let (lt, lxz, lzx) = topo_loss(&ax, &az, &px, &pz).unwrap();
        assert!((lxz - 0.5).abs() < 1e-15);
        assert!((lzx - 0.5).abs() < 1e-15);
        assert!((lt - 1.0).abs() < 1e-15);
    }

    #[test]
    fn isometric_latent_gives_zero_loss() {
        // Rotation + translation preserves all pairwise distances.
        let x = random_cloud(10, 2, 5);
        let (s, c) = (0.6_f64.sin(), 0.6_f64.cos());
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let r = x.row(i);
                vec![c * r[0] - s * r[1] + 3.0, s * r[0] + c * r[1] - 1.5]
            })
            .collect();
        let z = PointCloud::new(10, 2, rows.concat()).unwrap();
        let (ax, az) = (pairwise_distances(&x), pairwise_distances(&z));
        let (px, pz) = (persistence0(&ax).0, persistence0(&az).0);
        let (lt, _, _) = topo_loss(&ax, &az, &px, &pz).unwrap();
        assert!(lt < 1e-18, "isometry should preserve the loss, got {lt}");
    }

    #[test]
    fn gradient_is_zero_at_the_minimum() {
        let x = random_cloud(8, 3, 2);
        let d = pairwise_distances(&x);
        let (p, _) = persistence0(&d);
        let (gx, gz) = topo_loss_backward(&x, &x, &p, &p).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_gradient_matches_hand_chain_rule() {
        let x = cloud(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let z = cloud(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let (ax, az) = (pairwise_distances(&x), pairwise_distances(&z));
        let (px, pz) = (persistence0(&ax).0, persistence0(&az).0);
        // Both pairings select the same single edge, so
        // dL/dz0 = 2 * (A_z - A_x) * (z0 - z1)/||z0 - z1||.
        let (_, gz) = topo_loss_backward(&x, &z, &px, &pz).unwrap();
        let expect = 2.0 * (1.0 - 2.0) * (0.0 - 1.0) / 1.0;
        assert!((gz.data()[0] - expect).abs() < 1e-12, "{:?}", gz.data());
        assert!((gz.data()[2] + expect).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_with_frozen_pairing() {
        let h = 1e-6;
        for seed in [3u64, 17, 40] {
            let x = random_cloud(16, 8, seed);
            let z = random_cloud(16, 8, seed + 1000);
            let (ax, az) = (pairwise_distances(&x), pairwise_distances(&z));
            let (px, pz) = (persistence0(&ax).0, persistence0(&az).0);
            if has_near_tie(&ax) || has_near_tie(&az) {
                continue;
            }
            let (gx, gz) = topo_loss_backward(&x, &z, &px, &pz).unwrap();
            let loss_at = |xc: &PointCloud, zc: &PointCloud| {
                let (a1, a2) = (pairwise_distances(xc), pairwise_distances(zc));
                topo_loss(&a1, &a2, &px, &pz).unwrap().0
            };
            for coord in (0..x.len() * x.dim()).step_by(13) {
                let mut xp = x.clone();
                *xp.coord_mut(coord) += h;
                let mut xm = x.clone();
                *xm.coord_mut(coord) -= h;
                let numeric = (loss_at(&xp, &z) - loss_at(&xm, &z)) / (2.0 * h);
                let analytic = gx.data()[coord];
                let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
                assert!(rel < 1e-4, "x coord {coord}: {analytic} vs {numeric}");
            }
            for coord in (0..z.len() * z.dim()).step_by(13) {
                let mut zp = z.clone();
                *zp.coord_mut(coord) += h;
                let mut zm = z.clone();
                *zm.coord_mut(coord) -= h;
                let numeric = (loss_at(&x, &zp) - loss_at(&x, &zm)) / (2.0 * h);
                let analytic = gz.data()[coord];
                let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
                assert!(rel < 1e-4, "z coord {coord}: {analytic} vs {numeric}");
            }
        }
    }

    fn has_near_tie(d: &DistanceMatrix) -> bool {
        let n = d.len();
        let mut vals: Vec<f64> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                vals.push(d.get(i, j));
            }
        }
        vals.sort_by(f64::total_cmp);
        vals.windows(2).any(|w| w[1] - w[0] < 1e-6)
    }

    #[test]
    fn bottleneck_identical_diagrams_is_zero() {
        let d = PersistenceDiagram::new(0, vec![(0.0, 1.0), (0.0, 2.5)]);
        assert_eq!(bottleneck0(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn bottleneck_single_bar_shift() {
        // Matching (0,2) to (0,3) costs 1; sending both to the diagonal
        // costs max(1, 1.5) = 1.5, so the match wins.
        let d1 = PersistenceDiagram::new(0, vec![(0.0, 2.0)]);
        let d2 = PersistenceDiagram::new(0, vec![(0.0, 3.0)]);
        assert!((bottleneck0(&d1, &d2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bottleneck_forced_diagonal() {
        let empty = PersistenceDiagram::new(0, vec![]);
        let one = PersistenceDiagram::new(0, vec![(0.0, 2.0)]);
        assert!((bottleneck0(&empty, &one).unwrap() - 1.0).abs() < 1e-15);
        assert!((bottleneck0(&one, &empty).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bottleneck_rejects_dimension_mismatch() {
        let d0 = PersistenceDiagram::new(0, vec![]);
        let d1 = PersistenceDiagram::new(1, vec![]);
        assert!(matches!(bottleneck0(&d0, &d1), Err(TopologyError::DimMismatch(0, 1))));
    }

    #[test]
    fn diagram_csv_has_one_row_per_bar() {
        let d = PersistenceDiagram::new(0, vec![(0.0, 1.5), (0.0, 0.25)]);
        let csv = d.to_csv();
        assert_eq!(csv, "dim,birth,death\n0,0,1.5\n0,0,0.25\n");
    }

    #[test]
    fn stability_of_deaths_and_bottleneck_under_perturbation() {
        use rand::Rng;
        for (case, &delta) in [1e-3, 1e-2].iter().enumerate() {
            for seed in 0..50u64 {
                let c = random_cloud(3 + (seed as usize % 14), 3, seed * 3 + case as u64);
                let mut rng = crate::rng::stream_rng(seed, 91);
                let mut moved_rows = Vec::new();
                for i in 0..c.len() {
                    // A displacement of Euclidean norm at most delta.
                    let dir: Vec<f64> = (0..c.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                    let scale = rng.gen_range(0.0..delta) / norm;
                    moved_rows.extend(c.row(i).iter().zip(&dir).map(|(p, d)| p + d * scale));
                }
                let moved = PointCloud::new(c.len(), c.dim(), moved_rows).unwrap();
                let (_, diag_a) = persistence0(&pairwise_distances(&c));
                let (_, diag_b) = persistence0(&pairwise_distances(&moved));

                let mut deaths_a: Vec<f64> = diag_a.bars().iter().map(|(_, d)| *d).collect();
                let mut deaths_b: Vec<f64> = diag_b.bars().iter().map(|(_, d)| *d).collect();
                deaths_a.sort_by(f64::total_cmp);
                deaths_b.sort_by(f64::total_cmp);
                for (da, db) in deaths_a.iter().zip(&deaths_b) {
                    assert!((da - db).abs() <= 2.0 * delta + 1e-12);
                }
                let bn = bottleneck0(&diag_a, &diag_b).unwrap();
                assert!(bn <= 2.0 * delta + 1e-12, "bottleneck {bn} > 2*{delta}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_is_symmetric(seed in 0u64..500) {
            let a = random_cloud(9, 4, seed);
            let b = random_cloud(9, 4, seed + 7919);
            let (da, db) = (pairwise_distances(&a), pairwise_distances(&b));
            let (pa, pb) = (persistence0(&da).0, persistence0(&db).0);
            let (lab, _, _) = topo_loss(&da, &db, &pa, &pb).unwrap();
            let (lba, _, _) = topo_loss(&db, &da, &pb, &pa).unwrap();
            prop_assert!((lab - lba).abs() <= 1e-9 * lab.abs().max(1.0));
        }

        #[test]
        fn loss_is_permutation_equivariant(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let n = 11usize;
            let x = random_cloud(n, 5, seed);
            let z = random_cloud(n, 3, seed + 31337);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::rng::stream_rng(seed, 92));

            let permute = |c: &PointCloud| {
                let rows: Vec<f64> = perm.iter().flat_map(|&i| c.row(i).to_vec()).collect();
                PointCloud::new(n, c.dim(), rows).unwrap()
            };
            let loss = |a: &PointCloud, b: &PointCloud| {
                let (da, db) = (pairwise_distances(a), pairwise_distances(b));
                let (pa, pb) = (persistence0(&da).0, persistence0(&db).0);
                topo_loss(&da, &db, &pa, &pb).unwrap().0
            };
            let plain = loss(&x, &z);
            let permuted = loss(&permute(&x), &permute(&z));
            prop_assert!((plain - permuted).abs() <= 1e-9 * plain.abs().max(1.0));
        }

        #[test]
        fn pairing_weight_is_minimal(seed in 0u64..300, n in 2usize..32) {
            let c = random_cloud(n, 4, seed);
            let d = pairwise_distances(&c);
            let (pairing, _) = persistence0(&d);
            let weight: f64 = pairing.edges().iter().map(|&(i, j)| d.get(i, j)).sum();
            prop_assert!((weight - brute_force_mst_weight(&d)).abs() < 1e-12);
        }
    }
}
