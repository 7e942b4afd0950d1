//! NDT network topology: pairwise attributes, the connectivity matrix,
//! topology drift and agglomerative clustering of NDTs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distances below this are clamped so `1/g` stays bounded.
pub const G_MIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdtNode {
    pub id: usize,
    /// Planar coordinates in meters.
    pub position: [f64; 2],
    /// Mbps.
    pub backhaul_capacity: f64,
    /// Meters.
    pub coverage_radius: f64,
}

impl NdtNode {
    /// `n` sensors on a straight road with uniform spacing. Capacities cycle
    /// through three backhaul tiers.
    pub fn line_layout(n: usize, spacing: f64, coverage_radius: f64) -> Vec<NdtNode> {
        (0..n)
            .map(|id| NdtNode {
                id,
                position: [id as f64 * spacing, 0.0],
                backhaul_capacity: [100.0, 250.0, 400.0][id % 3],
                coverage_radius,
            })
            .collect()
    }
}

pub fn validate_nodes(nodes: &[NdtNode]) -> Result<()> {
    for (i, node) in nodes.iter().enumerate() {
        if node.id != i {
            return Err(Error::invalid(format!(
                "node ids must be contiguous from 0: position {i} holds id {}",
                node.id
            )));
        }
        if !(node.coverage_radius > 0.0) {
            return Err(Error::invalid(format!(
                "node {i}: coverage_radius must be > 0"
            )));
        }
        if !(node.backhaul_capacity >= 0.0) || !node.position.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid(format!(
                "node {i}: non-finite position or negative capacity"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeQuad {
    /// Geographic distance, meters (clamped to [`G_MIN`]).
    pub g: f64,
    /// Normalized backhaul capacity term.
    pub k: f64,
    /// Coverage overlap fraction.
    pub delta: f64,
    /// Data-distribution similarity.
    pub tau: f64,
}

/// Dense symmetric `n x n` attribute table. Diagonal cells are unused.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMatrix {
    pub n: usize,
    cells: Vec<AttributeQuad>,
}

impl AttributeMatrix {
    pub fn get(&self, i: usize, j: usize) -> AttributeQuad {
        self.cells[i * self.n + j]
    }

    pub fn set_symmetric(&mut self, i: usize, j: usize, quad: AttributeQuad) {
        self.cells[i * self.n + j] = quad;
        self.cells[j * self.n + i] = quad;
    }

    pub fn filled(n: usize, quad: AttributeQuad) -> Self {
        Self {
            n,
            cells: vec![quad; n * n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectivityWeights {
    pub w_g: f64,
    pub w_k: f64,
    pub w_delta: f64,
    pub w_tau: f64,
}

impl Default for ConnectivityWeights {
    fn default() -> Self {
        Self {
            w_g: 1.0,
            w_k: 1.0,
            w_delta: 1.0,
            w_tau: 1.0,
        }
    }
}

impl ConnectivityWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_g, self.w_k, self.w_delta, self.w_tau];
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid(
                "connectivity weights must be finite and non-negative",
            ));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::invalid(
                "at least one connectivity weight must be positive",
            ));
        }
        Ok(())
    }
}

/// Symmetric pairwise coupling scores. The diagonal holds `0.0` and is never
/// read as a score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub round_tag: u64,
}

impl ConnectivityMatrix {
    pub fn from_rows(rows: &[Vec<f64>], round_tag: u64) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(
                "connectivity rows must form a square matrix",
            ));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    if rows[i][j] != rows[j][i] {
                        return Err(Error::invalid(format!(
                            "connectivity not symmetric at ({i},{j})"
                        )));
                    }
                    values[i * n + j] = rows[i][j];
                }
            }
        }
        Ok(Self {
            n,
            values,
            round_tag,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
            round_tag: 0,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set_symmetric(&mut self, i: usize, j: usize, v: f64) {
        assert!(i != j, "diagonal is not a score");
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    /// Frobenius norm over off-diagonal cells.
    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self.get(i, j).powi(2);
                }
            }
        }
        s.sqrt()
    }

    pub fn byte_size(&self) -> usize {
        self.values.len() * 8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub num_clusters: usize,
    pub member_of: Vec<usize>,
    pub round_tag: u64,
}

impl ClusterAssignment {
    pub fn single(n: usize) -> Self {
        Self {
            num_clusters: 1,
            member_of: vec![0; n],
            round_tag: 0,
        }
    }

    pub fn from_groups(groups: &[Vec<usize>], n: usize) -> Result<Self> {
        let mut member_of = vec![usize::MAX; n];
        for (c, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::invalid(format!("cluster {c} is empty")));
            }
            for &id in g {
                if id >= n || member_of[id] != usize::MAX {
                    return Err(Error::invalid(format!(
                        "NDT {id} out of range or assigned twice"
                    )));
                }
                member_of[id] = c;
            }
        }
        if let Some(id) = member_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::invalid(format!(
                "NDT {id} is not assigned to a cluster"
            )));
        }
        Ok(Self {
            num_clusters: groups.len(),
            member_of,
            round_tag: 0,
        })
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.member_of.len())
            .filter(|&i| self.member_of[i] == cluster)
            .collect()
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        (0..self.num_clusters).map(|c| self.members(c)).collect()
    }
}

/// Area of the intersection of two disks at center distance `d`.
pub fn disk_overlap_area(r1: f64, r2: f64, d: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    let small = r1.min(r2);
    if d <= (r1 - r2).abs() {
        return PI * small * small;
    }
    let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1))
        .clamp(-1.0, 1.0)
        .acos();
    let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2))
        .clamp(-1.0, 1.0)
        .acos();
    let k = (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2);
    r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k.max(0.0).sqrt()
}

/// Overlap as a fraction of the smaller coverage disk.
pub fn coverage_overlap(a: &NdtNode, b: &NdtNode) -> f64 {
    let d = distance(a, b);
    let small = a.coverage_radius.min(b.coverage_radius);
    (disk_overlap_area(a.coverage_radius, b.coverage_radius, d) / (PI * small * small))
        .clamp(0.0, 1.0)
}

fn distance(a: &NdtNode, b: &NdtNode) -> f64 {
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    (dx * dx + dy * dy).sqrt()
}

/// Builds `{g, k, delta, tau}` for every pair; `tau(i, j)` supplies the data
/// similarity.
pub fn pairwise_attributes_with(
    nodes: &[NdtNode],
    mut tau: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<AttributeMatrix> {
    let n = nodes.len();
    if n < 2 {
        return Err(Error::invalid("pairwise attributes need at least 2 nodes"));
    }
    validate_nodes(nodes)?;
    let mut cap_norm = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            cap_norm = cap_norm.max(nodes[i].backhaul_capacity.min(nodes[j].backhaul_capacity));
        }
    }
    let diag = AttributeQuad {
        g: G_MIN,
        k: 0.0,
        delta: 0.0,
        tau: 0.0,
    };
    let mut m = AttributeMatrix::filled(n, diag);
    for i in 0..n {
        for j in i + 1..n {
            let cap = nodes[i].backhaul_capacity.min(nodes[j].backhaul_capacity);
            let t = tau(i, j)?;
            m.set_symmetric(
                i,
                j,
                AttributeQuad {
                    g: distance(&nodes[i], &nodes[j]).max(G_MIN),
                    k: if cap_norm > 0.0 { cap / cap_norm } else { 0.0 },
                    delta: coverage_overlap(&nodes[i], &nodes[j]),
                    tau: t.clamp(0.0, 1.0),
                },
            );
        }
    }
    Ok(m)
}

/// Pairwise attributes with `tau` taken from a precomputed symmetric table.
pub fn pairwise_attributes(nodes: &[NdtNode], tau: &[Vec<f64>]) -> Result<AttributeMatrix> {
    if tau.len() != nodes.len() || tau.iter().any(|r| r.len() != nodes.len()) {
        return Err(Error::invalid("similarity table must be n x n"));
    }
    pairwise_attributes_with(nodes, |i, j| Ok(tau[i][j]))
}

pub fn phi(quad: &AttributeQuad, w: &ConnectivityWeights) -> f64 {
    w.w_g / quad.g + w.w_k * quad.k + w.w_delta * quad.delta + w.w_tau * quad.tau
}

pub fn connectivity(
    attrs: &AttributeMatrix,
    w: &ConnectivityWeights,
    round_tag: u64,
) -> ConnectivityMatrix {
    let n = attrs.n;
    let mut c = ConnectivityMatrix::zeros(n);
    c.round_tag = round_tag;
    for i in 0..n {
        for j in i + 1..n {
            c.set_symmetric(i, j, phi(&attrs.get(i, j), w));
        }
    }
    c
}

/// Off-diagonal Frobenius norm of `c_new - c_old`.
pub fn topology_drift(c_new: &ConnectivityMatrix, c_old: &ConnectivityMatrix) -> Result<f64> {
    if c_new.n != c_old.n {
        return Err(Error::invalid(format!(
            "connectivity size mismatch: {} vs {}",
            c_new.n, c_old.n
        )));
    }
    let n = c_new.n;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += (c_new.get(i, j) - c_old.get(i, j)).powi(2);
            }
        }
    }
    Ok(s.sqrt())
}

pub fn should_recluster(drift: f64, threshold: f64) -> bool {
    drift > threshold
}

/// Average-linkage agglomerative clustering on `Φ` as a similarity.
///
/// Clusters are kept ordered by their smallest member; among equally similar
/// pairs the one with the lexicographically smallest `(min_a, min_b)` merges.
pub fn cluster_ndts(c: &ConnectivityMatrix, m: usize) -> Result<ClusterAssignment> {
    let n = c.n;
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "cluster count {m} outside [1, {n}]"
        )));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // sums[a][b]: total cross-cluster similarity
    let mut sums: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { c.get(i, j) })
                .collect()
        })
        .collect();
    while clusters.len() > m {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let avg = sums[a][b] / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(_, _, v)| avg > v) {
                    best = Some((a, b, avg));
                }
            }
        }
        let (a, b, _) = best.expect("at least two clusters");
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
        let row_b = sums.remove(b);
        for row in sums.iter_mut() {
            row.remove(b);
        }
        for (k, v) in row_b.iter().enumerate().filter(|(k, _)| *k != b) {
            let k = if k > b { k - 1 } else { k };
            if k != a {
                sums[a][k] += v;
                sums[k][a] += v;
            }
        }
    }
    let mut member_of = vec![0; n];
    for (idx, cl) in clusters.iter().enumerate() {
        for &id in cl {
            member_of[id] = idx;
        }
    }
    Ok(ClusterAssignment {
        num_clusters: clusters.len(),
        member_of,
        round_tag: c.round_tag,
    })
}

pub fn default_cluster_count(n: usize) -> usize {
    n.div_ceil(4).max(1)
}

/// A scheduled change to one node's physical attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyShift {
    pub round: u64,
    pub node: usize,
    #[serde(default)]
    pub position: Option<[f64; 2]>,
    #[serde(default)]
    pub backhaul_capacity: Option<f64>,
    #[serde(default)]
    pub coverage_radius: Option<f64>,
}

/// Current node layout plus the fixed data-similarity table, yielding the
/// connectivity matrix at any round once scheduled shifts are applied.
#[derive(Clone, Debug)]
pub struct TopologyTimeline {
    base: Vec<NdtNode>,
    tau: Vec<Vec<f64>>,
    weights: ConnectivityWeights,
    shifts: Vec<TopologyShift>,
}

impl TopologyTimeline {
    pub fn new(
        nodes: Vec<NdtNode>,
        tau: Vec<Vec<f64>>,
        weights: ConnectivityWeights,
        mut shifts: Vec<TopologyShift>,
    ) -> Result<Self> {
        validate_nodes(&nodes)?;
        weights.validate()?;
        if let Some(s) = shifts.iter().find(|s| s.node >= nodes.len()) {
            return Err(Error::invalid(format!(
                "topology shift targets unknown node {}",
                s.node
            )));
        }
        shifts.sort_by_key(|s| s.round);
        Ok(Self {
            base: nodes,
            tau,
            weights,
            shifts,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.base.len()
    }

    pub fn shifts_at(&self, round: u64) -> bool {
        self.shifts.iter().any(|s| s.round == round)
    }

    pub fn nodes_at(&self, round: u64) -> Vec<NdtNode> {
        let mut nodes = self.base.clone();
        for s in self.shifts.iter().take_while(|s| s.round <= round) {
            let node = &mut nodes[s.node];
            if let Some(p) = s.position {
                node.position = p;
            }
            if let Some(c) = s.backhaul_capacity {
                node.backhaul_capacity = c;
            }
            if let Some(r) = s.coverage_radius {
                node.coverage_radius = r;
            }
        }
        nodes
    }

    pub fn matrix_at(&self, round: u64) -> Result<ConnectivityMatrix> {
        let attrs = pairwise_attributes(&self.nodes_at(round), &self.tau)?;
        Ok(connectivity(&attrs, &self.weights, round))
    }
}
