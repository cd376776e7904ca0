//! Network description, link dependence graph, and maximal-independent-set
//! enumeration.
//!
//! Vertices of the dependence graph are client-AP links, identified by the
//! client. An edge means the two links must never be scheduled in the same
//! slot. The set family used by the optimizer is represented as a 0/1
//! membership matrix over clients x maximal independent sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Client station identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClientId(pub u32);

/// Access point identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ApId(pub u32);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for ApId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Default vertex count above which exact enumeration refuses to run.
pub const DEFAULT_EXACT_ENUM_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("client {0} references unknown AP {1}")]
    UnknownAp(ClientId, ApId),
    #[error("unknown client id {0}")]
    UnknownClient(ClientId),
    #[error("unknown AP id {0}")]
    UnknownApId(ApId),
    #[error("duplicate client id {0}")]
    DuplicateClient(ClientId),
    #[error("duplicate AP id {0}")]
    DuplicateAp(ApId),
    #[error("AP conflict pair ({0}, {0}) is reflexive")]
    ReflexiveApConflict(ApId),
    #[error("{0} must be positive (got {1})")]
    NonPositive(&'static str, f64),
    #[error("graph has {0} vertices, above the exact enumeration cap of {1}; use greedy_cover")]
    AboveEnumerationCap(usize, usize),
}

/// One access point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRecord {
    pub id: ApId,
    pub channel: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<(f64, f64)>,
}

/// One client station and its association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: ClientId,
    pub associated_ap: ApId,
    /// Physical association rate in Mbps (e.g. 54.0 for 802.11g).
    pub phy_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<(f64, f64)>,
}

/// WAN access link parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WanParams {
    /// Inbound capacity, Mbps.
    pub r_in: f64,
    /// Outbound capacity, Mbps.
    pub r_out: f64,
    /// Round-trip propagation delay, ms.
    pub rtpd: f64,
}

/// Static description of the managed network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub aps: Vec<ApRecord>,
    pub clients: Vec<ClientRecord>,
    /// Known AP-AP interference pairs (time-invariant, surveyed at deployment).
    #[serde(default)]
    pub static_ap_conflicts: BTreeSet<(ApId, ApId)>,
    pub wan: WanParams,
    pub proxy_enabled: bool,
}

impl NetworkDescription {
    /// Checks referential integrity and parameter positivity.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut ap_ids = BTreeSet::new();
        for ap in &self.aps {
            if !ap_ids.insert(ap.id) {
                return Err(TopologyError::DuplicateAp(ap.id));
            }
        }
        let mut client_ids = BTreeSet::new();
        for c in &self.clients {
            if !client_ids.insert(c.id) {
                return Err(TopologyError::DuplicateClient(c.id));
            }
            if !ap_ids.contains(&c.associated_ap) {
                return Err(TopologyError::UnknownAp(c.id, c.associated_ap));
            }
            if c.phy_rate <= 0.0 {
                return Err(TopologyError::NonPositive("phy_rate", c.phy_rate));
            }
        }
        for &(a, b) in &self.static_ap_conflicts {
            if a == b {
                return Err(TopologyError::ReflexiveApConflict(a));
            }
            for ap in [a, b] {
                if !ap_ids.contains(&ap) {
                    return Err(TopologyError::UnknownApId(ap));
                }
            }
        }
        if self.wan.r_in <= 0.0 {
            return Err(TopologyError::NonPositive("wan.r_in", self.wan.r_in));
        }
        if self.wan.r_out <= 0.0 {
            return Err(TopologyError::NonPositive("wan.r_out", self.wan.r_out));
        }
        Ok(())
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientRecord> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn ap(&self, id: ApId) -> Option<&ApRecord> {
        self.aps.iter().find(|a| a.id == id)
    }

    /// Clients associated with `ap`, in id order.
    pub fn clients_of(&self, ap: ApId) -> Vec<ClientId> {
        let mut v: Vec<ClientId> = self
            .clients
            .iter()
            .filter(|c| c.associated_ap == ap)
            .map(|c| c.id)
            .collect();
        v.sort();
        v
    }
}

/// Undirected conflict graph over client-AP links.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependenceGraph {
    vertices: BTreeSet<ClientId>,
    edges: BTreeSet<(ClientId, ClientId)>,
}

fn ordered(a: ClientId, b: ClientId) -> (ClientId, ClientId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl DependenceGraph {
    pub fn new(vertices: impl IntoIterator<Item = ClientId>) -> Self {
        Self {
            vertices: vertices.into_iter().collect(),
            edges: BTreeSet::new(),
        }
    }

    /// Inserts an undirected edge. Self-loops are ignored.
    pub fn add_edge(&mut self, a: ClientId, b: ClientId) {
        if a != b && self.vertices.contains(&a) && self.vertices.contains(&b) {
            self.edges.insert(ordered(a, b));
        }
    }

    pub fn has_edge(&self, a: ClientId, b: ClientId) -> bool {
        a != b && self.edges.contains(&ordered(a, b))
    }

    pub fn vertices(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.vertices.iter().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (ClientId, ClientId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, v: ClientId) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == v || b == v)
            .count()
    }

    /// True iff no edge joins two members of `set`.
    pub fn is_independent(&self, set: &BTreeSet<ClientId>) -> bool {
        for &(a, b) in &self.edges {
            if set.contains(&a) && set.contains(&b) {
                return false;
            }
        }
        true
    }

    /// True iff `set` is independent and no outside vertex can be added.
    pub fn is_maximal_independent(&self, set: &BTreeSet<ClientId>) -> bool {
        if !self.is_independent(set) {
            return false;
        }
        for v in self.vertices() {
            if set.contains(&v) {
                continue;
            }
            if set.iter().all(|&u| !self.has_edge(u, v)) {
                return false;
            }
        }
        true
    }

    /// Dense indexing used by the enumeration routines: sorted vertex list
    /// plus adjacency bitmasks.
    fn indexed(&self) -> (Vec<ClientId>, Vec<u64>) {
        let verts: Vec<ClientId> = self.vertices.iter().copied().collect();
        let index: BTreeMap<ClientId, usize> =
            verts.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut adj = vec![0u64; verts.len()];
        for &(a, b) in &self.edges {
            let (i, j) = (index[&a], index[&b]);
            adj[i] |= 1 << j;
            adj[j] |= 1 << i;
        }
        (verts, adj)
    }
}

/// 0/1 membership of clients in the columns (maximal independent sets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndependentSetMatrix {
    /// Columns in deterministic order; each is a sorted client-id set.
    sets: Vec<BTreeSet<ClientId>>,
    clients: Vec<ClientId>,
}

impl IndependentSetMatrix {
    fn from_sets(graph: &DependenceGraph, mut sets: Vec<BTreeSet<ClientId>>) -> Self {
        // Lexicographic order by sorted member ids keeps solver output and
        // schedules reproducible across runs.
        sets.sort_by(|a, b| {
            let av: Vec<ClientId> = a.iter().copied().collect();
            let bv: Vec<ClientId> = b.iter().copied().collect();
            av.cmp(&bv)
        });
        sets.dedup();
        Self {
            sets,
            clients: graph.vertices().collect(),
        }
    }

    pub fn columns(&self) -> &[BTreeSet<ClientId>] {
        &self.sets
    }

    pub fn column_count(&self) -> usize {
        self.sets.len()
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    /// Membership entry for (client, column k).
    pub fn contains(&self, client: ClientId, k: usize) -> bool {
        self.sets[k].contains(&client)
    }

    /// Column indices containing `client`.
    pub fn columns_of(&self, client: ClientId) -> Vec<usize> {
        (0..self.sets.len())
            .filter(|&k| self.sets[k].contains(&client))
            .collect()
    }

    /// Checks the defining invariants against `graph`.
    pub fn check_against(&self, graph: &DependenceGraph) -> bool {
        let mut covered: BTreeSet<ClientId> = BTreeSet::new();
        for s in &self.sets {
            if !graph.is_maximal_independent(s) {
                return false;
            }
            covered.extend(s.iter().copied());
        }
        let mut distinct = self.sets.clone();
        distinct.dedup();
        distinct.len() == self.sets.len() && covered == graph.vertices().collect()
    }
}

/// Builds the dependence graph from the same-AP rule, static AP conflicts
/// (closed over their associated clients), and explicitly supplied extra
/// edges (the inferred ones).
pub fn build_dependence_graph(
    net: &NetworkDescription,
    extra_edges: &BTreeSet<(ClientId, ClientId)>,
) -> Result<DependenceGraph, TopologyError> {
    net.validate()?;
    let mut g = DependenceGraph::new(net.clients.iter().map(|c| c.id));
    // Two clients of one AP can never transmit together.
    for ap in &net.aps {
        let members = net.clients_of(ap.id);
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                g.add_edge(a, b);
            }
        }
    }
    // An AP-AP conflict makes every cross pair of their clients dependent.
    for &(a1, a2) in &net.static_ap_conflicts {
        for &ca in &net.clients_of(a1) {
            for &cb in &net.clients_of(a2) {
                g.add_edge(ca, cb);
            }
        }
    }
    for &(a, b) in extra_edges {
        if net.client(a).is_none() {
            return Err(TopologyError::UnknownClient(a));
        }
        if net.client(b).is_none() {
            return Err(TopologyError::UnknownClient(b));
        }
        g.add_edge(a, b);
    }
    Ok(g)
}

/// Exact enumeration of all maximal independent sets, as maximal cliques of
/// the complement graph (Bron-Kerbosch with pivoting). Refuses graphs above
/// `cap` vertices; the family can be exponential.
pub fn enumerate_maximal_independent_sets_capped(
    g: &DependenceGraph,
    cap: usize,
) -> Result<IndependentSetMatrix, TopologyError> {
    let n = g.vertex_count();
    if n > cap.min(64) {
        return Err(TopologyError::AboveEnumerationCap(n, cap.min(64)));
    }
    let (verts, adj) = g.indexed();
    // Complement adjacency; independence in g = adjacency in the complement.
    let all: u64 = if n == 64 { !0 } else { (1u64 << n) - 1 };
    let comp: Vec<u64> = (0..n).map(|i| (!adj[i]) & all & !(1 << i)).collect();

    let mut found: Vec<u64> = Vec::new();
    bron_kerbosch(&comp, 0, all, 0, &mut found);

    let sets = found
        .into_iter()
        .map(|mask| {
            (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| verts[i])
                .collect::<BTreeSet<ClientId>>()
        })
        .collect();
    Ok(IndependentSetMatrix::from_sets(g, sets))
}

/// Exact enumeration with the default cap.
pub fn enumerate_maximal_independent_sets(
    g: &DependenceGraph,
) -> Result<IndependentSetMatrix, TopologyError> {
    enumerate_maximal_independent_sets_capped(g, DEFAULT_EXACT_ENUM_CAP)
}

fn bron_kerbosch(adj: &[u64], r: u64, mut p: u64, mut x: u64, out: &mut Vec<u64>) {
    if p == 0 && x == 0 {
        out.push(r);
        return;
    }
    // Pivot: vertex of p|x with the most neighbours in p.
    let mut pivot = usize::MAX;
    let mut best = -1i32;
    let mut scan = p | x;
    while scan != 0 {
        let v = scan.trailing_zeros() as usize;
        scan &= scan - 1;
        let cnt = (adj[v] & p).count_ones() as i32;
        if cnt > best {
            best = cnt;
            pivot = v;
        }
    }
    let mut candidates = p & !adj[pivot];
    while candidates != 0 {
        let v = candidates.trailing_zeros() as usize;
        candidates &= candidates - 1;
        let bit = 1u64 << v;
        bron_kerbosch(adj, r | bit, p & adj[v], x & adj[v], out);
        p &= !bit;
        x |= bit;
    }
}

/// Polynomial-size cover by maximal independent sets: repeatedly seed with an
/// uncovered vertex of minimum degree (smallest id on ties), extend greedily
/// to maximality, and mark the members covered.
pub fn greedy_cover(g: &DependenceGraph) -> IndependentSetMatrix {
    let (verts, adj) = g.indexed();
    let n = verts.len();
    let mut covered = vec![false; n];
    let mut sets: Vec<BTreeSet<ClientId>> = Vec::new();
    loop {
        let seed = (0..n)
            .filter(|&i| !covered[i])
            .min_by_key(|&i| (adj[i].count_ones(), i));
        let Some(seed) = seed else { break };
        let mut members: u64 = 1 << seed;
        let mut excluded: u64 = adj[seed];
        // Greedy extension in ascending id order.
        for i in 0..n {
            let bit = 1u64 << i;
            if members & bit != 0 || excluded & bit != 0 {
                continue;
            }
            members |= bit;
            excluded |= adj[i];
        }
        let set: BTreeSet<ClientId> = (0..n)
            .filter(|i| members & (1 << i) != 0)
            .map(|i| verts[i])
            .collect();
        for i in 0..n {
            if members & (1 << i) != 0 {
                covered[i] = true;
            }
        }
        sets.push(set);
    }
    IndependentSetMatrix::from_sets(g, sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(id: u32) -> ClientId {
        ClientId(id)
    }

    fn net_two_aps() -> NetworkDescription {
        NetworkDescription {
            aps: vec![
                ApRecord {
                    id: ApId(1),
                    channel: 11,
                    position: None,
                },
                ApRecord {
                    id: ApId(2),
                    channel: 11,
                    position: None,
                },
            ],
            clients: vec![
                ClientRecord {
                    id: c(1),
                    associated_ap: ApId(1),
                    phy_rate: 54.0,
                    position: None,
                },
                ClientRecord {
                    id: c(2),
                    associated_ap: ApId(1),
                    phy_rate: 54.0,
                    position: None,
                },
                ClientRecord {
                    id: c(3),
                    associated_ap: ApId(2),
                    phy_rate: 54.0,
                    position: None,
                },
                ClientRecord {
                    id: c(4),
                    associated_ap: ApId(2),
                    phy_rate: 54.0,
                    position: None,
                },
            ],
            static_ap_conflicts: BTreeSet::new(),
            wan: WanParams {
                r_in: 8.0,
                r_out: 8.0,
                rtpd: 150.0,
            },
            proxy_enabled: false,
        }
    }

    fn graph_from_edges(n: u32, edges: &[(u32, u32)]) -> DependenceGraph {
        let mut g = DependenceGraph::new((1..=n).map(c));
        for &(a, b) in edges {
            g.add_edge(c(a), c(b));
        }
        g
    }

    fn set_of(ids: &[u32]) -> BTreeSet<ClientId> {
        ids.iter().map(|&i| c(i)).collect()
    }

    #[test]
    fn same_ap_rule_forces_complete_graph() {
        let mut net = net_two_aps();
        net.clients.retain(|cl| cl.id.0 <= 3);
        net.clients.get_mut(2).unwrap().associated_ap = ApId(1);
        let g = build_dependence_graph(&net, &BTreeSet::new()).unwrap();
        assert_eq!(g.edge_count(), 3);
        for (a, b) in [(1, 2), (1, 3), (2, 3)] {
            assert!(g.has_edge(c(a), c(b)));
        }
    }

    #[test]
    fn two_disjoint_aps_give_two_disjoint_edges() {
        let g = build_dependence_graph(&net_two_aps(), &BTreeSet::new()).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(c(1), c(2)), (c(3), c(4))]);
    }

    #[test]
    fn static_ap_conflict_closes_over_clients() {
        let mut net = net_two_aps();
        net.static_ap_conflicts.insert((ApId(1), ApId(2)));
        let g = build_dependence_graph(&net, &BTreeSet::new()).unwrap();
        // K4: all 6 pairs.
        assert_eq!(g.edge_count(), 6);
    }

    #[test]
    fn extra_edges_must_reference_known_clients() {
        let net = net_two_aps();
        let mut extra = BTreeSet::new();
        extra.insert((c(1), c(9)));
        assert!(matches!(
            build_dependence_graph(&net, &extra),
            Err(TopologyError::UnknownClient(_))
        ));
    }

    #[test]
    fn build_is_monotone_in_extra_edges() {
        let net = net_two_aps();
        let base = build_dependence_graph(&net, &BTreeSet::new()).unwrap();
        let mut extra = BTreeSet::new();
        extra.insert((c(2), c(3)));
        let bigger = build_dependence_graph(&net, &extra).unwrap();
        for e in base.edges() {
            assert!(bigger.has_edge(e.0, e.1));
        }
        assert!(bigger.has_edge(c(2), c(3)));
    }

    #[test]
    fn enumerate_empty_graph_is_single_full_set() {
        let g = graph_from_edges(3, &[]);
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        assert_eq!(m.columns(), &[set_of(&[1, 2, 3])]);
    }

    #[test]
    fn enumerate_triangle_is_three_singletons() {
        let g = graph_from_edges(3, &[(1, 2), (1, 3), (2, 3)]);
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        assert_eq!(m.columns(), &[set_of(&[1]), set_of(&[2]), set_of(&[3])]);
    }

    #[test]
    fn enumerate_path_graph() {
        // Expected family derived by brute force over all 16 subsets.
        let g = graph_from_edges(4, &[(1, 2), (2, 3), (3, 4)]);
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        assert_eq!(
            m.columns(),
            &[set_of(&[1, 3]), set_of(&[1, 4]), set_of(&[2, 4])]
        );
    }

    #[test]
    fn enumeration_cap_enforced() {
        let g = graph_from_edges(5, &[]);
        assert!(matches!(
            enumerate_maximal_independent_sets_capped(&g, 4),
            Err(TopologyError::AboveEnumerationCap(5, 4))
        ));
    }

    /// Brute-force oracle: iterate all subsets, keep the independent ones
    /// that are maximal under inclusion.
    fn brute_force_mis(g: &DependenceGraph) -> BTreeSet<BTreeSet<ClientId>> {
        let verts: Vec<ClientId> = g.vertices().collect();
        let n = verts.len();
        let mut independent: Vec<BTreeSet<ClientId>> = Vec::new();
        for mask in 0u32..(1 << n) {
            let set: BTreeSet<ClientId> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| verts[i])
                .collect();
            if g.is_independent(&set) {
                independent.push(set);
            }
        }
        independent
            .iter()
            .filter(|s| {
                !independent
                    .iter()
                    .any(|t| t.len() > s.len() && s.is_subset(t))
            })
            .cloned()
            .collect()
    }

    #[test]
    fn enumeration_matches_brute_force_on_small_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n = rng.gen_range(1..=8u32);
            let mut g = graph_from_edges(n, &[]);
            for a in 1..=n {
                for b in (a + 1)..=n {
                    if rng.gen_bool(0.4) {
                        g.add_edge(c(a), c(b));
                    }
                }
            }
            let m = enumerate_maximal_independent_sets(&g).unwrap();
            let got: BTreeSet<BTreeSet<ClientId>> = m.columns().iter().cloned().collect();
            assert_eq!(got, brute_force_mis(&g));
            assert!(m.check_against(&g));
        }
    }

    #[test]
    fn greedy_cover_empty_graph() {
        let g = graph_from_edges(3, &[]);
        let m = greedy_cover(&g);
        assert_eq!(m.columns(), &[set_of(&[1, 2, 3])]);
    }

    #[test]
    fn greedy_cover_k4_is_four_singletons() {
        let g = graph_from_edges(4, &[(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]);
        let m = greedy_cover(&g);
        assert_eq!(m.column_count(), 4);
        assert!(m.check_against(&g));
    }

    #[test]
    fn greedy_cover_path_covers_all_vertices() {
        let g = graph_from_edges(4, &[(1, 2), (2, 3), (3, 4)]);
        let m = greedy_cover(&g);
        let mut covered = BTreeSet::new();
        for s in m.columns() {
            assert!(g.is_maximal_independent(s));
            covered.extend(s.iter().copied());
        }
        assert_eq!(covered, g.vertices().collect());
    }

    #[test]
    fn greedy_cover_columns_maximal_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let n = rng.gen_range(1..=12u32);
            let mut g = graph_from_edges(n, &[]);
            for a in 1..=n {
                for b in (a + 1)..=n {
                    if rng.gen_bool(0.3) {
                        g.add_edge(c(a), c(b));
                    }
                }
            }
            let m = greedy_cover(&g);
            assert!(m.check_against(&g));
        }
    }
}
