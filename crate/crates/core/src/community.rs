//! Weighted Louvain community detection and suspicious-group extraction.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covisit::CoVisitNetwork;

/// Community assignment aligned with `CoVisitNetwork::nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub modularity: f64,
}

impl Partition {
    pub fn community_count(&self) -> usize {
        self.assignment.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn label_map(&self, network: &CoVisitNetwork) -> BTreeMap<String, usize> {
        network
            .nodes
            .iter()
            .cloned()
            .zip(self.assignment.iter().copied())
            .collect()
    }
}

/// Result of a Louvain run, with the modularity of the original network
/// measured before the first phase and after every completed phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LouvainRun {
    pub partition: Partition,
    pub phase_modularity: Vec<f64>,
}

/// Undirected graph with self-loops, used for the aggregated levels.
/// `loops[i]` is the weight of the self-loop on `i`; it contributes `2 * w`
/// to the node's strength.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    loops: Vec<f64>,
}

impl LevelGraph {
    fn from_network(network: &CoVisitNetwork) -> Self {
        Self {
            adj: network.adjacency(),
            loops: vec![0.0; network.node_count()],
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn strengths(&self) -> Vec<f64> {
        self.adj
            .iter()
            .zip(&self.loops)
            .map(|(nbrs, &l)| nbrs.iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * l)
            .collect()
    }

    fn modularity(&self, assignment: &[usize]) -> f64 {
        let k = self.strengths();
        let two_m: f64 = k.iter().sum();
        if two_m <= 0.0 {
            return 0.0;
        }
        let n_comm = assignment.iter().max().map_or(0, |&m| m + 1);
        let mut internal = vec![0.0; n_comm];
        let mut total = vec![0.0; n_comm];
        for i in 0..self.len() {
            let c = assignment[i];
            total[c] += k[i];
            internal[c] += 2.0 * self.loops[i];
            for &(j, w) in &self.adj[i] {
                if assignment[j] == c {
                    internal[c] += w;
                }
            }
        }
        internal
            .iter()
            .zip(&total)
            .map(|(&inn, &tot)| inn / two_m - (tot / two_m).powi(2))
            .sum()
    }

    /// One local-moving phase. Returns the community of every node and
    /// whether any node changed community.
    fn local_moving(&self, rng: &mut ChaCha8Rng, resolution: f64) -> (Vec<usize>, bool) {
        let n = self.len();
        let k = self.strengths();
        let two_m: f64 = k.iter().sum();
        let mut comm: Vec<usize> = (0..n).collect();
        if two_m <= 0.0 {
            return (comm, false);
        }
        let mut tot = k.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);

        let mut links = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut any_move = false;
        loop {
            let mut moved = false;
            for &i in &order {
                if self.adj[i].is_empty() {
                    continue;
                }
                let ci = comm[i];
                for &(j, w) in &self.adj[i] {
                    let cj = comm[j];
                    if links[cj] == 0.0 && !touched.contains(&cj) {
                        touched.push(cj);
                    }
                    links[cj] += w;
                }
                tot[ci] -= k[i];
                let gain = |c: usize, links: &[f64]| links[c] - resolution * tot[c] * k[i] / two_m;
                let mut best = ci;
                let mut best_gain = gain(ci, &links);
                let eps = 1e-10 * k[i];
                for &c in &touched {
                    if c == ci {
                        continue;
                    }
                    let g = gain(c, &links);
                    if g > best_gain + eps {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += k[i];
                if best != ci {
                    comm[i] = best;
                    moved = true;
                    any_move = true;
                }
                for &c in &touched {
                    links[c] = 0.0;
                }
                links[ci] = 0.0;
                touched.clear();
            }
            if !moved {
                break;
            }
        }
        (comm, any_move)
    }

    fn aggregate(&self, comm: &[usize], n_comm: usize) -> LevelGraph {
        let mut loops = vec![0.0; n_comm];
        let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..self.len() {
            let ci = comm[i];
            loops[ci] += self.loops[i];
            for &(j, w) in &self.adj[i] {
                if j <= i {
                    continue;
                }
                let cj = comm[j];
                if ci == cj {
                    loops[ci] += w;
                } else {
                    *edges.entry((ci.min(cj), ci.max(cj))).or_insert(0.0) += w;
                }
            }
        }
        let mut adj = vec![Vec::new(); n_comm];
        for (&(a, b), &w) in &edges {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        LevelGraph { adj, loops }
    }
}

/// Renumbers labels 0.. in order of first appearance.
fn canonical_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    let out = labels
        .iter()
        .map(|&l| {
            *remap.entry(l).or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    (out, next)
}

/// Weighted Newman modularity of `assignment` (indexed like `network.nodes`).
/// An edgeless network has modularity 0.
pub fn modularity(network: &CoVisitNetwork, assignment: &[usize]) -> f64 {
    assert_eq!(assignment.len(), network.node_count(), "assignment must cover every node");
    let (labels, _) = canonical_labels(assignment);
    LevelGraph::from_network(network).modularity(&labels)
}

/// Louvain with resolution 1.0; the node visiting order of each phase is a
/// seeded shuffle.
pub fn louvain(network: &CoVisitNetwork, seed: u64) -> Partition {
    louvain_traced(network, seed).partition
}

pub fn louvain_traced(network: &CoVisitNetwork, seed: u64) -> LouvainRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = LevelGraph::from_network(network);
    let mut membership: Vec<usize> = (0..network.node_count()).collect();
    let mut phase_modularity = vec![base.modularity(&membership)];

    let mut graph = base;
    loop {
        let (comm, moved) = graph.local_moving(&mut rng, 1.0);
        if !moved {
            break;
        }
        let (comm, n_comm) = canonical_labels(&comm);
        for m in membership.iter_mut() {
            *m = comm[*m];
        }
        phase_modularity.push(modularity(network, &membership));
        graph = graph.aggregate(&comm, n_comm);
    }

    let (assignment, _) = canonical_labels(&membership);
    let q = modularity(network, &assignment);
    LouvainRun {
        partition: Partition {
            assignment,
            modularity: q,
        },
        phase_modularity,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEdge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousGroup {
    pub group_id: String,
    /// Sorted patient ids.
    pub members: Vec<String>,
    pub edges: Vec<GroupEdge>,
}

impl SuspiciousGroup {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, patient_id: &str) -> bool {
        self.members.binary_search_by(|m| m.as_str().cmp(patient_id)).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousGroupSet {
    pub groups: Vec<SuspiciousGroup>,
    pub min_component_size: usize,
}

impl SuspiciousGroupSet {
    pub fn get(&self, group_id: &str) -> Option<&SuspiciousGroup> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn group_of(&self, patient_id: &str) -> Option<&SuspiciousGroup> {
        self.groups.iter().find(|g| g.contains(patient_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummaryExport {
    pub group_id: String,
    pub members: Vec<String>,
    pub size: usize,
}

/// JSON document written as `groups.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsExport {
    pub groups: Vec<GroupSummaryExport>,
    pub modularity: f64,
    pub seed: u64,
}

impl GroupsExport {
    pub fn new(set: &SuspiciousGroupSet, modularity: f64, seed: u64) -> Self {
        Self {
            groups: set
                .groups
                .iter()
                .map(|g| GroupSummaryExport {
                    group_id: g.group_id.clone(),
                    members: g.members.clone(),
                    size: g.size(),
                })
                .collect(),
            modularity,
            seed,
        }
    }
}

/// Splits every community into connected components of its induced
/// subgraph, drops isolated nodes and components smaller than
/// `min_component_size`, and numbers the survivors `G-0001`, … by
/// descending size (ties: smallest member id).
pub fn filter_groups(
    partition: &Partition,
    network: &CoVisitNetwork,
    min_component_size: usize,
) -> SuspiciousGroupSet {
    let adj = network.adjacency();
    let n = network.node_count();
    let mut seen = vec![false; n];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if seen[start] || adj[start].is_empty() {
            continue;
        }
        let label = partition.assignment[start];
        let mut comp = vec![start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] && partition.assignment[v] == label {
                    seen[v] = true;
                    comp.push(v);
                    queue.push_back(v);
                }
            }
        }
        if comp.len() >= min_component_size.max(1) {
            comp.sort_unstable();
            components.push(comp);
        }
    }
    // Node indices follow id order, so comp[0] is the smallest member id.
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let groups = components
        .into_iter()
        .enumerate()
        .map(|(k, comp)| {
            let mut edges = Vec::new();
            for (x, &i) in comp.iter().enumerate() {
                for &j in &comp[x + 1..] {
                    if let Some(e) = network.edges.get(&(i, j)) {
                        edges.push(GroupEdge {
                            a: network.nodes[i].clone(),
                            b: network.nodes[j].clone(),
                            weight: e.weight,
                        });
                    }
                }
            }
            SuspiciousGroup {
                group_id: format!("G-{:04}", k + 1),
                members: comp.iter().map(|&i| network.nodes[i].clone()).collect(),
                edges,
            }
        })
        .collect();
    SuspiciousGroupSet {
        groups,
        min_component_size,
    }
}
