//! Physical network, container catalog and per-node runtime state.
//!
//! Everything here except [`NodeState`] is immutable once built, so a
//! [`Topology`], [`Catalog`] and [`CostParams`] can be shared freely between
//! concurrent simulation runs.

use std::collections::VecDeque;
use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeIdx = usize;
pub type TypeIdx = usize;
/// Simulation interval index. Intervals are numbered from 1.
pub type Interval = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNode {
    pub id: NodeIdx,
    pub capacity_mb: f64,
    pub cpu_ghz: f64,
    /// Planar position, only used to derive communication costs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coord: Option<(f64, f64)>,
}

impl EdgeNode {
    pub fn new(id: NodeIdx, capacity_mb: f64, cpu_ghz: f64) -> Self {
        EdgeNode {
            id,
            capacity_mb,
            cpu_ghz,
            coord: None,
        }
    }

    pub fn with_coord(mut self, x: f64, y: f64) -> Self {
        self.coord = Some((x, y));
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.capacity_mb.is_finite() && self.capacity_mb > 0.0) {
            return Err(Error::config(format!(
                "node {}: capacity_mb must be > 0, got {}",
                self.id, self.capacity_mb
            )));
        }
        if !(self.cpu_ghz.is_finite() && self.cpu_ghz > 0.0) {
            return Err(Error::config(format!(
                "node {}: cpu_ghz must be > 0, got {}",
                self.id, self.cpu_ghz
            )));
        }
        Ok(())
    }
}

/// Edge nodes plus the dense pairwise communication-cost matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    nodes: Vec<EdgeNode>,
    comm_cost: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct NodeRow {
    id: NodeIdx,
    capacity_mb: f64,
    cpu_ghz: f64,
    x: Option<f64>,
    y: Option<f64>,
}

impl Topology {
    /// Builds a topology from an explicit matrix.
    pub fn new(nodes: Vec<EdgeNode>, comm_cost: Vec<Vec<f64>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::config("topology needs at least one node"));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::config(format!(
                    "node ids must be 0..{} in order, found {} at position {i}",
                    nodes.len(),
                    node.id
                )));
            }
            node.validate()?;
        }
        let n = nodes.len();
        if comm_cost.len() != n || comm_cost.iter().any(|row| row.len() != n) {
            return Err(Error::config(format!(
                "communication matrix must be {n}x{n}"
            )));
        }
        for v in 0..n {
            if comm_cost[v][v] != 0.0 {
                return Err(Error::config(format!(
                    "communication cost d[{v}][{v}] must be 0"
                )));
            }
            for w in 0..n {
                let d = comm_cost[v][w];
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::config(format!(
                        "communication cost d[{v}][{w}] = {d} must be finite and >= 0"
                    )));
                }
                if d != comm_cost[w][v] {
                    return Err(Error::config(format!(
                        "communication matrix is not symmetric at ({v}, {w})"
                    )));
                }
            }
        }
        Ok(Topology { nodes, comm_cost })
    }

    /// Derives `d[v][w] = scale * |coord_v - coord_w|` from node positions.
    pub fn from_coords(nodes: Vec<EdgeNode>, scale: f64) -> Result<Self> {
        let comm = comm_cost_from_coords(&nodes, scale)?;
        Topology::new(nodes, comm)
    }

    /// Reads `id,capacity_mb,cpu_ghz,x,y`. Without `comm_matrix` every row
    /// needs coordinates; with it the coordinates are ignored.
    pub fn load(nodes_csv: &Path, comm_matrix: Option<&Path>, scale: f64) -> Result<Self> {
        let nodes = read_nodes_csv(nodes_csv)?;
        match comm_matrix {
            Some(path) => Topology::new(nodes, read_matrix_csv(path)?),
            None => Topology::from_coords(nodes, scale),
        }
    }

    /// Random planar topology: nodes scattered uniformly over a square of side
    /// `extent`, with capacity and CPU frequency drawn from the given menus.
    pub fn synthetic(
        n_nodes: usize,
        extent: f64,
        scale: f64,
        capacities_mb: &[f64],
        cpus_ghz: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if n_nodes == 0 || capacities_mb.is_empty() || cpus_ghz.is_empty() {
            return Err(Error::config("synthetic topology needs nodes and menus"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = (0..n_nodes)
            .map(|id| {
                let cap = capacities_mb[rng.random_range(0..capacities_mb.len())];
                let cpu = cpus_ghz[rng.random_range(0..cpus_ghz.len())];
                let x = rng.random::<f64>() * extent;
                let y = rng.random::<f64>() * extent;
                EdgeNode::new(id, cap, cpu).with_coord(x, y)
            })
            .collect();
        Topology::from_coords(nodes, scale)
    }

    pub fn nodes(&self) -> &[EdgeNode] {
        &self.nodes
    }

    pub fn node(&self, v: NodeIdx) -> &EdgeNode {
        &self.nodes[v]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn comm_cost(&self, v: NodeIdx, w: NodeIdx) -> f64 {
        self.comm_cost[v][w]
    }

    pub fn comm_matrix(&self) -> &[Vec<f64>] {
        &self.comm_cost
    }

    /// Every node must be able to host at least one container of any type.
    pub fn check_catalog(&self, catalog: &Catalog) -> Result<()> {
        let largest = catalog.max_mem_mb();
        for node in &self.nodes {
            if node.capacity_mb < largest {
                return Err(Error::config(format!(
                    "node {} capacity {} MB cannot host the largest container ({} MB)",
                    node.id, node.capacity_mb, largest
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy with node labels permuted: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[NodeIdx]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if !sorted.iter().copied().eq(0..self.len()) {
            return Err(Error::config(format!(
                "{perm:?} is not a permutation of the {} node labels",
                self.len()
            )));
        }
        let nodes = perm
            .iter()
            .enumerate()
            .map(|(i, &old)| EdgeNode {
                id: i,
                ..self.nodes[old].clone()
            })
            .collect();
        let comm = perm
            .iter()
            .map(|&a| perm.iter().map(|&b| self.comm_cost[a][b]).collect())
            .collect();
        Topology::new(nodes, comm)
    }
}

pub fn comm_cost_from_coords(nodes: &[EdgeNode], scale: f64) -> Result<Vec<Vec<f64>>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::config(format!("distance scale must be > 0, got {scale}")));
    }
    let coords = nodes
        .iter()
        .map(|n| {
            n.coord
                .ok_or_else(|| Error::config(format!("node {} has no coordinate", n.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(coords
        .iter()
        .map(|&(x0, y0)| {
            coords
                .iter()
                .map(|&(x1, y1)| scale * (x1 - x0).hypot(y1 - y0))
                .collect()
        })
        .collect())
}

fn read_nodes_csv(path: &Path) -> Result<Vec<EdgeNode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut nodes = Vec::new();
    for row in reader.deserialize::<NodeRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let mut node = EdgeNode::new(row.id, row.capacity_mb, row.cpu_ghz);
        if let (Some(x), Some(y)) = (row.x, row.y) {
            node.coord = Some((x, y));
        }
        nodes.push(node);
    }
    Ok(nodes)
}

fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("bad cost {field:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: err.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionType {
    pub id: TypeIdx,
    #[serde(default)]
    pub name: String,
    pub mem_mb: f64,
}

/// The set of container types, indexed densely by type id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog(Vec<FunctionType>);

impl Catalog {
    pub fn new(types: Vec<FunctionType>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::config("catalog needs at least one function type"));
        }
        for (i, t) in types.iter().enumerate() {
            if t.id != i {
                return Err(Error::config(format!(
                    "function type ids must be 0..{} in order",
                    types.len()
                )));
            }
            if !(t.mem_mb.is_finite() && t.mem_mb > 0.0) {
                return Err(Error::config(format!(
                    "function type {i}: mem_mb must be > 0"
                )));
            }
        }
        Ok(Catalog(types))
    }

    pub fn from_sizes(sizes_mb: &[f64]) -> Result<Self> {
        Catalog::new(
            sizes_mb
                .iter()
                .enumerate()
                .map(|(id, &mem_mb)| FunctionType {
                    id,
                    name: format!("f{id}"),
                    mem_mb,
                })
                .collect(),
        )
    }

    /// The four application containers used throughout the experiments.
    pub fn function_instances() -> Self {
        let named = [
            ("Web Server", 55.0),
            ("File Processing", 158.0),
            ("Supermarket Checkout", 332.0),
            ("Image Recognition", 92.0),
        ];
        Catalog(
            named
                .iter()
                .enumerate()
                .map(|(id, &(name, mem_mb))| FunctionType {
                    id,
                    name: name.to_string(),
                    mem_mb,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, n: TypeIdx) -> &FunctionType {
        &self.0[n]
    }

    pub fn mem_mb(&self, n: TypeIdx) -> f64 {
        self.0[n].mem_mb
    }

    pub fn iter(&self) -> impl Iterator<Item = &FunctionType> {
        self.0.iter()
    }

    pub fn max_mem_mb(&self) -> f64 {
        self.0.iter().map(|t| t.mem_mb).fold(0.0, f64::max)
    }
}

/// Objective weight and the coefficients that turn node/container properties
/// into switching (`p`) and running (`q`) costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub alpha: f64,
    pub switch_coeff: f64,
    pub run_coeff: f64,
}

impl CostParams {
    pub const DEFAULT_SWITCH_COEFF: f64 = 1.0;
    pub const DEFAULT_RUN_COEFF: f64 = 0.01;

    pub fn new(alpha: f64, switch_coeff: f64, run_coeff: f64) -> Result<Self> {
        for (name, value) in [
            ("alpha", alpha),
            ("switch_coeff", switch_coeff),
            ("run_coeff", run_coeff),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {value}")));
            }
        }
        Ok(CostParams {
            alpha,
            switch_coeff,
            run_coeff,
        })
    }

    pub fn with_alpha(alpha: f64) -> Result<Self> {
        CostParams::new(alpha, Self::DEFAULT_SWITCH_COEFF, Self::DEFAULT_RUN_COEFF)
    }

    /// Caching must never cost more per interval than re-creating:
    /// `alpha * q[v][n] <= p[v][n]` everywhere.
    pub fn validate_for(&self, topology: &Topology, catalog: &Catalog) -> Result<()> {
        for node in topology.nodes() {
            for ftype in catalog.iter() {
                let p = switching_cost(node, ftype, self);
                let q = running_cost(node, ftype, self);
                if self.alpha * q > p {
                    return Err(Error::config(format!(
                        "alpha * q = {} exceeds p = {} for type {} at node {}; \
                         caching would cost more than re-creating",
                        self.alpha * q,
                        p,
                        ftype.id,
                        node.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `p = switch_coeff * u / cpu`: cold starts are slower on slower CPUs and
/// for larger images.
pub fn switching_cost(node: &EdgeNode, ftype: &FunctionType, params: &CostParams) -> f64 {
    params.switch_coeff * ftype.mem_mb / node.cpu_ghz
}

/// `q = run_coeff * u * cpu`: the per-interval price of keeping a container alive.
pub fn running_cost(node: &EdgeNode, ftype: &FunctionType, params: &CostParams) -> f64 {
    params.run_coeff * ftype.mem_mb * node.cpu_ghz
}

/// Dense `p`/`q` tables plus each node's neighbours ordered by distance.
#[derive(Debug, Clone)]
pub struct CostTable {
    switching: Vec<Vec<f64>>,
    running: Vec<Vec<f64>>,
    alpha: f64,
    by_distance: Vec<Vec<NodeIdx>>,
}

impl CostTable {
    pub fn new(topology: &Topology, catalog: &Catalog, params: &CostParams) -> Self {
        let switching = topology
            .nodes()
            .iter()
            .map(|node| catalog.iter().map(|t| switching_cost(node, t, params)).collect())
            .collect();
        let running = topology
            .nodes()
            .iter()
            .map(|node| catalog.iter().map(|t| running_cost(node, t, params)).collect())
            .collect();
        let by_distance = (0..topology.len())
            .map(|v| {
                let mut others: Vec<NodeIdx> = (0..topology.len()).filter(|&w| w != v).collect();
                others.sort_by(|&a, &b| {
                    topology
                        .comm_cost(v, a)
                        .total_cmp(&topology.comm_cost(v, b))
                        .then(a.cmp(&b))
                });
                others
            })
            .collect();
        CostTable {
            switching,
            running,
            alpha: params.alpha,
            by_distance,
        }
    }

    pub fn p(&self, v: NodeIdx, n: TypeIdx) -> f64 {
        self.switching[v][n]
    }

    pub fn q(&self, v: NodeIdx, n: TypeIdx) -> f64 {
        self.running[v][n]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Other nodes sorted by ascending `d[v][.]`, ties by node id.
    pub fn neighbours(&self, v: NodeIdx) -> &[NodeIdx] {
        &self.by_distance[v]
    }
}

/// Invocation statistics used by recency/frequency-aware eviction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InvocationStats {
    freq: Vec<u64>,
    last_used: Vec<Option<Interval>>,
}

impl InvocationStats {
    pub fn new(n_types: usize) -> Self {
        InvocationStats {
            freq: vec![0; n_types],
            last_used: vec![None; n_types],
        }
    }

    /// Cumulative invocation count `f_n`.
    pub fn freq(&self, n: TypeIdx) -> u64 {
        self.freq[n]
    }

    /// Interval of the most recent invocation `t_n`, if any.
    pub fn last_used(&self, n: TypeIdx) -> Option<Interval> {
        self.last_used[n]
    }

    /// Records `count` invocations of type `n` during interval `now`.
    pub fn on_invocation(&mut self, n: TypeIdx, now: Interval, count: u64) {
        if count == 0 {
            return;
        }
        self.freq[n] += count;
        self.last_used[n] = Some(self.last_used[n].map_or(now, |t| t.max(now)));
    }
}

/// Runtime state of one edge node.
///
/// Idle containers are kept per type as a queue of the intervals at which
/// they entered the cache: the back is the most recently cached container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    active: Vec<u32>,
    cache: Vec<VecDeque<Interval>>,
    pub stats: InvocationStats,
}

impl NodeState {
    pub fn new(n_types: usize) -> Self {
        NodeState {
            active: vec![0; n_types],
            cache: vec![VecDeque::new(); n_types],
            stats: InvocationStats::new(n_types),
        }
    }

    pub fn n_types(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self, n: TypeIdx) -> u32 {
        self.active[n]
    }

    pub fn cached(&self, n: TypeIdx) -> u32 {
        self.cache[n].len() as u32
    }

    pub fn total_cached(&self) -> u32 {
        self.cache.iter().map(|c| c.len() as u32).sum()
    }

    pub fn alive(&self, n: TypeIdx) -> u32 {
        self.active[n] + self.cached(n)
    }

    /// Cache-entry intervals of the idle type-`n` containers, oldest first.
    pub fn cache_entries(&self, n: TypeIdx) -> impl Iterator<Item = Interval> + '_ {
        self.cache[n].iter().copied()
    }

    /// Moves up to `count` idle containers of type `n` into service, most
    /// recently cached first. Returns how many were taken.
    pub fn take_cached(&mut self, n: TypeIdx, count: u32) -> u32 {
        let take = count.min(self.cached(n));
        for _ in 0..take {
            self.cache[n].pop_back();
        }
        self.active[n] += take;
        take
    }

    /// Starts `count` fresh containers of type `n`.
    pub fn create(&mut self, n: TypeIdx, count: u32) {
        self.active[n] += count;
    }

    /// Destroys the longest-idle cached container of type `n`.
    pub fn evict_oldest(&mut self, n: TypeIdx) -> Option<Interval> {
        self.cache[n].pop_front()
    }

    /// Destroys every cached container of type `n` that entered the cache at
    /// or before `cutoff`. Returns the number destroyed.
    pub fn expire_before(&mut self, n: TypeIdx, cutoff: Interval) -> u32 {
        let mut removed = 0;
        while self.cache[n].front().is_some_and(|&t| t <= cutoff) {
            self.cache[n].pop_front();
            removed += 1;
        }
        removed
    }

    /// Service finished: every active container becomes idle, stamped `now`.
    pub fn release_active(&mut self, now: Interval) {
        for (n, count) in self.active.iter_mut().enumerate() {
            for _ in 0..*count {
                self.cache[n].push_back(now);
            }
            *count = 0;
        }
    }

    /// Destroys all active containers without caching them.
    pub fn drop_active(&mut self) -> Vec<u32> {
        std::mem::replace(&mut self.active, vec![0; self.cache.len()])
    }
}

/// Memory held by active and cached containers.
pub fn occupancy(state: &NodeState, catalog: &Catalog) -> f64 {
    (0..state.n_types())
        .map(|n| catalog.mem_mb(n) * f64::from(state.alive(n)))
        .sum()
}

/// Per-interval request counts `lambda[v][n]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestBatch {
    pub interval: Interval,
    pub counts: Vec<Vec<u32>>,
}

impl RequestBatch {
    pub fn empty(interval: Interval, n_nodes: usize, n_types: usize) -> Self {
        RequestBatch {
            interval,
            counts: vec![vec![0; n_types]; n_nodes],
        }
    }

    pub fn get(&self, v: NodeIdx, n: TypeIdx) -> u32 {
        self.counts[v][n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| u64::from(c)).sum()
    }

    pub fn check_shape(&self, n_nodes: usize, n_types: usize) -> Result<()> {
        if self.counts.len() != n_nodes || self.counts.iter().any(|r| r.len() != n_types) {
            return Err(Error::Precondition(format!(
                "batch for interval {} is not {n_nodes} nodes x {n_types} types",
                self.interval
            )));
        }
        Ok(())
    }
}
