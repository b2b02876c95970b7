//! Exact offline optimum for tiny instances, and per-request competitive
//! checks over audit logs.
//!
//! The solver is a forward dynamic program over the number of alive
//! containers of every `(node, type)` pair between intervals. Within an
//! interval it enumerates every split of each origin's requests across
//! serving nodes, keeping for each resulting per-node served vector `m` the
//! split with the least communication cost. Given the alive vector `a` at the
//! start of the interval, serving `m` keeps `b = max(a, m)` containers alive
//! (billed for running), creates `max(m - a, 0)` of them, and must fit in
//! memory. Between intervals any `a' <= b` may be kept. Destroying an idle
//! container during an interval is equivalent to destroying it at the end of
//! the previous one, so every schedule the online simulator can produce lies
//! in this search space.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Catalog, CostParams, CostTable, EdgeNode, Interval, NodeIdx, RequestBatch, Topology, TypeIdx,
};
use crate::policies::PolicyKind;
use crate::scheduler::{AuditRecord, StatsScope};
use crate::sim::{self, CheckLevel, RunResult, SimConfig, Workload};

pub const MAX_NODES: usize = 3;
pub const MAX_TYPES: usize = 2;
pub const MAX_INTERVALS: usize = 3;
/// Upper bound on `sum over intervals of |states| * |served vectors|`.
pub const MAX_ENUMERATION: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub topology: Topology,
    pub catalog: Catalog,
    pub params: CostParams,
    /// `demand[t][v][n]`, interval `t + 1`.
    pub demand: Vec<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeSpec {
    capacity_mb: f64,
    cpu_ghz: f64,
}

fn default_switch() -> f64 {
    CostParams::DEFAULT_SWITCH_COEFF
}

fn default_run() -> f64 {
    CostParams::DEFAULT_RUN_COEFF
}

/// On-disk form of a [`TinyInstance`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    nodes: Vec<NodeSpec>,
    comm_cost: Vec<Vec<f64>>,
    mem_mb: Vec<f64>,
    alpha: f64,
    #[serde(default = "default_switch")]
    switch_coeff: f64,
    #[serde(default = "default_run")]
    run_coeff: f64,
    demand: Vec<Vec<Vec<u32>>>,
}

impl TinyInstance {
    pub fn new(
        topology: Topology,
        catalog: Catalog,
        params: CostParams,
        demand: Vec<Vec<Vec<u32>>>,
    ) -> Result<Self> {
        let inst = TinyInstance {
            topology,
            catalog,
            params,
            demand,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn horizon(&self) -> usize {
        self.demand.len()
    }

    fn validate(&self) -> Result<()> {
        let (nv, nt, h) = (self.topology.len(), self.catalog.len(), self.horizon());
        if nv > MAX_NODES || nt > MAX_TYPES || h > MAX_INTERVALS {
            return Err(Error::Precondition(format!(
                "instance has {nv} nodes, {nt} types and {h} intervals; \
                 the exact solver accepts at most {MAX_NODES}, {MAX_TYPES} and {MAX_INTERVALS}"
            )));
        }
        if h == 0 {
            return Err(Error::config("instance needs at least one interval"));
        }
        self.topology.check_catalog(&self.catalog)?;
        self.params.validate_for(&self.topology, &self.catalog)?;
        for (t, counts) in self.demand.iter().enumerate() {
            RequestBatch {
                interval: t as Interval + 1,
                counts: counts.clone(),
            }
            .check_shape(nv, nt)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile =
            serde_json::from_str(text).map_err(|e| Error::config(format!("instance: {e}")))?;
        let nodes = file
            .nodes
            .iter()
            .enumerate()
            .map(|(i, s)| EdgeNode::new(i, s.capacity_mb, s.cpu_ghz))
            .collect();
        let topology = Topology::new(nodes, file.comm_cost)?;
        let catalog = Catalog::from_sizes(&file.mem_mb)?;
        let params = CostParams::new(file.alpha, file.switch_coeff, file.run_coeff)?;
        TinyInstance::new(topology, catalog, params, file.demand)
    }

    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            nodes: self
                .topology
                .nodes()
                .iter()
                .map(|n| NodeSpec {
                    capacity_mb: n.capacity_mb,
                    cpu_ghz: n.cpu_ghz,
                })
                .collect(),
            comm_cost: self.topology.comm_matrix().to_vec(),
            mem_mb: self.catalog.iter().map(|f| f.mem_mb).collect(),
            alpha: self.params.alpha,
            switch_coeff: self.params.switch_coeff,
            run_coeff: self.params.run_coeff,
            demand: self.demand.clone(),
        };
        serde_json::to_string_pretty(&file).expect("instance serialises")
    }

    pub fn batches(&self) -> Vec<RequestBatch> {
        self.demand
            .iter()
            .enumerate()
            .map(|(t, counts)| RequestBatch {
                interval: t as Interval + 1,
                counts: counts.clone(),
            })
            .collect()
    }

    /// Copy with node labels permuted: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[NodeIdx]) -> Result<Self> {
        let topology = self.topology.permuted(perm)?;
        let demand = self
            .demand
            .iter()
            .map(|counts| perm.iter().map(|&old| counts[old].clone()).collect())
            .collect();
        TinyInstance::new(topology, self.catalog.clone(), self.params, demand)
    }

    /// Simulation of `policy` on this instance with every runtime check on.
    pub fn sim_config(&self, policy: PolicyKind, ttl: u32, seed: u64) -> SimConfig {
        SimConfig {
            topology: Arc::new(self.topology.clone()),
            catalog: Arc::new(self.catalog.clone()),
            workload: Workload::Batches(Arc::new(self.batches())),
            policy,
            params: self.params,
            ttl,
            horizon: self.horizon() as u32,
            seed,
            check: CheckLevel::Full,
            audit: true,
            stats_scope: StatsScope::PerNode,
        }
    }

    pub fn run_policy(&self, policy: PolicyKind, ttl: u32, seed: u64) -> Result<RunResult> {
        sim::run(&self.sim_config(policy, ttl, seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub origin: NodeIdx,
    pub serving: NodeIdx,
    pub ftype: TypeIdx,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessStep {
    pub interval: Interval,
    pub assignment: Vec<Assignment>,
    /// `[v][n]`
    pub created: Vec<Vec<u32>>,
    /// Containers alive during the interval, `[v][n]`.
    pub alive: Vec<Vec<u32>>,
    /// Containers kept into the next interval, `[v][n]`.
    pub kept: Vec<Vec<u32>>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub cost: f64,
    /// Intervals in which something is alive or served; idle intervals are omitted.
    pub witness: Vec<WitnessStep>,
}

/// Mixed-radix lattice over `(node, type)` pairs, dimension `v * types + n`.
struct Lattice {
    radix: Vec<usize>,
    stride: Vec<usize>,
    size: usize,
}

impl Lattice {
    fn new(bounds: &[u32]) -> Option<Self> {
        let radix: Vec<usize> = bounds.iter().map(|&b| b as usize + 1).collect();
        let mut stride = Vec::with_capacity(radix.len());
        let mut size = 1usize;
        for &r in &radix {
            stride.push(size);
            size = size.checked_mul(r)?;
        }
        Some(Lattice {
            radix,
            stride,
            size,
        })
    }

    fn decode(&self, mut idx: usize, out: &mut [u32]) {
        for (k, &r) in self.radix.iter().enumerate() {
            out[k] = (idx % r) as u32;
            idx /= r;
        }
    }

    fn encode(&self, coords: &[u32]) -> usize {
        coords
            .iter()
            .zip(&self.stride)
            .map(|(&c, &s)| c as usize * s)
            .sum()
    }
}

/// One way of serving an interval's demand: served vector `[v * types + n]`,
/// its minimum communication cost, and a split achieving it.
struct ServedOption {
    served: Vec<u32>,
    comm: f64,
    assignment: Vec<Assignment>,
}

/// All compositions of `total` into `parts` non-negative parts.
fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Per type: served vector over nodes -> cheapest split.
fn type_options(
    inst: &TinyInstance,
    counts: &[Vec<u32>],
    n: TypeIdx,
) -> BTreeMap<Vec<u32>, (f64, Vec<Assignment>)> {
    let nv = inst.topology.len();
    let mut best: BTreeMap<Vec<u32>, (f64, Vec<Assignment>)> = BTreeMap::new();
    best.insert(vec![0; nv], (0.0, Vec::new()));
    for origin in 0..nv {
        let lambda = counts[origin][n];
        if lambda == 0 {
            continue;
        }
        let splits = compositions(lambda, nv);
        let mut next: BTreeMap<Vec<u32>, (f64, Vec<Assignment>)> = BTreeMap::new();
        for (served, (comm, assignment)) in &best {
            for split in &splits {
                let mut s = served.clone();
                let mut c = *comm;
                let mut a = assignment.clone();
                for (w, &x) in split.iter().enumerate() {
                    if x == 0 {
                        continue;
                    }
                    s[w] += x;
                    c += inst.topology.comm_cost(origin, w) * f64::from(x);
                    a.push(Assignment {
                        origin,
                        serving: w,
                        ftype: n,
                        count: x,
                    });
                }
                match next.get(&s) {
                    Some((old, _)) if *old <= c => {}
                    _ => {
                        next.insert(s, (c, a));
                    }
                }
            }
        }
        best = next;
    }
    best
}

fn interval_options(inst: &TinyInstance, counts: &[Vec<u32>]) -> Vec<ServedOption> {
    let (nv, nt) = (inst.topology.len(), inst.catalog.len());
    let mut combos = vec![ServedOption {
        served: vec![0; nv * nt],
        comm: 0.0,
        assignment: Vec::new(),
    }];
    for n in 0..nt {
        let per_type = type_options(inst, counts, n);
        let mut next = Vec::with_capacity(combos.len() * per_type.len());
        for base in &combos {
            for (served, (comm, assignment)) in &per_type {
                let mut s = base.served.clone();
                for (w, &x) in served.iter().enumerate() {
                    s[w * nt + n] = x;
                }
                let mut a = base.assignment.clone();
                a.extend_from_slice(assignment);
                next.push(ServedOption {
                    served: s,
                    comm: base.comm + comm,
                    assignment: a,
                });
            }
        }
        combos = next;
    }
    combos
}

/// Largest useful alive count per dimension: what fits in memory, and never
/// more than the peak interval demand for the type.
fn dimension_bounds(inst: &TinyInstance) -> Vec<u32> {
    let (nv, nt) = (inst.topology.len(), inst.catalog.len());
    let mut bounds = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        for n in 0..nt {
            let fit = (inst.topology.node(v).capacity_mb / inst.catalog.mem_mb(n)).floor() as u32;
            let peak = inst
                .demand
                .iter()
                .map(|c| c.iter().map(|row| row[n]).sum::<u32>())
                .max()
                .unwrap_or(0);
            bounds.push(fit.min(peak));
        }
    }
    bounds
}

/// Number of (state, served vector) pairs the solver would visit.
pub fn enumeration_size(inst: &TinyInstance) -> u64 {
    let bounds = dimension_bounds(inst);
    let states = bounds
        .iter()
        .try_fold(1u64, |acc, &b| acc.checked_mul(u64::from(b) + 1));
    let Some(states) = states else {
        return u64::MAX;
    };
    let nv = inst.topology.len() as u64;
    inst.demand
        .iter()
        .map(|counts| {
            // Upper bound on distinct served vectors: product over types of
            // the number of ways to place that type's demand on the nodes.
            let served: u64 = (0..inst.catalog.len())
                .map(|n| {
                    let total: u64 = counts.iter().map(|row| u64::from(row[n])).sum();
                    binomial(total + nv - 1, nv - 1)
                })
                .product();
            states.saturating_mul(served)
        })
        .fold(0u64, u64::saturating_add)
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

pub fn solve_exact(inst: &TinyInstance) -> Result<Solution> {
    inst.validate()?;
    let size = enumeration_size(inst);
    if size > MAX_ENUMERATION {
        return Err(Error::InstanceTooLarge {
            size,
            cap: MAX_ENUMERATION,
        });
    }
    let (nv, nt) = (inst.topology.len(), inst.catalog.len());
    let dims = nv * nt;
    let costs = CostTable::new(&inst.topology, &inst.catalog, &inst.params);
    let alpha = inst.params.alpha;
    let bounds = dimension_bounds(inst);
    let lattice = Lattice::new(&bounds).ok_or(Error::InstanceTooLarge {
        size: u64::MAX,
        cap: MAX_ENUMERATION,
    })?;
    let p: Vec<f64> = (0..dims).map(|k| costs.p(k / nt, k % nt)).collect();
    let q: Vec<f64> = (0..dims).map(|k| costs.q(k / nt, k % nt)).collect();
    let mem: Vec<f64> = (0..dims).map(|k| inst.catalog.mem_mb(k % nt)).collect();

    struct Step {
        options: Vec<ServedOption>,
        /// For each alive vector `b`: (start state, option index, interval cost).
        reached_from: Vec<Option<(usize, usize, f64)>>,
        /// For each kept vector `a'`: the alive vector it was trimmed from.
        kept_from: Vec<usize>,
    }

    let mut value = vec![f64::INFINITY; lattice.size];
    value[0] = 0.0;
    let mut steps: Vec<Step> = Vec::with_capacity(inst.horizon());
    let mut a = vec![0u32; dims];
    let mut b = vec![0u32; dims];
    let mut last_mid = Vec::new();

    for counts in &inst.demand {
        let options = interval_options(inst, counts);
        let mut mid = vec![f64::INFINITY; lattice.size];
        let mut reached_from = vec![None; lattice.size];
        for (ai, &start) in value.iter().enumerate() {
            if !start.is_finite() {
                continue;
            }
            lattice.decode(ai, &mut a);
            'option: for (oi, opt) in options.iter().enumerate() {
                let mut switching = 0.0;
                let mut running = 0.0;
                let mut used = vec![0.0; nv];
                for k in 0..dims {
                    let m = opt.served[k];
                    b[k] = a[k].max(m);
                    if b[k] > bounds[k] {
                        continue 'option;
                    }
                    switching += p[k] * f64::from(m.saturating_sub(a[k]));
                    running += q[k] * f64::from(b[k]);
                    used[k / nt] += mem[k] * f64::from(b[k]);
                }
                if (0..nv).any(|v| used[v] > inst.topology.node(v).capacity_mb) {
                    continue;
                }
                let cost = switching + opt.comm + alpha * running;
                let bi = lattice.encode(&b);
                if start + cost < mid[bi] {
                    mid[bi] = start + cost;
                    reached_from[bi] = Some((ai, oi, cost));
                }
            }
        }
        // Keep any a' <= b: suffix minimum over the lattice.
        let mut out = mid.clone();
        let mut kept_from: Vec<usize> = (0..lattice.size).collect();
        for k in 0..dims {
            let stride = lattice.stride[k];
            let radix = lattice.radix[k];
            for idx in (0..lattice.size).rev() {
                if (idx / stride) % radix + 1 < radix && out[idx + stride] < out[idx] {
                    out[idx] = out[idx + stride];
                    kept_from[idx] = kept_from[idx + stride];
                }
            }
        }
        steps.push(Step {
            options,
            reached_from,
            kept_from,
        });
        value = out;
        last_mid = mid;
    }

    let (mut bi, &cost) = last_mid
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("lattice is non-empty");
    if !cost.is_finite() {
        return Err(Error::Precondition(
            "demand cannot be served within node capacities".into(),
        ));
    }

    let to_matrix = |flat: &[u32]| -> Vec<Vec<u32>> { flat.chunks(nt).map(<[u32]>::to_vec).collect() };
    let mut witness = Vec::new();
    let mut kept = vec![0u32; dims];
    for (t, step) in steps.iter().enumerate().rev() {
        let (ai, oi, step_cost) = step.reached_from[bi].expect("optimal path is reachable");
        lattice.decode(bi, &mut b);
        lattice.decode(ai, &mut a);
        let opt = &step.options[oi];
        let created: Vec<u32> = (0..dims).map(|k| opt.served[k].saturating_sub(a[k])).collect();
        if b.iter().any(|&x| x > 0) || !opt.assignment.is_empty() {
            witness.push(WitnessStep {
                interval: t as Interval + 1,
                assignment: opt.assignment.clone(),
                created: to_matrix(&created),
                alive: to_matrix(&b),
                kept: to_matrix(&kept),
                cost: step_cost,
            });
        }
        kept.copy_from_slice(&a);
        if t > 0 {
            bi = steps[t - 1].kept_from[ai];
        }
    }
    witness.reverse();
    Ok(Solution { cost, witness })
}

/// Cheapest conceivable cost of serving one type-`ftype` request that
/// originates at `node`: the container must at least run for the interval.
pub fn per_request_lower_bound(ftype: TypeIdx, node: NodeIdx, costs: &CostTable) -> f64 {
    costs.alpha() * costs.q(node, ftype)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompetitiveReport {
    pub requests: u64,
    /// Rejected requests carry no cost and are not checked.
    pub rejected: u64,
    /// Largest realized / lower-bound ratio observed.
    pub max_ratio: f64,
    /// Worst-case ratio allowed for the record attaining `max_ratio`.
    pub bound_at_max: f64,
    /// Largest worst-case ratio over all records.
    pub max_bound: f64,
}

/// Checks every served request against
/// `max(1 + p/(alpha*q), 1 + d/(alpha*q))` times its lower bound, with `p`,
/// `q` taken at the origin and `d` to the serving node. Comparison is exact,
/// made in cost units as `realized <= alpha*q + max(p, d)`.
pub fn competitive_check(
    audit: &[AuditRecord],
    costs: &CostTable,
    topology: &Topology,
) -> Result<CompetitiveReport> {
    let mut report = CompetitiveReport::default();
    for r in audit {
        let Some(serving) = r.serving_node else {
            report.rejected += 1;
            continue;
        };
        let lower = per_request_lower_bound(r.ftype, r.origin, costs);
        let p = costs.p(r.origin, r.ftype);
        let d = topology.comm_cost(r.origin, serving);
        let limit = lower + p.max(d);
        if !(r.marginal_cost <= limit) {
            return Err(Error::BoundViolation(format!(
                "{r:?} costs {} above the worst case {limit}",
                r.marginal_cost
            )));
        }
        let ratio = r.marginal_cost / lower;
        let bound = (1.0 + p / lower).max(1.0 + d / lower);
        report.requests += 1;
        if ratio > report.max_ratio {
            report.max_ratio = ratio;
            report.bound_at_max = bound;
        }
        report.max_bound = report.max_bound.max(bound);
    }
    Ok(report)
}
