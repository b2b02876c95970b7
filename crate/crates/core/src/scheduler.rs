//! Per-interval request distribution.
//!
//! For every origin node and function type (ascending ids) requests are
//! served, in order of preference, by idle containers at the origin, by idle
//! containers at neighbours whose communication cost does not exceed the
//! origin's switching cost (nearest first), and finally by fresh containers
//! at the origin. Making room for a fresh container runs the eviction policy
//! one container at a time. If the origin cannot free enough memory the
//! request is created at the cheapest neighbour by `d + p` that can, and
//! rejected only when no node can host it.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::costs::IntervalDecision;
use crate::error::{Error, Result};
use crate::model::{
    occupancy, Catalog, CostTable, Interval, InvocationStats, NodeIdx, NodeState, RequestBatch,
    Topology, TypeIdx,
};
use crate::policies::EvictionPolicy;

/// Whether eviction statistics are tracked per node or shared cluster-wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsScope {
    #[default]
    PerNode,
    Global,
}

/// Mutable state of every node in one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterState {
    pub nodes: Vec<NodeState>,
    global: Option<InvocationStats>,
}

impl ClusterState {
    pub fn new(n_nodes: usize, n_types: usize, scope: StatsScope) -> Self {
        ClusterState {
            nodes: vec![NodeState::new(n_types); n_nodes],
            global: (scope == StatsScope::Global).then(|| InvocationStats::new(n_types)),
        }
    }

    /// Statistics seen by the eviction policy at node `v`.
    pub fn stats(&self, v: NodeIdx) -> &InvocationStats {
        self.global.as_ref().unwrap_or(&self.nodes[v].stats)
    }

    fn record_invocations(&mut self, v: NodeIdx, n: TypeIdx, now: Interval, count: u32) {
        let stats = match &mut self.global {
            Some(g) => g,
            None => &mut self.nodes[v].stats,
        };
        stats.on_invocation(n, now, u64::from(count));
    }
}

/// Remaining requests of one origin and type during distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingWork {
    pub origin: NodeIdx,
    pub ftype: TypeIdx,
    pub remaining: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Hit,
    Offload,
    Create,
    Reject,
}

/// One served (or rejected) request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub interval: Interval,
    pub origin: NodeIdx,
    pub ftype: TypeIdx,
    pub action: Action,
    pub serving_node: Option<NodeIdx>,
    pub marginal_cost: f64,
    pub bound: f64,
}

pub fn write_audit_csv<W: Write>(records: &[AuditRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Realized cost of one request next to its worst-case bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestCost {
    pub realized: f64,
    pub bound: f64,
}

/// Marginal cost of serving a type-`n` request from `origin` at `serving`,
/// charged with the origin's running cost, and the worst case
/// `alpha*q * max(1 + p/(alpha*q), 1 + d/(alpha*q))`, evaluated as
/// `alpha*q + max(p, d)` so that a cold start at the origin meets it exactly.
pub fn per_request_bound(
    ftype: TypeIdx,
    origin: NodeIdx,
    serving: NodeIdx,
    served_from_cache: bool,
    costs: &CostTable,
    topology: &Topology,
) -> RequestCost {
    let alpha_q = costs.alpha() * costs.q(origin, ftype);
    let d = topology.comm_cost(origin, serving);
    let p = costs.p(origin, ftype);
    let latency = match (served_from_cache, origin == serving) {
        (true, true) => 0.0,
        (true, false) => d,
        (false, true) => p,
        (false, false) => d + costs.p(serving, ftype),
    };
    RequestCost {
        realized: latency + alpha_q,
        bound: alpha_q + p.max(d),
    }
}

pub struct Scheduler<'a> {
    pub topology: &'a Topology,
    pub catalog: &'a Catalog,
    pub costs: &'a CostTable,
    pub policy: &'a dyn EvictionPolicy,
}

impl Scheduler<'_> {
    pub fn distribute_interval(
        &self,
        cluster: &mut ClusterState,
        batch: &RequestBatch,
        now: Interval,
        rng: &mut dyn RngCore,
        mut audit: Option<&mut Vec<AuditRecord>>,
    ) -> Result<IntervalDecision> {
        if batch.interval != now {
            return Err(Error::Precondition(format!(
                "batch for interval {} offered at interval {now}",
                batch.interval
            )));
        }
        batch.check_shape(self.topology.len(), self.catalog.len())?;
        let mut decision = IntervalDecision::new(now, batch.counts.clone());

        for origin in 0..self.topology.len() {
            for ftype in 0..self.catalog.len() {
                let remaining = batch.get(origin, ftype);
                if remaining == 0 {
                    continue;
                }
                let work = PendingWork {
                    origin,
                    ftype,
                    remaining,
                };
                self.serve(cluster, work, now, rng, &mut decision, audit.as_deref_mut())?;
            }
        }
        Ok(decision)
    }

    fn serve(
        &self,
        cluster: &mut ClusterState,
        mut work: PendingWork,
        now: Interval,
        rng: &mut dyn RngCore,
        decision: &mut IntervalDecision,
        mut audit: Option<&mut Vec<AuditRecord>>,
    ) -> Result<()> {
        let PendingWork { origin, ftype, .. } = work;
        let mut log = |action, serving: Option<NodeIdx>, count: u32| {
            if let Some(records) = audit.as_deref_mut() {
                let cost = serving.map(|s| {
                    per_request_bound(ftype, origin, s, action != Action::Create, self.costs, self.topology)
                });
                let record = AuditRecord {
                    interval: now,
                    origin,
                    ftype,
                    action,
                    serving_node: serving,
                    marginal_cost: cost.map_or(0.0, |c| c.realized),
                    bound: cost.map_or(0.0, |c| c.bound),
                };
                records.extend(std::iter::repeat_n(record, count as usize));
            }
        };

        // Idle containers at the origin.
        let hits = cluster.nodes[origin].take_cached(ftype, work.remaining);
        if hits > 0 {
            cluster.record_invocations(origin, ftype, now, hits);
            decision.local_served[origin][ftype] += hits;
            work.remaining -= hits;
            log(Action::Hit, Some(origin), hits);
        }

        // Idle containers at neighbours closer than a cold start.
        let p_origin = self.costs.p(origin, ftype);
        for &w in self.costs.neighbours(origin) {
            if work.remaining == 0 || self.topology.comm_cost(origin, w) > p_origin {
                break;
            }
            let got = cluster.nodes[w].take_cached(ftype, work.remaining);
            if got > 0 {
                cluster.record_invocations(w, ftype, now, got);
                *decision.offloaded.entry((origin, w, ftype)).or_default() += got;
                work.remaining -= got;
                log(Action::Offload, Some(w), got);
            }
        }

        // Fresh containers.
        while work.remaining > 0 {
            let host = if self.make_room(cluster, origin, ftype, rng, decision)? {
                Some(origin)
            } else {
                self.fallback_host(cluster, origin, ftype, rng, decision)?
            };
            match host {
                Some(h) => {
                    cluster.nodes[h].create(ftype, 1);
                    cluster.record_invocations(h, ftype, now, 1);
                    decision.created[h][ftype] += 1;
                    if h == origin {
                        decision.local_served[origin][ftype] += 1;
                    } else {
                        *decision.offloaded.entry((origin, h, ftype)).or_default() += 1;
                        *decision.remote_created.entry((origin, h, ftype)).or_default() += 1;
                    }
                    log(Action::Create, Some(h), 1);
                }
                None => {
                    decision.rejected[origin][ftype] += 1;
                    log(Action::Reject, None, 1);
                }
            }
            work.remaining -= 1;
        }
        Ok(())
    }

    /// Memory that `node` could offer a new type-`n` container if it destroyed
    /// every idle container.
    fn can_host(&self, state: &NodeState, node: NodeIdx, ftype: TypeIdx) -> bool {
        let idle: f64 = (0..self.catalog.len())
            .map(|n| self.catalog.mem_mb(n) * f64::from(state.cached(n)))
            .sum();
        occupancy(state, self.catalog) - idle + self.catalog.mem_mb(ftype)
            <= self.topology.node(node).capacity_mb
    }

    /// Evicts idle containers at `node` until a type-`ftype` container fits.
    /// Leaves the node untouched and returns `false` if that is impossible.
    fn make_room(
        &self,
        cluster: &mut ClusterState,
        node: NodeIdx,
        ftype: TypeIdx,
        rng: &mut dyn RngCore,
        decision: &mut IntervalDecision,
    ) -> Result<bool> {
        if !self.can_host(&cluster.nodes[node], node, ftype) {
            return Ok(false);
        }
        let need = self.catalog.mem_mb(ftype);
        let capacity = self.topology.node(node).capacity_mb;
        while occupancy(&cluster.nodes[node], self.catalog) + need > capacity {
            let victim = self.policy.select_victim(
                &cluster.nodes[node],
                cluster.stats(node),
                self.catalog,
                rng,
            )?;
            cluster.nodes[node].evict_oldest(victim);
            decision.evicted[node][victim] += 1;
            decision.destroyed[node][victim] += 1;
        }
        Ok(true)
    }

    fn fallback_host(
        &self,
        cluster: &mut ClusterState,
        origin: NodeIdx,
        ftype: TypeIdx,
        rng: &mut dyn RngCore,
        decision: &mut IntervalDecision,
    ) -> Result<Option<NodeIdx>> {
        let mut candidates: Vec<NodeIdx> = self.costs.neighbours(origin).to_vec();
        let price = |w: NodeIdx| self.topology.comm_cost(origin, w) + self.costs.p(w, ftype);
        candidates.sort_by(|&a, &b| price(a).total_cmp(&price(b)).then(a.cmp(&b)));
        for w in candidates {
            if self.make_room(cluster, w, ftype, rng, decision)? {
                return Ok(Some(w));
            }
        }
        Ok(None)
    }

    /// Returns every active container to the cache, then applies the policy's
    /// end-of-interval destructions. Returns `(node, type, count)` destroyed.
    pub fn end_interval(
        &self,
        cluster: &mut ClusterState,
        now: Interval,
        decision: &mut IntervalDecision,
    ) -> Vec<(NodeIdx, TypeIdx, u32)> {
        let mut destroyed = Vec::new();
        for (v, state) in cluster.nodes.iter_mut().enumerate() {
            state.release_active(now);
            for (n, count) in self.policy.end_of_interval(state, now) {
                let mut removed = 0;
                while removed < count && state.evict_oldest(n).is_some() {
                    removed += 1;
                }
                if removed > 0 {
                    decision.destroyed[v][n] += removed;
                    destroyed.push((v, n, removed));
                }
            }
        }
        destroyed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostParams, EdgeNode};
    use crate::policies::{FixedCaching, NoCache, PCache, PolicyKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        topo: Topology,
        catalog: Catalog,
        costs: CostTable,
    }

    /// Two nodes at distance 3, unit CPUs, the four standard containers.
    fn pair(capacity: f64) -> Fixture {
        let nodes = vec![EdgeNode::new(0, capacity, 1.0), EdgeNode::new(1, capacity, 1.0)];
        let topo = Topology::new(nodes, vec![vec![0.0, 3.0], vec![3.0, 0.0]]).unwrap();
        let catalog = Catalog::function_instances();
        let costs = CostTable::new(&topo, &catalog, &CostParams::new(0.01, 1.0, 0.01).unwrap());
        Fixture { topo, catalog, costs }
    }

    fn batch(now: Interval, counts: Vec<Vec<u32>>) -> RequestBatch {
        RequestBatch { interval: now, counts }
    }

    fn seed(cluster: &mut ClusterState, v: NodeIdx, n: TypeIdx, count: u32, at: Interval) {
        cluster.nodes[v].create(n, count);
        cluster.nodes[v].release_active(at);
        cluster.record_invocations(v, n, at, count);
    }

    #[test]
    fn local_cache_serves_first() {
        let f = pair(4096.0);
        let policy = PCache;
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        seed(&mut cluster, 0, 0, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s
            .distribute_interval(&mut cluster, &batch(2, vec![vec![2, 0, 0, 0], vec![0; 4]]), 2, &mut rng, None)
            .unwrap();
        assert_eq!(d.local_served[0][0], 2);
        assert!(d.offloaded.is_empty());
        assert_eq!(d.total_created(), 0);
        assert_eq!(cluster.nodes[0].cached(0), 1);
        assert_eq!(cluster.nodes[0].active(0), 2);
    }

    #[test]
    fn offloads_to_neighbour_cache_when_cheaper() {
        let f = pair(4096.0);
        let policy = PCache;
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        seed(&mut cluster, 1, 0, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut audit = Vec::new();
        let d = s
            .distribute_interval(&mut cluster, &batch(2, vec![vec![1, 0, 0, 0], vec![0; 4]]), 2, &mut rng, Some(&mut audit))
            .unwrap();
        assert_eq!(d.offloaded.get(&(0, 1, 0)), Some(&1));
        assert_eq!(d.total_created(), 0);
        assert_eq!(audit.len(), 1);
        assert_eq!(audit[0].action, Action::Offload);
        assert_eq!(audit[0].serving_node, Some(1));
    }

    #[test]
    fn creates_when_nothing_is_cached() {
        let f = pair(4096.0);
        let policy = PCache;
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s
            .distribute_interval(&mut cluster, &batch(1, vec![vec![1, 0, 0, 0], vec![0; 4]]), 1, &mut rng, None)
            .unwrap();
        assert_eq!(d.created[0][0], 1);
        assert_eq!(d.local_served[0][0], 1);
        assert_eq!(cluster.nodes[0].stats.freq(0), 1);
        assert_eq!(cluster.nodes[0].stats.last_used(0), Some(1));
    }

    #[test]
    fn distant_neighbour_cache_is_not_used() {
        let nodes = vec![EdgeNode::new(0, 4096.0, 1.0), EdgeNode::new(1, 4096.0, 1.0)];
        let topo = Topology::new(nodes, vec![vec![0.0, 60.0], vec![60.0, 0.0]]).unwrap();
        let catalog = Catalog::function_instances();
        let costs = CostTable::new(&topo, &catalog, &CostParams::new(0.01, 1.0, 0.01).unwrap());
        let policy = PCache;
        let s = Scheduler { topology: &topo, catalog: &catalog, costs: &costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        seed(&mut cluster, 1, 0, 1, 1); // Web Server: p = 55 < d = 60
        seed(&mut cluster, 1, 2, 1, 1); // Checkout: p = 332 > d = 60
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s
            .distribute_interval(&mut cluster, &batch(2, vec![vec![1, 0, 1, 0], vec![0; 4]]), 2, &mut rng, None)
            .unwrap();
        assert_eq!(d.created[0][0], 1);
        assert_eq!(d.offloaded.get(&(0, 1, 2)), Some(&1));
    }

    #[test]
    fn eviction_makes_room_and_respects_capacity() {
        // Room for exactly one Checkout (332) or six Web Servers.
        let f = pair(340.0);
        let policy = PCache;
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        seed(&mut cluster, 0, 0, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s
            .distribute_interval(&mut cluster, &batch(2, vec![vec![0, 0, 1, 0], vec![0; 4]]), 2, &mut rng, None)
            .unwrap();
        assert_eq!(d.created[0][2], 1);
        assert_eq!(d.evicted[0][0], 6);
        assert!(occupancy(&cluster.nodes[0], &f.catalog) <= 340.0);
    }

    #[test]
    fn falls_back_to_neighbour_when_origin_is_full_of_active_containers() {
        let f = pair(340.0);
        let policy = PCache;
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut audit = Vec::new();
        let d = s
            .distribute_interval(&mut cluster, &batch(1, vec![vec![0, 0, 3, 0], vec![0; 4]]), 1, &mut rng, Some(&mut audit))
            .unwrap();
        assert_eq!(d.created[0][2], 1);
        assert_eq!(d.created[1][2], 1);
        assert_eq!(d.remote_created.get(&(0, 1, 2)), Some(&1));
        assert_eq!(d.rejected[0][2], 1);
        assert!(d.check_conservation().is_ok());
        assert_eq!(audit.iter().filter(|r| r.action == Action::Reject).count(), 1);
    }

    #[test]
    fn wrong_interval_is_a_contract_error() {
        let f = pair(4096.0);
        let policy = PCache;
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &policy };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s
            .distribute_interval(&mut cluster, &batch(3, vec![vec![0; 4]; 2]), 2, &mut rng, None)
            .is_err());
    }

    #[test]
    fn end_interval_per_policy() {
        let f = pair(4096.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let req = batch(1, vec![vec![3, 0, 0, 0], vec![0; 4]]);

        let run = |policy: &dyn EvictionPolicy, rng: &mut ChaCha8Rng| {
            let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy };
            let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
            let mut d = s.distribute_interval(&mut cluster, &req, 1, rng, None).unwrap();
            let destroyed = s.end_interval(&mut cluster, 1, &mut d);
            (cluster, destroyed)
        };

        let (cluster, destroyed) = run(&PCache, &mut rng);
        assert!(destroyed.is_empty());
        assert_eq!(cluster.nodes[0].cached(0), 3);
        assert_eq!(cluster.nodes[0].active(0), 0);

        let (cluster, destroyed) = run(&NoCache, &mut rng);
        assert_eq!(destroyed, vec![(0, 0, 3)]);
        assert_eq!(cluster.nodes[0].cached(0), 0);

        // FC: a container idle for ttl intervals goes at the end of that interval.
        let fc = FixedCaching { ttl: 2 };
        let s = Scheduler { topology: &f.topo, catalog: &f.catalog, costs: &f.costs, policy: &fc };
        let mut cluster = ClusterState::new(2, 4, StatsScope::PerNode);
        let mut d = s.distribute_interval(&mut cluster, &req, 1, &mut rng, None).unwrap();
        assert!(s.end_interval(&mut cluster, 1, &mut d).is_empty());
        let empty = |t| batch(t, vec![vec![0; 4]; 2]);
        let mut d = s.distribute_interval(&mut cluster, &empty(2), 2, &mut rng, None).unwrap();
        assert!(s.end_interval(&mut cluster, 2, &mut d).is_empty());
        let mut d = s.distribute_interval(&mut cluster, &empty(3), 3, &mut rng, None).unwrap();
        assert_eq!(s.end_interval(&mut cluster, 3, &mut d), vec![(0, 0, 3)]);
        assert_eq!(PolicyKind::Fc, fc.kind());
    }

    #[test]
    fn bound_examples() {
        // alpha * q = 0.01 with q = 1: choose run_coeff so that q(origin, type 0) = 1.
        let nodes = vec![EdgeNode::new(0, 4096.0, 1.0), EdgeNode::new(1, 4096.0, 1.0)];
        let topo = Topology::new(nodes, vec![vec![0.0, 3.0], vec![3.0, 0.0]]).unwrap();
        let catalog = Catalog::function_instances();
        let costs = CostTable::new(&topo, &catalog, &CostParams::new(0.01, 1.0, 1.0 / 55.0).unwrap());

        let hit = per_request_bound(0, 0, 0, true, &costs, &topo);
        assert!((hit.realized - 0.01).abs() < 1e-12);
        assert!(hit.bound >= hit.realized);

        let create = per_request_bound(0, 0, 0, false, &costs, &topo);
        assert!((create.realized - 55.01).abs() < 1e-12);
        assert_eq!(create.realized, create.bound);

        let offload = per_request_bound(0, 0, 1, true, &costs, &topo);
        assert!((offload.realized - 3.01).abs() < 1e-12);
        assert!((offload.bound - 55.01).abs() < 1e-12);
    }
}
