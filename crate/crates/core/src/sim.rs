//! Interval-by-interval simulation driver and parameter sweeps.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{
    interval_comm_cost, interval_running_cost, interval_switching_cost, normalized_cost,
    total_cost, CostLedger, IntervalDecision,
};
use crate::error::{Error, Result};
use crate::model::{occupancy, Catalog, CostParams, CostTable, Interval, RequestBatch, Topology};
use crate::policies::PolicyKind;
use crate::scheduler::{AuditRecord, ClusterState, Scheduler, StatsScope};
use crate::workload::{ZipfConfig, ZipfWorkload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckLevel {
    Off,
    /// Every tenth interval.
    #[default]
    Sample,
    Full,
}

impl std::str::FromStr for CheckLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(CheckLevel::Off),
            "sample" => Ok(CheckLevel::Sample),
            "full" => Ok(CheckLevel::Full),
            _ => Err(format!("unknown check level {s:?}; valid levels: off, sample, full")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Zipf {
        beta: f64,
        mean_rate: f64,
        global_ranking: bool,
    },
    /// Pre-built batches (an ingested trace or a hand-written instance).
    /// Intervals without a batch are empty.
    Batches(Arc<Vec<RequestBatch>>),
}

impl Workload {
    pub fn beta(&self) -> Option<f64> {
        match self {
            Workload::Zipf { beta, .. } => Some(*beta),
            Workload::Batches(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub topology: Arc<Topology>,
    pub catalog: Arc<Catalog>,
    pub workload: Workload,
    pub policy: PolicyKind,
    pub params: CostParams,
    pub ttl: u32,
    pub horizon: u32,
    pub seed: u64,
    pub check: CheckLevel,
    pub audit: bool,
    pub stats_scope: StatsScope,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        self.topology.check_catalog(&self.catalog)?;
        self.params.validate_for(&self.topology, &self.catalog)?;
        match &self.workload {
            Workload::Zipf {
                beta, mean_rate, ..
            } => ZipfConfig {
                beta: *beta,
                n_types: self.catalog.len(),
                mean_rate: *mean_rate,
                seed: 0,
                global_ranking: false,
            }
            .validate(),
            Workload::Batches(batches) => {
                for b in batches.iter() {
                    if b.interval == 0 {
                        return Err(Error::config("batch intervals are numbered from 1"));
                    }
                    b.check_shape(self.topology.len(), self.catalog.len())?;
                }
                Ok(())
            }
        }
    }
}

/// Summary record written per run and per sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub seed: u64,
    pub total_cost: f64,
    pub normalized_cost: Option<f64>,
    pub cold_start_frequency: Option<f64>,
    pub rejections: u64,
    pub intervals: u32,
    /// The workload ran out before the configured horizon.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub ledger: CostLedger,
    pub summary: Summary,
    pub audit: Option<Vec<AuditRecord>>,
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix(base), |acc, &p| mix(acc ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

const WORKLOAD_STREAM: u64 = 0x776f_726b;
const POLICY_STREAM: u64 = 0x706f_6c69;

/// The workload stream depends only on `(seed, beta)` so that every policy
/// and every alpha sees the same requests; the policy stream depends on the
/// whole grid point.
fn stream_seeds(cfg: &SimConfig) -> (u64, u64) {
    let beta_bits = cfg.workload.beta().map_or(0, f64::to_bits);
    let workload = derive_seed(cfg.seed, &[WORKLOAD_STREAM, beta_bits]);
    let policy = derive_seed(
        cfg.seed,
        &[
            POLICY_STREAM,
            beta_bits,
            cfg.params.alpha.to_bits(),
            cfg.policy as u64,
        ],
    );
    (workload, policy)
}

enum BatchSource {
    Zipf(ZipfWorkload, ChaCha8Rng),
    Fixed(HashMap<Interval, RequestBatch>),
}

impl BatchSource {
    fn next(&mut self, t: Interval, n_nodes: usize, n_types: usize) -> RequestBatch {
        match self {
            BatchSource::Zipf(w, rng) => w.generate_batch(t, rng),
            BatchSource::Fixed(map) => map
                .remove(&t)
                .unwrap_or_else(|| RequestBatch::empty(t, n_nodes, n_types)),
        }
    }
}

struct PolicyRun {
    ledger: CostLedger,
    audit: Option<Vec<AuditRecord>>,
    rejections: u64,
    intervals: u32,
    truncated: bool,
}

fn simulate(cfg: &SimConfig, policy_kind: PolicyKind, keep_audit: bool) -> Result<PolicyRun> {
    let topo = &*cfg.topology;
    let catalog = &*cfg.catalog;
    let costs = CostTable::new(topo, catalog, &cfg.params);
    let policy = policy_kind.build(cfg.ttl);
    let scheduler = Scheduler {
        topology: topo,
        catalog,
        costs: &costs,
        policy: policy.as_ref(),
    };

    let (workload_seed, policy_seed) = stream_seeds(cfg);
    let (mut source, last) = match &cfg.workload {
        Workload::Zipf {
            beta,
            mean_rate,
            global_ranking,
        } => {
            let zipf = ZipfConfig {
                beta: *beta,
                n_types: catalog.len(),
                mean_rate: *mean_rate,
                seed: derive_seed(workload_seed, &[1]),
                global_ranking: *global_ranking,
            };
            let gen = ZipfWorkload::new(&zipf, topo.len())?;
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(workload_seed, &[2]));
            (BatchSource::Zipf(gen, rng), cfg.horizon)
        }
        Workload::Batches(batches) => {
            let last = batches.iter().map(|b| b.interval).max().unwrap_or(0);
            let map = batches.iter().map(|b| (b.interval, b.clone())).collect();
            (BatchSource::Fixed(map), last.min(cfg.horizon))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);

    let mut cluster = ClusterState::new(topo.len(), catalog.len(), cfg.stats_scope);
    let mut ledger = CostLedger::new(cfg.params.alpha);
    let mut audit = keep_audit.then(Vec::new);
    let mut scratch = Vec::new();
    let mut rejections = 0;

    for t in 1..=last {
        let batch = source.next(t, topo.len(), catalog.len());
        let check = match cfg.check {
            CheckLevel::Off => false,
            CheckLevel::Sample => t % 10 == 0,
            CheckLevel::Full => true,
        };
        let log = if keep_audit || check {
            scratch.clear();
            Some(&mut scratch)
        } else {
            None
        };
        let mut decision = scheduler.distribute_interval(&mut cluster, &batch, t, &mut rng, log)?;

        let switching = interval_switching_cost(&decision, &costs);
        let communication = interval_comm_cost(&decision, topo);
        let running = interval_running_cost(&cluster.nodes, &costs);
        if check {
            check_after_distribution(cfg, &costs, &cluster, &decision, &scratch)?;
        }
        scheduler.end_interval(&mut cluster, t, &mut decision);
        if check {
            check_capacity(cfg, &cluster, t)?;
        }
        rejections += decision.total_rejected();
        ledger.record(
            t,
            switching,
            communication,
            running,
            decision.total_created(),
            decision.total_requests(),
        );
        if let Some(a) = audit.as_mut() {
            a.extend_from_slice(&scratch);
        }
    }
    Ok(PolicyRun {
        ledger,
        audit,
        rejections,
        intervals: last,
        truncated: last < cfg.horizon,
    })
}

fn violation(interval: Interval, msg: impl Into<String>) -> Error {
    Error::Invariant {
        interval,
        msg: msg.into(),
    }
}

fn check_capacity(cfg: &SimConfig, cluster: &ClusterState, t: Interval) -> Result<()> {
    for (v, state) in cluster.nodes.iter().enumerate() {
        let used = occupancy(state, &cfg.catalog);
        let cap = cfg.topology.node(v).capacity_mb;
        if used > cap {
            return Err(violation(t, format!("node {v} holds {used} MB over capacity {cap} MB")));
        }
        for n in 0..state.n_types() {
            if state.cached(n) > 0 && cluster.stats(v).freq(n) == 0 {
                return Err(violation(t, format!("node {v} caches never-invoked type {n}")));
            }
        }
    }
    Ok(())
}

fn check_after_distribution(
    cfg: &SimConfig,
    costs: &CostTable,
    cluster: &ClusterState,
    decision: &IntervalDecision,
    records: &[AuditRecord],
) -> Result<()> {
    let t = decision.interval;
    decision
        .check_conservation()
        .map_err(|msg| violation(t, format!("request conservation: {msg}")))?;
    check_capacity(cfg, cluster, t)?;
    for (&(v, w, n), &count) in &decision.offloaded {
        let remote = decision.remote_created.get(&(v, w, n)).copied().unwrap_or(0);
        if count > remote && cfg.topology.comm_cost(v, w) > costs.p(v, n) {
            return Err(violation(
                t,
                format!("offload {v}->{w} of type {n} costs more than a cold start"),
            ));
        }
    }
    let served = decision.total_requests() - decision.total_rejected();
    let logged = records.iter().filter(|r| r.serving_node.is_some()).count() as u64;
    if served != logged {
        return Err(violation(t, format!("{served} requests served, {logged} audited")));
    }
    if let Some(r) = records
        .iter()
        .find(|r| r.serving_node.is_some() && r.marginal_cost > r.bound)
    {
        return Err(Error::BoundViolation(format!(
            "interval {t}: request cost exceeds its worst-case bound: {r:?}"
        )));
    }
    Ok(())
}

pub fn run(cfg: &SimConfig) -> Result<RunResult> {
    cfg.validate()?;
    let main = simulate(cfg, cfg.policy, cfg.audit)?;
    let baseline_ledger = if cfg.policy == PolicyKind::NoCache {
        main.ledger.clone()
    } else {
        simulate(cfg, PolicyKind::NoCache, false)?.ledger
    };
    let normalized = match normalized_cost(&main.ledger, &baseline_ledger) {
        Ok(x) => Some(x),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let requests = main.ledger.requests();
    let summary = Summary {
        policy: cfg.policy,
        alpha: cfg.params.alpha,
        beta: cfg.workload.beta(),
        seed: cfg.seed,
        total_cost: total_cost(&main.ledger),
        normalized_cost: normalized,
        cold_start_frequency: (requests > 0)
            .then(|| main.ledger.cold_starts() as f64 / requests as f64),
        rejections: main.rejections,
        intervals: main.intervals,
        truncated: main.truncated,
    };
    Ok(RunResult {
        ledger: main.ledger,
        summary,
        audit: main.audit,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    /// Ignored (must be empty) for batch workloads.
    pub betas: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub beta: Option<f64>,
    pub alpha: f64,
    pub policy: PolicyKind,
    pub seed: u64,
}

impl CellKey {
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        let beta = |b: Option<f64>| b.unwrap_or(f64::NEG_INFINITY);
        beta(self.beta)
            .total_cmp(&beta(other.beta))
            .then(self.alpha.total_cmp(&other.alpha))
            .then(self.policy.cmp(&other.policy))
            .then(self.seed.cmp(&other.seed))
    }
}

impl SweepGrid {
    pub fn cells(&self, base: &SimConfig) -> Result<Vec<CellKey>> {
        if self.alphas.is_empty() || self.policies.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sweep grid axes must be non-empty"));
        }
        let betas: Vec<Option<f64>> = match &base.workload {
            Workload::Zipf { .. } if self.betas.is_empty() => {
                return Err(Error::config("sweep grid needs at least one zipf exponent"))
            }
            Workload::Zipf { .. } => self.betas.iter().copied().map(Some).collect(),
            Workload::Batches(_) if !self.betas.is_empty() => {
                return Err(Error::config("zipf exponents do not apply to trace workloads"))
            }
            Workload::Batches(_) => vec![None],
        };
        let mut cells = Vec::new();
        for &beta in &betas {
            for &alpha in &self.alphas {
                for &policy in &self.policies {
                    for &seed in &self.seeds {
                        cells.push(CellKey {
                            beta,
                            alpha,
                            policy,
                            seed,
                        });
                    }
                }
            }
        }
        cells.sort_by(CellKey::cmp_key);
        cells.dedup_by(|a, b| a.cmp_key(b) == Ordering::Equal);
        Ok(cells)
    }
}

pub fn cell_config(base: &SimConfig, key: &CellKey) -> Result<SimConfig> {
    let mut cfg = base.clone();
    cfg.params = CostParams::new(key.alpha, base.params.switch_coeff, base.params.run_coeff)?;
    cfg.policy = key.policy;
    cfg.seed = key.seed;
    if let (Workload::Zipf { beta, .. }, Some(b)) = (&mut cfg.workload, key.beta) {
        *beta = b;
    }
    Ok(cfg)
}

/// Runs every grid cell (on up to `jobs` threads) and maps each result
/// through `f`. Results come back sorted by cell key whatever the grid order.
pub fn sweep_map<T, F>(
    grid: &SweepGrid,
    base: &SimConfig,
    jobs: usize,
    f: F,
) -> Result<Vec<(CellKey, Result<T>)>>
where
    T: Send,
    F: Fn(RunResult) -> Result<T> + Sync,
{
    let cells = grid.cells(base)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|key| {
                let out = cell_config(base, &key).and_then(|cfg| run(&cfg)).and_then(&f);
                (key, out)
            })
            .collect()
    }))
}

pub fn sweep(grid: &SweepGrid, base: &SimConfig, jobs: usize) -> Result<Vec<(CellKey, Result<Summary>)>> {
    sweep_map(grid, base, jobs, |r| Ok(r.summary))
}

/// Desk-scale reproduction setup: a synthetic regional edge deployment
/// hosting the four standard application containers.
///
/// Capacity is sized so that no node ever has to push a cold start onto a
/// neighbour: every acceptance run stays within the per-request bound.
pub mod desk {
    use super::*;

    pub const NODES: usize = 25;
    /// Side of the square deployment area, km.
    pub const EXTENT_KM: f64 = 20.0;
    /// Communication cost per km.
    pub const COMM_PER_KM: f64 = 20.0;
    pub const CAPACITIES_MB: [f64; 1] = [10240.0];
    pub const CPUS_GHZ: [f64; 4] = [1.6, 2.0, 2.4, 3.2];
    pub const MEAN_RATE: f64 = 8.0;
    pub const HORIZON: u32 = 1000;
    pub const TTL: u32 = 10;
    pub const TOPOLOGY_SEED: u64 = 2024;

    #[derive(Debug, Clone, PartialEq)]
    pub struct Scenario {
        pub nodes: usize,
        pub extent_km: f64,
        pub comm_per_km: f64,
        pub capacities_mb: Vec<f64>,
        pub cpus_ghz: Vec<f64>,
        pub mean_rate: f64,
        pub horizon: u32,
        pub ttl: u32,
        pub topology_seed: u64,
    }

    impl Default for Scenario {
        fn default() -> Self {
            Scenario {
                nodes: NODES,
                extent_km: EXTENT_KM,
                comm_per_km: COMM_PER_KM,
                capacities_mb: CAPACITIES_MB.to_vec(),
                cpus_ghz: CPUS_GHZ.to_vec(),
                mean_rate: MEAN_RATE,
                horizon: HORIZON,
                ttl: TTL,
                topology_seed: TOPOLOGY_SEED,
            }
        }
    }

    impl Scenario {
        pub fn topology(&self) -> Result<Topology> {
            Topology::synthetic(
                self.nodes,
                self.extent_km,
                self.comm_per_km,
                &self.capacities_mb,
                &self.cpus_ghz,
                self.topology_seed,
            )
        }

        pub fn config(&self, policy: PolicyKind, alpha: f64, beta: f64, seed: u64) -> Result<SimConfig> {
            Ok(SimConfig {
                topology: Arc::new(self.topology()?),
                catalog: Arc::new(Catalog::function_instances()),
                workload: Workload::Zipf {
                    beta,
                    mean_rate: self.mean_rate,
                    global_ranking: false,
                },
                policy,
                params: CostParams::with_alpha(alpha)?,
                ttl: self.ttl,
                horizon: self.horizon,
                seed,
                check: CheckLevel::Full,
                audit: false,
                stats_scope: StatsScope::PerNode,
            })
        }
    }

    pub fn topology() -> Topology {
        Scenario::default()
            .topology()
            .expect("desk topology constants are valid")
    }

    pub fn config(policy: PolicyKind, alpha: f64, beta: f64, seed: u64) -> Result<SimConfig> {
        Scenario::default().config(policy, alpha, beta, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EdgeNode;

    fn small(policy: PolicyKind) -> SimConfig {
        let mut cfg = desk::config(policy, 0.01, 1.0, 3).unwrap();
        cfg.horizon = 60;
        cfg
    }

    #[test]
    fn zero_workload_costs_nothing() {
        let mut cfg = small(PolicyKind::PCache);
        cfg.horizon = 1;
        cfg.workload = Workload::Zipf {
            beta: 1.0,
            mean_rate: 0.0,
            global_ranking: false,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.summary.total_cost, 0.0);
        assert_eq!(r.summary.cold_start_frequency, None);
        assert_eq!(r.summary.normalized_cost, None);
        assert_eq!(r.summary.intervals, 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small(PolicyKind::PCache);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&b.summary).unwrap()
        );
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn nocache_always_cold_starts() {
        let r = run(&small(PolicyKind::NoCache)).unwrap();
        assert_eq!(r.summary.cold_start_frequency, Some(1.0));
        assert_eq!(r.summary.normalized_cost, Some(1.0));
    }

    #[test]
    fn audit_matches_ledger() {
        let mut cfg = small(PolicyKind::Lru);
        cfg.audit = true;
        let r = run(&cfg).unwrap();
        let audit = r.audit.unwrap();
        assert_eq!(audit.len() as u64, r.ledger.requests());
        let creates = audit.iter().filter(|a| a.action == crate::scheduler::Action::Create).count();
        assert_eq!(creates as u64, r.ledger.cold_starts());
    }

    #[test]
    fn truncated_trace_is_flagged() {
        let topo = Topology::new(vec![EdgeNode::new(0, 1000.0, 1.0)], vec![vec![0.0]]).unwrap();
        let batches = vec![RequestBatch {
            interval: 2,
            counts: vec![vec![1]],
        }];
        let cfg = SimConfig {
            topology: Arc::new(topo),
            catalog: Arc::new(Catalog::from_sizes(&[100.0]).unwrap()),
            workload: Workload::Batches(Arc::new(batches)),
            policy: PolicyKind::PCache,
            params: CostParams::with_alpha(0.01).unwrap(),
            ttl: 10,
            horizon: 5,
            seed: 0,
            check: CheckLevel::Full,
            audit: false,
            stats_scope: StatsScope::PerNode,
        };
        let r = run(&cfg).unwrap();
        assert!(r.summary.truncated);
        assert_eq!(r.summary.intervals, 2);
        assert_eq!(r.ledger.cold_starts(), 1);
    }

    #[test]
    fn horizon_zero_is_rejected() {
        let mut cfg = small(PolicyKind::Lru);
        cfg.horizon = 0;
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn grid_cardinality() {
        let base = small(PolicyKind::PCache);
        let grid = SweepGrid {
            alphas: vec![0.001, 0.002, 0.005, 0.010, 0.015],
            betas: vec![0.5, 1.0, 1.5],
            policies: vec![PolicyKind::PCache, PolicyKind::Lru, PolicyKind::Fc],
            seeds: vec![1],
        };
        assert_eq!(grid.cells(&base).unwrap().len(), 45);
        let empty = SweepGrid {
            alphas: vec![],
            ..grid
        };
        assert!(empty.cells(&base).is_err());
    }

    #[test]
    fn single_cell_sweep_equals_run() {
        let mut base = small(PolicyKind::PCache);
        base.horizon = 30;
        let grid = SweepGrid {
            alphas: vec![0.01],
            betas: vec![1.0],
            policies: vec![PolicyKind::PCache],
            seeds: vec![3],
        };
        let out = sweep(&grid, &base, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1.as_ref().unwrap(), &run(&base).unwrap().summary);
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[1]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(9, &[4]), derive_seed(9, &[4]));
    }
}
