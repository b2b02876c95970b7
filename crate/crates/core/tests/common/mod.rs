//! Random tiny instances and the oracle-dominance check shared by the
//! integration and acceptance suites.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcache_sim::model::{Catalog, CostParams, EdgeNode, Topology};
use pcache_sim::oracle::{solve_exact, TinyInstance};
use pcache_sim::policies::PolicyKind;
use pcache_sim::sim::CheckLevel;
use pcache_sim::Error;

pub const SIZES_MB: [f64; 4] = [55.0, 158.0, 332.0, 92.0];

/// Summation order differs between the solver and the simulator.
pub const REL_TOL: f64 = 1e-9;

pub fn random_instance(rng: &mut ChaCha8Rng) -> TinyInstance {
    let n_nodes = rng.random_range(1..=3);
    let n_types = rng.random_range(1..=2);
    let horizon = rng.random_range(1..=3);
    let sizes: Vec<f64> = SIZES_MB.choose_multiple(rng, n_types).copied().collect();
    let largest = sizes.iter().copied().fold(0.0, f64::max);
    let nodes = (0..n_nodes)
        .map(|i| {
            let cap = largest * [1.0, 1.5, 2.5, 4.0].choose(rng).unwrap();
            let cpu = *[1.0, 1.6, 2.4, 3.2].choose(rng).unwrap();
            EdgeNode::new(i, cap, cpu)
        })
        .collect();
    let mut comm = vec![vec![0.0; n_nodes]; n_nodes];
    for v in 0..n_nodes {
        for w in v + 1..n_nodes {
            let d = rng.random_range(0.0..250.0_f64).round();
            comm[v][w] = d;
            comm[w][v] = d;
        }
    }
    let alpha = *[0.001, 0.01, 0.1, 1.0].choose(rng).unwrap();
    let demand = (0..horizon)
        .map(|_| {
            (0..n_nodes)
                .map(|_| (0..n_types).map(|_| rng.random_range(0..=3)).collect())
                .collect()
        })
        .collect();
    TinyInstance::new(
        Topology::new(nodes, comm).unwrap(),
        Catalog::from_sizes(&sizes).unwrap(),
        CostParams::with_alpha(alpha).unwrap(),
        demand,
    )
    .unwrap()
}

#[derive(Debug, Default)]
pub struct DominanceReport {
    pub instances: usize,
    /// Instances drawn but discarded: the optimum is undefined or a policy
    /// had to reject requests, so the costs are not comparable.
    pub redrawn: usize,
    pub violations: Vec<String>,
    pub pcache_beats_nocache: usize,
}

/// Cost of `policy` on `inst`, or `None` if it rejected any request.
/// Runs that push a cold start to a neighbour breach the per-request
/// bound, so they are re-run without runtime checks: the comparison here is
/// about total cost only.
fn policy_cost(inst: &TinyInstance, policy: PolicyKind, seed: u64) -> Option<f64> {
    let mut cfg = inst.sim_config(policy, 2, seed);
    let result = match pcache_sim::sim::run(&cfg) {
        Err(Error::BoundViolation(_)) => {
            cfg.check = CheckLevel::Off;
            pcache_sim::sim::run(&cfg)
        }
        other => other,
    }
    .expect("tiny instances are valid simulation inputs");
    (result.summary.rejections == 0).then_some(result.summary.total_cost)
}

pub fn check_dominance(count: usize, seed: u64) -> DominanceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DominanceReport::default();
    while report.instances < count {
        let inst = random_instance(&mut rng);
        let opt = match solve_exact(&inst) {
            Ok(s) => s.cost,
            Err(Error::Precondition(_)) | Err(Error::InstanceTooLarge { .. }) => {
                report.redrawn += 1;
                continue;
            }
            Err(e) => panic!("solver failed: {e}"),
        };
        let run_seed = rng.random();
        let costs: Option<Vec<(PolicyKind, f64)>> = PolicyKind::ALL
            .iter()
            .map(|&p| policy_cost(&inst, p, run_seed).map(|c| (p, c)))
            .collect();
        let Some(costs) = costs else {
            report.redrawn += 1;
            continue;
        };
        report.instances += 1;
        for &(p, c) in &costs {
            if opt > c * (1.0 + REL_TOL) {
                report.violations.push(format!(
                    "{} costs {c} below the optimum {opt} on {}",
                    p.name(),
                    inst.to_json()
                ));
            }
        }
        let of = |k: PolicyKind| costs.iter().find(|&&(p, _)| p == k).unwrap().1;
        if of(PolicyKind::PCache) < of(PolicyKind::NoCache) {
            report.pcache_beats_nocache += 1;
        }
    }
    report
}
