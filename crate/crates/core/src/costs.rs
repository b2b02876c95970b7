//! Per-interval cost decomposition and the run-level objective.
//!
//! An interval costs `switching + communication + alpha * running`, where
//! switching bills every container instantiation, communication bills every
//! request served away from its origin, and running bills every container
//! alive during the interval (serving or idle).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostTable, Interval, NodeIdx, NodeState, Topology, TypeIdx};

/// What the scheduler did with one interval's requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalDecision {
    pub interval: Interval,
    /// `lambda[v][n]` as received.
    pub requests: Vec<Vec<u32>>,
    /// Requests from `v` served at `v` (from cache or by a fresh container).
    pub local_served: Vec<Vec<u32>>,
    /// `(origin, serving, type) -> count` for requests served away from home.
    pub offloaded: BTreeMap<(NodeIdx, NodeIdx, TypeIdx), u32>,
    /// The part of `offloaded` served by containers created at the remote
    /// node because the origin could not make room.
    pub remote_created: BTreeMap<(NodeIdx, NodeIdx, TypeIdx), u32>,
    /// Fresh containers started at each node.
    pub created: Vec<Vec<u32>>,
    /// Idle containers destroyed to make room during the interval.
    pub evicted: Vec<Vec<u32>>,
    /// All containers destroyed in the interval: evictions plus the
    /// end-of-interval sweep.
    pub destroyed: Vec<Vec<u32>>,
    pub rejected: Vec<Vec<u32>>,
}

impl IntervalDecision {
    pub fn new(interval: Interval, requests: Vec<Vec<u32>>) -> Self {
        let zeros = vec![vec![0; requests.first().map_or(0, Vec::len)]; requests.len()];
        IntervalDecision {
            interval,
            requests,
            local_served: zeros.clone(),
            offloaded: BTreeMap::new(),
            remote_created: BTreeMap::new(),
            created: zeros.clone(),
            evicted: zeros.clone(),
            destroyed: zeros.clone(),
            rejected: zeros,
        }
    }

    pub fn total_requests(&self) -> u64 {
        sum2(&self.requests)
    }

    pub fn total_created(&self) -> u64 {
        sum2(&self.created)
    }

    pub fn total_rejected(&self) -> u64 {
        sum2(&self.rejected)
    }

    pub fn offloaded_from(&self, v: NodeIdx, n: TypeIdx) -> u32 {
        self.offloaded
            .iter()
            .filter(|(&(o, _, t), _)| o == v && t == n)
            .map(|(_, &c)| c)
            .sum()
    }

    /// `local + offloaded + rejected == lambda` for every origin and type.
    pub fn check_conservation(&self) -> Result<(), String> {
        for (v, row) in self.requests.iter().enumerate() {
            for (n, &lambda) in row.iter().enumerate() {
                let accounted =
                    self.local_served[v][n] + self.offloaded_from(v, n) + self.rejected[v][n];
                if accounted != lambda {
                    return Err(format!(
                        "node {v} type {n}: {accounted} requests accounted for, {lambda} received"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn sum2(m: &[Vec<u32>]) -> u64 {
    m.iter().flatten().map(|&c| u64::from(c)).sum()
}

/// Sum of `p[v][n] * created[v][n]`.
pub fn interval_switching_cost(decision: &IntervalDecision, costs: &CostTable) -> f64 {
    let mut total = 0.0;
    for (v, row) in decision.created.iter().enumerate() {
        for (n, &c) in row.iter().enumerate() {
            total += costs.p(v, n) * f64::from(c);
        }
    }
    total
}

/// Sum of `d[v][w] * offloaded[v][w][n]`.
pub fn interval_comm_cost(decision: &IntervalDecision, topology: &Topology) -> f64 {
    decision
        .offloaded
        .iter()
        .map(|(&(v, w, _), &c)| topology.comm_cost(v, w) * f64::from(c))
        .sum()
}

/// Un-weighted sum of `q[v][n]` over every container alive in `states`.
pub fn interval_running_cost(states: &[NodeState], costs: &CostTable) -> f64 {
    let mut total = 0.0;
    for (v, state) in states.iter().enumerate() {
        for n in 0..state.n_types() {
            total += costs.q(v, n) * f64::from(state.alive(n));
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub interval: Interval,
    pub switching: f64,
    pub communication: f64,
    pub running: f64,
    pub total: f64,
    pub cold_starts: u64,
    pub requests: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub alpha: f64,
    pub rows: Vec<LedgerRow>,
}

impl CostLedger {
    pub fn new(alpha: f64) -> Self {
        CostLedger {
            alpha,
            rows: Vec::new(),
        }
    }

    pub fn record(
        &mut self,
        interval: Interval,
        switching: f64,
        communication: f64,
        running: f64,
        cold_starts: u64,
        requests: u64,
    ) -> &LedgerRow {
        self.rows.push(LedgerRow {
            interval,
            switching,
            communication,
            running,
            total: switching + communication + self.alpha * running,
            cold_starts,
            requests,
        });
        self.rows.last().expect("just pushed")
    }

    pub fn cold_starts(&self) -> u64 {
        self.rows.iter().map(|r| r.cold_starts).sum()
    }

    pub fn requests(&self) -> u64 {
        self.rows.iter().map(|r| r.requests).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run objective: sum over intervals of `switching + communication + alpha * running`.
pub fn total_cost(ledger: &CostLedger) -> f64 {
    ledger
        .rows
        .iter()
        .map(|r| r.switching + r.communication + ledger.alpha * r.running)
        .sum()
}

/// Ratio of a run's objective to a baseline run's objective.
pub fn normalized_cost(ledger: &CostLedger, baseline: &CostLedger) -> Result<f64> {
    let base = total_cost(baseline);
    if base <= 0.0 {
        return Err(Error::Degenerate(format!(
            "baseline total cost is {base}; cannot normalise"
        )));
    }
    Ok(total_cost(ledger) / base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Catalog, CostParams, EdgeNode};

    fn table(cpus: &[f64], comm: Vec<Vec<f64>>) -> (Topology, CostTable) {
        let nodes = cpus
            .iter()
            .enumerate()
            .map(|(i, &c)| EdgeNode::new(i, 4096.0, c))
            .collect();
        let topo = Topology::new(nodes, comm).unwrap();
        let catalog = Catalog::function_instances();
        let costs = CostTable::new(&topo, &catalog, &CostParams::new(0.01, 1.0, 0.01).unwrap());
        (topo, costs)
    }

    #[test]
    fn switching_cost_sums_creations() {
        let (_, costs) = table(&[1.0], vec![vec![0.0]]);
        let mut d = IntervalDecision::new(1, vec![vec![0; 4]]);
        assert_eq!(interval_switching_cost(&d, &costs), 0.0);
        d.created[0][0] = 1;
        assert_eq!(interval_switching_cost(&d, &costs), 55.0);
        d.created[0][3] = 1;
        assert_eq!(interval_switching_cost(&d, &costs), 147.0);
    }

    #[test]
    fn comm_cost_sums_offloads() {
        let comm = vec![
            vec![0.0, 5.0, 2.0, 7.0],
            vec![5.0, 0.0, 1.0, 1.0],
            vec![2.0, 1.0, 0.0, 1.0],
            vec![7.0, 1.0, 1.0, 0.0],
        ];
        let (topo, _) = table(&[1.0; 4], comm);
        let mut d = IntervalDecision::new(1, vec![vec![0; 4]; 4]);
        d.local_served[0][0] = 4;
        assert_eq!(interval_comm_cost(&d, &topo), 0.0);
        d.offloaded.insert((0, 1, 0), 3);
        assert_eq!(interval_comm_cost(&d, &topo), 15.0);

        let mut d = IntervalDecision::new(1, vec![vec![0; 4]; 4]);
        d.offloaded.insert((0, 2, 1), 2);
        d.offloaded.insert((0, 3, 0), 1);
        assert_eq!(interval_comm_cost(&d, &topo), 11.0);
    }

    #[test]
    fn running_cost_bills_alive_containers() {
        let (_, costs) = table(&[1.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let mut states = vec![NodeState::new(4), NodeState::new(4)];
        assert_eq!(interval_running_cost(&states, &costs), 0.0);

        states[0].create(3, 1);
        states[0].release_active(1);
        assert!((interval_running_cost(&states, &costs) - 0.92).abs() < 1e-12);

        let mut states = vec![NodeState::new(4), NodeState::new(4)];
        states[0].create(0, 1);
        states[1].create(0, 1);
        states[1].release_active(1);
        assert!((interval_running_cost(&states, &costs) - 1.10).abs() < 1e-12);
    }

    #[test]
    fn ledger_totals() {
        let empty = CostLedger::new(0.01);
        assert_eq!(total_cost(&empty), 0.0);

        let mut ledger = CostLedger::new(0.01);
        let row = *ledger.record(1, 55.0, 15.0, 0.92, 1, 4);
        assert!((row.total - 70.0092).abs() < 1e-12);
        assert!((total_cost(&ledger) - 70.0092).abs() < 1e-12);
        ledger.record(2, 10.0, 0.0, 2.0, 0, 1);
        let by_rows: f64 = ledger.rows.iter().map(|r| r.total).sum();
        assert!((total_cost(&ledger) - by_rows).abs() < 1e-12);
    }

    #[test]
    fn normalisation() {
        let mut base = CostLedger::new(0.01);
        base.record(1, 100.0, 0.0, 0.0, 1, 1);
        assert_eq!(normalized_cost(&base, &base).unwrap(), 1.0);
        let mut half = CostLedger::new(0.01);
        half.record(1, 40.0, 10.0, 0.0, 1, 1);
        assert_eq!(normalized_cost(&half, &base).unwrap(), 0.5);
        assert!(matches!(
            normalized_cost(&half, &CostLedger::new(0.01)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn conservation_check_catches_lost_requests() {
        let mut d = IntervalDecision::new(1, vec![vec![3, 0], vec![0, 1]]);
        d.local_served[0][0] = 2;
        d.offloaded.insert((0, 1, 0), 1);
        d.rejected[1][1] = 1;
        assert!(d.check_conservation().is_ok());
        d.local_served[0][0] = 1;
        assert!(d.check_conservation().is_err());
    }

    #[test]
    fn ledger_csv_header() {
        let mut ledger = CostLedger::new(0.5);
        ledger.record(1, 1.0, 2.0, 4.0, 1, 3);
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "interval,switching,communication,running,total,cold_starts,requests"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "1,1.0,2.0,4.0,5.0,1,3");
    }
}
