//! Cache-eviction policies behind one interface.
//!
//! Every policy evicts under memory pressure through [`EvictionPolicy::select_victim`]
//! and gets a chance to destroy idle containers at the end of each interval.
//! Only Fixed Caching and the no-cache baseline use the latter.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, StandardUniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Catalog, Interval, InvocationStats, NodeState, TypeIdx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    PCache,
    Lru,
    Fc,
    NoCache,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::PCache,
        PolicyKind::Lru,
        PolicyKind::Fc,
        PolicyKind::NoCache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::PCache => "pcache",
            PolicyKind::Lru => "lru",
            PolicyKind::Fc => "fc",
            PolicyKind::NoCache => "nocache",
        }
    }

    /// `ttl` only matters for Fixed Caching.
    pub fn build(self, ttl: u32) -> Box<dyn EvictionPolicy> {
        match self {
            PolicyKind::PCache => Box::new(PCache),
            PolicyKind::Lru => Box::new(Lru),
            PolicyKind::Fc => Box::new(FixedCaching { ttl }),
            PolicyKind::NoCache => Box::new(NoCache),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = PolicyKind::ALL.iter().map(|p| p.name()).collect();
                format!("unknown policy {s:?}; valid policies: {}", valid.join(", "))
            })
    }
}

pub trait EvictionPolicy: Send + Sync + fmt::Debug {
    fn kind(&self) -> PolicyKind;

    /// Picks the type of the next idle container to destroy. Only types with
    /// at least one cached container on `state` are eligible.
    fn select_victim(
        &self,
        state: &NodeState,
        stats: &InvocationStats,
        catalog: &Catalog,
        rng: &mut dyn RngCore,
    ) -> Result<TypeIdx>;

    /// Runs after every active container has been returned to the cache.
    /// Returns `(type, count)` pairs; the oldest cached containers of each
    /// listed type are destroyed.
    fn end_of_interval(&self, state: &NodeState, now: Interval) -> Vec<(TypeIdx, u32)>;
}

fn empty_cache() -> Error {
    Error::Precondition("no idle container to evict".into())
}

fn cached_types(state: &NodeState) -> impl Iterator<Item = TypeIdx> + '_ {
    (0..state.n_types()).filter(|&n| state.cached(n) > 0)
}

/// Eviction probabilities over the cached types, ascending by type id.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionDistribution {
    pub probs: Vec<(TypeIdx, f64)>,
}

impl EvictionDistribution {
    pub fn prob(&self, n: TypeIdx) -> f64 {
        self.probs
            .iter()
            .find(|&&(t, _)| t == n)
            .map_or(0.0, |&(_, p)| p)
    }

    /// Inverse-CDF draw over the ascending type order.
    pub fn sample(&self, rng: &mut dyn RngCore) -> TypeIdx {
        let r: f64 = StandardUniform.sample(rng);
        let mut acc = 0.0;
        for &(n, p) in &self.probs {
            acc += p;
            if r < acc {
                return n;
            }
        }
        // r landed in the rounding slack above the final cumulative sum.
        self.probs
            .iter()
            .rev()
            .find(|&&(_, p)| p > 0.0)
            .map(|&(n, _)| n)
            .expect("distribution has positive mass")
    }
}

/// `P_n = (u_n / (f_n + t_n)) / sum_m (u_m / (f_m + t_m))` over cached types,
/// with `f` the invocation count and `t` the interval of the latest invocation.
/// Large, rarely and long-ago invoked types are the likeliest victims.
pub fn pcache_distribution(
    state: &NodeState,
    stats: &InvocationStats,
    catalog: &Catalog,
) -> Result<EvictionDistribution> {
    let mut weights = Vec::new();
    for n in cached_types(state) {
        let f = stats.freq(n) as f64;
        let t = f64::from(stats.last_used(n).unwrap_or(0));
        if f + t <= 0.0 {
            return Err(Error::Precondition(format!(
                "type {n} is cached but was never invoked"
            )));
        }
        weights.push((n, catalog.mem_mb(n) / (f + t)));
    }
    if weights.is_empty() {
        return Err(empty_cache());
    }
    let total: f64 = weights.iter().map(|&(_, w)| w).sum();
    Ok(EvictionDistribution {
        probs: weights.into_iter().map(|(n, w)| (n, w / total)).collect(),
    })
}

pub fn pcache_select_victim(
    state: &NodeState,
    stats: &InvocationStats,
    catalog: &Catalog,
    rng: &mut dyn RngCore,
) -> Result<TypeIdx> {
    Ok(pcache_distribution(state, stats, catalog)?.sample(rng))
}

/// Cached type with the oldest `last_used`, ties to the lowest type id.
pub fn lru_select_victim(state: &NodeState, stats: &InvocationStats) -> Result<TypeIdx> {
    cached_types(state)
        .min_by_key(|&n| (stats.last_used(n).unwrap_or(0), n))
        .ok_or_else(empty_cache)
}

/// Idle containers whose age `now - entered` has reached `ttl`.
pub fn fc_end_of_interval(state: &NodeState, now: Interval, ttl: u32) -> Vec<(TypeIdx, u32)> {
    (0..state.n_types())
        .filter_map(|n| {
            let expired = state
                .cache_entries(n)
                .filter(|&entered| now.saturating_sub(entered) >= ttl)
                .count() as u32;
            (expired > 0).then_some((n, expired))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PCache;

impl EvictionPolicy for PCache {
    fn kind(&self) -> PolicyKind {
        PolicyKind::PCache
    }

    fn select_victim(
        &self,
        state: &NodeState,
        stats: &InvocationStats,
        catalog: &Catalog,
        rng: &mut dyn RngCore,
    ) -> Result<TypeIdx> {
        pcache_select_victim(state, stats, catalog, rng)
    }

    fn end_of_interval(&self, _state: &NodeState, _now: Interval) -> Vec<(TypeIdx, u32)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Lru;

impl EvictionPolicy for Lru {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lru
    }

    fn select_victim(
        &self,
        state: &NodeState,
        stats: &InvocationStats,
        _catalog: &Catalog,
        _rng: &mut dyn RngCore,
    ) -> Result<TypeIdx> {
        lru_select_victim(state, stats)
    }

    fn end_of_interval(&self, _state: &NodeState, _now: Interval) -> Vec<(TypeIdx, u32)> {
        Vec::new()
    }
}

/// Keeps each idle container for `ttl` intervals. Under memory pressure the
/// container closest to expiry goes first.
#[derive(Debug, Clone, Copy)]
pub struct FixedCaching {
    pub ttl: u32,
}

impl EvictionPolicy for FixedCaching {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Fc
    }

    fn select_victim(
        &self,
        state: &NodeState,
        _stats: &InvocationStats,
        _catalog: &Catalog,
        _rng: &mut dyn RngCore,
    ) -> Result<TypeIdx> {
        cached_types(state)
            .filter_map(|n| state.cache_entries(n).next().map(|entered| (entered, n)))
            .min()
            .map(|(_, n)| n)
            .ok_or_else(empty_cache)
    }

    fn end_of_interval(&self, state: &NodeState, now: Interval) -> Vec<(TypeIdx, u32)> {
        fc_end_of_interval(state, now, self.ttl)
    }
}

/// Baseline: every container is destroyed as soon as its interval ends.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoCache;

impl EvictionPolicy for NoCache {
    fn kind(&self) -> PolicyKind {
        PolicyKind::NoCache
    }

    fn select_victim(
        &self,
        state: &NodeState,
        stats: &InvocationStats,
        _catalog: &Catalog,
        _rng: &mut dyn RngCore,
    ) -> Result<TypeIdx> {
        lru_select_victim(state, stats)
    }

    fn end_of_interval(&self, state: &NodeState, _now: Interval) -> Vec<(TypeIdx, u32)> {
        cached_types(state).map(|n| (n, state.cached(n))).collect()
    }
}
