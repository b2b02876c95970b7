//! Request synthesis: Zipf-popularity batches and CSV invocation traces.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{csv_error, Interval, NodeIdx, RequestBatch, TypeIdx};

/// `prob[k] = (k+1)^-beta / sum_j j^-beta`, ordered by popularity rank.
pub fn zipf_popularity(beta: f64, n_types: usize) -> Result<Vec<f64>> {
    if n_types == 0 {
        return Err(Error::config("zipf popularity needs at least one type"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::config(format!("zipf exponent must be > 0, got {beta}")));
    }
    let weights: Vec<f64> = (1..=n_types).map(|k| (k as f64).powf(-beta)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipfConfig {
    pub beta: f64,
    pub n_types: usize,
    /// Expected number of requests per node per interval.
    pub mean_rate: f64,
    pub seed: u64,
    /// Use one popularity ranking for every node instead of a per-node shuffle.
    #[serde(default)]
    pub global_ranking: bool,
}

impl ZipfConfig {
    pub fn validate(&self) -> Result<()> {
        zipf_popularity(self.beta, self.n_types)?;
        if !(self.mean_rate.is_finite() && self.mean_rate >= 0.0) {
            return Err(Error::config(format!(
                "mean_rate must be >= 0, got {}",
                self.mean_rate
            )));
        }
        Ok(())
    }
}

/// Synthetic workload: Poisson totals per node, split across types by Zipf
/// popularity. Each node ranks the types in its own (seeded) random order
/// unless `global_ranking` is set.
#[derive(Debug, Clone)]
pub struct ZipfWorkload {
    cumulative: Vec<f64>,
    rank_to_type: Vec<Vec<TypeIdx>>,
    arrivals: Option<Poisson<f64>>,
    n_types: usize,
}

impl ZipfWorkload {
    pub fn new(cfg: &ZipfConfig, n_nodes: usize) -> Result<Self> {
        cfg.validate()?;
        let popularity = zipf_popularity(cfg.beta, cfg.n_types)?;
        let mut acc = 0.0;
        let cumulative = popularity
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let identity: Vec<TypeIdx> = (0..cfg.n_types).collect();
        let rank_to_type = (0..n_nodes)
            .map(|_| {
                let mut order = identity.clone();
                if !cfg.global_ranking {
                    order.shuffle(&mut rng);
                }
                order
            })
            .collect();

        let arrivals = if cfg.mean_rate > 0.0 {
            Some(Poisson::new(cfg.mean_rate).map_err(|e| Error::config(e.to_string()))?)
        } else {
            None
        };
        Ok(ZipfWorkload {
            cumulative,
            rank_to_type,
            arrivals,
            n_types: cfg.n_types,
        })
    }

    /// The type holding popularity rank `rank` at node `v`.
    pub fn type_at_rank(&self, v: NodeIdx, rank: usize) -> TypeIdx {
        self.rank_to_type[v][rank]
    }

    pub fn generate_batch<R: RngCore + ?Sized>(&self, interval: Interval, rng: &mut R) -> RequestBatch {
        let mut batch = RequestBatch::empty(interval, self.rank_to_type.len(), self.n_types);
        let Some(arrivals) = &self.arrivals else {
            return batch;
        };
        for (v, row) in batch.counts.iter_mut().enumerate() {
            let total = arrivals.sample(rng) as u64;
            for _ in 0..total {
                let r: f64 = rng.random();
                let rank = self
                    .cumulative
                    .iter()
                    .position(|&c| r < c)
                    .unwrap_or(self.n_types - 1);
                row[self.rank_to_type[v][rank]] += 1;
            }
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub interval: u64,
    pub node: u64,
    pub ftype: u64,
    pub count: u64,
}

/// How raw trace identifiers map onto simulator node and type indices.
/// Without an explicit table an identifier is used as-is and must be in range.
#[derive(Debug, Clone, Default)]
pub struct TraceMapping {
    pub n_nodes: usize,
    pub n_types: usize,
    pub nodes: Option<HashMap<u64, NodeIdx>>,
    pub types: Option<HashMap<u64, TypeIdx>>,
}

impl TraceMapping {
    pub fn identity(n_nodes: usize, n_types: usize) -> Self {
        TraceMapping {
            n_nodes,
            n_types,
            nodes: None,
            types: None,
        }
    }

    fn lookup(
        table: &Option<HashMap<u64, usize>>,
        raw: u64,
        limit: usize,
        what: &str,
        line: u64,
    ) -> Result<usize> {
        let idx = match table {
            Some(t) => t.get(&raw).copied(),
            None => usize::try_from(raw).ok(),
        };
        match idx {
            Some(i) if i < limit => Ok(i),
            _ => Err(Error::Mapping(format!("line {line}: unknown {what} {raw}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    /// Divide every count by this factor (stochastically rounded).
    pub downscale: u32,
    /// Number of raw trace intervals folded into one simulation interval.
    pub bin_width: u32,
    pub seed: u64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            downscale: 1,
            bin_width: 1,
            seed: 0,
        }
    }
}

/// `floor(count / downscale)` plus one with probability equal to the
/// remainder fraction, so the expected load is preserved.
pub fn downscale_count<R: RngCore + ?Sized>(count: u64, downscale: u32, rng: &mut R) -> u64 {
    let ds = u64::from(downscale.max(1));
    let base = count / ds;
    let rem = count % ds;
    if rem == 0 {
        return base;
    }
    let frac = rem as f64 / ds as f64;
    base + u64::from(rng.random::<f64>() < frac)
}

/// Reads an `interval,node,ftype,count` trace and returns one batch per
/// occupied simulation interval, in interval order. Raw intervals start at 1.
pub fn ingest_trace(
    path: &Path,
    mapping: &TraceMapping,
    opts: TraceOptions,
) -> Result<Vec<RequestBatch>> {
    if opts.downscale == 0 {
        return Err(Error::config("downscale must be >= 1"));
    }
    if opts.bin_width == 0 {
        return Err(Error::config("bin width must be >= 1"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let mut binned: BTreeMap<(Interval, NodeIdx, TypeIdx), u64> = BTreeMap::new();
    let mut raw = csv::StringRecord::new();
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    loop {
        match reader.read_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_error(path, e)),
        }
        let line = raw.position().map_or(0, |p| p.line());
        let rec: TraceRecord = raw.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if rec.interval == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "intervals are numbered from 1".into(),
            });
        }
        let v = TraceMapping::lookup(&mapping.nodes, rec.node, mapping.n_nodes, "node", line)?;
        let n = TraceMapping::lookup(&mapping.types, rec.ftype, mapping.n_types, "function type", line)?;
        let tick = (rec.interval - 1) / u64::from(opts.bin_width) + 1;
        let tick = Interval::try_from(tick).map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("interval {} out of range", rec.interval),
        })?;
        *binned.entry((tick, v, n)).or_default() += rec.count;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut batches: Vec<RequestBatch> = Vec::new();
    for ((tick, v, n), count) in binned {
        if batches.last().is_none_or(|b| b.interval != tick) {
            batches.push(RequestBatch::empty(tick, mapping.n_nodes, mapping.n_types));
        }
        let scaled = downscale_count(count, opts.downscale, &mut rng);
        let batch = batches.last_mut().expect("pushed above");
        batch.counts[v][n] = u32::try_from(scaled)
            .map_err(|_| Error::config(format!("count {scaled} too large at interval {tick}")))?;
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn popularity_examples() {
        assert_eq!(zipf_popularity(0.8, 1).unwrap(), vec![1.0]);
        let two = zipf_popularity(1.0, 2).unwrap();
        assert!((two[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((two[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(zipf_popularity(0.0, 4).is_err());
        assert!(zipf_popularity(1.0, 0).is_err());
    }

    #[test]
    fn zero_rate_gives_empty_batches() {
        let cfg = ZipfConfig {
            beta: 1.0,
            n_types: 4,
            mean_rate: 0.0,
            seed: 3,
            global_ranking: false,
        };
        let w = ZipfWorkload::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..20 {
            assert_eq!(w.generate_batch(t, &mut rng).total(), 0);
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let cfg = ZipfConfig {
            beta: 1.2,
            n_types: 4,
            mean_rate: 7.5,
            seed: 11,
            global_ranking: false,
        };
        let gen = |seed| {
            let w = ZipfWorkload::new(&cfg, 6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (1..=30).map(|t| w.generate_batch(t, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(gen(99), gen(99));
        assert_ne!(gen(99), gen(100));
    }

    #[test]
    fn global_ranking_uses_identity_order() {
        let cfg = ZipfConfig {
            beta: 1.0,
            n_types: 4,
            mean_rate: 1.0,
            seed: 5,
            global_ranking: true,
        };
        let w = ZipfWorkload::new(&cfg, 3).unwrap();
        for v in 0..3 {
            assert_eq!((0..4).map(|r| w.type_at_rank(v, r)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        }
    }

    fn write_trace(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_trace_is_empty_stream() {
        let f = write_trace("interval,node,ftype,count\n");
        let out = ingest_trace(f.path(), &TraceMapping::identity(2, 2), TraceOptions::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn identity_downscale_preserves_counts_and_orders_intervals() {
        let f = write_trace("interval,node,ftype,count\n3,1,0,5\n1,0,1,2\n3,1,0,4\n2,0,0,7\n");
        let out = ingest_trace(f.path(), &TraceMapping::identity(2, 2), TraceOptions::default()).unwrap();
        assert_eq!(out.iter().map(|b| b.interval).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(out[0].get(0, 1), 2);
        assert_eq!(out[1].get(0, 0), 7);
        assert_eq!(out[2].get(1, 0), 9);
    }

    #[test]
    fn binning_folds_intervals() {
        let f = write_trace("interval,node,ftype,count\n1,0,0,1\n2,0,0,1\n3,0,0,1\n");
        let opts = TraceOptions {
            bin_width: 2,
            ..TraceOptions::default()
        };
        let out = ingest_trace(f.path(), &TraceMapping::identity(1, 1), opts).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].interval, out[0].get(0, 0)), (1, 2));
        assert_eq!((out[1].interval, out[1].get(0, 0)), (2, 1));
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_trace("interval,node,ftype,count\n1,0,0,1\n2,0,zero,1\n");
        let err = ingest_trace(f.path(), &TraceMapping::identity(1, 1), TraceOptions::default())
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_trace("interval,node,ftype,count\n1,0,0,-4\n");
        assert!(matches!(
            ingest_trace(f.path(), &TraceMapping::identity(1, 1), TraceOptions::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_ids_are_mapping_errors() {
        let f = write_trace("interval,node,ftype,count\n1,5,0,1\n");
        assert!(matches!(
            ingest_trace(f.path(), &TraceMapping::identity(2, 2), TraceOptions::default()),
            Err(Error::Mapping(_))
        ));
        let f = write_trace("interval,node,ftype,count\n1,40,900,3\n");
        let mapping = TraceMapping {
            n_nodes: 2,
            n_types: 2,
            nodes: Some(HashMap::from([(40, 1)])),
            types: Some(HashMap::from([(900, 0)])),
        };
        let out = ingest_trace(f.path(), &mapping, TraceOptions::default()).unwrap();
        assert_eq!(out[0].get(1, 0), 3);
    }

    #[test]
    fn stochastic_rounding_keeps_the_mean() {
        // 25 / 10 = 2.5 in expectation; 4000 seeds give a standard error of
        // 0.5 / sqrt(4000) ~ 0.008, well inside the 0.1 band.
        let f = write_trace("interval,node,ftype,count\n1,0,0,25\n");
        let runs = 4000;
        let mut sum = 0u64;
        for seed in 0..runs {
            let opts = TraceOptions {
                downscale: 10,
                bin_width: 1,
                seed,
            };
            let out = ingest_trace(f.path(), &TraceMapping::identity(1, 1), opts).unwrap();
            let c = out[0].get(0, 0);
            assert!(c == 2 || c == 3);
            sum += u64::from(c);
        }
        let mean = sum as f64 / runs as f64;
        assert!((mean - 2.5).abs() < 0.1, "mean {mean}");
    }
}
