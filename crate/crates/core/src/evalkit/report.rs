use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgdata::Triple;

/// Rank of a query's true tail among its (possibly filtered) candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub query: Triple,
    /// 1-based.
    pub rank: usize,
    pub candidates: usize,
}

/// Metrics of one relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub relation: usize,
    pub name: String,
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub queries: usize,
}

/// Query-weighted metrics over a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub queries: usize,
    pub per_relation: Vec<RelationMetrics>,
}

struct Sums {
    rr: f64,
    h: [usize; 3],
    n: usize,
}

impl Sums {
    fn add(&mut self, rank: usize) {
        self.rr += 1.0 / rank as f64;
        for (c, k) in self.h.iter_mut().zip([1, 5, 10]) {
            if rank <= k {
                *c += 1;
            }
        }
        self.n += 1;
    }

    fn rates(&self) -> (f64, f64, f64, f64) {
        let n = self.n as f64;
        (self.rr / n, self.h[0] as f64 / n, self.h[1] as f64 / n, self.h[2] as f64 / n)
    }
}

/// MRR and Hits@{1,5,10}, averaged over queries. Per-relation rows are in
/// relation-id order and named by id until [`MetricsReport::with_names`].
pub fn aggregate(results: &[RankResult]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty result list".into()));
    }
    let mut total = Sums { rr: 0.0, h: [0; 3], n: 0 };
    let mut by_rel: std::collections::BTreeMap<usize, Sums> = Default::default();
    for r in results {
        total.add(r.rank);
        by_rel.entry(r.query.relation).or_insert(Sums { rr: 0.0, h: [0; 3], n: 0 }).add(r.rank);
    }
    let per_relation = by_rel
        .into_iter()
        .map(|(relation, s)| {
            let (mrr, hits1, hits5, hits10) = s.rates();
            RelationMetrics { relation, name: relation.to_string(), mrr, hits1, hits5, hits10, queries: s.n }
        })
        .collect();
    let (mrr, hits1, hits5, hits10) = total.rates();
    Ok(MetricsReport { mrr, hits1, hits5, hits10, queries: total.n, per_relation })
}

/// Expected MRR when the true tail's rank is uniform over each query's
/// candidates: the mean of `H_n / n`.
pub fn random_baseline(results: &[RankResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .map(|r| (1..=r.candidates).map(|k| 1.0 / k as f64).sum::<f64>() / r.candidates as f64)
        .sum();
    total / results.len() as f64
}

impl MetricsReport {
    pub fn with_names(mut self, name: impl Fn(usize) -> String) -> Self {
        for r in &mut self.per_relation {
            r.name = name(r.relation);
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned columns, overall row last.
    pub fn to_text(&self) -> String {
        let width = self.per_relation.iter().map(|r| r.name.len()).chain([8]).max().unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>6}  {:>6}  {:>6}  {:>7}", "relation", "queries", "MRR", "H@1", "H@5", "H@10");
        let mut row = |name: &str, q: usize, m: f64, a: f64, b: f64, c: f64| {
            let _ = writeln!(out, "{name:<width$}  {q:>7}  {m:>6.3}  {a:>6.3}  {b:>6.3}  {c:>7.3}");
        };
        for r in &self.per_relation {
            row(&r.name, r.queries, r.mrr, r.hits1, r.hits5, r.hits10);
        }
        row("overall", self.queries, self.mrr, self.hits1, self.hits5, self.hits10);
        out
    }

    /// One line per relation with a header, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("relation\tqueries\tmrr\thits1\thits5\thits10\n");
        for r in &self.per_relation {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", r.name, r.queries, r.mrr, r.hits1, r.hits5, r.hits10);
        }
        out
    }
}
