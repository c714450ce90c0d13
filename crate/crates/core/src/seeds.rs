//! Knowledge-seed mining by neighbor-rank aggregation.
//!
//! For each query entity `x` (taken from the question and options) the
//! out-edges of `x` are ranked strongest-first. A candidate `e` reachable from
//! any query entity scores the sum of its rank under every `x`; when `x` has no
//! edge to `e` the rank is replaced by the finite penalty `|neighbors(x)| + 1`.
//! The lowest scores are the seeds.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError};
use crate::entity::Entity;
use crate::graph::KnowledgeGraph;

pub const DEFAULT_SEED_COUNT: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SeedError {
    #[error("seed query has no entities")]
    EmptyQuery,
}

/// Entities extracted from a question and its options.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedQuery {
    pub x_entities: BTreeSet<Entity>,
}

impl SeedQuery {
    pub fn new(x_entities: BTreeSet<Entity>) -> Self {
        SeedQuery { x_entities }
    }

    pub fn is_empty(&self) -> bool {
        self.x_entities.is_empty()
    }
}

impl FromIterator<Entity> for SeedQuery {
    fn from_iter<I: IntoIterator<Item = Entity>>(iter: I) -> Self {
        SeedQuery::new(iter.into_iter().collect())
    }
}

/// Position of a target in a source's neighbor list, or the miss penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    /// 1-based position.
    Ranked(u64),
    /// `e` is not a neighbor; value is `|neighbors(x)| + 1`.
    Penalty(u64),
}

impl Rank {
    pub fn value(self) -> u64 {
        match self {
            Rank::Ranked(v) | Rank::Penalty(v) => v,
        }
    }
}

pub fn rank_of(g: &KnowledgeGraph, x: &Entity, e: &Entity) -> Rank {
    let list = g.neighbor_slice(x);
    match list.iter().position(|&(t, _)| g.node(t) == e) {
        Some(p) => Rank::Ranked(p as u64 + 1),
        None => Rank::Penalty(list.len() as u64 + 1),
    }
}

pub fn aggregate_score(g: &KnowledgeGraph, query: &SeedQuery, e: &Entity) -> Result<u64, SeedError> {
    if query.is_empty() {
        return Err(SeedError::EmptyQuery);
    }
    Ok(query.x_entities.iter().map(|x| rank_of(g, x, e).value()).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub entity: Entity,
    /// Aggregated rank; lower is better.
    pub score: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seeds: Vec<Seed>,
    pub k: usize,
}

impl SeedResult {
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.seeds.iter().map(|s| &s.entity)
    }

    pub fn entity_set(&self) -> BTreeSet<Entity> {
        self.entities().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

// target → (1-based rank, weight), plus the miss penalty
type RankedNeighbors = (HashMap<u32, (u64, f64)>, u64);

struct Candidate {
    node: u32,
    score: u64,
    weight_sum: f64,
}

/// Top-`k` seeds for `query`. Ties on score go to the larger total incoming
/// weight from the query, then to the smaller entity string.
pub fn mine_seeds(g: &KnowledgeGraph, query: &SeedQuery, k: usize) -> SeedResult {
    let ranked: Vec<RankedNeighbors> = query
        .x_entities
        .iter()
        .map(|x| {
            let list = g.neighbor_slice(x);
            let ranks = list
                .iter()
                .enumerate()
                .map(|(p, &(t, w))| (t, (p as u64 + 1, w)))
                .collect();
            (ranks, list.len() as u64 + 1)
        })
        .collect();

    let mut pool: BTreeSet<u32> = BTreeSet::new();
    for (ranks, _) in &ranked {
        pool.extend(ranks.keys().copied());
    }

    let mut candidates: Vec<Candidate> = pool
        .into_iter()
        .filter(|&t| !query.x_entities.contains(g.node(t)))
        .map(|t| {
            let mut score = 0;
            let mut weight_sum = 0.0;
            for (ranks, penalty) in &ranked {
                match ranks.get(&t) {
                    Some(&(r, w)) => {
                        score += r;
                        weight_sum += w;
                    }
                    None => score += penalty,
                }
            }
            Candidate {
                node: t,
                score,
                weight_sum,
            }
        })
        .collect();

    candidates.sort_by(|a, b| {
        a.score
            .cmp(&b.score)
            .then_with(|| b.weight_sum.total_cmp(&a.weight_sum))
            .then_with(|| g.node(a.node).cmp(g.node(b.node)))
    });
    let seeds = candidates
        .into_iter()
        .take(k)
        .map(|c| Seed {
            entity: g.node(c.node).clone(),
            score: c.score,
        })
        .collect();
    SeedResult { seeds, k }
}

/// One line of the seeds sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub id: String,
    pub seeds: Vec<Seed>,
}

pub fn seeds_to_jsonl(records: &[SeedRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("seed record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_seeds(text: &str) -> Result<Vec<SeedRecord>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn save_seeds(records: &[SeedRecord], path: &Path) -> Result<(), CorpusError> {
    corpus::write_file(path, seeds_to_jsonl(records).as_bytes())
}

pub fn load_seeds(path: &Path) -> Result<Vec<SeedRecord>, CorpusError> {
    parse_seeds(&corpus::read_file(path)?)
}
