//! Directed entity co-occurrence graph.
//!
//! An edge `i → j` counts the training instances in which entity `i` occurs
//! in the question or options and entity `j` occurs in the gold analysis.
//! Edge weights normalize each source's counts into a distribution and damp
//! targets that appear in many analyses:
//!
//! ```text
//! weight(i, j) = count(i, j) / Σ_k count(i, k) · log10(m / (1 + freq(j)))
//! ```
//!
//! where `m` is the number of nodes and `freq(j)` the number of training
//! analyses mentioning `j`. Pairs that never co-occur have no edge (reported
//! as `-1` by [`KnowledgeGraph::raw_count_or_sentinel`]); the sentinel never
//! enters the arithmetic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::entity::{AnnotatedInstance, Entity};

/// Value reported for pairs with no co-occurrence.
pub const MISSING_EDGE: i64 = -1;

/// Commutative co-occurrence tallies. Shards can be counted independently
/// and merged before the graph is finalized.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    nodes: BTreeSet<Entity>,
    pairs: BTreeMap<(Entity, Entity), u64>,
    analysis_freq: BTreeMap<Entity, u64>,
    instances: u64,
}

impl CooccurrenceCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_instances(train: &[AnnotatedInstance]) -> Self {
        let mut c = Self::new();
        for inst in train {
            c.add(inst);
        }
        c
    }

    pub fn add(&mut self, inst: &AnnotatedInstance) {
        self.instances += 1;
        self.nodes.extend(inst.qo_entities.iter().cloned());
        self.nodes.extend(inst.r_entities.iter().cloned());
        for target in &inst.r_entities {
            *self.analysis_freq.entry(target.clone()).or_default() += 1;
        }
        for source in &inst.qo_entities {
            for target in &inst.r_entities {
                *self
                    .pairs
                    .entry((source.clone(), target.clone()))
                    .or_default() += 1;
            }
        }
    }

    pub fn merge(&mut self, other: CooccurrenceCounts) {
        self.instances += other.instances;
        self.nodes.extend(other.nodes);
        for (k, v) in other.pairs {
            *self.pairs.entry(k).or_default() += v;
        }
        for (k, v) in other.analysis_freq {
            *self.analysis_freq.entry(k).or_default() += v;
        }
    }

    pub fn instances(&self) -> u64 {
        self.instances
    }

    pub fn into_graph(self) -> KnowledgeGraph {
        let nodes: Vec<Entity> = self.nodes.into_iter().collect();
        let index: HashMap<Entity, u32> = nodes
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i as u32))
            .collect();
        let mut analysis_freq = vec![0u64; nodes.len()];
        for (e, f) in self.analysis_freq {
            analysis_freq[index[&e] as usize] = f;
        }
        let raw_counts = self
            .pairs
            .into_iter()
            .map(|((s, t), c)| ((index[&s], index[&t]), c))
            .collect();
        KnowledgeGraph::from_parts(nodes, raw_counts, analysis_freq)
    }
}

/// Single-pass graph construction.
pub fn build_graph(train: &[AnnotatedInstance]) -> KnowledgeGraph {
    CooccurrenceCounts::from_instances(train).into_graph()
}

/// Counts `shards` contiguous slices on separate threads and merges them.
pub fn build_graph_sharded(train: &[AnnotatedInstance], shards: usize) -> KnowledgeGraph {
    let shards = shards.clamp(1, train.len().max(1));
    let chunk = train.len().div_ceil(shards).max(1);
    let partials: Vec<CooccurrenceCounts> = std::thread::scope(|s| {
        let handles: Vec<_> = train
            .chunks(chunk)
            .map(|part| s.spawn(move || CooccurrenceCounts::from_instances(part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting shard panicked"))
            .collect()
    });
    let mut total = CooccurrenceCounts::new();
    for p in partials {
        total.merge(p);
    }
    total.into_graph()
}

/// Out-edges of one entity, strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub source: Entity,
    pub targets: Vec<(Entity, f64)>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Finished, immutable graph.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<Entity>,
    index: HashMap<Entity, u32>,
    raw_counts: BTreeMap<(u32, u32), u64>,
    analysis_freq: Vec<u64>,
    weights: BTreeMap<(u32, u32), f64>,
    /// Per source: (target, weight) in neighbor order.
    adjacency: Vec<Vec<(u32, f64)>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.raw_counts == other.raw_counts
            && self.analysis_freq == other.analysis_freq
            && self.weights == other.weights
    }
}

/// Descending weight, then ascending entity string.
fn neighbor_order(nodes: &[Entity], a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| nodes[a.0 as usize].cmp(&nodes[b.0 as usize]))
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        Self::from_parts(Vec::new(), BTreeMap::new(), Vec::new())
    }

    /// `nodes` must be sorted and unique; counts index into it.
    fn from_parts(
        nodes: Vec<Entity>,
        raw_counts: BTreeMap<(u32, u32), u64>,
        analysis_freq: Vec<u64>,
    ) -> Self {
        let m = nodes.len();
        let mut row_sum = vec![0u64; m];
        for (&(s, _), &c) in &raw_counts {
            row_sum[s as usize] += c;
        }
        let mut weights = BTreeMap::new();
        let mut adjacency = vec![Vec::new(); m];
        for (&(s, t), &c) in &raw_counts {
            let share = c as f64 / row_sum[s as usize] as f64;
            let damp = (m as f64 / (1.0 + analysis_freq[t as usize] as f64)).log10();
            let w = share * damp;
            weights.insert((s, t), w);
            adjacency[s as usize].push((t, w));
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| neighbor_order(&nodes, a, b));
        }
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i as u32))
            .collect();
        KnowledgeGraph {
            nodes,
            index,
            raw_counts,
            analysis_freq,
            weights,
            adjacency,
        }
    }

    /// Number of nodes.
    pub fn m(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.raw_counts.len()
    }

    /// Nodes in ascending entity order.
    pub fn nodes(&self) -> &[Entity] {
        &self.nodes
    }

    pub fn contains(&self, e: &Entity) -> bool {
        self.index.contains_key(e)
    }

    fn idx(&self, e: &Entity) -> Option<u32> {
        self.index.get(e).copied()
    }

    pub fn raw_count(&self, source: &Entity, target: &Entity) -> Option<u64> {
        let key = (self.idx(source)?, self.idx(target)?);
        self.raw_counts.get(&key).copied()
    }

    pub fn raw_count_or_sentinel(&self, source: &Entity, target: &Entity) -> i64 {
        self.raw_count(source, target)
            .map(|c| c as i64)
            .unwrap_or(MISSING_EDGE)
    }

    pub fn weight(&self, source: &Entity, target: &Entity) -> Option<f64> {
        let key = (self.idx(source)?, self.idx(target)?);
        self.weights.get(&key).copied()
    }

    /// Number of training analyses mentioning `e`.
    pub fn analysis_freq(&self, e: &Entity) -> u64 {
        self.idx(e)
            .map(|i| self.analysis_freq[i as usize])
            .unwrap_or(0)
    }

    /// All edges as (source, target, raw count, weight) in index order.
    pub fn edges(&self) -> impl Iterator<Item = (&Entity, &Entity, u64, f64)> + '_ {
        self.raw_counts.iter().map(move |(&(s, t), &c)| {
            (
                &self.nodes[s as usize],
                &self.nodes[t as usize],
                c,
                self.weights[&(s, t)],
            )
        })
    }

    pub fn neighbors(&self, e: &Entity) -> NeighborList {
        let targets = self
            .neighbor_slice(e)
            .iter()
            .map(|&(t, w)| (self.nodes[t as usize].clone(), w))
            .collect();
        NeighborList {
            source: e.clone(),
            targets,
        }
    }

    pub(crate) fn neighbor_slice(&self, e: &Entity) -> &[(u32, f64)] {
        match self.idx(e) {
            Some(i) => &self.adjacency[i as usize],
            None => &[],
        }
    }

    pub(crate) fn node(&self, i: u32) -> &Entity {
        &self.nodes[i as usize]
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphFileError> {
        fs::write(path, self.to_bytes()).map_err(GraphFileError::Io)
    }

    pub fn load(path: &Path) -> Result<Self, GraphFileError> {
        let bytes = fs::read(path).map_err(GraphFileError::Io)?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_graph(g: &KnowledgeGraph, path: &Path) -> Result<(), GraphFileError> {
    g.save(path)
}

pub fn load_graph(path: &Path) -> Result<KnowledgeGraph, GraphFileError> {
    KnowledgeGraph::load(path)
}

#[derive(Debug, Error)]
pub enum GraphFileError {
    #[error("graph file io: {0}")]
    Io(#[source] std::io::Error),
    #[error("unsupported graph file: {0}")]
    Version(String),
    #[error("graph file checksum mismatch")]
    Checksum,
    #[error("graph file truncated")]
    Truncated,
    #[error("corrupt graph file: {0}")]
    Corrupt(String),
}

// Graph file layout, all integers little-endian:
//
//   magic "SEEDPKG\0" | version u32 | m u64 | edge count u64
//   m × (len u32, utf-8 bytes)                node table, ascending
//   edge count × (source u32, target u32, count u64)
//   m × u64                                   analysis frequencies
//   sha256 of everything above (32 bytes)
pub const GRAPH_MAGIC: [u8; 8] = *b"SEEDPKG\0";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

impl KnowledgeGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&GRAPH_MAGIC);
        out.extend_from_slice(&GRAPH_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.raw_counts.len() as u64).to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&(n.as_str().len() as u32).to_le_bytes());
            out.extend_from_slice(n.as_str().as_bytes());
        }
        for (&(s, t), &c) in &self.raw_counts {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        for f in &self.analysis_freq {
            out.extend_from_slice(&f.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphFileError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != GRAPH_MAGIC {
            return Err(GraphFileError::Version(format!("bad magic {magic:02x?}")));
        }
        let version = r.u32()?;
        if version != GRAPH_FORMAT_VERSION {
            return Err(GraphFileError::Version(format!(
                "format version {version}, expected {GRAPH_FORMAT_VERSION}"
            )));
        }
        let m = r.u64()? as usize;
        let edge_count = r.u64()? as usize;
        if m > bytes.len() || edge_count > bytes.len() {
            return Err(GraphFileError::Truncated);
        }
        let mut nodes = Vec::with_capacity(m);
        for _ in 0..m {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let s = std::str::from_utf8(raw)
                .map_err(|e| GraphFileError::Corrupt(format!("node name: {e}")))?;
            nodes.push(s.to_string());
        }
        let mut edge_rows = Vec::with_capacity(edge_count);
        for _ in 0..edge_count {
            edge_rows.push((r.u32()?, r.u32()?, r.u64()?));
        }
        let mut analysis_freq = Vec::with_capacity(m);
        for _ in 0..m {
            analysis_freq.push(r.u64()?);
        }
        let body_end = r.pos;
        let trailer = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(GraphFileError::Corrupt("trailing bytes".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
            return Err(GraphFileError::Checksum);
        }

        let nodes: Vec<Entity> = nodes
            .iter()
            .map(|s| {
                let e = Entity::new(s).map_err(|e| GraphFileError::Corrupt(e.to_string()))?;
                if e.as_str() != s {
                    return Err(GraphFileError::Corrupt(format!("node {s:?} is not normalized")));
                }
                Ok(e)
            })
            .collect::<Result<_, _>>()?;
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GraphFileError::Corrupt("node table not sorted".into()));
        }
        let mut raw_counts = BTreeMap::new();
        for (s, t, c) in edge_rows {
            if s as usize >= m || t as usize >= m || c == 0 {
                return Err(GraphFileError::Corrupt(format!("bad edge ({s}, {t}, {c})")));
            }
            if raw_counts.insert((s, t), c).is_some() {
                return Err(GraphFileError::Corrupt(format!("duplicate edge ({s}, {t})")));
            }
        }
        Ok(KnowledgeGraph::from_parts(nodes, raw_counts, analysis_freq))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GraphFileError> {
        let end = self.pos.checked_add(n).ok_or(GraphFileError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(GraphFileError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GraphFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, GraphFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{Instance, Label};
    use crate::entity::normalize_entity;

    pub(crate) fn ent(s: &str) -> Entity {
        normalize_entity(s).unwrap()
    }

    pub(crate) fn annotated(id: &str, qo: &[&str], r: &[&str]) -> AnnotatedInstance {
        AnnotatedInstance {
            base: Instance {
                id: id.into(),
                question: "q".into(),
                options: [(Label::A, "x".to_string())].into_iter().collect(),
                answer: Label::A,
                analysis: "r".into(),
                metadata: Default::default(),
            },
            qo_entities: qo.iter().map(|s| ent(s)).collect(),
            r_entities: r.iter().map(|s| ent(s)).collect(),
        }
    }

    /// Three-instance toy corpus used across the graph and seed tests.
    pub(crate) fn toy_corpus() -> Vec<AnnotatedInstance> {
        vec![
            annotated("I1", &["a", "b"], &["c", "d"]),
            annotated("I2", &["a"], &["c"]),
            annotated("I3", &["b", "e"], &["d"]),
        ]
    }

    #[test]
    fn toy_counts() {
        let g = build_graph(&toy_corpus());
        assert_eq!(g.m(), 5);
        assert_eq!(g.raw_count(&ent("a"), &ent("c")), Some(2));
        assert_eq!(g.raw_count(&ent("b"), &ent("d")), Some(2));
        for (s, t) in [("a", "d"), ("b", "c"), ("e", "d")] {
            assert_eq!(g.raw_count(&ent(s), &ent(t)), Some(1));
        }
        assert_eq!(g.raw_count_or_sentinel(&ent("c"), &ent("a")), -1);
        assert_eq!(g.raw_count_or_sentinel(&ent("e"), &ent("c")), -1);
        assert_eq!(g.analysis_freq(&ent("c")), 2);
        assert_eq!(g.analysis_freq(&ent("d")), 2);
        assert_eq!(g.analysis_freq(&ent("a")), 0);
        assert_eq!(g.edge_count(), 5);
    }

    #[test]
    fn toy_weights() {
        let g = build_graph(&toy_corpus());
        let w = g.weight(&ent("a"), &ent("c")).unwrap();
        assert!((w - 0.147_899_166_4).abs() < 1e-9, "{w}");
        let n = g.neighbors(&ent("a"));
        assert_eq!(n.targets.len(), 2);
        assert_eq!(n.targets[0].0, ent("c"));
        assert!((n.targets[0].1 - 0.147_899_166_4).abs() < 1e-9);
        assert_eq!(n.targets[1].0, ent("d"));
        assert!((n.targets[1].1 - 0.073_949_583_2).abs() < 1e-9);
        assert!(g.neighbors(&ent("c")).is_empty());
        assert!(g.neighbors(&ent("unknown")).is_empty());
    }

    #[test]
    fn empty_graph() {
        let g = build_graph(&[]);
        assert_eq!(g.m(), 0);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g, KnowledgeGraph::empty());
        assert_eq!(KnowledgeGraph::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn ties_sorted_by_entity() {
        let g = build_graph(&[annotated("x", &["s"], &["z", "y", "x"])]);
        let names: Vec<_> = g
            .neighbors(&ent("s"))
            .targets
            .into_iter()
            .map(|(e, _)| e.into_string())
            .collect();
        assert_eq!(names, ["x", "y", "z"]);
    }

    #[test]
    fn self_loops_counted() {
        let g = build_graph(&[annotated("x", &["a"], &["a", "b"])]);
        assert_eq!(g.raw_count(&ent("a"), &ent("a")), Some(1));
    }

    #[test]
    fn nonpositive_damping_kept() {
        // m = 2, freq(b) = 1 → log10(2/2) = 0
        let g = build_graph(&[annotated("x", &["a"], &["b"])]);
        assert_eq!(g.weight(&ent("a"), &ent("b")), Some(0.0));
        // m = 2, freq(b) = 2 → negative weight
        let g = build_graph(&[annotated("x", &["a"], &["b"]), annotated("y", &["a"], &["b"])]);
        assert!(g.weight(&ent("a"), &ent("b")).unwrap() < 0.0);
    }

    #[test]
    fn file_roundtrip() {
        let g = build_graph(&toy_corpus());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        save_graph(&g, &p).unwrap();
        let back = load_graph(&p).unwrap();
        assert_eq!(back, g);
        for (s, t, _, w) in g.edges() {
            assert!((back.weight(s, t).unwrap() - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn bad_files_rejected() {
        let g = build_graph(&toy_corpus());
        let bytes = g.to_bytes();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            KnowledgeGraph::from_bytes(&wrong_magic),
            Err(GraphFileError::Version(_))
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            KnowledgeGraph::from_bytes(&wrong_version),
            Err(GraphFileError::Version(_))
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 40;
        flipped[mid] ^= 0x01;
        assert!(matches!(
            KnowledgeGraph::from_bytes(&flipped),
            Err(GraphFileError::Checksum)
        ));

        assert!(matches!(
            KnowledgeGraph::from_bytes(&bytes[..bytes.len() - 10]),
            Err(GraphFileError::Truncated)
        ));
        assert!(matches!(
            KnowledgeGraph::from_bytes(&bytes[..5]),
            Err(GraphFileError::Truncated)
        ));
    }
}
