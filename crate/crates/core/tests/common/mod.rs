//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seedpad::corpus::Instance;
use seedpad::entity::{normalize_entity, AnnotatedInstance, Entity};
use seedpad::graph::KnowledgeGraph;

pub fn ent(s: &str) -> Entity {
    normalize_entity(s).unwrap()
}

pub fn instance(id: &str) -> Instance {
    serde_json::from_value(serde_json::json!({
        "id": id, "question": "q", "options": {"A": "x", "B": "y"},
        "answer": "A", "analysis": "r"
    }))
    .unwrap()
}

pub fn annotated(id: &str, qo: &[String], r: &[String]) -> AnnotatedInstance {
    AnnotatedInstance {
        base: instance(id),
        qo_entities: qo.iter().map(|s| ent(s)).collect(),
        r_entities: r.iter().map(|s| ent(s)).collect(),
    }
}

/// Random corpus: up to `max_instances` instances over `e0..e{max_entities}`.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_instances: usize, max_entities: usize) -> Vec<AnnotatedInstance> {
    let n = rng.gen_range(0..=max_instances);
    let vocab = rng.gen_range(1..=max_entities);
    let pick = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let size = rng.gen_range(0..=vocab.min(6));
        (0..size).map(|_| format!("e{}", rng.gen_range(0..vocab))).collect()
    };
    (0..n)
        .map(|i| {
            let qo = pick(rng);
            let r = pick(rng);
            annotated(&format!("i{i}"), &qo, &r)
        })
        .collect()
}

/// Graph quantities computed by looping over every (source, target, instance).
pub struct OracleGraph {
    pub nodes: Vec<Entity>,
    pub counts: BTreeMap<(Entity, Entity), u64>,
    pub freq: BTreeMap<Entity, u64>,
    pub weights: BTreeMap<(Entity, Entity), f64>,
}

pub fn oracle_graph(train: &[AnnotatedInstance]) -> OracleGraph {
    let mut nodes = BTreeSet::new();
    for inst in train {
        nodes.extend(inst.qo_entities.iter().cloned());
        nodes.extend(inst.r_entities.iter().cloned());
    }
    let nodes: Vec<Entity> = nodes.into_iter().collect();
    let m = nodes.len() as f64;

    let mut counts = BTreeMap::new();
    for i in &nodes {
        for j in &nodes {
            let mut c = 0u64;
            for inst in train {
                if inst.qo_entities.contains(i) && inst.r_entities.contains(j) {
                    c += 1;
                }
            }
            if c > 0 {
                counts.insert((i.clone(), j.clone()), c);
            }
        }
    }
    let mut freq = BTreeMap::new();
    for j in &nodes {
        let c = train.iter().filter(|inst| inst.r_entities.contains(j)).count() as u64;
        freq.insert(j.clone(), c);
    }
    let mut weights = BTreeMap::new();
    for ((i, j), &c) in &counts {
        let row: u64 = counts.iter().filter(|((s, _), _)| s == i).map(|(_, &v)| v).sum();
        let damp = (m / (1.0 + freq[j] as f64)).log10();
        weights.insert((i.clone(), j.clone()), c as f64 / row as f64 * damp);
    }
    OracleGraph {
        nodes,
        counts,
        freq,
        weights,
    }
}

/// Compares a built graph with the oracle; returns the first mismatch.
pub fn check_graph(g: &KnowledgeGraph, o: &OracleGraph) -> Result<(), String> {
    if g.nodes() != o.nodes.as_slice() {
        return Err(format!("nodes differ: {:?} vs {:?}", g.nodes(), o.nodes));
    }
    if g.edge_count() != o.counts.len() {
        return Err(format!("edge count {} vs {}", g.edge_count(), o.counts.len()));
    }
    for i in &o.nodes {
        if g.analysis_freq(i) != o.freq[i] {
            return Err(format!("freq({i:?}) {} vs {}", g.analysis_freq(i), o.freq[i]));
        }
        for j in &o.nodes {
            let want = o.counts.get(&(i.clone(), j.clone())).map_or(-1, |&c| c as i64);
            if g.raw_count_or_sentinel(i, j) != want {
                return Err(format!("count({i:?},{j:?}) {} vs {want}", g.raw_count_or_sentinel(i, j)));
            }
            match (g.weight(i, j), o.weights.get(&(i.clone(), j.clone()))) {
                (None, None) => {}
                (Some(a), Some(b)) if (a - b).abs() <= 1e-9 => {}
                (a, b) => return Err(format!("weight({i:?},{j:?}) {a:?} vs {b:?}")),
            }
        }
    }
    Ok(())
}

/// Exhaustive seed scoring using only `weight` lookups on the graph.
pub fn oracle_seeds(g: &KnowledgeGraph, x: &BTreeSet<Entity>, k: usize) -> Vec<(Entity, u64)> {
    // neighbor list of each query entity, strongest first
    let lists: Vec<Vec<(Entity, f64)>> = x
        .iter()
        .map(|xe| {
            let mut l: Vec<(Entity, f64)> = g
                .nodes()
                .iter()
                .filter_map(|t| g.weight(xe, t).map(|w| (t.clone(), w)))
                .collect();
            l.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            l
        })
        .collect();
    let mut scored = Vec::new();
    for e in g.nodes() {
        if x.contains(e) {
            continue;
        }
        let mut score = 0u64;
        let mut wsum = 0.0;
        let mut connected = false;
        for l in &lists {
            match l.iter().position(|(t, _)| t == e) {
                Some(p) => {
                    score += p as u64 + 1;
                    wsum += l[p].1;
                    connected = true;
                }
                None => score += l.len() as u64 + 1,
            }
        }
        if connected {
            scored.push((e.clone(), score, wsum));
        }
    }
    scored.sort_by(|a, b| {
        a.1.cmp(&b.1)
            .then_with(|| b.2.partial_cmp(&a.2).unwrap())
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.into_iter().take(k).map(|(e, s, _)| (e, s)).collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn occurrences(grams: &[Vec<String>], g: &[String]) -> usize {
    grams.iter().filter(|x| x.as_slice() == g).count()
}

/// Clipped overlap of n-grams, counting by linear scans.
fn overlap(c: &[String], r: &[String], n: usize) -> (usize, usize, usize) {
    let cg = ngrams(c, n);
    let rg = ngrams(r, n);
    let mut seen: Vec<&Vec<String>> = Vec::new();
    let mut hit = 0;
    for g in &cg {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        hit += occurrences(&cg, g).min(occurrences(&rg, g));
    }
    (hit, cg.len(), rg.len())
}

pub fn bleu_ref(c: &[String], r: &[String], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let orders = n.min(c.len());
    let mut logs = 0.0;
    for order in 1..=orders {
        let (hit, total, _) = overlap(c, r, order);
        let p = if hit == 0 { 1e-9 } else { hit as f64 / total as f64 };
        logs += p.ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * (logs / orders as f64).exp()
}

pub fn rouge_n_ref(c: &[String], r: &[String], n: usize) -> f64 {
    let (hit, ct, rt) = overlap(c, r, n);
    if ct == 0 || rt == 0 || hit == 0 {
        return 0.0;
    }
    let p = hit as f64 / ct as f64;
    let rc = hit as f64 / rt as f64;
    100.0 * 2.0 * p * rc / (p + rc)
}

pub fn lcs_ref(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l_ref(c: &[String], r: &[String]) -> f64 {
    let l = lcs_ref(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rc = l as f64 / r.len() as f64;
    100.0 * 2.0 * p * rc / (p + rc)
}

pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| ["a", "b", "c", "d", "e"][rng.gen_range(0..5)].to_string()).collect()
}

pub fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}
