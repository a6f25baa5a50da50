//! Influence-based prompt selection over a directed similarity graph.
//!
//! Each prompt links to its most similar neighbours, with more links for
//! prompts that are similar to many others. Nodes are scored by the mean
//! reach of an independent cascade started from them, minus a penalty for
//! hop-distance overlap with what has already been picked, and picked
//! greedily.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{vector_similarity, Metric};
use crate::error::{Result, SolarError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub hop_depth: usize,
    pub diffusion_runs: usize,
    pub target_size: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.5,
            gamma: 1.0,
            hop_depth: 2,
            diffusion_runs: 20,
            target_size: 128,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn check(&self, num_nodes: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SolarError::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(SolarError::Config(format!("beta {} outside [0, 1)", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(SolarError::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if self.diffusion_runs == 0 {
            return Err(SolarError::Config("diffusion_runs must be positive".into()));
        }
        if self.target_size > num_nodes {
            return Err(SolarError::Config(format!(
                "target_size {} exceeds {num_nodes} nodes",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// `⌈alpha · s · (n − 1)⌉` clamped to `[1, n − 1]`. A 1e-9 slack absorbs
/// rounding in the product before the ceiling.
pub fn out_degree(alpha: f64, mean_sim: f64, n: usize) -> usize {
    let raw = (alpha * mean_sim * (n - 1) as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGraph {
    /// Out-edges `(target, weight)` per node, most similar first.
    pub adj: Vec<Vec<(usize, f64)>>,
    pub mean_sim: Vec<f64>,
    pub degree: Vec<usize>,
}

impl PromptGraph {
    /// A graph with the given out-edges; weights must lie in `[0, 1]`.
    pub fn from_edges(adj: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = adj.len();
        for (u, edges) in adj.iter().enumerate() {
            for &(v, w) in edges {
                if v >= n || v == u {
                    return Err(SolarError::Config(format!("edge {u} -> {v} is invalid")));
                }
                if !(0.0..=1.0).contains(&w) {
                    return Err(SolarError::Config(format!("edge {u} -> {v} weight {w} outside [0, 1]")));
                }
            }
        }
        Ok(Self {
            degree: adj.iter().map(Vec::len).collect(),
            mean_sim: vec![0.0; n],
            adj,
        })
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Exact-distance shells `N_1..N_depth` of `v` along out-edges.
    pub fn hop_shells(&self, v: usize, depth: usize) -> Vec<Vec<usize>> {
        let mut dist = vec![usize::MAX; self.len()];
        dist[v] = 0;
        let mut shells = vec![Vec::new(); depth];
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            if dist[u] == depth {
                continue;
            }
            for &(w, _) in &self.adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    shells[dist[w] - 1].push(w);
                    queue.push_back(w);
                }
            }
        }
        shells
    }
}

/// Pairwise cosine similarity clamped to `[0, 1]`.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = embeddings.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = vector_similarity(&embeddings[i], &embeddings[j], Metric::Cosine)?.clamp(0.0, 1.0);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

/// Links each node to its `k_i` most similar others (ties to the lower id).
pub fn build_graph(embeddings: &[Vec<f64>], alpha: f64) -> Result<PromptGraph> {
    let n = embeddings.len();
    if n < 2 {
        return Err(SolarError::GraphTooSmall(n));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SolarError::Config(format!("alpha {alpha} outside (0, 1]")));
    }
    let sim = similarity_matrix(embeddings)?;
    let mut adj = Vec::with_capacity(n);
    let mut mean_sim = Vec::with_capacity(n);
    let mut degree = Vec::with_capacity(n);
    for (i, row) in sim.iter().enumerate() {
        let s = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).sum::<f64>() / (n - 1) as f64;
        let k = out_degree(alpha, s, n);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        adj.push(others[..k].iter().map(|&j| (j, row[j])).collect());
        mean_sim.push(s);
        degree.push(k);
    }
    Ok(PromptGraph { adj, mean_sim, degree })
}

/// Node count reached by one independent cascade from `v`.
pub fn cascade(graph: &PromptGraph, v: usize, rng: &mut impl Rng) -> usize {
    let mut active = vec![false; graph.len()];
    active[v] = true;
    let mut visited = 1;
    let mut frontier = VecDeque::from([v]);
    while let Some(u) = frontier.pop_front() {
        for &(w, p) in &graph.adj[u] {
            if !active[w] && rng.random::<f64>() < p {
                active[w] = true;
                visited += 1;
                frontier.push_back(w);
            }
        }
    }
    visited
}

fn node_rng(seed: u64, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node as u64);
    rng
}

/// Mean cascade size over `runs` runs on the node's own RNG stream.
pub fn influence_runs(graph: &PromptGraph, v: usize, runs: usize, seed: u64) -> f64 {
    let mut rng = node_rng(seed, v);
    let total: usize = (0..runs).map(|_| cascade(graph, v, &mut rng)).sum();
    total as f64 / runs as f64
}

pub fn influence(graph: &PromptGraph, v: usize, cfg: &SelectionConfig) -> f64 {
    influence_runs(graph, v, cfg.diffusion_runs, cfg.seed)
}

/// `−Σ β^i |N_i(v) ∩ S|` over exact-distance shells up to `hop_depth`.
pub fn diversity_penalty(graph: &PromptGraph, v: usize, selected: &[bool], cfg: &SelectionConfig) -> f64 {
    shell_penalty(&graph.hop_shells(v, cfg.hop_depth), selected, cfg.beta)
}

fn shell_penalty(shells: &[Vec<usize>], selected: &[bool], beta: f64) -> f64 {
    let mut d = 0.0;
    let mut weight = 1.0;
    for shell in shells {
        weight *= beta;
        let hits = shell.iter().filter(|&&u| selected[u]).count();
        d -= weight * hits as f64;
    }
    d
}

fn pick(scores: &[f64], selected: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (v, &f) in scores.iter().enumerate() {
        if !selected[v] && best.is_none_or(|b| f > scores[b]) {
            best = Some(v);
        }
    }
    best.expect("an unselected node remains")
}

/// Greedy selection of `target_size` nodes by `I(v) + γ·D(v)`. Influence is
/// computed once; after each pick only nodes within `hop_depth` of it have
/// their penalty recomputed.
pub fn select(graph: &PromptGraph, cfg: &SelectionConfig) -> Result<Vec<usize>> {
    let infl: Vec<f64> = (0..graph.len()).map(|v| influence(graph, v, cfg)).collect();
    select_with_influence(graph, &infl, cfg)
}

pub fn select_with_influence(graph: &PromptGraph, infl: &[f64], cfg: &SelectionConfig) -> Result<Vec<usize>> {
    let n = graph.len();
    cfg.check(n)?;
    let shells: Vec<Vec<Vec<usize>>> = (0..n).map(|v| graph.hop_shells(v, cfg.hop_depth)).collect();
    let mut watchers = vec![Vec::new(); n];
    for (v, sh) in shells.iter().enumerate() {
        for u in sh.iter().flatten() {
            watchers[*u].push(v);
        }
    }
    let mut selected = vec![false; n];
    let mut penalty = vec![0.0; n];
    let mut scores: Vec<f64> = infl.to_vec();
    let mut order = Vec::with_capacity(cfg.target_size);
    while order.len() < cfg.target_size {
        let v = pick(&scores, &selected);
        selected[v] = true;
        order.push(v);
        for &u in &watchers[v] {
            penalty[u] = shell_penalty(&shells[u], &selected, cfg.beta);
            scores[u] = infl[u] + cfg.gamma * penalty[u];
        }
    }
    Ok(order)
}

/// Embeds nothing itself: builds the graph, selects, and returns node ids.
pub fn select_prompts(embeddings: &[Vec<f64>], cfg: &SelectionConfig) -> Result<Vec<usize>> {
    select(&build_graph(embeddings, cfg.alpha)?, cfg)
}

/// One id per line, in selection order.
pub fn write_selection(ids: &[String], mut w: impl Write) -> Result<()> {
    for id in ids {
        writeln!(w, "{id}")?;
    }
    Ok(())
}
