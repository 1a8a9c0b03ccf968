//! Per-subject co-activity graphs and the features drawn from them.
//!
//! Nodes of a subject's graph are the accounts that acted on it; an edge
//! between two accounts weighs the number of distinct *other* subjects both
//! acted on before the newer account joined. When a new account acts, we
//! measure how it attaches to the graph as a whole, how it attaches to the
//! min-cut component it fits best, and a few facts about the account itself.

mod mincut;

pub use mincut::{min_cut_partition, stoer_wagner, Cut, DenseGraph};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

/// Default density threshold at which min-cut recursion stops.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub subject_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub category: String,
}

/// Every user's past activities, in time order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ActivityHistory {
    by_user: HashMap<String, Vec<HistoryEntry>>,
}

impl ActivityHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an activity. Entries stay sorted by timestamp per user.
    pub fn record(&mut self, user_id: &str, entry: HistoryEntry) {
        let list = self.by_user.entry(user_id.to_string()).or_default();
        let pos = list.partition_point(|e| e.timestamp <= entry.timestamp);
        list.insert(pos, entry);
    }

    pub fn entries(&self, user_id: &str) -> &[HistoryEntry] {
        self.by_user.get(user_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Entries strictly before `at`.
    pub fn before(&self, user_id: &str, at: u64) -> &[HistoryEntry] {
        let list = self.entries(user_id);
        &list[..list.partition_point(|e| e.timestamp < at)]
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    /// Distinct subjects `user_id` acted on before `at`, excluding `exclude`.
    pub fn past_subjects(&self, user_id: &str, at: u64, exclude: &str) -> HashSet<&str> {
        self.before(user_id, at)
            .iter()
            .map(|e| e.subject_id.as_str())
            .filter(|s| *s != exclude)
            .collect()
    }
}

/// Undirected weighted graph of the accounts that acted on one subject.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CoActivityGraph {
    pub subject_id: String,
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    adj: Vec<BTreeMap<usize, u64>>,
}

impl CoActivityGraph {
    pub fn new(subject_id: impl Into<String>) -> Self {
        CoActivityGraph {
            subject_id: subject_id.into(),
            ..Default::default()
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(BTreeMap::len).sum::<usize>() / 2
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn contains(&self, user: &str) -> bool {
        self.index.contains_key(user)
    }

    pub fn weight(&self, a: &str, b: &str) -> Option<u64> {
        let (i, j) = (self.index.get(a)?, self.index.get(b)?);
        self.adj[*i].get(j).copied()
    }

    /// Add a node if new; returns its index.
    pub fn add_node(&mut self, user: &str) -> usize {
        if let Some(&i) = self.index.get(user) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(user.to_string());
        self.index.insert(user.to_string(), i);
        self.adj.push(BTreeMap::new());
        i
    }

    /// Set an edge weight; zero removes the edge. Self-loops are ignored.
    pub fn set_edge(&mut self, a: &str, b: &str, weight: u64) {
        if a == b {
            return;
        }
        let i = self.add_node(a);
        let j = self.add_node(b);
        if weight == 0 {
            self.adj[i].remove(&j);
            self.adj[j].remove(&i);
        } else {
            self.adj[i].insert(j, weight);
            self.adj[j].insert(i, weight);
        }
    }

    fn dense_over(&self, members: &[usize]) -> DenseGraph {
        let pos: HashMap<usize, usize> = members.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut w = vec![vec![0u64; members.len()]; members.len()];
        for (p, &i) in members.iter().enumerate() {
            for (j, &x) in &self.adj[i] {
                if let Some(&q) = pos.get(j) {
                    w[p][q] = x;
                }
            }
        }
        DenseGraph {
            labels: members.iter().map(|&i| self.nodes[i].clone()).collect(),
            w,
        }
    }

    /// Min-cut components over all nodes except `without`, as user ids.
    pub fn partition(&self, theta: f64, without: Option<&str>) -> Vec<Vec<String>> {
        let skip = without.and_then(|u| self.index.get(u)).copied();
        let members: Vec<usize> = (0..self.nodes.len()).filter(|i| Some(*i) != skip).collect();
        let dense = self.dense_over(&members);
        min_cut_partition(&dense, theta)
            .into_iter()
            .map(|c| c.into_iter().map(|p| dense.labels[p].clone()).collect())
            .collect()
    }
}

/// Join `user` into `graph`, linking it to every existing node with which it
/// shares at least one past subject. Re-adding refreshes the user's edges.
pub fn update_graph(graph: &mut CoActivityGraph, user: &str, history: &ActivityHistory, at: u64) {
    let mine = history.past_subjects(user, at, &graph.subject_id);
    graph.add_node(user);
    let others: Vec<String> = graph.nodes.iter().filter(|v| v.as_str() != user).cloned().collect();
    for v in others {
        let common: HashSet<&str> = history
            .before(&v, at)
            .iter()
            .map(|e| e.subject_id.as_str())
            .filter(|s| mine.contains(s))
            .collect();
        graph.set_edge(user, &v, common.len() as u64);
    }
}

/// How one account attaches to a set of other accounts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Connectivity {
    pub pct_connected: f64,
    pub avg_weight_to_u: f64,
    pub weight_ratio: f64,
    pub triangle_count: f64,
    pub triangle_avg_weight: f64,
}

fn connectivity_against(g: &CoActivityGraph, u: usize, members: &[usize]) -> Connectivity {
    let member_set: BTreeSet<usize> = members.iter().copied().filter(|&m| m != u).collect();
    if member_set.is_empty() {
        return Connectivity::default();
    }
    let neigh: Vec<(usize, u64)> = g.adj[u]
        .iter()
        .filter(|(j, _)| member_set.contains(j))
        .map(|(&j, &w)| (j, w))
        .collect();
    let deg = neigh.len();
    if deg == 0 {
        return Connectivity::default();
    }
    let pct_connected = deg as f64 / member_set.len() as f64;
    let avg_weight_to_u = neigh.iter().map(|&(_, w)| w as f64).sum::<f64>() / deg as f64;

    let (mut e_sum, mut e_cnt) = (0u64, 0u64);
    for &a in &member_set {
        for (&b, &w) in &g.adj[a] {
            if a < b && member_set.contains(&b) {
                e_sum += w;
                e_cnt += 1;
            }
        }
    }
    let weight_ratio = if e_cnt == 0 {
        1.0
    } else {
        avg_weight_to_u / (e_sum as f64 / e_cnt as f64)
    };

    let mut triangles = 0u64;
    let mut edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (x, &(a, wa)) in neigh.iter().enumerate() {
        for &(b, wb) in &neigh[x + 1..] {
            if let Some(&wab) = g.adj[a].get(&b) {
                triangles += 1;
                edges.insert((u.min(a), u.max(a)), wa);
                edges.insert((u.min(b), u.max(b)), wb);
                edges.insert((a.min(b), a.max(b)), wab);
            }
        }
    }
    let triangle_avg_weight = if edges.is_empty() {
        0.0
    } else {
        edges.values().sum::<u64>() as f64 / edges.len() as f64
    };

    Connectivity {
        pct_connected,
        avg_weight_to_u,
        weight_ratio,
        triangle_count: triangles as f64,
        triangle_avg_weight,
    }
}

/// `user`'s connectivity to every other node of `g`. Zero if absent.
pub fn connectivity_features(g: &CoActivityGraph, user: &str) -> Connectivity {
    let Some(&u) = g.index.get(user) else {
        return Connectivity::default();
    };
    let all: Vec<usize> = (0..g.nodes.len()).collect();
    connectivity_against(g, u, &all)
}

/// Connectivity of `user` to the min-cut component (of the graph without
/// `user`) it attaches to best: highest `pct_connected`, then highest
/// average weight, then largest component, then lowest member id.
pub fn best_fit_features(g: &CoActivityGraph, user: &str, theta: f64) -> Connectivity {
    let Some(&u) = g.index.get(user) else {
        return Connectivity::default();
    };
    let components = g.partition(theta, Some(user));
    let mut best: Option<(Connectivity, usize)> = None;
    for comp in components {
        let members: Vec<usize> = comp.iter().map(|id| g.index[id]).collect();
        let c = connectivity_against(g, u, &members);
        let better = match &best {
            None => true,
            Some((b, size)) => {
                (c.pct_connected, c.avg_weight_to_u, members.len())
                    .partial_cmp(&(b.pct_connected, b.avg_weight_to_u, *size))
                    == Some(std::cmp::Ordering::Greater)
            }
        };
        if better {
            best = Some((c, members.len()));
        }
    }
    best.map(|(c, _)| c).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccountFeatures {
    pub n_prior_activities: f64,
    /// Seconds.
    pub account_age: f64,
    pub expertise: f64,
}

/// Counts over `user`'s history strictly before `at`. `created` and `at` are
/// in milliseconds.
pub fn account_features(
    user: &str,
    category: &str,
    at: u64,
    created: u64,
    history: &ActivityHistory,
) -> AccountFeatures {
    let prior = history.before(user, at);
    AccountFeatures {
        n_prior_activities: prior.len() as f64,
        account_age: at.saturating_sub(created) as f64 / 1000.0,
        expertise: prior.iter().filter(|e| e.category == category).count() as f64,
    }
}

/// Everything the classifier sees about one activity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub connectivity: Connectivity,
    pub best_fit: Connectivity,
    pub account: AccountFeatures,
}

impl FeatureVector {
    pub const DIM: usize = 13;

    pub const NAMES: [&'static str; Self::DIM] = [
        "pct_connected",
        "avg_weight_to_u",
        "weight_ratio",
        "triangle_count",
        "triangle_avg_weight",
        "bf_pct_connected",
        "bf_avg_weight_to_u",
        "bf_weight_ratio",
        "bf_triangle_count",
        "bf_triangle_avg_weight",
        "n_prior_activities",
        "account_age",
        "expertise",
    ];

    pub fn to_array(&self) -> [f64; Self::DIM] {
        let c = &self.connectivity;
        let b = &self.best_fit;
        let a = &self.account;
        [
            c.pct_connected,
            c.avg_weight_to_u,
            c.weight_ratio,
            c.triangle_count,
            c.triangle_avg_weight,
            b.pct_connected,
            b.avg_weight_to_u,
            b.weight_ratio,
            b.triangle_count,
            b.triangle_avg_weight,
            a.n_prior_activities,
            a.account_age,
            a.expertise,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub theta: f64,
    /// Zero the account age, for logs whose timestamps are unreliable.
    pub drop_temporal: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            theta: DEFAULT_THETA,
            drop_temporal: false,
        }
    }
}

/// Who is acting on what, and when.
#[derive(Clone, Copy, Debug)]
pub struct ActivityContext<'a> {
    pub user: &'a str,
    pub category: &'a str,
    pub at: u64,
    pub account_created: u64,
}

/// Join the acting account into the subject graph and extract its features.
/// The activity itself is not added to `history`.
pub fn extract_features(
    graph: &mut CoActivityGraph,
    history: &ActivityHistory,
    ctx: ActivityContext<'_>,
    cfg: &FeatureConfig,
) -> FeatureVector {
    update_graph(graph, ctx.user, history, ctx.at);
    let mut account = account_features(ctx.user, ctx.category, ctx.at, ctx.account_created, history);
    if cfg.drop_temporal {
        account.account_age = 0.0;
    }
    FeatureVector {
        connectivity: connectivity_features(graph, ctx.user),
        best_fit: best_fit_features(graph, ctx.user, cfg.theta),
        account,
    }
}

/// Per-subject graphs plus the shared history, for offline feature passes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CoActivityIndex {
    pub graphs: HashMap<String, CoActivityGraph>,
    pub history: ActivityHistory,
}

impl CoActivityIndex {
    /// Extract features for an activity, then record it.
    pub fn observe(&mut self, subject: &str, ctx: ActivityContext<'_>, cfg: &FeatureConfig) -> FeatureVector {
        let graph = self
            .graphs
            .entry(subject.to_string())
            .or_insert_with(|| CoActivityGraph::new(subject));
        let f = extract_features(graph, &self.history, ctx, cfg);
        self.history.record(
            ctx.user,
            HistoryEntry {
                subject_id: subject.to_string(),
                timestamp: ctx.at,
                category: ctx.category.to_string(),
            },
        );
        f
    }
}
