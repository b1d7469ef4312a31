//! Top-K similar-episode lookup over the pre-trained content and KG
//! embedding spaces, by Euclidean distance.
//!
//! Exact mode scans every row. Approximate mode builds a forest of
//! random-hyperplane partition trees (each split is the perpendicular
//! bisector of two sampled points), gathers candidates from the most
//! promising leaves across all trees, and reranks them exactly.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::DatasetBundle;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{dot, squared_distance};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Content,
    Kg,
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Content => "content",
            Space::Kg => "kg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    #[default]
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub leaf_size: usize,
    /// Minimum number of candidates gathered per query before reranking;
    /// `None` means `trees · K · 8`.
    pub search_k: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 16,
            leaf_size: 16,
            search_k: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<u32>),
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
struct Forest {
    params: ForestParams,
    trees: Vec<Tree>,
}

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    space: Space,
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    id_rank: Vec<usize>,
    positions: HashMap<String, usize>,
    forest: Option<Forest>,
}

/// Heap entry ordered by priority, then by (tree, node) for determinism.
#[derive(Debug, PartialEq)]
struct Probe {
    priority: f64,
    tree: usize,
    node: usize,
}

impl Eq for Probe {}

impl PartialOrd for Probe {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Probe {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn build_tree(index: &NeighborIndex, leaf_size: usize, rng: &mut rng::Rng) -> Tree {
    let mut nodes = vec![Node::Leaf(Vec::new())];
    let mut stack = vec![(0usize, (0..index.ids.len() as u32).collect::<Vec<u32>>())];
    while let Some((slot, items)) = stack.pop() {
        if items.len() <= leaf_size.max(1) {
            nodes[slot] = Node::Leaf(items);
            continue;
        }
        let mut split = None;
        for _ in 0..8 {
            let a = items[rng.gen_range(0..items.len())] as usize;
            let b = items[rng.gen_range(0..items.len())] as usize;
            let (pa, pb) = (index.row(a), index.row(b));
            let normal: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x - y).collect();
            if normal.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mid: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| 0.5 * (x + y)).collect();
            let offset = dot(&normal, &mid);
            let (l, r): (Vec<u32>, Vec<u32>) = items
                .iter()
                .partition(|&&i| dot(&normal, index.row(i as usize)) > offset);
            if !l.is_empty() && !r.is_empty() {
                split = Some((normal, offset, l, r));
                break;
            }
        }
        let (normal, offset, l, r) = match split {
            Some(s) => s,
            None => {
                // duplicate points: fall back to an arbitrary balanced split
                let mut items = items;
                let r = items.split_off(items.len() / 2);
                (vec![0.0; index.dim], 0.0, items, r)
            }
        };
        let left = nodes.len();
        nodes.push(Node::Leaf(Vec::new()));
        let right = nodes.len();
        nodes.push(Node::Leaf(Vec::new()));
        nodes[slot] = Node::Split {
            normal,
            offset,
            left,
            right,
        };
        stack.push((right, r));
        stack.push((left, l));
    }
    Tree { nodes }
}

impl NeighborIndex {
    /// Builds an index over arbitrary equally sized vectors.
    pub fn from_vectors(
        space: Space,
        ids: Vec<String>,
        vectors: &[Vec<f64>],
        mode: IndexMode,
        params: ForestParams,
        seed: u64,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Argument(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if !vectors.is_empty() && dim == 0 {
            return Err(Error::Schema(format!("episode embedding block `{space}` is empty")));
        }
        let mut data = Vec::with_capacity(vectors.len() * dim);
        for (id, v) in ids.iter().zip(vectors) {
            if v.len() != dim {
                return Err(Error::Schema(format!(
                    "`{id}`: {space} embedding has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            data.extend_from_slice(v);
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate id `{id}` in index")));
            }
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut id_rank = vec![0; ids.len()];
        for (r, &i) in order.iter().enumerate() {
            id_rank[i] = r;
        }
        let mut index = NeighborIndex {
            space,
            ids,
            dim,
            data,
            id_rank,
            positions,
            forest: None,
        };
        if mode == IndexMode::Approximate {
            if params.trees == 0 {
                return Err(Error::Argument("approximate index needs at least one tree".into()));
            }
            let trees = (0..params.trees)
                .map(|t| {
                    build_tree(
                        &index,
                        params.leaf_size,
                        &mut rng::derived(seed, Stream::Index, t as u64, 0),
                    )
                })
                .collect();
            index.forest = Some(Forest { params, trees });
        }
        Ok(index)
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn mode(&self) -> IndexMode {
        if self.forest.is_some() {
            IndexMode::Approximate
        } else {
            IndexMode::Exact
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.positions
            .get(id)
            .copied()
            .ok_or_else(|| Error::lookup("episode", id))
    }

    fn rank_candidates(&self, query: usize, candidates: impl Iterator<Item = usize>, k: usize) -> Vec<(f64, usize)> {
        let q = self.row(query);
        let mut scored: Vec<(f64, usize)> = candidates
            .filter(|&i| i != query)
            .map(|i| (squared_distance(q, self.row(i)), i))
            .collect();
        let cmp =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(self.id_rank[a.1].cmp(&self.id_rank[b.1]));
        if scored.len() > k {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
    }

    fn forest_candidates(&self, forest: &Forest, query: usize, k: usize) -> Vec<usize> {
        let q = self.row(query);
        let search_k = forest.params.search_k.unwrap_or(forest.params.trees * k * 8).max(k + 1);
        let mut heap: BinaryHeap<Probe> = (0..forest.trees.len())
            .map(|t| Probe {
                priority: f64::INFINITY,
                tree: t,
                node: 0,
            })
            .collect();
        let mut seen = vec![false; self.ids.len()];
        let mut out = Vec::new();
        while out.len() < search_k {
            let Some(p) = heap.pop() else { break };
            match &forest.trees[p.tree].nodes[p.node] {
                Node::Leaf(items) => {
                    for &i in items {
                        let i = i as usize;
                        if !seen[i] {
                            seen[i] = true;
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let m = dot(normal, q) - offset;
                    heap.push(Probe {
                        priority: p.priority.min(m),
                        tree: p.tree,
                        node: *left,
                    });
                    heap.push(Probe {
                        priority: p.priority.min(-m),
                        tree: p.tree,
                        node: *right,
                    });
                }
            }
        }
        out
    }

    /// Up to `k` nearest rows to row `query`, excluding itself, with squared
    /// distances, ascending by distance then by id.
    pub fn neighbors_of(&self, query: usize, k: usize) -> Vec<(f64, usize)> {
        match &self.forest {
            None => self.rank_candidates(query, 0..self.ids.len(), k),
            Some(forest) => {
                let cands = self.forest_candidates(forest, query, k);
                self.rank_candidates(query, cands.into_iter(), k)
            }
        }
    }
}

/// Index over one embedding space of the bundle's episode catalog. Row `i`
/// is episode index `i`.
pub fn build_index(
    bundle: &DatasetBundle,
    space: Space,
    mode: IndexMode,
    params: ForestParams,
    seed: u64,
) -> Result<NeighborIndex> {
    let dims = bundle.header().dims;
    let dim = match space {
        Space::Content => dims.content,
        Space::Kg => dims.kg,
    };
    if dim == 0 {
        return Err(Error::Schema(format!("episodes carry no {space} embedding block")));
    }
    let ids = bundle.episodes().iter().map(|e| e.episode_id.clone()).collect();
    let vectors: Vec<Vec<f64>> = bundle
        .episodes()
        .iter()
        .map(|e| match space {
            Space::Content => e.content_embedding.clone(),
            Space::Kg => e.kg_embedding.clone(),
        })
        .collect();
    NeighborIndex::from_vectors(space, ids, &vectors, mode, params, seed)
}

/// The `k` nearest episodes to `episode_id` by L2 distance.
pub fn query_topk(index: &NeighborIndex, episode_id: &str, k: usize) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let q = index.position(episode_id)?;
    Ok(index
        .neighbors_of(q, k)
        .into_iter()
        .map(|(_, i)| index.ids[i].clone())
        .collect())
}

/// Precomputed top-K lists for every row of an index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborCache {
    pub space: Space,
    pub k: usize,
    lists: Vec<Vec<usize>>,
}

impl NeighborCache {
    pub fn build(index: &NeighborIndex, k: usize, exec: Exec) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        let lists = exec.map_range(index.len(), |q| {
            index.neighbors_of(q, k).into_iter().map(|(_, i)| i).collect()
        });
        Ok(NeighborCache {
            space: index.space,
            k,
            lists,
        })
    }

    pub fn from_lists(space: Space, k: usize, lists: Vec<Vec<usize>>) -> Self {
        NeighborCache { space, k, lists }
    }

    pub fn neighbors(&self, episode: usize) -> &[usize] {
        &self.lists[episode]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// `episode_id: id1,id2,...` per line, in catalog order.
    pub fn save(&self, path: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
        let eps = bundle.episodes();
        let mut text = String::new();
        for (e, list) in self.lists.iter().enumerate() {
            let ids: Vec<&str> = list.iter().map(|&i| eps[i].episode_id.as_str()).collect();
            let _ = writeln!(text, "{}: {}", eps[e].episode_id, ids.join(","));
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, bundle: &DatasetBundle, space: Space) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut lists = vec![Vec::new(); bundle.episodes().len()];
        let mut k = 0;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (head, tail) = line
                .split_once(':')
                .ok_or_else(|| parse_err("expected `episode_id: id1,id2,...`".into()))?;
            let e = bundle
                .episode_index(head.trim())
                .map_err(|e| parse_err(e.to_string()))?;
            let list = tail
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|id| bundle.episode_index(id).map_err(|e| parse_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            k = k.max(list.len());
            lists[e] = list;
        }
        Ok(NeighborCache { space, k, lists })
    }
}
