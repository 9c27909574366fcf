//! Hierarchical navigable small-world graph over inner-product similarity.
//!
//! Built sequentially from a seeded RNG, so the same vectors and parameters
//! always give the same graph. Neighbour lists use the diversity heuristic:
//! a candidate is kept only if it is closer to the inserted node than to any
//! neighbour already kept, topped up with the closest rejected ones.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Neighbours per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f64,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct Hnsw {
    params: HnswParams,
    /// links[node][layer] = neighbour ids
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

fn sim_rows<T: Scalar>(v: &ArrayView2<T>, a: u32, b: u32) -> f64 {
    let ra = v.row(a as usize);
    let rb = v.row(b as usize);
    ra.iter()
        .zip(rb.iter())
        .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

fn sim_query<T: Scalar>(v: &ArrayView2<T>, q: &[f64], id: u32) -> f64 {
    v.row(id as usize)
        .iter()
        .zip(q)
        .map(|(x, y)| x.to_f64_lossy() * y)
        .sum()
}

impl Hnsw {
    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn build<T: Scalar>(vectors: ArrayView2<T>, params: HnswParams) -> Self {
        let m = params.m.max(2);
        let level_mult = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut g = Hnsw {
            params,
            links: Vec::with_capacity(vectors.nrows()),
            entry: None,
            max_level: 0,
        };
        let mut q = vec![0.0; vectors.ncols()];
        for i in 0..vectors.nrows() as u32 {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let level = ((-u.ln() * level_mult).floor() as usize).min(16);
            g.links.push(vec![Vec::new(); level + 1]);
            let Some(entry) = g.entry else {
                g.entry = Some(i);
                g.max_level = level;
                continue;
            };
            for (slot, v) in q.iter_mut().zip(vectors.row(i as usize).iter()) {
                *slot = v.to_f64_lossy();
            }
            let mut ep = vec![Scored { sim: sim_query(&vectors, &q, entry), id: entry }];
            for layer in (level + 1..=g.max_level).rev() {
                ep = g.search_layer(&vectors, &q, &ep, 1, layer, &|_| true);
            }
            for layer in (0..=level.min(g.max_level)).rev() {
                let found = g.search_layer(&vectors, &q, &ep, params.ef_construction.max(m), layer, &|_| true);
                let chosen = select_neighbours(&vectors, &found, m);
                let cap = if layer == 0 { 2 * m } else { m };
                for &nb in &chosen {
                    let list = &mut g.links[nb as usize][layer];
                    list.push(i);
                    if list.len() > cap {
                        let mut scored: Vec<Scored> = list
                            .iter()
                            .map(|&x| Scored { sim: sim_rows(&vectors, nb, x), id: x })
                            .collect();
                        scored.sort_by(|a, b| b.cmp(a));
                        *list = select_neighbours(&vectors, &scored, cap);
                    }
                }
                g.links[i as usize][layer] = chosen;
                ep = found;
            }
            if level > g.max_level {
                g.max_level = level;
                g.entry = Some(i);
            }
        }
        g
    }

    /// Beam search on one layer. Every reachable node is expanded as usual,
    /// but only nodes passing `accept` enter the result set. Returns up to
    /// `ef` results, best first.
    fn search_layer<T: Scalar>(
        &self,
        vectors: &ArrayView2<T>,
        q: &[f64],
        entry: &[Scored],
        ef: usize,
        layer: usize,
        accept: &dyn Fn(u32) -> bool,
    ) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        let mut frontier: BinaryHeap<Scored> = BinaryHeap::new();
        // min-heap of accepted results via Reverse ordering
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
        for &s in entry {
            if std::mem::replace(&mut visited[s.id as usize], true) {
                continue;
            }
            frontier.push(s);
            if accept(s.id) {
                results.push(std::cmp::Reverse(s));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(cur) = frontier.pop() {
            if results.len() >= ef {
                if let Some(worst) = results.peek() {
                    if cur.sim < worst.0.sim {
                        break;
                    }
                }
            }
            let Some(neighbours) = self.links[cur.id as usize].get(layer) else {
                continue;
            };
            for &nb in neighbours {
                if std::mem::replace(&mut visited[nb as usize], true) {
                    continue;
                }
                let s = Scored { sim: sim_query(vectors, q, nb), id: nb };
                let full = results.len() >= ef;
                let worst = results.peek().map(|w| w.0.sim).unwrap_or(f64::NEG_INFINITY);
                if !full || s.sim > worst {
                    frontier.push(s);
                    if accept(nb) {
                        results.push(std::cmp::Reverse(s));
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Up to `ef` accepted node ids near `q`, best first.
    pub fn search<T: Scalar>(
        &self,
        vectors: ArrayView2<T>,
        q: &[f64],
        ef: usize,
        accept: &dyn Fn(u32) -> bool,
    ) -> Vec<u32> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut ep = vec![Scored { sim: sim_query(&vectors, q, entry), id: entry }];
        for layer in (1..=self.max_level).rev() {
            ep = self.search_layer(&vectors, q, &ep, 1, layer, &|_| true);
        }
        self.search_layer(&vectors, q, &ep, ef, 0, accept)
            .into_iter()
            .map(|s| s.id)
            .collect()
    }
}

/// `candidates` sorted best first.
fn select_neighbours<T: Scalar>(vectors: &ArrayView2<T>, candidates: &[Scored], m: usize) -> Vec<u32> {
    let mut chosen: Vec<u32> = Vec::with_capacity(m);
    let mut rejected = Vec::new();
    for c in candidates {
        if chosen.len() >= m {
            break;
        }
        if chosen.iter().all(|&x| sim_rows(vectors, c.id, x) < c.sim) {
            chosen.push(c.id);
        } else {
            rejected.push(c.id);
        }
    }
    for id in rejected {
        if chosen.len() >= m {
            break;
        }
        chosen.push(id);
    }
    chosen
}
