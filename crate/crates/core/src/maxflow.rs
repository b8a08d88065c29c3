//! Exact s-t max-flow / min-cut over real-valued capacities.
//!
//! The solver grows two search trees (from the source and from the sink),
//! augments along the path where they meet and repairs the trees by
//! adoption instead of restarting the search. This reuse is what makes the
//! method fast on the short-path grid graphs produced by GrabCut.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Residual capacities at or below this value count as saturated.
pub const EPS: f64 = 1e-9;

const BRUTE_FORCE_MAX_NODES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Sink,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub cap_uv: f64,
    pub cap_vu: f64,
}

/// Capacitated s-t graph. Node `i` has a source link and a sink link; pairwise
/// edges carry independent capacities in each direction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowNetwork {
    terminal: Vec<(f64, f64)>,
    edges: Vec<Edge>,
}

fn check_cap(c: f64) {
    assert!(c.is_finite() && c >= 0.0, "capacity must be finite and >= 0, got {c}");
}

impl FlowNetwork {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            terminal: vec![(0.0, 0.0); n_nodes],
            edges: Vec::new(),
        }
    }

    pub fn with_capacity(n_nodes: usize, n_edges: usize) -> Self {
        Self {
            terminal: vec![(0.0, 0.0); n_nodes],
            edges: Vec::with_capacity(n_edges),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.terminal.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// `(cap_source, cap_sink)` of node `i`.
    pub fn terminal(&self, i: usize) -> (f64, f64) {
        self.terminal[i]
    }

    /// Adds to the terminal capacities of node `i`.
    ///
    /// # Panics
    /// On a negative or non-finite capacity or an out-of-range node.
    pub fn add_terminal(&mut self, i: usize, cap_source: f64, cap_sink: f64) {
        check_cap(cap_source);
        check_cap(cap_sink);
        let t = &mut self.terminal[i];
        t.0 += cap_source;
        t.1 += cap_sink;
    }

    /// # Panics
    /// On a self-loop, an out-of-range node, or an invalid capacity.
    pub fn add_edge(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) {
        assert!(u != v, "self-loop on node {u}");
        assert!(u < self.n_nodes() && v < self.n_nodes(), "node id out of range");
        check_cap(cap_uv);
        check_cap(cap_vu);
        self.edges.push(Edge { u, v, cap_uv, cap_vu });
    }

    /// Capacity of the cut induced by `side`.
    pub fn cut_value(&self, side: &[Side]) -> f64 {
        let mut value = 0.0;
        for (i, &(cs, ck)) in self.terminal.iter().enumerate() {
            value += match side[i] {
                Side::Source => ck,
                Side::Sink => cs,
            };
        }
        for e in &self.edges {
            match (side[e.u], side[e.v]) {
                (Side::Source, Side::Sink) => value += e.cap_uv,
                (Side::Sink, Side::Source) => value += e.cap_vu,
                _ => {}
            }
        }
        value
    }
}

/// Result of a min-cut computation, including the maximum flow that certifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct MinCut {
    pub flow: f64,
    pub side: Vec<Side>,
    /// Flow on each source link.
    pub source_flow: Vec<f64>,
    /// Flow on each sink link.
    pub sink_flow: Vec<f64>,
    /// Net flow `u -> v` on each pairwise edge, in network edge order.
    pub edge_flow: Vec<f64>,
}

const NONE: u32 = u32::MAX;
const TERMINAL: u32 = u32::MAX - 1;
const ORPHAN: u32 = u32::MAX - 2;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tree {
    Free,
    S,
    T,
}

struct Solver {
    // arcs: 2e is u->v, 2e+1 is v->u; sister(a) = a ^ 1
    head: Vec<u32>,
    next: Vec<u32>,
    r_cap: Vec<f64>,
    first: Vec<u32>,
    parent: Vec<u32>,
    tree: Vec<Tree>,
    tr_cap: Vec<f64>,
    ts: Vec<u64>,
    dist: Vec<u32>,
    in_queue: Vec<bool>,
    active: VecDeque<u32>,
    orphans: VecDeque<u32>,
    s_aug: Vec<f64>,
    t_aug: Vec<f64>,
    time: u64,
    flow: f64,
}

#[inline]
fn sister(a: u32) -> u32 {
    a ^ 1
}

impl Solver {
    fn new(net: &FlowNetwork) -> Self {
        let n = net.n_nodes();
        let m = net.edges.len() * 2;
        let mut s = Solver {
            head: Vec::with_capacity(m),
            next: vec![NONE; m],
            r_cap: Vec::with_capacity(m),
            first: vec![NONE; n],
            parent: vec![NONE; n],
            tree: vec![Tree::Free; n],
            tr_cap: vec![0.0; n],
            ts: vec![0; n],
            dist: vec![0; n],
            in_queue: vec![false; n],
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            s_aug: vec![0.0; n],
            t_aug: vec![0.0; n],
            time: 0,
            flow: 0.0,
        };
        for e in &net.edges {
            s.head.push(e.v as u32);
            s.r_cap.push(e.cap_uv);
            s.head.push(e.u as u32);
            s.r_cap.push(e.cap_vu);
        }
        // adjacency lists built in reverse so iteration follows insertion order
        for a in (0..m as u32).rev() {
            let tail = s.head[sister(a) as usize] as usize;
            s.next[a as usize] = s.first[tail];
            s.first[tail] = a;
        }
        for (i, &(cs, ck)) in net.terminal.iter().enumerate() {
            s.flow += cs.min(ck);
            let t = cs - ck;
            s.tr_cap[i] = t;
            if t > EPS {
                s.tree[i] = Tree::S;
                s.parent[i] = TERMINAL;
                s.dist[i] = 1;
                s.set_active(i as u32);
            } else if t < -EPS {
                s.tree[i] = Tree::T;
                s.parent[i] = TERMINAL;
                s.dist[i] = 1;
                s.set_active(i as u32);
            }
        }
        s
    }

    fn set_active(&mut self, i: u32) {
        if !self.in_queue[i as usize] {
            self.in_queue[i as usize] = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<u32> {
        while let Some(i) = self.active.pop_front() {
            self.in_queue[i as usize] = false;
            if self.parent[i as usize] != NONE {
                return Some(i);
            }
        }
        None
    }

    fn arcs(&self, i: u32) -> ArcIter<'_> {
        ArcIter {
            next: &self.next,
            cur: self.first[i as usize],
        }
    }

    /// Expands the tree of `i`; returns an S->T arc if the trees touch.
    fn grow(&mut self, i: u32) -> Option<u32> {
        let iu = i as usize;
        let mut a = self.first[iu];
        while a != NONE {
            let au = a as usize;
            let j = self.head[au];
            let ju = j as usize;
            match self.tree[iu] {
                Tree::S if self.r_cap[au] > EPS => match self.tree[ju] {
                    Tree::Free => {
                        self.tree[ju] = Tree::S;
                        self.parent[ju] = sister(a);
                        self.ts[ju] = self.ts[iu];
                        self.dist[ju] = self.dist[iu] + 1;
                        self.set_active(j);
                    }
                    Tree::T => return Some(a),
                    Tree::S => {
                        if self.ts[ju] <= self.ts[iu] && self.dist[ju] > self.dist[iu] {
                            self.parent[ju] = sister(a);
                            self.ts[ju] = self.ts[iu];
                            self.dist[ju] = self.dist[iu] + 1;
                        }
                    }
                },
                Tree::T if self.r_cap[sister(a) as usize] > EPS => match self.tree[ju] {
                    Tree::Free => {
                        self.tree[ju] = Tree::T;
                        self.parent[ju] = sister(a);
                        self.ts[ju] = self.ts[iu];
                        self.dist[ju] = self.dist[iu] + 1;
                        self.set_active(j);
                    }
                    Tree::S => return Some(sister(a)),
                    Tree::T => {
                        if self.ts[ju] <= self.ts[iu] && self.dist[ju] > self.dist[iu] {
                            self.parent[ju] = sister(a);
                            self.ts[ju] = self.ts[iu];
                            self.dist[ju] = self.dist[iu] + 1;
                        }
                    }
                },
                _ => {}
            }
            a = self.next[au];
        }
        None
    }

    fn make_orphan(&mut self, i: u32) {
        self.parent[i as usize] = ORPHAN;
        self.orphans.push_front(i);
    }

    /// Pushes the bottleneck flow along the path through `mid` (S side -> T side).
    fn augment(&mut self, mid: u32) {
        let mut bottleneck = self.r_cap[mid as usize];
        // source half
        let mut i = self.head[sister(mid) as usize];
        loop {
            let a = self.parent[i as usize];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[sister(a) as usize]);
            i = self.head[a as usize];
        }
        bottleneck = bottleneck.min(self.tr_cap[i as usize]);
        // sink half
        let mut i = self.head[mid as usize];
        loop {
            let a = self.parent[i as usize];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a as usize]);
            i = self.head[a as usize];
        }
        bottleneck = bottleneck.min(-self.tr_cap[i as usize]);

        self.r_cap[mid as usize] -= bottleneck;
        self.r_cap[sister(mid) as usize] += bottleneck;

        let mut i = self.head[sister(mid) as usize];
        loop {
            let a = self.parent[i as usize];
            if a == TERMINAL {
                break;
            }
            let toward = sister(a) as usize;
            self.r_cap[a as usize] += bottleneck;
            self.r_cap[toward] -= bottleneck;
            let up = self.head[a as usize];
            if self.r_cap[toward] <= EPS {
                self.make_orphan(i);
            }
            i = up;
        }
        self.tr_cap[i as usize] -= bottleneck;
        self.s_aug[i as usize] += bottleneck;
        if self.tr_cap[i as usize] <= EPS {
            self.make_orphan(i);
        }

        let mut i = self.head[mid as usize];
        loop {
            let a = self.parent[i as usize];
            if a == TERMINAL {
                break;
            }
            self.r_cap[sister(a) as usize] += bottleneck;
            self.r_cap[a as usize] -= bottleneck;
            let up = self.head[a as usize];
            if self.r_cap[a as usize] <= EPS {
                self.make_orphan(i);
            }
            i = up;
        }
        self.tr_cap[i as usize] += bottleneck;
        self.t_aug[i as usize] += bottleneck;
        if self.tr_cap[i as usize] >= -EPS {
            self.make_orphan(i);
        }

        self.flow += bottleneck;
    }

    /// Distance from `j` to its terminal if its path is intact, marking the path.
    fn origin_distance(&mut self, start: u32) -> Option<u32> {
        let mut j = start;
        let mut d: u32 = 0;
        loop {
            let ju = j as usize;
            if self.ts[ju] == self.time {
                d += self.dist[ju];
                break;
            }
            let a = self.parent[ju];
            d += 1;
            if a == TERMINAL {
                self.ts[ju] = self.time;
                self.dist[ju] = 1;
                break;
            }
            if a == ORPHAN {
                return None;
            }
            j = self.head[a as usize];
        }
        let found = d;
        let mut j = start;
        while self.ts[j as usize] != self.time {
            self.ts[j as usize] = self.time;
            self.dist[j as usize] = d;
            d -= 1;
            j = self.head[self.parent[j as usize] as usize];
        }
        Some(found)
    }

    fn adopt(&mut self, i: u32) {
        let iu = i as usize;
        let tree = self.tree[iu];
        let mut best = NONE;
        let mut d_min = u32::MAX;
        let mut a0 = self.first[iu];
        while a0 != NONE {
            // residual toward i's terminal side: S needs j->i, T needs i->j
            let usable = match tree {
                Tree::S => self.r_cap[sister(a0) as usize] > EPS,
                _ => self.r_cap[a0 as usize] > EPS,
            };
            if usable {
                let j = self.head[a0 as usize];
                if self.tree[j as usize] == tree && self.parent[j as usize] != NONE {
                    if let Some(d) = self.origin_distance(j) {
                        if d < d_min {
                            best = a0;
                            d_min = d;
                        }
                    }
                }
            }
            a0 = self.next[a0 as usize];
        }

        if best != NONE {
            self.parent[iu] = best;
            self.ts[iu] = self.time;
            self.dist[iu] = d_min + 1;
            return;
        }

        let arcs: Vec<u32> = self.arcs(i).collect();
        for a0 in arcs {
            let j = self.head[a0 as usize];
            let ju = j as usize;
            if self.tree[ju] != tree || self.parent[ju] == NONE {
                continue;
            }
            let feeds = match tree {
                Tree::S => self.r_cap[sister(a0) as usize] > EPS,
                _ => self.r_cap[a0 as usize] > EPS,
            };
            if feeds {
                self.set_active(j);
            }
            let pa = self.parent[ju];
            if pa != TERMINAL && pa != ORPHAN && self.head[pa as usize] == i {
                self.parent[ju] = ORPHAN;
                self.orphans.push_back(j);
            }
        }
        self.tree[iu] = Tree::Free;
        self.parent[iu] = NONE;
    }

    fn run(&mut self) {
        while let Some(i) = self.next_active() {
            if let Some(mid) = self.grow(i) {
                self.time += 1;
                self.augment(mid);
                while let Some(o) = self.orphans.pop_front() {
                    self.adopt(o);
                }
                // keep expanding from i while it is still in a tree
                if self.parent[i as usize] != NONE && !self.in_queue[i as usize] {
                    self.in_queue[i as usize] = true;
                    self.active.push_front(i);
                }
            }
        }
    }

    /// Nodes reachable from the source in the residual graph are Source; all others Sink.
    fn sides(&self) -> Vec<Side> {
        let n = self.first.len();
        let mut side = vec![Side::Sink; n];
        let mut queue: VecDeque<u32> = VecDeque::new();
        for i in 0..n {
            if self.tr_cap[i] > EPS {
                side[i] = Side::Source;
                queue.push_back(i as u32);
            }
        }
        while let Some(i) = queue.pop_front() {
            for a in self.arcs(i) {
                let j = self.head[a as usize] as usize;
                if side[j] == Side::Sink && self.r_cap[a as usize] > EPS {
                    side[j] = Side::Source;
                    queue.push_back(j as u32);
                }
            }
        }
        side
    }
}

struct ArcIter<'a> {
    next: &'a [u32],
    cur: u32,
}

impl Iterator for ArcIter<'_> {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        if self.cur == NONE {
            return None;
        }
        let a = self.cur;
        self.cur = self.next[a as usize];
        Some(a)
    }
}

/// Computes a maximum flow and the minimum cut it certifies.
pub fn min_cut(net: &FlowNetwork) -> MinCut {
    let mut solver = Solver::new(net);
    solver.run();
    let side = solver.sides();
    let mut source_flow = Vec::with_capacity(net.n_nodes());
    let mut sink_flow = Vec::with_capacity(net.n_nodes());
    for (i, &(cs, ck)) in net.terminal.iter().enumerate() {
        let direct = cs.min(ck);
        source_flow.push(direct + solver.s_aug[i]);
        sink_flow.push(direct + solver.t_aug[i]);
    }
    let edge_flow = net
        .edges
        .iter()
        .enumerate()
        .map(|(e, edge)| edge.cap_uv - solver.r_cap[2 * e])
        .collect();
    MinCut {
        flow: solver.flow,
        side,
        source_flow,
        sink_flow,
        edge_flow,
    }
}

/// Exhaustive minimum cut over all `2^n` labelings (test oracle).
///
/// Returns the lexicographically smallest minimizer with `Source < Sink`
/// and node 0 most significant.
pub fn brute_force_min_cut(net: &FlowNetwork) -> Result<(f64, Vec<Side>)> {
    let n = net.n_nodes();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(Error::TooLarge(n));
    }
    let decode = |mask: u32| -> Vec<Side> {
        (0..n)
            .map(|i| {
                if mask >> (n - 1 - i) & 1 == 1 {
                    Side::Sink
                } else {
                    Side::Source
                }
            })
            .collect()
    };
    let mut best = (f64::INFINITY, 0u32);
    for mask in 0..(1u32 << n) {
        let v = net.cut_value(&decode(mask));
        if v < best.0 {
            best = (v, mask);
        }
    }
    Ok((best.0, decode(best.1)))
}
