//! Multilevel graph bisection: heavy-edge matching coarsening, greedy graph
//! growing on the coarsest graph, and Fiduccia–Mattheyses refinement during
//! uncoarsening. K-way partitions are built by recursive bisection followed by
//! a balance-enforcing greedy boundary pass.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Stop coarsening once the graph has at most this many vertices.
const COARSEST_SIZE: usize = 80;
/// Stop coarsening when a level shrinks the graph by less than this factor.
const MIN_SHRINK: f64 = 0.92;
const GROW_TRIALS: usize = 6;
const FM_PASSES: usize = 8;
/// Consecutive non-improving moves tolerated inside one FM pass.
const FM_HILL_LIMIT: usize = 60;

/// Vertex- and edge-weighted undirected graph (symmetric CSR adjacency, no self loops).
#[derive(Clone, Debug)]
pub(crate) struct Graph {
    pub xadj: Vec<usize>,
    pub adj: Vec<usize>,
    pub ewgt: Vec<u64>,
    pub vwgt: Vec<u64>,
}

impl Graph {
    pub fn n(&self) -> usize {
        self.vwgt.len()
    }

    pub fn total_weight(&self) -> u64 {
        self.vwgt.iter().sum()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let span = self.xadj[v]..self.xadj[v + 1];
        self.adj[span.clone()]
            .iter()
            .copied()
            .zip(self.ewgt[span].iter().copied())
    }

    /// Subgraph induced by `verts`; vertex `t` of the result is `verts[t]`.
    pub fn induced(&self, verts: &[usize]) -> Graph {
        let mut local = vec![usize::MAX; self.n()];
        for (t, &v) in verts.iter().enumerate() {
            local[v] = t;
        }
        let mut xadj = Vec::with_capacity(verts.len() + 1);
        xadj.push(0);
        let mut adj = Vec::new();
        let mut ewgt = Vec::new();
        for &v in verts {
            for (u, w) in self.neighbors(v) {
                if local[u] != usize::MAX {
                    adj.push(local[u]);
                    ewgt.push(w);
                }
            }
            xadj.push(adj.len());
        }
        Graph {
            xadj,
            adj,
            ewgt,
            vwgt: verts.iter().map(|&v| self.vwgt[v]).collect(),
        }
    }

    pub fn edge_cut(&self, label: &[usize]) -> u64 {
        let mut cut = 0;
        for v in 0..self.n() {
            for (u, w) in self.neighbors(v) {
                if u > v && label[u] != label[v] {
                    cut += w;
                }
            }
        }
        cut
    }
}

fn coarsen(g: &Graph, rng: &mut ChaCha8Rng, max_vwgt: u64) -> (Graph, Vec<usize>) {
    let n = g.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mate = vec![usize::MAX; n];
    for &v in &order {
        if mate[v] != usize::MAX {
            continue;
        }
        let mut best: Option<(u64, usize)> = None;
        for (u, w) in g.neighbors(v) {
            if mate[u] != usize::MAX || g.vwgt[v] + g.vwgt[u] > max_vwgt {
                continue;
            }
            best = match best {
                Some((bw, bu)) if bw > w || (bw == w && bu < u) => Some((bw, bu)),
                _ => Some((w, u)),
            };
        }
        match best {
            Some((_, u)) => {
                mate[v] = u;
                mate[u] = v;
            }
            None => mate[v] = v,
        }
    }

    // isolated vertices never find a partner; pair them up so coarsening keeps shrinking
    let mut lone: Option<usize> = None;
    for v in 0..n {
        if mate[v] == v && g.xadj[v] == g.xadj[v + 1] {
            match lone.take() {
                Some(u) if g.vwgt[u] + g.vwgt[v] <= max_vwgt => {
                    mate[u] = v;
                    mate[v] = u;
                }
                _ => lone = Some(v),
            }
        }
    }

    let mut cmap = vec![usize::MAX; n];
    let mut nc = 0;
    for v in 0..n {
        if cmap[v] == usize::MAX {
            cmap[v] = nc;
            cmap[mate[v]] = nc;
            nc += 1;
        }
    }
    let mut members: Vec<[usize; 2]> = vec![[usize::MAX; 2]; nc];
    for v in 0..n {
        let slot = &mut members[cmap[v]];
        if slot[0] == usize::MAX {
            slot[0] = v;
        } else {
            slot[1] = v;
        }
    }

    let mut xadj = Vec::with_capacity(nc + 1);
    xadj.push(0);
    let mut adj = Vec::new();
    let mut ewgt = Vec::new();
    let mut vwgt = Vec::with_capacity(nc);
    let mut slot_of = vec![usize::MAX; nc];
    for (c, pair) in members.iter().enumerate() {
        let start = adj.len();
        let mut w_c = 0;
        for &v in pair.iter().filter(|&&v| v != usize::MAX) {
            w_c += g.vwgt[v];
            for (u, w) in g.neighbors(v) {
                let cu = cmap[u];
                if cu == c {
                    continue;
                }
                if slot_of[cu] == usize::MAX || slot_of[cu] < start {
                    slot_of[cu] = adj.len();
                    adj.push(cu);
                    ewgt.push(w);
                } else {
                    ewgt[slot_of[cu]] += w;
                }
            }
        }
        vwgt.push(w_c);
        xadj.push(adj.len());
    }
    (Graph { xadj, adj, ewgt, vwgt }, cmap)
}

/// Balance window for a two-way split: side 0 must weigh `target0 ± allowance`.
#[derive(Clone, Copy, Debug)]
struct Balance {
    target0: u64,
    allowance: u64,
}

impl Balance {
    fn violation(&self, w0: u64) -> u64 {
        w0.abs_diff(self.target0).saturating_sub(self.allowance)
    }
}

fn side_weight(g: &Graph, side: &[bool]) -> u64 {
    (0..g.n()).filter(|&v| !side[v]).map(|v| g.vwgt[v]).sum()
}

fn cut_of(g: &Graph, side: &[bool]) -> u64 {
    let mut cut = 0;
    for v in 0..g.n() {
        for (u, w) in g.neighbors(v) {
            if u > v && side[u] != side[v] {
                cut += w;
            }
        }
    }
    cut
}

/// Grows side 0 from `seed` by repeatedly absorbing the vertex with the best cut gain.
fn grow_region(g: &Graph, seed: usize, bal: Balance) -> Vec<bool> {
    let n = g.n();
    let mut side = vec![true; n];
    // conn[v] = weight of edges from v into side 0
    let mut conn = vec![0i64; n];
    let mut deg = vec![0i64; n];
    for (v, d) in deg.iter_mut().enumerate() {
        *d = g.neighbors(v).map(|(_, w)| w as i64).sum();
    }
    let mut w0 = 0u64;
    let mut next = Some(seed);
    while let Some(v) = next {
        if w0 > 0 && (w0 + g.vwgt[v]).abs_diff(bal.target0) > w0.abs_diff(bal.target0) {
            break;
        }
        side[v] = false;
        w0 += g.vwgt[v];
        for (u, w) in g.neighbors(v) {
            conn[u] += w as i64;
        }
        if w0 >= bal.target0 {
            break;
        }
        // gain of moving u into side 0: conn - (deg - conn)
        next = (0..n)
            .filter(|&u| side[u])
            .max_by_key(|&u| (conn[u] > 0, 2 * conn[u] - deg[u], Reverse(u)));
    }
    side
}

/// Fiduccia–Mattheyses refinement of a two-way split with rollback to the best prefix.
fn fm_refine(g: &Graph, side: &mut [bool], bal: Balance) {
    let n = g.n();
    if n < 2 {
        return;
    }
    for _ in 0..FM_PASSES {
        let mut gain = vec![0i64; n];
        for v in 0..n {
            for (u, w) in g.neighbors(v) {
                gain[v] += if side[u] != side[v] { w as i64 } else { -(w as i64) };
            }
        }
        let mut heaps: [BinaryHeap<(i64, Reverse<usize>)>; 2] = [BinaryHeap::new(), BinaryHeap::new()];
        for v in 0..n {
            heaps[side[v] as usize].push((gain[v], Reverse(v)));
        }
        let mut locked = vec![false; n];
        let mut w0 = side_weight(g, side);
        let start_cut = cut_of(g, side) as i64;
        let mut cut = start_cut;
        let mut moves: Vec<usize> = Vec::new();
        let mut best = (bal.violation(w0), cut, 0usize);
        let mut since_best = 0;

        loop {
            let mut pick: Option<(usize, i64)> = None;
            for from in [false, true] {
                let heap = &mut heaps[from as usize];
                while let Some(&(gv, Reverse(v))) = heap.peek() {
                    if locked[v] || side[v] != from || gain[v] != gv {
                        heap.pop();
                        continue;
                    }
                    let new_w0 = if from { w0 + g.vwgt[v] } else { w0 - g.vwgt[v] };
                    let legal = bal.violation(new_w0) == 0 || bal.violation(new_w0) < bal.violation(w0);
                    if legal && pick.is_none_or(|(_, pg)| gv > pg) {
                        pick = Some((v, gv));
                    }
                    break;
                }
            }
            let Some((v, gv)) = pick else { break };
            heaps[side[v] as usize].pop();
            let from = side[v];
            side[v] = !from;
            locked[v] = true;
            w0 = if from { w0 + g.vwgt[v] } else { w0 - g.vwgt[v] };
            cut -= gv;
            moves.push(v);
            gain[v] = -gv;
            for (u, w) in g.neighbors(v) {
                if locked[u] {
                    continue;
                }
                let delta = 2 * w as i64;
                gain[u] += if side[u] == side[v] { -delta } else { delta };
                heaps[side[u] as usize].push((gain[u], Reverse(u)));
            }
            let state = (bal.violation(w0), cut);
            if state < (best.0, best.1) {
                best = (state.0, state.1, moves.len());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > FM_HILL_LIMIT {
                    break;
                }
            }
        }
        for &v in &moves[best.2..] {
            side[v] = !side[v];
        }
        if best.2 == 0 {
            break;
        }
    }
}

/// Two-way split with side 0 receiving about `frac0` of the vertex weight.
/// Returns `true` for vertices on side 1.
pub(crate) fn bisect(g: &Graph, frac0: f64, tol: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let total = g.total_weight();
    let n = g.n();
    if n == 0 {
        return Vec::new();
    }
    let target0 = ((total as f64) * frac0).round() as u64;
    let allowance = ((total as f64) * tol).floor() as u64;

    let mut levels: Vec<(Graph, Vec<usize>)> = Vec::new();
    let max_vwgt = (1.5 * total as f64 / COARSEST_SIZE as f64).ceil().max(1.0) as u64;
    let mut current = g.clone();
    while current.n() > COARSEST_SIZE {
        let (coarse, cmap) = coarsen(&current, rng, max_vwgt);
        if coarse.n() as f64 > MIN_SHRINK * current.n() as f64 {
            break;
        }
        let fine = std::mem::replace(&mut current, coarse);
        levels.push((fine, cmap));
    }

    let coarse_max_v = current.vwgt.iter().copied().max().unwrap_or(1);
    let coarse_bal = Balance {
        target0,
        allowance: allowance.max(coarse_max_v),
    };
    let mut best: Option<(u64, u64, Vec<bool>)> = None;
    for _ in 0..GROW_TRIALS.min(current.n()) {
        let seed = rng.random_range(0..current.n());
        let mut side = grow_region(&current, seed, coarse_bal);
        fm_refine(&current, &mut side, coarse_bal);
        let key = (
            coarse_bal.violation(side_weight(&current, &side)),
            cut_of(&current, &side),
        );
        if best.as_ref().is_none_or(|b| key < (b.0, b.1)) {
            best = Some((key.0, key.1, side));
        }
    }
    let mut side = best.map(|b| b.2).unwrap_or_else(|| vec![true; current.n()]);

    while let Some((fine, cmap)) = levels.pop() {
        let projected: Vec<bool> = cmap.iter().map(|&c| side[c]).collect();
        side = projected;
        let max_v = fine.vwgt.iter().copied().max().unwrap_or(1);
        let bal = Balance {
            target0,
            allowance: if levels.is_empty() {
                allowance
            } else {
                allowance.max(max_v)
            },
        };
        fm_refine(&fine, &mut side, bal);
    }
    side
}

fn recursive_bisection(
    g: &Graph,
    k: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
    base: usize,
    verts: &[usize],
    label: &mut [usize],
) {
    if k == 1 || g.n() <= 1 {
        for &v in verts {
            label[v] = base;
        }
        return;
    }
    let k0 = k / 2;
    let side = bisect(g, k0 as f64 / k as f64, tol, rng);
    let (mut v0, mut v1, mut l0, mut l1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (t, &s) in side.iter().enumerate() {
        if s {
            v1.push(verts[t]);
            l1.push(t);
        } else {
            v0.push(verts[t]);
            l0.push(t);
        }
    }
    recursive_bisection(&g.induced(&l0), k0, tol, rng, base, &v0, label);
    recursive_bisection(&g.induced(&l1), k - k0, tol, rng, base + k0, &v1, label);
}

/// Block weights of `v`'s neighbours, as `(block, weight)` pairs.
fn neighbor_blocks(g: &Graph, label: &[usize], v: usize, out: &mut Vec<(usize, u64)>) {
    out.clear();
    for (u, w) in g.neighbors(v) {
        let b = label[u];
        match out.iter_mut().find(|e| e.0 == b) {
            Some(e) => e.1 += w,
            None => out.push((b, w)),
        }
    }
}

/// Balanced K-way partition with unit vertex weights. Every block ends up
/// nonempty with at most `max_size` vertices.
pub(crate) fn kway(g: &Graph, k: usize, tol: f64, max_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let mut label = vec![0usize; n];
    let verts: Vec<usize> = (0..n).collect();
    recursive_bisection(g, k, tol / 2.0, rng, 0, &verts, &mut label);

    let mut sizes = vec![0usize; k];
    for &b in &label {
        sizes[b] += 1;
    }
    let mut nb = Vec::new();
    let internal = |label: &[usize], v: usize| -> u64 {
        g.neighbors(v)
            .filter(|&(u, _)| label[u] == label[v])
            .map(|(_, w)| w)
            .sum()
    };

    // empty blocks take the loosest vertex of the largest block
    for b in 0..k {
        if sizes[b] > 0 {
            continue;
        }
        let big = (0..k).max_by_key(|&s| (sizes[s], Reverse(s))).unwrap();
        let v = (0..n)
            .filter(|&v| label[v] == big)
            .min_by_key(|&v| (internal(&label, v), v))
            .unwrap();
        sizes[big] -= 1;
        sizes[b] += 1;
        label[v] = b;
    }

    // drain overweight blocks, preferring adjacent destinations
    while let Some(b) = (0..k).find(|&s| sizes[s] > max_size) {
        let mut best: Option<(bool, i64, usize, usize)> = None;
        for v in (0..n).filter(|&v| label[v] == b) {
            neighbor_blocks(g, &label, v, &mut nb);
            let w_in = nb.iter().find(|e| e.0 == b).map_or(0, |e| e.1) as i64;
            for c in (0..k).filter(|&c| c != b && sizes[c] < max_size) {
                let w_c = nb.iter().find(|e| e.0 == c).map_or(0, |e| e.1) as i64;
                let cand = (w_c > 0, w_c - w_in, v, c);
                let better = match best {
                    None => true,
                    Some(bst) => {
                        (cand.0, cand.1, Reverse(cand.2), Reverse(cand.3))
                            > (bst.0, bst.1, Reverse(bst.2), Reverse(bst.3))
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (_, _, v, c) = best.expect("some block must have room");
        sizes[b] -= 1;
        sizes[c] += 1;
        label[v] = c;
    }

    // greedy boundary refinement under the size cap
    for _ in 0..10 {
        let mut moved = false;
        for v in 0..n {
            let b = label[v];
            if sizes[b] <= 1 {
                continue;
            }
            neighbor_blocks(g, &label, v, &mut nb);
            let w_in = nb.iter().find(|e| e.0 == b).map_or(0, |e| e.1);
            let target = nb
                .iter()
                .filter(|&&(c, w)| c != b && w > w_in && sizes[c] < max_size)
                .max_by_key(|&&(c, w)| (w, Reverse(c)));
            if let Some(&(c, _)) = target {
                sizes[b] -= 1;
                sizes[c] += 1;
                label[v] = c;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn from_edges(n: usize, edges: &[(usize, usize)]) -> Graph {
        let mut lists: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            lists[a].push((b, 1));
            lists[b].push((a, 1));
        }
        let mut xadj = vec![0];
        let mut adj = Vec::new();
        let mut ewgt = Vec::new();
        for l in &mut lists {
            l.sort();
            for &(u, w) in l.iter() {
                adj.push(u);
                ewgt.push(w);
            }
            xadj.push(adj.len());
        }
        Graph {
            xadj,
            adj,
            ewgt,
            vwgt: vec![1; n],
        }
    }

    fn grid(side: usize) -> Graph {
        let id = |r: usize, c: usize| r * side + c;
        let mut edges = Vec::new();
        for r in 0..side {
            for c in 0..side {
                if c + 1 < side {
                    edges.push((id(r, c), id(r, c + 1)));
                }
                if r + 1 < side {
                    edges.push((id(r, c), id(r + 1, c)));
                }
            }
        }
        from_edges(side * side, &edges)
    }

    #[test]
    fn coarsening_preserves_weight_and_edges() {
        let g = grid(12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, cmap) = coarsen(&g, &mut rng, 4);
        assert_eq!(c.total_weight(), g.total_weight());
        assert!(c.n() < g.n());
        let fine_cut_edges: u64 = g.edge_cut(&cmap);
        let coarse_edges: u64 = c.ewgt.iter().sum::<u64>() / 2;
        assert_eq!(fine_cut_edges, coarse_edges);
    }

    #[test]
    fn grid_bisection_is_balanced_with_small_cut() {
        let g = grid(20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let side = bisect(&g, 0.5, 0.02, &mut rng);
        let ones = side.iter().filter(|&&s| s).count();
        assert!((196..=204).contains(&ones), "{ones}");
        let cut = cut_of(&g, &side);
        // a straight cut costs 20; allow some slack for the heuristic
        assert!(cut <= 30, "cut {cut}");
    }

    #[test]
    fn kway_respects_cap_and_nonempty() {
        let g = grid(15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [2, 3, 5, 7] {
            let cap = (225usize).div_ceil(k).max((1.05 * 225.0 / k as f64) as usize);
            let label = kway(&g, k, 0.05, cap, &mut rng);
            let mut sizes = vec![0; k];
            for &b in &label {
                sizes[b] += 1;
            }
            assert!(sizes.iter().all(|&s| s > 0 && s <= cap), "{k}: {sizes:?}");
        }
    }
}
