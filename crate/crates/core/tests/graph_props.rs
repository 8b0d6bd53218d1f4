use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskstruct::checks::band_equivalence;
use taskstruct::graph::{random_graph, ConditioningSet, NodeId, RandomGraphConfig, TemporalGraph};

fn graph(t_segs: usize, seg_len: usize, m: usize, seed: u64) -> TemporalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_graph(&RandomGraphConfig::new(t_segs * seg_len, seg_len, m), &mut rng).unwrap()
}

/// Separation in the moralized ancestral graph of `{x, y} + z`.
fn moral_separated(g: &TemporalGraph, x: NodeId, y: NodeId, z: &[NodeId]) -> bool {
    let mut anc: HashSet<NodeId> = HashSet::new();
    let mut stack: Vec<NodeId> = [x, y].into_iter().chain(z.iter().copied()).collect();
    while let Some(u) = stack.pop() {
        if anc.insert(u) {
            stack.extend(g.parents_of(&u).unwrap());
        }
    }
    let mut adj: Vec<(NodeId, NodeId)> = Vec::new();
    for &u in &anc {
        let ps = g.parents_of(&u).unwrap();
        for &p in &ps {
            adj.push((p, u));
        }
        for a in 0..ps.len() {
            for b in a + 1..ps.len() {
                adj.push((ps[a], ps[b]));
            }
        }
    }
    let blocked: HashSet<NodeId> = z.iter().copied().collect();
    let mut seen = HashSet::from([x]);
    let mut queue = VecDeque::from([x]);
    while let Some(u) = queue.pop_front() {
        if u == y {
            return false;
        }
        for &(a, b) in &adj {
            let next = if a == u { b } else if b == u { a } else { continue };
            if !blocked.contains(&next) && seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn d_separation_matches_moral_graph(segs in 2usize..5, l in 2usize..4, m in 1usize..4, seed in any::<u64>(), picks in prop::collection::vec(any::<prop::sample::Index>(), 2..7)) {
        let g = graph(segs, l, m, seed);
        let nodes = g.nodes();
        let chosen: Vec<NodeId> = picks.iter().map(|i| nodes[i.index(nodes.len())]).collect();
        let (x, y) = (chosen[0], chosen[1]);
        prop_assume!(x != y);
        let mut z: Vec<NodeId> = Vec::new();
        for n in &chosen[2..] {
            if *n != x && *n != y && !z.contains(n) {
                z.push(*n);
            }
        }
        let zs = ConditioningSet::new(z.clone()).unwrap();
        let fast = g.d_separated(&x, &y, &zs).unwrap();
        prop_assert_eq!(fast, moral_separated(&g, x, y, zs.nodes()));
        prop_assert_eq!(fast, g.d_separated(&y, &x, &zs).unwrap());
    }

    #[test]
    fn random_graphs_follow_edge_rules(segs in 2usize..6, l in 2usize..5, m in 1usize..5, seed in any::<u64>()) {
        let g = graph(segs, l, m, seed);
        prop_assert!(g.is_acyclic());
        let t = g.steps();
        for step in 1..=t {
            prop_assert!(g.has_edge(&NodeId::state(step), &NodeId::action(step)));
            if step < t {
                let c = g.is_connected(step);
                prop_assert_eq!(g.has_edge(&NodeId::state(step), &NodeId::state(step + 1)), c);
                prop_assert_eq!(g.has_edge(&NodeId::action(step), &NodeId::state(step + 1)), c);
            }
            for i in 1..=m {
                let rel = g.incidence().get(g.segment_of(step), i);
                prop_assert_eq!(g.has_edge(&NodeId::action(step), &NodeId::task(i)), rel);
            }
        }
        let within: usize = (1..t).filter(|&s| s % l != 0).filter(|&s| !g.is_connected(s)).count();
        prop_assert_eq!(within, 0);
    }

    #[test]
    fn band_queries_read_off_incidence(segs in 2usize..6, l in 2usize..4, m in 1usize..4, seed in any::<u64>()) {
        let g = graph(segs, l, m, seed);
        prop_assert!(band_equivalence(&g).unwrap().is_empty());
    }
}
