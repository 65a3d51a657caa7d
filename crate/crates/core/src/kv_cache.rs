//! Token-level radix tree modelling a prefix KV cache with a sharing
//! granularity `K`, a token budget, and LRU leaf eviction.
//!
//! Sequences are stored in whole blocks of `K` tokens: inserts truncate a
//! trailing partial block, and a lookup is credited only with fully matching
//! blocks, so `match_prefix` always returns a multiple of `K`.

use std::collections::BTreeMap;

use serde_json::json;

use crate::error::{Error, Result};
use crate::token::TokenId;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PrefixCacheConfig {
    pub granularity_k: usize,
    pub capacity_tokens: usize,
}

impl Default for PrefixCacheConfig {
    fn default() -> Self {
        // 15 filler requests of ~200 tokens must overflow the budget, so the
        // default capacity sits below 3000 tokens.
        PrefixCacheConfig { granularity_k: 1, capacity_tokens: 2048 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    /// Tokens newly added to the tree by this insert.
    pub new_tokens: usize,
    /// Tokens removed by evictions this insert triggered.
    pub evicted_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    /// Live nodes including the root.
    pub node_count: usize,
    /// Sum of edge-label lengths over live nodes.
    pub resident_tokens: usize,
    /// Longest root-to-leaf path in tokens.
    pub max_depth_tokens: usize,
}

#[derive(Debug, Clone)]
struct Node {
    label: Vec<TokenId>,
    children: BTreeMap<Vec<TokenId>, usize>,
    parent: usize,
    last_touch: u64,
}

#[derive(Debug, Clone)]
pub struct PrefixCache {
    cfg: PrefixCacheConfig,
    nodes: Vec<Node>,
    free: Vec<usize>,
    clock: u64,
    resident: usize,
}

const ROOT: usize = 0;

impl PrefixCache {
    pub fn new(cfg: PrefixCacheConfig) -> Result<Self> {
        if cfg.granularity_k == 0 {
            return Err(Error::InvalidConfig("granularity_k must be at least 1".into()));
        }
        if cfg.capacity_tokens < cfg.granularity_k {
            return Err(Error::InvalidConfig(format!(
                "capacity_tokens {} cannot hold a single block of {} tokens",
                cfg.capacity_tokens, cfg.granularity_k
            )));
        }
        Ok(PrefixCache {
            cfg,
            nodes: vec![Node {
                label: Vec::new(),
                children: BTreeMap::new(),
                parent: ROOT,
                last_touch: 0,
            }],
            free: Vec::new(),
            clock: 0,
            resident: 0,
        })
    }

    pub fn config(&self) -> PrefixCacheConfig {
        self.cfg
    }

    /// Longest cached prefix of `seq`, in tokens; always a multiple of `K`.
    /// Touches the LRU tick of every node on the matched path.
    pub fn match_prefix(&mut self, seq: &[TokenId]) -> usize {
        self.clock += 1;
        let tick = self.clock;
        self.nodes[ROOT].last_touch = tick;

        let k = self.cfg.granularity_k;
        let blocks = seq.len() / k;
        let mut matched_tokens = 0;
        let mut cur = ROOT;
        let mut i = 0; // consumed blocks
        while i < blocks {
            let key = &seq[i * k..(i + 1) * k];
            let Some(&child) = self.nodes[cur].children.get(key) else { break };
            let label_blocks = self.nodes[child].label.len() / k;
            let mut m = 0;
            while m < label_blocks && i + m < blocks {
                let a = &self.nodes[child].label[m * k..(m + 1) * k];
                let b = &seq[(i + m) * k..(i + m + 1) * k];
                if a != b {
                    break;
                }
                m += 1;
            }
            matched_tokens += m * k;
            self.nodes[child].last_touch = tick;
            if m < label_blocks {
                break; // diverged or ran out of query inside this edge
            }
            i += m;
            cur = child;
        }
        matched_tokens
    }

    /// Caches `seq` (truncated to whole blocks). Evicts least-recently-used
    /// leaves if the budget would overflow; nodes on the insert path are never
    /// evicted by their own insert.
    pub fn insert(&mut self, seq: &[TokenId]) -> Result<InsertOutcome> {
        if seq.len() > self.cfg.capacity_tokens {
            return Err(Error::SequenceExceedsCapacity {
                len: seq.len(),
                capacity: self.cfg.capacity_tokens,
            });
        }
        self.clock += 1;
        let tick = self.clock;
        self.nodes[ROOT].last_touch = tick;

        let k = self.cfg.granularity_k;
        let blocks = seq.len() / k;
        let mut path = vec![ROOT];
        let mut new_tokens = 0;
        let mut cur = ROOT;
        let mut i = 0;
        while i < blocks {
            let key = seq[i * k..(i + 1) * k].to_vec();
            match self.nodes[cur].children.get(&key).copied() {
                None => {
                    let label = seq[i * k..blocks * k].to_vec();
                    new_tokens += label.len();
                    let node = self.alloc(Node {
                        label,
                        children: BTreeMap::new(),
                        parent: cur,
                        last_touch: tick,
                    });
                    self.nodes[cur].children.insert(key, node);
                    path.push(node);
                    break;
                }
                Some(child) => {
                    let label_blocks = self.nodes[child].label.len() / k;
                    let mut m = 0;
                    while m < label_blocks && i + m < blocks {
                        let a = &self.nodes[child].label[m * k..(m + 1) * k];
                        let b = &seq[(i + m) * k..(i + m + 1) * k];
                        if a != b {
                            break;
                        }
                        m += 1;
                    }
                    if m == label_blocks {
                        // Whole edge matched; descend.
                        self.nodes[child].last_touch = tick;
                        path.push(child);
                        cur = child;
                        i += m;
                    } else if i + m == blocks {
                        // Sequence ends inside this edge; the prefix is
                        // already resident. Touch and stop.
                        self.nodes[child].last_touch = tick;
                        path.push(child);
                        break;
                    } else {
                        // Diverged after m blocks: split the edge, then hang
                        // the new suffix off the split point.
                        let split = self.split_edge(child, m * k, tick);
                        path.push(split);
                        let rest = seq[(i + m) * k..blocks * k].to_vec();
                        new_tokens += rest.len();
                        let key = rest[..k].to_vec();
                        let node = self.alloc(Node {
                            label: rest,
                            children: BTreeMap::new(),
                            parent: split,
                            last_touch: tick,
                        });
                        self.nodes[split].children.insert(key, node);
                        path.push(node);
                        break;
                    }
                }
            }
        }
        self.resident += new_tokens;
        let evicted_tokens = self.evict_to_fit(&path);
        Ok(InsertOutcome { new_tokens, evicted_tokens })
    }

    /// Splits `node`'s edge after `at` tokens; returns the new parent half.
    fn split_edge(&mut self, node: usize, at: usize, tick: u64) -> usize {
        debug_assert!(at > 0 && at < self.nodes[node].label.len());
        let k = self.cfg.granularity_k;
        debug_assert_eq!(at % k, 0);
        let parent = self.nodes[node].parent;
        let upper_label: Vec<TokenId> = self.nodes[node].label[..at].to_vec();
        let lower_label: Vec<TokenId> = self.nodes[node].label[at..].to_vec();
        let upper = self.alloc(Node {
            label: upper_label.clone(),
            children: BTreeMap::new(),
            parent,
            last_touch: tick,
        });
        // The upper half keeps the original child key in the parent.
        let key = upper_label[..k].to_vec();
        *self.nodes[parent].children.get_mut(&key).expect("child key present") = upper;
        let lower_key = lower_label[..k].to_vec();
        self.nodes[node].label = lower_label;
        self.nodes[node].parent = upper;
        self.nodes[upper].children.insert(lower_key, node);
        upper
    }

    fn alloc(&mut self, node: Node) -> usize {
        match self.free.pop() {
            Some(idx) => {
                self.nodes[idx] = node;
                idx
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        }
    }

    /// Evicts LRU leaves until the budget fits, never touching `protected`
    /// nodes. Returns evicted token count.
    fn evict_to_fit(&mut self, protected: &[usize]) -> usize {
        let mut evicted = 0;
        while self.resident > self.cfg.capacity_tokens {
            let Some(victim) = self.pick_eviction_victim(protected) else { break };
            evicted += self.remove_leaf(victim);
        }
        evicted
    }

    /// Leaf with the smallest last-touched tick; ties broken by the smallest
    /// first token of the leaf's edge label, then by full path for totality.
    fn pick_eviction_victim(&self, protected: &[usize]) -> Option<usize> {
        let mut best: Option<(u64, Vec<TokenId>, usize)> = None;
        let mut stack: Vec<(usize, Vec<TokenId>)> = vec![(ROOT, Vec::new())];
        while let Some((idx, prefix)) = stack.pop() {
            let node = &self.nodes[idx];
            if node.children.is_empty() && idx != ROOT {
                if !protected.contains(&idx) {
                    let mut key = Vec::with_capacity(node.label.len() + prefix.len());
                    key.push(node.label[0]);
                    key.extend_from_slice(&prefix);
                    key.extend_from_slice(&node.label);
                    let cand = (node.last_touch, key, idx);
                    if best.as_ref().map_or(true, |b| (cand.0, &cand.1) < (b.0, &b.1)) {
                        best = Some(cand);
                    }
                }
                continue;
            }
            for child in node.children.values() {
                let mut p = prefix.clone();
                p.extend_from_slice(&node.label);
                stack.push((*child, p));
            }
        }
        best.map(|(_, _, idx)| idx)
    }

    fn remove_leaf(&mut self, idx: usize) -> usize {
        debug_assert!(self.nodes[idx].children.is_empty() && idx != ROOT);
        let parent = self.nodes[idx].parent;
        let k = self.cfg.granularity_k;
        let key = self.nodes[idx].label[..k].to_vec();
        let removed = self.nodes[parent].children.remove(&key);
        debug_assert_eq!(removed, Some(idx));
        let len = self.nodes[idx].label.len();
        self.resident -= len;
        self.nodes[idx].label = Vec::new();
        self.free.push(idx);
        len
    }

    pub fn flush(&mut self) {
        self.nodes.clear();
        self.free.clear();
        self.nodes.push(Node {
            label: Vec::new(),
            children: BTreeMap::new(),
            parent: ROOT,
            last_touch: 0,
        });
        self.clock = 0;
        self.resident = 0;
    }

    pub fn stats(&self) -> CacheStats {
        let mut node_count = 0;
        let mut resident = 0;
        let mut max_depth = 0;
        let mut stack = vec![(ROOT, 0usize)];
        while let Some((idx, depth)) = stack.pop() {
            let node = &self.nodes[idx];
            node_count += 1;
            resident += node.label.len();
            let depth = depth + node.label.len();
            max_depth = max_depth.max(depth);
            for &c in node.children.values() {
                stack.push((c, depth));
            }
        }
        debug_assert_eq!(resident, self.resident);
        CacheStats { node_count, resident_tokens: resident, max_depth_tokens: max_depth }
    }

    /// Deterministic JSON rendering of the tree for debugging and golden
    /// tests: children appear in block-key order.
    pub fn dump(&self) -> serde_json::Value {
        fn render(cache: &PrefixCache, idx: usize) -> serde_json::Value {
            let node = &cache.nodes[idx];
            json!({
                "label": node.label,
                "tick": node.last_touch,
                "children": node
                    .children
                    .values()
                    .map(|&c| render(cache, c))
                    .collect::<Vec<_>>(),
            })
        }
        render(self, ROOT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn cache(k: usize, capacity: usize) -> PrefixCache {
        PrefixCache::new(PrefixCacheConfig { granularity_k: k, capacity_tokens: capacity })
            .unwrap()
    }

    /// Reference oracle: longest common prefix against the raw insert set,
    /// rounded down to a multiple of K. Kept wholly independent of the tree.
    #[derive(Default)]
    struct Oracle {
        seqs: BTreeSet<Vec<TokenId>>,
    }

    impl Oracle {
        fn insert(&mut self, seq: &[TokenId]) {
            self.seqs.insert(seq.to_vec());
        }

        fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
            a.iter().zip(b).take_while(|(x, y)| x == y).count()
        }

        /// Max LCP is attained at a lexicographic neighbor of the query.
        fn match_prefix(&self, seq: &[TokenId], k: usize) -> usize {
            let q = seq.to_vec();
            let pred = self.seqs.range(..=q.clone()).next_back();
            let succ = self.seqs.range(q.clone()..).next();
            let best = pred
                .map(|s| Self::lcp(seq, s))
                .into_iter()
                .chain(succ.map(|s| Self::lcp(seq, s)))
                .max()
                .unwrap_or(0);
            (best / k) * k
        }

        fn match_linear(&self, seq: &[TokenId], k: usize) -> usize {
            let best = self.seqs.iter().map(|s| Self::lcp(seq, s)).max().unwrap_or(0);
            (best / k) * k
        }
    }

    #[test]
    fn empty_cache_matches_nothing_and_stats_count_root() {
        let mut c = cache(1, 100);
        assert_eq!(c.match_prefix(&[1, 2, 3]), 0);
        assert_eq!(
            c.stats(),
            CacheStats { node_count: 1, resident_tokens: 0, max_depth_tokens: 0 }
        );
    }

    #[test]
    fn second_insert_caches_only_the_new_suffix() {
        let mut c = cache(1, 100);
        let first = c.insert(&[1, 2, 3]).unwrap();
        assert_eq!(first.new_tokens, 3);
        let second = c.insert(&[1, 2, 9]).unwrap();
        assert_eq!(second.new_tokens, 1);
        assert_eq!(c.match_prefix(&[1, 2, 9, 4]), 3);
        assert_eq!(c.match_prefix(&[1, 2, 3]), 3);
        assert_eq!(c.stats().resident_tokens, 4);
    }

    #[test]
    fn granularity_truncates_partial_blocks() {
        let mut c = cache(2, 100);
        let out = c.insert(&[1, 2, 3]).unwrap();
        assert_eq!(out.new_tokens, 2); // trailing partial block dropped
        assert_eq!(c.match_prefix(&[1, 2, 3]), 2);
        assert_eq!(c.match_prefix(&[1, 2]), 2);
        assert_eq!(c.match_prefix(&[1, 9]), 0); // sub-block share is invisible
    }

    #[test]
    fn match_rounds_down_to_block_multiples() {
        let mut c = cache(3, 100);
        c.insert(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap(); // stores 6 tokens
        assert_eq!(c.match_prefix(&[1, 2, 3, 4, 5, 6, 7]), 6);
        assert_eq!(c.match_prefix(&[1, 2, 3, 4, 9, 9]), 3);
        assert_eq!(c.match_prefix(&[1, 2]), 0);
    }

    #[test]
    fn lru_leaf_eviction_in_insertion_order() {
        let mut c = cache(1, 4);
        c.insert(&[1, 2]).unwrap();
        c.insert(&[3, 4]).unwrap();
        let out = c.insert(&[5, 6]).unwrap();
        assert_eq!(out.evicted_tokens, 2);
        assert_eq!(c.match_prefix(&[1, 2]), 0, "LRU chain should be gone");
        assert_eq!(c.match_prefix(&[3, 4]), 2);
        assert_eq!(c.match_prefix(&[5, 6]), 2);
    }

    #[test]
    fn matching_refreshes_lru_order() {
        let mut c = cache(1, 4);
        c.insert(&[1, 2]).unwrap();
        c.insert(&[3, 4]).unwrap();
        c.match_prefix(&[1, 2]); // refresh the older chain
        c.insert(&[5, 6]).unwrap();
        assert_eq!(c.match_prefix(&[1, 2]), 2);
        assert_eq!(c.match_prefix(&[3, 4]), 0);
    }

    #[test]
    fn eviction_after_split_drops_stale_branch_only() {
        let mut s = cache(1, 7);
        s.insert(&[1, 2, 3, 4]).unwrap();
        s.insert(&[1, 2, 9, 9]).unwrap(); // splits at [1,2]; branch [3,4] is older
        s.insert(&[7, 7, 7]).unwrap(); // resident 9 > 7 → evict branch [3,4] only
        assert_eq!(s.match_prefix(&[1, 2, 3, 4]), 2, "shared stem survives");
        assert_eq!(s.match_prefix(&[1, 2, 9, 9]), 4);
        assert_eq!(s.match_prefix(&[7, 7, 7]), 3);
    }

    #[test]
    fn oversized_sequence_is_rejected() {
        let mut c = cache(1, 4);
        match c.insert(&[1, 2, 3, 4, 5]) {
            Err(Error::SequenceExceedsCapacity { len, capacity }) => {
                assert_eq!((len, capacity), (5, 4));
            }
            other => panic!("expected SequenceExceedsCapacity, got {other:?}"),
        }
    }

    #[test]
    fn flush_resets_everything() {
        let mut c = cache(1, 100);
        c.insert(&[1, 2, 3]).unwrap();
        c.flush();
        assert_eq!(c.match_prefix(&[1, 2, 3]), 0);
        assert_eq!(
            c.stats(),
            CacheStats { node_count: 1, resident_tokens: 0, max_depth_tokens: 0 }
        );
    }

    #[test]
    fn dump_is_deterministic_and_ordered() {
        let mut c = cache(1, 100);
        c.insert(&[5, 1]).unwrap();
        c.insert(&[2, 1]).unwrap();
        let d = c.dump();
        let children = d["children"].as_array().unwrap();
        assert_eq!(children[0]["label"], serde_json::json!([2, 1]));
        assert_eq!(children[1]["label"], serde_json::json!([5, 1]));
        assert_eq!(c.dump(), d);
    }

    #[test]
    fn zero_granularity_and_tiny_capacity_are_invalid() {
        assert!(PrefixCache::new(PrefixCacheConfig { granularity_k: 0, capacity_tokens: 8 })
            .is_err());
        assert!(PrefixCache::new(PrefixCacheConfig { granularity_k: 4, capacity_tokens: 3 })
            .is_err());
    }

    fn arb_seq() -> impl Strategy<Value = Vec<TokenId>> {
        proptest::collection::vec(0u32..6, 1..12)
    }

    proptest! {
        // The neighbor-based oracle must agree with a full linear scan.
        #[test]
        fn oracle_neighbor_trick_is_sound(
            seqs in proptest::collection::vec(arb_seq(), 1..20),
            query in arb_seq(),
            k in 1usize..4,
        ) {
            let mut o = Oracle::default();
            for s in &seqs {
                o.insert(s);
            }
            prop_assert_eq!(o.match_prefix(&query, k), o.match_linear(&query, k));
        }

        // Tree vs oracle on randomized operation mixes (no eviction).
        #[test]
        fn matches_equal_oracle(
            ops in proptest::collection::vec((arb_seq(), proptest::bool::ANY), 1..60),
            k in 1usize..5,
        ) {
            let mut c = cache(k, usize::MAX / 2);
            let mut o = Oracle::default();
            for (seq, is_insert) in ops {
                if is_insert {
                    c.insert(&seq).unwrap();
                    o.insert(&seq);
                } else {
                    prop_assert_eq!(c.match_prefix(&seq), o.match_prefix(&seq, k));
                }
            }
        }

        // Structural invariants: edge labels are whole blocks, children start
        // with distinct blocks, budget holds, resident matches the dump.
        #[test]
        fn structural_invariants_hold(
            ops in proptest::collection::vec(arb_seq(), 1..40),
            k in 1usize..4,
            capacity_blocks in 2usize..8,
        ) {
            let capacity = capacity_blocks * k * 2;
            let mut c = cache(k, capacity);
            for seq in ops {
                if seq.len() <= capacity {
                    c.insert(&seq).unwrap();
                }
                let stats = c.stats();
                prop_assert!(stats.resident_tokens <= capacity);
                fn walk(v: &serde_json::Value, k: usize, sum: &mut usize) {
                    let label = v["label"].as_array().unwrap();
                    *sum += label.len();
                    assert_eq!(label.len() % k, 0, "edge label not block aligned");
                    let children = v["children"].as_array().unwrap();
                    let mut first_blocks = BTreeSet::new();
                    for c in children {
                        let lab = c["label"].as_array().unwrap();
                        assert!(!lab.is_empty(), "non-root node with empty label");
                        let fb: Vec<u64> =
                            lab[..k].iter().map(|v| v.as_u64().unwrap()).collect();
                        assert!(first_blocks.insert(fb), "duplicate first block");
                        walk(c, k, sum);
                    }
                }
                let mut sum = 0;
                walk(&c.dump(), k, &mut sum);
                prop_assert_eq!(sum, stats.resident_tokens);
            }
        }

        // With granularity K, prefixes shorter than K are never visible.
        #[test]
        fn sub_block_sharing_is_invisible(
            base in arb_seq(),
            k in 2usize..5,
        ) {
            let mut c = cache(k, usize::MAX / 2);
            c.insert(&base).unwrap();
            if !base.is_empty() {
                let mut q = base.clone();
                let cut = (base.len() / k) * k; // first stored block boundary
                if cut == 0 {
                    prop_assert_eq!(c.match_prefix(&q), 0);
                } else {
                    // Diverge inside the first block: no credit at all.
                    q[k - 1] = q[k - 1].wrapping_add(1) % 6 + 6;
                    prop_assert_eq!(c.match_prefix(&q), 0);
                }
            }
        }
    }
}
