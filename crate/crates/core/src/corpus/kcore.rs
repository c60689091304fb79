//! k-core filtering of the user-item interaction graph.
//!
//! Iteratively removes users and items with fewer than `k` interactions
//! until none remain; the result is the unique maximal fixed point, so
//! the peeling order below does not affect the output. Item metadata is
//! a side table and passes through untouched.

use std::collections::{BTreeMap, VecDeque};

use super::Corpus;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    User(usize),
    Item(usize),
}

/// Returns the k-core of the corpus interaction graph. `k == 0` is the
/// identity.
pub fn kcore_filter(corpus: &Corpus, k: usize) -> Corpus {
    if k == 0 {
        return corpus.clone();
    }
    let reviews = corpus.reviews();
    let mut user_ix: BTreeMap<&str, usize> = BTreeMap::new();
    let mut item_ix: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reviews {
        let next = user_ix.len();
        user_ix.entry(r.user_id.as_str()).or_insert(next);
        let next = item_ix.len();
        item_ix.entry(r.item_id.as_str()).or_insert(next);
    }
    let mut user_adj: Vec<Vec<usize>> = vec![Vec::new(); user_ix.len()];
    let mut item_adj: Vec<Vec<usize>> = vec![Vec::new(); item_ix.len()];
    for (ri, r) in reviews.iter().enumerate() {
        user_adj[user_ix[r.user_id.as_str()]].push(ri);
        item_adj[item_ix[r.item_id.as_str()]].push(ri);
    }
    let mut user_deg: Vec<usize> = user_adj.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_adj.iter().map(Vec::len).collect();
    let mut user_dead = vec![false; user_deg.len()];
    let mut item_dead = vec![false; item_deg.len()];
    let mut review_dead = vec![false; reviews.len()];

    let mut queue: VecDeque<Node> = VecDeque::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            queue.push_back(Node::User(u));
            user_dead[u] = true;
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < k {
            queue.push_back(Node::Item(i));
            item_dead[i] = true;
        }
    }
    while let Some(node) = queue.pop_front() {
        let edges = match node {
            Node::User(u) => &user_adj[u],
            Node::Item(i) => &item_adj[i],
        };
        for &ri in edges {
            if review_dead[ri] {
                continue;
            }
            review_dead[ri] = true;
            let r = &reviews[ri];
            let u = user_ix[r.user_id.as_str()];
            let i = item_ix[r.item_id.as_str()];
            // Decrement the endpoint on the other side of the edge.
            match node {
                Node::User(_) => {
                    item_deg[i] -= 1;
                    if !item_dead[i] && item_deg[i] < k {
                        item_dead[i] = true;
                        queue.push_back(Node::Item(i));
                    }
                }
                Node::Item(_) => {
                    user_deg[u] -= 1;
                    if !user_dead[u] && user_deg[u] < k {
                        user_dead[u] = true;
                        queue.push_back(Node::User(u));
                    }
                }
            }
        }
    }

    let surviving = reviews
        .iter()
        .enumerate()
        .filter(|(ri, _)| !review_dead[*ri])
        .map(|(_, r)| r.clone())
        .collect();
    Corpus::from_parts(surviving, corpus.items().clone(), corpus.scale())
        .expect("subset of a valid corpus stays valid")
}
