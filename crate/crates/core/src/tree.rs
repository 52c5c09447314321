//! Candidate trie for parallel verification.
//!
//! The head part is the Cartesian product of each head's top-`s_k`
//! candidates, stored as a trie so shared prefixes are verified once.
//! Recalled n-grams are threaded in as extra root-to-leaf chains, merging
//! with existing nodes where tokens coincide. Each node attends only to its
//! ancestors and itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::AttentionMask;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Candidates taken from each head, `s_1 … s_K`.
    pub widths: Vec<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            widths: vec![1, 3, 3, 3],
        }
    }
}

impl TreeConfig {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let cfg = Self { widths };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "tree widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Number of head-trie leaves, `Π s_k`.
    pub fn leaf_count(&self) -> usize {
        self.widths.iter().product()
    }
}

impl fmt::Display for TreeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for TreeConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad tree width `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchOrigin {
    Heads,
    /// Index into the retrieved n-gram list.
    NGram(usize),
}

impl BranchOrigin {
    pub fn is_ngram(&self) -> bool {
        matches!(self, Self::NGram(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafPath {
    /// Node indices from depth 0 to the leaf.
    pub nodes: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub origin: BranchOrigin,
}

#[derive(Debug, Clone)]
pub struct CandidateTree {
    tokens: Vec<TokenId>,
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
    mask: AttentionMask,
    paths: Vec<LeafPath>,
    head_leaves: usize,
}

impl CandidateTree {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depths[node]
    }

    /// Offset added to the prefix length to get the node's position id.
    pub fn position_offset(&self, node: usize) -> usize {
        self.depths[node]
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn paths(&self) -> &[LeafPath] {
        &self.paths
    }

    /// Leaves contributed by the head Cartesian product.
    pub fn head_leaf_count(&self) -> usize {
        self.head_leaves
    }

    /// Tokens from depth 0 down to `node`.
    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.depths[node] + 1);
        let mut cur = Some(node);
        while let Some(n) = cur {
            path.push(self.tokens[n]);
            cur = self.parents[n];
        }
        path.reverse();
        path
    }

    #[cfg(test)]
    pub(crate) fn mask_mut(&mut self) -> &mut AttentionMask {
        &mut self.mask
    }

    fn add_node(&mut self, parent: Option<usize>, token: TokenId) -> usize {
        let idx = self.tokens.len();
        self.tokens.push(token);
        self.parents.push(parent);
        self.depths.push(parent.map_or(0, |p| self.depths[p] + 1));
        self.children.push(Vec::new());
        match parent {
            Some(p) => self.children[p].push(idx),
            None => self.roots.push(idx),
        }
        idx
    }

    fn find_child(&self, parent: Option<usize>, token: TokenId) -> Option<usize> {
        let siblings = match parent {
            Some(p) => &self.children[p],
            None => &self.roots,
        };
        siblings.iter().copied().find(|&c| self.tokens[c] == token)
    }

    /// Walks `tokens` from the roots, creating missing nodes. Returns the
    /// node path and whether anything new was created.
    fn insert_path(&mut self, tokens: &[TokenId]) -> (Vec<usize>, bool) {
        let mut parent = None;
        let mut nodes = Vec::with_capacity(tokens.len());
        let mut created = false;
        for &t in tokens {
            let node = match self.find_child(parent, t) {
                Some(n) => n,
                None => {
                    created = true;
                    self.add_node(parent, t)
                }
            };
            nodes.push(node);
            parent = Some(node);
        }
        (nodes, created)
    }
}

/// Builds the candidate trie from per-head candidates and recalled n-grams.
///
/// `per_head_topk[k]` must hold exactly `widths[k]` tokens; every n-gram must
/// have one token per head and start with the top candidate of head 0.
pub fn build_tree(
    per_head_topk: &[Vec<TokenId>],
    ngram_branches: &[Vec<TokenId>],
    config: &TreeConfig,
) -> Result<CandidateTree> {
    config.validate()?;
    let got: Vec<usize> = per_head_topk.iter().map(Vec::len).collect();
    if got != config.widths {
        return Err(Error::WidthMismatch {
            expected: config.widths.clone(),
            got,
        });
    }
    let depth = config.depth();
    let anchor = per_head_topk[0][0];
    for (i, g) in ngram_branches.iter().enumerate() {
        if g.len() != depth {
            return Err(Error::NGramLengthMismatch {
                index: i,
                reason: format!("length {} but the tree has {depth} levels", g.len()),
            });
        }
        if g[0] != anchor {
            return Err(Error::NGramLengthMismatch {
                index: i,
                reason: format!("starts with {} instead of {anchor}", g[0]),
            });
        }
    }

    let mut tree = CandidateTree {
        tokens: Vec::new(),
        parents: Vec::new(),
        depths: Vec::new(),
        children: Vec::new(),
        roots: Vec::new(),
        mask: AttentionMask::new(0, 0),
        paths: Vec::new(),
        head_leaves: 0,
    };

    // Odometer over the Cartesian product, first head most significant.
    let mut idx = vec![0usize; depth];
    'product: loop {
        let tokens: Vec<TokenId> = (0..depth).map(|k| per_head_topk[k][idx[k]]).collect();
        let (nodes, created) = tree.insert_path(&tokens);
        if created {
            tree.paths.push(LeafPath {
                nodes,
                tokens,
                origin: BranchOrigin::Heads,
            });
        }
        for k in (0..depth).rev() {
            idx[k] += 1;
            if idx[k] < config.widths[k] {
                continue 'product;
            }
            idx[k] = 0;
        }
        break;
    }
    tree.head_leaves = tree.paths.len();

    for (i, gram) in ngram_branches.iter().enumerate() {
        let (nodes, created) = tree.insert_path(gram);
        if created {
            tree.paths.push(LeafPath {
                nodes,
                tokens: gram.clone(),
                origin: BranchOrigin::NGram(i),
            });
        }
    }

    let n = tree.len();
    let mut mask = AttentionMask::new(n, n);
    for node in 0..n {
        if let Some(p) = tree.parents[node] {
            for j in 0..n {
                if mask.get(p, j) {
                    mask.set(node, j, true);
                }
            }
        }
        mask.set(node, node, true);
    }
    tree.mask = mask;
    Ok(tree)
}

/// True iff the stored mask equals the reflexive-transitive parent closure,
/// recomputed by walking parent links.
pub fn mask_check(tree: &CandidateTree) -> bool {
    let n = tree.len();
    if tree.mask.rows() != n || tree.mask.cols() != n {
        return false;
    }
    for i in 0..n {
        let mut ancestors = vec![false; n];
        let mut cur = Some(i);
        while let Some(c) = cur {
            ancestors[c] = true;
            cur = tree.parents[c];
        }
        if (0..n).any(|j| tree.mask.get(i, j) != ancestors[j]) {
            return false;
        }
    }
    true
}
