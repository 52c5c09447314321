//! Full and budgeted partial KV caches.
//!
//! The full cache holds every verified position and is what verification
//! attends over. The partial cache used for drafting keeps the first `|S|`
//! entries verbatim (the attention sink) and fills the remaining
//! `|B| - |S|` slots with the entries ranked most important by the grouped
//! query-key score. Freshly accepted entries enter at the head of the body
//! and push the least important ones out of the tail; once the generated text
//! has outgrown the body the whole selection is recomputed.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One position's key/value for one layer.
///
/// `key` is stored before rotary encoding so the entry can be re-positioned;
/// `key_at_origin` caches the key rotated to `origin_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: Vec<f32>,
    pub key_at_origin: Vec<f32>,
    pub value: Vec<f32>,
    pub origin_pos: usize,
}

/// Per-layer entries for every committed position, in position order.
#[derive(Debug, Clone, Default)]
pub struct FullCache {
    layers: Vec<Vec<KvEntry>>,
}

impl FullCache {
    pub fn new(num_layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, layer: usize) -> &[KvEntry] {
        &self.layers[layer]
    }

    /// Appends one token's per-layer entries. Positions must keep increasing.
    pub fn push(&mut self, per_layer: Vec<KvEntry>) -> Result<()> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} layer entries for a {}-layer cache",
                per_layer.len(),
                self.layers.len()
            )));
        }
        for (layer, entry) in self.layers.iter_mut().zip(per_layer) {
            if let Some(last) = layer.last() {
                if entry.origin_pos <= last.origin_pos {
                    return Err(Error::Config(format!(
                        "cache position {} does not follow {}",
                        entry.origin_pos, last.origin_pos
                    )));
                }
            }
            layer.push(entry);
        }
        Ok(())
    }

    pub fn view(&self) -> CacheView<'_> {
        CacheView {
            layers: self.layers.iter().map(Vec::as_slice).collect(),
            compact: None,
            sorted: true,
        }
    }
}

/// Importance of every full-cache position from `start` onward.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    start: usize,
    scores: Vec<f64>,
}

impl ImportanceScores {
    pub fn new(start: usize, scores: Vec<f64>) -> Self {
        Self { start, scores }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        index
            .checked_sub(self.start)
            .and_then(|i| self.scores.get(i))
            .copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// Grouped score of one key: every query head in the group of KV head `h`
/// (heads `h·g … (h+1)·g − 1`) is dotted with that head's key and the results
/// are summed over all groups. With `g = 1` this is a plain `Q·K`.
pub fn importance_scores(
    queries: &[Vec<f32>],
    keys: &[Vec<Vec<f32>>],
    group: usize,
) -> Result<ImportanceScores> {
    let scores = keys
        .iter()
        .map(|per_head| grouped_score(queries, per_head, group))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceScores::new(0, scores))
}

fn grouped_score(queries: &[Vec<f32>], keys: &[Vec<f32>], group: usize) -> Result<f64> {
    if group == 0 || queries.len() != group * keys.len() {
        return Err(Error::GroupMismatch {
            query_heads: queries.len(),
            kv_heads: keys.len(),
            group,
        });
    }
    let mut total = 0.0f64;
    for (h, key) in keys.iter().enumerate() {
        for q in &queries[h * group..(h + 1) * group] {
            if q.len() != key.len() {
                return Err(Error::DimensionMismatch(format!(
                    "query head of width {} against key head of width {}",
                    q.len(),
                    key.len()
                )));
            }
            total += q
                .iter()
                .zip(key)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum::<f64>();
        }
    }
    Ok(total)
}

/// Flat-layout variant: `query` holds `num_heads` concatenated heads and each
/// key holds `num_kv_heads` concatenated heads.
pub fn score_entries(
    query: &[f32],
    entries: &[KvEntry],
    start: usize,
    num_heads: usize,
    num_kv_heads: usize,
) -> Result<ImportanceScores> {
    if num_kv_heads == 0 || !num_heads.is_multiple_of(num_kv_heads) {
        return Err(Error::GroupMismatch {
            query_heads: num_heads,
            kv_heads: num_kv_heads,
            group: 0,
        });
    }
    let group = num_heads / num_kv_heads;
    let head_dim = query.len() / num_heads;
    let q_heads: Vec<Vec<f32>> = query.chunks(head_dim).map(<[f32]>::to_vec).collect();
    let scores = entries[start.min(entries.len())..]
        .iter()
        .map(|e| {
            let k_heads: Vec<Vec<f32>> = e.key.chunks(head_dim).map(<[f32]>::to_vec).collect();
            grouped_score(&q_heads, &k_heads, group)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceScores::new(start, scores))
}

/// Sink plus importance-ordered body, per layer.
#[derive(Debug, Clone)]
pub struct PartialCache {
    /// `layers[l]` = sink entries followed by body entries, most important
    /// (or most recent) first.
    layers: Vec<Vec<KvEntry>>,
    /// Parallel to `layers`; `None` for entries added since the last refresh.
    scores: Vec<Vec<Option<f64>>>,
    budget: usize,
    sink_size: usize,
    last_refresh_mark: usize,
    fresh: usize,
}

/// Builds a partial cache: the first `sink_size` entries plus the top
/// `budget - sink_size` entries by score, ties going to the older position.
/// When the full cache fits in the budget everything is kept.
///
/// `scores[l]` must cover positions `sink_size..full.len()` of layer `l`.
pub fn prefill_partial(
    full: &FullCache,
    sink_size: usize,
    budget: usize,
    scores: &[ImportanceScores],
) -> Result<PartialCache> {
    if budget <= sink_size {
        return Err(Error::BudgetTooSmall {
            budget,
            sink: sink_size,
        });
    }
    if full.len() < sink_size {
        return Err(Error::Config(format!(
            "full cache of {} entries cannot supply a sink of {sink_size}",
            full.len()
        )));
    }
    if scores.len() != full.num_layers() {
        return Err(Error::DimensionMismatch(format!(
            "{} score layers for a {}-layer cache",
            scores.len(),
            full.num_layers()
        )));
    }
    let body_slots = budget - sink_size;
    let mut layers = Vec::with_capacity(full.num_layers());
    let mut layer_scores = Vec::with_capacity(full.num_layers());
    for (l, layer_score) in scores.iter().enumerate() {
        let entries = full.layer(l);
        let mut ranked: Vec<(usize, f64)> = (sink_size..entries.len())
            .map(|i| {
                layer_score.get(i).map(|s| (i, s)).ok_or_else(|| {
                    Error::DimensionMismatch(format!("no importance score for position {i}"))
                })
            })
            .collect::<Result<_>>()?;
        // Stable sort keeps ascending position among equal scores.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked.truncate(body_slots);

        let mut kept: Vec<KvEntry> = entries[..sink_size].to_vec();
        let mut kept_scores = vec![None; sink_size];
        for (i, s) in ranked {
            kept.push(entries[i].clone());
            kept_scores.push(Some(s));
        }
        layers.push(kept);
        layer_scores.push(kept_scores);
    }
    Ok(PartialCache {
        layers,
        scores: layer_scores,
        budget,
        sink_size,
        last_refresh_mark: full.len(),
        fresh: 0,
    })
}

/// True once more entries have been committed since the last refresh than the
/// body can hold.
pub fn needs_refresh(full_len: usize, partial: &PartialCache) -> bool {
    full_len.saturating_sub(partial.last_refresh_mark) > partial.budget - partial.sink_size
}

/// Rebuilds the partial cache from fresh scores over the whole full cache.
pub fn refresh(
    full: &FullCache,
    partial: &PartialCache,
    scores: &[ImportanceScores],
) -> Result<PartialCache> {
    prefill_partial(full, partial.sink_size, partial.budget, scores)
}

impl PartialCache {
    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn sink_size(&self) -> usize {
        self.sink_size
    }

    pub fn last_refresh_mark(&self) -> usize {
        self.last_refresh_mark
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Entries per layer (all layers hold the same count).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, layer: usize) -> &[KvEntry] {
        &self.layers[layer]
    }

    pub fn sink(&self, layer: usize) -> &[KvEntry] {
        &self.layers[layer][..self.sink_size]
    }

    pub fn body(&self, layer: usize) -> &[KvEntry] {
        &self.layers[layer][self.sink_size..]
    }

    pub fn body_scores(&self, layer: usize) -> &[Option<f64>] {
        &self.scores[layer][self.sink_size..]
    }

    /// Places newly committed entries at the head of the body, in order.
    /// `per_token[t][l]` is token `t`'s entry for layer `l`.
    pub fn insert_fresh(&mut self, per_token: &[Vec<KvEntry>]) -> Result<()> {
        for entries in per_token {
            if entries.len() != self.layers.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} layer entries for a {}-layer cache",
                    entries.len(),
                    self.layers.len()
                )));
            }
        }
        let at = self.sink_size;
        for l in 0..self.layers.len() {
            let fresh = per_token.iter().map(|e| e[l].clone());
            self.layers[l].splice(at..at, fresh);
            self.scores[l].splice(at..at, std::iter::repeat_n(None, per_token.len()));
        }
        self.fresh += per_token.len();
        Ok(())
    }

    /// Drops entries from the least important end of the body until the cache
    /// is back at its budget. Returns how many entries were dropped per layer.
    ///
    /// Fails with [`Error::SinkViolation`] when more entries arrived since the
    /// last eviction than the body can hold.
    pub fn evict_to_budget(&mut self) -> Result<usize> {
        let body_slots = self.budget - self.sink_size;
        if self.fresh > body_slots {
            return Err(Error::SinkViolation {
                needed: self.fresh,
                body: body_slots,
            });
        }
        self.fresh = 0;
        let len = self.len();
        if len <= self.budget {
            return Ok(0);
        }
        for (layer, scores) in self.layers.iter_mut().zip(&mut self.scores) {
            layer.truncate(self.budget);
            scores.truncate(self.budget);
        }
        Ok(len - self.budget)
    }

    pub fn view(&self, policy: PositionPolicy) -> CacheView<'_> {
        let layers: Vec<&[KvEntry]> = self.layers.iter().map(Vec::as_slice).collect();
        let compact = match policy {
            PositionPolicy::Original => None,
            PositionPolicy::Compact => Some(Compaction::new(&layers)),
        };
        CacheView {
            layers,
            compact,
            sorted: false,
        }
    }

    /// Writes one JSON object per entry: `{"pos", "layer", "score"}`.
    /// Sink entries and unscored fresh entries carry a null score.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            pos: usize,
            layer: usize,
            score: Option<f64>,
        }
        for (layer, (entries, scores)) in self.layers.iter().zip(&self.scores).enumerate() {
            for (e, s) in entries.iter().zip(scores) {
                serde_json::to_writer(
                    &mut out,
                    &Row {
                        pos: e.origin_pos,
                        layer,
                        score: *s,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// How a backend positions cached keys at attention time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Each key keeps the absolute position it was generated at.
    #[default]
    Original,
    /// Surviving keys are renumbered `0..len` in generation order and the
    /// queries follow directly after them.
    Compact,
}

#[derive(Debug, Clone)]
struct Compaction {
    ranks: Vec<Vec<usize>>,
    next_origin: usize,
}

impl Compaction {
    fn new(layers: &[&[KvEntry]]) -> Self {
        let ranks = layers
            .iter()
            .map(|entries| {
                let mut order: Vec<usize> = (0..entries.len()).collect();
                order.sort_by_key(|&i| entries[i].origin_pos);
                let mut rank = vec![0; entries.len()];
                for (r, i) in order.into_iter().enumerate() {
                    rank[i] = r;
                }
                rank
            })
            .collect();
        let next_origin = layers
            .first()
            .and_then(|e| e.iter().map(|e| e.origin_pos).max())
            .map_or(0, |p| p + 1);
        Self { ranks, next_origin }
    }
}

/// Read-only view of a cache handed to a forward pass.
#[derive(Debug, Clone)]
pub struct CacheView<'a> {
    layers: Vec<&'a [KvEntry]>,
    compact: Option<Compaction>,
    sorted: bool,
}

impl<'a> CacheView<'a> {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            layers: vec![&[]; num_layers],
            compact: None,
            sorted: true,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self, layer: usize) -> &'a [KvEntry] {
        self.layers[layer]
    }

    /// True when keys sit at their generation positions, so
    /// [`KvEntry::key_at_origin`] can be used as is.
    pub fn keeps_origin_positions(&self) -> bool {
        self.compact.is_none()
    }

    pub fn key_position(&self, layer: usize, index: usize) -> usize {
        match &self.compact {
            None => self.layers[layer][index].origin_pos,
            Some(c) => c.ranks[layer][index],
        }
    }

    /// Position a new token at absolute position `pos` attends from.
    pub fn query_position(&self, pos: usize) -> usize {
        match &self.compact {
            None => pos,
            Some(c) => self.len() + pos.saturating_sub(c.next_origin),
        }
    }

    /// Up to `n` entries of `layer` with the greatest positions below
    /// `before`, oldest first.
    pub fn latest_before(&self, layer: usize, before: usize, n: usize) -> Vec<&'a KvEntry> {
        let entries = self.layers[layer];
        let mut picked: Vec<&KvEntry> = if self.sorted {
            let end = entries.partition_point(|e| e.origin_pos < before);
            entries[end.saturating_sub(n)..end].iter().collect()
        } else {
            let mut all: Vec<&KvEntry> = entries.iter().filter(|e| e.origin_pos < before).collect();
            all.sort_by_key(|e| e.origin_pos);
            let skip = all.len().saturating_sub(n);
            all.split_off(skip)
        };
        picked.sort_by_key(|e| e.origin_pos);
        picked
    }
}
