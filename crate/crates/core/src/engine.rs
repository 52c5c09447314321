//! The generation loop.
//!
//! A [`Session`] owns everything one generation needs: the committed
//! sequence, both caches, the penalty window and the n-gram table. Each
//! [`Session::step`] drafts once over the partial cache, verifies the whole
//! candidate trie once over the full cache, and commits the longest exactly
//! matching branch plus the target token at the first mismatch.
//!
//! The last committed token is always held back from the full cache: it is
//! the root that the next verification pass feeds first, and its output is
//! what checks the depth-0 candidates.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::kvcache::{self, FullCache, ImportanceScores, KvEntry, PartialCache, PositionPolicy};
use crate::metrics::{PhaseTimes, RunMetrics};
use crate::model::{AttentionMask, ForwardOutput, ForwardRequest, LanguageModel};
use crate::ngram::NGramTable;
use crate::sampling::{keyed_deviate, penalized_probs, sample_token, PenaltyWindow, SamplerConfig};
use crate::tree::{build_tree, BranchOrigin, TreeConfig};
use crate::{Error, Result, TokenId};

/// Counter stream used for picking among equally long branches.
const CHOICE_STREAM: u64 = 1;

/// When the target token after the accepted prefix is emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonusPolicy {
    /// Emit it at every mismatch.
    #[default]
    Always,
    /// Emit only accepted draft tokens, falling back to the target token when
    /// nothing was accepted.
    WhenStuck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub target_length: usize,
    /// `|S|`: leading entries the partial cache never drops.
    pub sink_size: usize,
    /// `|B|`: partial-cache capacity.
    pub budget: usize,
    pub tree: TreeConfig,
    /// N-grams retrieved per step; `0` disables token reutilization.
    pub k: usize,
    pub sampler: SamplerConfig,
    /// Seeds the choice among equally long accepted branches.
    pub seed: u64,
    #[serde(default)]
    pub bonus: BonusPolicy,
    #[serde(default)]
    pub positions: PositionPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            target_length: 2048,
            sink_size: 32,
            budget: 256,
            tree: TreeConfig::default(),
            k: 20,
            sampler: SamplerConfig::default(),
            seed: 0,
            bonus: BonusPolicy::Always,
            positions: PositionPolicy::Original,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, gamma: usize) -> Result<()> {
        if self.target_length == 0 {
            return Err(Error::Config("target_length must be at least 1".into()));
        }
        if self.budget <= self.sink_size {
            return Err(Error::BudgetTooSmall {
                budget: self.budget,
                sink: self.sink_size,
            });
        }
        if self.budget - self.sink_size < gamma + 2 {
            return Err(Error::Config(format!(
                "budget {} leaves {} body slots; need at least gamma + 2 = {}",
                self.budget,
                self.budget - self.sink_size,
                gamma + 2
            )));
        }
        self.tree.validate()?;
        if self.tree.depth() != gamma + 1 {
            return Err(Error::Config(format!(
                "tree has {} levels but the model drafts gamma + 1 = {}",
                self.tree.depth(),
                gamma + 1
            )));
        }
        self.sampler.validate().map_err(Error::Config)
    }
}

/// One iteration of the loop, as written to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    pub gamma: usize,
    /// Tokens committed this iteration (`a_i`).
    pub accepted: usize,
    /// `a_i` when the chosen branch was a recalled n-gram, else `0`.
    pub ngram_accepted: usize,
    pub origin: BranchOrigin,
    /// Model forward passes this iteration.
    pub forwards: usize,
    pub tokens: Vec<TokenId>,
    /// Partial-cache entries the draft pass attended over.
    pub partial_len: usize,
    /// Full-cache entries the verification pass attended over.
    pub full_len: usize,
    /// Tokens in the verification pass (root plus trie nodes).
    pub verify_tokens: usize,
    pub refreshed: bool,
}

pub struct Session<'m, M: LanguageModel + ?Sized> {
    model: &'m M,
    config: EngineConfig,
    prompt_len: usize,
    tokens: Vec<TokenId>,
    full: FullCache,
    partial: PartialCache,
    /// Per layer, summed queries of the last committed pass.
    recent_queries: Vec<Vec<f32>>,
    window: PenaltyWindow,
    ngrams: NGramTable,
    generated: usize,
    records: Vec<IterationRecord>,
    times: PhaseTimes,
}

fn check_prompt(
    prompt: &[TokenId],
    config: &EngineConfig,
    max_positions: usize,
    depth: usize,
) -> Result<()> {
    if prompt.len() <= config.sink_size || prompt.is_empty() {
        return Err(Error::PromptTooShort {
            len: prompt.len(),
            min: config.sink_size,
        });
    }
    let needed = prompt.len() + config.target_length + depth;
    if needed > max_positions {
        return Err(Error::Config(format!(
            "prompt plus target needs {needed} positions, model supports {max_positions}"
        )));
    }
    Ok(())
}

/// Runs every prompt token but the last through the model and returns the
/// resulting cache and the pass's output.
fn prefill_full<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
) -> Result<(FullCache, Option<ForwardOutput>)> {
    let layers = model.config().num_layers;
    let mut full = FullCache::new(layers);
    if prompt.len() < 2 {
        return Ok((full, None));
    }
    let body = prompt[..prompt.len() - 1].to_vec();
    let out = model.forward(&ForwardRequest::sequential(body, 0), &full.view())?;
    for e in out.entries.iter().cloned() {
        full.push(e)?;
    }
    Ok((full, Some(out)))
}

fn sum_queries(rows: &[&Vec<Vec<f32>>], layers: usize, width: usize) -> Vec<Vec<f32>> {
    let mut acc = vec![vec![0.0f32; width]; layers];
    for row in rows {
        for (a, q) in acc.iter_mut().zip(row.iter()) {
            for (x, v) in a.iter_mut().zip(q) {
                *x += v;
            }
        }
    }
    acc
}

fn query_width<M: LanguageModel + ?Sized>(model: &M, out: Option<&ForwardOutput>) -> usize {
    out.and_then(|o| o.queries.first())
        .and_then(|q| q.first())
        .map_or(model.config().hidden_dim, Vec::len)
}

/// Starts a session: full-cache prefill, then the partial cache from the
/// prompt's importance scores.
pub fn prefill<'m, M: LanguageModel + ?Sized>(
    model: &'m M,
    prompt: &[TokenId],
    config: EngineConfig,
) -> Result<Session<'m, M>> {
    let mcfg = model.config();
    config.validate(mcfg.gamma)?;
    check_prompt(prompt, &config, mcfg.max_positions, config.tree.depth())?;

    let start = Instant::now();
    let (full, out) = prefill_full(model, prompt)?;
    let width = query_width(model, out.as_ref());
    let recent_queries = match &out {
        Some(o) => sum_queries(
            &[o.queries.last().expect("non-empty")],
            mcfg.num_layers,
            width,
        ),
        None => vec![vec![0.0; width]; mcfg.num_layers],
    };

    let scores = importance(model, &full, &recent_queries, config.sink_size)?;
    let partial = kvcache::prefill_partial(&full, config.sink_size, config.budget, &scores)?;
    let mut session = Session {
        model,
        prompt_len: prompt.len(),
        tokens: prompt.to_vec(),
        partial,
        full,
        recent_queries,
        window: PenaltyWindow::from_history(config.sampler.window, prompt),
        ngrams: NGramTable::new(mcfg.gamma + 1, config.k),
        generated: 0,
        records: Vec::new(),
        times: PhaseTimes::default(),
        config,
    };
    session.times.prefill += start.elapsed();
    Ok(session)
}

impl<'m, M: LanguageModel + ?Sized> Session<'m, M> {
    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Prompt plus everything committed so far.
    pub fn committed(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn full_cache(&self) -> &FullCache {
        &self.full
    }

    pub fn partial_cache(&self) -> &PartialCache {
        &self.partial
    }

    pub fn ngram_table(&self) -> &NGramTable {
        &self.ngrams
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.generated >= self.config.target_length
    }

    /// One draft–verify–commit iteration.
    pub fn step(&mut self) -> Result<IterationRecord> {
        if self.is_done() {
            return Err(Error::SessionExhausted {
                target: self.config.target_length,
            });
        }
        let gamma = self.model.config().gamma;
        let depth = gamma + 1;
        let sampler = self.config.sampler;
        let n = self.tokens.len();
        let root = self.tokens[n - 1];

        let refreshed = kvcache::needs_refresh(self.full.len(), &self.partial);
        if refreshed {
            let scores = importance(
                self.model,
                &self.full,
                &self.recent_queries,
                self.config.sink_size,
            )?;
            self.partial = kvcache::refresh(&self.full, &self.partial, &scores)?;
        }

        let partial_len = self.partial.len();
        // Draft: one pass over the partial cache yields p_0 … p_γ.
        let t_draft = Instant::now();
        let draft = self.model.forward(
            &ForwardRequest::sequential(vec![root], n - 1).with_draft_heads(),
            &self.partial.view(self.config.positions),
        )?;
        let bundle = &draft.bundles[0];
        let per_head: Vec<Vec<TokenId>> = (0..depth)
            .map(|k| {
                let probs = penalized_probs(bundle.head(k), &self.window, &sampler);
                let mut ranked = probs.ranked();
                ranked.truncate(self.config.tree.widths[k]);
                ranked
            })
            .collect();
        let grams = self.ngrams.retrieve(per_head[0][0], self.config.k);
        let tree = build_tree(&per_head, &grams, &self.config.tree)?;
        self.times.draft += t_draft.elapsed();

        // Verify: root plus every trie node in one masked pass.
        let t_verify = Instant::now();
        let rows = tree.len() + 1;
        let mut mask = AttentionMask::new(rows, rows);
        mask.set(0, 0, true);
        for i in 0..tree.len() {
            mask.set(i + 1, 0, true);
            for j in 0..tree.len() {
                if tree.mask().get(i, j) {
                    mask.set(i + 1, j + 1, true);
                }
            }
        }
        let mut tokens = Vec::with_capacity(rows);
        let mut positions = Vec::with_capacity(rows);
        tokens.push(root);
        positions.push(n - 1);
        for i in 0..tree.len() {
            tokens.push(tree.tokens()[i]);
            positions.push(n + tree.position_offset(i));
        }
        let full_len = self.full.len();
        let verify = self.model.forward(
            &ForwardRequest {
                tokens,
                positions,
                mask: Some(mask),
                draft_heads: false,
            },
            &self.full.view(),
        )?;

        // Target token after each row, drawn at the position it predicts.
        // Only rows on a matching prefix are ever consulted, so they are
        // sampled on demand.
        let mut targets: Vec<Option<TokenId>> = vec![None; rows];
        let window = &self.window;
        let mut target = |row: usize| -> TokenId {
            *targets[row].get_or_insert_with(|| {
                if row == 0 {
                    return sample_token(verify.bundles[0].target(), window, &sampler, n);
                }
                let node = row - 1;
                let path = tree.path_tokens(node);
                let pos = n + tree.position_offset(node) + 1;
                sample_token(
                    verify.bundles[row].target(),
                    &window.extended(&path),
                    &sampler,
                    pos,
                )
            })
        };

        // Exact-match acceptance along each leaf path.
        let accepted: Vec<usize> = tree
            .paths()
            .iter()
            .map(|p| {
                let mut expected = target(0);
                let mut m = 0;
                for &node in &p.nodes {
                    if tree.tokens()[node] != expected {
                        break;
                    }
                    m += 1;
                    expected = target(node + 1);
                }
                m
            })
            .collect();
        let best = accepted.iter().copied().max().unwrap_or(0);
        let pick = choose_longest(&accepted, self.config.seed, self.records.len() as u64);
        let chosen = &tree.paths()[pick];

        let m = best;
        let mut emitted: Vec<TokenId> = chosen.tokens[..m].to_vec();
        let bonus = match self.config.bonus {
            BonusPolicy::Always => m < depth,
            BonusPolicy::WhenStuck => m == 0,
        };
        if bonus {
            let after = if m == 0 { 0 } else { chosen.nodes[m - 1] + 1 };
            emitted.push(target(after));
        }
        let a = emitted.len();

        // The root and every emitted token but the last enter the caches.
        let mut committed_rows: Vec<usize> = vec![0];
        committed_rows.extend(chosen.nodes[..a - 1].iter().map(|&node| node + 1));
        let new_entries: Vec<Vec<KvEntry>> = committed_rows
            .iter()
            .map(|&r| verify.entries[r].clone())
            .collect();
        for e in &new_entries {
            self.full.push(e.clone())?;
        }
        self.partial.insert_fresh(&new_entries)?;
        self.partial.evict_to_budget()?;
        let query_rows: Vec<&Vec<Vec<f32>>> =
            committed_rows.iter().map(|&r| &verify.queries[r]).collect();
        let width = self.recent_queries.first().map_or(0, Vec::len);
        self.recent_queries = sum_queries(&query_rows, self.full.num_layers(), width);
        self.times.verify += t_verify.elapsed();

        self.ngrams
            .update(&emitted, &self.tokens[self.prompt_len..]);
        self.window.extend(&emitted);
        self.tokens.extend_from_slice(&emitted);
        self.generated += a;

        let origin = chosen.origin;
        let record = IterationRecord {
            step: self.records.len(),
            gamma,
            accepted: a,
            ngram_accepted: if origin.is_ngram() { a } else { 0 },
            origin,
            forwards: 2,
            tokens: emitted,
            partial_len,
            full_len,
            verify_tokens: rows,
            refreshed,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Steps until the target is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<RunMetrics> {
        RunMetrics::from_records(
            &self.records,
            self.model.config().gamma,
            self.generated(),
            self.times,
        )
    }
}

/// Index of a path with the maximal accepted length, uniform among ties and
/// keyed by `(seed, step)`.
pub fn choose_longest(accepted: &[usize], seed: u64, step: u64) -> usize {
    let best = accepted.iter().copied().max().unwrap_or(0);
    let longest: Vec<usize> = (0..accepted.len())
        .filter(|&i| accepted[i] == best)
        .collect();
    if longest.len() == 1 {
        return longest[0];
    }
    let u = keyed_deviate(seed, CHOICE_STREAM, step);
    longest[((u * longest.len() as f64) as usize).min(longest.len() - 1)]
}

fn importance<M: LanguageModel + ?Sized>(
    model: &M,
    full: &FullCache,
    queries: &[Vec<f32>],
    sink_size: usize,
) -> Result<Vec<ImportanceScores>> {
    let mcfg = model.config();
    (0..full.num_layers())
        .map(|l| {
            kvcache::score_entries(
                &queries[l],
                full.layer(l),
                sink_size,
                mcfg.num_heads,
                mcfg.num_kv_heads,
            )
        })
        .collect()
}

/// Speculative generation. Returns every generated token (the last
/// iteration may run past `target_length` by up to `γ`) and the run's
/// metrics.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: EngineConfig,
) -> Result<(Vec<TokenId>, RunMetrics)> {
    let mut session = prefill(model, prompt, config)?;
    session.run()?;
    let metrics = session.metrics()?;
    Ok((session.generated().to_vec(), metrics))
}

/// Plain token-by-token decoding over the full cache with the same sampler
/// and position-keyed randomness. Produces exactly `target_length` tokens.
pub fn generate_ar<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &EngineConfig,
) -> Result<Vec<TokenId>> {
    let mcfg = model.config();
    config.validate(mcfg.gamma)?;
    check_prompt(prompt, config, mcfg.max_positions, 1)?;
    let (mut full, _) = prefill_full(model, prompt)?;
    let mut window = PenaltyWindow::from_history(config.sampler.window, prompt);
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(config.target_length);
    while out.len() < config.target_length {
        let n = tokens.len();
        let step = model.forward(
            &ForwardRequest::sequential(vec![tokens[n - 1]], n - 1),
            &full.view(),
        )?;
        let next = sample_token(step.bundles[0].target(), &window, &config.sampler, n);
        for e in step.entries {
            full.push(e)?;
        }
        window.push(next);
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Wall-clock duration of an autoregressive run, for measured speedups.
pub fn time_ar<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &EngineConfig,
) -> Result<(Vec<TokenId>, Duration)> {
    let start = Instant::now();
    let out = generate_ar(model, prompt, config)?;
    Ok((out, start.elapsed()))
}
