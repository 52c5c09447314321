use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use swiftdec::engine::{generate, generate_ar, EngineConfig};
use swiftdec::kvcache::importance_scores;
use swiftdec::metrics::{distinct_n, CostModel, HardwareProfile, ModelProfile};
use swiftdec::model::{DraftBehavior, Fallback, TableLm};
use swiftdec::ngram::NGramTable;
use swiftdec::sampling::{
    penalized_probs, truncate, PenaltyWindow, SamplerConfig, TokenSet, Truncation,
};
use swiftdec::tree::{build_tree, mask_check, TreeConfig};
use swiftdec::TokenId;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn brute_counts(seq: &[TokenId], n: usize) -> HashMap<Vec<TokenId>, u64> {
    let mut counts = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn ngram_counts_match_brute_force(
        seq in prop::collection::vec(0u32..6, 0..80),
        cuts in prop::collection::vec(1usize..6, 1..40),
        n in 1usize..5,
    ) {
        let mut table = NGramTable::new(n, 20);
        let mut at = 0;
        for c in cuts.iter().cycle() {
            if at >= seq.len() { break; }
            let end = (at + c).min(seq.len());
            table.update(&seq[at..end], &seq[..at]);
            at = end;
        }
        let expected = brute_counts(&seq, n);
        prop_assert_eq!(table.len(), expected.len());
        for (gram, count) in expected {
            prop_assert_eq!(table.frequency(&gram), count);
        }
    }

    #[test]
    fn retrieval_is_sorted_and_filtered(seq in prop::collection::vec(0u32..5, 4..120), first in 0u32..5) {
        let mut table = NGramTable::new(3, 20);
        table.update(&seq, &[]);
        let got = table.retrieve(first, 20);
        let freqs: Vec<u64> = got.iter().map(|g| table.frequency(g)).collect();
        prop_assert!(got.iter().all(|g| g[0] == first));
        prop_assert!(freqs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tree_mask_is_ancestor_closure(
        widths in prop::collection::vec(1usize..4, 1..5),
        grams in prop::collection::vec(prop::collection::vec(0u32..6, 4), 0..6),
    ) {
        let depth = widths.len();
        let heads: Vec<Vec<TokenId>> = widths
            .iter()
            .enumerate()
            .map(|(d, &w)| (0..w as u32).map(|i| 10 * d as u32 + i).collect())
            .collect();
        let grams: Vec<Vec<TokenId>> = grams
            .into_iter()
            .map(|mut g| {
                g[0] = heads[0][0];
                g[..depth].to_vec()
            })
            .collect();
        let cfg = TreeConfig::new(widths.clone()).unwrap();
        let tree = build_tree(&heads, &grams, &cfg).unwrap();
        prop_assert!(mask_check(&tree));
        prop_assert_eq!(tree.head_leaf_count(), widths.iter().product::<usize>());
        let unique: HashSet<Vec<TokenId>> = tree.paths().iter().map(|p| p.tokens.clone()).collect();
        prop_assert_eq!(unique.len(), tree.paths().len());
    }

    #[test]
    fn grouped_scores_match_replicated_keys(
        group in prop::sample::select(vec![1usize, 2, 4]),
        kv_heads in 1usize..3,
        len in 1usize..8,
        seed in any::<u64>(),
    ) {
        let hd = 4;
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        };
        let queries: Vec<Vec<f32>> = (0..kv_heads * group).map(|_| (0..hd).map(|_| next()).collect()).collect();
        let keys: Vec<Vec<Vec<f32>>> = (0..len)
            .map(|_| (0..kv_heads).map(|_| (0..hd).map(|_| next()).collect()).collect())
            .collect();
        let got = importance_scores(&queries, &keys, group).unwrap();
        for (pos, k) in keys.iter().enumerate() {
            let mut want = 0.0f64;
            for (j, q) in queries.iter().enumerate() {
                let rep = &k[j / group];
                want += q.iter().zip(rep).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
            }
            let g = got.as_slice()[pos];
            prop_assert!((g - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn penalty_matches_formula(
        logits in prop::collection::vec(-5.0f32..5.0, 2..20),
        history in prop::collection::vec(0u32..20, 0..30),
        theta in 1.0f64..3.0,
        temperature in 0.3f64..2.0,
        window in 1usize..10,
    ) {
        let w = PenaltyWindow::from_history(window, &history);
        let recent: HashSet<TokenId> = history[history.len().saturating_sub(window)..].iter().copied().collect();
        let cfg = SamplerConfig { theta, temperature, ..SamplerConfig::default() };
        let got = penalized_probs(&logits, &w, &cfg);
        let z: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let i_ = if recent.contains(&(i as TokenId)) { theta } else { 1.0 };
                (l as f64 / (temperature * i_)).exp()
            })
            .collect();
        let total: f64 = z.iter().sum();
        for (g, e) in got.probs().iter().zip(&z) {
            prop_assert!((g - e / total).abs() < 1e-12);
        }
        for t in 0..20u32 {
            prop_assert_eq!(w.contains(t), recent.contains(&t));
        }
    }

    #[test]
    fn extended_window_matches_rebuilt_window(
        history in prop::collection::vec(0u32..12, 0..30),
        suffix in prop::collection::vec(0u32..12, 0..6),
        cap in 1usize..10,
    ) {
        let base = PenaltyWindow::from_history(cap, &history);
        let view = base.extended(&suffix);
        let mut all = history.clone();
        all.extend_from_slice(&suffix);
        let rebuilt = PenaltyWindow::from_history(cap, &all);
        for t in 0..12u32 {
            prop_assert_eq!(view.contains(t), rebuilt.contains(t));
        }
    }

    #[test]
    fn truncation_rules_hold(
        logits in prop::collection::vec(-4.0f32..4.0, 2..30),
        p in 0.05f64..1.0,
    ) {
        let dist = penalized_probs(&logits, &PenaltyWindow::new(1), &SamplerConfig { theta: 1.0, ..SamplerConfig::default() });
        let probs = dist.probs().to_vec();

        let top = truncate(dist.clone(), Truncation::TopP(p));
        let kept: Vec<usize> = (0..probs.len()).filter(|&i| top.probs()[i] > 0.0).collect();
        let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
        prop_assert!(mass >= p - 1e-12);
        let smallest = kept.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(mass - smallest < p + 1e-12);

        let minp = truncate(dist.clone(), Truncation::MinP(p));
        let max = probs.iter().copied().fold(0.0, f64::max);
        for (i, &q) in probs.iter().enumerate() {
            prop_assert_eq!(minp.probs()[i] > 0.0, q >= p * max);
        }

        let eps = p * 0.1;
        let eta = truncate(dist.clone(), Truncation::Eta(eps));
        let h = dist.entropy();
        let threshold = eps.min(eps.sqrt() * (-h).exp());
        for (i, &q) in probs.iter().enumerate() {
            if i as TokenId != dist.argmax() {
                prop_assert_eq!(eta.probs()[i] > 0.0, q >= threshold);
            }
        }
        prop_assert!((eta.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distinct_is_label_free(seq in prop::collection::vec(0u32..8, 4..60), shift in 1u32..100) {
        let relabeled: Vec<TokenId> = seq.iter().map(|&t| (t * 7 + shift) % 1000).collect();
        for n in 1..=4 {
            prop_assert_eq!(distinct_n(&seq, n).unwrap(), distinct_n(&relabeled, n).unwrap());
            let d = distinct_n(&seq, n).unwrap();
            prop_assert!(d > 0.0 && d <= 1.0);
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn table_backend_is_lossless(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..4, 4),
        k in 0usize..8,
        sink in 1usize..8,
        extra in 5usize..40,
        rule in 0usize..3,
        draft in 0usize..3,
    ) {
        let mut model = TableLm::new(40, 3, 2, Fallback::Seeded { seed, scale: 2.5 })
            .unwrap()
            .with_draft([DraftBehavior::Echo, DraftBehavior::Blind, DraftBehavior::Disagree][draft]);
        model.insert_phrase(&[30, 31, 32, 33, 34, 35, 36]).unwrap();
        let prompt: Vec<TokenId> = (0..20).map(|i| (i * 3 % 40) as TokenId).collect();
        let mut cfg = EngineConfig {
            target_length: 250,
            sink_size: sink,
            budget: sink + extra,
            tree: TreeConfig::new(widths).unwrap(),
            k,
            seed,
            ..EngineConfig::default()
        };
        cfg.sampler.seed = seed;
        cfg.sampler.truncation = [Truncation::TopP(0.9), Truncation::MinP(0.1), Truncation::Eta(0.02)][rule];
        let ar = generate_ar(&model, &prompt, &cfg).unwrap();
        let (sw, m) = generate(&model, &prompt, cfg).unwrap();
        prop_assert_eq!(&sw[..ar.len()], &ar[..]);
        prop_assert!(m.beta <= m.alpha);
        prop_assert!(m.alpha >= 0.25 && m.alpha <= 1.0);
    }

    #[test]
    fn cost_model_is_monotone_in_acceptance(
        base in prop::collection::vec(1usize..4, 10..40),
        bumps in prop::collection::vec(any::<bool>(), 40),
    ) {
        let cost = CostModel::new(HardwareProfile::a100(), ModelProfile::llama_8b());
        let trace = |accepted: &[usize]| {
            let mut full = 1000;
            accepted
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let r = swiftdec::engine::IterationRecord {
                        step: i,
                        gamma: 3,
                        accepted: a,
                        ngram_accepted: 0,
                        origin: swiftdec::tree::BranchOrigin::Heads,
                        forwards: 2,
                        tokens: vec![0; a],
                        partial_len: 256,
                        full_len: full,
                        verify_tokens: 41,
                        refreshed: false,
                    };
                    full += a;
                    r
                })
                .collect::<Vec<_>>()
        };
        let better: Vec<usize> = base
            .iter()
            .zip(&bumps)
            .map(|(&a, &b)| if b { a + 1 } else { a })
            .collect();
        // Same iteration count, more tokens per iteration.
        let lo = cost.simulated_speedup(1001, &trace(&base));
        let hi = cost.simulated_speedup(1001, &trace(&better));
        prop_assert!(hi >= lo - 1e-12);
    }
}
