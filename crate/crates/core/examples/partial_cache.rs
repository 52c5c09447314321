// Building a budgeted partial cache from importance scores, growing it with
// fresh entries, and refreshing it once the body has been outgrown.
//
// ```bash
// cargo run --example partial_cache
// ```

use swiftdec::kvcache::{
    needs_refresh, prefill_partial, refresh, score_entries, FullCache, ImportanceScores,
};
use swiftdec::model::{ForwardRequest, LanguageModel, ModelConfig, TinyTransformer};

fn scores(
    full: &FullCache,
    query: &[Vec<f32>],
    cfg: &ModelConfig,
    sink: usize,
) -> swiftdec::Result<Vec<ImportanceScores>> {
    (0..full.num_layers())
        .map(|l| {
            score_entries(
                &query[l],
                full.layer(l),
                sink,
                cfg.num_heads,
                cfg.num_kv_heads,
            )
        })
        .collect()
}

pub fn run_example() -> swiftdec::Result<()> {
    let cfg = ModelConfig {
        num_kv_heads: 2,
        ..ModelConfig::default()
    };
    let model = TinyTransformer::new(cfg.clone())?;
    let (sink, budget) = (4, 16);

    let prompt: Vec<u32> = (0..40).map(|i| (i * 7 % 256) as u32).collect();
    let mut full = FullCache::new(cfg.num_layers);
    let out = model.forward(&ForwardRequest::sequential(prompt.clone(), 0), &full.view())?;
    for e in out.entries {
        full.push(e)?;
    }
    let query = out.queries.last().expect("non-empty prompt").clone();
    let mut partial = prefill_partial(&full, sink, budget, &scores(&full, &query, &cfg, sink)?)?;
    let kept: Vec<usize> = partial.layer(0).iter().map(|e| e.origin_pos).collect();
    println!("kept positions after prefill: {kept:?}");

    let mut next = prompt.len();
    while !needs_refresh(full.len(), &partial) {
        let step = model.forward(&ForwardRequest::sequential(vec![1], next), &full.view())?;
        full.push(step.entries[0].clone())?;
        partial.insert_fresh(&step.entries)?;
        let evicted = partial.evict_to_budget()?;
        println!(
            "pos {next}: partial {} entries, evicted {evicted}",
            partial.len()
        );
        next += 1;
    }
    partial = refresh(&full, &partial, &scores(&full, &query, &cfg, sink)?)?;
    let kept: Vec<usize> = partial.layer(0).iter().map(|e| e.origin_pos).collect();
    println!("kept positions after refresh: {kept:?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
