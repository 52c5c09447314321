// Speculative decoding reproduces plain decoding token for token, whatever
// the tree, cache budget or truncation rule.
//
// ```bash
// cargo run --release --example lossless_check
// ```

use swiftdec::engine::{generate, generate_ar, EngineConfig};
use swiftdec::model::{ModelConfig, TinyTransformer};
use swiftdec::sampling::Truncation;

pub fn run_example() -> swiftdec::Result<()> {
    let model = TinyTransformer::new(ModelConfig {
        num_kv_heads: 2,
        ..ModelConfig::default()
    })?;
    let prompt: Vec<u32> = (0..48).map(|i| (i * 11 % 256) as u32).collect();
    for (truncation, tree, budget) in [
        (Truncation::TopP(0.9), "1,3,3,3", 40),
        (Truncation::MinP(0.1), "2,2,2,1", 64),
        (Truncation::Eta(0.02), "1,1,1,1", 256),
    ] {
        let mut config = EngineConfig {
            target_length: 200,
            sink_size: 16,
            budget,
            tree: tree.parse()?,
            seed: 5,
            ..EngineConfig::default()
        };
        config.sampler.truncation = truncation;
        config.sampler.seed = 5;
        let reference = generate_ar(&model, &prompt, &config)?;
        let (fast, metrics) = generate(&model, &prompt, config)?;
        let same = fast[..reference.len()] == reference[..];
        println!(
            "{truncation:?} tree {tree} budget {budget}: identical {same}, {} iterations, alpha {:.3}",
            metrics.iterations, metrics.alpha
        );
        assert!(same);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
