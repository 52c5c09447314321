// How the contextual penalty changes diversity: the same tiny model
// decoded with and without the penalty.
//
// ```bash
// cargo run --release --example contextual_penalty
// ```

use swiftdec::engine::{generate_ar, EngineConfig};
use swiftdec::metrics::distinct_n;
use swiftdec::model::{ModelConfig, TinyTransformer};
use swiftdec::sampling::{penalized_probs, truncate, PenaltyWindow, SamplerConfig, Truncation};

pub fn run_example() -> swiftdec::Result<()> {
    let logits = [2.0f32, 1.5, 1.0, -0.5];
    let window = PenaltyWindow::from_history(8, &[0]);
    for theta in [1.0, 1.2, 2.0] {
        let cfg = SamplerConfig {
            theta,
            ..SamplerConfig::default()
        };
        let p = penalized_probs(&logits, &window, &cfg);
        let kept = truncate(p.clone(), Truncation::MinP(0.1));
        println!(
            "theta {theta}: {:.3?} -> min-p keeps {:?}",
            p.probs(),
            kept.ranked()
        );
    }

    let model = TinyTransformer::new(ModelConfig::default())?;
    let prompt: Vec<u32> = (0..64).map(|i| (i * 37 % 256) as u32).collect();
    for theta in [1.0, 1.2] {
        let mut config = EngineConfig {
            target_length: 500,
            ..EngineConfig::default()
        };
        config.sampler.theta = theta;
        let out = generate_ar(&model, &prompt, &config)?;
        let d: Vec<String> = (1..=4)
            .map(|n| distinct_n(&out, n).map(|v| format!("{v:.3}")))
            .collect::<Result<_, _>>()?;
        println!("theta {theta}: distinct-1..4 = {}", d.join(" "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
