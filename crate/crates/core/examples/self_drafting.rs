// One forward pass of the tiny transformer yields the target distribution
// plus three drafted positions through the residual draft heads.
//
// ```bash
// cargo run --example self_drafting
// ```

use swiftdec::kvcache::CacheView;
use swiftdec::model::{ForwardRequest, LanguageModel, ModelConfig, TinyTransformer};
use swiftdec::sampling::{penalized_probs, PenaltyWindow, SamplerConfig};

pub fn run_example() -> swiftdec::Result<()> {
    let model = TinyTransformer::new(ModelConfig::default())?;
    let prompt = vec![10, 20, 30, 40, 50];
    let request = ForwardRequest::sequential(prompt.clone(), 0).with_draft_heads();
    let out = model.forward(&request, &CacheView::empty(model.config().num_layers))?;

    let last = out.bundles.last().expect("one bundle per token");
    let window = PenaltyWindow::from_history(1024, &prompt);
    let sampler = SamplerConfig::default();
    for (k, logits) in last.iter().enumerate() {
        let probs = penalized_probs(logits, &window, &sampler);
        let top: Vec<_> = probs.ranked().into_iter().take(3).collect();
        let label = if k == 0 {
            "target".to_string()
        } else {
            format!("head {k}")
        };
        println!(
            "{label:>7}: top-3 {top:?}, p(top) = {:.3}",
            probs.probs()[top[0] as usize]
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
