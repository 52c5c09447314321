// Roofline arithmetic for one forward pass, and the simulated speedup of
// a speculative trace over plain decoding.
//
// ```bash
// cargo run --release --example cost_model
// ```

use swiftdec::engine::{prefill, EngineConfig};
use swiftdec::metrics::{CostModel, HardwareProfile, ModelProfile};
use swiftdec::model::{DraftBehavior, Fallback, TableLm};

pub fn run_example() -> swiftdec::Result<()> {
    let hw = HardwareProfile::a100();
    println!(
        "weight load for 15.0 GB: {:.2} ms",
        hw.load_time(15.0e9) * 1e3
    );
    println!(
        "compute for 83.9 G ops: {:.3} ms",
        hw.compute_time(83.9e9) * 1e3
    );

    let model = TableLm::new(64, 3, 2, Fallback::Successor)?.with_draft(DraftBehavior::Echo);
    let prompt: Vec<u32> = (0..64).collect();
    let mut session = prefill(
        &model,
        &prompt,
        EngineConfig {
            target_length: 4000,
            ..EngineConfig::default()
        },
    )?;
    session.run()?;
    let cost = CostModel::new(hw, ModelProfile::llama_8b());
    let m = session.metrics()?;
    println!(
        "alpha {:.3}, simulated speedup {:.2}x",
        m.alpha,
        cost.simulated_speedup(prompt.len(), session.records())
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
