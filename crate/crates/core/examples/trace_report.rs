// Writing a JSONL trace and recomputing the run's metrics from it alone.
//
// ```bash
// cargo run --release --example trace_report
// ```

use swiftdec::engine::{prefill, EngineConfig};
use swiftdec::metrics::{read_trace, write_trace, RunMetrics};
use swiftdec::model::{DraftBehavior, Fallback, TableLm};

pub fn run_example() -> swiftdec::Result<()> {
    let mut model = TableLm::new(
        128,
        3,
        2,
        Fallback::Seeded {
            seed: 3,
            scale: 2.0,
        },
    )?
    .with_draft(DraftBehavior::Blind);
    model.insert_phrase(&[90, 91, 92, 93, 94, 95, 96, 97])?;
    let prompt: Vec<u32> = (0..40).collect();
    let mut session = prefill(
        &model,
        &prompt,
        EngineConfig {
            target_length: 600,
            ..EngineConfig::default()
        },
    )?;
    session.run()?;

    let mut buf = Vec::new();
    write_trace(session.records(), &mut buf)?;
    let records = read_trace(buf.as_slice())?;
    let live = session.metrics()?;
    let replay = RunMetrics::from_trace(&records)?;
    println!("{} lines of trace", records.len());
    println!("alpha live {:.4} replayed {:.4}", live.alpha, replay.alpha);
    println!("beta  live {:.4} replayed {:.4}", live.beta, replay.beta);
    assert_eq!(live.distinct, replay.distinct);
    Ok(())
}

#[allow(dead_code)]
fn main() -> swiftdec::Result<()> {
    run_example()
}
