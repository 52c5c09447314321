//! Acceptance rates, diversity, the roofline cost model, and trace I/O.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::IterationRecord;
use crate::{Error, Result, TokenId};

/// Wall-clock time spent in each phase of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub prefill: Duration,
    pub draft: Duration,
    pub verify: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.prefill + self.draft + self.verify
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardCounts {
    pub prefill: usize,
    pub draft: usize,
    pub verify: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub gamma: usize,
    pub iterations: usize,
    pub tokens: usize,
    pub accepted: Vec<usize>,
    pub ngram_accepted: Vec<usize>,
    pub forward_counts: ForwardCounts,
    pub wall_times: PhaseTimes,
    pub alpha: f64,
    pub beta: f64,
    /// Distinct-n for every `n` in `1..=4` the output is long enough for.
    pub distinct: BTreeMap<usize, f64>,
}

impl RunMetrics {
    pub fn from_records(
        records: &[IterationRecord],
        gamma: usize,
        generated: &[TokenId],
        wall_times: PhaseTimes,
    ) -> Result<Self> {
        let mut distinct = BTreeMap::new();
        for n in 1..=4 {
            if generated.len() >= n {
                distinct.insert(n, distinct_n(generated, n)?);
            }
        }
        let draft = records.iter().map(|r| r.forwards.min(1)).sum();
        let verify = records.iter().map(|r| r.forwards.saturating_sub(1)).sum();
        Ok(Self {
            gamma,
            iterations: records.len(),
            tokens: generated.len(),
            accepted: records.iter().map(|r| r.accepted).collect(),
            ngram_accepted: records.iter().map(|r| r.ngram_accepted).collect(),
            forward_counts: ForwardCounts {
                prefill: 1,
                draft,
                verify,
            },
            wall_times,
            alpha: acceptance_rate(records),
            beta: ngram_acceptance_rate(records),
            distinct,
        })
    }

    /// Rebuilds the aggregates from a trace alone. Wall times are not part of
    /// a trace and come back as zero.
    pub fn from_trace(records: &[IterationRecord]) -> Result<Self> {
        let gamma = records.first().map_or(0, |r| r.gamma);
        let tokens: Vec<TokenId> = records
            .iter()
            .flat_map(|r| r.tokens.iter().copied())
            .collect();
        Self::from_records(records, gamma, &tokens, PhaseTimes::default())
    }

    /// Mean of Distinct-1 through Distinct-4.
    pub fn distinct_avg(&self) -> f64 {
        if self.distinct.is_empty() {
            return 0.0;
        }
        self.distinct.values().sum::<f64>() / self.distinct.len() as f64
    }
}

fn rate(records: &[IterationRecord], f: impl Fn(&IterationRecord) -> usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let gamma = records[0].gamma;
    let total: usize = records.iter().map(f).sum();
    total as f64 / ((gamma + 1) * records.len()) as f64
}

/// `Σ a_i / ((γ+1)·T)`.
pub fn acceptance_rate(records: &[IterationRecord]) -> f64 {
    rate(records, |r| r.accepted)
}

/// `Σ b_i / ((γ+1)·T)`, crediting only iterations whose chosen branch was a
/// recalled n-gram.
pub fn ngram_acceptance_rate(records: &[IterationRecord]) -> f64 {
    rate(records, |r| r.ngram_accepted)
}

/// Ratio of per-token latencies.
pub fn speedup(ar_cost: f64, swift_cost: f64) -> f64 {
    ar_cost / swift_cost
}

/// Unique n-grams over total n-gram windows.
pub fn distinct_n(tokens: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 || tokens.len() < n {
        return Err(Error::SequenceTooShort {
            len: tokens.len(),
            n,
        });
    }
    let windows = tokens.len() - n + 1;
    let unique: HashSet<&[TokenId]> = tokens.windows(n).collect();
    Ok(unique.len() as f64 / windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Memory bandwidth in bytes per second.
    pub bandwidth: f64,
    /// Peak arithmetic throughput in operations per second.
    pub flops: f64,
}

impl HardwareProfile {
    /// A100-class numbers: 2.04e12 B/s, 312e12 FLOPS.
    pub fn a100() -> Self {
        Self {
            bandwidth: 2.04e12,
            flops: 312e12,
        }
    }

    pub fn load_time(&self, bytes: f64) -> f64 {
        bytes / self.bandwidth
    }

    pub fn compute_time(&self, ops: f64) -> f64 {
        ops / self.flops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub weight_bytes: f64,
    pub kv_bytes_per_token: f64,
    /// Dense operations per input token.
    pub ops_per_token: f64,
    /// Attention operations per input token per attended cache entry.
    pub attn_ops_per_entry: f64,
}

impl ModelProfile {
    /// Roughly an 8B GQA model in 16-bit weights.
    pub fn llama_8b() -> Self {
        Self {
            weight_bytes: 16.0e9,
            kv_bytes_per_token: 131_072.0,
            ops_per_token: 16.0e9,
            attn_ops_per_entry: 4.0 * 32.0 * 4096.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub hardware: HardwareProfile,
    pub model: ModelProfile,
}

impl CostModel {
    pub fn new(hardware: HardwareProfile, model: ModelProfile) -> Self {
        Self { hardware, model }
    }

    /// One forward of `tokens` inputs attending over `kv_len` cached entries:
    /// the slower of loading weights plus cache and doing the arithmetic.
    pub fn forward_time(&self, tokens: usize, kv_len: usize) -> f64 {
        let m = &self.model;
        let bytes = m.weight_bytes + kv_len as f64 * m.kv_bytes_per_token;
        let ops = tokens as f64 * (m.ops_per_token + kv_len as f64 * m.attn_ops_per_entry);
        self.hardware
            .load_time(bytes)
            .max(self.hardware.compute_time(ops))
    }

    /// Per-token latency of plain decoding: one forward per token with the
    /// cache growing from `prompt_len - 1` entries.
    pub fn ar_latency(&self, prompt_len: usize, tokens: usize) -> f64 {
        if tokens == 0 {
            return 0.0;
        }
        let start = prompt_len.saturating_sub(1);
        let total: f64 = (0..tokens).map(|i| self.forward_time(1, start + i)).sum();
        total / tokens as f64
    }

    /// Per-token latency of a speculative trace: each iteration pays one
    /// draft forward over the partial cache and one tree forward over the
    /// full cache.
    pub fn swift_latency(&self, records: &[IterationRecord]) -> f64 {
        let tokens: usize = records.iter().map(|r| r.accepted).sum();
        if tokens == 0 {
            return 0.0;
        }
        let total: f64 = records
            .iter()
            .map(|r| {
                self.forward_time(1, r.partial_len) + self.forward_time(r.verify_tokens, r.full_len)
            })
            .sum();
        total / tokens as f64
    }

    /// AR over speculative per-token latency for the same number of tokens.
    pub fn simulated_speedup(&self, prompt_len: usize, records: &[IterationRecord]) -> f64 {
        let tokens: usize = records.iter().map(|r| r.accepted).sum();
        speedup(
            self.ar_latency(prompt_len, tokens),
            self.swift_latency(records),
        )
    }
}

/// One JSON object per line.
pub fn write_trace<W: Write>(records: &[IterationRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<IterationRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 1)))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::BranchOrigin;

    fn record(accepted: usize, origin: BranchOrigin) -> IterationRecord {
        IterationRecord {
            step: 0,
            gamma: 3,
            accepted,
            ngram_accepted: if origin.is_ngram() { accepted } else { 0 },
            origin,
            forwards: 2,
            tokens: (0..accepted as TokenId).collect(),
            partial_len: 0,
            full_len: 0,
            verify_tokens: 1,
            refreshed: false,
        }
    }

    #[test]
    fn alpha_examples() {
        let full = vec![record(4, BranchOrigin::Heads); 3];
        assert_eq!(acceptance_rate(&full), 1.0);
        let mixed = [
            record(4, BranchOrigin::Heads),
            record(2, BranchOrigin::Heads),
        ];
        assert_eq!(acceptance_rate(&mixed), 0.75);
        let floor = vec![record(1, BranchOrigin::Heads); 9];
        assert_eq!(acceptance_rate(&floor), 0.25);
    }

    #[test]
    fn beta_examples() {
        let none = vec![record(3, BranchOrigin::Heads); 4];
        assert_eq!(ngram_acceptance_rate(&none), 0.0);
        let all = vec![record(4, BranchOrigin::NGram(0)); 4];
        assert_eq!(ngram_acceptance_rate(&all), 1.0);
        let half = [
            record(4, BranchOrigin::NGram(2)),
            record(4, BranchOrigin::Heads),
        ];
        assert_eq!(ngram_acceptance_rate(&half), 0.5);
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&[1, 2, 3, 4], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&[1, 2, 1, 2, 1, 2], 2).unwrap(), 0.4);
        assert_eq!(distinct_n(&[7; 8], 1).unwrap(), 1.0 / 8.0);
        assert!(matches!(
            distinct_n(&[1, 2], 3),
            Err(Error::SequenceTooShort { len: 2, n: 3 })
        ));
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(5.0, 5.0), 1.0);
        assert!((speedup(10.0, 10.0 / 3.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_two_arithmetic() {
        let hw = HardwareProfile::a100();
        assert!((hw.load_time(15.0e9) * 1e3 - 7.35).abs() < 0.01);
        assert!((hw.compute_time(83.9e9) * 1e3 - 0.269).abs() < 0.001);
    }

    #[test]
    fn closed_form_two_x() {
        let cost = CostModel::new(
            HardwareProfile {
                bandwidth: 1.0,
                flops: 1e30,
            },
            ModelProfile {
                weight_bytes: 1.0,
                kv_bytes_per_token: 0.0,
                ops_per_token: 0.0,
                attn_ops_per_entry: 0.0,
            },
        );
        let trace = vec![record(4, BranchOrigin::Heads); 10];
        assert!((cost.simulated_speedup(10, &trace) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trace_round_trip() {
        let trace = vec![
            record(4, BranchOrigin::NGram(1)),
            record(1, BranchOrigin::Heads),
        ];
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        assert_eq!(back, trace);
        let m = RunMetrics::from_trace(&back).unwrap();
        assert_eq!(m.alpha, acceptance_rate(&trace));
        assert_eq!(m.tokens, 5);
    }
}
