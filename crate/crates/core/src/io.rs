//! On-disk formats: `metrics.csv`, the long-format comparison CSV, and
//! `policy.json`.
//!
//! `policy.json` layout:
//!
//! ```json
//! {"vocab_size": 5, "context_len": 3, "version": 960,
//!  "entries": [{"context": [5, 5, 1], "logits": [0.1, -0.2, 0.0, 0.3, 0.05]}]}
//! ```
//!
//! Only materialized context rows are stored; absent contexts are all-zero.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Context, PolicyTable, Token};
use crate::trainer::TrainRecord;

/// Largest vocabulary / context window accepted from a policy file.
pub const MAX_POLICY_VOCAB: usize = 1 << 16;
pub const MAX_POLICY_CONTEXT: usize = 1 << 10;

pub fn write_metrics_csv<W: Write>(out: W, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TrainRecord::HEADER).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<TrainRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(TrainRecord::HEADER) {
        return Err(Error::Input(format!("unexpected metrics header: {headers:?}")));
    }
    rdr.deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// One row of the comparison CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub run_id: String,
    pub objective: String,
    pub seed: u64,
    pub staleness: usize,
    pub global_step: usize,
    pub update_index: usize,
    pub metric: String,
    pub value: f64,
}

pub const LONG_HEADER: [&str; 8] = [
    "run_id",
    "objective",
    "seed",
    "staleness",
    "global_step",
    "update_index",
    "metric",
    "value",
];

pub fn write_long_csv<W: Write>(out: W, rows: &[LongRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(LONG_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Expands one run's records into long-format rows.
pub fn long_rows(run_id: &str, objective: &str, seed: u64, staleness: usize, records: &[TrainRecord]) -> Vec<LongRow> {
    records
        .iter()
        .flat_map(|r| {
            r.metrics().into_iter().map(move |(metric, value)| LongRow {
                run_id: run_id.to_string(),
                objective: objective.to_string(),
                seed,
                staleness,
                global_step: r.global_step,
                update_index: r.update_index,
                metric: metric.to_string(),
                value,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyEntry {
    context: Vec<Token>,
    logits: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    vocab_size: usize,
    context_len: usize,
    version: u64,
    entries: Vec<PolicyEntry>,
}

pub fn policy_to_json(p: &PolicyTable) -> Result<String> {
    let file = PolicyFile {
        vocab_size: p.vocab_size(),
        context_len: p.context_len(),
        version: p.version(),
        entries: p
            .entries()
            .map(|(ctx, row)| PolicyEntry {
                context: ctx.tokens().to_vec(),
                logits: row.to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Decodes and validates a policy file.
pub fn policy_from_json(text: &str) -> Result<PolicyTable> {
    let file: PolicyFile = serde_json::from_str(text)?;
    if file.vocab_size == 0 || file.vocab_size > MAX_POLICY_VOCAB {
        return Err(Error::Input(format!("vocab_size {} out of range", file.vocab_size)));
    }
    if file.context_len == 0 || file.context_len > MAX_POLICY_CONTEXT {
        return Err(Error::Input(format!("context_len {} out of range", file.context_len)));
    }
    let mut p = PolicyTable::new(file.vocab_size, file.context_len)?;
    let mut seen = BTreeSet::new();
    for e in file.entries {
        let ctx = Context::new(e.context, file.context_len, file.vocab_size)?;
        if !seen.insert(ctx.clone()) {
            return Err(Error::Input("duplicate context entry".into()));
        }
        p.set_logits(ctx, e.logits)?;
    }
    p.bump_version(file.version);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(i: usize) -> TrainRecord {
        TrainRecord {
            global_step: i / 2,
            update_index: i,
            policy_version: i as u64 + 4,
            behavior_version: 4,
            mean_reward: 0.125 * i as f64,
            mean_token_entropy: 1.3862943611198906,
            clip_fraction: 0.1,
            mask_fraction: 0.0,
            degenerate_group_fraction: 0.25,
            mean_abs_log_ratio: 1e-17,
            max_abs_log_ratio: 3.5,
            grad_norm: 0.0123,
        }
    }

    #[test]
    fn metrics_header_is_fixed() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[record(0), record(1)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            "global_step,update_index,policy_version,behavior_version,mean_reward,mean_token_entropy,clip_fraction,mask_fraction,degenerate_group_fraction,mean_abs_log_ratio,max_abs_log_ratio,grad_norm"
        );
        assert_eq!(text.lines().count(), 3);
        let back = read_metrics_csv(text.as_bytes()).unwrap();
        assert_eq!(back, vec![record(0), record(1)]);
    }

    #[test]
    fn long_rows_expand_metrics() {
        let rows = long_rows("grpo-s1", "grpo", 1, 2, &[record(0)]);
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().any(|r| r.metric == "clip_fraction" && r.value == 0.1));
        let mut buf = Vec::new();
        write_long_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("run_id,objective,seed,staleness,global_step,update_index,metric,value\n"));
    }

    #[test]
    fn policy_decoder_rejects_malformed() {
        let bad = [
            "",
            "{}",
            r#"{"vocab_size":0,"context_len":1,"version":0,"entries":[]}"#,
            r#"{"vocab_size":3,"context_len":1,"version":0,"entries":[{"context":[4],"logits":[0,0,0]}]}"#,
            r#"{"vocab_size":3,"context_len":1,"version":0,"entries":[{"context":[1],"logits":[0,0]}]}"#,
            r#"{"vocab_size":3,"context_len":2,"version":0,"entries":[{"context":[1,3],"logits":[0,0,0]}]}"#,
            r#"{"vocab_size":3,"context_len":1,"version":0,"entries":[{"context":[1],"logits":[0,0,0]},{"context":[1],"logits":[1,0,0]}]}"#,
            r#"{"vocab_size":3,"context_len":1,"version":0,"entries":[],"extra":1}"#,
            r#"{"vocab_size":3,"context_len":1,"version":0,"entries":[{"context":[1],"logits":[1e999,0,0]}]}"#,
        ];
        for text in bad {
            assert!(policy_from_json(text).is_err(), "{text}");
        }
    }

    proptest! {
        #[test]
        fn policy_json_round_trip(
            rows in prop::collection::btree_map(
                prop::collection::vec(0u32..4, 2),
                prop::collection::vec(-50.0f64..50.0, 4),
                0..8,
            ),
            version in 0u64..1_000_000,
        ) {
            let mut p = PolicyTable::new(4, 2).unwrap();
            for (hist, logits) in rows {
                let ctx = p.context(&hist);
                p.set_logits(ctx, logits).unwrap();
            }
            p.bump_version(version);
            let back = policy_from_json(&policy_to_json(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
