//! `manifest.json`: what a run consumed and produced, for reproducibility
//! checks. Contains no timestamps.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context as _;
use cmab_core::io::read_jsonl;
use cmab_core::pipeline::{list_windows, read_window, PipelineStats};
use cmab_core::sim::{RunLayout, SimSummary, SnapshotSummary};
use cmab_core::{DecisionRecord, Keyspace};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub banditd_version: String,
    pub command: String,
    pub instance_id: String,
    pub seed: u64,
    pub rounds: u64,
    pub ms_per_round: i64,
    /// Registry bytes for `run`, settings JSON for `simulate`.
    pub config_sha256: String,
    pub world_sha256: String,
    /// Lines in the decision log.
    pub decisions: u64,
    /// Pulls summed over every closed aggregation window.
    pub aggregated_pulls: u64,
    pub pipeline: PipelineStats,
    pub snapshots: BTreeMap<String, SnapshotSummary>,
}

impl Manifest {
    pub fn collect(
        command: &str,
        instance_id: &str,
        keyspaces: &[Keyspace],
        config_sha256: String,
        world_sha256: String,
        root: &Path,
        summary: &SimSummary,
    ) -> anyhow::Result<Self> {
        let layout = RunLayout::new(root);
        let decisions = read_jsonl::<DecisionRecord>(&layout.decisions())
            .with_context(|| format!("cannot read {}", layout.decisions().display()))?
            .len() as u64;
        let mut aggregated_pulls = 0;
        for k in keyspaces {
            for w in list_windows(&layout.aggregates(), k)? {
                aggregated_pulls += read_window(&layout.aggregates(), k, w)?
                    .iter()
                    .map(|t| t.pulls)
                    .sum::<u64>();
            }
        }
        Ok(Self {
            banditd_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            instance_id: instance_id.into(),
            seed: summary.seed,
            rounds: summary.rounds,
            ms_per_round: summary.ms_per_round,
            config_sha256,
            world_sha256,
            decisions,
            aggregated_pulls,
            pipeline: summary.pipeline.clone(),
            snapshots: summary.snapshots.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}
