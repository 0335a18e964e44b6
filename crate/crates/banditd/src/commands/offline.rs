use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context as _};
use cmab_core::pipeline::{PipelineConfig, PipelineStore};
use cmab_core::sim::RunLayout;
use cmab_core::training::{ModelHolder, TaskQueue, Trainer};
use serde_json::json;

use crate::arms::RegistryArmSource;
use crate::cli::{CloseArgs, TrainArgs};
use crate::{usage, Ctx};

pub fn train(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let registry = ctx.registry()?;
    let layout = RunLayout::new(ctx.out()?);
    if args.cycles.is_some() && args.every.is_none() {
        return Err(usage("--cycles only applies with --every"));
    }
    let configs: HashMap<String, _> = registry
        .instances
        .iter()
        .map(|i| (i.config.instance_id.clone(), i.model_config))
        .collect();
    let holder = Arc::new(ModelHolder::new(layout.models()));
    let trainer = Trainer::new(holder, layout.aggregates(), configs);
    let queue = TaskQueue::new();
    let source = RegistryArmSource::new(registry);
    let entries = registry.entries();

    let mut done = 0u64;
    loop {
        let now = args.now_ms.unwrap_or_else(crate::now_ms);
        let report = queue.enqueue_cycle(&entries, &source, now);
        let mut failures = Vec::new();
        for (instance, reason) in &report.skipped {
            failures.push(format!("instance `{instance}`: {reason}"));
        }
        for (task, result) in trainer.drain(&queue) {
            let line = match &result {
                Ok(entry) => json!({
                    "keyspace": task.keyspace.to_string(),
                    "model_version": entry.model_version,
                    "publish_time": entry.publish_time,
                    "consumed_windows": entry.consumed_windows,
                }),
                Err(e) => {
                    failures.push(format!("{}: {e}", task.keyspace));
                    json!({ "keyspace": task.keyspace.to_string(), "error": e.to_string() })
                }
            };
            println!("{line}");
        }
        done += 1;
        let Some(every) = args.every else {
            if failures.is_empty() {
                return Ok(());
            }
            bail!("training failed: {}", failures.join("; "));
        };
        for f in &failures {
            tracing::error!(error = %f, "training cycle");
        }
        if args.cycles.is_some_and(|n| done >= n) {
            return Ok(());
        }
        std::thread::sleep(Duration::from_secs(every));
    }
}

pub fn close_window(ctx: &Ctx, args: &CloseArgs) -> anyhow::Result<()> {
    let registry = ctx.registry()?;
    let root = ctx.out()?;
    let layout = RunLayout::new(root);
    let instances: Vec<_> = match &args.instance {
        Some(id) => vec![ctx.instance(Some(id))?],
        None => registry.instances.iter().collect(),
    };
    let mut store = PipelineStore::open(
        &layout.journal(),
        &layout.aggregates(),
        PipelineConfig::default(),
    )
    .with_context(|| format!("cannot open pipeline state in {}", root.display()))?;
    store.expire_orphans(args.now_ms.unwrap_or_else(crate::now_ms))?;
    for instance in instances {
        for k in &instance.keyspaces {
            let id = store.open_window(k);
            let tuples = store.close_window(k, id)?.len();
            println!(
                "{}",
                json!({ "keyspace": k.to_string(), "window_id": id, "tuples": tuples })
            );
        }
    }
    store.flush()?;
    Ok(())
}
