use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;

use crate::cli::{ListenArgs, ServeArgs};
use crate::service::{self, Service};
use crate::Ctx;

pub fn serve(ctx: &Ctx, args: &ServeArgs) -> anyhow::Result<()> {
    host(ctx, &args.listen, !args.no_trainer, args.duration)
}

pub fn host(
    ctx: &Ctx,
    listen: &ListenArgs,
    with_trainer: bool,
    duration_secs: Option<u64>,
) -> anyhow::Result<()> {
    let registry = ctx.registry()?;
    let root = ctx.out()?;
    let svc = Arc::new(Service::open(registry, root, with_trainer)?);
    // arm sources may block, so this runs before the async runtime exists
    service::bootstrap(&svc, crate::now_ms())?;
    let runtime = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
    runtime.block_on(service::run(
        svc,
        listen.listen,
        Duration::from_secs(listen.reload_secs.max(1)),
        duration_secs.map(Duration::from_secs),
    ))
}
