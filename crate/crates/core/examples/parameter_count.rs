//! Parameter counts against a soft-sharing baseline with one encoder stack
//! per task plus a shared one.

use htan::cli::{cmd_param_count, RunConfig};

fn main() -> htan::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.finish()?;
    let report = cmd_param_count(&cfg, 12)?;
    print!("{}", report.table());
    Ok(())
}
