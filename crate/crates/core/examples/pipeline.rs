// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run every stage from a config file and print the report tables.
//!
//! ```text
//! cargo run --release --example pipeline -- configs/synthetic.json
//! ```

use domainfit::pipeline::{report, run_pipeline, PipelineConfig, WorkspaceLock};
use domainfit::Result;

fn main() -> Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/synthetic.json".into());
    let cfg = PipelineConfig::load(path.as_ref())?;
    let _lock = WorkspaceLock::acquire(&cfg.workspace)?;
    for m in run_pipeline(&cfg, false)? {
        let status = if m.noop { "up to date".to_string() } else { format!("{} ms", m.wall_time_ms) };
        println!("{:<11} {status}", m.stage);
    }
    let r = report::build(&cfg.workspace)?;
    print!("\n{}\n{}\n{}", r.conditions_csv(), r.sweep_csv(), r.selectors_csv());
    Ok(())
}
