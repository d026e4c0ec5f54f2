//! Per-stage training drivers. Filled in alongside the pipeline wiring.

use crate::error::Result;

pub struct StageOutcome;

pub fn staged_train() -> Result<StageOutcome> {
    unimplemented!("wired up with the pipeline module")
}
