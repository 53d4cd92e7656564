//! Adversarial training of the full system and its ablation rows.

pub mod checkpoint;
pub mod log;
pub mod losses;
pub mod model;
pub mod optim;
pub mod step;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint};
pub use log::TrainLog;
pub use losses::{LossBreakdown, Term};
pub use model::{Model, Synthesis};
pub use optim::Adam;
pub use step::{pretrain_proxy, proxy_step, train_step, StepReport, TrainState, Trainer};

use crate::config::{AblationFlags, Config};
use crate::{Error, Result};

/// Names of the ablation rows, each adding one component to the previous.
pub const ABLATION_ROWS: [&str; 8] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8"];

/// Component flags of ablation row `name`.
pub fn ablation_flags(name: &str) -> Result<AblationFlags> {
    let row = ABLATION_ROWS
        .iter()
        .position(|r| r.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Config(format!("unknown ablation row `{name}`, expected B1..B8")))?;
    let mut f = AblationFlags::none();
    let steps: [&mut bool; 7] = [
        &mut f.edge_branch,
        &mut f.edge_transfer,
        &mut f.semantic_preserving,
        &mut f.similarity_loss,
        &mut f.pixel_contrastive,
        &mut f.multiscale,
        &mut f.crossscale,
    ];
    for flag in steps.into_iter().take(row) {
        *flag = true;
    }
    Ok(f)
}

/// `base` with the ablation flags of row `name`.
pub fn ablation_config(base: &Config, name: &str) -> Result<Config> {
    let mut cfg = base.clone();
    cfg.ablation = ablation_flags(name)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_cumulative() {
        assert_eq!(ablation_flags("B1").unwrap(), AblationFlags::none());
        assert_eq!(ablation_flags("b8").unwrap(), AblationFlags::all());
        let b4 = ablation_flags("B4").unwrap();
        assert!(b4.edge_branch && b4.edge_transfer && b4.semantic_preserving && !b4.similarity_loss);
        for r in ABLATION_ROWS {
            ablation_flags(r).unwrap().validate().unwrap();
        }
        assert!(ablation_flags("B9").is_err());
    }
}
