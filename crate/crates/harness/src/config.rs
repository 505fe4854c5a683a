//! Run configuration, read from JSON with every field optional.

use std::path::{Path, PathBuf};

use cosal_core::msru::CellKind;
use cosal_core::{EncoderConfig, LossConfig, NetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synth::{MAX_DIFFICULTY, MIN_SIZE};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Stage-2 groups on disk; synthesized from the seed when absent.
    pub data_dir: Option<PathBuf>,
    /// Output directory; the `--out` flag takes precedence.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub group_size: usize,
    pub channels: usize,
    pub stage_channels: Vec<usize>,
    pub window: usize,
    pub cocl_q: usize,
    pub cocl_tau: f64,
    /// `null` selects every order of the anchor's own group.
    pub cocl_k: Option<usize>,
    pub margin: f64,
    pub soft_margin: bool,
    pub use_dom: bool,
    pub use_cocl: bool,
    pub cell: CellKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Synthetic difficulty of the stage-2 groups.
    pub difficulty: u8,
    /// Size of the fixed stage-2 pool; 0 draws a fresh group every time.
    pub train_groups: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            group_size: 8,
            channels: 16,
            stage_channels: vec![16, 32, 64],
            window: 3,
            cocl_q: 10,
            cocl_tau: 0.1,
            cocl_k: None,
            margin: 0.1,
            soft_margin: false,
            use_dom: true,
            use_cocl: true,
            cell: CellKind::Msru,
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 4,
            stage1_steps: 1000,
            stage2_steps: 2000,
            difficulty: 1,
            train_groups: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            encoder: EncoderConfig {
                stage_channels: self.stage_channels.clone(),
                input_size: self.image_size,
                working_channels: self.channels,
            },
            cell: self.cell,
            use_dom: self.use_dom,
            window: self.window,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            soft_margin: self.soft_margin,
            use_cocl: self.use_cocl,
            q: self.cocl_q,
            tau: self.cocl_tau,
            k: self.cocl_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(HarnessError::Usage(m));
        if self.image_size < MIN_SIZE {
            return usage(format!("image_size must be at least {MIN_SIZE}"));
        }
        if self.group_size < 2 {
            return usage("group_size must be at least 2".into());
        }
        if self.batch_size == 0 {
            return usage("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return usage("lr must be positive and weight_decay non-negative".into());
        }
        if self.difficulty > MAX_DIFFICULTY {
            return usage(format!("difficulty must be at most {MAX_DIFFICULTY}"));
        }
        if let Some(k) = self.cocl_k {
            // The bank holds q orders per group in the batch.
            if k > self.cocl_q * self.batch_size {
                return usage(format!("cocl_k {k} exceeds the bank size {}", self.cocl_q * self.batch_size));
            }
        }
        self.net_config().validate()?;
        self.loss_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_json_overrides() {
        let c = RunConfig::from_json(r#"{"seed": 3, "cell": "gru", "use_dom": false, "cocl_k": 2}"#).unwrap();
        assert_eq!((c.seed, c.cell, c.cocl_k), (3, CellKind::Gru, Some(2)));
    }

    #[test]
    fn inconsistent_configs_rejected() {
        for bad in [
            r#"{"cell": "lstm"}"#,
            r#"{"group_size": 1}"#,
            r#"{"lr": 0}"#,
            r#"{"image_size": 36}"#,
            r#"{"channels": 7}"#,
            r#"{"cocl_q": 1}"#,
            r#"{"cocl_tau": -1}"#,
            r#"{"cocl_k": 0}"#,
            r#"{"cocl_k": 1000}"#,
            r#"{"difficulty": 9}"#,
        ] {
            let err = RunConfig::from_json(bad).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}: {err}");
        }
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(HarnessError::Json(_))));
    }
}
