use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clplugin::{InsertionMode, Phase};
use crate::error::{Error, Result};

/// The method or ablation a run follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentVariant {
    /// Masked parallel plugins with hard-mask gradient conditioning.
    Cpt,
    /// One shared unmasked plugin bank trained on every domain.
    Ncl,
    /// A fresh unmasked plugin bank per domain.
    One,
    /// As `Cpt` but plugins rewrite the sublayer outputs.
    SeqAdapter,
    /// As `Cpt` but conditioning and fine-tuning use soft masks.
    SoftMask,
    /// Masks are learned and applied but never protect anything.
    NoMask,
}

/// How gradients of earlier tasks' neurons are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Hard,
    Soft,
    Off,
}

impl ExperimentVariant {
    pub const ALL: [ExperimentVariant; 6] = [
        ExperimentVariant::Cpt,
        ExperimentVariant::Ncl,
        ExperimentVariant::One,
        ExperimentVariant::SeqAdapter,
        ExperimentVariant::SoftMask,
        ExperimentVariant::NoMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentVariant::Cpt => "CPT",
            ExperimentVariant::Ncl => "NCL",
            ExperimentVariant::One => "ONE",
            ExperimentVariant::SeqAdapter => "SEQ_ADAPTER",
            ExperimentVariant::SoftMask => "SOFT_MASK",
            ExperimentVariant::NoMask => "NO_MASK",
        }
    }

    pub fn insertion_mode(self) -> InsertionMode {
        match self {
            ExperimentVariant::SeqAdapter => InsertionMode::Sequential,
            _ => InsertionMode::Parallel,
        }
    }

    pub fn isolated_banks(self) -> bool {
        self == ExperimentVariant::One
    }

    /// Whether task masks are learned and saved.
    pub fn learns_masks(self) -> bool {
        !matches!(self, ExperimentVariant::Ncl | ExperimentVariant::One)
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            ExperimentVariant::Cpt | ExperimentVariant::SeqAdapter => Conditioning::Hard,
            ExperimentVariant::SoftMask => Conditioning::Soft,
            _ => Conditioning::Off,
        }
    }

    pub fn post_training_phase(self, task: usize, tau: f64) -> Phase {
        if self.learns_masks() {
            Phase::PostTraining { task, tau }
        } else {
            Phase::Unmasked
        }
    }

    /// Plugin behaviour when fine-tuning or evaluating task `task`.
    pub fn task_phase(self, task: usize) -> Phase {
        match self {
            ExperimentVariant::SoftMask => Phase::SoftFineTuning { task },
            v if v.learns_masks() => Phase::FineTuning { task },
            _ => Phase::Unmasked,
        }
    }
}

impl fmt::Display for ExperimentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Lookup(format!("unknown variant {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in ExperimentVariant::ALL {
            assert_eq!(v.name().parse::<ExperimentVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("cpt".parse::<ExperimentVariant>().is_ok());
        assert!("HAT".parse::<ExperimentVariant>().is_err());
    }

    #[test]
    fn behaviour_table() {
        use ExperimentVariant::*;
        assert_eq!(Cpt.conditioning(), Conditioning::Hard);
        assert_eq!(SeqAdapter.insertion_mode(), InsertionMode::Sequential);
        assert_eq!(SoftMask.task_phase(2), Phase::SoftFineTuning { task: 2 });
        assert_eq!(NoMask.conditioning(), Conditioning::Off);
        assert_eq!(NoMask.task_phase(1), Phase::FineTuning { task: 1 });
        assert_eq!(Ncl.post_training_phase(0, 0.5), Phase::Unmasked);
        assert!(One.isolated_banks() && !Ncl.isolated_banks());
    }
}
