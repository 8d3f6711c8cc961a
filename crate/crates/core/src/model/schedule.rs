// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a step sits relative to the key and fine stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreKey,
    Key,
    Fine,
    Tail,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PreKey => "pre-key",
            Self::Key => "key",
            Self::Fine => "fine",
            Self::Tail => "tail",
        })
    }
}

/// Per-step token grid sizes plus the key/fine stage sets. Steps are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub steps: Vec<(usize, usize)>,
    #[serde(rename = "S_key")]
    pub key_steps: Vec<usize>,
    #[serde(rename = "S_fine")]
    pub fine_steps: Vec<usize>,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl ScaleSchedule {
    /// Twelve square scales ending at 32×32, key stage {2,3}, fine stage {4..7}.
    pub fn desk() -> Self {
        let sides = [1, 2, 4, 6, 8, 12, 16, 20, 24, 28, 32, 32];
        Self { steps: sides.iter().map(|&s| (s, s)).collect(), key_steps: vec![2, 3], fine_steps: vec![4, 5, 6, 7] }
    }

    /// Square schedule from side lengths with explicit stage sets.
    pub fn square(sides: &[usize], key_steps: &[usize], fine_steps: &[usize]) -> Result<Self> {
        let s = Self {
            steps: sides.iter().map(|&s| (s, s)).collect(),
            key_steps: key_steps.to_vec(),
            fine_steps: fine_steps.to_vec(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(h_s, w_s)` for 1-based `step`.
    pub fn resolution(&self, step: usize) -> Result<(usize, usize)> {
        step.checked_sub(1)
            .and_then(|i| self.steps.get(i).copied())
            .ok_or_else(|| Error::invalid(format!("step {step} outside schedule 1..={}", self.len())))
    }

    pub fn tokens(&self, step: usize) -> Result<usize> {
        self.resolution(step).map(|(h, w)| h * w)
    }

    /// Final `(H, W)`.
    pub fn final_resolution(&self) -> (usize, usize) {
        self.steps.last().copied().unwrap_or((1, 1))
    }

    pub fn stage(&self, step: usize) -> Stage {
        stage_of(step, &self.key_steps, &self.fine_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("schedule has no steps"));
        }
        if self.steps.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::invalid("schedule resolutions must be at least 1x1"));
        }
        if self.steps.windows(2).any(|p| p[1].0 < p[0].0 || p[1].1 < p[0].1) {
            return Err(Error::invalid("schedule resolutions must be non-decreasing"));
        }
        validate_stages(&self.key_steps, &self.fine_steps, self.len())?;
        if self.key_steps.iter().min().is_some_and(|&m| m < 2) {
            return Err(Error::invalid("key stage must start at step 2 or later"));
        }
        Ok(())
    }
}

pub(crate) fn stage_of(step: usize, key: &[usize], fine: &[usize]) -> Stage {
    if key.contains(&step) {
        Stage::Key
    } else if fine.contains(&step) {
        Stage::Fine
    } else if key.iter().min().is_some_and(|&m| step < m) {
        Stage::PreKey
    } else {
        Stage::Tail
    }
}

/// Shared checks for key/fine step sets against a schedule length.
pub(crate) fn validate_stages(key: &[usize], fine: &[usize], len: usize) -> Result<()> {
    if key.is_empty() {
        return Err(Error::invalid("key stage is empty"));
    }
    if let Some(&s) = key.iter().chain(fine).find(|&&s| s == 0 || s > len) {
        return Err(Error::invalid(format!("stage step {s} outside schedule 1..={len}")));
    }
    if key.iter().any(|s| fine.contains(s)) {
        return Err(Error::invalid("key and fine stages overlap"));
    }
    let max_key = key.iter().max().copied().unwrap_or(0);
    if fine.iter().min().is_some_and(|&m| m <= max_key) {
        return Err(Error::invalid("fine stage must start after the key stage"));
    }
    Ok(())
}
