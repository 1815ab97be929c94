use rand::Rng as _;

use crate::config::DropoutConfig;
use crate::dataio::ConditionSet;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPolicy {
    pub p_keep_all: f64,
    pub p_drop_all: f64,
    pub p_each: f64,
    pub p_text_empty: f64,
}

impl DropoutPolicy {
    pub fn new(p_keep_all: f64, p_drop_all: f64, p_each: f64, p_text_empty: f64) -> Result<Self> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(ok(p_keep_all) && ok(p_drop_all) && ok(p_each) && ok(p_text_empty)) || p_keep_all + p_drop_all > 1.0 {
            return Err(Error::Config("invalid dropout probabilities".into()));
        }
        Ok(DropoutPolicy {
            p_keep_all,
            p_drop_all,
            p_each,
            p_text_empty,
        })
    }

    pub fn from_config(c: &DropoutConfig) -> Result<Self> {
        Self::new(c.p_keep_all, c.p_drop_all, c.p_each, c.p_text_empty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropRegime {
    KeepAll,
    DropAll,
    PerCondition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropDecision {
    pub regime: DropRegime,
    pub dropped: Vec<bool>,
    pub text_empty: bool,
}

/// Draws which of `slots` conditions to drop and whether to empty the text.
pub fn draw_dropout(policy: &DropoutPolicy, slots: usize, rng: &mut Rng) -> DropDecision {
    let u: f64 = rng.random();
    let regime = if u < policy.p_keep_all {
        DropRegime::KeepAll
    } else if u < policy.p_keep_all + policy.p_drop_all {
        DropRegime::DropAll
    } else {
        DropRegime::PerCondition
    };
    let dropped = match regime {
        DropRegime::KeepAll => vec![false; slots],
        DropRegime::DropAll => vec![true; slots],
        DropRegime::PerCondition => (0..slots).map(|_| rng.random::<f64>() < policy.p_each).collect(),
    };
    let text_empty = rng.random::<f64>() < policy.p_text_empty;
    DropDecision {
        regime,
        dropped,
        text_empty,
    }
}

/// Applies a dropout draw. Slots that were already dropped (padding) stay
/// dropped.
pub fn apply_modality_dropout(conditions: &ConditionSet, policy: &DropoutPolicy, rng: &mut Rng) -> (ConditionSet, DropDecision) {
    let decision = draw_dropout(policy, conditions.slots(), rng);
    let mut out = conditions.clone();
    for (i, &d) in decision.dropped.iter().enumerate() {
        if d {
            out.drop_slot(i);
        }
    }
    if decision.text_empty {
        out.prompt.clear();
    }
    (out, decision)
}
