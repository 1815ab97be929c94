use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle into disjoint train/val/test lists covering every id.
pub fn split_ids(ids: &[String], val_fraction: f64, test_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&val_fraction)
        || !(0.0..=1.0).contains(&test_fraction)
        || val_fraction + test_fraction > 1.0
    {
        return Err(Error::Config(format!(
            "invalid split fractions val={val_fraction} test={test_fraction}"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut substream(seed, "split"));
    let n = shuffled.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n - n_val);
    let test = shuffled.split_off(n - n_test);
    let val = shuffled.split_off(n - n_test - n_val);
    Ok(SplitSpec {
        train: shuffled,
        val,
        test,
    })
}
