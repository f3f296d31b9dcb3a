//! Stratified train/validation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<(String, T)>,
    pub validation: Vec<(String, T)>,
    pub seed: u64,
    pub ratio: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Number of training items for a class of size `n`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // the epsilon keeps 0.8 * 25 at 20 despite binary rounding
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    if n >= 2 {
        k.clamp(1, n)
    } else {
        1
    }
}

/// Shuffles each class with its own stream derived from `seed` and the class
/// name, so adding a class never changes the split of the others.
pub fn split_dataset<T: Clone>(
    groups: &BTreeMap<String, Vec<T>>,
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::ValidationError(format!("split ratio {ratio} must lie in (0,1)")));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        seed,
        ratio,
        warnings: Vec::new(),
    };
    for (class, items) in groups {
        if items.is_empty() {
            return Err(Error::ValidationError(format!("class {class:?} has no items")));
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(class.as_bytes()));
        order.shuffle(&mut rng);
        let k = train_count(items.len(), ratio);
        if items.len() == 1 {
            let w = format!("class {class:?} has a single item; validation set for it is empty");
            log::warn!("{w}");
            split.warnings.push(w);
        }
        for (pos, &i) in order.iter().enumerate() {
            let entry = (class.clone(), items[i].clone());
            if pos < k {
                split.train.push(entry);
            } else {
                split.validation.push(entry);
            }
        }
    }
    Ok(split)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
