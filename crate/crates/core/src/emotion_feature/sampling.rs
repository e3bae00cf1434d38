use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const N_BASIC_EXPRESSIONS: usize = 7;

/// Draws sample indices so that every class appears with equal frequency,
/// regardless of how skewed the dataset is: first a class uniformly, then a
/// sample uniformly within it.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &c) in labels.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::Param(format!("label {c} at index {i} exceeds {n_classes} classes")));
            }
            by_class[c].push(i);
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Param(format!("class {empty} has no samples")));
        }
        Ok(BalancedSampler { by_class })
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let members = &self.by_class[rng.random_range(0..self.by_class.len())];
        members[rng.random_range(0..members.len())]
    }

    pub fn stream<'a>(&'a self, rng: &'a mut Rng) -> impl Iterator<Item = usize> + 'a {
        std::iter::repeat_with(move || self.sample(rng))
    }
}
