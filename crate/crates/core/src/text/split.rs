use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Train/dev/test percentages.
pub const DEFAULT_RATIOS: (u32, u32, u32) = (75, 5, 20);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Partition sizes: dev and test get the floor of their share, train takes the rest.
pub fn split_sizes(n: usize, ratios: (u32, u32, u32)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 || a + b + c != 100 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 100, got {a}:{b}:{c}"
        )));
    }
    let dev = n * b as usize / 100;
    let test = n * c as usize / 100;
    Ok((n - dev - test, dev, test))
}

/// Seeded shuffle followed by a train/dev/test cut.
pub fn split_dataset<T>(items: Vec<T>, ratios: (u32, u32, u32), seed: u64) -> Result<Split<T>> {
    let (n_train, n_dev, _) = split_sizes(items.len(), ratios)?;
    let mut items = items;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let mut rest = items.split_off(n_train);
    let test = rest.split_off(n_dev);
    Ok(Split {
        train: items,
        dev: rest,
        test,
    })
}
