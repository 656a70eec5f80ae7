use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetError;

/// Seeded shuffle of `0..n` cut into batches of `batch_size`; the last batch
/// keeps the remainder.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::InvalidParameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches<T: Clone>(items: &[T], batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>, DatasetError> {
    Ok(batch_indices(items.len(), batch_size, seed)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| items[i].clone()).collect())
        .collect())
}
