use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `batch_size` sequences of `block_size` tokens laid end to end, with
/// next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub block_size: usize,
}

/// Start offsets of the non-overlapping windows `[s, s + block_size]` that
/// fit in a segment of `len` tokens.
pub fn chunk_starts(len: usize, block_size: usize) -> Result<Vec<usize>> {
    if block_size == 0 {
        return Err(Error::invalid("block size must be positive"));
    }
    if len <= block_size {
        return Err(Error::invalid(format!(
            "segment of {len} tokens is too short for block size {block_size}"
        )));
    }
    Ok((0..(len - 1) / block_size).map(|k| k * block_size).collect())
}

/// Gathers the windows at `starts` into one batch.
pub fn make_batch(segment: &[usize], starts: &[usize], block_size: usize) -> Batch {
    let mut inputs = Vec::with_capacity(starts.len() * block_size);
    let mut targets = Vec::with_capacity(starts.len() * block_size);
    for &s in starts {
        inputs.extend_from_slice(&segment[s..s + block_size]);
        targets.extend_from_slice(&segment[s + 1..s + block_size + 1]);
    }
    Batch {
        inputs,
        targets,
        batch_size: starts.len(),
        block_size,
    }
}

/// One epoch of shuffled full batches. Windows left over after the last
/// full batch are dropped.
pub struct Batches<'a> {
    segment: &'a [usize],
    starts: Vec<usize>,
    block_size: usize,
    batch_size: usize,
    next: usize,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.starts.len() / self.batch_size
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.num_batches() {
            return None;
        }
        let starts = &self.starts[self.next * self.batch_size..(self.next + 1) * self.batch_size];
        self.next += 1;
        Some(make_batch(self.segment, starts, self.block_size))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.num_batches() - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batch_iter(segment: &[usize], block_size: usize, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut starts = chunk_starts(segment.len(), block_size)?;
    if starts.len() < batch_size {
        return Err(Error::invalid(format!(
            "segment of {} tokens holds {} windows of {block_size}, fewer than one batch of {batch_size}",
            segment.len(),
            starts.len()
        )));
    }
    starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Batches {
        segment,
        starts,
        block_size,
        batch_size,
        next: 0,
    })
}
