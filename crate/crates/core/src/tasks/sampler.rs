use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Example;

/// Endless seeded minibatches: each epoch is a fresh permutation.
#[derive(Clone, Debug)]
pub struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    len: usize,
}

impl Sampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Indices of the next `n` examples (wrapping into a new epoch as needed).
    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.len == 0 {
            return out;
        }
        while out.len() < n {
            if self.cursor == self.len {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch<'a>(&mut self, examples: &'a [Example], n: usize) -> Vec<&'a Example> {
        self.next_indices(n)
            .into_iter()
            .map(|i| &examples[i])
            .collect()
    }
}
