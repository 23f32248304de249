use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-based random stream.
///
/// Output depends only on `(seed, stream_id, counter)`: the ChaCha key comes
/// from `seed`, the nonce is `stream_id`, and the block position is the
/// counter. Child streams are derived by mixing a tag into the stream id, so
/// each client or task gets its own stream without sharing state.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Positions a fresh stream at `counter` (in 32-bit words).
    pub fn at(seed: u64, stream_id: u64, counter: u128) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.inner.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream identified by `tag`. Does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream_id, tag))
    }

    /// Shorthand for chained [`derive`](Self::derive) calls.
    pub fn derive_path(&self, tags: &[u64]) -> RngStream {
        let id = tags.iter().fold(self.stream_id, |acc, &t| mix(acc, t));
        RngStream::new(self.seed, id)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Uniformly random unit vector in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(dim);
            let n = super::norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// splitmix64 finalizer over `(a, b)`.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
