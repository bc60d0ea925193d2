//! k-wise independent hashing with polynomials over the Mersenne prime field
//! `2^61 − 1`.

use rand::Rng;

pub const MERSENNE_61: u64 = (1 << 61) - 1;

#[inline]
fn reduce(x: u128) -> u64 {
    let lo = (x as u64) & MERSENNE_61;
    let hi = (x >> 61) as u64;
    let s = lo + hi;
    // s < 2^62, one conditional subtraction is enough after a second fold
    let s = (s & MERSENNE_61) + (s >> 61);
    if s >= MERSENNE_61 {
        s - MERSENNE_61
    } else {
        s
    }
}

#[inline]
fn mul_mod(a: u64, b: u64) -> u64 {
    reduce(a as u128 * b as u128)
}

#[inline]
fn add_mod(a: u64, b: u64) -> u64 {
    let s = a + b;
    if s >= MERSENNE_61 {
        s - MERSENNE_61
    } else {
        s
    }
}

/// Random polynomial of degree `K − 1` over `GF(2^61 − 1)`; the family of all
/// such polynomials is `K`-wise independent on inputs below the prime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KWiseHash<const K: usize> {
    coeffs: [u64; K],
}

/// Degree-3 polynomial hash, 4-wise independent.
pub type HashFamily4 = KWiseHash<4>;
/// Degree-1 polynomial hash, pairwise independent.
pub type PairwiseHash = KWiseHash<2>;

impl<const K: usize> KWiseHash<K> {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut coeffs = [0u64; K];
        for c in &mut coeffs {
            *c = rng.random_range(0..MERSENNE_61);
        }
        KWiseHash { coeffs }
    }

    pub fn from_coeffs(coeffs: [u64; K]) -> Self {
        KWiseHash {
            coeffs: coeffs.map(|c| c % MERSENNE_61),
        }
    }

    pub fn coeffs(&self) -> &[u64; K] {
        &self.coeffs
    }

    /// Field value of the polynomial at `x` (Horner).
    #[inline]
    pub fn eval(&self, x: u64) -> u64 {
        let x = x % MERSENNE_61;
        let mut acc = 0u64;
        for &c in self.coeffs.iter().rev() {
            acc = add_mod(mul_mod(acc, x), c);
        }
        acc
    }

    #[inline]
    pub fn bucket(&self, x: u64, buckets: usize) -> usize {
        (self.eval(x) % buckets as u64) as usize
    }

    /// `+1.0` or `−1.0` from the low bit of the field value.
    #[inline]
    pub fn sign(&self, x: u64) -> f64 {
        if self.eval(x) & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}
