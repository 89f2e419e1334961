use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, NumError, NumResult};

/// Seeded random stream.
///
/// Algorithm, fixed so other implementations can reproduce sequences:
/// - the 64-bit seed is expanded with `rand_core`'s PCG32-based
///   `seed_from_u64` into a 256-bit ChaCha8 key (stream 0);
/// - uniforms are `(next_u64 >> 11) · 2⁻⁵³`;
/// - normals use the Box–Muller transform on `(1 − u₁, u₂)`, emitting the
///   cosine branch first and caching the sine branch;
/// - child streams hash `(seed, offset)` with SplitMix64.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this stream's seed and a fixed offset.
    /// Does not consume state from `self`.
    pub fn child(&self, offset: u64) -> Self {
        Self::new(splitmix64(self.seed ^ offset.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std_dev: f64) {
        for v in out.iter_mut() {
            *v = std_dev * self.standard_normal();
        }
    }
}

/// Matrix with i.i.d. `Normal(0, variance)` entries.
pub fn gaussian_matrix(
    rng: &mut RngStream,
    rows: usize,
    cols: usize,
    variance: f64,
) -> NumResult<Matrix> {
    if !variance.is_finite() {
        return Err(NumError::NonFinite("gaussian_matrix variance"));
    }
    if variance < 0.0 {
        return Err(NumError::InvalidArgument(format!(
            "gaussian_matrix variance must be non-negative, got {variance}"
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    if variance > 0.0 {
        rng.fill_normal(m.as_mut_slice(), variance.sqrt());
    }
    Ok(m)
}
