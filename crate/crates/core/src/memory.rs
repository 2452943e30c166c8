//! External memory and its differentiable access primitives.
//!
//! Memory is an `N × M` matrix (N addresses, word size M) addressed by a single
//! soft-attention vector over the N addresses. Nothing here owns trainable
//! parameters, so N is purely a runtime property.

use crate::autodiff::{AdError, AdResult, Graph};
use crate::tensor::Tensor;

/// Added to every attention component before sharpening so that `0^γ`
/// never appears in the gradient.
pub const SHARPEN_EPS: f64 = 1e-12;

/// Integer shift offsets available to one controller's attention update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftOffsets(Vec<i64>);

impl ShiftOffsets {
    /// Offsets `[-radius, …, +radius]`.
    pub fn symmetric(radius: u32) -> Self {
        let r = radius as i64;
        Self((-r..=r).collect())
    }

    /// `[-1, 0, +1]`.
    pub fn unit() -> Self {
        Self::symmetric(1)
    }

    /// Validates an explicit offset list: sorted, unique and symmetric about zero.
    pub fn new(offsets: Vec<i64>) -> Result<Self, AdError> {
        let sym = offsets.iter().rev().map(|o| -o).eq(offsets.iter().copied());
        let sorted = offsets.windows(2).all(|w| w[0] < w[1]);
        if offsets.is_empty() || !sym || !sorted {
            return Err(AdError::Domain {
                op: "shift_offsets",
                reason: format!("offsets {offsets:?} are not a sorted symmetric set"),
            });
        }
        Ok(Self(offsets))
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn radius(&self) -> u32 {
        self.0.last().copied().unwrap_or(0) as u32
    }
}

/// Memory contents plus the current attention, on some graph backend.
#[derive(Debug, Clone)]
pub struct MemoryState<V> {
    pub memory: V,
    pub attention: V,
}

/// Zero memory `M₀`.
pub fn initial_memory(n: usize, word: usize) -> Tensor {
    Tensor::zeros(&[n, word])
}

/// Attention `w₀`, one-hot at address 0.
pub fn initial_attention(n: usize) -> Tensor {
    Tensor::one_hot(n, 0)
}

/// `r_j = Σ_i w_i · M[i][j]`.
pub fn read<G: Graph>(g: &mut G, memory: &G::V, w: &G::V) -> AdResult<G::V> {
    g.matvec_t(memory, w)
}

/// Erase/add write `M'[i][j] = M[i][j](1 − w_i e_j) + w_i a_j`.
pub fn write<G: Graph>(g: &mut G, memory: G::V, w: &G::V, e: &G::V, a: &G::V) -> AdResult<G::V> {
    if g.value(e).data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(AdError::Domain {
            op: "write",
            reason: "erase vector outside [0, 1]".into(),
        });
    }
    g.erase_add(memory, w, e, a)
}

/// Circular convolution of the attention with a shift distribution.
pub fn shift<G: Graph>(g: &mut G, w: &G::V, s: &G::V, offsets: &ShiftOffsets) -> AdResult<G::V> {
    g.circ_conv(w, s, offsets.as_slice())
}

/// `w'_i = (w_i + ε)^γ / Σ_j (w_j + ε)^γ`.
pub fn sharpen<G: Graph>(g: &mut G, w: &G::V, gamma: &G::V) -> AdResult<G::V> {
    let shifted = g.add_scalar(w, SHARPEN_EPS);
    let powered = g.pow(&shifted, gamma)?;
    g.normalize(&powered)
}

/// Attention update: shift then sharpen.
pub fn update_attention<G: Graph>(
    g: &mut G,
    w: &G::V,
    s: &G::V,
    gamma: &G::V,
    offsets: &ShiftOffsets,
) -> AdResult<G::V> {
    let shifted = shift(g, w, s, offsets)?;
    sharpen(g, &shifted, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        Tensor::vector(raw.into_iter().map(|v| v / s).collect())
    }

    #[test]
    fn read_examples() {
        let mem = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let r = read(&mut Eager, &mem, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(r.data(), &[1.0, 0.0]);
        let mem = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let r = read(&mut Eager, &mem, &Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0]);
    }

    #[test]
    fn read_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (5, 3);
        let mem: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = simplex(&mut rng, n);
        let r = read(&mut Eager, &Tensor::matrix(n, m, mem.clone()), &w).unwrap();
        for j in 0..m {
            let mut expect = 0.0;
            for i in 0..n {
                expect += w.data()[i] * mem[i * m + j];
            }
            assert!((r.data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn full_overwrite_of_one_row() {
        let mem = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = write(
            &mut Eager,
            mem,
            &Tensor::one_hot(3, 1),
            &Tensor::vector(vec![1.0, 1.0]),
            &Tensor::vector(vec![-0.5, 0.25]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, -0.5, 0.25, 5.0, 6.0]);
    }

    #[test]
    fn zero_erase_zero_add_is_noop() {
        let mem = Tensor::matrix(2, 2, vec![0.3, -0.1, 0.7, 0.2]);
        let out = write(
            &mut Eager,
            mem.clone(),
            &Tensor::vector(vec![0.4, 0.6]),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(out, mem);
    }

    #[test]
    fn write_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m) = (6, 4);
        let mem: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = simplex(&mut rng, n);
        let e: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = write(
            &mut Eager,
            Tensor::matrix(n, m, mem.clone()),
            &w,
            &Tensor::vector(e.clone()),
            &Tensor::vector(a.clone()),
        )
        .unwrap();
        for i in 0..n {
            for j in 0..m {
                let wi = w.data()[i];
                let expect = mem[i * m + j] * (1.0 - wi * e[j]) + wi * a[j];
                assert!((out.data()[i * m + j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn write_rejects_erase_out_of_range() {
        let err = write(
            &mut Eager,
            Tensor::zeros(&[2, 2]),
            &Tensor::one_hot(2, 0),
            &Tensor::vector(vec![1.5, 0.0]),
            &Tensor::zeros(&[2]),
        )
        .unwrap_err();
        assert!(matches!(err, AdError::Domain { op: "write", .. }));
    }

    #[test]
    fn shift_examples() {
        let k = ShiftOffsets::unit();
        let stay = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let fwd = Tensor::vector(vec![0.0, 0.0, 1.0]);
        let w = Tensor::vector(vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.1, 0.05, 0.05]);
        assert_eq!(shift(&mut Eager, &w, &stay, &k).unwrap(), w);
        let w4 = Tensor::one_hot(8, 4);
        assert_eq!(shift(&mut Eager, &w4, &fwd, &k).unwrap(), Tensor::one_hot(8, 5));
        let last = Tensor::one_hot(8, 7);
        assert_eq!(shift(&mut Eager, &last, &fwd, &k).unwrap(), Tensor::one_hot(8, 0));
    }

    #[test]
    fn sharpen_examples() {
        let g1 = Tensor::scalar(1.0);
        let w = Tensor::vector(vec![0.6, 0.3, 0.1]);
        let out = sharpen(&mut Eager, &w, &g1).unwrap();
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let g2 = Tensor::scalar(2.0);
        let out = sharpen(&mut Eager, &Tensor::vector(vec![0.5, 0.5]), &g2).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        let out = sharpen(&mut Eager, &Tensor::vector(vec![0.8, 0.2]), &g2).unwrap();
        assert!((out.data()[0] - 16.0 / 17.0).abs() < 1e-9);
        assert!((out.data()[1] - 1.0 / 17.0).abs() < 1e-9);
    }

    #[test]
    fn offsets_must_be_symmetric() {
        assert!(ShiftOffsets::new(vec![-1, 0, 2]).is_err());
        assert!(ShiftOffsets::new(vec![]).is_err());
        assert_eq!(ShiftOffsets::symmetric(2).as_slice(), &[-2, -1, 0, 1, 2]);
    }

    #[test]
    fn zero_attention_row_is_untouched() {
        let mem = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::vector(vec![0.5, 0.0, 0.5]);
        let out = write(
            &mut Eager,
            mem,
            &w,
            &Tensor::vector(vec![1.0, 0.3]),
            &Tensor::vector(vec![9.0, 9.0]),
        )
        .unwrap();
        assert_eq!(&out.data()[2..4], &[3.0, 4.0]);
    }
}
