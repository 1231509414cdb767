//! Character conditioning: per-layer embedding dictionaries gathered by the
//! frame-aligned character sequence, applied to the vocoder features as an
//! element-wise scale and shift.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{device, ParamStore};
use crate::symbols::{CharSequence, VOCAB_SIZE};

/// A `31 x D` table with one row per vocabulary index.
#[derive(Debug, Clone)]
pub struct EmbeddingDictionary {
    table: Tensor,
}

impl EmbeddingDictionary {
    pub fn new(table: Tensor) -> Result<Self> {
        let (rows, d) = table.dims2()?;
        if rows != VOCAB_SIZE || d == 0 {
            return Err(Error::shape(format!("{VOCAB_SIZE} x D"), format!("{rows} x {d}")));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn channels(&self) -> usize {
        self.table.dim(1).unwrap_or(0)
    }

    /// Rows selected by `indices` (a `(N,)` u32 tensor), as `(N, D)`.
    pub fn lookup(&self, indices: &Tensor) -> Result<Tensor> {
        Ok(self.table.index_select(indices, 0)?)
    }
}

/// A `D x T` feature matrix.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (d, t) = values.dims2()?;
        if d == 0 || t == 0 {
            return Err(Error::shape("D, T > 0", format!("{d} x {t}")));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.len() != d * t {
            return Err(Error::shape("rectangular rows", "ragged rows"));
        }
        Self::new(Tensor::from_vec(flat, (d, t), &device())?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[0], d[1])
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.to_dtype(DType::F64)?.to_vec2()?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_rows()?.iter().flatten().all(|v| v.is_finite()))
    }
}

pub(crate) fn char_index_tensor(c: &CharSequence) -> Result<Tensor> {
    let idx: Vec<u32> = c.as_slice().iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(idx, c.len(), &device())?)
}

/// Column `t` of the result is row `c[t]` of the dictionary.
pub fn gather(dict: &EmbeddingDictionary, c: &CharSequence) -> Result<FeatureMap> {
    if c.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = c.as_slice().iter().find(|&&i| i as usize >= VOCAB_SIZE) {
        return Err(Error::IndexOutOfRange {
            index: bad as usize,
            limit: VOCAB_SIZE,
        });
    }
    let rows = dict.lookup(&char_index_tensor(c)?)?;
    FeatureMap::new(rows.t()?.contiguous()?)
}

/// `y = w_c * x + b_c` for tensors of identical shape (any rank).
pub fn film(x: &Tensor, w_c: &Tensor, b_c: &Tensor) -> Result<Tensor> {
    if x.dims() != w_c.dims() || x.dims() != b_c.dims() {
        return Err(Error::shape(
            format!("{:?}", x.dims()),
            format!("{:?} / {:?}", w_c.dims(), b_c.dims()),
        ));
    }
    Ok(((w_c * x)? + b_c)?)
}

pub fn film_apply(x: &FeatureMap, w_c: &FeatureMap, b_c: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(film(x.tensor(), w_c.tensor(), b_c.tensor())?)
}

/// The `k`-th conditioning layer: a scale dictionary and a shift dictionary.
#[derive(Debug, Clone)]
pub struct ConditioningLayer {
    pub w: EmbeddingDictionary,
    pub b: EmbeddingDictionary,
    pub layer_index: usize,
}

impl ConditioningLayer {
    pub fn new(w: EmbeddingDictionary, b: EmbeddingDictionary, layer_index: usize) -> Result<Self> {
        if w.channels() != b.channels() {
            return Err(Error::shape(
                format!("D = {}", w.channels()),
                format!("D = {}", b.channels()),
            ));
        }
        Ok(Self { w, b, layer_index })
    }

    /// Registers the dictionaries as trainable parameters, scale at one and shift at zero.
    pub fn register(store: &mut ParamStore, channels: usize, layer_index: usize) -> Result<Self> {
        let w = store.constant(format!("cond{layer_index}.w"), &[VOCAB_SIZE, channels], 1.0)?;
        let b = store.constant(format!("cond{layer_index}.b"), &[VOCAB_SIZE, channels], 0.0)?;
        Self::new(EmbeddingDictionary::new(w)?, EmbeddingDictionary::new(b)?, layer_index)
    }

    /// Batched channel-last application: `x` is `(B, T, D)`, `chars` is a
    /// `(B, T)` u32 tensor.
    pub fn forward(&self, x: &Tensor, chars: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let flat = chars.flatten_all()?;
        let w_c = self.w.lookup(&flat)?.reshape((b, t, d))?;
        let b_c = self.b.lookup(&flat)?.reshape((b, t, d))?;
        film(x, &w_c, &b_c)
    }

    /// Single-utterance application on a `D x T` map.
    pub fn apply(&self, x: &FeatureMap, c: &CharSequence) -> Result<FeatureMap> {
        let (_, t) = x.dims();
        if c.len() != t {
            return Err(Error::LengthMismatch { left: t, right: c.len() });
        }
        film_apply(x, &gather(&self.w, c)?, &gather(&self.b, c)?)
    }
}

/// Standalone identity-initialised layer (scale table all ones, shift table all zeros).
pub fn init_identity(channels: usize) -> Result<ConditioningLayer> {
    init_identity_with(channels, DType::F32)
}

pub fn init_identity_with(channels: usize, dtype: DType) -> Result<ConditioningLayer> {
    if channels == 0 {
        return Err(Error::InvalidValue("channel count must be at least 1".into()));
    }
    let mut store = ParamStore::new(dtype, 0);
    ConditioningLayer::register(&mut store, channels, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_rows(d: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    fn random_chars(t: usize, seed: u64) -> CharSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CharSequence::new((0..t).map(|_| rng.gen_range(0..31u8)).collect()).unwrap()
    }

    fn table(d: usize, seed: u64) -> EmbeddingDictionary {
        let rows = random_rows(VOCAB_SIZE, d, seed);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        EmbeddingDictionary::new(Tensor::from_vec(flat, (VOCAB_SIZE, d), &device()).unwrap()).unwrap()
    }

    #[test]
    fn gather_examples() {
        let dict = table(3, 1);
        let rows: Vec<Vec<f64>> = dict.table().to_vec2().unwrap();
        let g = gather(&dict, &CharSequence::new(vec![0, 0, 0]).unwrap()).unwrap().to_rows().unwrap();
        for d in 0..3 {
            assert!(g[d].iter().all(|&v| v == rows[0][d]));
        }
        let g = gather(&dict, &CharSequence::new(vec![1, 2]).unwrap()).unwrap().to_rows().unwrap();
        for d in 0..3 {
            assert_eq!(g[d], vec![rows[1][d], rows[2][d]]);
        }
        let layer = init_identity(4).unwrap();
        let g = gather(&layer.w, &random_chars(9, 2)).unwrap().to_rows().unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn gather_rejects_empty() {
        assert!(matches!(
            gather(&table(2, 0), &CharSequence::new(vec![]).unwrap()),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn film_examples() {
        let x = FeatureMap::from_rows(&random_rows(3, 5, 4)).unwrap();
        let ones = FeatureMap::from_rows(&vec![vec![1.0; 5]; 3]).unwrap();
        let zeros = FeatureMap::from_rows(&vec![vec![0.0; 5]; 3]).unwrap();
        let y = film_apply(&x, &ones, &zeros).unwrap();
        assert_eq!(y.to_rows().unwrap(), x.to_rows().unwrap());

        let s = |v: f64| FeatureMap::from_rows(&[vec![v]]).unwrap();
        assert_eq!(film_apply(&s(3.0), &s(2.0), &s(1.0)).unwrap().to_rows().unwrap(), vec![vec![7.0]]);

        let wrong = FeatureMap::from_rows(&vec![vec![1.0; 4]; 3]).unwrap();
        assert!(matches!(film_apply(&x, &wrong, &zeros), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_identity_tables() {
        let layer = init_identity_with(4, DType::F64).unwrap();
        let w: Vec<Vec<f64>> = layer.w.table().to_vec2().unwrap();
        let b: Vec<Vec<f64>> = layer.b.table().to_vec2().unwrap();
        assert_eq!(w.len(), 31);
        assert!(w.iter().flatten().all(|&v| v == 1.0) && w[0].len() == 4);
        assert!(b.iter().flatten().all(|&v| v == 0.0));
        assert!(init_identity(0).is_err());
    }

    #[test]
    fn identity_layer_is_bit_exact() {
        let layer = init_identity_with(6, DType::F64).unwrap();
        for seed in 0..5 {
            let x = FeatureMap::from_rows(&random_rows(6, 11, seed)).unwrap();
            let y = layer.apply(&x, &random_chars(11, seed + 100)).unwrap();
            let (xr, yr) = (x.to_rows().unwrap(), y.to_rows().unwrap());
            for (a, b) in xr.iter().flatten().zip(yr.iter().flatten()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    /// Central finite differences against autograd for all three inputs.
    #[test]
    fn film_gradients_match_finite_differences() {
        let (d, t) = (3, 4);
        let xs = random_rows(d, t, 11);
        let ws = random_rows(d, t, 12);
        let bs = random_rows(d, t, 13);
        // scalar objective: sum(y * r) for a fixed random r
        let r = random_rows(d, t, 14);
        let to_t = |rows: &Vec<Vec<f64>>| {
            Tensor::from_vec(rows.iter().flatten().copied().collect::<Vec<_>>(), (d, t), &device()).unwrap()
        };
        let objective = |x: &Vec<Vec<f64>>, w: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
            let y = film(&to_t(x), &to_t(w), &to_t(b)).unwrap();
            (y * to_t(&r)).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let xv = Var::from_tensor(&to_t(&xs)).unwrap();
        let wv = Var::from_tensor(&to_t(&ws)).unwrap();
        let bv = Var::from_tensor(&to_t(&bs)).unwrap();
        let y = film(xv.as_tensor(), wv.as_tensor(), bv.as_tensor()).unwrap();
        let loss = (y * to_t(&r)).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = [
            grads.get(&xv).unwrap().to_vec2::<f64>().unwrap(),
            grads.get(&wv).unwrap().to_vec2::<f64>().unwrap(),
            grads.get(&bv).unwrap().to_vec2::<f64>().unwrap(),
        ];
        // closed forms: dy/dx = w, dy/dw = x, dy/db = 1 (times r)
        for i in 0..d {
            for j in 0..t {
                assert_eq!(analytic[0][i][j], ws[i][j] * r[i][j]);
                assert_eq!(analytic[1][i][j], xs[i][j] * r[i][j]);
                assert_eq!(analytic[2][i][j], r[i][j]);
            }
        }
        let h = 1e-6;
        let inputs = [&xs, &ws, &bs];
        for which in 0..3 {
            for i in 0..d {
                for j in 0..t {
                    let mut plus: Vec<Vec<Vec<f64>>> = inputs.iter().map(|v| (*v).clone()).collect();
                    let mut minus = plus.clone();
                    plus[which][i][j] += h;
                    minus[which][i][j] -= h;
                    let fd = (objective(&plus[0], &plus[1], &plus[2])
                        - objective(&minus[0], &minus[1], &minus[2]))
                        / (2.0 * h);
                    let a = analytic[which][i][j];
                    let rel = (fd - a).abs() / a.abs().max(1e-8);
                    assert!(rel < 1e-5, "input {which} [{i},{j}] fd {fd} analytic {a}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn shape_preserved(d in 1usize..6, t in 1usize..9, seed in 0u64..1000) {
            let x = FeatureMap::from_rows(&random_rows(d, t, seed)).unwrap();
            let w = FeatureMap::from_rows(&random_rows(d, t, seed + 1)).unwrap();
            let b = FeatureMap::from_rows(&random_rows(d, t, seed + 2)).unwrap();
            prop_assert_eq!(film_apply(&x, &w, &b).unwrap().dims(), (d, t));
        }

        #[test]
        fn changing_one_frame_is_local(t in 2usize..12, pos_seed in 0usize..100, seed in 0u64..1000) {
            let d = 4;
            let layer = ConditioningLayer::new(table(d, seed), table(d, seed + 7), 0).unwrap();
            let x = FeatureMap::from_rows(&random_rows(d, t, seed + 3)).unwrap();
            let c1 = random_chars(t, seed + 5);
            let pos = pos_seed % t;
            let mut changed = c1.as_slice().to_vec();
            changed[pos] = (changed[pos] + 1) % 31;
            let c2 = CharSequence::new(changed).unwrap();
            let g1 = gather(&layer.w, &c1).unwrap().to_rows().unwrap();
            let g2 = gather(&layer.w, &c2).unwrap().to_rows().unwrap();
            let y1 = layer.apply(&x, &c1).unwrap().to_rows().unwrap();
            let y2 = layer.apply(&x, &c2).unwrap().to_rows().unwrap();
            for row in 0..d {
                for col in 0..t {
                    if col != pos {
                        prop_assert_eq!(g1[row][col].to_bits(), g2[row][col].to_bits());
                        prop_assert_eq!(y1[row][col].to_bits(), y2[row][col].to_bits());
                    }
                }
            }
        }

        #[test]
        fn affine_in_x(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
            let (d, t) = (3, 5);
            let x1 = random_rows(d, t, seed);
            let x2 = random_rows(d, t, seed + 1);
            let w = FeatureMap::from_rows(&random_rows(d, t, seed + 2)).unwrap();
            let b = FeatureMap::from_rows(&random_rows(d, t, seed + 3)).unwrap();
            let mix: Vec<Vec<f64>> = x1.iter().zip(&x2)
                .map(|(r1, r2)| r1.iter().zip(r2).map(|(a, c)| alpha * a + beta * c).collect())
                .collect();
            let lhs = film_apply(&FeatureMap::from_rows(&mix).unwrap(), &w, &b).unwrap().to_rows().unwrap();
            let y1 = film_apply(&FeatureMap::from_rows(&x1).unwrap(), &w, &b).unwrap().to_rows().unwrap();
            let y2 = film_apply(&FeatureMap::from_rows(&x2).unwrap(), &w, &b).unwrap().to_rows().unwrap();
            let br = b.to_rows().unwrap();
            for i in 0..d {
                for j in 0..t {
                    let rhs = alpha * y1[i][j] + beta * y2[i][j] - (alpha + beta - 1.0) * br[i][j];
                    let scale = lhs[i][j].abs().max(rhs.abs()).max(1.0);
                    prop_assert!((lhs[i][j] - rhs).abs() / scale < 1e-10);
                }
            }
        }
    }
}
