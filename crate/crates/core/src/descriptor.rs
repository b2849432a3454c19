//! L2-normalized descriptors and the final projection step.
//!
//! Descriptors store 32-bit floats (what goes to disk and into the search
//! engine) while every dot product and norm accumulates in 64-bit, which
//! keeps retrieval scores stable at multi-million-row scale.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Maximum deviation from unit norm a descriptor may carry.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// An L2-normalized real vector; the currency of all retrieval here.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
}

impl Descriptor {
    /// Normalizes `raw` to unit L2 norm.
    ///
    /// Rejects non-finite entries and vectors with zero norm.
    pub fn from_raw(raw: Vec<f32>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidInput("descriptor must be non-empty".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "descriptor entries must be finite".into(),
            ));
        }
        let norm = l2_norm(&raw);
        if norm == 0.0 {
            return Err(Error::DegenerateDescriptor(
                "zero-norm vector cannot be normalized".into(),
            ));
        }
        let values = raw.into_iter().map(|v| (f64::from(v) / norm) as f32).collect();
        Ok(Self { values })
    }

    /// Wraps values that are already unit-norm within [`UNIT_NORM_TOLERANCE`].
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "expected unit-norm values, got norm {norm}"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Inner product with 64-bit accumulation. Equals cosine similarity
    /// because both sides are unit-norm.
    pub fn dot(&self, other: &Descriptor) -> f64 {
        dot_f32(&self.values, other.values())
    }
}

/// L2 norm of an f32 slice, accumulated in f64.
pub fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Inner product of two f32 slices with f64 accumulation.
///
/// Accumulates sequentially in index order; both the blocked search engine
/// and its naive oracle rely on this being the single shared definition of
/// a score, so results compare bit-for-bit.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += f64::from(x) * f64::from(y);
    }
    acc
}

/// Applies a linear projection (`d_in × d_out` matrix) and L2-normalizes the
/// result — the final descriptor post-processing stage.
///
/// Accumulates in f64 and fails with a degenerate-descriptor error when the
/// projected vector has zero norm.
pub fn project_and_normalize(raw: &[f32], projection: ArrayView2<'_, f32>) -> Result<Descriptor> {
    let (d_in, d_out) = projection.dim();
    if raw.len() != d_in {
        return Err(Error::InvalidInput(format!(
            "input dim {} does not match projection rows {}",
            raw.len(),
            d_in
        )));
    }
    if d_out == 0 {
        return Err(Error::InvalidInput("projection has zero output dim".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("input entries must be finite".into()));
    }

    let mut out = vec![0.0f64; d_out];
    for (i, &x) in raw.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let x = f64::from(x);
        let row = projection.row(i);
        for (j, &w) in row.iter().enumerate() {
            out[j] += x * f64::from(w);
        }
    }

    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::InvalidInput("projection overflowed".into()));
    }
    if norm == 0.0 {
        return Err(Error::DegenerateDescriptor(
            "projected vector has zero norm".into(),
        ));
    }
    let values = out.iter().map(|v| (v / norm) as f32).collect();
    Ok(Descriptor { values })
}

/// Pre-projection descriptor dimension of a cluster-based aggregation layer:
/// `clusters * channels + global_token`.
pub fn salad_dim_check(clusters: usize, channels: usize, global_token: usize) -> usize {
    clusters * channels + global_token
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn salad_dim_paper_values() {
        assert_eq!(salad_dim_check(64, 256, 256), 16640);
    }

    #[test]
    fn salad_dim_trivial() {
        assert_eq!(salad_dim_check(1, 1, 0), 1);
        assert_eq!(salad_dim_check(2, 3, 4), 10);
    }

    #[test]
    fn identity_projection_normalizes() {
        let proj = Array2::<f32>::eye(2);
        let d = project_and_normalize(&[3.0, 4.0], proj.view()).unwrap();
        assert_eq!(d.values(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_input_is_degenerate() {
        let proj = Array2::<f32>::eye(2);
        assert!(matches!(
            project_and_normalize(&[0.0, 0.0], proj.view()),
            Err(Error::DegenerateDescriptor(_))
        ));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let proj = Array2::<f32>::eye(2);
        assert!(matches!(
            project_and_normalize(&[1.0, 2.0, 3.0], proj.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn from_raw_normalizes() {
        let d = Descriptor::from_raw(vec![3.0, 4.0]).unwrap();
        assert!((l2_norm(d.values()) - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        assert_eq!(d.values(), &[0.6, 0.8]);
    }

    #[test]
    fn from_raw_rejects_zero_and_nan() {
        assert!(matches!(
            Descriptor::from_raw(vec![0.0, 0.0]),
            Err(Error::DegenerateDescriptor(_))
        ));
        assert!(matches!(
            Descriptor::from_raw(vec![f32::NAN, 1.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn dot_of_self_is_one() {
        let d = Descriptor::from_raw(vec![1.0, -2.0, 0.5]).unwrap();
        assert!((d.dot(&d) - 1.0).abs() <= 1e-6);
    }

    proptest! {
        #[test]
        fn projected_outputs_are_unit_norm(
            raw in proptest::collection::vec(-100.0f32..100.0, 2..24),
            seed in 0u64..1000,
        ) {
            // Deterministic non-trivial projection from the seed.
            let d_in = raw.len();
            let d_out = (seed as usize % 7) + 1;
            let proj = Array2::from_shape_fn((d_in, d_out), |(i, j)| {
                let v = ((i * 31 + j * 17 + seed as usize) % 13) as f32 - 6.0;
                v / 6.0
            });
            match project_and_normalize(&raw, proj.view()) {
                Ok(d) => {
                    prop_assert!((l2_norm(d.values()) - 1.0).abs() <= UNIT_NORM_TOLERANCE);
                    prop_assert_eq!(d.dim(), d_out);
                }
                Err(Error::DegenerateDescriptor(_)) => {
                    // Zero projections are legitimately rejected.
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
            }
        }
    }
}
