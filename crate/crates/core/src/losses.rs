//! Margin contrastive loss over CLS features and the combined objective.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const DEFAULT_ALPHA: f64 = 0.4;

/// Margin sweep used by the ablation harness.
pub const ALPHA_SWEEP: [f64; 4] = [0.0, 0.2, 0.4, 0.6];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub alpha: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA }
    }
}

impl ContrastiveConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("margin alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// Contrastive loss of a `[B, D]` feature matrix.
///
/// Rows are l2-normalized, pairwise cosine similarities formed, and every
/// ordered pair `(i, j)` (including `i == j`) contributes `1 − Sim` when the
/// labels agree or `max(Sim − alpha, 0)` when they differ; the total is
/// divided by `B²`.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let cfg = ContrastiveConfig::new(alpha)?;
    let rows = match tape.shape(z) {
        &[r, _] => r,
        s => return Err(Error::shape("contrastive_loss", s, &[labels.len(), 0])),
    };
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {rows} features",
            labels.len()
        )));
    }
    let unit = tape.l2_normalize_rows(z)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    tape.margin_contrastive(sim, labels, cfg.alpha)
}

/// Individual terms of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cross: Var,
    pub contrastive: Var,
}

/// `L = L_cross + L_con`, unweighted.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    z: Var,
    alpha: f64,
) -> Result<LossTerms> {
    let cross = tape.cross_entropy(logits, labels)?;
    let contrastive = contrastive_loss(tape, z, labels, alpha)?;
    let total = tape.add(cross, contrastive)?;
    Ok(LossTerms {
        total,
        cross,
        contrastive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn loss(rows: &[Vec<f64>], labels: &[usize], alpha: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_rows(rows));
        let l = contrastive_loss(&mut tape, z, labels, alpha).unwrap();
        tape.scalar_value(l).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert!(loss(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[0, 0], 0.4).abs() < 1e-12);
        assert!(loss(&[vec![1.0, 0.0], vec![0.0, 3.0]], &[0, 1], 0.4).abs() < 1e-12);
        let s: f64 = 0.9;
        let v = loss(&[vec![1.0, 0.0], vec![s, (1.0 - s * s).sqrt()]], &[0, 1], 0.4);
        assert!((v - 0.25).abs() < 1e-12, "{v}");
    }

    #[test]
    fn batch_of_one_has_no_contrastive_term() {
        assert!(loss(&[vec![0.3, -0.7, 2.0]], &[5], 0.4).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        assert!(matches!(
            contrastive_loss(&mut tape, z, &[0, 1], 0.4),
            Err(Error::Degenerate(_))
        ));
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert!(matches!(
            contrastive_loss(&mut tape, z, &[0], 0.4),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            contrastive_loss(&mut tape, z, &[0, 1], 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn total_is_sum_of_terms() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]));
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.2], vec![0.9, 0.3]]));
        let terms = total_loss(&mut tape, logits, &[0, 1], z, 0.4).unwrap();
        let (t, c, k) = (
            tape.scalar_value(terms.total).unwrap(),
            tape.scalar_value(terms.cross).unwrap(),
            tape.scalar_value(terms.contrastive).unwrap(),
        );
        assert!(k > 0.0);
        assert_eq!(t, c + k);
    }
}
