use serde::{Deserialize, Serialize};

use super::ObserverError;

const SUM_TOL: f64 = 1e-9;

/// `-sum p_i ln p_i` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64, ObserverError> {
    validate_distribution(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn validate_distribution(p: &[f64]) -> Result<(), ObserverError> {
    if p.is_empty() {
        return Err(ObserverError::InvalidDistribution {
            index: None,
            reason: "empty distribution".into(),
        });
    }
    if let Some(i) = p.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(ObserverError::InvalidDistribution {
            index: Some(i),
            reason: format!("entry {} is not a finite non-negative number", p[i]),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(ObserverError::InvalidDistribution {
            index: None,
            reason: format!("entries sum to {sum}"),
        });
    }
    Ok(())
}

/// Attention distributions of one generation step, one row per
/// (layer, head), layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFrame {
    layers: usize,
    heads: usize,
    rows: Vec<Vec<f64>>,
}

impl AttentionFrame {
    pub fn new(layers: usize, heads: usize, rows: Vec<Vec<f64>>) -> Result<Self, ObserverError> {
        if rows.len() != layers * heads {
            return Err(ObserverError::InvalidFrame(format!(
                "{} rows for {layers} layers x {heads} heads",
                rows.len()
            )));
        }
        for (r, row) in rows.iter().enumerate() {
            validate_distribution(row).map_err(|e| match e {
                ObserverError::InvalidDistribution { index, reason } => {
                    ObserverError::InvalidFrame(format!("row {r}: {reason} (index {index:?})"))
                }
                other => other,
            })?;
        }
        Ok(Self { layers, heads, rows })
    }

    pub(crate) fn from_valid_rows(layers: usize, heads: usize, rows: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(rows.len(), layers * heads);
        Self { layers, heads, rows }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Row of layer `l`, head `h`.
    pub fn row(&self, l: usize, h: usize) -> &[f64] {
        &self.rows[l * self.heads + h]
    }
}

/// Equal-weight mean of the row entropies.
pub fn mean_attention_entropy(frame: &AttentionFrame) -> Result<f64, ObserverError> {
    if frame.rows.is_empty() {
        return Err(ObserverError::InvalidFrame("frame has no rows".into()));
    }
    let total: f64 = frame.rows.iter().map(|r| entropy_unchecked(r)).sum();
    Ok(total / frame.rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.25; 4]).unwrap() - 1.386_294_361).abs() < 1e-9);
        let oracle = 1.5 * 2f64.ln();
        assert!((shannon_entropy(&[0.5, 0.25, 0.25]).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 1.039_721).abs() < 1e-6);
    }

    #[test]
    fn invalid_distributions_name_the_index() {
        match shannon_entropy(&[0.5, -0.1, 0.6]) {
            Err(ObserverError::InvalidDistribution { index: Some(1), .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(shannon_entropy(&[0.5, 0.4]).is_err());
        assert!(shannon_entropy(&[]).is_err());
        assert!(shannon_entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn frame_means() {
        let one_hot = AttentionFrame::new(1, 2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean_attention_entropy(&one_hot).unwrap(), 0.0);
        let mixed = AttentionFrame::new(2, 1, vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]]).unwrap();
        assert!((mean_attention_entropy(&mixed).unwrap() - 2f64.ln()).abs() < 1e-15);
        let uniform = AttentionFrame::new(2, 2, vec![vec![1.0 / 16.0; 16]; 4]).unwrap();
        assert!((mean_attention_entropy(&uniform).unwrap() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn frame_shape_checked() {
        assert!(AttentionFrame::new(2, 2, vec![vec![1.0]; 3]).is_err());
        assert!(AttentionFrame::new(1, 1, vec![vec![0.7, 0.7]]).is_err());
        let empty = AttentionFrame::new(0, 3, vec![]).unwrap();
        assert!(mean_attention_entropy(&empty).is_err());
    }
}
