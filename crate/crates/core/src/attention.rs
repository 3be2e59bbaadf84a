//! Text/image attention shares per generated token.
//!
//! Each generated token contributes one attention vector over the input
//! tokens. BOS positions are zeroed, the remaining mass is renormalized and
//! split by modality.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("row {row} has length {len}, expected {expected}")]
    RowLength { row: usize, len: usize, expected: usize },
    #[error("n_{modality} is {declared} but roles tag {counted} positions")]
    CountMismatch {
        modality: &'static str,
        declared: usize,
        counted: usize,
    },
    #[error("{rows} rows but {tokens} generated tokens")]
    TokenCount { rows: usize, tokens: usize },
    #[error("row {row}, position {col}: weight {value} is negative or non-finite")]
    BadWeight { row: usize, col: usize, value: f64 },
    #[error("every row is degenerate")]
    AllDegenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Text,
    Image,
    Bos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub n_text: usize,
    pub n_image: usize,
    pub roles: Vec<TokenRole>,
    pub rows: Vec<Vec<f64>>,
    pub tokens: Vec<String>,
}

impl AttentionBundle {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let count = |role| self.roles.iter().filter(|&&r| r == role).count();
        for (modality, declared, role) in [("text", self.n_text, TokenRole::Text), ("image", self.n_image, TokenRole::Image)] {
            let counted = count(role);
            if counted != declared {
                return Err(AttentionError::CountMismatch {
                    modality,
                    declared,
                    counted,
                });
            }
        }
        if self.tokens.len() != self.rows.len() {
            return Err(AttentionError::TokenCount {
                rows: self.rows.len(),
                tokens: self.tokens.len(),
            });
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.roles.len() {
                return Err(AttentionError::RowLength {
                    row: i,
                    len: row.len(),
                    expected: self.roles.len(),
                });
            }
            if let Some((col, &value)) = row.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(AttentionError::BadWeight { row: i, col, value });
            }
        }
        Ok(())
    }
}

pub fn zero_bos(row: &[f64], roles: &[TokenRole]) -> Result<Vec<f64>, AttentionError> {
    if row.len() != roles.len() {
        return Err(AttentionError::RowLength {
            row: 0,
            len: row.len(),
            expected: roles.len(),
        });
    }
    Ok(row
        .iter()
        .zip(roles)
        .map(|(&w, &r)| if r == TokenRole::Bos { 0.0 } else { w })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityShare {
    pub t: usize,
    pub text_share: f64,
    pub image_share: f64,
}

/// Shares of one generated token, or a marker when no mass is left after
/// BOS zeroing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowShare {
    Defined(ModalityShare),
    Degenerate { t: usize },
}

impl RowShare {
    pub fn t(&self) -> usize {
        match self {
            RowShare::Defined(s) => s.t,
            RowShare::Degenerate { t } => *t,
        }
    }

    pub fn share(&self) -> Option<&ModalityShare> {
        match self {
            RowShare::Defined(s) => Some(s),
            RowShare::Degenerate { .. } => None,
        }
    }
}

/// Assumes a validated bundle.
pub fn modality_shares(bundle: &AttentionBundle) -> Vec<RowShare> {
    bundle
        .rows
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let (mut text, mut image) = (0.0, 0.0);
            for (&w, &role) in row.iter().zip(&bundle.roles) {
                match role {
                    TokenRole::Text => text += w,
                    TokenRole::Image => image += w,
                    TokenRole::Bos => {}
                }
            }
            let total = text + image;
            if total > 0.0 {
                RowShare::Defined(ModalityShare {
                    t,
                    text_share: text / total,
                    image_share: image / total,
                })
            } else {
                RowShare::Degenerate { t }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareSummary {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl ShareSummary {
    fn of(values: &[f64]) -> ShareSummary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // keep min ≤ mean ≤ max under rounding of the mean
        ShareSummary {
            mean: mean.clamp(min, max),
            variance,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub n_rows: usize,
    pub n_degenerate: usize,
    pub text: ShareSummary,
    pub image: ShareSummary,
}

pub fn stability(shares: &[RowShare]) -> Result<StabilityStats, AttentionError> {
    let defined: Vec<&ModalityShare> = shares.iter().filter_map(RowShare::share).collect();
    if defined.is_empty() {
        return Err(AttentionError::AllDegenerate);
    }
    let text: Vec<f64> = defined.iter().map(|s| s.text_share).collect();
    let image: Vec<f64> = defined.iter().map(|s| s.image_share).collect();
    Ok(StabilityStats {
        n_rows: defined.len(),
        n_degenerate: shares.len() - defined.len(),
        text: ShareSummary::of(&text),
        image: ShareSummary::of(&image),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TokenRole::*;

    fn bundle(roles: Vec<TokenRole>, rows: Vec<Vec<f64>>) -> AttentionBundle {
        let count = |r| roles.iter().filter(|&&x| x == r).count();
        AttentionBundle {
            n_text: count(Text),
            n_image: count(Image),
            tokens: (0..rows.len()).map(|i| format!("tok{i}")).collect(),
            roles,
            rows,
        }
    }

    #[test]
    fn zero_bos_cases() {
        assert_eq!(zero_bos(&[0.5, 0.3, 0.2], &[Bos, Text, Image]).unwrap(), vec![0.0, 0.3, 0.2]);
        assert_eq!(zero_bos(&[0.3, 0.7], &[Text, Image]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(zero_bos(&[1.0, 0.0], &[Bos, Text]).unwrap(), vec![0.0, 0.0]);
        assert!(zero_bos(&[1.0], &[Bos, Text]).is_err());
    }

    #[test]
    fn hand_computed_shares() {
        let b = bundle(vec![Bos, Text, Image], vec![vec![0.5, 0.3, 0.2]]);
        b.validate().unwrap();
        let s = modality_shares(&b)[0].share().copied().unwrap();
        assert!((s.text_share - 0.6).abs() < 1e-9);
        assert!((s.image_share - 0.4).abs() < 1e-9);

        let b = bundle(vec![Text], vec![vec![1.0]]);
        assert_eq!(
            modality_shares(&b)[0],
            RowShare::Defined(ModalityShare { t: 0, text_share: 1.0, image_share: 0.0 })
        );

        let b = bundle(vec![Bos, Text, Image], vec![vec![1.0, 0.0, 0.0]]);
        assert_eq!(modality_shares(&b)[0], RowShare::Degenerate { t: 0 });
    }

    #[test]
    fn validation_errors() {
        let mut b = bundle(vec![Bos, Text, Image], vec![vec![0.5, 0.3]]);
        assert!(matches!(b.validate(), Err(AttentionError::RowLength { .. })));
        b.rows = vec![vec![0.5, -0.1, 0.2]];
        assert!(matches!(b.validate(), Err(AttentionError::BadWeight { col: 1, .. })));
        b.rows = vec![vec![0.5, 0.3, 0.2]];
        b.n_text = 2;
        assert!(matches!(b.validate(), Err(AttentionError::CountMismatch { modality: "text", .. })));
        b.n_text = 1;
        b.tokens.clear();
        assert!(matches!(b.validate(), Err(AttentionError::TokenCount { .. })));
    }

    #[test]
    fn stability_cases() {
        let constant: Vec<RowShare> = (0..5)
            .map(|t| RowShare::Defined(ModalityShare { t, text_share: 0.7, image_share: 0.3 }))
            .collect();
        let s = stability(&constant).unwrap();
        assert_eq!(s.text.variance, 0.0);
        assert_eq!(s.image.variance, 0.0);

        let two = [
            RowShare::Defined(ModalityShare { t: 0, text_share: 0.6, image_share: 0.4 }),
            RowShare::Defined(ModalityShare { t: 1, text_share: 0.8, image_share: 0.2 }),
            RowShare::Degenerate { t: 2 },
        ];
        let s = stability(&two).unwrap();
        assert!((s.text.mean - 0.7).abs() < 1e-12);
        assert!((s.text.variance - 0.01).abs() < 1e-12);
        assert_eq!(s.n_degenerate, 1);

        let s = stability(&two[..1]).unwrap();
        assert_eq!(s.text.variance, 0.0);
        assert_eq!((s.text.min, s.text.mean, s.text.max), (0.6, 0.6, 0.6));

        assert_eq!(stability(&two[2..]), Err(AttentionError::AllDegenerate));
    }

    fn arb_row() -> impl Strategy<Value = (Vec<TokenRole>, Vec<f64>)> {
        prop::collection::vec(
            (prop_oneof![Just(Text), Just(Image), Just(Bos)], 0.0f64..1.0),
            1..24,
        )
        .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn bos_invariance((roles, row) in arb_row(), replacement in 0.0f64..100.0) {
            let b = bundle(roles.clone(), vec![row.clone()]);
            let swapped: Vec<f64> = row.iter().zip(&roles).map(|(&w, &r)| if r == Bos { replacement } else { w }).collect();
            let b2 = bundle(roles, vec![swapped]);
            prop_assert_eq!(modality_shares(&b), modality_shares(&b2));
        }

        #[test]
        fn scale_invariance((roles, row) in arb_row(), k in 1e-3f64..1e3) {
            let b = bundle(roles.clone(), vec![row.clone()]);
            let b2 = bundle(roles, vec![row.iter().map(|w| w * k).collect()]);
            match (modality_shares(&b)[0], modality_shares(&b2)[0]) {
                (RowShare::Defined(x), RowShare::Defined(y)) => {
                    prop_assert!((x.text_share - y.text_share).abs() < 1e-9);
                    prop_assert!((x.image_share - y.image_share).abs() < 1e-9);
                    prop_assert!((x.text_share + x.image_share - 1.0).abs() < 1e-9);
                }
                (RowShare::Degenerate { .. }, RowShare::Degenerate { .. }) => {}
                (x, y) => prop_assert!(false, "{:?} vs {:?}", x, y),
            }
        }

        #[test]
        fn stats_ordered(vals in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let shares: Vec<RowShare> = vals.iter().enumerate()
                .map(|(t, &v)| RowShare::Defined(ModalityShare { t, text_share: v, image_share: 1.0 - v }))
                .collect();
            let s = stability(&shares).unwrap();
            prop_assert!(s.text.min <= s.text.mean && s.text.mean <= s.text.max);
            prop_assert!(s.image.min <= s.image.mean && s.image.mean <= s.image.max);
            prop_assert!(s.text.variance >= 0.0);
        }
    }
}
