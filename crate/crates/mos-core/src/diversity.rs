//! Combinational diversity: how many distinct adapter compositions a pool
//! configuration admits, counted exactly with big integers.
//!
//! Counts treat selections as unordered sets (binomial coefficients). The
//! index matrices in this crate are ordered and sample with replacement,
//! which admits strictly more arrangements; reports carry that count too,
//! clearly labeled, rather than conflating the two.

use num_bigint::BigUint;
use num_traits::One;

use crate::error::{MosError, Result};

/// Differentiation stage being counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityVariant {
    /// Every layer takes the whole pool: one possible composition.
    PureSharing,
    /// r of the L*e pooled pairs per layer, tied across sides.
    SubsetSelection,
    /// Independent per-side selections of r of L*e vectors.
    PairDissociation,
    /// Independent per-side selections of r*l of L*l*e shards.
    VectorSharding,
}

impl DiversityVariant {
    pub fn name(self) -> &'static str {
        match self {
            DiversityVariant::PureSharing => "pure",
            DiversityVariant::SubsetSelection => "subset",
            DiversityVariant::PairDissociation => "dissociation",
            DiversityVariant::VectorSharding => "sharding",
        }
    }
}

impl std::str::FromStr for DiversityVariant {
    type Err = MosError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pure" | "pure_sharing" => DiversityVariant::PureSharing,
            "subset" | "subset_selection" => DiversityVariant::SubsetSelection,
            "dissociation" | "pair_dissociation" => DiversityVariant::PairDissociation,
            "sharding" | "vector_sharding" => DiversityVariant::VectorSharding,
            other => {
                return Err(MosError::Config(format!(
                    "unknown diversity variant {other:?}"
                )))
            }
        })
    }
}

/// Exact composition count for one variant, with the closed form it came
/// from and, where ordered routing applies, the ordered-with-replacement
/// count as well.
#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub variant: DiversityVariant,
    pub combinations: BigUint,
    pub formula: String,
    /// Arrangements available to ordered index vectors sampling with
    /// replacement: pool_size^(selections) per side.
    pub ordered_with_replacement: Option<BigUint>,
    pub ordered_formula: Option<String>,
}

/// Binomial coefficient C(n, k) as an exact big integer.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Closed-form composition counts per layer:
/// pure sharing 1, subset selection C(Le, r), pair dissociation C(Le, r)^2,
/// vector sharding C(Lle, rl)^2.
pub fn diversity(
    variant: DiversityVariant,
    num_blocks: u64,
    equivalent_rank: u64,
    rank: u64,
    shards_per_vector: u64,
) -> Result<DiversityReport> {
    let (big_l, e, r, l) = (num_blocks, equivalent_rank, rank, shards_per_vector);
    if big_l == 0 || e == 0 || r == 0 || l == 0 {
        return Err(MosError::Domain(
            "diversity arguments must all be >= 1".into(),
        ));
    }
    let pool_rank = big_l * e;
    if r > pool_rank {
        return Err(MosError::Domain(format!(
            "rank {r} exceeds pool rank L*e = {pool_rank}"
        )));
    }
    // r <= Le implies r*l <= L*l*e, so the sharded form is well-posed too.
    let report = match variant {
        DiversityVariant::PureSharing => DiversityReport {
            variant,
            combinations: BigUint::one(),
            formula: format!("C({pool_rank},{pool_rank}) = 1"),
            ordered_with_replacement: None,
            ordered_formula: None,
        },
        DiversityVariant::SubsetSelection => DiversityReport {
            variant,
            combinations: binomial(pool_rank, r),
            formula: format!("C({pool_rank},{r})"),
            ordered_with_replacement: None,
            ordered_formula: None,
        },
        DiversityVariant::PairDissociation => {
            let per_side = binomial(pool_rank, r);
            DiversityReport {
                variant,
                combinations: &per_side * &per_side,
                formula: format!("C({pool_rank},{r})^2"),
                ordered_with_replacement: Some(BigUint::from(pool_rank).pow(2 * r as u32)),
                ordered_formula: Some(format!("({pool_rank}^{r})^2")),
            }
        }
        DiversityVariant::VectorSharding => {
            let pool_shards = pool_rank * l;
            let picks = r * l;
            let per_side = binomial(pool_shards, picks);
            DiversityReport {
                variant,
                combinations: &per_side * &per_side,
                formula: format!("C({pool_shards},{picks})^2"),
                ordered_with_replacement: Some(BigUint::from(pool_shards).pow(2 * picks as u32)),
                ordered_formula: Some(format!("({pool_shards}^{picks})^2")),
            }
        }
    };
    Ok(report)
}
