use crate::dataset::{DimensionCount, MpRatios};

use super::{IndicatorSet, Verdicts};

/// Per-dimension satisfied/total over the rubric. Codes without a verdict
/// count as unsatisfied; dimensions with no indicators come out absent.
pub fn compute_mp_ratios(indicators: &IndicatorSet, verdicts: &Verdicts) -> MpRatios {
    let mut counts = [DimensionCount::default(); 4];
    for ind in &indicators.indicators {
        let c = &mut counts[ind.category.index()];
        c.total += 1;
        if verdicts.scores.get(&ind.code) == Some(&1) {
            c.satisfied += 1;
        }
    }
    MpRatios::from_counts(counts).expect("satisfied never exceeds total")
}
