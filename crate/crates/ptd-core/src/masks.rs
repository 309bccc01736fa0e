//! Binary keep-masks over the prunable parameter set and the global
//! magnitude criterion.
//!
//! The prunable set is conv kernels and dense matrices (classifier included);
//! biases and batchnorm parameters are always kept.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Scalar;

/// One keep-mask per prunable tensor, in canonical parameter order.
/// `true` = keep.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    entries: Vec<(String, Vec<bool>)>,
}

impl MaskSet {
    /// All-ones masks matching the prunable tensors of `params`.
    pub fn dense<T: Scalar>(params: &ParamSet<T>) -> Self {
        let mut entries = Vec::new();
        params.visit(&mut |path, role, t| {
            if role.prunable() {
                entries.push((path.to_string(), vec![true; t.len()]));
            }
        });
        MaskSet { entries }
    }

    pub fn entries(&self) -> &[(String, Vec<bool>)] {
        &self.entries
    }

    pub fn from_entries(entries: Vec<(String, Vec<bool>)>) -> Self {
        MaskSet { entries }
    }

    pub fn get(&self, path: &str) -> Option<&[bool]> {
        self.entries
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, m)| m.as_slice())
    }

    pub fn total_bits(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn kept(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, m)| m.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn pruned(&self) -> usize {
        self.total_bits() - self.kept()
    }

    /// Fraction of prunable weights masked out.
    pub fn sparsity(&self) -> f64 {
        if self.total_bits() == 0 {
            0.0
        } else {
            self.pruned() as f64 / self.total_bits() as f64
        }
    }

    /// True when every weight pruned in `earlier` is still pruned here.
    pub fn contains_pruned_of(&self, earlier: &MaskSet) -> bool {
        if self.entries.len() != earlier.entries.len() {
            return false;
        }
        self.entries
            .iter()
            .zip(&earlier.entries)
            .all(|((pa, ma), (pb, mb))| {
                pa == pb
                    && ma.len() == mb.len()
                    && ma.iter().zip(mb).all(|(&now, &was)| was || !now)
            })
    }

    /// Check that the masks line up with the prunable tensors of `params`.
    pub fn matches<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let mut want: Vec<(String, usize)> = Vec::new();
        params.visit(&mut |path, role, t| {
            if role.prunable() {
                want.push((path.to_string(), t.len()));
            }
        });
        if want.len() != self.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask set has {} entries, parameters have {} prunable tensors",
                self.entries.len(),
                want.len()
            )));
        }
        for ((wp, wl), (mp, m)) in want.iter().zip(&self.entries) {
            if wp != mp || *wl != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "mask {} ({} bits) does not match tensor {} ({} elements)",
                    mp,
                    m.len(),
                    wp,
                    wl
                )));
            }
        }
        Ok(())
    }

    /// Zero every masked coordinate (idempotent; assigns an exact +0.0).
    pub fn apply<T: Scalar>(&self, params: &mut ParamSet<T>) -> Result<()> {
        self.matches(params)?;
        let mut i = 0;
        params.visit_mut(&mut |_, role, t| {
            if role.prunable() {
                let mask = &self.entries[i].1;
                for (v, &keep) in t.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = T::zero();
                    }
                }
                i += 1;
            }
        });
        Ok(())
    }

    /// Error if any masked coordinate is nonzero.
    pub fn check_zeroed<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        self.matches(params)?;
        let mut i = 0;
        let mut bad: Option<String> = None;
        params.visit(&mut |path, role, t| {
            if role.prunable() {
                let mask = &self.entries[i].1;
                if bad.is_none() {
                    for (v, &keep) in t.data().iter().zip(mask) {
                        if !keep && *v != T::zero() {
                            bad = Some(path.to_string());
                            break;
                        }
                    }
                }
                i += 1;
            }
        });
        match bad {
            Some(p) => Err(Error::Verify(format!("masked weight nonzero in {p}"))),
            None => Ok(()),
        }
    }
}

/// Pool every currently-kept prunable weight across all layers and mask the
/// smallest magnitudes until total sparsity reaches `target` (within one
/// weight). Ties break by (layer index, flat index) ascending. Previously
/// masked weights stay masked.
pub fn global_magnitude_mask<T: Scalar>(
    params: &ParamSet<T>,
    target_sparsity: f64,
    existing: &MaskSet,
) -> Result<MaskSet> {
    existing.matches(params)?;
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity must be in [0,1), got {}",
            target_sparsity
        )));
    }
    let total = existing.total_bits();
    let already = existing.pruned();
    let want_pruned = (target_sparsity * total as f64).round() as usize;
    if want_pruned < already {
        return Err(Error::Config(format!(
            "target sparsity {:.4} is below current {:.4}",
            target_sparsity,
            existing.sparsity()
        )));
    }
    let need = want_pruned - already;
    let mut new_masks = existing.clone();
    if need == 0 {
        return Ok(new_masks);
    }

    // (magnitude, layer index, flat index) over the kept pool
    let mut pool: Vec<(f64, u32, u32)> = Vec::with_capacity(total - already);
    {
        let mut layer = 0u32;
        let mut entry = 0usize;
        params.visit(&mut |_, role, t| {
            if role.prunable() {
                let mask = &existing.entries[entry].1;
                for (j, (v, &keep)) in t.data().iter().zip(mask).enumerate() {
                    if keep {
                        pool.push((v.as_f64().abs(), layer, j as u32));
                    }
                }
                entry += 1;
                layer += 1;
            }
        });
    }
    pool.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite weights")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, layer, j) in pool.iter().take(need) {
        new_masks.entries[layer as usize].1[j as usize] = false;
    }
    Ok(new_masks)
}

/// Same selection rule over externally supplied per-weight scores.
pub fn global_score_mask(
    scores: &[Vec<f64>],
    target_sparsity: f64,
    existing: &MaskSet,
) -> Result<MaskSet> {
    if scores.len() != existing.entries.len()
        || scores
            .iter()
            .zip(existing.entries())
            .any(|(s, (_, m))| s.len() != m.len())
    {
        return Err(Error::ShapeMismatch(
            "score tensors do not line up with masks".into(),
        ));
    }
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity must be in [0,1), got {}",
            target_sparsity
        )));
    }
    let total = existing.total_bits();
    let already = existing.pruned();
    let want_pruned = (target_sparsity * total as f64).round() as usize;
    if want_pruned < already {
        return Err(Error::Config(format!(
            "target sparsity {:.4} is below current {:.4}",
            target_sparsity,
            existing.sparsity()
        )));
    }
    let need = want_pruned - already;
    let mut new_masks = existing.clone();
    if need == 0 {
        return Ok(new_masks);
    }
    let mut pool: Vec<(f64, u32, u32)> = Vec::with_capacity(total - already);
    for (layer, (s, (_, mask))) in scores.iter().zip(existing.entries()).enumerate() {
        for (j, (&score, &keep)) in s.iter().zip(mask).enumerate() {
            if keep {
                pool.push((score, layer as u32, j as u32));
            }
        }
    }
    pool.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite scores")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for &(_, layer, j) in pool.iter().take(need) {
        new_masks.entries[layer as usize].1[j as usize] = false;
    }
    Ok(new_masks)
}
