//! Bookkeeping between regions, their local reference-point classes, and the
//! flat global class space the fused output is indexed by.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered map of regions to local class lists. Global classes are the
/// concatenation of local lists in region-insertion order, so each region
/// owns one contiguous slice of the fused output. Indices never move once
/// assigned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    regions: Vec<usize>,
    /// Local class lists (reference-point ids), parallel to `regions`.
    local_classes: Vec<Vec<usize>>,
    /// (region, rp) for each global class index.
    global_classes: Vec<(usize, usize)>,
    global_index: BTreeMap<(usize, usize), usize>,
    rp_coords: BTreeMap<usize, [f64; 3]>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a region and its reference points, assigning the next block of
    /// global class indices in the given order.
    pub fn add_region(&mut self, region_id: usize, classes: &[(usize, [f64; 3])]) -> Result<()> {
        if self.regions.contains(&region_id) {
            return Err(Error::Registry(format!("region {region_id} already registered")));
        }
        if classes.is_empty() {
            return Err(Error::Registry(format!("region {region_id} has no classes")));
        }
        for &(rp, _) in classes {
            if self.rp_coords.contains_key(&rp) {
                return Err(Error::Registry(format!(
                    "reference point {rp} already belongs to another region"
                )));
            }
        }
        let mut seen = classes.iter().map(|&(rp, _)| rp).collect::<Vec<_>>();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Registry(format!(
                "region {region_id} lists a reference point twice"
            )));
        }
        for &(rp, coord) in classes {
            let idx = self.global_classes.len();
            self.global_classes.push((region_id, rp));
            self.global_index.insert((region_id, rp), idx);
            self.rp_coords.insert(rp, coord);
        }
        self.regions.push(region_id);
        self.local_classes
            .push(classes.iter().map(|&(rp, _)| rp).collect());
        Ok(())
    }

    pub fn regions(&self) -> &[usize] {
        &self.regions
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn region_position(&self, region_id: usize) -> Option<usize> {
        self.regions.iter().position(|&r| r == region_id)
    }

    pub fn local_classes(&self, region_id: usize) -> Result<&[usize]> {
        let pos = self
            .region_position(region_id)
            .ok_or_else(|| Error::Registry(format!("unknown region {region_id}")))?;
        Ok(&self.local_classes[pos])
    }

    pub fn global_count(&self) -> usize {
        self.global_classes.len()
    }

    pub fn global_index(&self, region_id: usize, rp_id: usize) -> Result<usize> {
        self.global_index
            .get(&(region_id, rp_id))
            .copied()
            .ok_or_else(|| {
                Error::Registry(format!(
                    "no global class for region {region_id}, reference point {rp_id}"
                ))
            })
    }

    pub fn global_class(&self, index: usize) -> Result<(usize, usize)> {
        self.global_classes.get(index).copied().ok_or_else(|| {
            Error::Registry(format!(
                "global class {index} out of range ({} known)",
                self.global_classes.len()
            ))
        })
    }

    pub fn rp_coord(&self, rp_id: usize) -> Result<[f64; 3]> {
        self.rp_coords
            .get(&rp_id)
            .copied()
            .ok_or_else(|| Error::Registry(format!("no coordinates for reference point {rp_id}")))
    }

    /// Global index range [start, end) owned by the region at registry
    /// position `pos`. Contiguous because regions only ever append.
    pub fn slice_range(&self, pos: usize) -> Result<(usize, usize)> {
        if pos >= self.regions.len() {
            return Err(Error::Registry(format!(
                "region position {pos} out of range ({} regions)",
                self.regions.len()
            )));
        }
        let start: usize = self.local_classes[..pos].iter().map(Vec::len).sum();
        Ok((start, start + self.local_classes[pos].len()))
    }
}
