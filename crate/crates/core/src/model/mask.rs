use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-position visibility: `masked[i]` marks a `[MASK]` slot, and
/// `newly_decoded` marks the positions revealed by the latest step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    pub masked: Vec<bool>,
    pub newly_decoded: Vec<bool>,
}

impl MaskState {
    pub fn all_masked(n: usize) -> Self {
        Self {
            masked: vec![true; n],
            newly_decoded: vec![false; n],
        }
    }

    pub fn from_masked(masked: Vec<bool>) -> Self {
        let n = masked.len();
        Self {
            masked,
            newly_decoded: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn num_visible(&self) -> usize {
        self.len() - self.num_masked()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn newly_decoded_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.newly_decoded[i]).collect()
    }

    /// Unmasks `positions`; they become the new newly-decoded set.
    pub fn reveal(&self, positions: &[usize]) -> Result<Self> {
        let mut next = Self {
            masked: self.masked.clone(),
            newly_decoded: vec![false; self.len()],
        };
        for &p in positions {
            if p >= self.len() || !self.masked[p] {
                return Err(Error::Model(format!(
                    "position {p} is not a masked position"
                )));
            }
            next.masked[p] = false;
            next.newly_decoded[p] = true;
        }
        Ok(next)
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked.len() != self.newly_decoded.len() {
            return Err(Error::Model(
                "mask and newly-decoded vectors differ in length".into(),
            ));
        }
        if let Some(i) = (0..self.len()).find(|&i| self.newly_decoded[i] && self.masked[i]) {
            return Err(Error::Model(format!(
                "position {i} is newly decoded but still masked"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reveal_tracks_delta() {
        let s = MaskState::all_masked(5);
        let s1 = s.reveal(&[1, 3]).unwrap();
        assert_eq!(s1.visible_positions(), vec![1, 3]);
        assert_eq!(s1.newly_decoded_positions(), vec![1, 3]);
        let s2 = s1.reveal(&[0]).unwrap();
        assert_eq!(s2.newly_decoded_positions(), vec![0]);
        assert_eq!(s2.num_visible() + s2.num_masked(), 5);
        s2.validate().unwrap();
        assert!(s2.reveal(&[1]).is_err());
    }
}
