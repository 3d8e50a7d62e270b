//! Where each tensor element lives inside the slot vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotLayout {
    /// One vector per channel; element `(y, x)` sits at slot
    /// `y * row_step + x * col_step`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
        row_step: usize,
        col_step: usize,
        /// Every slot outside the element positions is known to be zero.
        clean: bool,
    },
    /// A single vector holding element `i` at slot `i`.
    Flat { len: usize, clean: bool },
}

impl SlotLayout {
    /// Row-major packing of each channel.
    pub fn packed(channels: usize, height: usize, width: usize) -> Self {
        SlotLayout::Image {
            channels,
            height,
            width,
            row_step: width,
            col_step: 1,
            clean: true,
        }
    }

    pub fn vectors(&self) -> usize {
        match *self {
            SlotLayout::Image { channels, .. } => channels,
            SlotLayout::Flat { .. } => 1,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            SlotLayout::Image {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
            SlotLayout::Flat { len, .. } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_clean(&self) -> bool {
        match *self {
            SlotLayout::Image { clean, .. } | SlotLayout::Flat { clean, .. } => clean,
        }
    }

    /// Slots holding elements, identical for every channel vector.
    pub fn valid_slots(&self) -> Vec<usize> {
        match *self {
            SlotLayout::Image {
                height,
                width,
                row_step,
                col_step,
                ..
            } => (0..height)
                .flat_map(|y| (0..width).map(move |x| y * row_step + x * col_step))
                .collect(),
            SlotLayout::Flat { len, .. } => (0..len).collect(),
        }
    }

    /// `(vector, slot)` of the element with channel-major flat index `i`.
    pub fn slot_of(&self, i: usize) -> (usize, usize) {
        match *self {
            SlotLayout::Image {
                height,
                width,
                row_step,
                col_step,
                ..
            } => {
                let (c, rest) = (i / (height * width), i % (height * width));
                (c, (rest / width) * row_step + (rest % width) * col_step)
            }
            SlotLayout::Flat { .. } => (0, i),
        }
    }

    /// Check the layout is injective and fits in `n` slots.
    pub fn check(&self, n: usize) -> Result<()> {
        let (max, injective) = match *self {
            SlotLayout::Image {
                height,
                width,
                row_step,
                col_step,
                ..
            } => {
                if height == 0 || width == 0 {
                    return Err(Error::Layout("empty image layout".into()));
                }
                let max = (height - 1) * row_step + (width - 1) * col_step;
                let injective = (width == 1 || col_step > 0)
                    && (height == 1 || row_step > (width - 1) * col_step);
                (max, injective)
            }
            SlotLayout::Flat { len, .. } => {
                if len == 0 {
                    return Err(Error::Layout("empty flat layout".into()));
                }
                (len - 1, true)
            }
        };
        if !injective {
            return Err(Error::Layout(format!(
                "{self:?} maps two elements to one slot"
            )));
        }
        if max >= n {
            return Err(Error::Layout(format!(
                "{self:?} needs slot {max} but N = {n}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_positions() {
        let l = SlotLayout::packed(2, 2, 3);
        assert_eq!(l.valid_slots(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(l.slot_of(7), (1, 1));
        assert!(l.check(8).is_ok());
        assert!(l.check(4).is_err());
    }

    #[test]
    fn strided_positions() {
        let l = SlotLayout::Image {
            channels: 1,
            height: 2,
            width: 2,
            row_step: 8,
            col_step: 2,
            clean: false,
        };
        assert_eq!(l.valid_slots(), vec![0, 2, 8, 10]);
        assert!(l.check(11).is_ok());
        let bad = SlotLayout::Image {
            channels: 1,
            height: 2,
            width: 3,
            row_step: 2,
            col_step: 1,
            clean: true,
        };
        assert!(bad.check(64).is_err());
    }
}
