use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PhantomCase;

/// One random draw of the geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    /// Integer (row, column) shift; vacated pixels are zero.
    pub shift: (i32, i32),
}

impl AugmentDraw {
    pub const MAX_SHIFT: i32 = 4;

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            flip_horizontal: rng.random(),
            flip_vertical: rng.random(),
            quarter_turns: rng.random_range(0..4),
            shift: (
                rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
                rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            ),
        }
    }

    pub fn apply<T: Clone + Default>(&self, a: &Array2<T>) -> Array2<T> {
        let mut out = a.clone();
        if self.flip_horizontal {
            out = out.slice(s![.., ..;-1]).to_owned();
        }
        if self.flip_vertical {
            out = out.slice(s![..;-1, ..]).to_owned();
        }
        for _ in 0..self.quarter_turns % 4 {
            // counter-clockwise: transpose then flip rows
            out = out.t().slice(s![..;-1, ..]).to_owned();
        }
        if self.shift != (0, 0) {
            out = shift(&out, self.shift);
        }
        out
    }
}

fn shift<T: Clone + Default>(a: &Array2<T>, (dr, dc): (i32, i32)) -> Array2<T> {
    let (rows, cols) = a.dim();
    let mut out = Array2::from_elem((rows, cols), T::default());
    for r in 0..rows as i64 {
        let sr = r - dr as i64;
        if sr < 0 || sr >= rows as i64 {
            continue;
        }
        for c in 0..cols as i64 {
            let sc = c - dc as i64;
            if sc < 0 || sc >= cols as i64 {
                continue;
            }
            out[[r as usize, c as usize]] = a[[sr as usize, sc as usize]].clone();
        }
    }
    out
}

/// Apply the same geometric transform to every field of the case.
pub fn augment_with(case: &PhantomCase, draw: &AugmentDraw) -> PhantomCase {
    PhantomCase {
        case_id: case.case_id.clone(),
        t1: draw.apply(&case.t1),
        flair: draw.apply(&case.flair),
        metabolite_maps: case
            .metabolite_maps
            .iter()
            .map(|(m, f)| (*m, draw.apply(f)))
            .collect(),
        quality_mask: draw.apply(&case.quality_mask),
        tumor_mask: draw.apply(&case.tumor_mask),
    }
}

pub fn augment<R: Rng + ?Sized>(case: &PhantomCase, rng: &mut R) -> PhantomCase {
    let draw = AugmentDraw::sample(rng);
    augment_with(case, &draw)
}
