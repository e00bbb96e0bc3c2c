//! Geometric augmentation of targets and square patch extraction.

use std::collections::VecDeque;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    FlipH,
    FlipV,
    /// Counter-clockwise rotation by `k` quarter turns.
    Rot90(u8),
    /// Zoom about the image centre, keeping the shape. Factor in [0.5, 2].
    Rescale(f64),
}

impl FromStr for AugmentOp {
    type Err = Error;

    /// `flip_h`, `flip_v`, `rot90`, `rot90x<k>`, `rescale:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip_h" => Ok(AugmentOp::FlipH),
            "flip_v" => Ok(AugmentOp::FlipV),
            "rot90" => Ok(AugmentOp::Rot90(1)),
            _ => {
                if let Some(k) = s.strip_prefix("rot90x") {
                    let k: u8 = k.parse().map_err(|_| Error::invalid(format!("bad rotation `{s}`")))?;
                    return Ok(AugmentOp::Rot90(k % 4));
                }
                if let Some(f) = s.strip_prefix("rescale:") {
                    let f: f64 = f.parse().map_err(|_| Error::invalid(format!("bad factor `{s}`")))?;
                    return Ok(AugmentOp::Rescale(f));
                }
                Err(Error::invalid(format!("unknown augmentation `{s}`")))
            }
        }
    }
}

impl std::fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AugmentOp::FlipH => write!(f, "flip_h"),
            AugmentOp::FlipV => write!(f, "flip_v"),
            AugmentOp::Rot90(k) => write!(f, "rot90x{k}"),
            AugmentOp::Rescale(x) => write!(f, "rescale:{x}"),
        }
    }
}

pub fn augment(img: &ImageGrid, op: AugmentOp) -> Result<ImageGrid> {
    let (h, w) = img.shape();
    Ok(match op {
        AugmentOp::FlipH => ImageGrid::from_fn(h, w, |r, c| img.get(r, w - 1 - c)),
        AugmentOp::FlipV => ImageGrid::from_fn(h, w, |r, c| img.get(h - 1 - r, c)),
        AugmentOp::Rot90(k) => {
            let mut out = img.clone();
            for _ in 0..k % 4 {
                let (h, w) = out.shape();
                let src = out;
                // Counter-clockwise: new (r, c) reads old (c, w-1-r).
                out = ImageGrid::from_fn(w, h, |r, c| src.get(c, w - 1 - r));
            }
            out
        }
        AugmentOp::Rescale(f) => {
            if !(0.5..=2.0).contains(&f) {
                return Err(Error::invalid(format!("rescale factor {f} outside [0.5, 2.0]")));
            }
            if f == 1.0 {
                return Ok(img.clone());
            }
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            ImageGrid::from_fn(h, w, |r, c| {
                img.bilinear(cy + (r as f64 - cy) / f, cx + (c as f64 - cx) / f) as f32
            })
        }
    })
}

/// Keeps only the largest 4-connected foreground component. Ties go to the
/// component reached first in row-major order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (label, size)
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0;
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.bits()[j] && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    match best {
        None => Mask::empty(h, w),
        Some((id, _)) => Mask::new(h, w, label.iter().map(|&l| l == id).collect()).expect("same shape"),
    }
}

/// Largest axis-aligned square fully inside the largest connected component
/// of `mask`, as `(row, col, side)` of its top-left corner. Among equal
/// squares the first in row-major order of the corner wins.
pub fn largest_inscribed_square(mask: &Mask) -> Result<(usize, usize, usize)> {
    if mask.count() == 0 {
        return Err(Error::invalid("mask has no foreground pixels"));
    }
    let comp = largest_component(mask);
    let (h, w) = comp.shape();
    // side[r][c]: largest square with bottom-right corner at (r, c).
    let mut side = vec![0usize; h * w];
    let mut best = (0usize, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if !comp.get(r, c) {
                continue;
            }
            let s = if r == 0 || c == 0 {
                1
            } else {
                1 + side[(r - 1) * w + c]
                    .min(side[r * w + c - 1])
                    .min(side[(r - 1) * w + c - 1])
            };
            side[r * w + c] = s;
            let (tr, tc) = (r + 1 - s, c + 1 - s);
            if s > best.2 || (s == best.2 && (tr, tc) < (best.0, best.1)) {
                best = (tr, tc, s);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, |r, c| (r * w + c) as f32)
    }

    #[test]
    fn flips_and_rotations_are_involutions() {
        let img = ramp(5, 7);
        let twice = augment(&augment(&img, AugmentOp::FlipH).unwrap(), AugmentOp::FlipH).unwrap();
        assert_eq!(twice, img);
        let twice = augment(&augment(&img, AugmentOp::FlipV).unwrap(), AugmentOp::FlipV).unwrap();
        assert_eq!(twice, img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = augment(&r, AugmentOp::Rot90(1)).unwrap();
        }
        assert_eq!(r, img);
        assert_eq!(augment(&img, AugmentOp::Rot90(1)).unwrap().shape(), (7, 5));
        assert_eq!(augment(&img, AugmentOp::Rot90(4)).unwrap(), img);
    }

    #[test]
    fn rotation_direction() {
        let img = ImageGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = augment(&img, AugmentOp::Rot90(1)).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rescale_identity_and_range() {
        let img = ramp(6, 6).map(|v| v.sin());
        assert_eq!(augment(&img, AugmentOp::Rescale(1.0)).unwrap(), img);
        assert!(augment(&img, AugmentOp::Rescale(0.4)).is_err());
        assert!(augment(&img, AugmentOp::Rescale(2.1)).is_err());
        let z = augment(&img, AugmentOp::Rescale(1.7)).unwrap();
        assert_eq!(z.shape(), img.shape());
        let (lo, hi) = img.min_max();
        assert!(z.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn flips_preserve_histogram() {
        let img = ramp(4, 9);
        let mut a = img.data().to_vec();
        let mut b = augment(&img, AugmentOp::Rot90(3)).unwrap().into_data();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn parse_ops() {
        assert_eq!("flip_h".parse::<AugmentOp>().unwrap(), AugmentOp::FlipH);
        assert_eq!("rot90x3".parse::<AugmentOp>().unwrap(), AugmentOp::Rot90(3));
        assert_eq!("rescale:1.5".parse::<AugmentOp>().unwrap(), AugmentOp::Rescale(1.5));
        assert!("blur".parse::<AugmentOp>().is_err());
    }

    #[test]
    fn square_examples() {
        let full = Mask::from_fn(10, 10, |_, _| true);
        assert_eq!(largest_inscribed_square(&full).unwrap(), (0, 0, 10));

        let mut single = Mask::empty(8, 8);
        single.set(3, 5, true);
        assert_eq!(largest_inscribed_square(&single).unwrap(), (3, 5, 1));

        // 6x6 with the top-right 3x3 removed.
        let l_shape = Mask::from_fn(6, 6, |r, c| !(r < 3 && c >= 3));
        assert_eq!(brute_force_side(&l_shape), 3);
        assert_eq!(largest_inscribed_square(&l_shape).unwrap().2, 3);

        assert!(largest_inscribed_square(&Mask::empty(4, 4)).is_err());
    }

    #[test]
    fn small_components_are_dropped() {
        // A lone 2x2 blob and a 3x5 block: the square must come from the block.
        let m = Mask::from_fn(8, 10, |r, c| {
            (r < 2 && c < 2) || ((4..7).contains(&r) && (4..9).contains(&c))
        });
        assert_eq!(largest_inscribed_square(&m).unwrap(), (4, 4, 3));
    }

    fn square_fits(mask: &Mask, r: usize, c: usize, s: usize) -> bool {
        r + s <= mask.height() && c + s <= mask.width() && (r..r + s).all(|i| (c..c + s).all(|j| mask.get(i, j)))
    }

    fn brute_force_side(mask: &Mask) -> usize {
        let mut best = 0;
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                for s in 1..=mask.height().min(mask.width()) {
                    if square_fits(mask, r, c, s) {
                        best = best.max(s);
                    }
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), density in 0.3f64..0.95) {
            let mut rng = Rng::new(seed);
            let m = Mask::from_fn(9, 9, |_, _| rng.uniform() < density);
            prop_assume!(m.count() > 0);
            let comp = largest_component(&m);
            let (r, c, s) = largest_inscribed_square(&m).unwrap();
            prop_assert!(square_fits(&comp, r, c, s));
            prop_assert_eq!(s, brute_force_side(&comp));
        }
    }
}
