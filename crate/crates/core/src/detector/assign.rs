//! Centre-sampling label assignment.

use crate::boxes::{area, BBox};

/// Positive cells lie within this many cells of a box centre (per axis).
pub const CENTER_RADIUS: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct CellTarget {
    pub category: usize,
    pub gt_index: usize,
    pub bbox: BBox,
    /// Distances `(left, top, right, bottom)` from the cell centre to the box sides.
    pub sides: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub grid: (usize, usize),
    pub stride: f64,
    /// `None` is background.
    pub cells: Vec<Option<CellTarget>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// A cell is positive for a box when its centre lies inside the box and
/// within `radius` cells of the box centre along both axes. Cells claimed by
/// several boxes go to the smallest one (lowest index on equal area).
pub fn assign_targets(
    boxes: &[BBox],
    categories: &[usize],
    grid: (usize, usize),
    image_size: (usize, usize),
    radius: f64,
) -> Assignment {
    debug_assert_eq!(boxes.len(), categories.len());
    let stride = image_size.1 as f64 / grid.1 as f64;
    let reach = radius * stride;
    let mut cells = Vec::with_capacity(grid.0 * grid.1);
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let cx = (gx as f64 + 0.5) * stride;
            let cy = (gy as f64 + 0.5) * stride;
            let mut best: Option<(f64, usize)> = None;
            for (j, b) in boxes.iter().enumerate() {
                let inside = cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3];
                let bx = (b[0] + b[2]) / 2.0;
                let by = (b[1] + b[3]) / 2.0;
                let near = (cx - bx).abs() <= reach && (cy - by).abs() <= reach;
                if inside && near {
                    let a = area(b);
                    if best.is_none_or(|(ba, _)| a < ba) {
                        best = Some((a, j));
                    }
                }
            }
            cells.push(best.map(|(_, j)| {
                let b = boxes[j];
                CellTarget {
                    category: categories[j],
                    gt_index: j,
                    bbox: b,
                    sides: [cx - b[0], cy - b[1], b[2] - cx, b[3] - cy],
                }
            }));
        }
    }
    Assignment { grid, stride, cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_ground_truth_is_all_background() {
        let a = assign_targets(&[], &[], (12, 12), (96, 96), CENTER_RADIUS);
        assert_eq!(a.cells.len(), 144);
        assert_eq!(a.num_positive(), 0);
    }

    #[test]
    fn whole_image_box_centre_cell_sides_are_half_extent() {
        // 88 px canvas on an 11x11 grid puts a cell centre at the image centre
        let b = [0.0, 0.0, 88.0, 88.0];
        let a = assign_targets(&[b], &[2], (11, 11), (88, 88), CENTER_RADIUS);
        let centre = a.cells[5 * 11 + 5].as_ref().unwrap();
        assert_eq!(centre.sides, [44.0, 44.0, 44.0, 44.0]);
        assert_eq!(centre.category, 2);
        for gy in 0..11usize {
            for gx in 0..11usize {
                let expect = gy.abs_diff(5) <= 1 && gx.abs_diff(5) <= 1;
                assert_eq!(a.cells[gy * 11 + gx].is_some(), expect, "cell {gy},{gx}");
            }
        }
    }

    /// Brute-force rule re-derivation: for every cell, collect all boxes that
    /// claim it and pick the minimum-area one.
    #[test]
    fn nested_boxes_resolve_to_the_smaller_box() {
        let outer = [8.0, 8.0, 88.0, 88.0];
        let inner = [32.0, 32.0, 64.0, 64.0];
        let boxes = [outer, inner];
        let a = assign_targets(&boxes, &[0, 1], (12, 12), (96, 96), 10.0);
        let mut overlap = 0;
        for (i, cell) in a.cells.iter().enumerate() {
            let (cx, cy) = ((i % 12) as f64 * 8.0 + 4.0, (i / 12) as f64 * 8.0 + 4.0);
            let claim: Vec<usize> = (0..2)
                .filter(|&j| {
                    let b = boxes[j];
                    cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3]
                })
                .collect();
            let expected = claim.iter().copied().min_by(|&x, &y| area(&boxes[x]).total_cmp(&area(&boxes[y])));
            assert_eq!(cell.as_ref().map(|c| c.gt_index), expected);
            if claim.len() == 2 {
                overlap += 1;
                assert_eq!(cell.as_ref().unwrap().category, 1);
            }
        }
        assert_eq!(overlap, 16);
    }
}
