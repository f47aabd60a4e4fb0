//! Connected components, hole filling and 3×3 binary morphology.

use crate::grid::{Grid, LabelMap, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[inline]
fn neighbours(y: usize, x: usize, h: usize, w: usize, conn: Connectivity) -> impl Iterator<Item = (usize, usize)> {
    conn.offsets().iter().filter_map(move |&(dy, dx)| {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| (ny as usize, nx as usize))
    })
}

/// Labels foreground components 1..=n in row-major discovery order.
pub fn label_components(mask: &Mask, conn: Connectivity) -> (LabelMap, usize) {
    let (h, w) = mask.shape();
    let mut labels = LabelMap::new(h, w);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.at(y, x) || labels.at(y, x) != 0 {
                continue;
            }
            next += 1;
            labels.set(y, x, next);
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for (ny, nx) in neighbours(cy, cx, h, w, conn) {
                    if mask.at(ny, nx) && labels.at(ny, nx) == 0 {
                        labels.set(ny, nx, next);
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Pixel count per label; index 0 holds the background count.
pub fn label_areas(labels: &LabelMap) -> Vec<usize> {
    let max = labels.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut areas = vec![0usize; max + 1];
    for &l in labels.as_slice() {
        areas[l as usize] += 1;
    }
    areas
}

/// Drops 8-connected components with fewer than `min_size` pixels.
pub fn remove_small_components(mask: &Mask, min_size: usize) -> Mask {
    if min_size <= 1 {
        return mask.clone();
    }
    let (labels, _) = label_components(mask, Connectivity::Eight);
    let areas = label_areas(&labels);
    labels.map(|&l| l != 0 && areas[l as usize] >= min_size)
}

/// Keeps the largest 8-connected component; ties go to the first discovered.
pub fn largest_component(mask: &Mask) -> Mask {
    let (labels, n) = label_components(mask, Connectivity::Eight);
    if n == 0 {
        return mask.clone();
    }
    let areas = label_areas(&labels);
    let mut best = 1;
    for l in 2..=n {
        if areas[l] > areas[best] {
            best = l;
        }
    }
    labels.map(|&l| l as usize == best)
}

/// Renumbers positive labels to 1..=n in row-major order of first appearance.
pub fn relabel_sequential(labels: &LabelMap) -> (LabelMap, usize) {
    let mut mapping = std::collections::HashMap::new();
    let mut next = 0u32;
    let out = labels.map(|&l| {
        if l == 0 {
            0
        } else {
            *mapping.entry(l).or_insert_with(|| {
                next += 1;
                next
            })
        }
    });
    (out, next as usize)
}

/// Fills background regions (4-connected) that do not touch the border and
/// are enclosed by a single instance label.
pub fn fill_holes(labels: &LabelMap) -> LabelMap {
    let background = labels.map(|&l| l == 0);
    let (holes, n) = label_components(&background, Connectivity::Four);
    if n == 0 {
        return labels.clone();
    }
    let (h, w) = labels.shape();
    // 0 = unseen, u32::MAX = touches border or several labels
    let mut owner = vec![0u32; n + 1];
    for y in 0..h {
        for x in 0..w {
            let hole = holes.at(y, x) as usize;
            if hole == 0 {
                continue;
            }
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                owner[hole] = u32::MAX;
                continue;
            }
            for (ny, nx) in neighbours(y, x, h, w, Connectivity::Four) {
                let l = labels.at(ny, nx);
                if l == 0 {
                    continue;
                }
                owner[hole] = match owner[hole] {
                    0 => l,
                    o if o == l => o,
                    _ => u32::MAX,
                };
            }
        }
    }
    let mut out = labels.clone();
    for (i, &hole) in holes.as_slice().iter().enumerate() {
        let o = owner[hole as usize];
        if hole != 0 && o != 0 && o != u32::MAX {
            out.as_mut_slice()[i] = o;
        }
    }
    out
}

/// 3×3 dilation; out-of-grid pixels count as background.
pub fn dilate3(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    Grid::from_fn(h, w, |y, x| {
        mask.at(y, x) || neighbours(y, x, h, w, Connectivity::Eight).any(|(ny, nx)| mask.at(ny, nx))
    })
}

/// 3×3 erosion; out-of-grid pixels count as foreground, so erosion never
/// eats into the grid border on its own.
pub fn erode3(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    Grid::from_fn(h, w, |y, x| {
        mask.at(y, x) && neighbours(y, x, h, w, Connectivity::Eight).all(|(ny, nx)| mask.at(ny, nx))
    })
}

/// 3×3 closing with background beyond the grid, so the border can't be
/// filled in by the dilation step.
pub fn closing3(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    let mut padded = Mask::new(h + 2, w + 2);
    padded.paste(1, 1, mask);
    erode3(&dilate3(&padded))
        .crop(1, 1, h, w)
        .expect("crop lies inside the padded grid")
}

/// Half-open bounding box `(y0, x0, y1, x1)` of each label 1..=max.
pub fn label_bboxes(labels: &LabelMap) -> Vec<Option<(usize, usize, usize, usize)>> {
    let max = labels.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut boxes: Vec<Option<(usize, usize, usize, usize)>> = vec![None; max + 1];
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = labels.at(y, x) as usize;
            if l == 0 {
                continue;
            }
            let b = boxes[l].get_or_insert((y, x, y + 1, x + 1));
            b.0 = b.0.min(y);
            b.1 = b.1.min(x);
            b.2 = b.2.max(y + 1);
            b.3 = b.3.max(x + 1);
        }
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Grid::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn closing_leaves_border_corners_open() {
        let m = mask(&[".##.", "####", "####", ".##."]);
        assert_eq!(closing3(&m), m);
        let notch = mask(&["#....", "#.#..", "###.."]);
        assert_eq!(closing3(&notch), mask(&["#....", "###..", "###.."]));
    }

    #[test]
    fn eight_vs_four_connectivity() {
        let m = mask(&["#.", ".#"]);
        assert_eq!(label_components(&m, Connectivity::Eight).1, 1);
        assert_eq!(label_components(&m, Connectivity::Four).1, 2);
    }

    #[test]
    fn discovery_order_is_row_major() {
        let m = mask(&["..#", "#..", "#.#"]);
        let (l, n) = label_components(&m, Connectivity::Eight);
        assert_eq!(n, 3);
        assert_eq!(l.at(0, 2), 1);
        assert_eq!(l.at(1, 0), 2);
        assert_eq!(l.at(2, 2), 3);
    }

    #[test]
    fn holes_filled_only_when_enclosed() {
        let m = mask(&["#####", "#...#", "#####", "..#.."]);
        let (l, _) = label_components(&m, Connectivity::Eight);
        let f = fill_holes(&l);
        assert_eq!(f.at(1, 2), 1);
        assert_eq!(f.at(3, 0), 0);
    }

    #[test]
    fn closing_bridges_single_pixel_gap() {
        let m = mask(&[".....", ".#.#.", "....."]);
        let c = closing3(&m);
        assert!(c.at(1, 2));
        assert!(c.at(1, 1) && c.at(1, 3));
    }

    #[test]
    fn largest_component_keeps_bigger_blob() {
        let m = mask(&["##...", "##..#", "....."]);
        let l = largest_component(&m);
        assert_eq!(l.count(), 4);
        assert!(!l.at(1, 4));
    }

    #[test]
    fn bboxes_half_open() {
        let m = mask(&[".....", ".##..", ".##.."]);
        let (l, _) = label_components(&m, Connectivity::Eight);
        assert_eq!(label_bboxes(&l)[1], Some((1, 1, 3, 3)));
    }
}
