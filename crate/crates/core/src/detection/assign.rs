use super::GtBox;

/// Half-width, in strides, of the square around a box center whose cells
/// may become positives.
pub const CENTER_RADIUS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAssignment {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major; `Some(i)` marks a positive cell matched to `gts[i]`.
    pub matched: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.matched.iter().filter(|m| m.is_some()).count())
            .sum()
    }
}

/// Center-radius assignment. A cell, whose center is `((gx + 0.5) s,
/// (gy + 0.5) s)`, is positive when that point lies strictly inside a box
/// and within `CENTER_RADIUS * s` of the box center along both axes. A cell
/// claimed by several boxes goes to the nearest center, then the smaller
/// area, then the lower index.
///
/// `levels` holds `(height, width, stride)` per pyramid level.
pub fn assign_targets(gts: &[GtBox], levels: &[(usize, usize, usize)]) -> Assignment {
    let levels = levels
        .iter()
        .map(|&(height, width, stride)| {
            let s = stride as f64;
            let r = CENTER_RADIUS * s;
            let mut matched = vec![None; height * width];
            for (gi, g) in gts.iter().enumerate() {
                let b = &g.bbox;
                // only cells near the box center can qualify
                let lo_x = (((b.cx - r) / s - 0.5).floor().max(0.0)) as usize;
                let hi_x = (((b.cx + r) / s - 0.5).ceil().max(0.0) as usize).min(width);
                let lo_y = (((b.cy - r) / s - 0.5).floor().max(0.0)) as usize;
                let hi_y = (((b.cy + r) / s - 0.5).ceil().max(0.0) as usize).min(height);
                for gy in lo_y..hi_y {
                    let py = (gy as f64 + 0.5) * s;
                    for gx in lo_x..hi_x {
                        let px = (gx as f64 + 0.5) * s;
                        let inside = px > b.x0() && px < b.x1() && py > b.y0() && py < b.y1();
                        let near = (px - b.cx).abs() < r && (py - b.cy).abs() < r;
                        if !(inside && near) {
                            continue;
                        }
                        let slot = &mut matched[gy * width + gx];
                        let better = match *slot {
                            None => true,
                            Some(prev) => {
                                let d =
                                    |g: &GtBox| (px - g.bbox.cx).powi(2) + (py - g.bbox.cy).powi(2);
                                let p: &GtBox = &gts[prev];
                                d(g).total_cmp(&d(p))
                                    .then(b.area().total_cmp(&p.bbox.area()))
                                    .is_lt()
                            }
                        };
                        if better {
                            *slot = Some(gi);
                        }
                    }
                }
            }
            LevelAssignment {
                stride,
                height,
                width,
                matched,
            }
        })
        .collect();
    Assignment { levels }
}
