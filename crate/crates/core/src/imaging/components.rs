use super::{BBox, BinaryMask};

/// One 8-connected region of `true` pixels with its tight bounding box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Pixel indices `y * width + x`, ascending.
    pub pixels: Vec<usize>,
    pub bbox: BBox,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // smaller root wins so labels stay in raster order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Two-pass union-find labelling with 8-connectivity.
///
/// Components come back largest first; equal areas are ordered by the top-left
/// corner `(y0, x0)` of their box and then by their first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = mask.dims();
    let bits = mask.bits();
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            if x > 0 && bits[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if y > 0 {
                let up = i - w;
                if bits[up] {
                    union(&mut parent, i, up);
                }
                if x > 0 && bits[up - 1] {
                    union(&mut parent, i, up - 1);
                }
                if x + 1 < w && bits[up + 1] {
                    union(&mut parent, i, up + 1);
                }
            }
        }
    }

    let mut slot_of_root = vec![usize::MAX; w * h];
    let mut comps: Vec<Component> = Vec::new();
    for i in 0..w * h {
        if !bits[i] {
            continue;
        }
        let r = find(&mut parent, i);
        let (x, y) = (i % w, i / w);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = comps.len();
            comps.push(Component {
                pixels: Vec::new(),
                bbox: BBox {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                },
            });
        }
        let c = &mut comps[slot_of_root[r]];
        c.pixels.push(i);
        c.bbox.x0 = c.bbox.x0.min(x);
        c.bbox.x1 = c.bbox.x1.max(x + 1);
        c.bbox.y1 = c.bbox.y1.max(y + 1);
    }
    comps.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then(a.bbox.y0.cmp(&b.bbox.y0))
            .then(a.bbox.x0.cmp(&b.bbox.x0))
            .then(a.pixels[0].cmp(&b.pixels[0]))
    });
    comps
}
