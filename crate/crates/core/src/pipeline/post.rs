//! Connected-component labelling and small-component removal.

use crate::metrics::BinaryMask;

/// Default relative-area threshold of [`postprocess`].
pub const DEFAULT_TAU: f64 = 0.05;

/// 8-connected components of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Per pixel: 0 for background, otherwise `1 + ` the index into `areas`.
    pub labels: Vec<u32>,
    /// Component areas, largest first (ties broken by raster order of the
    /// component's first pixel).
    pub areas: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller root wins so roots follow raster order
        if ra < rb {
            self.parent[rb as usize] = ra;
        } else if rb < ra {
            self.parent[ra as usize] = rb;
        }
    }
}

pub fn connected_components(mask: &BinaryMask) -> Components {
    let (h, w) = (mask.height(), mask.width());
    let mut uf = UnionFind {
        parent: (0..(h * w) as u32).collect(),
    };
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let i = (y * w + x) as u32;
            // already-visited neighbours: W, NW, N, NE
            if x > 0 && mask.get(y, x - 1) {
                uf.union(i, i - 1);
            }
            if y > 0 {
                let up = i - w as u32;
                if mask.get(y - 1, x) {
                    uf.union(i, up);
                }
                if x > 0 && mask.get(y - 1, x - 1) {
                    uf.union(i, up - 1);
                }
                if x + 1 < w && mask.get(y - 1, x + 1) {
                    uf.union(i, up + 1);
                }
            }
        }
    }
    // roots in raster order of first appearance
    let mut root_slot = vec![u32::MAX; h * w];
    let mut raw_areas: Vec<usize> = Vec::new();
    let mut pixel_root = vec![u32::MAX; h * w];
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let r = uf.find(i as u32) as usize;
        if root_slot[r] == u32::MAX {
            root_slot[r] = raw_areas.len() as u32;
            raw_areas.push(0);
        }
        let slot = root_slot[r];
        raw_areas[slot as usize] += 1;
        pixel_root[i] = slot;
    }
    let mut order: Vec<usize> = (0..raw_areas.len()).collect();
    order.sort_by(|&a, &b| raw_areas[b].cmp(&raw_areas[a]).then(a.cmp(&b)));
    let mut rank = vec![0u32; order.len()];
    for (r, &slot) in order.iter().enumerate() {
        rank[slot] = r as u32 + 1;
    }
    let labels = pixel_root
        .iter()
        .map(|&s| if s == u32::MAX { 0 } else { rank[s as usize] })
        .collect();
    Components {
        labels,
        areas: order.iter().map(|&s| raw_areas[s]).collect(),
    }
}

/// Removes every component whose area is below `tau` times the largest
/// component's area.
pub fn postprocess(mask: &BinaryMask, tau: f64) -> BinaryMask {
    let cc = connected_components(mask);
    let Some(&largest) = cc.areas.first() else {
        return mask.clone();
    };
    let min_area = tau * largest as f64;
    let keep: Vec<bool> = cc.areas.iter().map(|&a| a as f64 >= min_area).collect();
    let data = cc
        .labels
        .iter()
        .map(|&l| (l != 0 && keep[l as usize - 1]) as u8)
        .collect();
    BinaryMask::new(mask.height(), mask.width(), data).expect("same dimensions as input")
}
