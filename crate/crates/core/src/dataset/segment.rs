use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::GrayImage;

/// Chebyshev (chessboard) distance between two pixel coordinates `(x, y)`.
pub fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    /// Neighbouring nonzero pixels join a segment when their intensity
    /// difference is strictly below this value. 256 never binds.
    pub threshold: u16,
    /// Segments smaller than this are merged into a touching segment.
    pub min_size: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            threshold: 64,
            min_size: 1,
        }
    }
}

/// Per-pixel segment ids: 0 is background, segments are `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    /// `sizes[id - 1]` is the pixel count of segment `id`.
    sizes: Vec<usize>,
}

impl SegmentMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn segment_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size_of(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }
}

/// Indices of the up to eight Chebyshev-distance-1 neighbours of `idx`.
fn neighbours(idx: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((idx % width) as isize, (idx / width) as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx != 0 || dy != 0)
        .filter_map(move |(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height)
                .then(|| ny as usize * width + nx as usize)
        })
}

/// Region-growing segmentation over the nonzero pixels of `img`.
///
/// Seeds are taken in scan order and grown breadth-first: an 8-neighbour
/// joins when it is nonzero and its intensity differs from the current pixel
/// by less than `params.threshold`. Afterwards every segment smaller than
/// `params.min_size` that touches another segment is merged into the
/// neighbour sharing the most adjacent pixel pairs (ties go to the smaller
/// id), smallest segments first. Isolated small components stay as they are,
/// since merging them would break 8-connectivity. Ids are then renumbered
/// densely in scan order.
pub fn segment(img: &GrayImage, params: SegmentParams) -> SegmentMap {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let tau = params.threshold as i32;
    let mut ids = vec![0u32; w * h];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if px[start] == 0 || ids[start] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len() as u32;
        ids[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            sizes[id as usize - 1] += 1;
            let ip = px[p] as i32;
            for q in neighbours(p, w, h) {
                if ids[q] == 0 && px[q] > 0 && (ip - px[q] as i32).abs() < tau {
                    ids[q] = id;
                    queue.push_back(q);
                }
            }
        }
    }

    merge_small(&mut ids, &mut sizes, w, h, params.min_size.max(1));
    renumber(ids, sizes, w, h)
}

fn merge_small(ids: &mut [u32], sizes: &mut [usize], w: usize, h: usize, min_size: usize) {
    loop {
        // adjacency counts between distinct segments, each pixel pair once
        let mut shared: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for p in 0..w * h {
            let a = ids[p];
            if a == 0 {
                continue;
            }
            for q in neighbours(p, w, h).filter(|&q| q > p) {
                let b = ids[q];
                if b != 0 && b != a {
                    *shared.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
        }

        let mut neighbours_of: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
        for (&(a, b), &n) in &shared {
            neighbours_of.entry(a).or_default().push((b, n));
            neighbours_of.entry(b).or_default().push((a, n));
        }

        let candidate = neighbours_of
            .keys()
            .copied()
            .filter(|&id| sizes[id as usize - 1] < min_size)
            .min_by_key(|&id| (sizes[id as usize - 1], id));
        let Some(small) = candidate else { return };

        let target = neighbours_of[&small]
            .iter()
            .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|&(id, _)| id)
            .expect("candidate has neighbours");

        for id in ids.iter_mut().filter(|id| **id == small) {
            *id = target;
        }
        sizes[target as usize - 1] += sizes[small as usize - 1];
        sizes[small as usize - 1] = 0;
    }
}

fn renumber(mut ids: Vec<u32>, old_sizes: Vec<usize>, w: usize, h: usize) -> SegmentMap {
    let mut remap = vec![0u32; old_sizes.len() + 1];
    let mut sizes = Vec::new();
    for id in ids.iter_mut() {
        if *id == 0 {
            continue;
        }
        let old = *id as usize;
        if remap[old] == 0 {
            sizes.push(old_sizes[old - 1]);
            remap[old] = sizes.len() as u32;
        }
        *id = remap[old];
    }
    SegmentMap {
        width: w,
        height: h,
        ids,
        sizes,
    }
}
