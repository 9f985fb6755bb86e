//! Exact rectangle-union arithmetic for screened slide areas.
//!
//! Experts screen a slide region by region, so the annotated area is a union
//! of axis-aligned rectangles. Everything downstream (seed eligibility,
//! sub-image tiling, patch containment) reduces to exact queries against
//! that union. All arithmetic is integer pixel arithmetic; there are no
//! tolerances anywhere in this module.

use serde::{Deserialize, Serialize};

use crate::model::Annotation;

/// Axis-aligned rectangle in pixel coordinates, origin top-left.
///
/// Covers the half-open pixel set `[x, x+w) x [y, y+h)`. Width and height
/// must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<[i64; 4]> for Rect {
    fn from(v: [i64; 4]) -> Self {
        Rect { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<Rect> for [i64; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    /// Point membership under the half-open convention.
    pub fn contains_point(&self, px: i64, py: i64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x0 < x1 && y0 < y1 {
            Some(Rect::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    /// The square patch of side `patch_size` centered on `(cx, cy)`.
    ///
    /// `patch_size` must be even so the center stays exact in integer
    /// arithmetic: origin = center - patch_size/2.
    pub fn centered_patch(cx: i64, cy: i64, patch_size: i64) -> Rect {
        let half = patch_size / 2;
        Rect::new(cx - half, cy - half, patch_size, patch_size)
    }
}

/// Subtract `cut` from `piece`, pushing the (up to four) residual rectangles.
fn subtract_into(piece: Rect, cut: &Rect, out: &mut Vec<Rect>) {
    let Some(overlap) = piece.intersection(cut) else {
        out.push(piece);
        return;
    };
    // Bands above and below the overlap span the full piece width; the side
    // bands are limited to the overlap's rows.
    if piece.y < overlap.y {
        out.push(Rect::new(piece.x, piece.y, piece.w, overlap.y - piece.y));
    }
    if overlap.bottom() < piece.bottom() {
        out.push(Rect::new(piece.x, overlap.bottom(), piece.w, piece.bottom() - overlap.bottom()));
    }
    if piece.x < overlap.x {
        out.push(Rect::new(piece.x, overlap.y, overlap.x - piece.x, overlap.h));
    }
    if overlap.right() < piece.right() {
        out.push(Rect::new(overlap.right(), overlap.y, piece.right() - overlap.right(), overlap.h));
    }
}

/// The screened region of one slide: a union of possibly overlapping
/// rectangles plus a cached disjoint decomposition.
///
/// Immutable after construction; all queries are pure and safe to run
/// concurrently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreenMap {
    slide_id: String,
    rects: Vec<Rect>,
    normalized: Vec<Rect>,
}

impl ScreenMap {
    pub fn new(slide_id: impl Into<String>, rects: Vec<Rect>) -> Self {
        let normalized = normalize(&rects);
        ScreenMap { slide_id: slide_id.into(), rects, normalized }
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    /// The rectangles as screened, possibly overlapping.
    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// Disjoint decomposition covering exactly the same point set as
    /// `rects()`, sorted row-major by (y, x).
    pub fn normalized(&self) -> &[Rect] {
        &self.normalized
    }

    /// Exact area of the union.
    pub fn area(&self) -> i64 {
        self.normalized.iter().map(Rect::area).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    /// True iff `(px, py)` lies inside the screened union.
    pub fn contains_point(&self, px: i64, py: i64) -> bool {
        self.rects.iter().any(|r| r.contains_point(px, py))
    }

    /// True iff every pixel of `query` lies inside the screened union.
    ///
    /// Works by subtracting the disjoint pieces from the query; coverage
    /// holds exactly when nothing remains.
    pub fn covers(&self, query: &Rect) -> bool {
        debug_assert!(query.w > 0 && query.h > 0);
        let mut remaining = vec![*query];
        let mut next = Vec::new();
        for r in &self.normalized {
            next.clear();
            for piece in remaining.drain(..) {
                subtract_into(piece, r, &mut next);
            }
            std::mem::swap(&mut remaining, &mut next);
            if remaining.is_empty() {
                return true;
            }
        }
        remaining.is_empty()
    }

    /// Non-overlapping grid of `patch_size` x `patch_size` tiles, anchored at
    /// the top-left of each rectangle of the disjoint decomposition. Only
    /// fully covered tiles are kept; order is row-major by (y, x).
    pub fn tile_sub_images(&self, patch_size: i64) -> Vec<Rect> {
        assert!(patch_size > 0, "patch_size must be positive");
        let mut tiles = Vec::new();
        for r in &self.normalized {
            for j in 0..(r.h / patch_size) {
                for i in 0..(r.w / patch_size) {
                    let tile =
                        Rect::new(r.x + i * patch_size, r.y + j * patch_size, patch_size, patch_size);
                    if self.covers(&tile) {
                        tiles.push(tile);
                    }
                }
            }
        }
        tiles.sort_by_key(|t| (t.y, t.x));
        tiles
    }
}

/// Decompose a rectangle union into disjoint rectangles.
///
/// Vertical sweep: at every distinct x edge the covered y-intervals are
/// merged, and adjacent strips with identical interval sets are coalesced.
/// The output covers exactly the union's point set, sorted by (y, x).
fn normalize(rects: &[Rect]) -> Vec<Rect> {
    let mut xs: Vec<i64> = rects.iter().flat_map(|r| [r.x, r.right()]).collect();
    xs.sort_unstable();
    xs.dedup();

    // (x0, x1, merged y-intervals) per strip, coalescing equal neighbors.
    let mut strips: Vec<(i64, i64, Vec<(i64, i64)>)> = Vec::new();
    for win in xs.windows(2) {
        let (x0, x1) = (win[0], win[1]);
        let mut intervals: Vec<(i64, i64)> = rects
            .iter()
            .filter(|r| r.x <= x0 && r.right() >= x1)
            .map(|r| (r.y, r.bottom()))
            .collect();
        if intervals.is_empty() {
            continue;
        }
        intervals.sort_unstable();
        let mut merged: Vec<(i64, i64)> = Vec::with_capacity(intervals.len());
        for (y0, y1) in intervals {
            match merged.last_mut() {
                Some(last) if y0 <= last.1 => last.1 = last.1.max(y1),
                _ => merged.push((y0, y1)),
            }
        }
        match strips.last_mut() {
            Some(last) if last.1 == x0 && last.2 == merged => last.1 = x1,
            _ => strips.push((x0, x1, merged)),
        }
    }

    let mut out: Vec<Rect> = strips
        .into_iter()
        .flat_map(|(x0, x1, intervals)| {
            intervals.into_iter().map(move |(y0, y1)| Rect::new(x0, y0, x1 - x0, y1 - y0))
        })
        .collect();
    out.sort_by_key(|r| (r.y, r.x));
    out
}

/// Annotations whose full centered patch fits inside the screened union,
/// order preserved.
///
/// A cell is an eligible seed when it keeps at least half the patch size of
/// distance to the border of the annotated region, i.e. the whole patch
/// rectangle centered on it is covered.
pub fn eligible_seeds<'a>(
    map: &ScreenMap,
    annotations: &'a [Annotation],
    patch_size: i64,
) -> Vec<&'a Annotation> {
    assert!(patch_size > 0 && patch_size % 2 == 0, "patch_size must be even and positive");
    annotations
        .iter()
        .filter(|a| map.covers(&Rect::centered_patch(a.cx, a.cy, patch_size)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CellClass;
    use proptest::prelude::*;

    fn ann(id: u64, cx: i64, cy: i64) -> Annotation {
        Annotation {
            id,
            cx,
            cy,
            radius: 10,
            class: CellClass(0),
            annotator: String::new(),
        }
    }

    /// Brute-force oracle: rasterize the union on a small grid and test
    /// containment pixel by pixel.
    struct MaskOracle {
        w: i64,
        h: i64,
        mask: Vec<bool>,
    }

    impl MaskOracle {
        fn new(w: i64, h: i64, rects: &[Rect]) -> Self {
            let mut mask = vec![false; (w * h) as usize];
            for r in rects {
                for y in r.y.max(0)..r.bottom().min(h) {
                    for x in r.x.max(0)..r.right().min(w) {
                        mask[(y * w + x) as usize] = true;
                    }
                }
            }
            MaskOracle { w, h, mask }
        }

        fn covers(&self, q: &Rect) -> bool {
            if q.x < 0 || q.y < 0 || q.right() > self.w || q.bottom() > self.h {
                return false;
            }
            for y in q.y..q.bottom() {
                for x in q.x..q.right() {
                    if !self.mask[(y * self.w + x) as usize] {
                        return false;
                    }
                }
            }
            true
        }
    }

    /// Inclusion-exclusion area over all non-empty rect subsets.
    fn inclusion_exclusion_area(rects: &[Rect]) -> i64 {
        assert!(rects.len() <= 16);
        let mut total: i64 = 0;
        for subset in 1u32..(1 << rects.len()) {
            let mut common: Option<Rect> = None;
            for (i, r) in rects.iter().enumerate() {
                if subset & (1 << i) != 0 {
                    common = match common {
                        None => Some(*r),
                        Some(c) => match c.intersection(r) {
                            Some(i) => Some(i),
                            None => {
                                common = None;
                                break;
                            }
                        },
                    };
                }
            }
            if let Some(c) = common {
                let sign = if subset.count_ones() % 2 == 1 { 1 } else { -1 };
                total += sign * c.area();
            }
        }
        total
    }

    #[test]
    fn covers_containment_by_inspection() {
        let map = ScreenMap::new("s", vec![Rect::new(0, 0, 2048, 2048)]);
        assert!(map.covers(&Rect::new(512, 512, 1024, 1024)));
    }

    #[test]
    fn covers_rejects_overhang() {
        let map = ScreenMap::new("s", vec![Rect::new(0, 0, 2048, 2048)]);
        assert!(!map.covers(&Rect::new(1536, 0, 1024, 1024)));
    }

    #[test]
    fn covers_spans_seam_between_adjacent_rects() {
        let map = ScreenMap::new("s", vec![Rect::new(0, 0, 100, 100), Rect::new(100, 0, 100, 100)]);
        let query = Rect::new(50, 0, 100, 100);
        assert!(map.covers(&query));
        let oracle = MaskOracle::new(200, 100, map.rects());
        assert!(oracle.covers(&query));
    }

    #[test]
    fn eligible_seed_boundary_cases() {
        let map = ScreenMap::new("s", vec![Rect::new(0, 0, 2048, 2048)]);
        let anns = vec![ann(1, 512, 512), ann(2, 511, 512)];
        let eligible = eligible_seeds(&map, &anns, 1024);
        // Patch for cell 1 is exactly [0,0,1024,1024]; cell 2's would start at x=-1.
        assert_eq!(eligible.iter().map(|a| a.id).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn eligible_seeds_match_mask_oracle_on_l_shape() {
        let rects = vec![Rect::new(0, 0, 300, 120), Rect::new(0, 0, 120, 300)];
        let map = ScreenMap::new("s", rects.clone());
        let oracle = MaskOracle::new(512, 512, &rects);
        let mut rng = crate::rng::keyed_rng(11, &[1]);
        use rand::Rng;
        let anns: Vec<Annotation> =
            (0..50).map(|i| ann(i, rng.random_range(0..320), rng.random_range(0..320))).collect();
        let patch = 64;
        let got: Vec<u64> = eligible_seeds(&map, &anns, patch).iter().map(|a| a.id).collect();
        let want: Vec<u64> = anns
            .iter()
            .filter(|a| oracle.covers(&Rect::centered_patch(a.cx, a.cy, patch)))
            .map(|a| a.id)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn tiling_exact_division() {
        let map = ScreenMap::new("s", vec![Rect::new(0, 0, 4096, 2048)]);
        let tiles = map.tile_sub_images(1024);
        assert_eq!(tiles.len(), 8);
        assert_eq!(tiles[0], Rect::new(0, 0, 1024, 1024));
        assert_eq!(tiles[7], Rect::new(3072, 1024, 1024, 1024));
    }

    #[test]
    fn tiling_region_smaller_than_patch_is_empty() {
        let map = ScreenMap::new("s", vec![Rect::new(0, 0, 1000, 1000)]);
        assert!(map.tile_sub_images(1024).is_empty());
    }

    fn small_rects() -> impl Strategy<Value = Vec<Rect>> {
        prop::collection::vec(
            (0i64..400, 0i64..400, 1i64..120, 1i64..120).prop_map(|(x, y, w, h)| {
                Rect::new(x.min(380), y.min(380), w.min(512 - x.min(380)), h.min(512 - y.min(380)))
            }),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn covers_equals_mask_oracle(rects in small_rects(),
                                     qx in 0i64..480, qy in 0i64..480,
                                     qw in 1i64..64, qh in 1i64..64) {
            let map = ScreenMap::new("s", rects.clone());
            let oracle = MaskOracle::new(512, 512, &rects);
            let q = Rect::new(qx, qy, qw, qh);
            prop_assert_eq!(map.covers(&q), oracle.covers(&q));
        }

        #[test]
        fn normalized_area_matches_inclusion_exclusion(rects in small_rects()) {
            let map = ScreenMap::new("s", rects.clone());
            prop_assert_eq!(map.area(), inclusion_exclusion_area(&rects));
        }

        #[test]
        fn normalized_pieces_are_disjoint(rects in small_rects()) {
            let map = ScreenMap::new("s", rects);
            let pieces = map.normalized();
            for i in 0..pieces.len() {
                for j in (i + 1)..pieces.len() {
                    prop_assert!(!pieces[i].intersects(&pieces[j]));
                }
            }
        }

        #[test]
        fn tiles_disjoint_and_covered(rects in small_rects()) {
            let map = ScreenMap::new("s", rects);
            let tiles = map.tile_sub_images(48);
            for t in &tiles {
                prop_assert!(map.covers(t));
            }
            for i in 0..tiles.len() {
                for j in (i + 1)..tiles.len() {
                    prop_assert!(!tiles[i].intersects(&tiles[j]));
                }
            }
            // Idempotent for a fixed map.
            prop_assert_eq!(map.tile_sub_images(48), tiles);
        }

        #[test]
        fn eligibility_is_monotone_in_map_growth(rects in small_rects(),
                                                 extra_x in 0i64..400, extra_y in 0i64..400) {
            let anns: Vec<Annotation> =
                (0..30).map(|i| ann(i, (i as i64 * 17) % 400, (i as i64 * 29) % 400)).collect();
            let before = ScreenMap::new("s", rects.clone());
            let mut grown = rects;
            grown.push(Rect::new(extra_x, extra_y, 80, 80));
            let after = ScreenMap::new("s", grown);
            let patch = 32;
            let eligible_before: Vec<u64> =
                eligible_seeds(&before, &anns, patch).iter().map(|a| a.id).collect();
            let eligible_after: Vec<u64> =
                eligible_seeds(&after, &anns, patch).iter().map(|a| a.id).collect();
            for id in eligible_before {
                prop_assert!(eligible_after.contains(&id));
            }
        }
    }
}
