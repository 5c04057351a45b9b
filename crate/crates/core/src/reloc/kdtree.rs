/// Static kd-tree over fixed-length `f32` descriptors with exact
/// nearest-neighbour queries.
#[derive(Debug, Clone, Default)]
pub struct KdTree<const D: usize> {
    points: Vec<[f32; D]>,
    /// Implicit balanced tree over a permutation of point indices.
    order: Vec<u32>,
    split_dim: Vec<u8>,
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f32; D]>) -> Self {
        let n = points.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut split_dim = vec![0u8; n];
        Self::build_rec(&points, &mut order, &mut split_dim);
        Self {
            points,
            order,
            split_dim,
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn build_rec(points: &[[f32; D]], idx: &mut [u32], dims: &mut [u8]) {
        if idx.len() <= 1 {
            if let Some(d) = dims.first_mut() {
                *d = 0;
            }
            return;
        }
        // Split on the axis of largest spread.
        let mut best = (0usize, -1.0f32);
        for d in 0..D {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &i in idx.iter() {
                let v = points[i as usize][d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let dim = best.0;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |a, b| {
            points[*a as usize][dim]
                .total_cmp(&points[*b as usize][dim])
                .then(a.cmp(b))
        });
        dims[mid] = dim as u8;
        let (left, rest) = idx.split_at_mut(mid);
        let (ldims, rdims) = dims.split_at_mut(mid);
        Self::build_rec(points, left, ldims);
        Self::build_rec(points, &mut rest[1..], &mut rdims[1..]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32; D] {
        &self.points[i]
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, q: &[f32; D]) -> Option<(usize, f32)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f32::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: &[f32; D], lo: usize, hi: usize, best: &mut (usize, f32)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let pi = self.order[mid] as usize;
        let p = &self.points[pi];
        let d2: f32 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 || (d2 == best.1 && pi < best.0) {
            *best = (pi, d2);
        }
        if hi - lo == 1 {
            return;
        }
        let dim = self.split_dim[mid] as usize;
        let diff = q[dim] - p[dim];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}
