//! Static 2-D KD tree over `(lat, lon)` points with Euclidean distance in
//! degree space. The tree is stored implicitly: each slice's median sits at
//! its midpoint, with the left and right halves holding the subtrees.

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 2]>,
}

impl KdTree {
    pub fn build(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut points: Vec<[f64; 2]> = points.into_iter().map(|(a, b)| [a, b]).collect();
        arrange(&mut points, 0);
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from `(lat, lon)` to the closest point, or `None` when empty.
    pub fn nearest_distance(&self, lat: f64, lon: f64) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        search(&self.points, 0, [lat, lon], &mut best);
        Some(best.sqrt())
    }
}

fn arrange(pts: &mut [[f64; 2]], depth: usize) {
    if pts.len() <= 1 {
        return;
    }
    let axis = depth % 2;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (left, rest) = pts.split_at_mut(mid);
    arrange(left, depth + 1);
    arrange(&mut rest[1..], depth + 1);
}

fn search(pts: &[[f64; 2]], depth: usize, q: [f64; 2], best: &mut f64) {
    if pts.is_empty() {
        return;
    }
    let mid = pts.len() / 2;
    let p = pts[mid];
    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    if d2 < *best {
        *best = d2;
    }
    let axis = depth % 2;
    let diff = q[axis] - p[axis];
    let (near, far) = if diff < 0.0 {
        (&pts[..mid], &pts[mid + 1..])
    } else {
        (&pts[mid + 1..], &pts[..mid])
    };
    search(near, depth + 1, q, best);
    if diff * diff <= *best {
        search(far, depth + 1, q, best);
    }
}
