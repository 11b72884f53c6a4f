//! 2-D triangle coverage with a top-left fill rule.
//!
//! Points are in raster coordinates: x right, y down, texel/pixel `(i, j)`
//! has its center at `(j + 0.5, i + 0.5)`. A sample exactly on an edge shared
//! by two triangles is owned by exactly one of them.

#[derive(Clone, Copy, Debug)]
pub struct Tri2 {
    v: [[f64; 2]; 3],
    area2: f64,
}

impl Tri2 {
    /// `None` for triangles with zero area.
    pub fn new(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<Self> {
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area2 == 0.0 || !area2.is_finite() {
            return None;
        }
        // Orient so that the signed area is positive.
        let v = if area2 > 0.0 { [a, b, c] } else { [a, c, b] };
        Some(Self {
            v,
            area2: area2.abs(),
        })
    }

    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = self.v[0];
        let mut hi = self.v[0];
        for p in &self.v[1..] {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Barycentric weights of `p` w.r.t. the vertices in the order given to
    /// [`Tri2::new`], or `None` if the fill rule excludes `p`.
    pub fn cover(&self, p: [f64; 2], original_order_flipped: bool) -> Option<[f64; 3]> {
        let mut w = [0.0; 3];
        for e in 0..3 {
            let a = self.v[(e + 1) % 3];
            let b = self.v[(e + 2) % 3];
            let d = [b[0] - a[0], b[1] - a[1]];
            let ev = d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0]);
            if ev < 0.0 {
                return None;
            }
            if ev == 0.0 && !top_left(d) {
                return None;
            }
            w[e] = ev / self.area2;
        }
        if original_order_flipped {
            w.swap(1, 2);
        }
        Some(w)
    }

    pub fn flipped(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) < 0.0
    }
}

fn top_left(d: [f64; 2]) -> bool {
    d[1] > 0.0 || (d[1] == 0.0 && d[0] < 0.0)
}

/// Covers samples of a triangle given in its original vertex order and
/// reports barycentrics in that order.
#[derive(Clone, Copy, Debug)]
pub struct Coverage {
    tri: Tri2,
    flipped: bool,
}

impl Coverage {
    pub fn new(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<Self> {
        Some(Self {
            tri: Tri2::new(a, b, c)?,
            flipped: Tri2::flipped(a, b, c),
        })
    }

    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        self.tri.bbox()
    }

    pub fn at(&self, p: [f64; 2]) -> Option<[f64; 3]> {
        self.tri.cover(p, self.flipped)
    }

    /// Inclusive row range of sample centers that can fall inside, clamped to `rows`.
    pub fn row_span(&self, rows: usize) -> Option<(usize, usize)> {
        let (lo, hi) = self.bbox();
        span(lo[1], hi[1], rows)
    }

    pub fn col_span(&self, cols: usize) -> Option<(usize, usize)> {
        let (lo, hi) = self.bbox();
        span(lo[0], hi[0], cols)
    }
}

fn span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    // centers k + 0.5 in [lo, hi]
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if n == 0 || first > last {
        None
    } else {
        Some((first as usize, last as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_edge_owned_once() {
        // Square split along its diagonal; sample centers lie on the diagonal.
        let a = [0.0, 0.0];
        let b = [4.0, 0.0];
        let c = [4.0, 4.0];
        let d = [0.0, 4.0];
        let t1 = Coverage::new(a, b, c).unwrap();
        let t2 = Coverage::new(a, c, d).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let p = [j as f64 + 0.5, i as f64 + 0.5];
                let n = t1.at(p).is_some() as u32 + t2.at(p).is_some() as u32;
                assert_eq!(n, 1, "sample {p:?}");
            }
        }
    }

    #[test]
    fn barycentrics_follow_input_order() {
        let cov = Coverage::new([0.0, 0.0], [0.0, 3.0], [3.0, 0.0]).unwrap();
        let w = cov.at([0.5, 0.5]).unwrap();
        let p = [
            w[0] * 0.0 + w[1] * 0.0 + w[2] * 3.0,
            w[0] * 0.0 + w[1] * 3.0 + w[2] * 0.0,
        ];
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }
}
