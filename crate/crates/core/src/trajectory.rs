//! Dense per-path storage for process blocks on the extended grid.
//!
//! A [`Trajectory`] holds one named process block (state, backward triple
//! component, adjoint component, control) for every simulated path at every
//! grid index of its declared time range. Ranges are signed so the same type
//! covers the initial extension `[-delta, 0)` of forward processes and the
//! terminal extension `(T, T + delta]` of backward ones; extension values are
//! stored explicitly, which keeps delayed and anticipated reads branch-free.

/// Values of one vector-valued process for all paths on an index range.
///
/// Storage is path-major: all times of path 0, then path 1, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    m_paths: usize,
    dim: usize,
    lo: isize,
    hi: isize,
    data: Vec<f64>,
}

impl Trajectory {
    /// Allocates a zero-filled block for `m_paths` paths of dimension `dim`
    /// on the inclusive index range `[lo, hi]`.
    pub fn zeros(m_paths: usize, dim: usize, lo: isize, hi: isize) -> Self {
        assert!(hi >= lo, "empty time range [{lo}, {hi}]");
        assert!(dim > 0 && m_paths > 0, "degenerate trajectory shape");
        let n_t = (hi - lo + 1) as usize;
        Trajectory {
            m_paths,
            dim,
            lo,
            hi,
            data: vec![0.0; m_paths * n_t * dim],
        }
    }

    pub fn m_paths(&self) -> usize {
        self.m_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// First stored time index.
    pub fn lo(&self) -> isize {
        self.lo
    }

    /// Last stored time index, inclusive.
    pub fn hi(&self) -> isize {
        self.hi
    }

    fn n_times(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    #[inline]
    fn offset(&self, path: usize, idx: isize) -> usize {
        debug_assert!(path < self.m_paths, "path {path} out of range");
        debug_assert!(
            idx >= self.lo && idx <= self.hi,
            "time index {idx} outside stored range [{}, {}]",
            self.lo,
            self.hi
        );
        (path * self.n_times() + (idx - self.lo) as usize) * self.dim
    }

    /// Value of the block at one path and time index.
    #[inline]
    pub fn at(&self, path: usize, idx: isize) -> &[f64] {
        let o = self.offset(path, idx);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, idx: isize) -> &mut [f64] {
        let o = self.offset(path, idx);
        let dim = self.dim;
        &mut self.data[o..o + dim]
    }

    #[inline]
    pub fn set(&mut self, path: usize, idx: isize, values: &[f64]) {
        self.at_mut(path, idx).copy_from_slice(values);
    }

    /// Single component at one path and time index.
    #[inline]
    pub fn component(&self, path: usize, idx: isize, c: usize) -> f64 {
        self.at(path, idx)[c]
    }

    /// Copy of the rows of `count` consecutive paths starting at `start`,
    /// on the same time range. Pairs with block-wise resampling of the
    /// driving paths.
    pub fn sub_paths(&self, start: usize, count: usize) -> Trajectory {
        assert!(
            start + count <= self.m_paths && count > 0,
            "path block [{start}, {}) outside 0..{}",
            start + count,
            self.m_paths
        );
        let row = self.n_times() * self.dim;
        Trajectory {
            m_paths: count,
            dim: self.dim,
            lo: self.lo,
            hi: self.hi,
            data: self.data[start * row..(start + count) * row].to_vec(),
        }
    }

    /// Copy with `count` consecutive paths starting at `start` removed,
    /// on the same time range. Complement of [`Trajectory::sub_paths`];
    /// pairs with delete-one-block jackknife resampling.
    pub fn without_paths(&self, start: usize, count: usize) -> Trajectory {
        assert!(
            start + count <= self.m_paths && count > 0 && count < self.m_paths,
            "deleted path block [{start}, {}) must be a proper subrange of 0..{}",
            start + count,
            self.m_paths
        );
        let row = self.n_times() * self.dim;
        let mut data = Vec::with_capacity((self.m_paths - count) * row);
        data.extend_from_slice(&self.data[..start * row]);
        data.extend_from_slice(&self.data[(start + count) * row..]);
        Trajectory {
            m_paths: self.m_paths - count,
            dim: self.dim,
            lo: self.lo,
            hi: self.hi,
            data,
        }
    }

    /// Scalar value; the block must be one-dimensional.
    #[inline]
    pub fn scalar(&self, path: usize, idx: isize) -> f64 {
        debug_assert_eq!(self.dim, 1, "scalar read from a {}-dim block", self.dim);
        self.data[self.offset(path, idx)]
    }

    #[inline]
    pub fn set_scalar(&mut self, path: usize, idx: isize, value: f64) {
        debug_assert_eq!(self.dim, 1);
        let o = self.offset(path, idx);
        self.data[o] = value;
    }

    /// Copies one component across all paths at a fixed time into `out`.
    pub fn column(&self, idx: isize, c: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.m_paths);
        for p in 0..self.m_paths {
            out.push(self.component(p, idx, c));
        }
    }

    /// Sample mean of the block at a fixed time.
    pub fn mean_at(&self, idx: isize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for p in 0..self.m_paths {
            let v = self.at(p, idx);
            for c in 0..self.dim {
                acc[c] += v[c];
            }
        }
        for a in &mut acc {
            *a /= self.m_paths as f64;
        }
        acc
    }

    /// True when every stored value is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite entry as `(path, time index)`, if any.
    pub fn first_non_finite(&self) -> Option<(usize, isize)> {
        for p in 0..self.m_paths {
            for i in self.lo..=self.hi {
                if self.at(p, i).iter().any(|v| !v.is_finite()) {
                    return Some((p, i));
                }
            }
        }
        None
    }
}

/// Discrete `L^2` distance between two blocks over `[lo, hi]`:
/// `sqrt( mean over paths of h * sum_j |a_j - b_j|^2 )`.
pub fn l2_distance(a: &Trajectory, b: &Trajectory, lo: isize, hi: isize, h: f64) -> f64 {
    assert_eq!(a.m_paths(), b.m_paths(), "path count mismatch");
    assert_eq!(a.dim(), b.dim(), "dimension mismatch");
    let mut acc = 0.0;
    for p in 0..a.m_paths() {
        for j in lo..=hi {
            let (va, vb) = (a.at(p, j), b.at(p, j));
            for c in 0..a.dim() {
                let d = va[c] - vb[c];
                acc += d * d;
            }
        }
    }
    (acc * h / a.m_paths() as f64).sqrt()
}

/// Discrete `L^2` size of one block over `[lo, hi]` with step `h`.
pub fn l2_norm(a: &Trajectory, lo: isize, hi: isize, h: f64) -> f64 {
    let mut acc = 0.0;
    for p in 0..a.m_paths() {
        for j in lo..=hi {
            for v in a.at(p, j) {
                acc += v * v;
            }
        }
    }
    (acc * h / a.m_paths() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extended_range_reads_and_writes_line_up() {
        let mut x = Trajectory::zeros(3, 2, -2, 5);
        x.set(1, -2, &[1.0, 2.0]);
        x.set(1, 5, &[3.0, 4.0]);
        assert_eq!(x.at(1, -2), &[1.0, 2.0]);
        assert_eq!(x.at(1, 5), &[3.0, 4.0]);
        assert_eq!(x.at(0, -2), &[0.0, 0.0]);
        assert_eq!(x.at(2, 5), &[0.0, 0.0]);
    }

    #[test]
    fn mean_and_column_agree() {
        let mut x = Trajectory::zeros(4, 1, 0, 3);
        for p in 0..4 {
            x.set_scalar(p, 2, p as f64);
        }
        assert_eq!(x.mean_at(2), vec![1.5]);
        let mut col = Vec::new();
        x.column(2, 0, &mut col);
        assert_eq!(col, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn l2_distance_of_identical_blocks_is_zero() {
        let mut a = Trajectory::zeros(2, 1, 0, 4);
        for p in 0..2 {
            for j in 0..=4 {
                a.set_scalar(p, j, (p + 1) as f64 * j as f64);
            }
        }
        assert_eq!(l2_distance(&a, &a.clone(), 0, 4, 0.25), 0.0);
        assert!(l2_norm(&a, 0, 4, 0.25) > 0.0);
    }
}
