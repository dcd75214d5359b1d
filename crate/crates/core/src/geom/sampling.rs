use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kdtree::squared_distance;
use crate::error::{Error, Result};

/// The crate-wide seeded generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Farthest-point sampling starting from an index drawn uniformly with `seed`.
pub fn fps(coords: &[[f64; 3]], m: usize, seed: u64) -> Result<Vec<usize>> {
    if coords.is_empty() {
        return Err(Error::Empty("fps over an empty point set".into()));
    }
    let start = seeded_rng(seed).random_range(0..coords.len());
    fps_from(coords, m, start)
}

/// Farthest-point sampling from an explicit start index.
///
/// Each step picks the unselected point whose distance to the selected set is
/// largest; ties go to the lower index.
pub fn fps_from(coords: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "fps: cannot select {m} of {n} points"
        )));
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "fps: start {start} out of range for {n} points"
        )));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    for _ in 0..m {
        out.push(cur);
        selected[cur] = true;
        let c = coords[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in coords.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = squared_distance(3, p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(out)
}

/// Square XY window with the indices of the points inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub origin: [f64; 2],
    pub size: f64,
    pub stride: f64,
    pub members: Vec<usize>,
}

impl Block {
    pub fn center(&self) -> [f64; 2] {
        [
            self.origin[0] + self.size / 2.0,
            self.origin[1] + self.size / 2.0,
        ]
    }

    pub fn contains_xy(&self, p: &[f64]) -> bool {
        const TOL: f64 = 1e-9;
        (0..2).all(|a| p[a] >= self.origin[a] - TOL && p[a] <= self.origin[a] + self.size + TOL)
    }
}

/// Window origins along one axis: `min + i * stride` while the window fits,
/// then one window flushed against `max` if the tail is not yet covered.
pub fn axis_origins(min: f64, max: f64, size: f64, stride: f64) -> Vec<f64> {
    const TOL: f64 = 1e-9;
    if max - min <= size {
        return vec![min];
    }
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let o = min + i as f64 * stride;
        if o > max - size + TOL {
            break;
        }
        out.push(o);
        i += 1;
    }
    if let Some(&last) = out.last() {
        if last + size < max - TOL {
            out.push(max - size);
        }
    }
    out
}

/// Overlapping XY blocks over a cloud; empty blocks are dropped.
pub fn partition_blocks(coords: &[[f64; 3]], size: f64, stride: f64) -> Result<Vec<Block>> {
    if !(size > 0.0 && stride > 0.0 && stride <= size) {
        return Err(Error::invalid(format!(
            "block size {size} and stride {stride} need 0 < stride <= size"
        )));
    }
    if coords.is_empty() {
        return Err(Error::Empty("cannot partition an empty cloud".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let xs = axis_origins(lo[0], hi[0], size, stride);
    let ys = axis_origins(lo[1], hi[1], size, stride);
    let mut blocks = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let mut b = Block {
                origin: [x, y],
                size,
                stride,
                members: Vec::new(),
            };
            b.members = (0..coords.len())
                .filter(|&i| b.contains_xy(&coords[i]))
                .collect();
            if !b.members.is_empty() {
                blocks.push(b);
            }
        }
    }
    Ok(blocks)
}

/// Uniform sample of `n` members: without replacement when the block is large
/// enough, with replacement otherwise.
pub fn sample_block(members: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if members.is_empty() {
        return Err(Error::Empty("cannot sample an empty block".into()));
    }
    let mut rng = seeded_rng(seed);
    if members.len() >= n {
        let mut pool = members.to_vec();
        let (picked, _) = pool.partial_shuffle(&mut rng, n);
        Ok(picked.to_vec())
    } else {
        Ok((0..n)
            .map(|_| members[rng.random_range(0..members.len())])
            .collect())
    }
}

/// Splits a shuffled block into `ceil(len / n)` samples of exactly `n`
/// indices so every member appears in some sample; the last one is topped
/// up with random members.
pub fn cover_block(members: &[usize], n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if members.is_empty() {
        return Err(Error::Empty("cannot sample an empty block".into()));
    }
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let mut pool = members.to_vec();
    pool.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = pool.chunks(n).map(|c| c.to_vec()).collect();
    let last = out.last_mut().unwrap();
    while last.len() < n {
        last.push(members[rng.random_range(0..members.len())]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|x| [x as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_collinear_from_zero() {
        assert_eq!(fps_from(&line(8), 3, 0).unwrap(), vec![0, 7, 3]);
    }

    #[test]
    fn fps_all_points() {
        let mut got = fps(&line(8), 8, 3).unwrap();
        got.sort();
        assert_eq!(got, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_oversampling() {
        assert!(fps(&line(4), 5, 0).is_err());
    }

    #[test]
    fn fps_duplicates_never_repeat_indices() {
        let pts = vec![[0.0; 3]; 5];
        let mut got = fps_from(&pts, 5, 2).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn origins_follow_stride_rule() {
        assert_eq!(axis_origins(0.0, 100.0, 75.0, 25.0), vec![0.0, 25.0]);
        assert_eq!(axis_origins(0.0, 75.0, 75.0, 25.0), vec![0.0]);
        assert_eq!(axis_origins(0.0, 40.0, 75.0, 25.0), vec![0.0]);
        // tail flush: 0, 25 cover up to 100; 110 needs a final origin at 35.
        assert_eq!(axis_origins(0.0, 110.0, 75.0, 25.0), vec![0.0, 25.0, 35.0]);
    }

    #[test]
    fn small_extent_gives_one_block() {
        let pts = vec![[0.0, 0.0, 0.0], [10.0, 5.0, 1.0]];
        let blocks = partition_blocks(&pts, 75.0, 25.0).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].members, vec![0, 1]);
    }

    #[test]
    fn sample_exact_size_is_permutation() {
        let members: Vec<usize> = (10..20).collect();
        let mut s = sample_block(&members, 10, 1).unwrap();
        s.sort();
        assert_eq!(s, members);
    }

    #[test]
    fn sample_small_block_with_replacement() {
        let members: Vec<usize> = (0..10).collect();
        let s = sample_block(&members, 4096, 1).unwrap();
        assert_eq!(s.len(), 4096);
        assert!(s.iter().all(|i| *i < 10));
        assert_eq!(s, sample_block(&members, 4096, 1).unwrap());
    }

    #[test]
    fn cover_visits_every_member() {
        let members: Vec<usize> = (0..10).collect();
        let chunks = cover_block(&members, 4, 9).unwrap();
        assert_eq!(chunks.len(), 3);
        assert!(chunks.iter().all(|c| c.len() == 4));
        let mut seen: Vec<usize> = chunks.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, members);
    }
}
