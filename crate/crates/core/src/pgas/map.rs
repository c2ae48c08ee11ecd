use super::{PgasError, Result};
use crate::fabric::RankId;

/// Half-open range `[start, start + len)` of global indices along one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub start: usize,
    pub len: usize,
}

impl Extent {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Block distribution of a 1-D or 2-D array over a grid of ranks.
///
/// Along a dimension of extent `n` split over `g` ranks, the first `n % g`
/// ranks own `ceil(n / g)` elements and the rest own `floor(n / g)`.
/// Ranks are laid out over the grid in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistMap {
    global_shape: Vec<usize>,
    grid: Vec<usize>,
}

impl DistMap {
    pub fn new(global_shape: &[usize], grid: &[usize], nranks: u32) -> Result<Self> {
        if global_shape.is_empty() || global_shape.len() > 2 {
            return Err(PgasError::Argument(format!(
                "only 1-D and 2-D arrays are supported, got {} dims",
                global_shape.len()
            )));
        }
        if grid.len() != global_shape.len() {
            return Err(PgasError::Argument(format!(
                "grid has {} dims but shape has {}",
                grid.len(),
                global_shape.len()
            )));
        }
        if let Some(d) = global_shape.iter().position(|&n| n == 0) {
            return Err(PgasError::Argument(format!("zero extent in dim {d}")));
        }
        if let Some(d) = grid.iter().position(|&g| g == 0) {
            return Err(PgasError::Argument(format!("zero grid size in dim {d}")));
        }
        let product: usize = grid.iter().product();
        if product != nranks as usize {
            return Err(PgasError::Argument(format!(
                "grid {grid:?} covers {product} ranks, job has {nranks}"
            )));
        }
        Ok(DistMap {
            global_shape: global_shape.to_vec(),
            grid: grid.to_vec(),
        })
    }

    /// 1-D map of `len` elements over `nranks` ranks.
    pub fn vector(len: usize, nranks: u32) -> Result<Self> {
        Self::new(&[len], &[nranks as usize], nranks)
    }

    pub fn global_shape(&self) -> &[usize] {
        &self.global_shape
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn ndim(&self) -> usize {
        self.global_shape.len()
    }

    pub fn nranks(&self) -> u32 {
        self.grid.iter().product::<usize>() as u32
    }

    pub fn global_len(&self) -> usize {
        self.global_shape.iter().product()
    }

    /// Position of `rank` in the process grid.
    pub fn grid_coords(&self, rank: RankId) -> Result<Vec<usize>> {
        self.check_rank(rank)?;
        let mut rest = rank.index();
        let mut coords = vec![0; self.ndim()];
        for d in (0..self.ndim()).rev() {
            coords[d] = rest % self.grid[d];
            rest /= self.grid[d];
        }
        Ok(coords)
    }

    pub fn rank_at(&self, coords: &[usize]) -> Result<RankId> {
        if coords.len() != self.ndim() || coords.iter().zip(&self.grid).any(|(&c, &g)| c >= g) {
            return Err(PgasError::Argument(format!(
                "grid coordinates {coords:?} outside grid {:?}",
                self.grid
            )));
        }
        let linear = coords.iter().zip(&self.grid).fold(0, |acc, (&c, &g)| acc * g + c);
        Ok(RankId(linear as u32))
    }

    /// Global index ranges owned by `rank`, one per dimension.
    pub fn local_extent(&self, rank: RankId) -> Result<Vec<Extent>> {
        let coords = self.grid_coords(rank)?;
        Ok(coords
            .iter()
            .enumerate()
            .map(|(d, &c)| block_extent(self.global_shape[d], self.grid[d], c))
            .collect())
    }

    pub fn local_shape(&self, rank: RankId) -> Result<Vec<usize>> {
        Ok(self.local_extent(rank)?.iter().map(|e| e.len).collect())
    }

    pub fn local_len(&self, rank: RankId) -> Result<usize> {
        Ok(self.local_shape(rank)?.iter().product())
    }

    /// Owner and local position of a global index.
    pub fn global_to_local(&self, global: &[usize]) -> Result<(RankId, Vec<usize>)> {
        if global.len() != self.ndim()
            || global.iter().zip(&self.global_shape).any(|(&i, &n)| i >= n)
        {
            return Err(PgasError::Argument(format!(
                "global index {global:?} outside shape {:?}",
                self.global_shape
            )));
        }
        let mut coords = Vec::with_capacity(self.ndim());
        let mut local = Vec::with_capacity(self.ndim());
        for d in 0..self.ndim() {
            let (owner, offset) = block_owner(self.global_shape[d], self.grid[d], global[d]);
            coords.push(owner);
            local.push(offset);
        }
        Ok((self.rank_at(&coords)?, local))
    }

    pub fn local_to_global(&self, rank: RankId, local: &[usize]) -> Result<Vec<usize>> {
        let extent = self.local_extent(rank)?;
        if local.len() != self.ndim() || local.iter().zip(&extent).any(|(&i, e)| i >= e.len) {
            return Err(PgasError::Argument(format!(
                "local index {local:?} outside rank {rank}'s block {extent:?}"
            )));
        }
        Ok(local.iter().zip(&extent).map(|(&i, e)| e.start + i).collect())
    }

    fn check_rank(&self, rank: RankId) -> Result<()> {
        if rank.get() >= self.nranks() {
            return Err(PgasError::Argument(format!(
                "rank {rank} out of range for {} ranks",
                self.nranks()
            )));
        }
        Ok(())
    }
}

/// Extent owned by grid position `i` when `n` elements are split over `g` parts.
pub fn block_extent(n: usize, g: usize, i: usize) -> Extent {
    let (q, r) = (n / g, n % g);
    Extent {
        start: i * q + i.min(r),
        len: q + usize::from(i < r),
    }
}

fn block_owner(n: usize, g: usize, x: usize) -> (usize, usize) {
    let (q, r) = (n / g, n % g);
    let big = r * (q + 1);
    if x < big {
        (x / (q + 1), x % (q + 1))
    } else {
        // x < n implies q > 0 here
        let owner = r + (x - big) / q;
        (owner, (x - big) % q)
    }
}
