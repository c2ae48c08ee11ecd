use super::{DistMap, Element, Extent, PgasError, Result, TypedArrayPayload};
use crate::fabric::{FabricContext, PayloadType, RankId, INTERNAL_TAG_BASE};

/// Wire tag of the block messages sent by rank 0 in `scatter_from_zero`.
pub const SCATTER_TAG: u32 = INTERNAL_TAG_BASE + 1;
/// Wire tag of the block messages each rank sends to rank 0 in `agg`.
pub const AGG_TAG: u32 = INTERNAL_TAG_BASE + 2;

/// One rank's block of a globally shaped array.
#[derive(Debug, Clone, PartialEq)]
pub struct DistArray<T> {
    map: DistMap,
    rank: RankId,
    local: Vec<T>,
}

impl<T: Element> DistArray<T> {
    /// Wraps a locally computed block. `local` is row-major over the rank's extent.
    pub fn from_local(map: DistMap, rank: RankId, local: Vec<T>) -> Result<Self> {
        let want = map.local_len(rank)?;
        if local.len() != want {
            return Err(PgasError::Argument(format!(
                "rank {rank} block needs {want} values, got {}",
                local.len()
            )));
        }
        Ok(DistArray { map, rank, local })
    }

    /// Block for `rank` with every element set to `value`.
    pub fn filled(map: DistMap, rank: RankId, value: T) -> Result<Self> {
        let n = map.local_len(rank)?;
        Self::from_local(map, rank, vec![value; n])
    }

    pub fn map(&self) -> &DistMap {
        &self.map
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn local_block(&self) -> &[T] {
        &self.local
    }

    pub fn local_block_mut(&mut self) -> &mut [T] {
        &mut self.local
    }

    pub fn local_extent(&self) -> Vec<Extent> {
        self.map.local_extent(self.rank).expect("rank validated at construction")
    }

    pub fn local_shape(&self) -> Vec<usize> {
        self.local_extent().iter().map(|e| e.len).collect()
    }

    pub fn into_local(self) -> Vec<T> {
        self.local
    }

    /// Distributes rank 0's row-major `global` values; every rank gets its block.
    /// Non-root ranks pass `None`.
    pub fn scatter_from_zero(
        ctx: &mut FabricContext,
        map: &DistMap,
        global: Option<&[T]>,
    ) -> Result<Self> {
        check_job(ctx, map)?;
        let me = ctx.my_rank();
        if me.is_root() {
            let global = global.ok_or_else(|| {
                PgasError::Argument("rank 0 must supply the global values".into())
            })?;
            if global.len() != map.global_len() {
                return Err(PgasError::Argument(format!(
                    "shape {:?} holds {} values, got {}",
                    map.global_shape(),
                    map.global_len(),
                    global.len()
                )));
            }
            for r in 1..ctx.nranks() {
                let rank = RankId(r);
                let extent = map.local_extent(rank)?;
                let block = copy_block(global, map.global_shape(), &extent);
                let shape: Vec<usize> = extent.iter().map(|e| e.len).collect();
                let payload = TypedArrayPayload::from_values(&shape, &block)?;
                ctx.send_tagged(rank, SCATTER_TAG, PayloadType::TypedArray, &payload.encode())?;
            }
            let own = copy_block(global, map.global_shape(), &map.local_extent(me)?);
            Self::from_local(map.clone(), me, own)
        } else {
            let deadline = ctx.deadline_for_collective();
            let msg = ctx.recv_until(RankId::ROOT, SCATTER_TAG, deadline, &|_| Ok(()))?;
            let block = decode_block::<T>(&msg.payload, &map.local_shape(me)?)?;
            Self::from_local(map.clone(), me, block)
        }
    }

    /// Reassembles the full row-major array at rank 0. Other ranks get `None`.
    pub fn agg(&self, ctx: &mut FabricContext) -> Result<Option<Vec<T>>> {
        check_job(ctx, &self.map)?;
        if ctx.my_rank() != self.rank {
            return Err(PgasError::Argument(format!(
                "array belongs to rank {}, context is rank {}",
                self.rank,
                ctx.my_rank()
            )));
        }
        let payload = TypedArrayPayload::from_values(&self.local_shape(), &self.local)?;
        let Some(blocks) = ctx.gather_typed(AGG_TAG, PayloadType::TypedArray, &payload.encode())?
        else {
            return Ok(None);
        };
        let shape = self.map.global_shape();
        let mut global = vec![T::default(); self.map.global_len()];
        for (r, msg) in blocks.iter().enumerate() {
            let rank = RankId(r as u32);
            let extent = self.map.local_extent(rank)?;
            let block = if rank == self.rank {
                self.local.clone()
            } else {
                decode_block::<T>(&msg.payload, &self.map.local_shape(rank)?)?
            };
            place_block(&mut global, shape, &extent, &block);
        }
        Ok(Some(global))
    }

    /// Applies `f` to every local element. No communication.
    pub fn map_local<U: Element>(&self, f: impl Fn(T) -> U) -> DistArray<U> {
        DistArray {
            map: self.map.clone(),
            rank: self.rank,
            local: self.local.iter().map(|&x| f(x)).collect(),
        }
    }
}

fn check_job(ctx: &FabricContext, map: &DistMap) -> Result<()> {
    if map.nranks() != ctx.nranks() {
        return Err(PgasError::Argument(format!(
            "map spans {} ranks, job has {}",
            map.nranks(),
            ctx.nranks()
        )));
    }
    Ok(())
}

fn decode_block<T: Element>(bytes: &[u8], expect_shape: &[usize]) -> Result<Vec<T>> {
    let payload = TypedArrayPayload::decode(bytes)?;
    if payload.shape_usize() != expect_shape {
        return Err(PgasError::Protocol(format!(
            "block shape {:?}, expected {expect_shape:?}",
            payload.shape
        )));
    }
    payload.values()
}

/// Copies the sub-block described by `extent` out of a row-major array of `shape`.
pub fn copy_block<T: Copy>(global: &[T], shape: &[usize], extent: &[Extent]) -> Vec<T> {
    match (shape, extent) {
        ([_], [e]) => global[e.start..e.end()].to_vec(),
        ([_, cols], [rows, cs]) => {
            let mut out = Vec::with_capacity(rows.len * cs.len);
            for r in rows.start..rows.end() {
                let base = r * cols;
                out.extend_from_slice(&global[base + cs.start..base + cs.end()]);
            }
            out
        }
        _ => panic!("copy_block supports 1-D and 2-D only"),
    }
}

/// Inverse of [`copy_block`]: writes `block` into its place in `global`.
pub fn place_block<T: Copy>(global: &mut [T], shape: &[usize], extent: &[Extent], block: &[T]) {
    match (shape, extent) {
        ([_], [e]) => global[e.start..e.end()].copy_from_slice(block),
        ([_, cols], [rows, cs]) => {
            for (i, r) in (rows.start..rows.end()).enumerate() {
                let base = r * cols;
                global[base + cs.start..base + cs.end()]
                    .copy_from_slice(&block[i * cs.len..(i + 1) * cs.len]);
            }
        }
        _ => panic!("place_block supports 1-D and 2-D only"),
    }
}
