//! Barrier, gather and broadcast built on point-to-point messages.
//!
//! All three are rooted at rank 0 and rely on loose synchrony: every rank
//! issues the same collectives in the same order.

use std::time::Instant;

use super::{
    check_app_tag, FabricContext, FabricError, PayloadType, RankId, Received, Result,
    BARRIER_TAG_BASE, MAX_BARRIER_EPOCH,
};

impl FabricContext {
    /// Returns only after every rank has entered barrier `epoch`.
    ///
    /// Non-root ranks send an enter message to rank 0; rank 0 releases everyone
    /// once all `nranks - 1` enters have arrived.
    pub fn barrier(&mut self, epoch: u32) -> Result<()> {
        if epoch >= MAX_BARRIER_EPOCH {
            return Err(FabricError::Argument(format!(
                "barrier epoch {epoch} exceeds {}",
                MAX_BARRIER_EPOCH - 1
            )));
        }
        if self.nranks == 1 {
            return Ok(());
        }
        let tag = BARRIER_TAG_BASE + epoch;
        let deadline = self.deadline_for_collective();
        let stamp = epoch.to_le_bytes();

        if self.my_rank.is_root() {
            for r in 1..self.nranks {
                let got = self.recv_barrier(RankId(r), tag, deadline)?;
                check_epoch_payload(&got, epoch, r)?;
            }
            for r in 1..self.nranks {
                self.send_tagged(RankId(r), tag, PayloadType::RawBytes, &stamp)?;
            }
        } else {
            self.send_tagged(RankId::ROOT, tag, PayloadType::RawBytes, &stamp)?;
            let got = self.recv_barrier(RankId::ROOT, tag, deadline)?;
            check_epoch_payload(&got, epoch, 0)?;
        }
        Ok(())
    }

    // A barrier message from the same peer carrying any other epoch can only
    // come from a rank that called barrier with a different epoch.
    fn recv_barrier(&mut self, src: RankId, tag: u32, deadline: Option<Instant>) -> Result<Received> {
        let guard = move |ctx: &FabricContext| -> Result<()> {
            let stray = ctx
                .cached_tags_from(src)
                .find(|&t| t != tag && (BARRIER_TAG_BASE..BARRIER_TAG_BASE + MAX_BARRIER_EPOCH).contains(&t));
            match stray {
                Some(t) => Err(FabricError::Protocol {
                    file: format!("barrier from rank {src}"),
                    detail: format!(
                        "epoch mismatch: waiting for epoch {}, rank {src} entered epoch {}",
                        tag - BARRIER_TAG_BASE,
                        t - BARRIER_TAG_BASE
                    ),
                }),
                None => Ok(()),
            }
        };
        self.recv_until(src, tag, deadline, &guard)
    }

    /// Collects one payload per rank at rank 0, indexed by source rank.
    /// Non-root ranks get `None`.
    pub fn gather_to_zero(&mut self, tag: u32, payload: &[u8]) -> Result<Option<Vec<Vec<u8>>>> {
        check_app_tag(tag)?;
        Ok(self
            .gather_typed(tag, PayloadType::RawBytes, payload)?
            .map(|all| all.into_iter().map(|r| r.payload).collect()))
    }

    pub(crate) fn gather_typed(
        &mut self,
        tag: u32,
        payload_type: PayloadType,
        payload: &[u8],
    ) -> Result<Option<Vec<Received>>> {
        if !self.my_rank.is_root() {
            self.send_tagged(RankId::ROOT, tag, payload_type, payload)?;
            return Ok(None);
        }
        let deadline = self.deadline_for_collective();
        let mut out = Vec::with_capacity(self.nranks as usize);
        out.push(Received {
            payload_type,
            payload: payload.to_vec(),
        });
        for r in 1..self.nranks {
            out.push(self.recv_until(RankId(r), tag, deadline, &|_| Ok(()))?);
        }
        Ok(Some(out))
    }

    /// Rank 0 supplies `payload`; every rank returns a copy of it.
    pub fn broadcast_from_zero(&mut self, tag: u32, payload: Option<&[u8]>) -> Result<Vec<u8>> {
        check_app_tag(tag)?;
        self.broadcast_typed(tag, PayloadType::RawBytes, payload)
            .map(|r| r.payload)
    }

    pub(crate) fn broadcast_typed(
        &mut self,
        tag: u32,
        payload_type: PayloadType,
        payload: Option<&[u8]>,
    ) -> Result<Received> {
        if self.my_rank.is_root() {
            let payload = payload.ok_or_else(|| {
                FabricError::Argument("rank 0 must supply the broadcast payload".into())
            })?;
            for r in 1..self.nranks {
                self.send_tagged(RankId(r), tag, payload_type, payload)?;
            }
            Ok(Received {
                payload_type,
                payload: payload.to_vec(),
            })
        } else {
            let deadline = self.deadline_for_collective();
            self.recv_until(RankId::ROOT, tag, deadline, &|_| Ok(()))
        }
    }
}

fn check_epoch_payload(got: &Received, epoch: u32, from: u32) -> Result<()> {
    if got.payload != epoch.to_le_bytes() {
        return Err(FabricError::Protocol {
            file: format!("barrier from rank {from}"),
            detail: format!("expected epoch {epoch}, payload was {:?}", got.payload),
        });
    }
    Ok(())
}
