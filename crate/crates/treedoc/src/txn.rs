//! Transaction brackets: apply a remote site's transaction as one batch.
//!
//! A site brackets a run of its own edits with start and end markers.
//! Brackets never nest and strictly alternate per site, so no
//! transaction identifier travels on the wire: a site's membership is
//! inferred from its own operation order, which per-site FIFO delivery
//! preserves.
//!
//! The tracker sits between causal delivery and the document. Operations
//! from an origin with an open bracket are staged until its end marker
//! arrives, then handed back as one atomic batch; everything else passes
//! through as a batch of one. While the local site has a transaction of
//! its own open it simply stops draining its delivery buffer, so no
//! remote batch can interleave with it.

use std::collections::BTreeMap;

use crate::causal::{Operation, Payload};
use crate::ids::SiteId;
use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct TxnTracker {
    local_open: bool,
    staging: BTreeMap<SiteId, Vec<Operation>>,
}

impl TxnTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn local_open(&self) -> bool {
        self.local_open
    }

    /// Origins whose transactions are currently staged here.
    pub fn staged_origins(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.staging.keys().copied()
    }

    pub fn begin_local(&mut self) -> Result<()> {
        if self.local_open {
            return Err(Error::IllegalNesting);
        }
        self.local_open = true;
        Ok(())
    }

    pub fn end_local(&mut self) -> Result<()> {
        if !self.local_open {
            return Err(Error::NoOpenTransaction);
        }
        self.local_open = false;
        Ok(())
    }

    /// Routes one delivered remote operation. Returns the batches now
    /// ready to apply: empty while an operation was staged, one batch
    /// otherwise.
    pub fn accept(&mut self, op: Operation) -> Result<Vec<Vec<Operation>>> {
        let origin = op.site;
        if self.staging.contains_key(&origin) {
            match op.payload {
                Payload::TxnStart => return Err(Error::IllegalNesting),
                Payload::TxnEnd => {
                    let mut batch = self.staging.remove(&origin).unwrap();
                    batch.push(op);
                    return Ok(vec![batch]);
                }
                _ => {
                    self.staging.get_mut(&origin).unwrap().push(op);
                    return Ok(Vec::new());
                }
            }
        }
        match op.payload {
            Payload::TxnStart => {
                self.staging.insert(origin, vec![op]);
                Ok(Vec::new())
            }
            Payload::TxnEnd => Err(Error::NoOpenTransaction),
            _ => Ok(vec![vec![op]]),
        }
    }
}
