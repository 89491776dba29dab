use std::sync::Arc;

use arc_swap::ArcSwap;

use super::PipelineTables;

/// Atomically replaceable table snapshot.
///
/// Workers call [`SnapshotCell::load`] once per packet (or per batch) and
/// keep using that snapshot until they load again, so a packet never sees a
/// mix of two snapshots. Publishing never blocks readers.
#[derive(Debug)]
pub struct SnapshotCell {
    inner: ArcSwap<PipelineTables>,
}

impl SnapshotCell {
    pub fn new(tables: PipelineTables) -> Self {
        SnapshotCell {
            inner: ArcSwap::from_pointee(tables),
        }
    }

    pub fn load(&self) -> Arc<PipelineTables> {
        self.inner.load_full()
    }

    /// Cheaper guard for hot loops; do not hold across blocking calls.
    pub fn load_guard(&self) -> arc_swap::Guard<Arc<PipelineTables>> {
        self.inner.load()
    }

    pub fn publish(&self, tables: Arc<PipelineTables>) {
        self.inner.store(tables);
    }
}
