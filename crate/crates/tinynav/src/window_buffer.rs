//! The frame window shared between a control loop and an inference thread.

use std::sync::{Arc, Mutex, MutexGuard};

use tinynav_core::pipeline::{stack_frames, WindowRing};

/// One producer pushes frames, one consumer takes snapshots. The lock is
/// held only to move an `Arc` in or clone twenty of them out, so neither
/// side waits longer than that.
#[derive(Debug)]
pub struct SharedWindowBuffer<T> {
    ring: Mutex<WindowRing<Arc<T>>>,
}

impl<T> Default for SharedWindowBuffer<T> {
    fn default() -> Self {
        Self { ring: Mutex::new(WindowRing::new()) }
    }
}

impl<T> SharedWindowBuffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, WindowRing<Arc<T>>> {
        // A panicking holder cannot leave the ring half-written.
        self.ring.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn push(&self, frame: T) {
        let frame = Arc::new(frame);
        self.lock().push(frame);
    }

    pub fn pushed(&self) -> u64 {
        self.lock().pushed()
    }

    pub fn clear(&self) {
        self.lock().clear();
    }

    /// The twenty most recent frames, oldest first.
    pub fn snapshot(&self) -> tinynav_core::Result<Vec<Arc<T>>> {
        self.lock().snapshot()
    }
}

impl<T: AsRef<[u8]>> SharedWindowBuffer<T> {
    /// Snapshot stacked into a channel-last model input.
    pub fn window_pixels(&self) -> tinynav_core::Result<Vec<u8>> {
        let frames = self.snapshot()?;
        stack_frames(&frames.iter().map(|f| f.as_ref().as_ref()).collect::<Vec<_>>())
    }
}
