use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use crate::error::Result;

/// Bounded producer queue: a worker thread runs `produce` ahead of the
/// consumer, at most `capacity` items deep. Items arrive in production
/// order, so results do not depend on timing. With capacity 0 items are
/// produced inline on the consumer's thread.
pub struct Prefetch<I: Send + 'static> {
    inner: Inner<I>,
}

enum Inner<I: Send + 'static> {
    Inline(Box<dyn FnMut() -> Option<Result<I>> + Send>),
    Thread {
        rx: Option<Receiver<Result<I>>>,
        handle: Option<JoinHandle<()>>,
    },
}

impl<I: Send + 'static> Prefetch<I> {
    pub fn new(capacity: usize, mut produce: impl FnMut() -> Option<Result<I>> + Send + 'static) -> Self {
        if capacity == 0 {
            return Prefetch {
                inner: Inner::Inline(Box::new(produce)),
            };
        }
        let (tx, rx) = sync_channel(capacity);
        let handle = std::thread::spawn(move || {
            while let Some(item) = produce() {
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        Prefetch {
            inner: Inner::Thread {
                rx: Some(rx),
                handle: Some(handle),
            },
        }
    }
}

impl<I: Send + 'static> Iterator for Prefetch<I> {
    type Item = Result<I>;

    fn next(&mut self) -> Option<Result<I>> {
        match &mut self.inner {
            Inner::Inline(f) => f(),
            Inner::Thread { rx, .. } => rx.as_ref()?.recv().ok(),
        }
    }
}

impl<I: Send + 'static> Drop for Prefetch<I> {
    fn drop(&mut self) {
        if let Inner::Thread { rx, handle } = &mut self.inner {
            // closing the channel unblocks a producer waiting on a full queue
            drop(rx.take());
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}
