//! Fan-out of live samples to any number of subscribers.
//!
//! Publishing never blocks: each subscriber owns a bounded queue, and a
//! subscriber whose queue is full is dropped on the spot. Its stream then
//! ends after draining what was already queued.

use std::sync::{Arc, Mutex};

use serde::Serialize;
use tokio::sync::mpsc;

use crate::sampler::Reading;
use crate::store::SampleLine;

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

/// One live sample, optionally attributed to the run it was recorded into.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveFrame {
    pub run_id: Option<String>,
    pub sample: Reading,
}

impl LiveFrame {
    pub fn ts_unix_ms(&self) -> i64 {
        self.sample.system.ts_unix_ms
    }

    /// The frame in the store's sample line format.
    pub fn to_line(&self) -> SampleLine {
        SampleLine::from_parts(self.run_id.clone(), &self.sample.system, self.sample.process.as_ref())
    }
}

impl Serialize for LiveFrame {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_line().serialize(serializer)
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PublishOutcome {
    pub delivered: usize,
    /// Subscribers dropped because their queue was full.
    pub overflowed: usize,
}

struct Subscriber {
    id: u64,
    tx: mpsc::Sender<Arc<LiveFrame>>,
}

#[derive(Default)]
struct HubState {
    subscribers: Vec<Subscriber>,
    next_id: u64,
    last_ts: Option<i64>,
    latest: Option<Arc<LiveFrame>>,
    closed: bool,
}

pub struct LiveHub {
    capacity: usize,
    state: Mutex<HubState>,
}

impl Default for LiveHub {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl LiveHub {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(HubState::default()),
        }
    }

    pub fn subscribe(&self) -> Subscription {
        let (tx, rx) = mpsc::channel(self.capacity);
        let mut state = self.state.lock().unwrap();
        let id = state.next_id;
        state.next_id += 1;
        if !state.closed {
            state.subscribers.push(Subscriber { id, tx });
        }
        Subscription { id, rx }
    }

    /// Sends `frame` to every subscriber. Frames that do not advance the
    /// timestamp are discarded so each subscriber sees a strictly increasing
    /// sequence.
    pub fn publish(&self, frame: LiveFrame) -> PublishOutcome {
        let mut state = self.state.lock().unwrap();
        if state.closed || state.last_ts.is_some_and(|last| frame.ts_unix_ms() <= last) {
            return PublishOutcome::default();
        }
        state.last_ts = Some(frame.ts_unix_ms());
        let frame = Arc::new(frame);
        state.latest = Some(Arc::clone(&frame));
        let mut outcome = PublishOutcome::default();
        state.subscribers.retain(|s| match s.tx.try_send(Arc::clone(&frame)) {
            Ok(()) => {
                outcome.delivered += 1;
                true
            }
            Err(mpsc::error::TrySendError::Full(_)) => {
                tracing::info!(subscriber = s.id, "live subscriber overflowed; disconnecting");
                outcome.overflowed += 1;
                false
            }
            Err(mpsc::error::TrySendError::Closed(_)) => false,
        });
        outcome
    }

    pub fn latest(&self) -> Option<Arc<LiveFrame>> {
        self.state.lock().unwrap().latest.clone()
    }

    pub fn subscriber_count(&self) -> usize {
        let mut state = self.state.lock().unwrap();
        state.subscribers.retain(|s| !s.tx.is_closed());
        state.subscribers.len()
    }

    /// Ends every subscription and refuses new ones.
    pub fn close(&self) {
        let mut state = self.state.lock().unwrap();
        state.closed = true;
        state.subscribers.clear();
    }
}

/// Receiving end of a hub subscription. Dropping it unsubscribes.
pub struct Subscription {
    id: u64,
    rx: mpsc::Receiver<Arc<LiveFrame>>,
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Next frame; `None` once the subscriber was dropped by the hub.
    pub async fn recv(&mut self) -> Option<Arc<LiveFrame>> {
        self.rx.recv().await
    }

    pub fn blocking_recv(&mut self) -> Option<Arc<LiveFrame>> {
        self.rx.blocking_recv()
    }

    pub fn try_recv(&mut self) -> Result<Arc<LiveFrame>, mpsc::error::TryRecvError> {
        self.rx.try_recv()
    }

    pub fn into_receiver(self) -> mpsc::Receiver<Arc<LiveFrame>> {
        self.rx
    }
}
