//! Live monitoring feed: per-session ordered envelopes with replay.
//!
//! Publishing never waits on subscribers. Each session keeps its full
//! envelope history; a watch channel wakes subscribers when it grows.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use futures::stream::{self, Stream};
use routecoach_core::engine::{NavSnapshot, TrainingEvent};
use routecoach_core::ids::SessionId;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEvent {
    pub session_id: SessionId,
    pub seq: u64,
    pub event: TrainingEvent,
    pub position: Option<NavSnapshot>,
}

impl FeedEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("feed event serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Head {
    last_seq: u64,
    closed: bool,
}

struct Channel {
    history: Mutex<Vec<FeedEvent>>,
    head: watch::Sender<Head>,
}

impl Channel {
    fn since(&self, from_seq: u64) -> Vec<FeedEvent> {
        let history = self.history.lock().expect("feed history poisoned");
        // seq starts at 1 and is gapless, so it doubles as an index.
        let start = from_seq.max(1) as usize - 1;
        history.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }
}

#[derive(Default)]
pub struct FeedHub {
    channels: Mutex<HashMap<SessionId, Arc<Channel>>>,
}

impl FeedHub {
    pub fn new() -> Self {
        Self::default()
    }

    fn channel(&self, id: &SessionId) -> Option<Arc<Channel>> {
        self.channels.lock().expect("feed hub poisoned").get(id).cloned()
    }

    pub fn open(&self, id: &SessionId) {
        let (head, _) = watch::channel(Head {
            last_seq: 0,
            closed: false,
        });
        self.channels
            .lock()
            .expect("feed hub poisoned")
            .entry(id.clone())
            .or_insert_with(|| {
                Arc::new(Channel {
                    history: Mutex::new(Vec::new()),
                    head,
                })
            });
    }

    pub fn contains(&self, id: &SessionId) -> bool {
        self.channel(id).is_some()
    }

    /// Appends envelopes for freshly emitted engine events. Events must
    /// arrive in seq order; the engine guarantees this per session.
    pub fn publish(&self, id: &SessionId, events: &[TrainingEvent], position: Option<NavSnapshot>) {
        let Some(ch) = self.channel(id) else {
            return;
        };
        let last = {
            let mut history = ch.history.lock().expect("feed history poisoned");
            for e in events {
                debug_assert_eq!(e.seq, history.len() as u64 + 1, "feed seq gap");
                history.push(FeedEvent {
                    session_id: id.clone(),
                    seq: e.seq,
                    event: e.clone(),
                    position,
                });
            }
            history.len() as u64
        };
        ch.head.send_modify(|h| h.last_seq = last);
    }

    /// Marks the session's feed complete; streams end after draining.
    pub fn close(&self, id: &SessionId) {
        if let Some(ch) = self.channel(id) {
            ch.head.send_modify(|h| h.closed = true);
        }
    }

    /// Envelopes with `seq >= from_seq` that exist now.
    pub fn replay(&self, id: &SessionId, from_seq: u64) -> Option<Vec<FeedEvent>> {
        self.channel(id).map(|ch| ch.since(from_seq))
    }

    /// Every envelope from `from_seq` on, including future ones, ending when
    /// the session's feed is closed.
    pub fn subscribe(&self, id: &SessionId, from_seq: u64) -> Option<impl Stream<Item = FeedEvent> + Send + 'static> {
        let ch = self.channel(id)?;
        let rx = ch.head.subscribe();
        let state = (ch, rx, from_seq.max(1), Vec::<FeedEvent>::new().into_iter());
        Some(stream::unfold(state, |(ch, mut rx, mut next, mut buf)| async move {
            loop {
                if let Some(ev) = buf.next() {
                    next = ev.seq + 1;
                    return Some((ev, (ch, rx, next, buf)));
                }
                let head = *rx.borrow_and_update();
                let pending = ch.since(next);
                if !pending.is_empty() {
                    buf = pending.into_iter();
                    continue;
                }
                if head.closed || rx.changed().await.is_err() {
                    return None;
                }
            }
        }))
    }
}
