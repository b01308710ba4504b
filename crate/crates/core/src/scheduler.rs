//! Outbound audio pacing.
//!
//! An [`OutboundStream`] buffers chunks from the synthesis stage and hands
//! them to the sender one at a time. Dispatch can be paused at a chunk
//! boundary and resumed without loss or duplication. [`SharedStream`] wraps a
//! stream for one producer, one consumer, and an operator thread.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AudioChunk;
use crate::clock::Clock;
use crate::ids::StreamId;

pub const DEFAULT_BUFFER_DEPTH: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamState {
    Filling,
    Draining,
    Paused,
    Done,
}

/// Why dispatch is held independently of pause state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hold {
    /// Awaiting operator release of a previewed response.
    Preview,
    /// Operator pause that arrived before the stream started draining.
    Operator,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("cannot {op} a stream in state {state:?}")]
    InvalidStreamState { op: &'static str, state: StreamState },
    #[error("chunk belongs to stream `{0}`")]
    WrongStream(StreamId),
    #[error("stream is not fully enqueued")]
    Incomplete,
}

#[derive(Debug, Clone)]
struct Queued {
    chunk: AudioChunk,
    ready_at_ms: u64,
}

#[derive(Debug, Clone)]
pub struct OutboundStream {
    stream_id: StreamId,
    queue: Vec<Queued>,
    cursor: u64,
    state: StreamState,
    playback_clock_ms: u64,
    buffer_depth: usize,
    final_enqueued: bool,
    preview_hold: bool,
    operator_hold: bool,
    aborted: bool,
}

impl OutboundStream {
    pub fn new(stream_id: StreamId, buffer_depth: usize) -> Self {
        Self {
            stream_id,
            queue: Vec::new(),
            cursor: 0,
            state: StreamState::Filling,
            playback_clock_ms: 0,
            buffer_depth: buffer_depth.max(1),
            final_enqueued: false,
            preview_hold: false,
            operator_hold: false,
            aborted: false,
        }
    }

    pub fn stream_id(&self) -> &StreamId {
        &self.stream_id
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    /// Next sequence number to dispatch.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Milliseconds of audio dispatched so far.
    pub fn playback_clock_ms(&self) -> u64 {
        self.playback_clock_ms
    }

    pub fn enqueued(&self) -> usize {
        self.queue.len()
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }

    pub fn is_held(&self) -> bool {
        self.preview_hold || self.operator_hold
    }

    pub fn is_held_for(&self, reason: Hold) -> bool {
        match reason {
            Hold::Preview => self.preview_hold,
            Hold::Operator => self.operator_hold,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.final_enqueued
    }

    pub fn enqueue(&mut self, chunk: AudioChunk) -> Result<(), SchedulerError> {
        self.enqueue_at(chunk, 0)
    }

    /// Append a chunk that became available at `ready_at_ms`.
    pub fn enqueue_at(&mut self, chunk: AudioChunk, ready_at_ms: u64) -> Result<(), SchedulerError> {
        if chunk.stream_id != self.stream_id {
            return Err(SchedulerError::WrongStream(chunk.stream_id));
        }
        if self.state == StreamState::Done || self.final_enqueued {
            return Err(SchedulerError::InvalidStreamState {
                op: "enqueue",
                state: self.state,
            });
        }
        let expected = self.queue.len() as u64;
        if chunk.seq != expected {
            return Err(SchedulerError::SequenceGap {
                expected,
                got: chunk.seq,
            });
        }
        self.final_enqueued = chunk.is_final;
        self.queue.push(Queued { chunk, ready_at_ms });
        if self.state == StreamState::Filling
            && (self.queue.len() >= self.buffer_depth || self.final_enqueued)
        {
            self.state = StreamState::Draining;
        }
        Ok(())
    }

    pub fn pause(&mut self) -> Result<(), SchedulerError> {
        if self.state != StreamState::Draining {
            return Err(SchedulerError::InvalidStreamState {
                op: "pause",
                state: self.state,
            });
        }
        self.state = StreamState::Paused;
        Ok(())
    }

    pub fn resume(&mut self) -> Result<(), SchedulerError> {
        if self.state != StreamState::Paused {
            return Err(SchedulerError::InvalidStreamState {
                op: "resume",
                state: self.state,
            });
        }
        self.state = StreamState::Draining;
        Ok(())
    }

    /// Hold dispatch until the same reason is released.
    pub fn hold(&mut self, reason: Hold) {
        match reason {
            Hold::Preview => self.preview_hold = true,
            Hold::Operator => self.operator_hold = true,
        }
    }

    pub fn release(&mut self, reason: Hold) {
        match reason {
            Hold::Preview => self.preview_hold = false,
            Hold::Operator => self.operator_hold = false,
        }
    }

    /// True when [`OutboundStream::next_dispatch`] would return a chunk.
    pub fn can_dispatch(&self) -> bool {
        self.state == StreamState::Draining && !self.is_held() && (self.cursor as usize) < self.queue.len()
    }

    /// Take the chunk at the cursor if dispatch is allowed.
    pub fn next_dispatch(&mut self) -> Option<AudioChunk> {
        if !self.can_dispatch() {
            return None;
        }
        let chunk = self.queue[self.cursor as usize].chunk.clone();
        self.cursor += 1;
        self.playback_clock_ms += chunk.duration_ms;
        if chunk.is_final {
            self.state = StreamState::Done;
        }
        Some(chunk)
    }

    /// Drop everything not yet dispatched. Returns the dispatched sequence
    /// numbers and the number of chunks discarded.
    pub fn discard(&mut self) -> (Vec<u64>, usize) {
        let played: Vec<u64> = (0..self.cursor).collect();
        let discarded = self.queue.len() - self.cursor as usize;
        self.queue.truncate(self.cursor as usize);
        self.state = StreamState::Done;
        self.aborted = true;
        (played, discarded)
    }

    /// Analytic send times for a fully enqueued stream, without sleeping.
    ///
    /// Dispatch begins when `buffer_depth` chunks (or the final one) have
    /// arrived; each later chunk goes out when it is ready and the previous
    /// chunk has finished playing.
    pub fn dispatch_timeline(&self) -> Result<Vec<(u64, u64)>, SchedulerError> {
        if !self.final_enqueued {
            return Err(SchedulerError::Incomplete);
        }
        let gate = self.buffer_depth.min(self.queue.len()) - 1;
        let start = self.queue[gate].ready_at_ms;
        let mut out = Vec::with_capacity(self.queue.len());
        let mut free_at = start;
        for q in &self.queue {
            let send = q.ready_at_ms.max(free_at);
            out.push((q.chunk.seq, send));
            free_at = send + q.chunk.duration_ms;
        }
        Ok(out)
    }
}

/// What [`SharedStream::wait_ready`] observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ready {
    Dispatchable,
    Done,
    Aborted,
}

/// What a consumer gets from [`SharedStream::wait_next`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Next {
    Chunk(AudioChunk),
    Done,
    Aborted,
}

/// A stream shared between producer, consumer, and operator threads.
/// Every operation is linearized by one lock and wakes waiting consumers.
#[derive(Debug, Clone)]
pub struct SharedStream {
    inner: Arc<(Mutex<OutboundStream>, Condvar)>,
}

impl SharedStream {
    pub fn new(stream: OutboundStream) -> Self {
        Self {
            inner: Arc::new((Mutex::new(stream), Condvar::new())),
        }
    }

    fn lock(&self) -> MutexGuard<'_, OutboundStream> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Run `f` on the stream and wake waiters.
    pub fn with<R>(&self, f: impl FnOnce(&mut OutboundStream) -> R) -> R {
        let r = f(&mut self.lock());
        self.inner.1.notify_all();
        r
    }

    pub fn snapshot(&self) -> OutboundStream {
        self.lock().clone()
    }

    /// Block until a chunk could be dispatched or the stream ends, without
    /// taking it. Callers that must linearize dispatch with other state take
    /// the chunk afterwards under their own lock.
    pub fn wait_ready(&self) -> Ready {
        let mut stream = self.lock();
        loop {
            if stream.aborted {
                return Ready::Aborted;
            }
            if stream.can_dispatch() {
                return Ready::Dispatchable;
            }
            if stream.state == StreamState::Done {
                return Ready::Done;
            }
            stream = self
                .inner
                .1
                .wait_timeout(stream, Duration::from_millis(50))
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Block until a chunk can be dispatched or the stream ends.
    pub fn wait_next(&self) -> Next {
        let mut stream = self.lock();
        loop {
            if stream.aborted {
                return Next::Aborted;
            }
            if let Some(chunk) = stream.next_dispatch() {
                return Next::Chunk(chunk);
            }
            if stream.state == StreamState::Done {
                return Next::Done;
            }
            stream = self
                .inner
                .1
                .wait_timeout(stream, Duration::from_millis(50))
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }
}

/// Real-time pacing: dispatch each chunk, then wait out its duration before
/// the next one. Pauses therefore take effect at the next chunk boundary.
/// Returns `(seq, send_at_ms)` for every dispatched chunk and whether the
/// stream played to completion.
pub fn pace(
    stream: &SharedStream,
    clock: &dyn Clock,
    mut send: impl FnMut(&AudioChunk, u64),
) -> (Vec<(u64, u64)>, bool) {
    let mut timeline = Vec::new();
    loop {
        match stream.wait_next() {
            Next::Chunk(chunk) => {
                let at = clock.now_ms();
                send(&chunk, at);
                timeline.push((chunk.seq, at));
                clock.sleep_until_ms(at + chunk.duration_ms);
                if chunk.is_final {
                    return (timeline, true);
                }
            }
            Next::Done => return (timeline, true),
            Next::Aborted => return (timeline, false),
        }
    }
}
