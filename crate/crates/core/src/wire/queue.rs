//! Bounded queue paired with a pool of reusable buffers.
//!
//! Producers call `begin_push` to borrow a buffer, fill it, then `end_push`.
//! Consumers `pop` a guard that returns the buffer to the pool when dropped.

use std::collections::VecDeque;
use std::ops::{Deref, DerefMut};
use std::sync::{Condvar, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What `begin_push` does when no pooled buffer is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// Refuse the push.
    #[default]
    Discard,
    /// Allocate another buffer.
    Grow,
    /// Recycle a uniformly random queued element.
    ReplaceRandom,
    /// Block until a consumer releases a buffer.
    Wait,
}

impl std::str::FromStr for OverflowPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discard" => Ok(Self::Discard),
            "grow" => Ok(Self::Grow),
            "replace_random" | "replace-random" => Ok(Self::ReplaceRandom),
            "wait" => Ok(Self::Wait),
            _ => Err(format!(
                "unknown queue policy '{s}' (expected discard, grow, replace_random or wait)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounters {
    /// `begin_push` calls, successful or not.
    pub pushed: u64,
    pub popped: u64,
    pub discarded: u64,
    pub queued: usize,
    pub pooled: usize,
    /// Buffers held by producers or consumers right now.
    pub checked_out: usize,
    /// Buffers ever allocated.
    pub allocated: usize,
}

struct Inner<T> {
    queue: VecDeque<T>,
    pool: Vec<T>,
    counters: QueueCounters,
    closed: bool,
    rng: ChaCha8Rng,
}

pub struct PooledQueue<T> {
    inner: Mutex<Inner<T>>,
    /// Signalled when a buffer returns to the pool.
    freed: Condvar,
    /// Signalled when an element is enqueued or the queue closes.
    ready: Condvar,
    policy: OverflowPolicy,
    factory: Box<dyn Fn() -> T + Send + Sync>,
}

impl<T> PooledQueue<T> {
    pub fn new<F>(capacity: usize, policy: OverflowPolicy, factory: F) -> Self
    where
        F: Fn() -> T + Send + Sync + 'static,
    {
        Self::with_seed(capacity, policy, 0, factory)
    }

    /// `seed` drives the victim choice under `ReplaceRandom`.
    pub fn with_seed<F>(capacity: usize, policy: OverflowPolicy, seed: u64, factory: F) -> Self
    where
        F: Fn() -> T + Send + Sync + 'static,
    {
        let pool: Vec<T> = (0..capacity).map(|_| factory()).collect();
        Self {
            inner: Mutex::new(Inner {
                queue: VecDeque::with_capacity(capacity),
                pool,
                counters: QueueCounters {
                    allocated: capacity,
                    pooled: capacity,
                    ..Default::default()
                },
                closed: false,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            freed: Condvar::new(),
            ready: Condvar::new(),
            policy,
            factory: Box::new(factory),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner<T>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn policy(&self) -> OverflowPolicy {
        self.policy
    }

    pub fn counters(&self) -> QueueCounters {
        let g = self.lock();
        let mut c = g.counters;
        c.queued = g.queue.len();
        c.pooled = g.pool.len();
        c
    }

    pub fn len(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Stops the queue: pending and future `begin_push` calls return `None`,
    /// consumers drain what is left and then see `None`.
    pub fn close(&self) {
        self.lock().closed = true;
        self.freed.notify_all();
        self.ready.notify_all();
    }

    /// Borrows a buffer for filling, or `None` if the push was refused.
    pub fn begin_push(&self) -> Option<PushHandle<'_, T>> {
        let mut g = self.lock();
        g.counters.pushed += 1;
        if g.closed {
            g.counters.discarded += 1;
            return None;
        }
        let item = match g.pool.pop() {
            Some(item) => item,
            None => match self.policy {
                OverflowPolicy::Discard => {
                    g.counters.discarded += 1;
                    return None;
                }
                OverflowPolicy::Grow => {
                    g.counters.allocated += 1;
                    (self.factory)()
                }
                OverflowPolicy::ReplaceRandom => {
                    if g.queue.is_empty() {
                        // Every buffer is checked out; nothing to recycle.
                        g.counters.discarded += 1;
                        return None;
                    }
                    let n = g.queue.len();
                    let victim = g.rng.random_range(0..n);
                    g.counters.discarded += 1;
                    g.queue.remove(victim).expect("index in range")
                }
                OverflowPolicy::Wait => loop {
                    if g.closed {
                        g.counters.discarded += 1;
                        return None;
                    }
                    if let Some(item) = g.pool.pop() {
                        break item;
                    }
                    g = self.freed.wait(g).unwrap_or_else(|e| e.into_inner());
                },
            },
        };
        g.counters.checked_out += 1;
        Some(PushHandle {
            queue: self,
            item: Some(item),
        })
    }

    fn finish_push(&self, item: T) {
        let mut g = self.lock();
        g.counters.checked_out -= 1;
        g.queue.push_back(item);
        drop(g);
        self.ready.notify_one();
    }

    /// Returns an unpublished or consumed buffer to the pool.
    fn release(&self, item: T, popped: bool) {
        let mut g = self.lock();
        g.counters.checked_out -= 1;
        if !popped {
            // An abandoned push never reached the queue.
            g.counters.discarded += 1;
        }
        g.pool.push(item);
        drop(g);
        self.freed.notify_one();
    }

    /// Front element, if any.
    pub fn pop(&self) -> Option<PopGuard<'_, T>> {
        let mut g = self.lock();
        let item = g.queue.pop_front()?;
        g.counters.popped += 1;
        g.counters.checked_out += 1;
        Some(PopGuard {
            queue: self,
            item: Some(item),
        })
    }

    /// Waits for an element; `None` once the queue is closed and drained.
    pub fn pop_blocking(&self) -> Option<PopGuard<'_, T>> {
        let mut g = self.lock();
        loop {
            if let Some(item) = g.queue.pop_front() {
                g.counters.popped += 1;
                g.counters.checked_out += 1;
                return Some(PopGuard {
                    queue: self,
                    item: Some(item),
                });
            }
            if g.closed {
                return None;
            }
            g = self.ready.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Like `pop_blocking` but gives up after `timeout`.
    pub fn pop_timeout(&self, timeout: std::time::Duration) -> Option<PopGuard<'_, T>> {
        let deadline = std::time::Instant::now() + timeout;
        let mut g = self.lock();
        loop {
            if let Some(item) = g.queue.pop_front() {
                g.counters.popped += 1;
                g.counters.checked_out += 1;
                return Some(PopGuard {
                    queue: self,
                    item: Some(item),
                });
            }
            let now = std::time::Instant::now();
            if g.closed || now >= deadline {
                return None;
            }
            g = self
                .ready
                .wait_timeout(g, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

/// A buffer borrowed for filling. Dropping it without `end_push` counts as a
/// discard and returns the buffer to the pool.
pub struct PushHandle<'a, T> {
    queue: &'a PooledQueue<T>,
    item: Option<T>,
}

impl<T> PushHandle<'_, T> {
    pub fn end_push(mut self) {
        let item = self.item.take().expect("handle holds an item");
        self.queue.finish_push(item);
    }
}

impl<T> Deref for PushHandle<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        self.item.as_ref().expect("handle holds an item")
    }
}

impl<T> DerefMut for PushHandle<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        self.item.as_mut().expect("handle holds an item")
    }
}

impl<T> Drop for PushHandle<'_, T> {
    fn drop(&mut self) {
        if let Some(item) = self.item.take() {
            self.queue.release(item, false);
        }
    }
}

/// A dequeued element; its buffer goes back to the pool on drop.
pub struct PopGuard<'a, T> {
    queue: &'a PooledQueue<T>,
    item: Option<T>,
}

impl<T> Deref for PopGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        self.item.as_ref().expect("guard holds an item")
    }
}

impl<T> DerefMut for PopGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        self.item.as_mut().expect("guard holds an item")
    }
}

impl<T> Drop for PopGuard<'_, T> {
    fn drop(&mut self) {
        if let Some(item) = self.item.take() {
            self.queue.release(item, true);
        }
    }
}
