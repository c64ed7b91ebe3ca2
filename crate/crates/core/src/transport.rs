//! In-process message fabric with synchronous non-blocking sends.
//!
//! Each rank owns an [`Endpoint`]. Sends and receives are matched on
//! `(source, dest, tag)` in posting order. A send completes only once its
//! receive has been posted and the payload handed over. Progress belongs to
//! the fabric: a posted message completes without any action from either
//! rank, so a rank may compute between posting and waiting.
//!
//! With a [`CostModelParams`] injected, every message becomes ready
//! `l + bytes/B` after it starts, and a rank's outgoing messages are
//! serialised on its link.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, PendingMessage, Result};
use crate::metrics::CostModelParams;

pub const DEFAULT_WATCHDOG: Duration = Duration::from_secs(30);

// Below this much remaining delay we yield instead of sleeping; sleeps
// overshoot by tens of microseconds.
const SPIN_WINDOW: Duration = Duration::from_micros(200);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    pub watchdog: Duration,
    pub model: Option<CostModelParams>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            watchdog: DEFAULT_WATCHDOG,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Send,
    Receive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RequestHandle {
    id: u64,
    kind: RequestKind,
}

impl RequestHandle {
    pub fn kind(&self) -> RequestKind {
        self.kind
    }
}

#[derive(Debug)]
enum Status {
    Posted,
    Ready(Instant),
    Failed { len: usize },
}

#[derive(Debug)]
struct Request {
    kind: RequestKind,
    source: usize,
    dest: usize,
    tag: u64,
    capacity: usize,
    payload: Option<Vec<u8>>,
    status: Status,
}

impl Request {
    fn triple(&self) -> PendingMessage {
        PendingMessage {
            source: self.source,
            dest: self.dest,
            tag: self.tag,
        }
    }
}

type Key = (usize, usize, u64);

#[derive(Debug, Default)]
struct State {
    next_id: u64,
    requests: HashMap<u64, Request>,
    unmatched_sends: HashMap<Key, VecDeque<u64>>,
    unmatched_recvs: HashMap<Key, VecDeque<u64>>,
    link_free: Vec<Option<Instant>>,
    barrier_count: usize,
    barrier_generation: u64,
}

/// Shared delivery fabric for `nranks` endpoints.
#[derive(Debug)]
pub struct Fabric {
    nranks: usize,
    config: TransportConfig,
    state: Mutex<State>,
    changed: Condvar,
}

impl Fabric {
    pub fn new(nranks: usize, config: TransportConfig) -> Result<Arc<Self>> {
        if nranks == 0 {
            return Err(Error::Config("a fabric needs at least one rank".into()));
        }
        let state = State {
            link_free: vec![None; nranks],
            ..State::default()
        };
        Ok(Arc::new(Self {
            nranks,
            config,
            state: Mutex::new(state),
            changed: Condvar::new(),
        }))
    }

    pub fn nranks(&self) -> usize {
        self.nranks
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    /// One endpoint per rank, in rank order.
    pub fn endpoints(self: &Arc<Self>) -> Vec<Endpoint> {
        (0..self.nranks)
            .map(|rank| Endpoint {
                rank,
                fabric: Arc::clone(self),
                stats: TransportStats::default(),
            })
            .collect()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Every send or receive that was posted but never matched.
    pub fn unmatched(&self) -> Vec<PendingMessage> {
        let st = self.lock();
        let mut out: Vec<_> = st
            .unmatched_sends
            .values()
            .chain(st.unmatched_recvs.values())
            .flatten()
            .map(|id| st.requests[id].triple())
            .collect();
        out.sort();
        out
    }

    /// Fails if any message is still waiting for its partner.
    pub fn check_quiescent(&self) -> Result<()> {
        let pending = self.unmatched();
        if pending.is_empty() {
            Ok(())
        } else {
            Err(Error::Deadlock {
                context: "unmatched messages at shutdown".into(),
                pending,
            })
        }
    }

    fn post(&self, req: Request) -> Result<RequestHandle> {
        let kind = req.kind;
        let key = (req.source, req.dest, req.tag);
        let mut st = self.lock();
        let id = st.next_id;
        st.next_id += 1;
        st.requests.insert(id, req);
        let partner = match kind {
            RequestKind::Send => st.unmatched_recvs.get_mut(&key).and_then(VecDeque::pop_front),
            RequestKind::Receive => st.unmatched_sends.get_mut(&key).and_then(VecDeque::pop_front),
        };
        match partner {
            Some(other) => {
                let (send, recv) = match kind {
                    RequestKind::Send => (id, other),
                    RequestKind::Receive => (other, id),
                };
                self.complete_match(&mut st, send, recv);
                drop(st);
                self.changed.notify_all();
            }
            None => {
                let queue = match kind {
                    RequestKind::Send => &mut st.unmatched_sends,
                    RequestKind::Receive => &mut st.unmatched_recvs,
                };
                queue.entry(key).or_default().push_back(id);
            }
        }
        Ok(RequestHandle { id, kind })
    }

    fn complete_match(&self, st: &mut State, send: u64, recv: u64) {
        let payload = st
            .requests
            .get_mut(&send)
            .and_then(|r| r.payload.take())
            .unwrap_or_default();
        let len = payload.len();
        let source = st.requests[&send].source;
        let capacity = st.requests[&recv].capacity;
        if len > capacity {
            for id in [send, recv] {
                if let Some(r) = st.requests.get_mut(&id) {
                    r.status = Status::Failed { len };
                }
            }
            return;
        }
        let now = Instant::now();
        let ready = match self.config.model {
            None => now,
            Some(model) => {
                let start = st.link_free[source].map_or(now, |t| t.max(now));
                let at = start + model.message_duration(len);
                st.link_free[source] = Some(at);
                at
            }
        };
        for id in [send, recv] {
            if let Some(r) = st.requests.get_mut(&id) {
                r.status = Status::Ready(ready);
            }
        }
        if let Some(r) = st.requests.get_mut(&recv) {
            r.payload = Some(payload);
        }
    }

    fn barrier(&self) -> Result<()> {
        let deadline = Instant::now() + self.config.watchdog;
        let mut st = self.lock();
        let generation = st.barrier_generation;
        st.barrier_count += 1;
        if st.barrier_count == self.nranks {
            st.barrier_count = 0;
            st.barrier_generation += 1;
            drop(st);
            self.changed.notify_all();
            return Ok(());
        }
        while st.barrier_generation == generation {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Deadlock {
                    context: format!(
                        "barrier: {} of {} ranks arrived",
                        st.barrier_count, self.nranks
                    ),
                    pending: Vec::new(),
                });
            }
            st = self
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        Ok(())
    }
}

/// Per-endpoint instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub sends: u64,
    pub receives: u64,
    pub bytes_sent: u64,
    pub wait_calls: u64,
}

/// One rank's handle on the fabric.
#[derive(Debug)]
pub struct Endpoint {
    rank: usize,
    fabric: Arc<Fabric>,
    stats: TransportStats,
}

enum Probe {
    Done,
    Failed(Error),
    At(Instant),
    Unmatched,
}

impl Endpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nranks(&self) -> usize {
        self.fabric.nranks
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer < self.fabric.nranks {
            Ok(())
        } else {
            Err(Error::InvalidRank {
                rank: peer,
                nranks: self.fabric.nranks,
            })
        }
    }

    /// Posts a synchronous send; returns at once.
    pub fn post_send(&mut self, dest: usize, tag: u64, payload: Vec<u8>) -> Result<RequestHandle> {
        self.check_peer(dest)?;
        self.stats.sends += 1;
        self.stats.bytes_sent += payload.len() as u64;
        self.fabric.post(Request {
            kind: RequestKind::Send,
            source: self.rank,
            dest,
            tag,
            capacity: payload.len(),
            payload: Some(payload),
            status: Status::Posted,
        })
    }

    pub fn post_recv(&mut self, source: usize, tag: u64, capacity: usize) -> Result<RequestHandle> {
        self.check_peer(source)?;
        self.stats.receives += 1;
        self.fabric.post(Request {
            kind: RequestKind::Receive,
            source,
            dest: self.rank,
            tag,
            capacity,
            payload: None,
            status: Status::Posted,
        })
    }

    fn probe(st: &State, h: RequestHandle, now: Instant) -> Probe {
        match st.requests.get(&h.id) {
            // Completed sends are dropped from the table.
            None => Probe::Done,
            Some(r) => match r.status {
                Status::Posted => Probe::Unmatched,
                Status::Ready(at) if at <= now => Probe::Done,
                Status::Ready(at) => Probe::At(at),
                Status::Failed { len } => Probe::Failed(Error::Truncated {
                    sender: r.source,
                    tag: r.tag,
                    len,
                    capacity: r.capacity,
                }),
            },
        }
    }

    /// True once the request has completed. Never blocks.
    pub fn test(&self, h: RequestHandle) -> Result<bool> {
        let st = self.fabric.lock();
        match Self::probe(&st, h, Instant::now()) {
            Probe::Done => Ok(true),
            Probe::Failed(e) => Err(e),
            _ => Ok(false),
        }
    }

    /// Blocks until `ready(state, now)` yields a value, sleeping on the
    /// fabric's condition variable or until the next delayed delivery.
    fn block_on<T>(
        &self,
        handles: &[RequestHandle],
        mut ready: impl FnMut(&State, Instant) -> Result<Option<T>>,
    ) -> Result<T> {
        let deadline = Instant::now() + self.fabric.config.watchdog;
        let mut st = self.fabric.lock();
        loop {
            let now = Instant::now();
            if let Some(v) = ready(&st, now)? {
                return Ok(v);
            }
            if now >= deadline {
                let pending = handles
                    .iter()
                    .filter_map(|h| st.requests.get(&h.id))
                    .map(Request::triple)
                    .collect();
                return Err(Error::Deadlock {
                    context: format!("rank {} wait", self.rank),
                    pending,
                });
            }
            let next = handles
                .iter()
                .filter_map(|&h| match Self::probe(&st, h, now) {
                    Probe::At(at) => Some(at),
                    _ => None,
                })
                .min();
            let wake = next.map_or(deadline, |t| t.min(deadline));
            let remaining = wake.saturating_duration_since(now);
            if next.is_some() && remaining <= SPIN_WINDOW {
                drop(st);
                thread::yield_now();
                st = self.fabric.lock();
            } else {
                let nap = if next.is_some() { remaining - SPIN_WINDOW } else { remaining };
                st = self
                    .fabric
                    .changed
                    .wait_timeout(st, nap)
                    .unwrap_or_else(|p| p.into_inner())
                    .0;
            }
        }
    }

    fn retire(st: &mut State, h: RequestHandle) {
        if h.kind == RequestKind::Send {
            st.requests.remove(&h.id);
        }
    }

    /// Blocks until every handle has completed.
    pub fn wait_all(&mut self, handles: &[RequestHandle]) -> Result<()> {
        self.stats.wait_calls += 1;
        self.block_on(handles, |st, now| {
            for &h in handles {
                match Self::probe(st, h, now) {
                    Probe::Done => {}
                    Probe::Failed(e) => return Err(e),
                    _ => return Ok(None),
                }
            }
            Ok(Some(()))
        })?;
        let mut st = self.fabric.lock();
        for &h in handles {
            Self::retire(&mut st, h);
        }
        Ok(())
    }

    /// Blocks until one of the live handles completes, clears its slot and
    /// returns its index. Lowest index wins when several are done.
    pub fn wait_any(&mut self, handles: &mut [Option<RequestHandle>]) -> Result<usize> {
        let live: Vec<RequestHandle> = handles.iter().flatten().copied().collect();
        if live.is_empty() {
            return Err(Error::Usage("wait_any on a list with no active requests".into()));
        }
        self.stats.wait_calls += 1;
        let slots: &[Option<RequestHandle>] = handles;
        let idx = self.block_on(&live, |st, now| {
            for (i, h) in slots.iter().enumerate() {
                let Some(h) = *h else { continue };
                match Self::probe(st, h, now) {
                    Probe::Done => return Ok(Some(i)),
                    Probe::Failed(e) => return Err(e),
                    _ => {}
                }
            }
            Ok(None)
        })?;
        let h = handles[idx].take().expect("live slot");
        Self::retire(&mut self.fabric.lock(), h);
        Ok(idx)
    }

    /// Moves a completed receive's payload out. Each receive yields its
    /// payload exactly once.
    pub fn take_payload(&mut self, h: RequestHandle) -> Result<Vec<u8>> {
        if h.kind != RequestKind::Receive {
            return Err(Error::Usage("only receives carry a payload".into()));
        }
        let mut st = self.fabric.lock();
        match Self::probe(&st, h, Instant::now()) {
            Probe::Done => {}
            Probe::Failed(e) => return Err(e),
            _ => return Err(Error::Usage("receive has not completed".into())),
        }
        st.requests
            .remove(&h.id)
            .and_then(|r| r.payload)
            .ok_or_else(|| Error::Usage("payload already taken".into()))
    }

    /// Blocks until every rank has called `barrier`.
    pub fn barrier(&self) -> Result<()> {
        self.fabric.barrier()
    }
}

/// Runs `body` once per rank, each on its own thread, and collects the
/// results in rank order. Messages left unmatched afterwards are reported
/// as a deadlock.
pub fn run_ranks<T, F>(nranks: usize, config: TransportConfig, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Endpoint) -> Result<T> + Sync,
{
    let fabric = Fabric::new(nranks, config)?;
    let endpoints = fabric.endpoints();
    let body = &body;
    let outcomes: Vec<Result<T>> = thread::scope(|s| {
        let joins: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                thread::Builder::new()
                    .name(format!("rank-{}", ep.rank()))
                    .spawn_scoped(s, move || body(ep))
                    .expect("spawn rank thread")
            })
            .collect();
        joins
            .into_iter()
            .map(|j| {
                j.join().unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "unknown panic".into());
                    Err(Error::RankPanic(msg))
                })
            })
            .collect()
    });
    let results = outcomes.into_iter().collect::<Result<Vec<T>>>()?;
    fabric.check_quiescent()?;
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PingPongSample {
    pub message_bytes: usize,
    pub round_trips: usize,
    pub elapsed: f64,
    /// MBytes/s, counting both directions.
    pub bandwidth: f64,
}

/// Times `round_trips` back-and-forth exchanges of a `bytes`-sized message
/// between two ranks. Each hop copies the payload out of and back into a
/// resident buffer.
pub fn ping_pong(bytes: usize, round_trips: usize, config: TransportConfig) -> Result<PingPongSample> {
    if bytes < 8 {
        return Err(Error::Config(format!("ping-pong messages must be >= 8 bytes, got {bytes}")));
    }
    if round_trips == 0 {
        return Err(Error::Config("ping-pong needs at least one round trip".into()));
    }
    let times = run_ranks(2, config, |mut ep| {
        let peer = 1 - ep.rank();
        let mut buf: Vec<u8> = (0..bytes).map(|k| (k % 251) as u8).collect();
        ep.barrier()?;
        let start = Instant::now();
        for _ in 0..round_trips {
            if ep.rank() == 0 {
                let s = ep.post_send(peer, 0, buf.clone())?;
                ep.wait_all(&[s])?;
                let r = ep.post_recv(peer, 1, bytes)?;
                ep.wait_all(&[r])?;
                buf.copy_from_slice(&ep.take_payload(r)?);
            } else {
                let r = ep.post_recv(peer, 0, bytes)?;
                ep.wait_all(&[r])?;
                buf.copy_from_slice(&ep.take_payload(r)?);
                let s = ep.post_send(peer, 1, buf.clone())?;
                ep.wait_all(&[s])?;
            }
        }
        Ok(start.elapsed().as_secs_f64())
    })?;
    let elapsed = times[0];
    Ok(PingPongSample {
        message_bytes: bytes,
        round_trips,
        elapsed,
        bandwidth: 2.0 * bytes as f64 * round_trips as f64 / elapsed / 1e6,
    })
}

/// Asymptotic bandwidth: the median of the three largest messages.
pub fn plateau_level(samples: &[PingPongSample]) -> Option<f64> {
    let mut tail: Vec<f64> = samples.iter().rev().take(3).map(|s| s.bandwidth).collect();
    if tail.is_empty() {
        return None;
    }
    tail.sort_by(f64::total_cmp);
    Some(tail[tail.len() / 2])
}

/// Start of the large-message plateau: the first sample from which every
/// larger message stays within 1.5x of the plateau level either way. `None`
/// when even the three largest messages disagree that much.
pub fn plateau_onset(samples: &[PingPongSample]) -> Option<usize> {
    if samples.len() < 3 {
        return None;
    }
    let level = plateau_level(samples)?;
    let within = |s: &PingPongSample| s.bandwidth >= level / 1.5 && s.bandwidth <= level * 1.5;
    let k = samples.iter().rposition(|s| !within(s)).map_or(0, |i| i + 1);
    (k + 3 <= samples.len()).then_some(k)
}

/// Index of the highest bandwidth in the sweep.
pub fn peak_index(samples: &[PingPongSample]) -> Option<usize> {
    (0..samples.len()).reduce(|a, b| if samples[b].bandwidth > samples[a].bandwidth { b } else { a })
}

/// The curve rises (within 10% noise) up to its peak and ends on a plateau
/// starting at `onset`. Between the two, cache-resident sizes may overshoot
/// the plateau.
pub fn plateau_holds(samples: &[PingPongSample], onset: usize) -> bool {
    let Some(peak) = peak_index(samples) else {
        return false;
    };
    let rising = samples[..=peak]
        .windows(2)
        .all(|w| w[1].bandwidth >= 0.9 * w[0].bandwidth);
    rising && plateau_onset(samples) == Some(onset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quick() -> TransportConfig {
        TransportConfig {
            watchdog: Duration::from_millis(300),
            model: None,
        }
    }

    #[test]
    fn self_message_completes() {
        let fabric = Fabric::new(1, quick()).unwrap();
        let mut ep = fabric.endpoints().pop().unwrap();
        let r = ep.post_recv(0, 7, 16).unwrap();
        let s = ep.post_send(0, 7, vec![1, 2, 3]).unwrap();
        ep.wait_all(&[s, r]).unwrap();
        assert_eq!(ep.take_payload(r).unwrap(), vec![1, 2, 3]);
        assert!(matches!(ep.take_payload(r), Err(Error::Usage(_))));
        // Waiting again on completed handles returns at once.
        ep.wait_all(&[s, r]).unwrap();
        fabric.check_quiescent().unwrap();
    }

    #[test]
    fn send_stays_pending_until_receive_posts() {
        let fabric = Fabric::new(2, quick()).unwrap();
        let mut eps = fabric.endpoints();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let s = a.post_send(1, 0, vec![9; 32]).unwrap();
        assert!(!a.test(s).unwrap());
        assert_eq!(fabric.unmatched().len(), 1);
        let r = b.post_recv(0, 0, 32).unwrap();
        assert!(a.test(s).unwrap());
        b.wait_all(&[r]).unwrap();
        assert_eq!(b.take_payload(r).unwrap(), vec![9; 32]);
    }

    #[test]
    fn send_completes_only_after_receive_in_another_thread() {
        let fabric = Fabric::new(2, TransportConfig::default()).unwrap();
        let mut eps = fabric.endpoints();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let posted_at = thread::scope(|sc| {
            let h = sc.spawn(move || {
                thread::sleep(Duration::from_millis(30));
                let t = Instant::now();
                let r = b.post_recv(0, 3, 8).unwrap();
                b.wait_all(&[r]).unwrap();
                t
            });
            let s = a.post_send(1, 3, vec![0; 8]).unwrap();
            a.wait_all(&[s]).unwrap();
            let done = Instant::now();
            let posted = h.join().unwrap();
            assert!(done >= posted);
            posted
        });
        let _ = posted_at;
    }

    #[test]
    fn fifo_per_source_and_tag() {
        let fabric = Fabric::new(2, quick()).unwrap();
        let mut eps = fabric.endpoints();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        a.post_send(1, 5, vec![1]).unwrap();
        a.post_send(1, 5, vec![2]).unwrap();
        let r1 = b.post_recv(0, 5, 1).unwrap();
        let r2 = b.post_recv(0, 5, 1).unwrap();
        b.wait_all(&[r1, r2]).unwrap();
        assert_eq!(b.take_payload(r1).unwrap(), vec![1]);
        assert_eq!(b.take_payload(r2).unwrap(), vec![2]);
    }

    #[test]
    fn wrong_tag_does_not_match() {
        let fabric = Fabric::new(1, quick()).unwrap();
        let mut ep = fabric.endpoints().pop().unwrap();
        ep.post_send(0, 1, vec![0; 4]).unwrap();
        let r = ep.post_recv(0, 2, 4).unwrap();
        match ep.wait_all(&[r]) {
            Err(Error::Deadlock { pending, .. }) => {
                assert_eq!(pending, vec![PendingMessage { source: 0, dest: 0, tag: 2 }]);
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
        assert_eq!(fabric.unmatched().len(), 2);
        assert!(fabric.check_quiescent().is_err());
    }

    #[test]
    fn truncation_fails_both_sides() {
        let fabric = Fabric::new(1, quick()).unwrap();
        let mut ep = fabric.endpoints().pop().unwrap();
        let r = ep.post_recv(0, 0, 4).unwrap();
        let s = ep.post_send(0, 0, vec![0; 8]).unwrap();
        assert!(matches!(
            ep.wait_all(&[r]),
            Err(Error::Truncated { len: 8, capacity: 4, .. })
        ));
        assert!(ep.wait_all(&[s]).is_err());
    }

    #[test]
    fn invalid_destination() {
        let fabric = Fabric::new(2, quick()).unwrap();
        let mut ep = fabric.endpoints().remove(0);
        assert!(matches!(ep.post_send(2, 0, vec![]), Err(Error::InvalidRank { .. })));
        assert!(matches!(ep.post_recv(5, 0, 0), Err(Error::InvalidRank { .. })));
    }

    #[test]
    fn wait_all_cases() {
        let fabric = Fabric::new(2, quick()).unwrap();
        let mut eps = fabric.endpoints();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        a.wait_all(&[]).unwrap();
        let mut hs = Vec::new();
        for tag in 0..6 {
            hs.push(b.post_recv(0, tag, 8).unwrap());
            hs.push(a.post_send(1, tag, vec![tag as u8; 8]).unwrap());
        }
        b.wait_all(&hs).unwrap();
        let lonely = a.post_recv(1, 99, 8).unwrap();
        assert!(matches!(a.wait_all(&[lonely]), Err(Error::Deadlock { .. })));
    }

    #[test]
    fn wait_any_yields_each_index_once() {
        let fabric = Fabric::new(2, quick()).unwrap();
        let mut eps = fabric.endpoints();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let mut recvs: Vec<Option<RequestHandle>> =
            (0..26).map(|t| Some(b.post_recv(0, t, 1).unwrap())).collect();
        let mut order: Vec<u64> = (0..26).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(42));
        for &t in &order {
            a.post_send(1, t, vec![t as u8]).unwrap();
        }
        let mut seen = Vec::new();
        for _ in 0..26 {
            seen.push(b.wait_any(&mut recvs).unwrap());
        }
        seen.sort();
        assert_eq!(seen, (0..26).collect::<Vec<_>>());
        assert!(matches!(b.wait_any(&mut recvs), Err(Error::Usage(_))));
    }

    #[test]
    fn wait_any_skips_pending() {
        let fabric = Fabric::new(1, quick()).unwrap();
        let mut ep = fabric.endpoints().pop().unwrap();
        let pending = ep.post_recv(0, 1, 1).unwrap();
        let done = ep.post_recv(0, 2, 1).unwrap();
        ep.post_send(0, 2, vec![5]).unwrap();
        let mut slots = [Some(pending), Some(done)];
        assert_eq!(ep.wait_any(&mut slots).unwrap(), 1);
        assert_eq!(slots[1], None);
        let mut single = [Some(ep.post_send(0, 1, vec![6]).unwrap())];
        assert_eq!(ep.wait_any(&mut single).unwrap(), 0);
    }

    #[test]
    fn injected_delay_serialises_a_link() {
        let model = CostModelParams::new(2e-3, 1e6).unwrap();
        let fabric = Fabric::new(1, TransportConfig { watchdog: Duration::from_secs(5), model: Some(model) }).unwrap();
        let mut ep = fabric.endpoints().pop().unwrap();
        let start = Instant::now();
        let mut hs = Vec::new();
        for tag in 0..5 {
            hs.push(ep.post_recv(0, tag, 8).unwrap());
            hs.push(ep.post_send(0, tag, vec![0; 8]).unwrap());
        }
        ep.wait_all(&hs).unwrap();
        let t = start.elapsed().as_secs_f64();
        assert!(t >= 10e-3, "five 2 ms messages took {t}");
        assert!(t < 10e-3 * 3.0, "five 2 ms messages took {t}");
    }

    #[test]
    fn barrier_times_out_when_a_rank_is_missing() {
        let fabric = Fabric::new(2, quick()).unwrap();
        let ep = fabric.endpoints().remove(0);
        assert!(matches!(ep.barrier(), Err(Error::Deadlock { .. })));
    }

    #[test]
    fn run_ranks_reports_unmatched_at_shutdown() {
        let err = run_ranks(2, quick(), |mut ep| {
            if ep.rank() == 0 {
                ep.post_send(1, 4, vec![1])?;
            }
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Deadlock { pending, .. } => {
                assert_eq!(pending, vec![PendingMessage { source: 0, dest: 1, tag: 4 }])
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn ping_pong_sample_is_sane() {
        let s = ping_pong(1024, 50, TransportConfig::default()).unwrap();
        assert!(s.bandwidth.is_finite() && s.bandwidth > 0.0);
        let expect = 2.0 * 1024.0 * 50.0 / s.elapsed / 1e6;
        assert!((s.bandwidth - expect).abs() <= 1e-9 * expect);
        assert!(ping_pong(4, 1, TransportConfig::default()).is_err());
    }

    #[test]
    fn ping_pong_elapsed_scales_with_round_trips() {
        // Minimum of several runs filters scheduler noise on a busy host.
        let best = |reps: usize| {
            (0..5)
                .map(|_| ping_pong(64 * 1024, reps, TransportConfig::default()).unwrap().elapsed)
                .fold(f64::INFINITY, f64::min)
        };
        let ratio = best(200) / best(20);
        assert!(ratio > 10.0 / 2.0 && ratio < 10.0 * 2.0, "ratio {ratio}");
    }

    #[test]
    fn plateau_helpers() {
        let mk = |b: f64| PingPongSample { message_bytes: 0, round_trips: 1, elapsed: 1.0, bandwidth: b };
        let sweep: Vec<_> = [10.0, 50.0, 95.0, 100.0, 98.0].into_iter().map(mk).collect();
        assert_eq!(plateau_onset(&sweep), Some(2));
        assert!(plateau_holds(&sweep, 2));
        let broken: Vec<_> = [10.0, 100.0, 40.0].into_iter().map(mk).collect();
        assert_eq!(plateau_onset(&broken), None);
        let cache_peak: Vec<_> = [10.0, 50.0, 190.0, 120.0, 100.0, 100.0, 100.0].into_iter().map(mk).collect();
        assert_eq!(plateau_onset(&cache_peak), Some(3));
        assert_eq!(peak_index(&cache_peak), Some(2));
        assert!(plateau_holds(&cache_peak, 3));
        let dip: Vec<_> = [10.0, 50.0, 20.0, 100.0, 100.0, 100.0].into_iter().map(mk).collect();
        assert!(!plateau_holds(&dip, 3));
        // Bandwidth growing with size has no plateau.
        let growing: Vec<_> = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0].into_iter().map(mk).collect();
        assert_eq!(plateau_onset(&growing), None);
        assert_eq!(plateau_level(&[]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn delivery_is_lossless_under_random_interleaving(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nranks = 3;
            // Every ordered pair exchanges 4 messages on 2 tags.
            let plan: Vec<(usize, usize, u64, Vec<u8>)> = (0..nranks)
                .flat_map(|s| (0..nranks).map(move |d| (s, d)))
                .flat_map(|(s, d)| (0..4).map(move |k| (s, d, k % 2)))
                .map(|(s, d, t)| {
                    let len = rng.gen_range(0..64);
                    (s, d, t, (0..len).map(|_| rng.gen()).collect())
                })
                .collect();
            let delays: Vec<u64> = (0..nranks).map(|_| rng.gen_range(0..3)).collect();
            let plan = &plan;
            let got = run_ranks(nranks, quick(), |mut ep| {
                let me = ep.rank();
                thread::sleep(Duration::from_millis(delays[me]));
                let mut recvs = Vec::new();
                for (s, d, t, p) in plan {
                    if *d == me {
                        recvs.push((ep.post_recv(*s, *t, 64)?, p.clone()));
                    }
                }
                let mut sends = Vec::new();
                for (s, d, t, p) in plan {
                    if *s == me {
                        sends.push(ep.post_send(*d, *t, p.clone())?);
                    }
                }
                let mut ok = true;
                for (h, expect) in recvs {
                    ep.wait_all(&[h])?;
                    ok &= ep.take_payload(h)? == expect;
                }
                ep.wait_all(&sends)?;
                Ok(ok)
            }).unwrap();
            prop_assert!(got.into_iter().all(|ok| ok));
        }
    }
}
