//! Halo exchange over the message fabric.
//!
//! Two protocols fill the same one-site shell:
//!
//! * **Blocking**: three stages (X, then Y, then Z), two messages each. A
//!   stage waits for both of its messages before the next one packs, and
//!   later stages forward halo sites received earlier, so edges and corners
//!   arrive without being sent explicitly.
//! * **Non-blocking**: 26 messages (6 planes, 12 edges, 8 corners) sent
//!   directly to every neighbour. [`HaloExchanger::start`] posts everything
//!   and returns without waiting; [`HaloExchanger::end`] completes the
//!   receives, unpacks, then completes the sends.
//!
//! Buffers are packed in ascending (x, y, z) site order with all `m`
//! populations of a site contiguous.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::DistributionField;
use crate::topology::{CartesianTopology, Direction, HaloNeighbour, NeighbourTable};
use crate::transport::{Endpoint, RequestHandle};

/// Message ids per exchange; tags are `sequence * TAG_STRIDE + id`.
pub const TAG_STRIDE: u64 = 32;
const BLOCKING_ID_BASE: u64 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Blocking,
    Nonblocking,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Blocking, Strategy::Nonblocking];

    pub fn messages_per_exchange(self) -> usize {
        match self {
            Strategy::Blocking => 6,
            Strategy::Nonblocking => 26,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Blocking => "blocking",
            Strategy::Nonblocking => "nonblocking",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blocking" => Ok(Strategy::Blocking),
            "nonblocking" | "non-blocking" => Ok(Strategy::Nonblocking),
            other => Err(Error::Config(format!("unknown halo strategy '{other}'"))),
        }
    }
}

/// Groups of non-blocking messages, packed and posted in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Planes,
    Edges,
    Corners,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Planes, Group::Edges, Group::Corners];

    pub fn members(self) -> impl Iterator<Item = HaloNeighbour> {
        let order = match self {
            Group::Planes => 1,
            Group::Edges => 2,
            Group::Corners => 3,
        };
        HaloNeighbour::all().into_iter().filter(move |n| n.order() == order)
    }
}

/// Identity of one halo message within an exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HaloMessageId {
    Direct(HaloNeighbour),
    Stage { dim: usize, dir: Direction },
}

impl HaloMessageId {
    pub fn id(self) -> u64 {
        match self {
            HaloMessageId::Direct(n) => n.index() as u64,
            HaloMessageId::Stage { dim, dir } => BLOCKING_ID_BASE + 2 * dim as u64 + dir as u64,
        }
    }

    pub fn tag(self, sequence: u64) -> u64 {
        sequence * TAG_STRIDE + self.id()
    }
}

/// An axis-aligned box of sites, inclusive on both ends, in padded coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Region {
    pub fn sites(&self) -> usize {
        (0..3).map(|k| self.hi[k] + 1 - self.lo[k]).product()
    }

    pub fn contains(&self, s: [usize; 3]) -> bool {
        (0..3).all(|k| (self.lo[k]..=self.hi[k]).contains(&s[k]))
    }

    /// Interior sites a neighbour at displacement `d` needs from us.
    pub fn send_plane(dims: [usize; 3], d: [i64; 3]) -> Self {
        let mut r = Region { lo: [0; 3], hi: [0; 3] };
        for k in 0..3 {
            (r.lo[k], r.hi[k]) = match d[k] {
                -1 => (1, 1),
                1 => (dims[k], dims[k]),
                _ => (1, dims[k]),
            };
        }
        r
    }

    /// Halo sites filled by the neighbour at displacement `d`.
    pub fn halo_plane(dims: [usize; 3], d: [i64; 3]) -> Self {
        let mut r = Region { lo: [0; 3], hi: [0; 3] };
        for k in 0..3 {
            (r.lo[k], r.hi[k]) = match d[k] {
                -1 => (0, 0),
                1 => (dims[k] + 1, dims[k] + 1),
                _ => (1, dims[k]),
            };
        }
        r
    }

    // Axes exchanged in earlier stages span their halo too.
    fn stage(dims: [usize; 3], dim: usize, dir: Direction, halo: bool) -> Self {
        let mut r = Region { lo: [0; 3], hi: [0; 3] };
        for k in 0..3 {
            (r.lo[k], r.hi[k]) = if k == dim {
                let c = match (dir, halo) {
                    (Direction::Backward, false) => 1,
                    (Direction::Forward, false) => dims[k],
                    (Direction::Backward, true) => 0,
                    (Direction::Forward, true) => dims[k] + 1,
                };
                (c, c)
            } else if k < dim {
                (0, dims[k] + 1)
            } else {
                (1, dims[k])
            };
        }
        r
    }

    /// Sites a blocking stage sends toward `dir` along `dim`.
    pub fn stage_send(dims: [usize; 3], dim: usize, dir: Direction) -> Self {
        Self::stage(dims, dim, dir, false)
    }

    /// Halo sites a blocking stage fills from the neighbour toward `dir`.
    pub fn stage_halo(dims: [usize; 3], dim: usize, dir: Direction) -> Self {
        Self::stage(dims, dim, dir, true)
    }
}

/// Copies a region's populations into `out` in canonical order.
pub fn pack_region(field: &DistributionField, r: Region, out: &mut [f64]) {
    let run = (r.hi[2] + 1 - r.lo[2]) * field.m();
    let mut at = 0;
    for x in r.lo[0]..=r.hi[0] {
        for y in r.lo[1]..=r.hi[1] {
            let from = field.site_offset(x, y, r.lo[2]);
            out[at..at + run].copy_from_slice(&field.data()[from..from + run]);
            at += run;
        }
    }
}

pub fn unpack_region(buf: &[f64], r: Region, field: &mut DistributionField) {
    let run = (r.hi[2] + 1 - r.lo[2]) * field.m();
    let mut at = 0;
    for x in r.lo[0]..=r.hi[0] {
        for y in r.lo[1]..=r.hi[1] {
            let to = field.site_offset(x, y, r.lo[2]);
            field.data_mut()[to..to + run].copy_from_slice(&buf[at..at + run]);
            at += run;
        }
    }
}

fn to_bytes(buf: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(buf.len() * 8);
    for v in buf {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn from_bytes(bytes: &[u8], out: &mut [f64]) -> Result<()> {
    if bytes.len() != out.len() * 8 {
        return Err(Error::Config(format!(
            "halo payload of {} bytes does not fit a {}-double buffer",
            bytes.len(),
            out.len()
        )));
    }
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

/// Persistent staging arrays for both protocols.
#[derive(Debug, Clone)]
pub struct HaloBuffers {
    dims: [usize; 3],
    m: usize,
    /// Blocking stages, indexed `[dim][direction]`.
    pub stage_send: [[Vec<f64>; 2]; 3],
    pub stage_recv: [[Vec<f64>; 2]; 3],
    /// Non-blocking messages, indexed by [`HaloNeighbour`].
    pub send: Vec<Vec<f64>>,
    pub recv: Vec<Vec<f64>>,
    /// Which non-blocking receive buffers hold fresh data.
    pub received: [bool; 26],
}

impl HaloBuffers {
    pub fn new(dims: [usize; 3], m: usize) -> Self {
        let stage = |halo: bool| -> [[Vec<f64>; 2]; 3] {
            std::array::from_fn(|dim| {
                Direction::BOTH.map(|dir| {
                    let r = if halo {
                        Region::stage_halo(dims, dim, dir)
                    } else {
                        Region::stage_send(dims, dim, dir)
                    };
                    vec![0.0; r.sites() * m]
                })
            })
        };
        let direct = |halo: bool| -> Vec<Vec<f64>> {
            HaloNeighbour::all()
                .iter()
                .map(|n| {
                    let d = n.displacement();
                    let r = if halo {
                        Region::halo_plane(dims, d)
                    } else {
                        Region::send_plane(dims, d)
                    };
                    vec![0.0; r.sites() * m]
                })
                .collect()
        };
        Self {
            dims,
            m,
            stage_send: stage(false),
            stage_recv: stage(true),
            send: direct(false),
            recv: direct(true),
            received: [false; 26],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn check(&self, field: &DistributionField) -> Result<()> {
        if field.dims() != self.dims || field.m() != self.m {
            return Err(Error::Config(format!(
                "halo buffers sized for {:?} x {} but field is {:?} x {}",
                self.dims,
                self.m,
                field.dims(),
                field.m()
            )));
        }
        Ok(())
    }
}

/// Packs every message of one group into its send buffer.
pub fn pack_group(field: &DistributionField, group: Group, buffers: &mut HaloBuffers) -> Result<()> {
    buffers.check(field)?;
    for n in group.members() {
        let r = Region::send_plane(field.dims(), n.displacement());
        pack_region(field, r, &mut buffers.send[n.index()]);
    }
    Ok(())
}

/// Writes every freshly received non-blocking buffer into the halo shell.
pub fn unpack_halo_buffers(buffers: &mut HaloBuffers, field: &mut DistributionField) -> Result<()> {
    buffers.check(field)?;
    for n in HaloNeighbour::all() {
        if std::mem::take(&mut buffers.received[n.index()]) {
            let r = Region::halo_plane(field.dims(), n.displacement());
            unpack_region(&buffers.recv[n.index()], r, field);
        }
    }
    Ok(())
}

/// Where a halo site's value comes from: the neighbour rank and the site in
/// that rank's padded coordinates. `None` past an open boundary or for
/// interior sites.
pub fn halo_source(
    table: &NeighbourTable,
    dims: [usize; 3],
    site: [usize; 3],
) -> Option<(usize, [usize; 3])> {
    let mut d = [0i64; 3];
    let mut src = [0usize; 3];
    for k in 0..3 {
        (d[k], src[k]) = if site[k] == 0 {
            (-1, dims[k])
        } else if site[k] == dims[k] + 1 {
            (1, 1)
        } else {
            (0, site[k])
        };
    }
    let n = HaloNeighbour::from_displacement(d)?;
    table.get(n).map(|rank| (rank, src))
}

/// Counters exposed to the benchmark harness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExchangeStats {
    pub exchanges: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub bytes_sent: u64,
    /// Logical blocking points: 3 per blocking exchange, 1 per non-blocking one.
    pub barriers: u64,
}

/// An in-flight non-blocking exchange.
#[derive(Debug)]
pub struct PendingExchange {
    sequence: u64,
    dims: [usize; 3],
    m: usize,
    recv: [Option<RequestHandle>; 26],
    send: [Option<RequestHandle>; 26],
    finished: bool,
}

impl PendingExchange {
    pub fn sequence(&self) -> u64 {
        self.sequence
    }

    pub fn outstanding_receives(&self) -> Vec<HaloNeighbour> {
        (0..26)
            .filter(|&k| self.recv[k].is_some())
            .filter_map(HaloNeighbour::from_index)
            .collect()
    }
}

/// One rank's halo machinery: its endpoint, neighbours, buffers and counters.
#[derive(Debug)]
pub struct HaloExchanger {
    endpoint: Endpoint,
    table: NeighbourTable,
    buffers: HaloBuffers,
    sequence: u64,
    stats: ExchangeStats,
}

const STAGE_NAMES: [&str; 3] = ["X", "Y", "Z"];

impl HaloExchanger {
    pub fn new(
        endpoint: Endpoint,
        topo: &CartesianTopology,
        dims: [usize; 3],
        m: usize,
    ) -> Result<Self> {
        if topo.nranks() != endpoint.nranks() {
            return Err(Error::Config(format!(
                "topology has {} ranks but the fabric has {}",
                topo.nranks(),
                endpoint.nranks()
            )));
        }
        let table = topo.neighbour_table(endpoint.rank())?;
        Ok(Self {
            endpoint,
            table,
            buffers: HaloBuffers::new(dims, m),
            sequence: 0,
            stats: ExchangeStats::default(),
        })
    }

    pub fn rank(&self) -> usize {
        self.endpoint.rank()
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn neighbours(&self) -> &NeighbourTable {
        &self.table
    }

    pub fn buffers(&self) -> &HaloBuffers {
        &self.buffers
    }

    pub fn stats(&self) -> ExchangeStats {
        self.stats
    }

    /// Synchronises all ranks sharing this fabric.
    pub fn barrier(&self) -> Result<()> {
        self.endpoint.barrier()
    }

    fn next_sequence(&mut self) -> u64 {
        let s = self.sequence;
        self.sequence += 1;
        s
    }

    fn send(&mut self, dest: usize, tag: u64, buf: &[f64]) -> Result<RequestHandle> {
        let payload = to_bytes(buf);
        self.stats.messages_sent += 1;
        self.stats.bytes_sent += payload.len() as u64;
        self.endpoint.post_send(dest, tag, payload)
    }

    fn recv(&mut self, source: usize, tag: u64, doubles: usize) -> Result<RequestHandle> {
        self.stats.messages_received += 1;
        self.endpoint.post_recv(source, tag, doubles * 8)
    }

    pub fn exchange(&mut self, strategy: Strategy, field: &mut DistributionField) -> Result<()> {
        match strategy {
            Strategy::Blocking => self.exchange_blocking(field),
            Strategy::Nonblocking => {
                let mut token = self.start(field)?;
                self.end(&mut token, field)
            }
        }
    }

    /// Three-stage exchange with six messages and three waits.
    pub fn exchange_blocking(&mut self, field: &mut DistributionField) -> Result<()> {
        self.buffers.check(field)?;
        let dims = field.dims();
        let seq = self.next_sequence();
        for dim in 0..3 {
            for dir in Direction::BOTH {
                let r = Region::stage_send(dims, dim, dir);
                pack_region(field, r, &mut self.buffers.stage_send[dim][dir as usize]);
            }
            let mut recvs: [Option<RequestHandle>; 2] = [None; 2];
            for dir in Direction::BOTH {
                if let Some(src) = self.table.along(dir, dim) {
                    // The neighbour toward `dir` sent its message the other way.
                    let tag = HaloMessageId::Stage { dim, dir: dir.reverse() }.tag(seq);
                    let len = self.buffers.stage_recv[dim][dir as usize].len();
                    recvs[dir as usize] = Some(self.recv(src, tag, len)?);
                }
            }
            let mut handles: Vec<RequestHandle> = recvs.iter().flatten().copied().collect();
            for dir in Direction::BOTH {
                if let Some(dest) = self.table.along(dir, dim) {
                    let tag = HaloMessageId::Stage { dim, dir }.tag(seq);
                    let buf = std::mem::take(&mut self.buffers.stage_send[dim][dir as usize]);
                    let sent = self.send(dest, tag, &buf);
                    self.buffers.stage_send[dim][dir as usize] = buf;
                    handles.push(sent?);
                }
            }
            self.endpoint
                .wait_all(&handles)
                .map_err(|e| e.in_context(format!("blocked in {} stage", STAGE_NAMES[dim])))?;
            self.stats.barriers += 1;
            for dir in Direction::BOTH {
                if let Some(h) = recvs[dir as usize] {
                    let bytes = self.endpoint.take_payload(h)?;
                    let buf = &mut self.buffers.stage_recv[dim][dir as usize];
                    from_bytes(&bytes, buf)?;
                    unpack_region(buf, Region::stage_halo(dims, dim, dir), field);
                }
            }
        }
        self.stats.exchanges += 1;
        Ok(())
    }

    /// Posts all 26 receives, then packs and sends planes, edges and
    /// corners. Never waits.
    pub fn start(&mut self, field: &DistributionField) -> Result<PendingExchange> {
        self.buffers.check(field)?;
        let seq = self.next_sequence();
        let mut recv = [None; 26];
        for n in HaloNeighbour::all() {
            if let Some(src) = self.table.get(n) {
                let tag = HaloMessageId::Direct(n.opposite()).tag(seq);
                let len = self.buffers.recv[n.index()].len();
                recv[n.index()] = Some(self.recv(src, tag, len)?);
            }
        }
        let mut send = [None; 26];
        for group in Group::ALL {
            pack_group(field, group, &mut self.buffers)?;
            for n in group.members() {
                if let Some(dest) = self.table.get(n) {
                    let tag = HaloMessageId::Direct(n).tag(seq);
                    let buf = std::mem::take(&mut self.buffers.send[n.index()]);
                    let sent = self.send(dest, tag, &buf);
                    self.buffers.send[n.index()] = buf;
                    send[n.index()] = Some(sent?);
                }
            }
        }
        Ok(PendingExchange {
            sequence: seq,
            dims: field.dims(),
            m: field.m(),
            recv,
            send,
            finished: false,
        })
    }

    /// Completes every receive, unpacks the halo, then completes every send.
    pub fn end(&mut self, token: &mut PendingExchange, field: &mut DistributionField) -> Result<()> {
        if token.finished {
            return Err(Error::Usage(format!(
                "exchange {} has already been completed",
                token.sequence
            )));
        }
        if token.dims != field.dims() || token.m != field.m() {
            return Err(Error::Usage("end called with a different field than start".into()));
        }
        self.buffers.check(field)?;
        while token.recv.iter().any(Option::is_some) {
            let outstanding = token.outstanding_receives();
            let slots = token.recv;
            let k = self.endpoint.wait_any(&mut token.recv).map_err(|e| {
                let names: Vec<String> = outstanding.iter().map(|n| n.name()).collect();
                e.in_context(format!("non-blocking end, outstanding receives [{}]", names.join(", ")))
            })?;
            let h = slots[k].expect("wait_any returns a live slot");
            let bytes = self.endpoint.take_payload(h)?;
            from_bytes(&bytes, &mut self.buffers.recv[k])?;
            self.buffers.received[k] = true;
        }
        unpack_halo_buffers(&mut self.buffers, field)?;
        while token.send.iter().any(Option::is_some) {
            self.endpoint
                .wait_any(&mut token.send)
                .map_err(|e| e.in_context("non-blocking end, sends"))?;
        }
        token.finished = true;
        self.stats.barriers += 1;
        self.stats.exchanges += 1;
        Ok(())
    }
}
