//! FIFO transition storage with episode-aware H-step slicing and lazy reanalyze.
//!
//! Records carry a global sequence number that keeps increasing across
//! evictions. Persistence uses a little-endian binary layout described in
//! `docs/formats.md`.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::planner::PlanResult;

const MAGIC: &[u8; 8] = b"POMPCRB\0";
const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub plan_mean: Vec<f64>,
    pub plan_std: Vec<f64>,
    pub episode: u64,
    pub step: u64,
    pub done: bool,
}

/// `H` consecutive transitions of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    /// Sequence number of the first record.
    pub seq: u64,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    pub plan_mean: Vec<Vec<f64>>,
    pub plan_std: Vec<Vec<f64>>,
    /// Planner stats stored at the state after the last step, when that
    /// transition exists in the same episode.
    pub successor: Option<(Vec<f64>, Vec<f64>)>,
}

impl Slice {
    pub fn horizon(&self) -> usize {
        self.obs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    min_std: f64,
    max_std: f64,
    records: VecDeque<TransitionRecord>,
    next_seq: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize, min_std: f64, max_std: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config {
                key: "replay.capacity".into(),
                msg: "must be >= 1".into(),
            });
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            min_std,
            max_std,
            records: VecDeque::with_capacity(capacity.min(1 << 20)),
            next_seq: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sequence number the next pushed record will get.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    fn first_seq(&self) -> u64 {
        self.next_seq - self.records.len() as u64
    }

    pub fn get(&self, seq: u64) -> Option<&TransitionRecord> {
        let first = self.first_seq();
        if seq < first {
            return None;
        }
        self.records.get((seq - first) as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    fn check_stats(&self, mean: &[f64], std: &[f64]) -> Result<()> {
        check_len("plan mean", self.action_dim, mean.len())?;
        check_len("plan std", self.action_dim, std.len())?;
        if let Some(s) = std.iter().find(|s| !(**s >= self.min_std && **s <= self.max_std)) {
            return Err(Error::Replay(format!(
                "plan std {s} outside [{}, {}]",
                self.min_std, self.max_std
            )));
        }
        Ok(())
    }

    /// Appends a record, evicting the oldest when full. Returns its sequence number.
    pub fn push(&mut self, rec: TransitionRecord) -> Result<u64> {
        check_len("observation", self.obs_dim, rec.obs.len())?;
        check_len("next observation", self.obs_dim, rec.next_obs.len())?;
        check_len("action", self.action_dim, rec.action.len())?;
        self.check_stats(&rec.plan_mean, &rec.plan_std)?;
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
        self.next_seq += 1;
        Ok(self.next_seq - 1)
    }

    /// Overwrites the stored planner stats of one record.
    pub fn set_plan_stats(&mut self, seq: u64, mean: &[f64], std: &[f64]) -> Result<()> {
        self.check_stats(mean, std)?;
        let first = self.first_seq();
        let rec = seq
            .checked_sub(first)
            .and_then(|i| self.records.get_mut(i as usize))
            .ok_or_else(|| Error::Replay(format!("record {seq} is not in the buffer")))?;
        rec.plan_mean.copy_from_slice(mean);
        rec.plan_std.copy_from_slice(std);
        Ok(())
    }

    fn valid_start(&self, i: usize, h: usize) -> bool {
        let j = i + h - 1;
        if j >= self.records.len() {
            return false;
        }
        let (a, b) = (&self.records[i], &self.records[j]);
        a.episode == b.episode && b.step == a.step + (h as u64 - 1)
    }

    /// Offsets of every valid slice start.
    pub fn valid_starts(&self, h: usize) -> Vec<usize> {
        if h == 0 {
            return Vec::new();
        }
        (0..self.records.len()).filter(|&i| self.valid_start(i, h)).collect()
    }

    fn slice_at(&self, i: usize, h: usize) -> Slice {
        let recs = self.records.range(i..i + h);
        let mut s = Slice {
            seq: self.first_seq() + i as u64,
            obs: Vec::with_capacity(h),
            actions: Vec::with_capacity(h),
            rewards: Vec::with_capacity(h),
            next_obs: Vec::with_capacity(h),
            plan_mean: Vec::with_capacity(h),
            plan_std: Vec::with_capacity(h),
            successor: None,
        };
        for r in recs {
            s.obs.push(r.obs.clone());
            s.actions.push(r.action.clone());
            s.rewards.push(r.reward);
            s.next_obs.push(r.next_obs.clone());
            s.plan_mean.push(r.plan_mean.clone());
            s.plan_std.push(r.plan_std.clone());
        }
        let last = &self.records[i + h - 1];
        if let Some(n) = self.records.get(i + h) {
            if n.episode == last.episode && n.step == last.step + 1 {
                s.successor = Some((n.plan_mean.clone(), n.plan_std.clone()));
            }
        }
        s
    }

    /// Draws `n_b` slices uniformly over valid starts (with replacement).
    pub fn sample_slices<R: Rng + ?Sized>(&self, n_b: usize, h: usize, rng: &mut R) -> Result<Vec<Slice>> {
        if h == 0 || self.records.len() < h {
            return Err(Error::Replay(format!("no valid slice of length {h}")));
        }
        let span = self.records.len() - h + 1;
        let mut out = Vec::with_capacity(n_b);
        let mut fallback: Option<Vec<usize>> = None;
        for _ in 0..n_b {
            let mut pick = None;
            for _ in 0..64 {
                let i = rng.random_range(0..span);
                if self.valid_start(i, h) {
                    pick = Some(i);
                    break;
                }
            }
            let i = match pick {
                Some(i) => i,
                None => {
                    let starts = fallback.get_or_insert_with(|| self.valid_starts(h));
                    if starts.is_empty() {
                        return Err(Error::Replay(format!("no valid slice of length {h}")));
                    }
                    starts[rng.random_range(0..starts.len())]
                }
            };
            out.push(self.slice_at(i, h));
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.capacity as u64,
            self.obs_dim as u64,
            self.action_dim as u64,
            self.records.len() as u64,
            self.next_seq,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.min_std.to_le_bytes())?;
        w.write_all(&self.max_std.to_le_bytes())?;
        let mut row = Vec::with_capacity(self.record_width());
        let mut buf = Vec::with_capacity(self.record_width() * 8);
        for r in &self.records {
            row.clear();
            buf.clear();
            encode_record(r, &mut row);
            for x in &row {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Values per flattened record: obs, action, next obs, plan mean, plan
    /// std, then reward, episode, step, done.
    pub fn record_width(&self) -> usize {
        2 * self.obs_dim + 3 * self.action_dim + 4
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.obs_dim, self.action_dim)
    }

    pub fn std_bounds(&self) -> (f64, f64) {
        (self.min_std, self.max_std)
    }

    /// Every record flattened row-major, oldest first.
    pub fn record_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len() * self.record_width());
        for r in &self.records {
            encode_record(r, &mut out);
        }
        out
    }

    /// Inverse of [`ReplayBuffer::record_rows`].
    pub fn from_rows(
        capacity: usize,
        dims: (usize, usize),
        std_bounds: (f64, f64),
        next_seq: u64,
        rows: &[f64],
    ) -> Result<Self> {
        let mut buf = ReplayBuffer::new(capacity, dims.0, dims.1, std_bounds.0, std_bounds.1)?;
        let width = buf.record_width();
        if !rows.len().is_multiple_of(width) {
            return Err(Error::Format("replay rows do not divide the record width".into()));
        }
        let len = rows.len() / width;
        if len > capacity || len as u64 > next_seq {
            return Err(Error::Format("replay header is inconsistent".into()));
        }
        for row in rows.chunks_exact(width) {
            let rec = decode_record(row, dims.0, dims.1);
            buf.records.push_back(rec);
        }
        buf.next_seq = next_seq;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a replay buffer file".into()));
        }
        let mut u = [0u64; 6];
        for v in u.iter_mut() {
            *v = read_u64(r)?;
        }
        let [version, capacity, obs_dim, action_dim, len, next_seq] = u;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported replay version {version}")));
        }
        if len > capacity || len > next_seq {
            return Err(Error::Format("replay header is inconsistent".into()));
        }
        let min_std = read_f64(r)?;
        let max_std = read_f64(r)?;
        let mut buf = ReplayBuffer::new(capacity as usize, obs_dim as usize, action_dim as usize, min_std, max_std)?;
        let (o, a) = (obs_dim as usize, action_dim as usize);
        let mut vals = vec![0.0; buf.record_width()];
        for _ in 0..len {
            for v in vals.iter_mut() {
                *v = read_f64(r)?;
            }
            buf.records.push_back(decode_record(&vals, o, a));
        }
        buf.next_seq = next_seq;
        Ok(buf)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn encode_record(r: &TransitionRecord, out: &mut Vec<f64>) {
    let scalars = [r.reward, r.episode as f64, r.step as f64, if r.done { 1.0 } else { 0.0 }];
    for f in [&r.obs[..], &r.action, &r.next_obs, &r.plan_mean, &r.plan_std, &scalars] {
        out.extend_from_slice(f);
    }
}

fn decode_record(vals: &[f64], o: usize, a: usize) -> TransitionRecord {
    let mut it = vals.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let obs = take(o);
    let action = take(a);
    let next_obs = take(o);
    let plan_mean = take(a);
    let plan_std = take(a);
    let s = take(4);
    TransitionRecord {
        obs,
        action,
        reward: s[0],
        next_obs,
        plan_mean,
        plan_std,
        episode: s[1] as u64,
        step: s[2] as u64,
        done: s[3] != 0.0,
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReanalyzeReport {
    pub triggered: bool,
    pub written: usize,
    pub failures: usize,
}

/// Every `k` updates, re-plans from the first observation of the first
/// `n_b_r` slices and writes the new step-0 stats into both the batch and the
/// buffer. `replan` receives a raw observation and must plan from a zero warm
/// start. A failed re-plan leaves that slice untouched.
pub fn lazy_reanalyze<F>(
    buffer: &mut ReplayBuffer,
    batch: &mut [Slice],
    n_b_r: usize,
    k: usize,
    update_counter: u64,
    mut replan: F,
) -> ReanalyzeReport
where
    F: FnMut(&[f64]) -> Result<PlanResult>,
{
    let mut report = ReanalyzeReport::default();
    if k == 0 || !update_counter.is_multiple_of(k as u64) {
        return report;
    }
    report.triggered = true;
    for s in batch.iter_mut().take(n_b_r) {
        let res = match replan(&s.obs[0]) {
            Ok(r) if !r.fallback => r,
            _ => {
                report.failures += 1;
                continue;
            }
        };
        if buffer.set_plan_stats(s.seq, &res.mean[0], &res.std[0]).is_err() {
            report.failures += 1;
            continue;
        }
        s.plan_mean[0].clone_from(&res.mean[0]);
        s.plan_std[0].clone_from(&res.std[0]);
        report.written += 1;
    }
    report
}
