//! Discrete-event core.
//!
//! Work is submitted as groups. A group names its member devices and starts
//! once every member has finished its previous group; all members are released
//! together `span` seconds later. Devices progress independently through their
//! own queues, so groups over disjoint device sets overlap in time.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivityKind {
    Compute,
    Comm,
}

impl ActivityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivityKind::Compute => "compute",
            ActivityKind::Comm => "comm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    pub device: usize,
    pub kind: ActivityKind,
    pub duration: f64,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub members: Vec<usize>,
    pub activities: Vec<Activity>,
    /// Lower bound on how long members stay occupied.
    pub min_span: f64,
    /// Marks the end of an iteration.
    pub barrier: bool,
}

impl Group {
    fn span(&self) -> f64 {
        self.activities
            .iter()
            .map(|a| a.duration)
            .fold(self.min_span, f64::max)
    }
}

/// An executed activity.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub start: f64,
    pub device: usize,
    pub kind: ActivityKind,
    pub duration: f64,
    pub bytes: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Start-ordered activity records.
    pub records: Vec<Record>,
    /// Release time of every barrier group, in submission order.
    pub barriers: Vec<f64>,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    device: usize,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct Engine {
    devices: usize,
    groups: Vec<Group>,
}

impl Engine {
    pub fn new(devices: usize) -> Self {
        Engine {
            devices,
            groups: Vec::new(),
        }
    }

    pub fn submit(&mut self, group: Group) {
        debug_assert!(group.members.iter().all(|&d| d < self.devices));
        debug_assert!(group.activities.iter().all(|a| group.members.contains(&a.device)));
        self.groups.push(group);
    }

    pub fn run(self) -> Outcome {
        let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); self.devices];
        for (g, group) in self.groups.iter().enumerate() {
            for &d in &group.members {
                queues[d].push_back(g);
            }
        }
        let mut arrived = vec![0usize; self.groups.len()];
        let mut barrier_at = vec![None; self.groups.len()];
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        for device in 0..self.devices {
            heap.push(Reverse(Event { time: 0.0, seq, device }));
            seq += 1;
        }
        let mut out = Outcome::default();
        while let Some(Reverse(ev)) = heap.pop() {
            out.end = out.end.max(ev.time);
            let Some(&g) = queues[ev.device].front() else {
                continue;
            };
            arrived[g] += 1;
            let group = &self.groups[g];
            if arrived[g] < group.members.len() {
                continue;
            }
            let span = group.span();
            for a in &group.activities {
                out.records.push(Record {
                    start: ev.time,
                    device: a.device,
                    kind: a.kind,
                    duration: a.duration,
                    bytes: a.bytes,
                });
            }
            if group.barrier {
                barrier_at[g] = Some(ev.time + span);
            }
            for &d in &group.members {
                queues[d].pop_front();
                heap.push(Reverse(Event {
                    time: ev.time + span,
                    seq,
                    device: d,
                }));
                seq += 1;
            }
        }
        debug_assert!(queues.iter().all(VecDeque::is_empty), "deadlocked program");
        out.barriers = barrier_at.into_iter().flatten().collect();
        out
    }
}
