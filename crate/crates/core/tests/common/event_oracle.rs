//! Exhaustive event-interleaving reference for the two-stream pipeline.
//!
//! The oracle knows nothing about the engine's layer-at-a-time structure.
//! It keeps a global state (compute stream, transfer channel, CPU, resident
//! set), enumerates every event enabled in that state, and explores each by
//! depth-first search. A branch survives only if it processes events in
//! time order and, among simultaneously enabled events, follows the tie
//! rules: transfer completions, then compute-stream events, then transfer
//! starts; the channel always serves the highest-priority available item
//! (on-demand loads in arrival order, then prefetches by rank). Every
//! surviving complete schedule must agree on the outcome.

use std::collections::{BTreeMap, BTreeSet};

pub type Key = (usize, usize);

#[derive(Debug, Clone)]
pub struct Scenario {
    pub num_layers: usize,
    pub num_experts: usize,
    pub l_pinned: usize,
    pub shared: i64,
    /// demand[pass][layer]; pass 0 is prefill.
    pub demand: Vec<Vec<BTreeSet<usize>>>,
    /// Predictor scores per [pass][layer][expert]; `None` means reactive.
    pub scores: Option<Vec<Vec<Vec<f64>>>>,
    pub top_b: usize,
    /// Lookahead window; bounds how early the prefix prefetches.
    pub window: usize,
    pub transfer: i64,
    pub compute: i64,
    /// CPU cost and threshold; `None` disables the CPU path.
    pub cpu: Option<(i64, i64)>,
    pub bootstrap: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub makespan: i64,
    pub hits: usize,
    pub misses: usize,
    pub stalls: usize,
    pub cpu_dispatches: usize,
    pub on_demand: usize,
    pub prefetched: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Resident,
    InFlight,
    Queued,
    Reactive,
}

#[derive(Debug, Clone)]
struct QueueItem {
    key: Key,
    available: i64,
    prefetch: bool,
    /// Arrival order for on-demand loads, rank for prefetches.
    order: usize,
}

#[derive(Debug, Clone)]
struct State {
    unit: usize,
    running: Option<Vec<(Key, Origin)>>,
    next: usize,
    comp_t: i64,
    layer_cpu_end: i64,
    cpu_t: i64,
    chan_free: i64,
    in_flight: Option<(Key, i64)>,
    queue: Vec<QueueItem>,
    arrivals: usize,
    loaded: BTreeMap<Key, i64>,
    started: BTreeMap<Key, i64>,
    last_time: i64,
    out: Outcome,
}

#[derive(Debug, Clone)]
enum Event {
    TransferEnd,
    LayerStart,
    Issue,
    Run,
    LayerEnd,
    TransferStart(usize),
}

impl Event {
    fn class(&self) -> u8 {
        match self {
            Event::TransferEnd => 0,
            Event::LayerStart | Event::Issue | Event::Run | Event::LayerEnd => 1,
            Event::TransferStart(_) => 2,
        }
    }
}

fn top_b(scores: &[f64], b: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    // Selection by repeated maximum, ties to the lower id.
    let mut out = Vec::new();
    while out.len() < b && !ids.is_empty() {
        let mut best = 0;
        for i in 1..ids.len() {
            if scores[ids[i]] > scores[ids[best]] {
                best = i;
            }
        }
        out.push(ids.remove(best));
    }
    out
}

impl Scenario {
    fn units(&self) -> usize {
        self.demand.len() * self.num_layers
    }

    fn unit(&self, u: usize) -> (usize, usize) {
        (u / self.num_layers, u % self.num_layers)
    }

    fn enabled(&self, s: &State) -> Vec<(i64, Event)> {
        let mut ev = Vec::new();
        if let Some((_, end)) = s.in_flight {
            ev.push((end, Event::TransferEnd));
        }
        match &s.running {
            None if s.unit < self.units() => {
                // The first dynamic layer of prefill waits for host-side setup.
                let gate = if s.unit == self.l_pinned && self.l_pinned < self.num_layers {
                    self.bootstrap
                } else {
                    0
                };
                ev.push((s.comp_t.max(gate), Event::LayerStart))
            }
            None => {}
            Some(list) if s.next < list.len() => {
                let key = list[s.next].0;
                if let Some(&t) = s.loaded.get(&key) {
                    ev.push((s.comp_t.max(t), Event::Run));
                } else if !s.started.contains_key(&key) && !s.queue.iter().any(|q| q.key == key) {
                    ev.push((s.comp_t, Event::Issue));
                }
            }
            Some(_) => ev.push((s.comp_t.max(s.layer_cpu_end), Event::LayerEnd)),
        }
        if s.in_flight.is_none() {
            for (i, q) in s.queue.iter().enumerate() {
                ev.push((s.chan_free.max(q.available), Event::TransferStart(i)));
            }
        }
        ev
    }

    fn consistent(&self, s: &State, time: i64, event: &Event, all: &[(i64, Event)]) -> bool {
        if time < s.last_time {
            return false;
        }
        let key = (time, event.class());
        if all.iter().any(|(t, e)| (*t, e.class()) < key) {
            return false;
        }
        if let Event::TransferStart(i) = event {
            let me = &s.queue[*i];
            let rank = |q: &QueueItem| (q.prefetch, q.order);
            if s.queue.iter().any(|q| q.available <= time && rank(q) < rank(me)) {
                return false;
            }
        }
        true
    }

    fn apply(&self, s: &mut State, time: i64, event: &Event) {
        s.last_time = time;
        match *event {
            Event::TransferEnd => {
                let (key, end) = s.in_flight.take().unwrap();
                s.loaded.insert(key, end);
            }
            Event::TransferStart(i) => {
                let item = s.queue.remove(i);
                let end = time + self.transfer;
                s.started.insert(item.key, end);
                s.in_flight = Some((item.key, end));
                s.chan_free = end;
                if item.prefetch {
                    s.out.prefetched += 1;
                } else {
                    s.out.on_demand += 1;
                }
            }
            Event::Issue => {
                let key = s.running.as_ref().unwrap()[s.next].0;
                s.queue.push(QueueItem {
                    key,
                    available: time,
                    prefetch: false,
                    order: s.arrivals,
                });
                s.arrivals += 1;
            }
            Event::Run => {
                let (key, origin) = s.running.as_ref().unwrap()[s.next];
                let ready = s.loaded[&key];
                let waited = ready > s.comp_t;
                match origin {
                    Origin::Resident => s.out.hits += 1,
                    Origin::InFlight if !waited => s.out.hits += 1,
                    _ => s.out.misses += 1,
                }
                if waited {
                    s.out.stalls += 1;
                }
                s.comp_t = time + self.compute;
                s.next += 1;
            }
            Event::LayerEnd => {
                s.comp_t = time;
                s.running = None;
                s.unit += 1;
                s.out.makespan = time;
            }
            Event::LayerStart => self.layer_start(s, time),
        }
    }

    fn layer_start(&self, s: &mut State, t: i64) {
        let (pass, layer) = self.unit(s.unit);
        s.queue.retain(|q| !q.prefetch);
        let demand = &self.demand[pass][layer];
        s.next = 0;
        s.layer_cpu_end = t;
        if layer < self.l_pinned {
            s.comp_t = t + (demand.len() as i64 + self.shared) * self.compute;
            s.running = Some(Vec::new());
        } else {
            s.comp_t = t + self.shared * self.compute;
            let mut list = Vec::new();
            let mut queued = 0;
            let mut cpu_jobs = 0;
            for &e in demand {
                let key = (layer, e);
                let (origin, wait) = if s.loaded.contains_key(&key) {
                    (Origin::Resident, 0)
                } else if let Some(&end) = s.started.get(&key) {
                    (Origin::InFlight, end - t)
                } else {
                    let busy_until = s.in_flight.map_or(t, |(_, end)| end.max(t));
                    let ready = busy_until + (queued + 1) * self.transfer;
                    let origin = if self.scores.is_some() {
                        Origin::Queued
                    } else {
                        Origin::Reactive
                    };
                    (origin, ready - t)
                };
                if let Some((_, tau)) = self.cpu {
                    if origin != Origin::Resident && wait > tau {
                        cpu_jobs += 1;
                        continue;
                    }
                }
                if origin == Origin::Queued {
                    s.queue.push(QueueItem {
                        key,
                        available: t,
                        prefetch: false,
                        order: s.arrivals,
                    });
                    s.arrivals += 1;
                    queued += 1;
                }
                list.push((key, origin));
            }
            if let Some((cost, _)) = self.cpu {
                for _ in 0..cpu_jobs {
                    s.cpu_t = s.cpu_t.max(t) + cost;
                    s.layer_cpu_end = s.cpu_t;
                    s.out.cpu_dispatches += 1;
                    s.out.misses += 1;
                }
            }
            s.running = Some(list);
        }
        if let Some(scores) = &self.scores {
            let target = (layer + 1).max(self.l_pinned);
            if target < self.num_layers && target - layer <= self.window {
                for (rank, e) in top_b(&scores[pass][layer], self.top_b).into_iter().enumerate() {
                    let key = (target, e);
                    if !s.loaded.contains_key(&key) && !s.started.contains_key(&key) {
                        s.queue.push(QueueItem {
                            key,
                            available: t,
                            prefetch: true,
                            order: rank,
                        });
                    }
                }
            }
        }
    }

    fn explore(&self, s: State, results: &mut Vec<Outcome>, nodes: &mut usize) {
        *nodes += 1;
        assert!(*nodes < 1_000_000, "event search exploded");
        let all = self.enabled(&s);
        if all.is_empty() {
            assert!(s.unit == self.units(), "deadlock at unit {}", s.unit);
            results.push(s.out.clone());
            return;
        }
        for (time, event) in &all {
            if self.consistent(&s, *time, event, &all) {
                let mut next = s.clone();
                self.apply(&mut next, *time, event);
                self.explore(next, results, nodes);
            }
        }
    }

    /// The unique outcome consistent with the event rules.
    pub fn solve(&self) -> Outcome {
        let start = State {
            unit: 0,
            running: None,
            next: 0,
            comp_t: 0,
            layer_cpu_end: 0,
            cpu_t: 0,
            chan_free: self.bootstrap,
            in_flight: None,
            queue: Vec::new(),
            arrivals: 0,
            loaded: BTreeMap::new(),
            started: BTreeMap::new(),
            last_time: 0,
            out: Outcome {
                makespan: 0,
                hits: 0,
                misses: 0,
                stalls: 0,
                cpu_dispatches: 0,
                on_demand: 0,
                prefetched: 0,
            },
        };
        let mut results = Vec::new();
        let mut nodes = 0;
        self.explore(start, &mut results, &mut nodes);
        assert!(!results.is_empty(), "no consistent schedule");
        assert!(
            results.iter().all(|r| *r == results[0]),
            "schedules disagree: {results:?}"
        );
        results.swap_remove(0)
    }
}
