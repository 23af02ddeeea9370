use std::collections::VecDeque;

use super::{ExecutionPlan, LayerTiming, SimConfig, SimMode, SimReport};
use crate::cache::{CacheState, LoadOutcome, Lookup, ResidencyClass};
use crate::compress::CompressionPlan;
use crate::error::{Error, Result};
use crate::predict::{ExpertPredictor, Phase, RequestView};
use crate::trace::{ExpertRef, RoutingTrace};

/// Cache priority of an expert the running layer demands.
const DEMAND_PRIORITY: f64 = 1.0;

/// Where a demanded expert's weights come from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    Resident,
    /// Already moving; resident at the given time.
    InFlight(f64),
    /// Queued at layer start; resident at the given time.
    OnDemand(f64),
    /// Loaded once compute reaches it.
    Reactive,
    Cpu,
}

/// A predicted expert waiting for the channel.
#[derive(Debug, Clone, Copy)]
struct Prefetch {
    key: ExpertRef,
    priority: f64,
}

#[derive(Debug, Default)]
struct Counters {
    needs: usize,
    hits: usize,
    misses: usize,
    stalls: usize,
    on_demand: usize,
    prefetched: usize,
    inflight_waits: usize,
    rejected: usize,
    cpu_dispatches: usize,
}

struct Engine<'a> {
    view: RequestView<'a>,
    predictor: Option<&'a dyn ExpertPredictor>,
    cfg: &'a SimConfig,
    l_pinned: usize,
    xfer: f64,
    cache: CacheState,
    /// End of the last transfer handed to the channel.
    channel_free: f64,
    pending: VecDeque<Prefetch>,
    transfers: Vec<(f64, f64)>,
    busy: Vec<(f64, f64)>,
    cpu_busy: Vec<(f64, f64)>,
    cpu_free: f64,
    now: f64,
    window: Vec<(ExpertRef, f64)>,
    counters: Counters,
    rows: Vec<LayerTiming>,
}

pub(super) fn run(
    trace: &RoutingTrace,
    exec: &ExecutionPlan,
    plan: &CompressionPlan,
    predictor: Option<&dyn ExpertPredictor>,
    cfg: &SimConfig,
) -> Result<SimReport> {
    cfg.validate()?;
    if exec.num_layers != trace.num_layers || exec.num_experts != trace.num_experts {
        return Err(Error::Contract(
            "execution plan does not match the trace geometry".into(),
        ));
    }
    if cfg.mode == SimMode::Prefetch && predictor.is_none() {
        return Err(Error::Contract("prefetch mode needs a predictor".into()));
    }
    let mut engine = Engine {
        view: RequestView::new(trace, plan),
        predictor: if cfg.mode == SimMode::Prefetch { predictor } else { None },
        cfg,
        l_pinned: exec.l_pinned,
        xfer: cfg.transfer_time(),
        cache: CacheState::new(exec.num_slabs, cfg.eviction).with_priority_decay(cfg.priority_decay),
        channel_free: 0.0,
        pending: VecDeque::new(),
        transfers: Vec::new(),
        busy: Vec::new(),
        cpu_busy: Vec::new(),
        cpu_free: 0.0,
        now: 0.0,
        window: Vec::new(),
        counters: Counters::default(),
        rows: Vec::new(),
    };
    engine.run_all()
}

impl Engine<'_> {
    fn run_all(&mut self) -> Result<SimReport> {
        let trace = self.view.trace;
        let compressed = self.view.plan.keep.len() < self.view.plan.visual.len();
        let mut bootstrap = 0.0;
        if compressed {
            bootstrap += self.cfg.compression_latency;
        }
        if self.predictor.is_some() {
            bootstrap += self.cfg.predictor_latency;
        }
        // Host-side setup overlaps the pinned prefix: no prefetch before it
        // ends, and the first dynamic layer waits for it.
        self.channel_free = bootstrap;

        let steps = self.cfg.decode_steps.unwrap_or(usize::MAX).min(trace.decode_steps());
        let phases = std::iter::once(Phase::Prefill).chain((0..steps).map(Phase::Decode));
        let mut pass_ends = Vec::new();
        for (pass, phase) in phases.enumerate() {
            for layer in 0..trace.num_layers {
                if pass == 0 && layer == self.l_pinned {
                    self.now = self.now.max(bootstrap);
                }
                self.run_layer(pass, phase, layer)?;
            }
            pass_ends.push(self.now);
        }
        Ok(self.report(&pass_ends))
    }

    /// Starts every queued prefetch whose start time is before `until`.
    fn advance_channel(&mut self, until: f64) -> Result<()> {
        while let Some(&p) = self.pending.front() {
            let start = self.channel_free;
            if start >= until {
                break;
            }
            self.pending.pop_front();
            self.cache.set_time(start);
            self.cache.complete_loads(start);
            match self
                .cache
                .request_load(p.key, p.priority, ResidencyClass::Required, start + self.xfer)?
            {
                LoadOutcome::Enqueued { .. } => {
                    self.transfers.push((start, start + self.xfer));
                    self.channel_free = start + self.xfer;
                    self.counters.prefetched += 1;
                }
                LoadOutcome::AlreadyResident => {}
                LoadOutcome::Rejected => self.counters.rejected += 1,
            }
        }
        Ok(())
    }

    fn demand(&self, phase: Phase, layer: usize) -> Vec<usize> {
        let trace = self.view.trace;
        if layer < self.l_pinned && phase == Phase::Prefill {
            // The prefix runs before compression takes effect.
            trace
                .union_experts(layer, &trace.prefill_indices())
                .into_iter()
                .collect()
        } else {
            self.view.demand(phase, layer).into_iter().collect()
        }
    }

    fn run_layer(&mut self, pass: usize, phase: Phase, layer: usize) -> Result<()> {
        let t_start = self.now;
        let transfers_before = self.transfers.len();
        self.advance_channel(t_start)?;
        self.pending.clear();
        self.channel_free = self.channel_free.max(t_start);
        self.cache.set_time(t_start);
        self.cache.complete_loads(t_start);

        let demand = self.demand(phase, layer);
        let c = self.cfg.gpu_compute_per_expert;
        let shared = self.view.trace.shared_experts as f64 * c;
        let mut row = LayerTiming {
            pass,
            layer,
            start_ms: t_start,
            end_ms: t_start,
            stall_ms: 0.0,
            transfers: 0,
            hits: 0,
            cpu_dispatches: 0,
        };

        let mut executed = Vec::new();
        let t_end = if layer < self.l_pinned {
            let t = t_start + demand.len() as f64 * c + shared;
            self.compute(t_start, t);
            self.predict(phase, layer)?;
            t
        } else {
            let end = self.run_dynamic(layer, &demand, &mut row, &mut executed)?;
            self.predict(phase, layer)?;
            end
        };

        self.advance_channel(t_end)?;
        self.cache.set_time(t_end);
        self.cache.complete_loads(t_end);
        if layer + 1 >= self.l_pinned {
            let window = std::mem::take(&mut self.window);
            self.cache.reclassify(&window, self.cfg.speculative_grace);
            self.window = window;
        }
        for key in executed {
            self.cache.mark_executed(key)?;
        }
        self.now = t_end;
        row.end_ms = t_end;
        row.transfers = self.transfers.len() - transfers_before;
        self.rows.push(row);
        Ok(())
    }

    fn compute(&mut self, start: f64, end: f64) {
        if end > start {
            self.busy.push((start, end));
        }
    }

    /// Ranks experts for the next dynamic layer and queues the uncached top
    /// `B`. Inside the pinned prefix that is the first layer after it, as long
    /// as it lies within the lookahead window.
    fn predict(&mut self, phase: Phase, layer: usize) -> Result<()> {
        self.window.clear();
        let Some(predictor) = self.predictor else {
            return Ok(());
        };
        let target = (layer + 1).max(self.l_pinned);
        if target >= self.view.trace.num_layers || target - layer > self.cfg.predictor.window {
            return Ok(());
        }
        let scores = predictor.scores(&self.view, phase, layer)?;
        let top = crate::predict::predict_top_b(&scores, self.cfg.predictor.top_b);
        let priorities: Vec<f64> = scores.iter().map(|&s| predictor.priority(s)).collect();
        for e in top {
            let key = ExpertRef::new(target, e);
            let priority = priorities[e];
            self.window.push((key, priority));
            if self.cache.lookup(key) == Lookup::Miss {
                self.pending.push_back(Prefetch { key, priority });
            } else {
                self.cache
                    .request_load(key, priority, ResidencyClass::Required, self.now)?;
            }
        }
        Ok(())
    }

    fn run_dynamic(
        &mut self,
        layer: usize,
        demand: &[usize],
        row: &mut LayerTiming,
        executed: &mut Vec<ExpertRef>,
    ) -> Result<f64> {
        let t_start = self.now;
        let cfg = self.cfg;
        let hybrid = cfg.hybrid();
        self.counters.needs += demand.len();

        // Pin everything this layer needs before any load can evict it.
        for &e in demand {
            let key = ExpertRef::new(layer, e);
            if self.cache.entry(key).is_some() {
                self.cache
                    .request_load(key, DEMAND_PRIORITY, ResidencyClass::Required, t_start)?;
            }
        }

        let mut sources = Vec::with_capacity(demand.len());
        for &e in demand {
            let key = ExpertRef::new(layer, e);
            let source = match self.cache.lookup(key) {
                Lookup::Hit => Source::Resident,
                Lookup::InFlight { ready } if hybrid && ready - t_start > cfg.hybrid_threshold => Source::Cpu,
                Lookup::InFlight { ready } => Source::InFlight(ready),
                Lookup::Miss => {
                    let projected = self.channel_free.max(t_start) + self.xfer;
                    if hybrid && projected - t_start > cfg.hybrid_threshold {
                        Source::Cpu
                    } else if cfg.mode == SimMode::Reactive {
                        Source::Reactive
                    } else if self.load_on_demand(key, projected)? {
                        Source::OnDemand(projected)
                    } else {
                        Source::Cpu
                    }
                }
            };
            sources.push((key, source));
        }

        // The CPU path runs serially, concurrently with the GPU.
        let mut cpu_end = t_start;
        for _ in sources.iter().filter(|(_, s)| *s == Source::Cpu) {
            cpu_end = self.dispatch_cpu(t_start, row);
        }

        let mut t = t_start + self.view.trace.shared_experts as f64 * cfg.gpu_compute_per_expert;
        self.compute(t_start, t);
        for (key, source) in sources {
            let ready = match source {
                Source::Cpu => continue,
                Source::Resident => t_start,
                Source::InFlight(r) | Source::OnDemand(r) => r,
                Source::Reactive => {
                    let r = self.channel_free.max(t) + self.xfer;
                    if !self.load_on_demand(key, r)? {
                        cpu_end = cpu_end.max(self.dispatch_cpu(t, row));
                        continue;
                    }
                    r
                }
            };
            let waited = ready > t;
            match source {
                Source::Resident | Source::InFlight(_) if !waited => {
                    self.counters.hits += 1;
                    row.hits += 1;
                }
                Source::InFlight(_) => {
                    self.counters.inflight_waits += 1;
                    self.counters.misses += 1;
                }
                _ => self.counters.misses += 1,
            }
            if waited {
                self.counters.stalls += 1;
                row.stall_ms += ready - t;
                t = ready;
            }
            self.compute(t, t + cfg.gpu_compute_per_expert);
            t += cfg.gpu_compute_per_expert;
            executed.push(key);
        }
        Ok(t.max(cpu_end))
    }

    /// Runs one expert on the CPU no earlier than `earliest`; returns its end.
    fn dispatch_cpu(&mut self, earliest: f64, row: &mut LayerTiming) -> f64 {
        let start = self.cpu_free.max(earliest);
        let end = start + self.cfg.cpu_compute_per_expert;
        self.cpu_busy.push((start, end));
        self.cpu_free = end;
        self.counters.cpu_dispatches += 1;
        self.counters.misses += 1;
        row.cpu_dispatches += 1;
        end
    }

    /// Hands an on-demand transfer finishing at `ready` to the channel.
    /// Returns false when the cache rejected it and the CPU path takes over.
    fn load_on_demand(&mut self, key: ExpertRef, ready: f64) -> Result<bool> {
        match self
            .cache
            .request_load(key, DEMAND_PRIORITY, ResidencyClass::Required, ready)?
        {
            LoadOutcome::Enqueued { .. } => {
                self.transfers.push((ready - self.xfer, ready));
                self.channel_free = ready;
                self.counters.on_demand += 1;
                Ok(true)
            }
            LoadOutcome::AlreadyResident => Err(Error::Contract(format!("{key} loaded twice in one layer"))),
            LoadOutcome::Rejected => {
                self.counters.rejected += 1;
                if self.cfg.cpu_compute_per_expert.is_finite() {
                    Ok(false)
                } else {
                    Err(Error::Simulation(format!(
                        "no evictable slab for {key}; the cache ({} slabs) cannot hold one layer's demand",
                        self.cache.num_slabs()
                    )))
                }
            }
        }
    }

    fn report(&self, pass_ends: &[f64]) -> SimReport {
        let makespan = self.now;
        let mut compute: Vec<(f64, f64)> = self.busy.iter().chain(&self.cpu_busy).copied().collect();
        compute.sort_by(|a, b| a.0.total_cmp(&b.0));
        let compute = merge(compute);

        let mut exposed = 0.0;
        let mut overlapped = 0.0;
        for &(s, e) in &self.transfers {
            let e = e.min(makespan);
            if e <= s {
                continue;
            }
            let covered = covered_length(&compute, s, e);
            overlapped += covered;
            exposed += (e - s) - covered;
        }

        let c = &self.counters;
        SimReport {
            makespan,
            total_compute: self.busy.iter().map(|(s, e)| e - s).sum(),
            cpu_compute: self.cpu_busy.iter().map(|(s, e)| e - s).sum(),
            total_transfer: exposed + overlapped,
            exposed_transfer: exposed,
            overlapped_transfer: overlapped,
            needs: c.needs,
            hits: c.hits,
            misses: c.misses,
            stalls: c.stalls,
            on_demand_transfers: c.on_demand,
            prefetch_transfers: c.prefetched,
            inflight_waits: c.inflight_waits,
            rejected_loads: c.rejected,
            cpu_dispatches: c.cpu_dispatches,
            hit_rate: if c.needs == 0 {
                1.0
            } else {
                c.hits as f64 / c.needs as f64
            },
            prefill_ms: pass_ends[0],
            decode_ms_per_step: pass_ends.windows(2).map(|w| w[1] - w[0]).collect(),
            per_layer: self.rows.clone(),
        }
    }
}

/// Merges sorted intervals into disjoint ones.
fn merge(sorted: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Length of `[s, e]` covered by disjoint sorted `intervals`.
fn covered_length(intervals: &[(f64, f64)], s: f64, e: f64) -> f64 {
    let first = intervals.partition_point(|iv| iv.1 <= s);
    let mut total = 0.0;
    for &(a, b) in &intervals[first..] {
        if a >= e {
            break;
        }
        total += b.min(e) - a.max(s);
    }
    total
}
