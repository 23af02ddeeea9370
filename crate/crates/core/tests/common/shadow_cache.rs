//! A map-based reference cache and a random-operation driver that compares
//! it against the slab cache step by step.

use std::collections::BTreeMap;

use moesim_core::cache::{CacheState, EvictionOrder, LoadOutcome, Lookup, ResidencyClass};
use moesim_core::trace::ExpertRef;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Entry {
    ready: f64,
    resident: bool,
    class: ResidencyClass,
    priority: f64,
    last: u64,
    seq: u64,
}

pub struct ShadowCache {
    capacity: usize,
    fifo: bool,
    decay: f64,
    map: BTreeMap<ExpertRef, Entry>,
    step: u64,
    seq: u64,
}

fn rank(c: ResidencyClass) -> u8 {
    match c {
        ResidencyClass::Required => 2,
        ResidencyClass::Speculative => 1,
        ResidencyClass::Expired => 0,
    }
}

impl ShadowCache {
    pub fn new(capacity: usize, fifo: bool, decay: f64) -> Self {
        Self {
            capacity,
            fifo,
            decay,
            map: BTreeMap::new(),
            step: 0,
            seq: 0,
        }
    }

    pub fn lookup(&self, key: ExpertRef) -> Lookup {
        match self.map.get(&key) {
            None => Lookup::Miss,
            Some(e) if e.resident => Lookup::Hit,
            Some(e) => Lookup::InFlight { ready: e.ready },
        }
    }

    pub fn class(&self, key: ExpertRef) -> Option<ResidencyClass> {
        self.map.get(&key).map(|e| e.class)
    }

    fn victim(&self) -> Option<ExpertRef> {
        let mut best: Option<(&ExpertRef, &Entry)> = None;
        for (k, e) in &self.map {
            if !e.resident || e.class != ResidencyClass::Expired {
                continue;
            }
            let better = match best {
                None => true,
                Some((bk, be)) => {
                    if self.fifo {
                        e.seq < be.seq
                    } else {
                        e.priority < be.priority || (e.priority == be.priority && k < bk)
                    }
                }
            };
            if better {
                best = Some((k, e));
            }
        }
        best.map(|(k, _)| *k)
    }

    /// Returns (rejected, evicted key).
    pub fn request(
        &mut self,
        key: ExpertRef,
        priority: f64,
        class: ResidencyClass,
        ready: f64,
    ) -> (bool, Option<ExpertRef>, bool) {
        let step = self.step;
        if let Some(e) = self.map.get_mut(&key) {
            if rank(class) > rank(e.class) {
                e.class = class;
            }
            e.priority = priority;
            e.last = step;
            return (false, None, true);
        }
        let mut evicted = None;
        if self.map.len() == self.capacity {
            match self.victim() {
                Some(v) => {
                    self.map.remove(&v);
                    evicted = Some(v);
                }
                None => return (true, None, false),
            }
        }
        self.seq += 1;
        self.map.insert(
            key,
            Entry {
                ready,
                resident: false,
                class,
                priority,
                last: step,
                seq: self.seq,
            },
        );
        (false, evicted, false)
    }

    pub fn complete(&mut self, now: f64) -> Vec<ExpertRef> {
        let mut done: Vec<(f64, ExpertRef)> = Vec::new();
        for (k, e) in self.map.iter_mut() {
            if !e.resident && e.ready <= now {
                e.resident = true;
                done.push((e.ready, *k));
            }
        }
        done.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        done.into_iter().map(|(_, k)| k).collect()
    }

    pub fn executed(&mut self, key: ExpertRef) -> bool {
        match self.map.get_mut(&key) {
            Some(e) if e.resident => {
                e.class = ResidencyClass::Expired;
                true
            }
            _ => false,
        }
    }

    pub fn reclassify(&mut self, window: &[(ExpertRef, f64)], grace: u64) {
        self.step += 1;
        for (k, e) in self.map.iter_mut() {
            if let Some(&(_, p)) = window.iter().find(|(w, _)| w == k) {
                e.class = ResidencyClass::Required;
                e.priority = p;
                e.last = self.step;
            } else {
                e.priority *= self.decay;
                if self.step - e.last <= grace {
                    e.class = ResidencyClass::Speculative;
                } else {
                    e.class = ResidencyClass::Expired;
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub ops: usize,
    pub evictions: usize,
    pub rejections: usize,
    pub hits: usize,
}

/// Runs `ops` random operations against both caches and reports the first
/// disagreement or safety violation.
pub fn fuzz_against_shadow(seed: u64, ops: usize) -> Result<FuzzStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FuzzStats::default();
    let mut done = 0;
    while done < ops {
        let slabs = rng.random_range(1..=8);
        let fifo = rng.random_bool(0.3);
        let order = if fifo {
            EvictionOrder::Fifo
        } else {
            EvictionOrder::Priority
        };
        let decay = [1.0, 0.5][rng.random_range(0..2)];
        let mut real = CacheState::new(slabs, order).with_priority_decay(decay);
        let mut shadow = ShadowCache::new(slabs, fifo, decay);
        let mut now = 0.0f64;
        for _ in 0..rng.random_range(50..400) {
            let key = ExpertRef::new(rng.random_range(0..4), rng.random_range(0..6));
            // Coarse priorities make ties common.
            let priority = rng.random_range(0..4) as f64 / 4.0;
            match rng.random_range(0..100) {
                0..=19 => {
                    let (a, b) = (real.lookup(key), shadow.lookup(key));
                    if a != b {
                        return Err(format!("lookup {key}: {a:?} vs {b:?}"));
                    }
                    stats.hits += usize::from(a == Lookup::Hit);
                }
                20..=54 => {
                    let class = if rng.random_bool(0.5) {
                        ResidencyClass::Required
                    } else {
                        ResidencyClass::Speculative
                    };
                    let ready = now + rng.random_range(0..4) as f64;
                    let before = real.slabs().to_vec();
                    let got = real
                        .request_load(key, priority, class, ready)
                        .map_err(|e| e.to_string())?;
                    let want = shadow.request(key, priority, class, ready);
                    let got_t = match got {
                        LoadOutcome::Rejected => (true, None, false),
                        LoadOutcome::AlreadyResident => (false, None, true),
                        LoadOutcome::Enqueued { evicted, .. } => (false, evicted, false),
                    };
                    if got_t != want {
                        return Err(format!("request {key}: {got:?} vs {want:?}"));
                    }
                    if let LoadOutcome::Enqueued {
                        slab,
                        evicted: Some(old),
                    } = got
                    {
                        let prev = &before[slab];
                        if prev.key != Some(old) || prev.class != ResidencyClass::Expired {
                            return Err(format!("evicted protected entry {old} ({:?})", prev.class));
                        }
                        stats.evictions += 1;
                    }
                    stats.rejections += usize::from(got == LoadOutcome::Rejected);
                }
                55..=69 => {
                    now += rng.random_range(0..3) as f64;
                    let (mut a, mut b) = (real.complete_loads(now), shadow.complete(now));
                    a.sort();
                    b.sort();
                    if a != b {
                        return Err(format!("complete at {now}: {a:?} vs {b:?}"));
                    }
                }
                70..=84 => {
                    let (a, b) = (real.mark_executed(key).is_ok(), shadow.executed(key));
                    if a != b {
                        return Err(format!("mark_executed {key}: {a} vs {b}"));
                    }
                }
                _ => {
                    let n = rng.random_range(0..4);
                    let mut window: Vec<(ExpertRef, f64)> = Vec::new();
                    for _ in 0..n {
                        let w = ExpertRef::new(rng.random_range(0..4), rng.random_range(0..6));
                        if !window.iter().any(|(k, _)| *k == w) {
                            window.push((w, rng.random_range(0..4) as f64 / 4.0));
                        }
                    }
                    let grace = rng.random_range(0..3);
                    real.reclassify(&window, grace);
                    shadow.reclassify(&window, grace);
                }
            }
            done += 1;
            if real.occupied() > slabs || shadow.len() != real.occupied() {
                return Err(format!(
                    "occupancy {} vs shadow {} (slabs {slabs})",
                    real.occupied(),
                    shadow.len()
                ));
            }
            real.check_consistency().map_err(|e| e.to_string())?;
            for s in real.slabs() {
                if let Some(k) = s.key {
                    if shadow.class(k) != Some(s.class) {
                        return Err(format!("class of {k}: {:?} vs {:?}", s.class, shadow.class(k)));
                    }
                }
            }
        }
    }
    stats.ops = done;
    Ok(stats)
}
