//! Fixed slab cache for dynamically loaded experts.
//!
//! Every slab holds one expert. Entries carry a residency class and a
//! predictor-derived priority; only Resident entries in the Expired class can
//! be evicted, so a full cache of protected entries rejects new loads instead
//! of evicting something the pipeline still needs.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ExpertRef;

/// Default number of prediction steps a dropped candidate stays protected.
pub const DEFAULT_SPECULATIVE_GRACE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidencyClass {
    Required,
    Speculative,
    Expired,
}

impl ResidencyClass {
    fn strength(self) -> u8 {
        match self {
            ResidencyClass::Required => 2,
            ResidencyClass::Speculative => 1,
            ResidencyClass::Expired => 0,
        }
    }

    /// The more protective of two classes.
    pub fn stronger(self, other: Self) -> Self {
        if other.strength() > self.strength() {
            other
        } else {
            self
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResidencyClass::Required => "required",
            ResidencyClass::Speculative => "speculative",
            ResidencyClass::Expired => "expired",
        }
    }
}

impl fmt::Display for ResidencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SlabState {
    Free,
    Loading { ready: f64 },
    Resident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabEntry {
    pub key: Option<ExpertRef>,
    pub state: SlabState,
    pub class: ResidencyClass,
    pub priority: f64,
    /// Prediction step at which the entry was last requested or in window.
    pub last_predicted: u64,
    /// Monotone insertion stamp, used by FIFO eviction.
    pub inserted: u64,
}

impl SlabEntry {
    fn free() -> Self {
        Self {
            key: None,
            state: SlabState::Free,
            class: ResidencyClass::Expired,
            priority: 0.0,
            last_predicted: 0,
            inserted: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookup {
    Hit,
    InFlight { ready: f64 },
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadOutcome {
    AlreadyResident,
    Enqueued { slab: usize, evicted: Option<ExpertRef> },
    Rejected,
}

/// Victim order among evictable entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionOrder {
    /// Lowest priority first, then lower layer, then lower expert.
    #[default]
    Priority,
    /// Oldest insertion first.
    Fifo,
}

/// One row of the optional event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub time: f64,
    pub op: String,
    pub layer: usize,
    pub expert: usize,
    pub class: String,
    pub slab: Option<usize>,
    pub result: String,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    slabs: Vec<SlabEntry>,
    index: HashMap<ExpertRef, usize>,
    order: EvictionOrder,
    priority_decay: f64,
    step: u64,
    inserted: u64,
    now: f64,
    log: Option<Vec<CacheEvent>>,
}

impl CacheState {
    pub fn new(num_slabs: usize, order: EvictionOrder) -> Self {
        Self {
            slabs: vec![SlabEntry::free(); num_slabs],
            index: HashMap::new(),
            order,
            priority_decay: 1.0,
            step: 0,
            inserted: 0,
            now: 0.0,
            log: None,
        }
    }

    /// Scales the priority of every entry outside the lookahead window by
    /// `decay` at each prediction step, so stale scores rank below fresh ones.
    /// The default of 1 keeps the last score unchanged.
    pub fn with_priority_decay(mut self, decay: f64) -> Self {
        self.priority_decay = decay;
        self
    }

    /// Starts recording an event log.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn num_slabs(&self) -> usize {
        self.slabs.len()
    }

    pub fn slabs(&self) -> &[SlabEntry] {
        &self.slabs
    }

    /// Number of occupied (resident or loading) slabs.
    pub fn occupied(&self) -> usize {
        self.index.len()
    }

    pub fn entry(&self, key: ExpertRef) -> Option<&SlabEntry> {
        self.index.get(&key).map(|&s| &self.slabs[s])
    }

    /// Current prediction step, advanced by [`CacheState::reclassify`].
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sets the timestamp written to the event log.
    pub fn set_time(&mut self, now: f64) {
        self.now = now;
    }

    pub fn events(&self) -> &[CacheEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    fn record(&mut self, op: &str, key: ExpertRef, class: ResidencyClass, slab: Option<usize>, result: &str) {
        if let Some(log) = &mut self.log {
            log.push(CacheEvent {
                time: self.now,
                op: op.to_string(),
                layer: key.layer,
                expert: key.expert,
                class: class.as_str().to_string(),
                slab,
                result: result.to_string(),
            });
        }
    }

    pub fn lookup(&self, key: ExpertRef) -> Lookup {
        match self.index.get(&key).map(|&s| self.slabs[s].state) {
            Some(SlabState::Resident) => Lookup::Hit,
            Some(SlabState::Loading { ready }) => Lookup::InFlight { ready },
            _ => Lookup::Miss,
        }
    }

    /// Requests a slab for `key`, which becomes resident at `ready`.
    pub fn request_load(
        &mut self,
        key: ExpertRef,
        priority: f64,
        class: ResidencyClass,
        ready: f64,
    ) -> Result<LoadOutcome> {
        if class == ResidencyClass::Expired {
            return Err(Error::Contract(format!("load of {key} requested as expired")));
        }
        let step = self.step;
        if let Some(&s) = self.index.get(&key) {
            let e = &mut self.slabs[s];
            e.class = e.class.stronger(class);
            e.priority = priority;
            e.last_predicted = step;
            let c = e.class;
            self.record("request", key, c, Some(s), "already_resident");
            return Ok(LoadOutcome::AlreadyResident);
        }

        let (slab, evicted) = match self.slabs.iter().position(|e| e.state == SlabState::Free) {
            Some(s) => (s, None),
            None => match self.select_victim() {
                Some(s) => {
                    let old = self.slabs[s].key.expect("victim slab holds a key");
                    self.index.remove(&old);
                    (s, Some(old))
                }
                None => {
                    self.record("request", key, class, None, "rejected");
                    return Ok(LoadOutcome::Rejected);
                }
            },
        };
        if let Some(old) = evicted {
            self.record("evict", old, ResidencyClass::Expired, Some(slab), "evicted");
        }
        self.inserted += 1;
        self.slabs[slab] = SlabEntry {
            key: Some(key),
            state: SlabState::Loading { ready },
            class,
            priority,
            last_predicted: step,
            inserted: self.inserted,
        };
        self.index.insert(key, slab);
        self.record("request", key, class, Some(slab), "enqueued");
        Ok(LoadOutcome::Enqueued { slab, evicted })
    }

    /// The slab to evict next, if any entry is resident and Expired.
    pub fn select_victim(&self) -> Option<usize> {
        let candidates = self
            .slabs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.state == SlabState::Resident && e.class == ResidencyClass::Expired);
        match self.order {
            EvictionOrder::Priority => candidates
                .min_by(|(_, a), (_, b)| a.priority.total_cmp(&b.priority).then_with(|| a.key.cmp(&b.key)))
                .map(|(s, _)| s),
            EvictionOrder::Fifo => candidates.min_by_key(|(_, e)| e.inserted).map(|(s, _)| s),
        }
    }

    /// Marks every load with `ready <= now` as resident and returns the keys.
    pub fn complete_loads(&mut self, now: f64) -> Vec<ExpertRef> {
        let mut done = Vec::new();
        for s in 0..self.slabs.len() {
            if let SlabState::Loading { ready } = self.slabs[s].state {
                if ready <= now {
                    self.slabs[s].state = SlabState::Resident;
                    done.push((ready, s));
                }
            }
        }
        done.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keys: Vec<ExpertRef> = done
            .iter()
            .map(|&(_, s)| self.slabs[s].key.expect("loading slab holds a key"))
            .collect();
        for (&key, &(_, s)) in keys.iter().zip(&done) {
            let c = self.slabs[s].class;
            self.record("complete", key, c, Some(s), "resident");
        }
        keys
    }

    /// Moves a resident expert to Expired after its layer ran.
    pub fn mark_executed(&mut self, key: ExpertRef) -> Result<()> {
        let s = match self.index.get(&key) {
            Some(&s) if self.slabs[s].state == SlabState::Resident => s,
            _ => return Err(Error::Contract(format!("{key} executed but not resident"))),
        };
        self.slabs[s].class = ResidencyClass::Expired;
        self.record("executed", key, ResidencyClass::Expired, Some(s), "expired");
        Ok(())
    }

    /// Starts a new prediction step. Entries in `window` become Required with
    /// the given priority; others decay their priority, stay Speculative
    /// while within `grace` steps of their last prediction and become Expired
    /// after that.
    pub fn reclassify(&mut self, window: &[(ExpertRef, f64)], grace: u64) {
        self.step += 1;
        let step = self.step;
        let in_window: HashMap<ExpertRef, f64> = window.iter().copied().collect();
        for s in 0..self.slabs.len() {
            let Some(key) = self.slabs[s].key else { continue };
            let e = &mut self.slabs[s];
            if let Some(&p) = in_window.get(&key) {
                e.class = ResidencyClass::Required;
                e.priority = p;
                e.last_predicted = step;
            } else {
                e.priority *= self.priority_decay;
                e.class = if step - e.last_predicted <= grace {
                    ResidencyClass::Speculative
                } else {
                    ResidencyClass::Expired
                };
            }
        }
    }

    /// Writes the event log as CSV.
    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in self.events() {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Checks the index against slab contents.
    pub fn check_consistency(&self) -> Result<()> {
        let mut seen = 0;
        for (s, e) in self.slabs.iter().enumerate() {
            match (e.key, e.state) {
                (None, SlabState::Free) => {}
                (Some(k), SlabState::Loading { .. } | SlabState::Resident) => {
                    if self.index.get(&k) != Some(&s) {
                        return Err(Error::Contract(format!("index does not point {k} at slab {s}")));
                    }
                    seen += 1;
                }
                _ => return Err(Error::Contract(format!("slab {s} key and state disagree"))),
            }
        }
        if seen != self.index.len() {
            return Err(Error::Contract("index holds keys missing from slabs".into()));
        }
        Ok(())
    }
}
