//! Random small pipeline scenarios, runnable both on the engine and on the
//! event oracle.

use std::collections::BTreeSet;

use moesim_core::compress::CompressionPlan;
use moesim_core::pipeline::{
    simulate, simulate_hybrid, simulate_reactive, ExecutionPlan, MemoryBudget, SimConfig, SimReport,
};
use moesim_core::predict::{ExpertPredictor, Phase, PredictorSpec, RequestView};
use moesim_core::trace::{Modality, Route, RoutingTrace, Token};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::event_oracle::{Outcome, Scenario};

/// Replays a fixed score table.
pub struct TablePredictor(pub Vec<Vec<Vec<f64>>>);

impl ExpertPredictor for TablePredictor {
    fn name(&self) -> &'static str {
        "table"
    }

    fn scores(&self, _view: &RequestView<'_>, phase: Phase, layer: usize) -> moesim_core::Result<Vec<f64>> {
        let pass = match phase {
            Phase::Prefill => 0,
            Phase::Decode(s) => s + 1,
        };
        Ok(self.0[pass][layer].clone())
    }
}

pub struct Case {
    pub trace: RoutingTrace,
    pub scenario: Scenario,
    pub cfg: SimConfig,
    pub label: String,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_experts = 4;
    let l_pinned = rng.random_range(0..=2);
    let num_layers = l_pinned + rng.random_range(1..=3);
    let k = rng.random_range(1..=2);
    let prompt = rng.random_range(1..=4);
    let decode = rng.random_range(0..=2);
    let n = prompt + decode;

    let tokens: Vec<Token> = (0..n)
        .map(|i| Token {
            id: i as u64,
            modality: if i < prompt { Modality::Visual } else { Modality::Text },
            saliency: if i < prompt { 1.0 } else { 0.0 },
            embedding: vec![0.0],
            cluster: None,
        })
        .collect();
    let routes: Vec<Vec<Route>> = (0..num_layers)
        .map(|_| {
            (0..n)
                .map(|_| Route {
                    experts: index::sample(&mut rng, num_experts, k).into_vec(),
                    gates: vec![1.0 / k as f64; k],
                })
                .collect()
        })
        .collect();
    let shared = rng.random_range(0..=1);
    let trace = RoutingTrace {
        num_layers,
        num_experts,
        top_k: k,
        embed_dim: 1,
        shared_experts: shared,
        seed,
        tokens,
        routes,
        phase_marks: (prompt..n).collect(),
    };
    assert!(trace.validate().is_empty());

    let pass_tokens: Vec<Vec<usize>> = std::iter::once((0..prompt).collect())
        .chain((prompt..n).map(|t| vec![t]))
        .collect();
    let demand: Vec<Vec<BTreeSet<usize>>> = pass_tokens
        .iter()
        .map(|toks| {
            (0..num_layers)
                .map(|l| toks.iter().flat_map(|&t| trace.routes[l][t].experts.clone()).collect())
                .collect()
        })
        .collect();

    let mode = rng.random_range(0..4);
    let predictive = mode == 0 || mode == 2;
    let hybrid = mode >= 2;
    let transfer = [0, 1, 3, 10][rng.random_range(0..4)];
    let compute = rng.random_range(0..=3);
    let cpu = [1, 4, 6][rng.random_range(0..3)];
    let tau = [0, 2, 5][rng.random_range(0..3)];
    let bootstrap = [0, 3][rng.random_range(0..2)];
    let top_b = rng.random_range(0..=4);
    let window = rng.random_range(1..=3);
    // Quarter steps make ties between scores common.
    let scores: Vec<Vec<Vec<f64>>> = (0..pass_tokens.len())
        .map(|_| {
            (0..num_layers)
                .map(|_| (0..num_experts).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
                .collect()
        })
        .collect();

    let cfg = SimConfig {
        bandwidth: if transfer == 0 { f64::INFINITY } else { 1.0 },
        expert_size: if transfer == 0 { 1.0 } else { transfer as f64 },
        gpu_compute_per_expert: compute as f64,
        cpu_compute_per_expert: if hybrid { cpu as f64 } else { f64::INFINITY },
        memory: MemoryBudget {
            m_avail: 1e9,
            c_safe: 1e3,
            static_resident: 0.0,
        },
        l_semantic: l_pinned,
        num_slabs: Some(64),
        compression_latency: 0.0,
        predictor_latency: bootstrap as f64,
        predictor: PredictorSpec {
            top_b,
            window,
            ..Default::default()
        },
        ..Default::default()
    };
    let scenario = Scenario {
        num_layers,
        num_experts,
        l_pinned,
        shared: shared as i64,
        demand,
        scores: predictive.then_some(scores),
        top_b,
        window,
        transfer,
        compute,
        cpu: hybrid.then_some((cpu, tau)),
        bootstrap: if predictive { bootstrap } else { 0 },
    };
    let label = format!(
        "seed {seed}: L={num_layers} pinned={l_pinned} k={k} passes={} mode={} T={transfer} C={compute} B={top_b} W={window}",
        1 + decode,
        ["prefetch", "reactive", "hybrid-prefetch", "hybrid-reactive"][mode]
    );
    Case {
        trace,
        scenario,
        cfg,
        label,
    }
}

pub fn run_engine(case: &Case) -> SimReport {
    let exec = ExecutionPlan::new(&case.trace, &case.cfg).unwrap();
    let plan = CompressionPlan::keep_all(&case.trace);
    let s = &case.scenario;
    let predictor = s.scores.clone().map(TablePredictor);
    match (&predictor, s.cpu) {
        (Some(p), None) => simulate(&case.trace, &exec, &plan, p, &case.cfg),
        (None, None) => simulate_reactive(&case.trace, &exec, &plan, &case.cfg),
        (p, Some((_, tau))) => simulate_hybrid(
            &case.trace,
            &exec,
            &plan,
            p.as_ref().map(|p| p as &dyn ExpertPredictor),
            &case.cfg,
            tau as f64,
        ),
    }
    .unwrap()
}

/// The engine's report reduced to the oracle's outcome fields.
pub fn engine_outcome(r: &SimReport) -> Outcome {
    assert_eq!(r.makespan.fract(), 0.0, "integer durations give integer times");
    Outcome {
        makespan: r.makespan as i64,
        hits: r.hits,
        misses: r.misses,
        stalls: r.stalls,
        cpu_dispatches: r.cpu_dispatches,
        on_demand: r.on_demand_transfers,
        prefetched: r.prefetch_transfers,
    }
}
