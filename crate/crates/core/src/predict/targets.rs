use super::{Phase, RequestView};

/// Distance-decayed supervision target for the window after `layer`:
/// `g[e] = max over 1 <= d <= window of gamma^(d-1) * [e active at layer+d]`.
/// The window is truncated at the last layer; at the last layer the target
/// is all zero.
pub fn build_targets(view: &RequestView<'_>, phase: Phase, layer: usize, window: usize, gamma: f64) -> Vec<f64> {
    let trace = view.trace;
    let mut g = vec![0.0; trace.num_experts];
    for d in 1..=window {
        let l = layer + d;
        if l >= trace.num_layers {
            break;
        }
        let weight = gamma.powi(d as i32 - 1);
        for e in view.demand(phase, l) {
            if g[e] < weight {
                g[e] = weight;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::CompressionPlan;
    use crate::trace::tests::trace_from_routes;

    fn fixture() -> crate::trace::RoutingTrace {
        // Expert 0 at layers 1 and 3, expert 1 only at layer 3, expert 2 at 2.
        trace_from_routes(
            5,
            1,
            &[1.0],
            0,
            &[
                vec![vec![4]],
                vec![vec![0]],
                vec![vec![2]],
                vec![vec![0]],
                vec![vec![1]],
            ],
        )
    }

    #[test]
    fn decayed_target_examples() {
        let t = fixture();
        let plan = CompressionPlan::keep_all(&t);
        let view = RequestView::new(&t, &plan);
        let g = build_targets(&view, Phase::Prefill, 0, 3, 0.8);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[2], 0.8);
        assert_eq!(g[3], 0.0);
        assert_eq!(g[4], 0.0);
        // Expert active only at distance 3.
        let g = build_targets(&view, Phase::Prefill, 1, 3, 0.8);
        assert_eq!(g[1], 0.8 * 0.8);
    }

    #[test]
    fn last_layer_has_empty_window() {
        let t = fixture();
        let plan = CompressionPlan::keep_all(&t);
        let view = RequestView::new(&t, &plan);
        assert!(build_targets(&view, Phase::Prefill, 4, 5, 0.8)
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn shrinking_the_window_never_raises_a_target() {
        let t = fixture();
        let plan = CompressionPlan::keep_all(&t);
        let view = RequestView::new(&t, &plan);
        for w in 1..5 {
            let wide = build_targets(&view, Phase::Prefill, 0, w + 1, 0.5);
            let narrow = build_targets(&view, Phase::Prefill, 0, w, 0.5);
            assert!(narrow.iter().zip(&wide).all(|(n, w)| n <= w));
        }
    }
}
