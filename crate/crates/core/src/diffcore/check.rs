use super::graph::{Graph, GraphError, NodeId};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Compares the backprop gradient of scalar `root` w.r.t. `leaf` against
/// central finite differences with step `epsilon`.
///
/// Returns the maximum over leaf entries of `|g − ĝ| / max(|g|, |ĝ|, 1e-6)`.
/// The leaf value is restored before returning.
pub fn finite_diff_check(
    graph: &mut Graph<f64>,
    leaf: NodeId,
    root: NodeId,
    epsilon: f64,
) -> Result<f64, GraphError> {
    debug_assert!((1e-7..=1e-3).contains(&epsilon), "epsilon outside [1e-7, 1e-3]");
    graph.evaluate(root)?;
    let analytic = graph
        .backprop(root)?
        .take(leaf)
        .ok_or(GraphError::NotEvaluated(leaf))?;
    let original = graph.value(leaf).ok_or(GraphError::NotEvaluated(leaf))?.clone();

    let mut worst: f64 = 0.0;
    for i in 0..original.len() {
        let mut probe = |delta: f64| -> Result<f64, GraphError> {
            let mut t = original.clone();
            t.data_mut()[i] += delta;
            graph.set_value(leaf, t);
            Ok(graph.evaluate(root)?.data()[0])
        };
        let plus = probe(epsilon)?;
        let minus = probe(-epsilon)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    graph.set_value(leaf, original);
    graph.evaluate(root)?;
    Ok(worst)
}
