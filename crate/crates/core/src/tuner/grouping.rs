//! Parameter grouping: per leaf, near-equal values are tied to one shared
//! trainable parameter.

use serde::Serialize;

use crate::expr::{CombinerOp, Expression, Leaf};

/// Single-linkage clusters of `values` at merge height `eta`, as sorted
/// lists of positions into `values`. Clusters are ordered by their smallest
/// value.
pub fn single_linkage(values: &[f64], eta: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        let v = values[i];
        match prev {
            Some(p) if eta > 0.0 && v - p <= eta => clusters.last_mut().expect("open cluster").push(i),
            _ => clusters.push(vec![i]),
        }
        prev = Some(v);
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters
}

/// Clusters of coordinate indices for one leaf.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LeafGroups {
    pub alpha: Vec<Vec<usize>>,
    /// Empty for product leaves, whose single weight is never grouped.
    pub weight: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GroupingPlan {
    pub leaves: Vec<LeafGroups>,
}

impl GroupingPlan {
    pub fn shared_parameters(&self) -> usize {
        self.leaves.iter().map(|l| l.alpha.len() + l.weight.len()).sum()
    }
}

/// Groups each leaf's α values (and the weights of sum leaves) and returns
/// the plan plus a re-tied copy of `expr` whose shared parameters start at
/// their cluster means. Slots already sharing one parameter are clustered as
/// a single value, so regrouping with the same `eta` is a no-op.
pub fn group_parameters(expr: &Expression, eta: f64) -> (GroupingPlan, Expression) {
    let old = expr.params();
    let mut params = Vec::new();
    let mut leaves = Vec::with_capacity(expr.leaves().len());
    let mut plan = GroupingPlan::default();
    for leaf in expr.leaves() {
        let (alpha, alpha_groups) = regroup(&leaf.alpha, old, eta, &mut params);
        let (weight, weight_groups) = match leaf.combiner {
            CombinerOp::Sum => regroup(&leaf.weight, old, eta, &mut params),
            CombinerOp::Product => {
                params.push(old[leaf.weight[0]]);
                (vec![params.len() - 1], Vec::new())
            }
        };
        params.push(old[leaf.bias]);
        let bias = params.len() - 1;
        leaves.push(Leaf {
            combiner: leaf.combiner,
            unary: leaf.unary,
            alpha,
            weight,
            bias,
        });
        plan.leaves.push(LeafGroups {
            alpha: alpha_groups,
            weight: weight_groups,
        });
    }
    let lambda = expr.lambda().map(|l| {
        params.push(l);
        params.len() - 1
    });
    let mut grouped = expr.clone();
    grouped.retie(leaves, params, lambda);
    (plan, grouped)
}

/// Clusters the distinct parameters behind `slots`; returns the new slot →
/// parameter map and the clusters expressed as slot positions.
fn regroup(slots: &[usize], old: &[f64], eta: f64, params: &mut Vec<f64>) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut distinct: Vec<usize> = Vec::new();
    for &s in slots {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    let values: Vec<f64> = distinct.iter().map(|&i| old[i]).collect();
    let clusters = single_linkage(&values, eta);
    let mut map = vec![0usize; slots.len()];
    let mut groups = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let mean = cluster.iter().map(|&k| values[k]).sum::<f64>() / cluster.len() as f64;
        params.push(mean);
        let idx = params.len() - 1;
        let mut members = Vec::new();
        for (pos, s) in slots.iter().enumerate() {
            if cluster.iter().any(|&k| distinct[k] == *s) {
                map[pos] = idx;
                members.push(pos);
            }
        }
        groups.push(members);
    }
    groups.sort_by_key(|g| g[0]);
    (map, groups)
}
