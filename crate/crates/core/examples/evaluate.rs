//! Scores a few hand-written predictions with the answer, supporting-fact
//! and joint metrics.
//!
//!     cargo run --example evaluate

use std::collections::BTreeSet;

use s2g::corpus::{answer_scores, joint_metrics, sup_scores, MetricAccumulator};

fn facts(list: &[(&str, usize)]) -> BTreeSet<(String, usize)> {
    list.iter().map(|&(t, i)| (t.to_string(), i)).collect()
}

fn main() {
    let cases = [
        ("Port Moresby", "Port Moresby, Papua New Guinea", facts(&[("A", 0), ("B", 1)]), facts(&[("A", 0), ("B", 1)])),
        ("the Eiffel Tower", "Eiffel Tower", facts(&[("A", 0)]), facts(&[("A", 0), ("B", 2)])),
        ("yes", "no", facts(&[("A", 0), ("B", 0)]), facts(&[("A", 0), ("B", 0)])),
    ];
    let mut acc = MetricAccumulator::default();
    for (pred, gold, pred_sp, gold_sp) in &cases {
        let ans = answer_scores(pred, gold);
        let sup = sup_scores(pred_sp, gold_sp);
        let (jem, jf1) = joint_metrics(&ans, &sup);
        println!(
            "{pred:?} vs {gold:?}: ans EM {:.0} F1 {:.3} | sup EM {:.0} F1 {:.3} | joint EM {jem:.0} F1 {jf1:.3}",
            ans.em, ans.f1, sup.em, sup.f1
        );
        acc.add(&ans, &sup);
    }
    println!();
    for (name, value) in acc.report().rows() {
        if let Some(v) = value {
            println!("{name:<10} {v:.4}");
        }
    }
}
