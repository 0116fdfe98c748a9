//! Score predicted partitions against ground truth.
//!
//! Each ground-truth group greedily claims the predicted group with the
//! highest Jaccard overlap; matched pairs contribute true positives (the
//! intersection), false positives (predicted surplus), and false negatives
//! (missed parts), and unmatched predicted groups count fully as false
//! positives. Two averaging conventions are reported: per-set metrics
//! averaged over sets, and one metric over globally pooled counts. Run
//! with:
//!
//! ```text
//! cargo run --example evaluate_grouping
//! ```

use gfars::evalkit::{metrics, metrics_csv, set_counts, AveragingMode, Counts};

fn main() -> gfars::Result<()> {
    // worked example: one 5-part group predicted as 4 hits + 1 stray
    let gt = vec![vec![0, 1, 2, 3, 4], vec![5]];
    let pred = vec![vec![0, 1, 2, 3, 5], vec![4]];
    let counts = set_counts(&pred, &[], &gt)?;
    println!(
        "worked example: tp {}  fp {}  fn {}",
        counts.true_pos, counts.false_pos, counts.false_neg
    );
    let (p, r, _) = counts.prf();
    println!("  precision {p:.3}  recall {r:.3}\n");

    // three sets of varying difficulty: perfect, merged, fragmented
    let cases: Vec<(&str, Vec<Vec<u32>>, Vec<Vec<u32>>)> = vec![
        (
            "perfect",
            vec![vec![0, 1, 2], vec![3, 4]],
            vec![vec![0, 1, 2], vec![3, 4]],
        ),
        (
            "merged",
            vec![vec![0, 1, 2, 3, 4]],
            vec![vec![0, 1, 2], vec![3, 4]],
        ),
        (
            "fragmented",
            vec![vec![0, 1], vec![2], vec![3, 4]],
            vec![vec![0, 1, 2], vec![3, 4]],
        ),
    ];
    let mut scored: Vec<(String, Counts)> = Vec::new();
    for (name, pred, gt) in &cases {
        scored.push((name.to_string(), set_counts(pred, &[], gt)?));
    }
    let single = metrics(&scored, AveragingMode::SingleSetAvg)?;
    let overall = metrics(&scored, AveragingMode::Overall)?;
    println!(
        "single-set average:  precision {:.3}  recall {:.3}  f1 {:.3}",
        single.precision, single.recall, single.f1
    );
    println!(
        "overall (pooled):    precision {:.3}  recall {:.3}  f1 {:.3}",
        overall.precision, overall.recall, overall.f1
    );
    println!("\nper-set csv:\n{}", metrics_csv(&overall));
    Ok(())
}
