#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use eipl_core::corpus::{load_question_dir, LoadOptions, Question};
use eipl_core::evaluation::ConfusionMatrix;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn bank() -> BTreeMap<String, Question> {
    load_question_dir(&repo_root().join("data/questions"), LoadOptions::default()).expect("bundled bank loads")
}

pub const STEPWISE_EXPLANATION: &str = "input is values with array and length. initially set x to zero, and use for loop to set start i from zero and smaller than length, increasing by 1 for i each run. If values are bigger than zero, then x plus equal values. it will return to x at end.";
pub const SUMMARY_EXPLANATION: &str = "sums all positive numbers in the array.";

/// Metrics recomputed from an expanded list of (gold, predicted) items with
/// plain counting loops. Gold 0 = multi-structural, 1 = relational,
/// 2 = incorrect; predictions are 0 or 1.
#[derive(Debug, Clone, Copy)]
pub struct NaiveMetrics {
    pub p_o: f64,
    pub p_e: f64,
    pub kappa: f64,
    /// indexed by positive class
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub macro_f1: f64,
}

pub fn expand(m: &ConfusionMatrix) -> Vec<(u8, u8)> {
    let mut items = Vec::new();
    for (gold, pred, count) in [(0, 0, m.mm), (0, 1, m.mr), (1, 0, m.rm), (1, 1, m.rr), (2, 0, m.im), (2, 1, m.ir)] {
        for _ in 0..count {
            items.push((gold, pred));
        }
    }
    items
}

pub fn naive_metrics(items: &[(u8, u8)]) -> NaiveMetrics {
    let n = items.len() as f64;
    let mut agree = 0usize;
    for &(g, p) in items {
        if g == p {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let mut p_e = 0.0;
    let mut chance_cells = 0usize;
    for c in 0u8..3 {
        let mut gold_c = 0usize;
        let mut pred_c = 0usize;
        for &(g, p) in items {
            if g == c {
                gold_c += 1;
            }
            if p == c {
                pred_c += 1;
            }
        }
        p_e += (gold_c as f64 / n) * (pred_c as f64 / n);
        chance_cells += gold_c * pred_c;
    }
    let kappa = if chance_cells == items.len() * items.len() {
        if agree == items.len() { 1.0 } else { 0.0 }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    let mut precision = [0.0; 2];
    let mut recall = [0.0; 2];
    let mut f1 = [0.0; 2];
    for c in 0u8..2 {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for &(g, p) in items {
            match (g == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let pr = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rc = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        precision[c as usize] = pr;
        recall[c as usize] = rc;
        f1[c as usize] = if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) };
    }
    NaiveMetrics {
        p_o,
        p_e,
        kappa,
        precision,
        recall,
        f1,
        macro_f1: (f1[0] + f1[1]) / 2.0,
    }
}
