//! Worked example shared by unit tests: the sum-of-positives question with
//! its multi-structural and relational exemplars.

use std::path::Path;

use crate::corpus::{parse_question, LoadOptions, Question};

pub const SUM_OF_POSITIVES_CODE: &str = "int sumOfPositives(int arr[], int size) {\n    int x = 0;\n    for (int i = 0; i < size; i++) {\n        if (arr[i] > 0) {\n            x += arr[i];\n        }\n    }\n    return x;\n}";

pub const STEPWISE_EXPLANATION: &str = "input is values with array and length. initially set x to zero, and use for loop to set start i from zero and smaller than length, increasing by 1 for i each run. If values are bigger than zero, then x plus equal values. it will return to x at end.";

pub const SUMMARY_EXPLANATION: &str = "sums all positive numbers in the array.";

pub const STEPWISE_JSON: &str = include_str!("../tests/fixtures/stepwise.json");
pub const SUMMARY_JSON: &str = include_str!("../tests/fixtures/summary.json");

pub const SUM_OF_POSITIVES_QUESTION_JSON: &str = include_str!("../../../data/questions/A-Q4.json");

pub fn sum_of_positives() -> Question {
    parse_question(SUM_OF_POSITIVES_QUESTION_JSON, Path::new("A-Q4.json"), LoadOptions::default())
        .expect("bundled question is valid")
}
