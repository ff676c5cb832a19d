//! Checks shared by the focused test files and the acceptance harness.
#![allow(dead_code)]

pub mod grad;
pub mod moments;
