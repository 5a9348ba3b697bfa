//! Accuracy matrices and the two continual-learning summary metrics.
//!
//! `A[i][j]` is the accuracy on task `i` after learning task `j`, defined for
//! `i <= j` only. The final average accuracy is the mean of the last column;
//! the cumulative average accuracy averages the running column means.

use std::fmt::Write as _;

use crate::data::TaskDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            entries: vec![None; tasks * tasks],
        }
    }

    /// Builds a matrix from its columns; column `j` holds `j + 1` values.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(columns.len());
        for (j, col) in columns.iter().enumerate() {
            m.set_column(j, col)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        if task > after || after >= self.tasks {
            return None;
        }
        self.entries[task * self.tasks + after]
    }

    pub fn set(&mut self, task: usize, after: usize, accuracy: f64) -> Result<()> {
        if after >= self.tasks || task > after {
            return Err(Error::contract(format!(
                "entry ({task}, {after}) outside the lower triangle of a {0}x{0} matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::contract(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.entries[task * self.tasks + after] = Some(accuracy);
        Ok(())
    }

    /// Fills column `after` with the accuracies of tasks `0..=after`.
    pub fn set_column(&mut self, after: usize, accuracies: &[f64]) -> Result<()> {
        if accuracies.len() != after + 1 {
            return Err(Error::contract(format!(
                "column {after} needs {} entries, got {}",
                after + 1,
                accuracies.len()
            )));
        }
        for (i, &a) in accuracies.iter().enumerate() {
            self.set(i, after, a)?;
        }
        Ok(())
    }

    fn column_mean(&self, after: usize) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..=after {
            sum += self
                .get(i, after)
                .ok_or_else(|| Error::contract(format!("missing accuracy for task {i} after task {after}")))?;
        }
        Ok(sum / (after + 1) as f64)
    }

    /// Final average accuracy.
    pub fn faa(&self) -> Result<f64> {
        if self.tasks == 0 {
            return Err(Error::contract("empty accuracy matrix"));
        }
        self.column_mean(self.tasks - 1)
    }

    /// Cumulative average accuracy.
    pub fn caa(&self) -> Result<f64> {
        if self.tasks == 0 {
            return Err(Error::contract("empty accuracy matrix"));
        }
        let running = self.running()?;
        Ok(running[self.tasks - 1].1)
    }

    /// `(faa_so_far, caa_so_far)` after each task.
    pub fn running(&self) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(self.tasks);
        let mut sum = 0.0;
        for j in 0..self.tasks {
            let f = self.column_mean(j)?;
            sum += f;
            out.push((f, sum / (j + 1) as f64));
        }
        Ok(out)
    }

    /// Rows are tasks learned so far, columns the evaluated task; cells for
    /// tasks not yet seen are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for i in 0..self.tasks {
            let _ = write!(s, ",task{i}");
        }
        s.push('\n');
        for j in 0..self.tasks {
            let _ = write!(s, "{j}");
            for i in 0..self.tasks {
                match self.get(i, j) {
                    Some(a) => {
                        let _ = write!(s, ",{a:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Running FAA/CAA per task followed by a summary line.
pub fn metrics_csv(matrix: &AccuracyMatrix) -> Result<String> {
    let mut s = String::from("task,faa,caa\n");
    for (j, (f, c)) in matrix.running()?.into_iter().enumerate() {
        let _ = writeln!(s, "{j},{f:.6},{c:.6}");
    }
    let _ = writeln!(s, "final,{:.6},{:.6}", matrix.faa()?, matrix.caa()?);
    Ok(s)
}

/// Accuracy of each task over time, one row per (task, after) pair.
pub fn forgetting_csv(matrix: &AccuracyMatrix) -> String {
    let mut s = String::from("task,after_task,accuracy\n");
    for i in 0..matrix.tasks() {
        for j in i..matrix.tasks() {
            if let Some(a) = matrix.get(i, j) {
                let _ = writeln!(s, "{i},{j},{a:.6}");
            }
        }
    }
    s
}

/// Top-1 accuracy of `predict` on each test set, in order.
pub fn evaluate_split<F>(mut predict: F, test_sets: &[&TaskDataset]) -> Result<Vec<f64>>
where
    F: FnMut(&TaskDataset) -> Result<Vec<u32>>,
{
    test_sets
        .iter()
        .map(|ds| {
            if ds.is_empty() {
                return Err(Error::contract(format!("test set of task {} is empty", ds.task_id)));
            }
            let predicted = predict(ds)?;
            if predicted.len() != ds.len() {
                return Err(Error::contract(format!(
                    "{} predictions for {} samples",
                    predicted.len(),
                    ds.len()
                )));
            }
            let correct = predicted.iter().zip(&ds.samples).filter(|(p, s)| **p == s.label).count();
            Ok(correct as f64 / ds.len() as f64)
        })
        .collect()
}
