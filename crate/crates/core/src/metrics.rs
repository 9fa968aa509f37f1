//! Step-indexed scalar series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub step: u64,
    pub value: f64,
}

/// Values keyed by strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Series {
    points: Vec<Point>,
}

impl Series {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        let mut s = Self::new();
        for p in points {
            s.push(p.step, p.value)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, step: u64, value: f64) -> Result<()> {
        if let Some(last) = self.points.last() {
            if step <= last.step {
                return Err(Error::contract(format!(
                    "series step {step} does not follow {}",
                    last.step
                )));
            }
        }
        self.points.push(Point { step, value });
        Ok(())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.value)
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.value)
    }
}
