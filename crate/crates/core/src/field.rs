//! Per-chart storage of values on the grid (owned and ghost nodes).

use crate::linalg::Mat;
use num_complex::Complex64 as C64;
use std::ops::{Add, Mul, Sub};

/// A value that can live at a grid node and be differentiated componentwise.
pub trait FieldValue:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> + Mul<C64, Output = Self>
{
    fn n_comp(&self) -> usize;
    fn comp(&self, k: usize) -> C64;
    fn set_comp(&mut self, k: usize, v: C64);
    fn zero_like(&self) -> Self;
}

impl FieldValue for C64 {
    fn n_comp(&self) -> usize {
        1
    }
    fn comp(&self, _k: usize) -> C64 {
        *self
    }
    fn set_comp(&mut self, _k: usize, v: C64) {
        *self = v;
    }
    fn zero_like(&self) -> Self {
        C64::new(0.0, 0.0)
    }
}

impl FieldValue for Mat {
    fn n_comp(&self) -> usize {
        self.rows() * self.cols()
    }
    fn comp(&self, k: usize) -> C64 {
        self[(k / self.cols(), k % self.cols())]
    }
    fn set_comp(&mut self, k: usize, v: C64) {
        let c = self.cols();
        self[(k / c, k % c)] = v;
    }
    fn zero_like(&self) -> Self {
        Mat::zeros(self.rows(), self.cols())
    }
}

/// Values at every storage node of every chart. `synced` records whether
/// the ghost nodes currently agree with their sources.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    pub charts: Vec<Vec<T>>,
    pub synced: bool,
}

impl<T: Copy> Field<T> {
    pub fn from_charts(charts: Vec<Vec<T>>) -> Self {
        Field { charts, synced: false }
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(&T) -> U) -> Field<U> {
        Field {
            charts: self.charts.iter().map(|c| c.iter().map(&mut f).collect()).collect(),
            synced: self.synced,
        }
    }

    pub fn get(&self, chart: usize, node: usize) -> T {
        self.charts[chart][node]
    }

    pub fn set(&mut self, chart: usize, node: usize, v: T) {
        self.charts[chart][node] = v;
        self.synced = false;
    }
}

pub type ScalarField = Field<C64>;
pub type MatField = Field<Mat>;
