//! Feature encodings for the learner library.
//!
//! Columns are laid out so that every family is a prefix of the next:
//!
//! ```text
//! [1] [A] [Z = 1..K_Z-1] [M = 1..K_M-1] [W_1..W_p] [pairwise products] [W_j²]
//! └─┘ intercept-only
//! └──────────────── main effects ──────────────┘
//! └───────────────────────── interactions and squares ──────────────────────┘
//! ```
//!
//! Categorical inputs enter as level indicators. Products are only formed
//! between columns of different variables (indicators of the same factor are
//! mutually exclusive). Covariates are standardised with the training means
//! and standard deviations before any product is taken.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;

/// Candidate model families, from least to most flexible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    InterceptOnly,
    MainEffects,
    Interactions,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::InterceptOnly, Family::MainEffects, Family::Interactions];

    pub fn name(self) -> &'static str {
        match self {
            Family::InterceptOnly => "intercept-only",
            Family::MainEffects => "main-effects",
            Family::Interactions => "interactions",
        }
    }
}

/// Which of `A`, `Z`, `M` a nuisance model conditions on (covariates always).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inputs {
    pub exposure: bool,
    pub intermediate: bool,
    pub mediator: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    inputs: Inputs,
    k_z: usize,
    k_m: usize,
    w_mean: Vec<f64>,
    w_scale: Vec<f64>,
    n_main: usize,
    pairs: Vec<(usize, usize)>,
    /// Main-column offsets of the covariates.
    w_offset: usize,
}

impl Encoder {
    /// Standardisation statistics come from `rows` of `data`.
    pub fn fit(inputs: Inputs, data: &Dataset, rows: &[usize]) -> Encoder {
        let p = data.n_covariates();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for &i in rows {
            for (s, v) in mean.iter_mut().zip(data.w_row(i)) {
                *s += v / n;
            }
        }
        let mut var = vec![0.0; p];
        for &i in rows {
            for ((s, v), mu) in var.iter_mut().zip(data.w_row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Encoder::new(inputs, data.k_z(), data.k_m(), mean, scale)
    }

    pub fn new(inputs: Inputs, k_z: usize, k_m: usize, w_mean: Vec<f64>, w_scale: Vec<f64>) -> Encoder {
        // Group id of each main column; products only across groups.
        let mut groups = Vec::new();
        if inputs.exposure {
            groups.push(0usize);
        }
        if inputs.intermediate {
            groups.extend(std::iter::repeat(1).take(k_z - 1));
        }
        if inputs.mediator {
            groups.extend(std::iter::repeat(2).take(k_m - 1));
        }
        let w_offset = groups.len();
        groups.extend((0..w_mean.len()).map(|j| 3 + j));
        let n_main = groups.len();
        let mut pairs = Vec::new();
        for i in 0..n_main {
            for j in i + 1..n_main {
                if groups[i] != groups[j] {
                    pairs.push((i, j));
                }
            }
        }
        Encoder {
            inputs,
            k_z,
            k_m,
            w_mean,
            w_scale,
            n_main,
            pairs,
            w_offset,
        }
    }

    pub fn inputs(&self) -> Inputs {
        self.inputs
    }

    pub fn dim(&self, family: Family) -> usize {
        match family {
            Family::InterceptOnly => 1,
            Family::MainEffects => 1 + self.n_main,
            Family::Interactions => 1 + self.n_main + self.pairs.len() + self.w_mean.len(),
        }
    }

    /// Writes the first `self.dim(family)` features of one row into `out`.
    pub fn encode_into(&self, w: &[f64], a: u8, z: usize, m: usize, family: Family, out: &mut [f64]) {
        out[0] = 1.0;
        if family == Family::InterceptOnly {
            return;
        }
        let main = &mut out[1..1 + self.n_main];
        let mut c = 0;
        if self.inputs.exposure {
            main[c] = a as f64;
            c += 1;
        }
        if self.inputs.intermediate {
            for level in 1..self.k_z {
                main[c] = (z == level) as u8 as f64;
                c += 1;
            }
        }
        if self.inputs.mediator {
            for level in 1..self.k_m {
                main[c] = (m == level) as u8 as f64;
                c += 1;
            }
        }
        for (j, v) in w.iter().enumerate() {
            main[c] = (v - self.w_mean[j]) / self.w_scale[j];
            c += 1;
        }
        if family == Family::MainEffects {
            return;
        }
        let base = 1 + self.n_main;
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            out[base + k] = out[1 + i] * out[1 + j];
        }
        let sq = base + self.pairs.len();
        for j in 0..self.w_mean.len() {
            let v = out[1 + self.w_offset + j];
            out[sq + j] = v * v;
        }
    }

    pub fn encode(&self, w: &[f64], a: u8, z: usize, m: usize, family: Family) -> Vec<f64> {
        let mut out = vec![0.0; self.dim(family)];
        self.encode_into(w, a, z, m, family, &mut out);
        out
    }

    /// Design matrix over `rows` of `data` at their observed `(A, Z, M)`.
    pub fn design(&self, data: &Dataset, rows: &[usize], family: Family) -> DMatrix<f64> {
        let dim = self.dim(family);
        let mut x = DMatrix::zeros(rows.len(), dim);
        let mut buf = vec![0.0; dim];
        for (r, &i) in rows.iter().enumerate() {
            let o = data.observation(i);
            self.encode_into(o.w, o.a, o.z, o.m, family, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                x[(r, j)] = *v;
            }
        }
        x
    }
}
