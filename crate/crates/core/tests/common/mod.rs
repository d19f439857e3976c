//! Helpers shared by integration test targets.
#![allow(dead_code)]

use deconfound::causal_core::{DiscreteSCM, Table};
use rand::Rng;

/// Confounded generative model `Z → X`, `(X, Z) → Y`.
pub struct Generative {
    pub p_z: Vec<f64>,
    /// `n_z × n_x`
    pub p_x_given_z: Table,
    /// `n_x × n_z × n_y`
    pub p_y: Vec<Table>,
}

pub fn random_dist(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn random_generative(nx: usize, nz: usize, ny: usize, rng: &mut impl Rng) -> Generative {
    Generative {
        p_z: random_dist(nz, rng),
        p_x_given_z: (0..nz).map(|_| random_dist(nx, rng)).collect(),
        p_y: (0..nx).map(|_| (0..nz).map(|_| random_dist(ny, rng)).collect()).collect(),
    }
}

impl Generative {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.p_y.len(), self.p_z.len(), self.p_y[0][0].len())
    }

    /// `joint[x][z][y]` with `X` drawn from `P(X|Z)`, or forced to `force`.
    pub fn joint(&self, force: Option<usize>) -> Vec<Vec<Vec<f64>>> {
        let (nx, nz, ny) = self.dims();
        let mut j = vec![vec![vec![0.0; ny]; nz]; nx];
        for x in 0..nx {
            for z in 0..nz {
                let px = match force {
                    Some(f) => f64::from(u8::from(f == x)),
                    None => self.p_x_given_z[z][x],
                };
                for y in 0..ny {
                    j[x][z][y] = self.p_z[z] * px * self.p_y[x][z][y];
                }
            }
        }
        j
    }

    /// `P(Y | X = x)` read off a joint by marginalizing `Z` and normalizing.
    pub fn conditional(j: &[Vec<Vec<f64>>], x: usize) -> Vec<f64> {
        let ny = j[x][0].len();
        let num: Vec<f64> = (0..ny).map(|y| j[x].iter().map(|row| row[y]).sum()).collect();
        let den: f64 = num.iter().sum();
        num.into_iter().map(|v| v / den).collect()
    }

    pub fn scm(&self) -> DiscreteSCM {
        let (nx, nz, _) = self.dims();
        let p_z_given_x = (0..nx)
            .map(|x| {
                let w: Vec<f64> = (0..nz).map(|z| self.p_z[z] * self.p_x_given_z[z][x]).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        DiscreteSCM::new(self.p_z.clone(), p_z_given_x, self.p_y.clone()).unwrap()
    }

    pub fn observational_oracle(&self) -> Table {
        let j = self.joint(None);
        (0..self.dims().0).map(|x| Self::conditional(&j, x)).collect()
    }

    pub fn interventional_oracle(&self) -> Table {
        (0..self.dims().0)
            .map(|x| Self::conditional(&self.joint(Some(x)), x))
            .collect()
    }
}

pub fn max_diff(a: &Table, b: &Table) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}
