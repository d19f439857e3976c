//! Exact and approximate adjustment on finite confounded models.
//!
//! A [`DiscreteSCM`] carries `P(Z)`, `P(Z|X)` and `P(Y|X,Z)` as tables. The
//! observational conditional marginalizes with `P(Z|X)`; the backdoor
//! adjustment marginalizes with the prior `P(Z)`. The normalized weighted
//! geometric mean (NWGM) moves the expectation over `Z` inside the softmax,
//! which is exact only in degenerate cases, so its gap is measured rather
//! than assumed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::kernels;

const NORM_TOL: f64 = 1e-9;

pub type Table = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSCM {
    pub p_z: Vec<f64>,
    /// `n_x × n_z`
    pub p_z_given_x: Table,
    /// `n_x × n_z × n_y`
    pub p_y_given_xz: Vec<Table>,
}

fn check_dist(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() {
        return Err(Error::Validation(format!("{what}: empty distribution")));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation(format!("{what}: negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::Validation(format!("{what}: sums to {s}")));
    }
    Ok(())
}

impl DiscreteSCM {
    pub fn new(p_z: Vec<f64>, p_z_given_x: Table, p_y_given_xz: Vec<Table>) -> Result<Self> {
        let scm = Self {
            p_z,
            p_z_given_x,
            p_y_given_xz,
        };
        scm.validate()?;
        Ok(scm)
    }

    pub fn n_x(&self) -> usize {
        self.p_z_given_x.len()
    }

    pub fn n_z(&self) -> usize {
        self.p_z.len()
    }

    pub fn n_y(&self) -> usize {
        self.p_y_given_xz
            .first()
            .and_then(|t| t.first())
            .map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_dist(&self.p_z, "P(Z)")?;
        let (nx, nz, ny) = (self.n_x(), self.n_z(), self.n_y());
        if nx == 0 || self.p_y_given_xz.len() != nx {
            return Err(Error::Validation("P(Z|X) and P(Y|X,Z) disagree on n_x".into()));
        }
        for (x, row) in self.p_z_given_x.iter().enumerate() {
            if row.len() != nz {
                return Err(Error::Validation(format!("P(Z|X={x}) has {} entries", row.len())));
            }
            check_dist(row, &format!("P(Z|X={x})"))?;
        }
        for (x, t) in self.p_y_given_xz.iter().enumerate() {
            if t.len() != nz {
                return Err(Error::Validation(format!("P(Y|X={x},Z) has {} rows", t.len())));
            }
            for (z, row) in t.iter().enumerate() {
                if row.len() != ny {
                    return Err(Error::Validation(format!("P(Y|X={x},Z={z}) width mismatch")));
                }
                check_dist(row, &format!("P(Y|X={x},Z={z})"))?;
            }
        }
        Ok(())
    }

    fn mix(&self, x: usize, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_y()];
        for (z, w) in weights.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(&self.p_y_given_xz[x][z]) {
                *o += w * p;
            }
        }
        out
    }
}

/// `P(Y|X) = Σ_z P(Y|X,z) P(z|X)`
pub fn observational(scm: &DiscreteSCM) -> Result<Table> {
    scm.validate()?;
    Ok((0..scm.n_x()).map(|x| scm.mix(x, &scm.p_z_given_x[x])).collect())
}

/// `P(Y|do(X)) = Σ_z P(Y|X,z) P(z)`
pub fn backdoor_adjust_exact(scm: &DiscreteSCM) -> Result<Table> {
    scm.validate()?;
    Ok((0..scm.n_x()).map(|x| scm.mix(x, &scm.p_z)).collect())
}

/// Weighted geometric mean `Π v_i^{p_i}`.
pub fn wgm(values: &[f64], probs: &[f64]) -> Result<f64> {
    if values.len() != probs.len() {
        return Err(Error::Argument("values and probs differ in length".into()));
    }
    check_dist(probs, "wgm weights")?;
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("wgm needs positive values, got {v}")));
    }
    Ok(values.iter().zip(probs).map(|(v, p)| v.powf(*p)).product())
}

fn softmax(mut row: Vec<f64>) -> Vec<f64> {
    kernels::softmax_in_place(&mut row);
    row
}

/// Softmax of the prior-weighted score expectation `Σ_z P(z) f(z, ·)`.
pub fn nwgm_predict(scores: &[Vec<f64>], p_z: &[f64]) -> Result<Vec<f64>> {
    check_dist(p_z, "P(Z)")?;
    if scores.len() != p_z.len() || scores.is_empty() {
        return Err(Error::Argument(format!(
            "{} score rows for {} confounder values",
            scores.len(),
            p_z.len()
        )));
    }
    let ny = scores[0].len();
    let mut expect = vec![0.0; ny];
    for (row, w) in scores.iter().zip(p_z) {
        if row.len() != ny {
            return Err(Error::Argument("ragged score table".into()));
        }
        expect.iter_mut().zip(row).for_each(|(e, s)| *e += w * s);
    }
    if expect.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "nwgm_predict" });
    }
    Ok(softmax(expect))
}

/// Prior expectation of dictionary rows, `Σ_k P(k) d_k`.
pub fn expectation_unconditional(dictionary: &[Vec<f64>], prior: &[f64]) -> Result<Vec<f64>> {
    check_dist(prior, "dictionary prior")?;
    if dictionary.len() != prior.len() || dictionary.is_empty() {
        return Err(Error::Argument("prior length must match dictionary rows".into()));
    }
    let w = dictionary[0].len();
    let mut out = vec![0.0; w];
    for (row, p) in dictionary.iter().zip(prior) {
        out.iter_mut().zip(row).for_each(|(o, d)| *o += p * d);
    }
    Ok(out)
}

/// Query-conditioned expectation `softmax(q Kᵀ / √w) D`, where `keys` are
/// the (possibly projected) dictionary rows used for scoring.
pub fn expectation_conditioned(query: &[f64], keys: &[Vec<f64>], dictionary: &[Vec<f64>]) -> Result<Vec<f64>> {
    if keys.len() != dictionary.len() || keys.is_empty() {
        return Err(Error::Argument("keys and dictionary must have equal rows".into()));
    }
    let scale = 1.0 / (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| {
            if k.len() != query.len() {
                return Err(Error::Argument("key width differs from query".into()));
            }
            Ok(k.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() * scale)
        })
        .collect::<Result<_>>()?;
    let weights = softmax(logits);
    expectation_unconditional(dictionary, &weights)
}

/// A confounded model whose outcome scores split additively:
/// `P(Y|x,z) = softmax(g_x[x] + g_z[z])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLinearModel {
    pub g_x: Table,
    pub g_z: Table,
    pub p_z: Vec<f64>,
    pub p_z_given_x: Table,
}

impl LogLinearModel {
    pub fn scores(&self, x: usize, z: usize) -> Vec<f64> {
        self.g_x[x].iter().zip(&self.g_z[z]).map(|(a, b)| a + b).collect()
    }

    pub fn to_scm(&self) -> Result<DiscreteSCM> {
        let nz = self.p_z.len();
        if self.g_z.len() != nz {
            return Err(Error::Validation("g_z rows must match n_z".into()));
        }
        let p_y = (0..self.g_x.len())
            .map(|x| (0..nz).map(|z| softmax(self.scores(x, z))).collect())
            .collect();
        DiscreteSCM::new(self.p_z.clone(), self.p_z_given_x.clone(), p_y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentResult {
    pub observational: Table,
    pub interventional: Table,
    pub nwgm: Table,
    /// `max |nwgm − interventional|` over the table.
    pub max_gap: f64,
    /// Max difference between NWGM via `g_x + E[g_z]` and via the
    /// expectation of full scores; zero up to rounding under linearity.
    pub decomposition_error: f64,
}

const DECOMPOSITION_TOL: f64 = 1e-12;

pub fn approximation_gap_report(model: &LogLinearModel) -> Result<AdjustmentResult> {
    let scm = model.to_scm()?;
    let obs = observational(&scm)?;
    let int = backdoor_adjust_exact(&scm)?;
    let nz = scm.n_z();

    let mut nwgm = Vec::with_capacity(scm.n_x());
    let mut decomposition_error: f64 = 0.0;
    let mut e_gz = vec![0.0; scm.n_y()];
    for (row, p) in model.g_z.iter().zip(&model.p_z) {
        e_gz.iter_mut().zip(row).for_each(|(e, g)| *e += p * g);
    }
    for x in 0..scm.n_x() {
        let full: Table = (0..nz).map(|z| model.scores(x, z)).collect();
        let via_scores = nwgm_predict(&full, &model.p_z)?;
        let via_split = softmax(model.g_x[x].iter().zip(&e_gz).map(|(a, b)| a + b).collect());
        for (a, b) in via_scores.iter().zip(&via_split) {
            decomposition_error = decomposition_error.max((a - b).abs());
        }
        nwgm.push(via_scores);
    }
    if decomposition_error > DECOMPOSITION_TOL {
        return Err(Error::Numeric(format!(
            "linear decomposition disagrees by {decomposition_error}"
        )));
    }
    let max_gap = nwgm
        .iter()
        .flatten()
        .zip(int.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(AdjustmentResult {
        observational: obs,
        interventional: int,
        nwgm,
        max_gap,
        decomposition_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple(p_z_given_x: Table, p_y: Vec<Table>) -> DiscreteSCM {
        DiscreteSCM::new(vec![0.5, 0.5], p_z_given_x, p_y).unwrap()
    }

    #[test]
    fn z_invariant_outcome_matches_any_slice() {
        let row = vec![0.3, 0.7];
        let scm = simple(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![row.clone(), row.clone()], vec![vec![0.6, 0.4], vec![0.6, 0.4]]],
        );
        let obs = observational(&scm).unwrap();
        let int = backdoor_adjust_exact(&scm).unwrap();
        for (a, b) in obs[0].iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in obs.iter().flatten().zip(int.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_confounder_selects_slice() {
        let scm = simple(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![
                vec![vec![0.1, 0.9], vec![0.8, 0.2]],
                vec![vec![0.5, 0.5], vec![0.25, 0.75]],
            ],
        );
        let obs = observational(&scm).unwrap();
        assert_eq!(obs[0], vec![0.1, 0.9]);
        assert_eq!(obs[1], vec![0.25, 0.75]);
        // Prior is uniform, so the intervention averages the two slices.
        let int = backdoor_adjust_exact(&scm).unwrap();
        assert!((int[0][0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let r = DiscreteSCM::new(vec![0.5, 0.6], vec![vec![0.5, 0.5]], vec![vec![vec![1.0], vec![1.0]]]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn wgm_cases() {
        assert!((wgm(&[3.0, 3.0, 3.0], &[0.2, 0.3, 0.5]).unwrap() - 3.0).abs() < 1e-14);
        assert!((wgm(&[2.0, 8.0], &[0.5, 0.5]).unwrap() - 4.0).abs() < 1e-14);
        assert!(matches!(wgm(&[0.0, 1.0], &[0.5, 0.5]), Err(Error::Domain(_))));
        assert!(matches!(wgm(&[-1.0, 1.0], &[0.5, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn nwgm_single_confounder_is_softmax() {
        let f = vec![vec![0.3, -1.0, 2.0]];
        let p = nwgm_predict(&f, &[1.0]).unwrap();
        assert_eq!(p, softmax(f[0].clone()));
    }

    #[test]
    fn nwgm_z_invariant_scores_match_exact() {
        let f = vec![1.0, 0.2, -0.4, 0.0];
        let scores = vec![f.clone(); 3];
        let prior = vec![0.2, 0.5, 0.3];
        let p = nwgm_predict(&scores, &prior).unwrap();
        let exact = softmax(f);
        for (a, b) in p.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nwgm_gap_is_reported_not_asserted() {
        let scores = vec![
            vec![2.0, 0.0, -1.0, 0.5],
            vec![-1.0, 1.5, 0.0, 0.0],
            vec![0.0, 0.0, 3.0, -2.0],
        ];
        let prior = vec![0.3, 0.3, 0.4];
        let approx = nwgm_predict(&scores, &prior).unwrap();
        let mut exact = vec![0.0; 4];
        for (row, p) in scores.iter().zip(&prior) {
            for (e, v) in exact.iter_mut().zip(softmax(row.clone())) {
                *e += p * v;
            }
        }
        let gap = approx.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap > 0.0 && gap.is_finite());
        assert!((approx.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn z_invariant_log_linear_has_zero_gap() {
        let model = LogLinearModel {
            g_x: vec![vec![0.1, 0.5, -0.3], vec![1.0, 0.0, 0.0]],
            g_z: vec![vec![0.7, 0.7, 0.7], vec![0.7, 0.7, 0.7]],
            p_z: vec![0.4, 0.6],
            p_z_given_x: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        };
        let r = approximation_gap_report(&model).unwrap();
        assert!(r.max_gap < 1e-12);
    }

    #[test]
    fn small_spread_gives_small_gap() {
        let model = LogLinearModel {
            g_x: vec![vec![0.4, -0.2, 0.9, 0.0], vec![-1.0, 0.3, 0.0, 0.6]],
            g_z: vec![vec![0.1, 0.0, 0.05, 0.0], vec![0.0, 0.1, 0.0, 0.02]],
            p_z: vec![0.5, 0.5],
            p_z_given_x: vec![vec![0.95, 0.05], vec![0.3, 0.7]],
        };
        let r = approximation_gap_report(&model).unwrap();
        assert!(r.max_gap < 0.01, "{}", r.max_gap);
    }

    #[test]
    fn conditioned_expectation_collapses_for_single_entry() {
        let d = vec![vec![1.0, 2.0]];
        let e = expectation_conditioned(&[5.0, -3.0], &d, &d).unwrap();
        assert_eq!(e, vec![1.0, 2.0]);
        let u = expectation_unconditional(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.25, 0.75]).unwrap();
        assert_eq!(u, vec![0.25, 0.75]);
    }
}
