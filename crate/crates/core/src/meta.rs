//! Combining Z-scores across studies whose samples may overlap.
//!
//! Overlap inflates the naive inverse-variance combination, so weights are
//! chosen to minimize the combined variance w' corS w subject to the scale
//! constraint sum w_k sqrt(n_k) = 1, and each variant is rescaled back to
//! unit variance through the mask-aware factor h_j.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkit::SymMatrix;

/// One study's summary: per-variant Z-scores (`None` = not observed) and the
/// study sample size.
#[derive(Debug, Clone)]
pub struct Study {
    pub zscores: Vec<Option<f64>>,
    pub n: usize,
}

impl Study {
    pub fn new(zscores: Vec<Option<f64>>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("study sample size must be >= 1"));
        }
        if let Some(z) = zscores.iter().flatten().find(|z| !z.is_finite()) {
            return Err(Error::invalid(format!("non-finite z-score {z}")));
        }
        Ok(Study { zscores, n })
    }
}

/// A set of studies over one shared variant list, plus their overlap
/// correlation matrix.
#[derive(Debug, Clone)]
pub struct StudyPanel {
    studies: Vec<Study>,
    cor_s: SymMatrix,
}

impl StudyPanel {
    pub fn new(studies: Vec<Study>, cor_s: SymMatrix) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::invalid("panel needs at least one study"));
        }
        let p = studies[0].zscores.len();
        if studies.iter().any(|s| s.zscores.len() != p) {
            return Err(Error::invalid("studies cover different variant lists"));
        }
        if cor_s.dim() != studies.len() {
            return Err(Error::invalid(format!(
                "correlation matrix is {}x{} for {} studies",
                cor_s.dim(),
                cor_s.dim(),
                studies.len()
            )));
        }
        let m = cor_s.as_matrix();
        for k in 0..cor_s.dim() {
            if (m[(k, k)] - 1.0).abs() > 1e-8 {
                return Err(Error::invalid(format!(
                    "study correlation diagonal entry {k} is {}, expected 1",
                    m[(k, k)]
                )));
            }
        }
        let min_eig = m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-6 {
            return Err(Error::NotPsd(format!(
                "study correlation has eigenvalue {min_eig}"
            )));
        }
        Ok(StudyPanel { studies, cor_s })
    }

    pub fn k(&self) -> usize {
        self.studies.len()
    }

    pub fn num_variants(&self) -> usize {
        self.studies[0].zscores.len()
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn cor_s(&self) -> &SymMatrix {
        &self.cor_s
    }
}

const Z_BOUND: f64 = 1.96;
const MIN_SHARED: usize = 10;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len() as f64;
    let ma = a.iter().sum::<f64>() / m;
    let mb = b.iter().sum::<f64>() / m;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Estimate the study-overlap correlation from null-looking variants:
/// variants with |z| <= 1.96 in both studies of a pair, so polygenic signal
/// does not masquerade as sample overlap. The estimate is then projected to
/// the PSD cone by clamping negative eigenvalues at zero.
pub fn estimate_study_correlation(studies: &[Study]) -> Result<SymMatrix> {
    if studies.is_empty() {
        return Err(Error::invalid("need at least one study"));
    }
    let k = studies.len();
    let mut cor = DMatrix::identity(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let mut za = Vec::new();
            let mut zb = Vec::new();
            let p = studies[a].zscores.len().min(studies[b].zscores.len());
            for j in 0..p {
                if let (Some(x), Some(y)) = (studies[a].zscores[j], studies[b].zscores[j]) {
                    if x.abs() <= Z_BOUND && y.abs() <= Z_BOUND {
                        za.push(x);
                        zb.push(y);
                    }
                }
            }
            if za.len() < MIN_SHARED {
                return Err(Error::Estimation(format!(
                    "studies {a} and {b} share only {} bounded variants; need {MIN_SHARED}",
                    za.len()
                )));
            }
            let r = pearson(&za, &zb);
            cor[(a, b)] = r;
            cor[(b, a)] = r;
        }
    }
    let eig = cor.symmetric_eigen();
    let clamped = DVector::from_fn(k, |i, _| eig.eigenvalues[i].max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(SymMatrix::symmetrized(rebuilt))
}

fn subset_weights(
    cor_s: &DMatrix<f64>,
    roots: &[f64],
    support: &[usize],
) -> Option<DVector<f64>> {
    let m = support.len();
    let a = DMatrix::from_fn(m, m, |i, j| cor_s[(support[i], support[j])]);
    let b = DVector::from_fn(m, |i, _| roots[support[i]]);
    // Minimum-norm stationary point via the pseudo-inverse, so duplicate
    // studies (singular corS blocks) still get a well-defined answer.
    let pinv = a.pseudo_inverse(1e-12).ok()?;
    let ab = &pinv * &b;
    let scale = b.dot(&ab);
    if scale <= 1e-12 {
        return None;
    }
    Some(ab / scale)
}

/// Minimize w' corS w subject to sum w_k sqrt(n_k) = 1 and w >= 0, exactly,
/// by enumerating the 2^K - 1 support subsets and solving each
/// equality-constrained quadratic. Ties in the objective go to the larger
/// support. K is capped at 20 to bound the enumeration.
pub fn solve_meta_weights(cor_s: &SymMatrix, sizes: &[usize]) -> Result<DVector<f64>> {
    let k = sizes.len();
    if k == 0 || cor_s.dim() != k {
        return Err(Error::invalid(format!(
            "correlation is {}x{} for {k} study sizes",
            cor_s.dim(),
            cor_s.dim()
        )));
    }
    if k > 20 {
        return Err(Error::invalid(format!(
            "support enumeration handles at most 20 studies, got {k}"
        )));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::invalid("study sample sizes must be >= 1"));
    }
    let roots: Vec<f64> = sizes.iter().map(|&n| (n as f64).sqrt()).collect();
    let m = cor_s.as_matrix();
    let mut best: Option<(f64, usize, DVector<f64>)> = None;
    for mask in 1u32..(1u32 << k) {
        let support: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
        let Some(ws) = subset_weights(m, &roots, &support) else {
            continue;
        };
        if ws.iter().any(|&w| w < -1e-10) {
            continue;
        }
        let mut w = DVector::zeros(k);
        for (i, &idx) in support.iter().enumerate() {
            w[idx] = ws[i].max(0.0);
        }
        let constraint: f64 = (0..k).map(|i| w[i] * roots[i]).sum();
        if (constraint - 1.0).abs() > 1e-8 {
            continue;
        }
        let objective = (m * &w).dot(&w);
        let support_size = support.len();
        let better = match &best {
            None => true,
            Some((obj, sz, _)) => {
                objective < obj - 1e-12
                    || (objective < obj + 1e-12 && support_size > *sz)
            }
        };
        if better {
            best = Some((objective, support_size, w));
        }
    }
    let Some((objective, _, w)) = best else {
        return Err(Error::DegenerateFit(
            "no feasible meta-analysis weights on any support".into(),
        ));
    };
    // KKT check on the winner: mu = 2 w'Aw; zero-weight coordinates need a
    // nonnegative multiplier 2(Aw)_k - mu sqrt(n_k).
    let mu = 2.0 * objective;
    let grad = 2.0 * (m * &w);
    for i in 0..k {
        let slack = grad[i] - mu * roots[i];
        if w[i] <= 1e-10 && slack < -1e-6 {
            return Err(Error::Estimation(format!(
                "weight optimum failed its optimality check at study {i} (slack {slack:.3e})"
            )));
        }
    }
    Ok(w)
}

/// Combined Z-scores: Z_meta_j = h_j * sum_k w_k z_kj over the studies that
/// observe variant j, with h_j restoring unit variance under the overlap
/// model. Variants carrying no information (observed nowhere, or only in
/// zero-weight studies) come back as `None`.
pub fn meta_zscore(panel: &StudyPanel, w: &DVector<f64>) -> Result<Vec<Option<f64>>> {
    let k = panel.k();
    if w.len() != k {
        return Err(Error::invalid(format!(
            "got {} weights for {k} studies",
            w.len()
        )));
    }
    if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let cor = panel.cor_s().as_matrix();
    let p = panel.num_variants();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let observed: Vec<usize> = (0..k)
            .filter(|&s| panel.studies()[s].zscores[j].is_some())
            .collect();
        let mut quad = 0.0;
        let mut num = 0.0;
        for &a in &observed {
            num += w[a] * panel.studies()[a].zscores[j].unwrap();
            for &b in &observed {
                quad += w[a] * w[b] * cor[(a, b)];
            }
        }
        if observed.is_empty() || quad <= 1e-300 {
            out.push(None);
        } else {
            out.push(Some(num / quad.sqrt()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;
    use approx::assert_abs_diff_eq;

    fn observed(zs: &[f64]) -> Vec<Option<f64>> {
        zs.iter().map(|&z| Some(z)).collect()
    }

    #[test]
    fn duplicate_studies_estimate_full_correlation() {
        let mut r = RngStream::new(9, 0);
        let zs: Vec<f64> = (0..200).map(|_| r.standard_normal()).collect();
        let s1 = Study::new(observed(&zs), 100).unwrap();
        let s2 = Study::new(observed(&zs), 100).unwrap();
        let cor = estimate_study_correlation(&[s1, s2]).unwrap();
        assert!((cor.as_matrix()[(0, 1)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn independent_studies_estimate_near_zero_correlation() {
        let mut r = RngStream::new(10, 0);
        let z1: Vec<f64> = (0..10_000).map(|_| r.standard_normal()).collect();
        let z2: Vec<f64> = (0..10_000).map(|_| r.standard_normal()).collect();
        let s1 = Study::new(observed(&z1), 100).unwrap();
        let s2 = Study::new(observed(&z2), 100).unwrap();
        let cor = estimate_study_correlation(&[s1, s2]).unwrap();
        assert!(cor.as_matrix()[(0, 1)].abs() <= 0.05);
    }

    #[test]
    fn single_study_estimate_is_the_one_by_one_identity() {
        let s = Study::new(observed(&[0.3, -0.2, 1.1]), 50).unwrap();
        let cor = estimate_study_correlation(&[s]).unwrap();
        assert_eq!(cor.dim(), 1);
        assert_abs_diff_eq!(cor.as_matrix()[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn too_few_shared_variants_names_the_pair() {
        // Nine overlapping bounded variants: one short of the requirement.
        let z1: Vec<Option<f64>> = (0..9).map(|_| Some(0.1)).chain([None]).collect();
        let z2: Vec<Option<f64>> = (0..9).map(|_| Some(-0.1)).chain([Some(0.2)]).collect();
        let s1 = Study::new(z1, 40).unwrap();
        let s2 = Study::new(z2, 40).unwrap();
        let err = estimate_study_correlation(&[s1, s2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0") && msg.contains("1"), "message was: {msg}");
    }

    #[test]
    fn large_zscores_are_excluded_from_the_estimate() {
        // Identical studies except ten variants pushed past the bound in
        // opposite directions; those must not drag the estimate down.
        let mut r = RngStream::new(11, 0);
        let base: Vec<f64> = (0..500).map(|_| 0.5 * r.standard_normal()).collect();
        let mut z1 = base.clone();
        let mut z2 = base.clone();
        for j in 0..10 {
            z1[j] = 5.0;
            z2[j] = -5.0;
        }
        let s1 = Study::new(observed(&z1), 100).unwrap();
        let s2 = Study::new(observed(&z2), 100).unwrap();
        let cor = estimate_study_correlation(&[s1, s2]).unwrap();
        assert!(cor.as_matrix()[(0, 1)] > 0.99);
    }

    #[test]
    fn single_study_weight_is_inverse_root_n() {
        let w = solve_meta_weights(&SymMatrix::identity(1), &[100]).unwrap();
        assert_abs_diff_eq!(w[0], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_independent_pair_splits_evenly() {
        let w = solve_meta_weights(&SymMatrix::identity(2), &[400, 400]).unwrap();
        assert_abs_diff_eq!(w[0], 1.0 / 40.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 1.0 / 40.0, epsilon = 1e-12);
    }

    #[test]
    fn near_duplicate_studies_beat_both_corner_solutions() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 1.0]);
        let cor = SymMatrix::new(m).unwrap();
        let sizes = [100usize, 900];
        let w = solve_meta_weights(&cor, &sizes).unwrap();
        let objective = |w: &DVector<f64>| (cor.as_matrix() * w).dot(w);
        for corner in 0..2 {
            let mut c = DVector::zeros(2);
            c[corner] = 1.0 / (sizes[corner] as f64).sqrt();
            assert!(objective(&w) <= objective(&c) + 1e-12);
        }
        let constraint: f64 = (0..2).map(|i| w[i] * (sizes[i] as f64).sqrt()).sum();
        assert_abs_diff_eq!(constraint, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn exact_duplicates_get_a_well_defined_split() {
        // corS = all-ones is singular; the pseudo-inverse path must still
        // return feasible nonnegative weights.
        let m = DMatrix::from_element(2, 2, 1.0);
        let cor = SymMatrix::new(m).unwrap();
        let w = solve_meta_weights(&cor, &[100, 100]).unwrap();
        let constraint = 10.0 * (w[0] + w[1]);
        assert_abs_diff_eq!(constraint, 1.0, epsilon = 1e-10);
        assert!(w[0] >= 0.0 && w[1] >= 0.0);
    }

    #[test]
    fn negatively_correlated_studies_still_satisfy_kkt() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        let cor = SymMatrix::new(m).unwrap();
        let w = solve_meta_weights(&cor, &[100, 100]).unwrap();
        assert!(w.iter().all(|&x| x >= 0.0));
        let constraint: f64 = 10.0 * (w[0] + w[1]);
        assert_abs_diff_eq!(constraint, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn single_study_combination_returns_input_zscores() {
        let zs = [1.4, -0.6, 0.0, 2.2];
        let panel = StudyPanel::new(
            vec![Study::new(observed(&zs), 250).unwrap()],
            SymMatrix::identity(1),
        )
        .unwrap();
        let w = solve_meta_weights(panel.cor_s(), &[250]).unwrap();
        let out = meta_zscore(&panel, &w).unwrap();
        for (j, &z) in zs.iter().enumerate() {
            assert_abs_diff_eq!(out[j].unwrap(), z, epsilon = 1e-12);
        }
    }

    #[test]
    fn independent_equal_studies_average_with_root_two() {
        let z1 = [1.0, -0.5];
        let z2 = [0.2, 1.5];
        let panel = StudyPanel::new(
            vec![
                Study::new(observed(&z1), 300).unwrap(),
                Study::new(observed(&z2), 300).unwrap(),
            ],
            SymMatrix::identity(2),
        )
        .unwrap();
        let w = solve_meta_weights(panel.cor_s(), &[300, 300]).unwrap();
        let out = meta_zscore(&panel, &w).unwrap();
        for j in 0..2 {
            let expect = (z1[j] + z2[j]) / 2.0f64.sqrt();
            assert_abs_diff_eq!(out[j].unwrap(), expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn variant_observed_in_one_study_passes_through() {
        let panel = StudyPanel::new(
            vec![
                Study::new(vec![Some(0.4), None], 300).unwrap(),
                Study::new(vec![Some(-0.1), Some(1.7)], 500).unwrap(),
            ],
            SymMatrix::identity(2),
        )
        .unwrap();
        let w = solve_meta_weights(panel.cor_s(), &[300, 500]).unwrap();
        let out = meta_zscore(&panel, &w).unwrap();
        // h_j = 1/w_2 cancels the weight, leaving the study-2 score.
        assert_abs_diff_eq!(out[1].unwrap(), 1.7, epsilon = 1e-12);
    }

    #[test]
    fn variant_observed_nowhere_is_missing() {
        let panel = StudyPanel::new(
            vec![
                Study::new(vec![Some(0.4), None], 300).unwrap(),
                Study::new(vec![Some(-0.1), None], 500).unwrap(),
            ],
            SymMatrix::identity(2),
        )
        .unwrap();
        let w = solve_meta_weights(panel.cor_s(), &[300, 500]).unwrap();
        let out = meta_zscore(&panel, &w).unwrap();
        assert!(out[1].is_none());
    }

    #[test]
    fn null_combined_scores_have_unit_variance() {
        // Three overlapping studies; per-variant scores are correlated
        // across studies with the stated corS. The combined score must come
        // out with variance one.
        let m = DMatrix::from_row_slice(3, 3, &[
            1.0, 0.6, 0.3, //
            0.6, 1.0, 0.5, //
            0.3, 0.5, 1.0,
        ]);
        let cor = SymMatrix::new(m).unwrap();
        let root = crate::numkit::psd_sqrt(&cor, 0.0).unwrap();
        let p = 10_000;
        let mut r = RngStream::new(12, 0);
        let mut z = vec![Vec::with_capacity(p), Vec::with_capacity(p), Vec::with_capacity(p)];
        for _ in 0..p {
            let e = crate::numkit::gaussian_vector(&mut r, 3);
            let v = &root * e;
            for k in 0..3 {
                z[k].push(Some(v[k]));
            }
        }
        let sizes = [200usize, 350, 500];
        let studies: Vec<Study> = z
            .into_iter()
            .zip(sizes)
            .map(|(zs, n)| Study::new(zs, n).unwrap())
            .collect();
        let panel = StudyPanel::new(studies, cor.clone()).unwrap();
        let w = solve_meta_weights(&cor, &sizes).unwrap();
        let out = meta_zscore(&panel, &w).unwrap();
        let vals: Vec<f64> = out.into_iter().flatten().collect();
        assert_eq!(vals.len(), p);
        let mean = vals.iter().sum::<f64>() / p as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p as f64 - 1.0);
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn combination_is_invariant_to_study_order() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let cor = SymMatrix::new(m.clone()).unwrap();
        let z1 = [0.9, -1.2, 0.3];
        let z2 = [0.1, 0.8, -0.7];
        let sizes = [150usize, 600];
        let forward = StudyPanel::new(
            vec![
                Study::new(observed(&z1), sizes[0]).unwrap(),
                Study::new(observed(&z2), sizes[1]).unwrap(),
            ],
            cor.clone(),
        )
        .unwrap();
        let wf = solve_meta_weights(&cor, &sizes).unwrap();
        let a = meta_zscore(&forward, &wf).unwrap();

        let swapped_cor = SymMatrix::new(m).unwrap();
        let backward = StudyPanel::new(
            vec![
                Study::new(observed(&z2), sizes[1]).unwrap(),
                Study::new(observed(&z1), sizes[0]).unwrap(),
            ],
            swapped_cor.clone(),
        )
        .unwrap();
        let wb = solve_meta_weights(&swapped_cor, &[sizes[1], sizes[0]]).unwrap();
        let b = meta_zscore(&backward, &wb).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(a[j].unwrap(), b[j].unwrap(), epsilon = 1e-10);
        }
    }
}
