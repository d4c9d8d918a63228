//! K-SVD dictionary learning with Batch-OMP coding.

use log::info;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::PatchDictionary;
use crate::error::{Error, Result};
use crate::volume::{dot, norm_sq};

/// Power iterations per rank-1 atom update.
const RANK1_ITERS: usize = 3;

#[derive(Debug, Clone)]
pub struct KsvdResult {
    pub dictionary: PatchDictionary,
    /// Total squared representation error after each iteration.
    pub history: Vec<f64>,
}

type SparseCode = Vec<(usize, f64)>;

/// Orthogonal matching pursuit of one signal from its correlations
/// `alpha = Psi^T x` and the Gram matrix `Psi^T Psi`, with a progressively
/// grown Cholesky factor of the selected Gram block.
fn batch_omp(gram: &DMatrix<f64>, alpha: &[f64], energy: f64, sparsity: usize) -> SparseCode {
    let q = alpha.len();
    let mut corr = alpha.to_vec();
    let mut used = vec![false; q];
    let mut support: Vec<usize> = Vec::with_capacity(sparsity);
    // lower-triangular, row i holds entries 0..=i
    let mut chol: Vec<Vec<f64>> = Vec::with_capacity(sparsity);
    let mut coef: Vec<f64> = Vec::new();
    let floor = 1e-24 * energy.max(f64::MIN_POSITIVE);
    for _ in 0..sparsity.min(q) {
        let mut best = None;
        let mut best_abs = 0.0;
        for (j, c) in corr.iter().enumerate() {
            if !used[j] && c.abs() > best_abs {
                best_abs = c.abs();
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        if best_abs * best_abs <= floor {
            break;
        }
        // new Cholesky row: solve L w = G[support, j]
        let mut w: Vec<f64> = support.iter().map(|&i| gram[(i, j)]).collect();
        for r in 0..w.len() {
            let s: f64 = (0..r).map(|c| chol[r][c] * w[c]).sum();
            w[r] = (w[r] - s) / chol[r][r];
        }
        let diag = gram[(j, j)] - norm_sq(&w);
        if diag <= 1e-10 {
            // atom is (numerically) in the span of the current support
            used[j] = true;
            continue;
        }
        w.push(diag.sqrt());
        chol.push(w);
        support.push(j);
        used[j] = true;

        // L L^T coef = alpha[support]
        let k = support.len();
        let mut y: Vec<f64> = support.iter().map(|&i| alpha[i]).collect();
        for r in 0..k {
            let s: f64 = (0..r).map(|c| chol[r][c] * y[c]).sum();
            y[r] = (y[r] - s) / chol[r][r];
        }
        for r in (0..k).rev() {
            let s: f64 = (r + 1..k).map(|c| chol[c][r] * y[c]).sum();
            y[r] = (y[r] - s) / chol[r][r];
        }
        coef = y;

        corr.copy_from_slice(alpha);
        for (&i, &g) in support.iter().zip(&coef) {
            for (c, gv) in corr.iter_mut().zip(gram.column(i).iter()) {
                *c -= g * gv;
            }
        }
        let residual = energy - dot(&coef, &support.iter().map(|&i| alpha[i]).collect::<Vec<_>>());
        if residual <= floor {
            break;
        }
    }
    support.into_iter().zip(coef).collect()
}

fn residual_of(x: &[f64], dict: &DMatrix<f64>, code: &SparseCode) -> Vec<f64> {
    let mut r = x.to_vec();
    for &(j, a) in code {
        for (rv, d) in r.iter_mut().zip(dict.column(j).iter()) {
            *rv -= a * d;
        }
    }
    r
}

fn random_unit(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm_sq(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Learns a `len x q` dictionary from the column-stacked signals in `data`.
///
/// The coding step keeps a signal's previous code whenever the new pursuit
/// does worse, so the recorded error never increases.
pub fn train_ksvd(
    data: &[f64],
    len: usize,
    q: usize,
    sparsity: usize,
    iterations: usize,
    seed: u64,
) -> Result<KsvdResult> {
    if len == 0 || data.is_empty() || data.len() % len != 0 {
        return Err(Error::param("training data must hold whole blocks"));
    }
    if q < len {
        return Err(Error::param(format!(
            "{q} atoms of length {len} do not form an overcomplete dictionary"
        )));
    }
    if sparsity == 0 || iterations == 0 {
        return Err(Error::param("K-SVD sparsity and iterations must be at least 1"));
    }
    let n = data.len() / len;
    let x = DMatrix::from_column_slice(len, n, data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // atoms start as distinct training signals, topped up with noise
    let mut dict = DMatrix::zeros(len, q);
    let mut picks = rand::seq::index::sample(&mut rng, n, q.min(n)).into_iter();
    for j in 0..q {
        let mut atom = None;
        for i in picks.by_ref() {
            let nrm = norm_sq(x.column(i).as_slice()).sqrt();
            if nrm > 1e-12 {
                atom = Some(x.column(i).iter().map(|v| v / nrm).collect::<Vec<_>>());
                break;
            }
        }
        let atom = atom.unwrap_or_else(|| random_unit(len, &mut rng));
        dict.column_mut(j).copy_from_slice(&atom);
    }

    let energies: Vec<f64> = (0..n).map(|i| norm_sq(x.column(i).as_slice())).collect();
    let mut codes: Vec<SparseCode> = vec![Vec::new(); n];
    let mut residual = x.clone();
    let mut history = Vec::with_capacity(iterations);

    for it in 0..iterations {
        let gram = dict.tr_mul(&dict);
        let corr = dict.tr_mul(&x);
        let updates: Vec<Option<(SparseCode, Vec<f64>)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let code = batch_omp(&gram, corr.column(i).as_slice(), energies[i], sparsity);
                let r = residual_of(x.column(i).as_slice(), &dict, &code);
                (norm_sq(&r) < norm_sq(residual.column(i).as_slice())).then_some((code, r))
            })
            .collect();
        for (i, up) in updates.into_iter().enumerate() {
            if let Some((code, r)) = up {
                codes[i] = code;
                residual.column_mut(i).copy_from_slice(&r);
            }
        }

        // users[k] = (signal, slot in its code)
        let mut users: Vec<Vec<(usize, usize)>> = vec![Vec::new(); q];
        for (i, code) in codes.iter().enumerate() {
            for (slot, &(k, _)) in code.iter().enumerate() {
                users[k].push((i, slot));
            }
        }
        let mut unused = Vec::new();
        for k in 0..q {
            if users[k].is_empty() {
                unused.push(k);
                continue;
            }
            let atom: Vec<f64> = dict.column(k).iter().copied().collect();
            // E = R + d g^T on the users' columns
            let m = users[k].len();
            let mut e = DMatrix::zeros(len, m);
            let mut g = Vec::with_capacity(m);
            for (c, &(i, slot)) in users[k].iter().enumerate() {
                let a = codes[i][slot].1;
                g.push(a);
                for (ev, (rv, dv)) in e.column_mut(c).iter_mut().zip(residual.column(i).iter().zip(&atom)) {
                    *ev = rv + a * dv;
                }
            }
            let mut d = atom;
            for _ in 0..RANK1_ITERS {
                let eg = &e * nalgebra::DVector::from_column_slice(&g);
                let nrm = eg.norm();
                if nrm <= 1e-300 {
                    break;
                }
                d = eg.iter().map(|v| v / nrm).collect();
                g = (e.tr_mul(&nalgebra::DVector::from_column_slice(&d))).iter().copied().collect();
            }
            dict.column_mut(k).copy_from_slice(&d);
            for (c, &(i, slot)) in users[k].iter().enumerate() {
                codes[i][slot].1 = g[c];
                for (rv, (ev, dv)) in residual.column_mut(i).iter_mut().zip(e.column(c).iter().zip(&d)) {
                    *rv = ev - g[c] * dv;
                }
            }
        }

        // unused atoms move to the worst represented signals
        if !unused.is_empty() {
            let mut worst: Vec<usize> = (0..n).collect();
            let errs: Vec<f64> = (0..n).map(|i| norm_sq(residual.column(i).as_slice())).collect();
            worst.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]));
            let mut candidates = worst.into_iter().filter(|&i| energies[i] > 1e-24);
            for &k in &unused {
                let atom = match candidates.next() {
                    Some(i) => {
                        let nrm = energies[i].sqrt();
                        x.column(i).iter().map(|v| v / nrm).collect()
                    }
                    None => random_unit(len, &mut rng),
                };
                dict.column_mut(k).copy_from_slice(&atom);
            }
        }

        let err: f64 = residual.iter().map(|v| v * v).sum();
        info!(
            "K-SVD iteration {}/{}: error {:.6e}, {} atoms replaced",
            it + 1,
            iterations,
            err,
            unused.len()
        );
        history.push(err);
    }

    // exact renormalization guards against drift in the power iteration
    for mut c in dict.column_iter_mut() {
        let nrm = c.norm();
        c /= nrm;
    }
    let dictionary = PatchDictionary::new(len, q, dict.as_slice().to_vec())?;
    Ok(KsvdResult {
        dictionary,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn planted(len: usize, q: usize, s: usize, n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = DMatrix::zeros(len, q);
        for j in 0..q {
            truth.column_mut(j).copy_from_slice(&random_unit(len, &mut rng));
        }
        let mut data = Vec::with_capacity(len * n);
        for _ in 0..n {
            let mut x = vec![0.0; len];
            for k in rand::seq::index::sample(&mut rng, q, s) {
                let a: f64 = StandardNormal.sample(&mut rng);
                for (xv, d) in x.iter_mut().zip(truth.column(k).iter()) {
                    *xv += a * d;
                }
            }
            data.extend(x);
        }
        (truth, data)
    }

    /// Fraction of true atoms matched by some learned atom at |corr| > 0.95.
    pub(crate) fn recovered_fraction(truth: &DMatrix<f64>, learned: &PatchDictionary) -> f64 {
        let hits = truth
            .column_iter()
            .filter(|t| (0..learned.atoms).any(|j| dot(t.as_slice(), learned.atom(j)).abs() > 0.95))
            .count();
        hits as f64 / truth.ncols() as f64
    }

    #[test]
    fn omp_recovers_exact_sparse_combination() {
        let (truth, _) = planted(30, 60, 3, 1, 1);
        let mut x = vec![0.0; 30];
        let coeffs = [(4, 1.5), (20, -0.7), (41, 0.9)];
        for &(k, a) in &coeffs {
            for (xv, d) in x.iter_mut().zip(truth.column(k).iter()) {
                *xv += a * d;
            }
        }
        let gram = truth.tr_mul(&truth);
        let alpha: Vec<f64> = truth.tr_mul(&DMatrix::from_column_slice(30, 1, &x)).iter().copied().collect();
        let mut code = batch_omp(&gram, &alpha, norm_sq(&x), 3);
        code.sort_by_key(|c| c.0);
        for (got, want) in code.iter().zip(&coeffs) {
            assert_eq!(got.0, want.0);
            assert!((got.1 - want.1).abs() < 1e-10);
        }
    }

    #[test]
    fn planted_dictionary_recovery() {
        let (truth, data) = planted(20, 64, 3, 2000, 11);
        let result = train_ksvd(&data, 20, 64, 3, 30, 5).unwrap();
        let frac = recovered_fraction(&truth, &result.dictionary);
        assert!(frac >= 0.8, "recovered {frac}");
    }

    #[test]
    fn atoms_unit_norm_and_error_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..16 * 300).map(|_| rng.random::<f64>() - 0.5).collect();
        let result = train_ksvd(&data, 16, 40, 4, 12, 2).unwrap();
        for j in 0..40 {
            assert!((norm_sq(result.dictionary.atom(j)).sqrt() - 1.0).abs() <= 1e-9);
        }
        for w in result.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", result.history);
        }
    }

    #[test]
    fn undercomplete_rejected() {
        let data = vec![1.0; 20 * 10];
        assert!(matches!(train_ksvd(&data, 20, 19, 3, 5, 0), Err(Error::Param(_))));
    }
}
