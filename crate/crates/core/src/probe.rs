//! Logistic-regression probe ranking.
//!
//! The probe is trained on raw activations. Neurons are then ordered by
//! accumulating them at increasing percentages of the total |weight| mass:
//! at step p of `search_stride`, the smallest prefix of the |w|-sorted list
//! carrying p/stride of the mass is selected, and neurons new at that step
//! are appended in id order.
//!
//! With no L1 term the probe is fit by damped Newton iterations to the exact
//! optimum; small-weight neurons only order reliably once the fit has
//! converged. Elastic-net probes fall back to mini-batch Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activations::ActivationMatrix;
use crate::error::{Error, Result};
use crate::ranking::NeuronRanking;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeSolver {
    /// Full-batch Newton with backtracking; requires `l1 == 0`.
    #[default]
    Newton,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub solver: ProbeSolver,
    pub l1: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub search_stride: usize,
    pub seed: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            solver: ProbeSolver::Newton,
            l1: 0.0,
            l2: 10.0,
            epochs: 50,
            batch_size: 256,
            lr: 1e-2,
            search_stride: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits `p(y=1|x) = σ(w·x + b)` minimising mean cross-entropy +
/// `l1·|w|₁ + l2·|w|²` (bias unregularised).
pub fn train_probe(m: &ActivationMatrix, labels: &[bool], params: &ProbeParams) -> Result<Probe> {
    if labels.len() != m.n_rows {
        return Err(Error::Alignment(format!(
            "{} labels for {} activation rows",
            labels.len(),
            m.n_rows
        )));
    }
    let pos = labels.iter().filter(|&&b| b).count();
    if pos == 0 {
        return Err(Error::ClassSupport("positive".into()));
    }
    if pos == labels.len() {
        return Err(Error::ClassSupport("negative".into()));
    }
    match params.solver {
        ProbeSolver::Newton if params.l1 != 0.0 => {
            Err(Error::Config("the Newton probe solver does not support an L1 term".into()))
        }
        ProbeSolver::Newton => train_newton(m, labels, params.l2),
        ProbeSolver::Adam => train_adam(m, labels, params),
    }
}

const NEWTON_MAX_ITER: usize = 100;

fn objective(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, l2: f64, free: &[bool]) -> f64 {
    let z = x * theta;
    let n = y.len() as f64;
    // log(1 + e^z) − y·z, computed stably
    let ce: f64 = z
        .iter()
        .zip(y.iter())
        .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
        .sum();
    let reg: f64 = theta.iter().zip(free).filter(|(_, &f)| f).map(|(w, _)| w * w).sum();
    ce / n + l2 * reg
}

fn train_newton(m: &ActivationMatrix, labels: &[bool], l2: f64) -> Result<Probe> {
    let (rows, cols) = (m.n_rows, m.n_cols);
    // constant columns are collinear with the bias and sit at zero in the optimum
    let varying: Vec<usize> = (0..cols)
        .filter(|&j| {
            let mut c = m.column(j);
            let first = c.next();
            c.any(|v| Some(v) != first)
        })
        .collect();
    let k = varying.len();
    let x = DMatrix::from_fn(rows, k + 1, |r, c| if c < k { f64::from(m.row(r)[varying[c]]) } else { 1.0 });
    let y = DVector::from_iterator(rows, labels.iter().map(|&b| f64::from(u8::from(b))));
    let mut free = vec![true; k + 1];
    free[k] = false;
    let n = rows as f64;
    let mut theta = DVector::zeros(k + 1);
    let mut f = objective(&x, &y, &theta, l2, &free);
    for it in 0..NEWTON_MAX_ITER {
        let p = (&x * &theta).map(sigmoid);
        let mut grad = x.tr_mul(&(&p - &y)) / n;
        let s = p.map(|p| (p * (1.0 - p)).sqrt());
        let mut xs = x.clone();
        for (mut row, &si) in xs.row_iter_mut().zip(s.iter()) {
            row *= si;
        }
        let mut h = xs.tr_mul(&xs) / n;
        for i in 0..=k {
            if free[i] {
                grad[i] += 2.0 * l2 * theta[i];
                h[(i, i)] += 2.0 * l2;
            }
            h[(i, i)] += 1e-12;
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::Numeric("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        let decrement = grad.dot(&step);
        if decrement < 1e-16 {
            log::debug!("probe converged after {it} Newton steps");
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            let fc = objective(&x, &y, &cand, l2, &free);
            if fc <= f - 1e-4 * t * decrement {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !f.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("probe diverged at Newton step {}", it + 1)));
        }
        if !accepted {
            // no further decrease representable
            break;
        }
    }
    let mut weights = vec![0.0; cols];
    for (c, &j) in varying.iter().enumerate() {
        weights[j] = theta[c];
    }
    Ok(Probe { weights, bias: theta[k] })
}

/// Mini-batch Adam with the learning rate decaying linearly to zero.
fn train_adam(m: &ActivationMatrix, labels: &[bool], params: &ProbeParams) -> Result<Probe> {
    if params.batch_size == 0 || params.epochs == 0 {
        return Err(Error::Config("probe epochs and batch_size must be >= 1".into()));
    }
    let n = m.n_cols;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // zero start keeps identical features tied; the seed drives batch order
    let mut w = vec![0.0f64; n];
    let mut b = 0.0f64;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut mw = vec![0.0; n];
    let mut vw = vec![0.0; n];
    let (mut mb, mut vb) = (0.0f64, 0.0f64);
    let mut grad = vec![0.0; n];
    let mut order: Vec<usize> = (0..m.n_rows).collect();
    let total_steps = (params.epochs * m.n_rows.div_ceil(params.batch_size)) as f64;
    let mut t = 0i32;
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(params.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for &r in chunk {
                let x = m.row(r);
                let z = b + w.iter().zip(x).map(|(wi, &xi)| wi * xi as f64).sum::<f64>();
                let p = sigmoid(z);
                let y = if labels[r] { 1.0 } else { 0.0 };
                epoch_loss += -(y * p.max(1e-300).ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln());
                let e = p - y;
                gb += e;
                for (g, &xi) in grad.iter_mut().zip(x) {
                    *g += e * xi as f64;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            t += 1;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            // linear decay to zero so the final weights are not step noise
            let lr = params.lr * (1.0 - (t - 1) as f64 / total_steps);
            for i in 0..n {
                let g = grad[i] * inv + params.l1 * w[i].signum() * f64::from(w[i] != 0.0) + 2.0 * params.l2 * w[i];
                mw[i] = b1 * mw[i] + (1.0 - b1) * g;
                vw[i] = b2 * vw[i] + (1.0 - b2) * g * g;
                w[i] -= lr * (mw[i] / bc1) / ((vw[i] / bc2).sqrt() + eps);
            }
            let g = gb * inv;
            mb = b1 * mb + (1.0 - b1) * g;
            vb = b2 * vb + (1.0 - b2) * g * g;
            b -= lr * (mb / bc1) / ((vb / bc2).sqrt() + eps);
        }
        if !epoch_loss.is_finite() || !b.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("probe diverged in epoch {}", epoch + 1)));
        }
        log::debug!("probe epoch {}: loss {:.4}", epoch + 1, epoch_loss / m.n_rows as f64);
    }
    Ok(Probe { weights: w, bias: b })
}

/// Global order from probe weights by cumulative |w| mass percentiles.
/// Score of a neuron selected at step p is `(stride − p + 1) / stride`;
/// neurons never selected score 0.
pub fn weight_mass_ranking(concept: &str, weights: &[f64], search_stride: usize) -> Result<NeuronRanking> {
    if search_stride == 0 {
        return Err(Error::Config("search_stride must be >= 1".into()));
    }
    let mag: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    let mut by_mag: Vec<usize> = (0..mag.len()).collect();
    by_mag.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    let mut cum = Vec::with_capacity(mag.len());
    let mut acc = 0.0;
    for &j in &by_mag {
        acc += mag[j];
        cum.push(acc);
    }
    let total = acc;
    let mut scores = vec![0.0; mag.len()];
    let mut taken = 0usize;
    if total > 0.0 {
        for p in 1..=search_stride {
            let target = total * p as f64 / search_stride as f64;
            let k = if p == search_stride {
                by_mag.iter().take_while(|&&j| mag[j] > 0.0).count()
            } else {
                (cum.partition_point(|&c| c < target) + 1).min(mag.len())
            };
            if k > taken {
                let s = (search_stride - p + 1) as f64 / search_stride as f64;
                for &j in &by_mag[taken..k] {
                    scores[j] = s;
                }
                taken = k;
            }
        }
    }
    NeuronRanking::from_scores(concept, scores)
}

/// Trains a probe and converts its weights into a ranking.
pub fn linear_probe_rank(
    m: &ActivationMatrix,
    labels: &[bool],
    concept: &str,
    params: &ProbeParams,
) -> Result<NeuronRanking> {
    let probe = train_probe(m, labels, params)?;
    let mut ranking = weight_mass_ranking(concept, &probe.weights, params.search_stride)?;
    let constant: Vec<usize> = (0..m.n_cols)
        .filter(|&j| {
            let mut col = m.column(j);
            let first = col.next();
            col.all(|v| Some(v) == first)
        })
        .collect();
    if !constant.is_empty() {
        let msg = format!("{} constant features; their order falls back to neuron id", constant.len());
        log::warn!("{msg}");
        ranking.diagnostics.push(msg);
    }
    Ok(ranking)
}
