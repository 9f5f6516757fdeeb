//! Evaluation metrics: bits per spike (co-smoothing and forward
//! prediction), rate and PSTH R², and ridge decoding of behavior.
//!
//! Undefined quantities (no spikes in scope, no varying target column) are
//! reported as `NaN` with a warning rather than as an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::Trial;
use crate::error::{Error, Result};
use crate::model::{log_factorial, LangevinFlow};
use crate::tensor::Tensor;

/// Bins and neurons of one trial that a metric reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Scope {
    pub bins: Range<usize>,
    pub neurons: Vec<usize>,
}

fn nll_term(r: f64, x: f64) -> f64 {
    if x == 0.0 {
        r
    } else {
        r - x * r.ln() + log_factorial(x)
    }
}

/// `(NLL_null − NLL_model) / (n_spikes · ln 2)` where the null model
/// predicts each neuron's mean count over the scope.
pub fn bits_per_spike(rates: &[Tensor], spikes: &[Tensor], scopes: &[Scope]) -> Result<f64> {
    if rates.len() != spikes.len() || rates.len() != scopes.len() {
        return Err(Error::dim("one rate matrix, spike matrix and scope per trial required"));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (s, sc) in spikes.iter().zip(scopes) {
        for t in sc.bins.clone() {
            for &j in &sc.neurons {
                let e = sums.entry(j).or_default();
                e.0 += s.at(t, j);
                e.1 += 1;
            }
        }
    }
    let null: BTreeMap<usize, f64> = sums.iter().map(|(&j, &(s, n))| (j, s / n as f64)).collect();
    let (mut nll_model, mut nll_null, mut total) = (0.0, 0.0, 0.0);
    for ((r, s), sc) in rates.iter().zip(spikes).zip(scopes) {
        if r.shape() != s.shape() {
            return Err(Error::dim("rates and spikes differ in shape"));
        }
        for t in sc.bins.clone() {
            for &j in &sc.neurons {
                let (rate, x) = (r.at(t, j), s.at(t, j));
                if !(rate > 0.0) {
                    return Err(Error::Domain(format!("rate {rate} must be positive")));
                }
                nll_model += nll_term(rate, x);
                nll_null += nll_term(null[&j], x);
                total += x;
            }
        }
    }
    if total == 0.0 {
        warn!("bits per spike undefined: no spikes in scope");
        return Ok(f64::NAN);
    }
    Ok((nll_null - nll_model) / (total * std::f64::consts::LN_2))
}

/// Mean over columns of `1 − SS_res / SS_tot`; columns with constant
/// target are skipped.
pub fn r2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let per = r2_columns(pred, target)?;
    let valid: Vec<f64> = per.into_iter().filter(|v| !v.is_nan()).collect();
    if valid.is_empty() {
        warn!("R² undefined: every target column is constant");
        return Ok(f64::NAN);
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Per-column R², `NaN` for constant columns.
pub fn r2_columns(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!("R² shapes {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (n, c) = (target.rows(), target.cols());
    Ok((0..c)
        .map(|j| {
            let mean = (0..n).map(|i| target.at(i, j)).sum::<f64>() / n as f64;
            let ss_tot: f64 = (0..n).map(|i| (target.at(i, j) - mean).powi(2)).sum();
            let ss_res: f64 = (0..n).map(|i| (target.at(i, j) - pred.at(i, j)).powi(2)).sum();
            if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else {
                f64::NAN
            }
        })
        .collect())
}

/// Stacks the `bins` rows of every matrix.
pub fn stack_rows(parts: &[Tensor], bins: &[Range<usize>]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for (p, b) in parts.iter().zip(bins) {
        if p.cols() != cols {
            return Err(Error::dim("column counts differ"));
        }
        for t in b.clone() {
            data.extend_from_slice(p.row(t));
            rows += 1;
        }
    }
    Tensor::matrix(rows, cols, data)
}

/// Condition-averaged R²: predictions and ground truth are averaged over
/// the trials of each condition with at least two trials, then compared
/// per neuron across (condition, bin).
pub fn psth_r2(pred: &[Tensor], conditions: &[u32], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != conditions.len() || pred.len() != truth.len() {
        return Err(Error::dim("one prediction, condition and truth per trial required"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in conditions.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mean_of = |mats: &[Tensor], idx: &[usize]| -> Result<Tensor> {
        let shape = mats[idx[0]].shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &i in idx {
            if mats[i].shape() != shape.as_slice() {
                return Err(Error::dim("trials of a condition differ in shape"));
            }
            acc.data_mut().iter_mut().zip(mats[i].data()).for_each(|(a, b)| *a += b);
        }
        acc.data_mut().iter_mut().for_each(|a| *a /= idx.len() as f64);
        Ok(acc)
    };
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for idx in groups.values().filter(|g| g.len() >= 2) {
        p.push(mean_of(pred, idx)?);
        t.push(mean_of(truth, idx)?);
    }
    if p.is_empty() {
        warn!("PSTH R² undefined: no condition has two trials");
        return Ok(f64::NAN);
    }
    let ranges: Vec<Range<usize>> = p.iter().map(|m| 0..m.rows()).collect();
    r2(&stack_rows(&p, &ranges)?, &stack_rows(&t, &ranges)?)
}

/// Plain ridge solution `(XᵀX + αI)⁻¹ Xᵀ y`, `X: n × p`, `y: n × q`.
pub fn ridge_solve(x: &Tensor, y: &Tensor, alpha: f64) -> Result<Tensor> {
    if x.rows() != y.rows() {
        return Err(Error::dim("ridge design and target row counts differ"));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("ridge alpha must be positive, got {alpha}")));
    }
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
    let ym = DMatrix::from_row_slice(y.rows(), y.cols(), y.data());
    let gram = xm.transpose() * &xm + DMatrix::identity(x.cols(), x.cols()) * alpha;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Domain("ridge system is not positive definite".into()))?;
    let w = chol.solve(&(xm.transpose() * ym));
    Tensor::matrix(w.nrows(), w.ncols(), w.transpose().as_slice().to_vec())
}

/// Ridge regression with per-feature standardization and an unpenalized
/// intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Tensor,
    pub intercept: Vec<f64>,
}

impl Ridge {
    pub fn fit(x: &Tensor, y: &Tensor, alpha: f64) -> Result<Self> {
        let (n, p) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::Data("ridge fit needs at least one sample".into()));
        }
        let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let v = (0..n).map(|i| (x.at(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let ymean: Vec<f64> = (0..y.cols())
            .map(|j| (0..n).map(|i| y.at(i, j)).sum::<f64>() / n as f64)
            .collect();
        let xs = Self::standardize(x, &mean, &scale)?;
        let mut yc = y.clone();
        for i in 0..n {
            for (j, m) in ymean.iter().enumerate() {
                yc.data_mut()[i * y.cols() + j] -= m;
            }
        }
        let weights = ridge_solve(&xs, &yc, alpha)?;
        Ok(Self {
            mean,
            scale,
            weights,
            intercept: ymean,
        })
    }

    fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Result<Tensor> {
        let mut out = x.clone();
        let p = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[k % p]) / scale[k % p];
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let xs = Self::standardize(x, &self.mean, &self.scale)?;
        let xm = DMatrix::from_row_slice(xs.rows(), xs.cols(), xs.data());
        let w = DMatrix::from_row_slice(self.weights.rows(), self.weights.cols(), self.weights.data());
        let b = DVector::from_vec(self.intercept.clone());
        let mut pred = xm * w;
        for mut row in pred.row_iter_mut() {
            row += b.transpose();
        }
        Tensor::matrix(pred.nrows(), pred.ncols(), pred.transpose().as_slice().to_vec())
    }
}

/// Fits on `(train_x, train_y)` and returns R² on the test pair.
pub fn ridge_decode_r2(train: (&Tensor, &Tensor), test: (&Tensor, &Tensor), alpha: f64) -> Result<f64> {
    let model = Ridge::fit(train.0, train.1, alpha)?;
    r2(&model.predict(test.0)?, test.1)
}

pub const DEFAULT_RIDGE_ALPHA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronReport {
    pub neuron: usize,
    pub held_out: bool,
    /// Bits per spike for this neuron over observed bins (held-out only).
    pub co_bps: f64,
    pub rate_r2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_trials: usize,
    pub co_bps: f64,
    pub fp_bps: f64,
    pub rate_r2: Option<f64>,
    pub psth_r2: f64,
    pub decode_r2: f64,
    /// Mean per-trial Poisson NLL over all neurons and bins.
    pub nll: f64,
    pub per_neuron: Vec<NeuronReport>,
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    /// Flat `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# null model: per-neuron mean count over the evaluated bins");
        let _ = writeln!(s, "n_trials = {}", self.n_trials);
        let _ = writeln!(s, "co_bps = {}", fmt_value(self.co_bps));
        let _ = writeln!(s, "fp_bps = {}", fmt_value(self.fp_bps));
        let _ = writeln!(s, "rate_r2 = {}", self.rate_r2.map_or("none".into(), fmt_value));
        let _ = writeln!(s, "psth_r2 = {}", fmt_value(self.psth_r2));
        let _ = writeln!(s, "decode_r2 = {}", fmt_value(self.decode_r2));
        let _ = writeln!(s, "nll = {}", fmt_value(self.nll));
        s
    }

    /// Tab-separated per-neuron table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("neuron\theld_out\tco_bps\trate_r2\n");
        for n in &self.per_neuron {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                n.neuron,
                n.held_out as u8,
                fmt_value(n.co_bps),
                fmt_value(n.rate_r2)
            );
        }
        s
    }

    /// Parses the output of [`to_text`](Self::to_text) into key/value pairs.
    pub fn parse_text(text: &str) -> BTreeMap<String, String> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }
}

fn observed(t: &Trial) -> Range<usize> {
    0..t.observed_bins()
}

/// Co-smoothing bits per spike: held-out neurons over observed bins.
pub fn co_bps(rates: &[Tensor], trials: &[Trial]) -> Result<f64> {
    let spikes: Vec<Tensor> = trials.iter().map(|t| t.spikes.clone()).collect();
    let scopes: Vec<Scope> = trials
        .iter()
        .map(|t| Scope {
            bins: observed(t),
            neurons: t.held_out.clone(),
        })
        .collect();
    bits_per_spike(rates, &spikes, &scopes)
}

/// Forward-prediction bits per spike: all neurons over forward bins.
pub fn fp_bps(rates: &[Tensor], trials: &[Trial]) -> Result<f64> {
    let spikes: Vec<Tensor> = trials.iter().map(|t| t.spikes.clone()).collect();
    let scopes: Vec<Scope> = trials
        .iter()
        .map(|t| Scope {
            bins: t.observed_bins()..t.n_bins(),
            neurons: (0..t.n_neurons()).collect(),
        })
        .collect();
    bits_per_spike(rates, &spikes, &scopes)
}

pub fn co_smoothing(model: &LangevinFlow, trials: &[Trial]) -> Result<f64> {
    co_bps(&predicted_rates(model, trials)?, trials)
}

pub fn forward_prediction(model: &LangevinFlow, trials: &[Trial]) -> Result<f64> {
    fp_bps(&predicted_rates(model, trials)?, trials)
}

pub fn predicted_rates(model: &LangevinFlow, trials: &[Trial]) -> Result<Vec<Tensor>> {
    Ok(model.predict(trials)?.into_iter().map(|p| p.rates).collect())
}

/// Full report from per-trial rate predictions (`bins × n_neurons` each).
/// Rate and PSTH R² compare against ground-truth rates over observed bins;
/// decoding regresses true latents on predicted rates, fitting on the first
/// half of the trials and testing on the second.
pub fn evaluate_rates(rates: &[Tensor], trials: &[Trial], ridge_alpha: f64) -> Result<EvalReport> {
    if rates.len() != trials.len() || trials.is_empty() {
        return Err(Error::dim("need one non-empty rate matrix per trial"));
    }
    let n = trials[0].n_neurons();
    let co = co_bps(rates, trials)?;
    let fp = fp_bps(rates, trials)?;
    let mut nll = 0.0;
    for (r, t) in rates.iter().zip(trials) {
        nll += r.data().iter().zip(t.spikes.data()).map(|(&r, &x)| nll_term(r, x)).sum::<f64>();
    }
    nll /= trials.len() as f64;

    let bins: Vec<Range<usize>> = trials.iter().map(observed).collect();
    let truth: Option<Vec<Tensor>> = trials.iter().map(|t| t.rates.clone()).collect();
    let (rate_r2, per_r2) = match &truth {
        Some(truth) => {
            let p = stack_rows(rates, &bins)?;
            let t = stack_rows(truth, &bins)?;
            (Some(r2(&p, &t)?), r2_columns(&p, &t)?)
        }
        None => (None, vec![f64::NAN; n]),
    };
    let conditions: Option<Vec<u32>> = trials.iter().map(|t| t.condition).collect();
    let psth = match (&truth, conditions) {
        (Some(truth), Some(c)) => {
            let cut = |m: &[Tensor]| -> Result<Vec<Tensor>> {
                m.iter().zip(&bins).map(|(x, b)| stack_rows(std::slice::from_ref(x), std::slice::from_ref(b))).collect()
            };
            psth_r2(&cut(rates)?, &c, &cut(truth)?)?
        }
        _ => f64::NAN,
    };
    let latents: Option<Vec<Tensor>> = trials.iter().map(|t| t.latents.clone()).collect();
    let decode = match latents {
        Some(lat) if trials.len() >= 2 => {
            let half = trials.len() / 2;
            let x_tr = stack_rows(&rates[..half], &bins[..half])?;
            let y_tr = stack_rows(&lat[..half], &bins[..half])?;
            let x_te = stack_rows(&rates[half..], &bins[half..])?;
            let y_te = stack_rows(&lat[half..], &bins[half..])?;
            ridge_decode_r2((&x_tr, &y_tr), (&x_te, &y_te), ridge_alpha)?
        }
        _ => f64::NAN,
    };
    let held_out = &trials[0].held_out;
    let spikes: Vec<Tensor> = trials.iter().map(|t| t.spikes.clone()).collect();
    let mut per_neuron = Vec::with_capacity(n);
    for j in 0..n {
        let is_out = held_out.contains(&j);
        let co_j = if is_out {
            let scopes: Vec<Scope> = bins
                .iter()
                .map(|b| Scope {
                    bins: b.clone(),
                    neurons: vec![j],
                })
                .collect();
            bits_per_spike(rates, &spikes, &scopes)?
        } else {
            f64::NAN
        };
        per_neuron.push(NeuronReport {
            neuron: j,
            held_out: is_out,
            co_bps: co_j,
            rate_r2: per_r2[j],
        });
    }
    Ok(EvalReport {
        n_trials: trials.len(),
        co_bps: co,
        fp_bps: fp,
        rate_r2,
        psth_r2: psth,
        decode_r2: decode,
        nll,
        per_neuron,
    })
}

pub fn evaluate(model: &LangevinFlow, trials: &[Trial], ridge_alpha: f64) -> Result<EvalReport> {
    evaluate_rates(&predicted_rates(model, trials)?, trials, ridge_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, LorenzConfig};
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    fn full_scope(t: &Tensor) -> Scope {
        Scope {
            bins: 0..t.rows(),
            neurons: (0..t.cols()).collect(),
        }
    }

    #[test]
    fn r2_hand_cases() {
        let t = m(3, 1, &[1.0, 2.0, 4.0]);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        let mean = m(3, 1, &[7.0 / 3.0; 3]);
        assert!(r2(&mean, &t).unwrap().abs() < 1e-15);
        let v = r2(&m(3, 1, &[1.0, 2.0, 3.0]), &t).unwrap();
        assert!((v - (1.0 - 1.0 / (14.0 / 3.0))).abs() < 1e-12);
        assert!((v - 0.7857).abs() < 1e-4);
        assert!(r2(&t, &m(3, 1, &[2.0; 3])).unwrap().is_nan());
        assert!(r2(&t, &m(1, 3, &[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn null_rates_score_zero_and_worse_rates_negative() {
        let s = m(4, 2, &[0.0, 1.0, 2.0, 1.0, 1.0, 0.0, 1.0, 2.0]);
        let null = m(4, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let sc = full_scope(&s);
        assert_eq!(bits_per_spike(&[null.clone()], &[s.clone()], &[sc.clone()]).unwrap(), 0.0);
        let bad = m(4, 2, &[10.0; 8]);
        assert!(bits_per_spike(&[bad], &[s.clone()], &[sc.clone()]).unwrap() < 0.0);
        let zero = m(2, 1, &[0.0, 0.0]);
        assert!(bits_per_spike(&[m(2, 1, &[1.0, 1.0])], &[zero.clone()], &[full_scope(&zero)]).unwrap().is_nan());
    }

    #[test]
    fn out_of_scope_neurons_are_ignored() {
        let s = m(3, 2, &[0.0, 5.0, 2.0, 0.0, 1.0, 1.0]);
        let a = m(3, 2, &[0.5, 1.0, 1.5, 1.0, 1.0, 1.0]);
        let mut b = a.clone();
        b.data_mut()[1] = 40.0;
        let sc = Scope {
            bins: 0..3,
            neurons: vec![0],
        };
        let x = bits_per_spike(&[a], &[s.clone()], &[sc.clone()]).unwrap();
        let y = bits_per_spike(&[b], &[s], &[sc]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn oracle_rates_score_positive() {
        let cfg = LorenzConfig {
            n_trials: 60,
            n_conditions: 6,
            ..LorenzConfig::default()
        };
        let ds = make_dataset(&cfg).unwrap();
        let rates: Vec<Tensor> = ds.val.iter().map(|t| t.rates.clone().unwrap()).collect();
        let rep = evaluate_rates(&rates, &ds.val, DEFAULT_RIDGE_ALPHA).unwrap();
        assert!(rep.co_bps > 0.0 && rep.fp_bps > 0.0);
        assert_eq!(rep.rate_r2, Some(1.0));
        assert_eq!(rep.psth_r2, 1.0);
        assert!(rep.decode_r2.is_finite());
        let text = rep.to_text();
        let kv = EvalReport::parse_text(&text);
        assert_eq!(kv["rate_r2"], "1.000000");
        let tsv = rep.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 29);
        assert!(tsv.lines().all(|l| l.split('\t').count() == 4));
    }

    #[test]
    fn empty_forward_window_is_nan() {
        let cfg = LorenzConfig {
            n_trials: 10,
            n_conditions: 2,
            forward_fraction: 0.0,
            ..LorenzConfig::default()
        };
        let ds = make_dataset(&cfg).unwrap();
        let rates: Vec<Tensor> = ds.val.iter().map(|t| t.rates.clone().unwrap()).collect();
        assert!(fp_bps(&rates, &ds.val).unwrap().is_nan());
    }

    #[test]
    fn psth_cases() {
        let a = m(2, 1, &[1.0, 3.0]);
        let b = m(2, 1, &[2.0, 5.0]);
        let truth = vec![a.clone(), a.clone(), b.clone(), b.clone()];
        assert_eq!(psth_r2(&truth, &[0, 0, 1, 1], &truth).unwrap(), 1.0);
        let grand = m(2, 1, &[2.75; 2]);
        assert!(psth_r2(&vec![grand; 4], &[0, 0, 1, 1], &truth).unwrap() <= 0.0);
        let noisy = vec![m(2, 1, &[0.5, 3.0]), m(2, 1, &[1.5, 2.0]), b.clone(), m(2, 1, &[2.0, 4.0])];
        let perm = vec![noisy[1].clone(), noisy[0].clone(), noisy[3].clone(), noisy[2].clone()];
        let x = psth_r2(&noisy, &[0, 0, 1, 1], &truth).unwrap();
        assert_eq!(x, psth_r2(&perm, &[0, 0, 1, 1], &truth).unwrap());
        assert!(psth_r2(&truth, &[0, 1, 2, 3], &truth).unwrap().is_nan());
    }

    #[test]
    fn ridge_hand_solution() {
        // XᵀX = [[2,1],[1,2]], Xᵀy = [3,3]; with α = 1 the system is
        // [[3,1],[1,3]] w = [3,3] ⇒ w = (0.75, 0.75).
        let x = m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = m(3, 1, &[1.0, 1.0, 2.0]);
        let w = ridge_solve(&x, &y, 1.0).unwrap();
        assert!((w.at(0, 0) - 0.75).abs() < 1e-12 && (w.at(1, 0) - 0.75).abs() < 1e-12);
        assert!(ridge_solve(&x, &y, 0.0).is_err());
    }

    #[test]
    fn ridge_limits() {
        let x = m(5, 2, &[1.0, 0.3, 2.0, -1.0, 3.0, 0.5, 4.0, 2.0, 5.0, -0.7]);
        let yv: Vec<f64> = (0..5).map(|i| 2.0 * x.at(i, 0) - x.at(i, 1) + 0.5).collect();
        let y = m(5, 1, &yv);
        assert!((ridge_decode_r2((&x, &y), (&x, &y), 1e-10).unwrap() - 1.0).abs() < 1e-6);
        assert!(ridge_decode_r2((&x, &y), (&x, &y), 1e12).unwrap() <= 1e-6);
    }

    proptest! {
        #[test]
        fn r2_column_permutation_invariant(data in prop::collection::vec(-5.0..5.0f64, 24), pd in prop::collection::vec(-5.0..5.0f64, 24)) {
            let t = m(8, 3, &data);
            let p = m(8, 3, &pd);
            let perm = |x: &Tensor| {
                let d: Vec<f64> = (0..8).flat_map(|i| [x.at(i, 2), x.at(i, 0), x.at(i, 1)]).collect();
                m(8, 3, &d)
            };
            let a = r2(&p, &t).unwrap();
            let b = r2(&perm(&p), &perm(&t)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
