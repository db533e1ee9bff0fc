//! Linear baselines: logistic regression for the binary tasks and softmax
//! regression for bucketed remaining length-of-stay.
//!
//! Training minimizes `mean cross-entropy + (1/C) * penalty` by full-batch
//! gradient descent with backtracking line search; the L1 penalty is handled
//! with a proximal (soft-threshold) step. Full-batch descent is deterministic
//! for a fixed start, which stochastic solvers are not.

use crate::features::FeatureMatrix;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularization {
    L1,
    L2,
}

impl Regularization {
    pub fn name(self) -> &'static str {
        match self {
            Regularization::L1 => "l1",
            Regularization::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Regularization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Regularization::L1),
            "l2" => Ok(Regularization::L2),
            other => Err(Error::invalid(format!("unknown regularization {other:?}"))),
        }
    }
}

/// Binary logistic model or a `classes`-way softmax model. Multiclass
/// weights are class-major: `weights[class * dims + j]`. The bias is never
/// penalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub dims: usize,
    /// 1 for binary logistic, >1 for softmax regression.
    pub classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub reg: Regularization,
    pub c: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub max_iters: usize,
    /// Convergence threshold on the (proximal) gradient norm.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iters: 2000,
            grad_tol: 1e-6,
            seed: 0,
        }
    }
}

fn check_labels(n: usize, labels: &[u8], classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            message: format!("{n} rows but {} labels", labels.len()),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::domain(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Flat parameter vector: weights then bias, bias always last `classes`
/// entries (1 for binary).
struct Objective<'a> {
    x: &'a FeatureMatrix,
    labels: &'a [u8],
    classes: usize,
    reg: Regularization,
    inv_c: f64,
}

impl Objective<'_> {
    fn n_weights(&self) -> usize {
        self.x.cols * self.heads()
    }

    /// Parameter blocks per class: 1 for binary logistic.
    fn heads(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    fn n_params(&self) -> usize {
        self.n_weights() + self.heads()
    }

    /// Mean cross-entropy (plus the L2 term, which is smooth) and its
    /// gradient.
    fn smooth(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (x, n, d) = (self.x, self.x.rows, self.x.cols);
        let heads = self.heads();
        let (w, b) = params.split_at(self.n_weights());
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (gw, gb) = grad.split_at_mut(self.n_weights());
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        if heads == 1 {
            for i in 0..n {
                let row = x.row(i);
                let z = b[0]
                    + row
                        .iter()
                        .zip(w)
                        .map(|(xi, wi)| xi * wi)
                        .sum::<f64>();
                let y = self.labels[i] as f64;
                loss += softplus(z) - y * z;
                let r = (stable_sigmoid(z) - y) * inv_n;
                for (g, xi) in gw.iter_mut().zip(row) {
                    *g += r * xi;
                }
                gb[0] += r;
            }
        } else {
            let mut logits = vec![0.0; heads];
            for i in 0..n {
                let row = x.row(i);
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = b[k]
                        + row
                            .iter()
                            .zip(&w[k * d..(k + 1) * d])
                            .map(|(xi, wi)| xi * wi)
                            .sum::<f64>();
                }
                let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = zmax + logits.iter().map(|l| (l - zmax).exp()).sum::<f64>().ln();
                let y = self.labels[i] as usize;
                loss += lse - logits[y];
                for k in 0..heads {
                    let p = (logits[k] - lse).exp();
                    let r = (p - f64::from(k == y)) * inv_n;
                    for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(row) {
                        *g += r * xi;
                    }
                    gb[k] += r;
                }
            }
        }
        loss *= inv_n;
        if self.reg == Regularization::L2 {
            let mut pen = 0.0;
            for (g, wi) in gw.iter_mut().zip(w) {
                pen += wi * wi;
                *g += self.inv_c * wi;
            }
            loss += 0.5 * self.inv_c * pen;
        }
        loss
    }

    fn smooth_loss_only(&self, params: &[f64]) -> f64 {
        let mut scratch = vec![0.0; params.len()];
        self.smooth(params, &mut scratch)
    }

    /// Nonsmooth part of the objective (L1 penalty on weights).
    fn penalty(&self, params: &[f64]) -> f64 {
        match self.reg {
            Regularization::L1 => {
                self.inv_c
                    * params[..self.n_weights()]
                        .iter()
                        .map(|w| w.abs())
                        .sum::<f64>()
            }
            Regularization::L2 => 0.0,
        }
    }

    /// Gradient step plus soft threshold on the weight block.
    fn prox_step(&self, params: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
        let nw = self.n_weights();
        let thresh = match self.reg {
            Regularization::L1 => eta * self.inv_c,
            Regularization::L2 => 0.0,
        };
        params
            .iter()
            .zip(grad)
            .enumerate()
            .map(|(j, (p, g))| {
                let stepped = p - eta * g;
                if j < nw && thresh > 0.0 {
                    stepped.signum() * (stepped.abs() - thresh).max(0.0)
                } else {
                    stepped
                }
            })
            .collect()
    }
}

/// Fit a linear model. `classes = 2` trains binary logistic regression,
/// `classes > 2` a softmax model.
pub fn train_linear(
    x: &FeatureMatrix,
    labels: &[u8],
    classes: usize,
    reg: Regularization,
    c: f64,
    opts: TrainOptions,
) -> Result<LinearModel> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if x.rows == 0 {
        return Err(Error::domain("cannot train on zero rows"));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("inverse strength C must be positive, got {c}")));
    }
    check_labels(x.rows, labels, classes)?;

    let obj = Objective {
        x,
        labels,
        classes,
        reg,
        inv_c: 1.0 / c,
    };
    let mut params = vec![0.0; obj.n_params()];
    let mut grad = vec![0.0; obj.n_params()];
    let mut eta = 1.0f64;
    for _ in 0..opts.max_iters {
        let f0 = obj.smooth(&params, &mut grad);
        // Backtracking: shrink the step until the quadratic upper bound of
        // the smooth part holds at the proximal candidate.
        eta = (eta * 2.0).min(1e4);
        let mut next;
        let mut f1;
        loop {
            next = obj.prox_step(&params, &grad, eta);
            f1 = obj.smooth_loss_only(&next);
            let dot: f64 = grad
                .iter()
                .zip(next.iter().zip(&params))
                .map(|(g, (n, p))| g * (n - p))
                .sum();
            let dist: f64 = next
                .iter()
                .zip(&params)
                .map(|(n, p)| (n - p) * (n - p))
                .sum();
            if f1 <= f0 + dot + dist / (2.0 * eta) + 1e-15 {
                break;
            }
            eta *= 0.5;
            if eta < 1e-18 {
                return Err(Error::Training {
                    message: "line search failed to make progress".to_string(),
                });
            }
        }
        // A successful backtracked step never increases the full objective.
        debug_assert!(f1 + obj.penalty(&next) <= f0 + obj.penalty(&params) + 1e-9);
        // Proximal gradient mapping norm; for L2 this is the plain gradient
        // norm since the prox is the identity.
        let map_norm = params
            .iter()
            .zip(&next)
            .map(|(p, n)| ((p - n) / eta).powi(2))
            .sum::<f64>()
            .sqrt();
        params = next;
        if map_norm < opts.grad_tol {
            break;
        }
    }

    let nw = obj.n_weights();
    Ok(LinearModel {
        dims: x.cols,
        classes,
        weights: params[..nw].to_vec(),
        bias: params[nw..].to_vec(),
        reg,
        c,
        seed: opts.seed,
    })
}

impl LinearModel {
    /// Binary: positive-class probability per row. Multiclass: class
    /// distributions, rows summing to one.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        if x.cols != self.dims {
            return Err(Error::Shape {
                message: format!("model expects {} features, got {}", self.dims, x.cols),
            });
        }
        let mut out = Vec::with_capacity(x.rows);
        if self.classes == 2 {
            for i in 0..x.rows {
                let z = self.bias[0]
                    + x.row(i)
                        .iter()
                        .zip(&self.weights)
                        .map(|(xi, wi)| xi * wi)
                        .sum::<f64>();
                out.push(vec![stable_sigmoid(z)]);
            }
        } else {
            let d = self.dims;
            for i in 0..x.rows {
                let row = x.row(i);
                let mut logits: Vec<f64> = (0..self.classes)
                    .map(|k| {
                        self.bias[k]
                            + row
                                .iter()
                                .zip(&self.weights[k * d..(k + 1) * d])
                                .map(|(xi, wi)| xi * wi)
                                .sum::<f64>()
                    })
                    .collect();
                let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - zmax).exp();
                    z += *l;
                }
                logits.iter_mut().for_each(|l| *l /= z);
                out.push(logits);
            }
        }
        Ok(out)
    }

    /// Positive-class scores for a binary model.
    pub fn predict_binary(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if self.classes != 2 {
            return Err(Error::invalid("not a binary model"));
        }
        Ok(self.predict(x)?.into_iter().map(|r| r[0]).collect())
    }

    /// Versioned save: text header, then weights and bias as little-endian
    /// 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let header = format!(
            "linear v1\nclasses {}\ndims {}\nreg {}\nc {}\nseed {}\npayload {}\n\n",
            self.classes,
            self.dims,
            self.reg.name(),
            self.c,
            self.seed,
            self.weights.len() + self.bias.len(),
        );
        f.write_all(header.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        for v in self.weights.iter().chain(&self.bias) {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LinearModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Schema {
                message: "missing header terminator".to_string(),
            })?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Schema {
            message: "header is not utf-8".to_string(),
        })?;
        let mut lines = header.lines();
        if lines.next() != Some("linear v1") {
            return Err(Error::Schema {
                message: format!("{} is not a linear model file", path.display()),
            });
        }
        let mut classes = 0usize;
        let mut dims = 0usize;
        let mut reg = Regularization::L2;
        let mut c = 1.0f64;
        let mut seed = 0u64;
        let mut payload = 0usize;
        for line in lines {
            let Some((key, value)) = line.split_once(' ') else {
                return Err(Error::Schema {
                    message: format!("bad header line {line:?}"),
                });
            };
            match key {
                "classes" => classes = parse_header(value)?,
                "dims" => dims = parse_header(value)?,
                "reg" => reg = value.parse()?,
                "c" => c = parse_header(value)?,
                "seed" => seed = parse_header(value)?,
                "payload" => payload = parse_header(value)?,
                other => {
                    return Err(Error::Schema {
                        message: format!("unknown header key {other:?}"),
                    });
                }
            }
        }
        let body = &bytes[split + 2..];
        if body.len() != payload * 8 {
            return Err(Error::Schema {
                message: format!(
                    "payload holds {} bytes, header promised {}",
                    body.len(),
                    payload * 8
                ),
            });
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let heads = if classes == 2 { 1 } else { classes };
        if values.len() != dims * heads + heads {
            return Err(Error::Schema {
                message: "payload size inconsistent with dims".to_string(),
            });
        }
        let (w, b) = values.split_at(dims * heads);
        Ok(LinearModel {
            dims,
            classes,
            weights: w.to_vec(),
            bias: b.to_vec(),
            reg,
            c,
            seed,
        })
    }
}

fn parse_header<T: std::str::FromStr>(value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Schema {
        message: format!("bad header value {value:?}"),
    })
}
