//! Synthetic federated tasks with known optimum and known curvature.
//!
//! Features are whitened so the global Hessian of the quadratic task is
//! exactly diag(linspace(eig_min, eig_max)). Each client gets its own
//! ground-truth shift, which makes the local optima differ.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, SERVER};

pub type ModelVector = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    LogisticL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dim: usize,
    pub samples_per_client: usize,
    pub batch_size: usize,
    pub eig_min: f64,
    pub eig_max: f64,
    /// Norm of the shared ground-truth parameter.
    pub signal: f64,
    /// RMS norm of each client's shift away from the shared parameter.
    pub heterogeneity: f64,
    pub label_noise: f64,
    /// ℓ2 weight. Required positive for `logistic_l2`.
    pub reg: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Quadratic,
            dim: 10,
            samples_per_client: 20,
            batch_size: 5,
            eig_min: 0.5,
            eig_max: 1.0,
            signal: 0.1,
            heterogeneity: 0.05,
            label_noise: 0.05,
            reg: 0.0,
            seed: 7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::param("task.dim", "must be >= 1"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::param("task.samples_per_client", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("task.batch_size", "must be >= 1"));
        }
        if !(self.eig_min > 0.0 && self.eig_min <= self.eig_max && self.eig_max.is_finite()) {
            return Err(Error::param(
                "task.eig_min",
                format!("need 0 < eig_min <= eig_max, got {} and {}", self.eig_min, self.eig_max),
            ));
        }
        for (name, v) in [
            ("task.signal", self.signal),
            ("task.heterogeneity", self.heterogeneity),
            ("task.label_noise", self.label_noise),
            ("task.reg", self.reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.kind == TaskKind::LogisticL2 && !(self.reg > 0.0) {
            return Err(Error::param("task.reg", "logistic_l2 needs a positive regularizer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    /// n × d, one sample per row.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub clients: Vec<ClientData>,
    pub reg: f64,
    pub batch_size: usize,
    pub theta_star: ModelVector,
    pub f_star: f64,
    pub mu: f64,
    pub smoothness: f64,
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector<R: Rng>(n: usize, sd: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() }
}

fn gram(clients: &[ClientData], d: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(d, d);
    let mut n = 0usize;
    for c in clients {
        h += c.x.transpose() * &c.x;
        n += c.x.nrows();
    }
    h / n as f64
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl SyntheticTask {
    pub fn build(spec: &TaskSpec, num_clients: usize) -> Result<Self> {
        spec.validate()?;
        if num_clients == 0 {
            return Err(Error::param("num_clients", "must be >= 1"));
        }
        let d = spec.dim;
        let n = spec.samples_per_client;
        let mut xs: Vec<DMatrix<f64>> = (0..num_clients)
            .map(|k| gaussian_matrix(n, d, &mut rng::stream(spec.seed, 0, k as u64, Purpose::Task)))
            .collect();

        // Whiten so the pooled second moment becomes diag(target).
        let mut h0 = DMatrix::zeros(d, d);
        for x in &xs {
            h0 += x.transpose() * x;
        }
        h0 /= (n * num_clients) as f64;
        let eig = SymmetricEigen::new(h0);
        if eig.eigenvalues.iter().any(|v| !(*v > 1e-12)) {
            return Err(Error::NonConvergence("feature covariance is singular; add samples".into()));
        }
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
            * eig.eigenvectors.transpose();
        let target = DVector::from_vec(linspace(spec.eig_min, spec.eig_max, d));
        let t = inv_sqrt * DMatrix::from_diagonal(&target.map(f64::sqrt));
        for x in xs.iter_mut() {
            *x = &*x * &t;
        }

        let mut srv = rng::stream(spec.seed, 1, SERVER, Purpose::Task);
        let mut center = gaussian_vector(d, 1.0, &mut srv);
        let norm = center.norm();
        if norm > 0.0 {
            center *= spec.signal / norm;
        }
        let shift_sd = spec.heterogeneity / (d as f64).sqrt();
        let clients: Vec<ClientData> = xs
            .into_iter()
            .enumerate()
            .map(|(k, x)| {
                let mut r = rng::stream(spec.seed, 1, k as u64, Purpose::Task);
                let beta = &center + gaussian_vector(d, shift_sd, &mut r);
                let noise = gaussian_vector(n, spec.label_noise, &mut r);
                let score = &x * beta + noise;
                let y = match spec.kind {
                    TaskKind::Quadratic => score,
                    TaskKind::LogisticL2 => score.map(|s| if s >= 0.0 { 1.0 } else { -1.0 }),
                };
                ClientData { x, y }
            })
            .collect();

        let mut task = SyntheticTask {
            kind: spec.kind,
            clients,
            reg: spec.reg,
            batch_size: spec.batch_size,
            theta_star: DVector::zeros(d),
            f_star: 0.0,
            mu: 0.0,
            smoothness: 0.0,
        };
        let g = gram(&task.clients, d);
        let ev = SymmetricEigen::new(g.clone()).eigenvalues;
        let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        match spec.kind {
            TaskKind::Quadratic => {
                let mut b = DVector::zeros(d);
                for c in &task.clients {
                    b += c.x.transpose() * &c.y;
                }
                b /= (n * num_clients) as f64;
                let h = g + DMatrix::identity(d, d) * spec.reg;
                task.theta_star = h
                    .cholesky()
                    .ok_or_else(|| Error::NonConvergence("quadratic Hessian not positive definite".into()))?
                    .solve(&b);
                task.mu = lo + spec.reg;
                task.smoothness = hi + spec.reg;
            }
            TaskKind::LogisticL2 => {
                task.theta_star = task.newton_solve(1e-10, 100)?;
                task.mu = spec.reg;
                task.smoothness = spec.reg + hi / 4.0;
            }
        }
        task.f_star = task.loss(&task.theta_star);
        Ok(task)
    }

    fn newton_solve(&self, tol: f64, max_iters: usize) -> Result<ModelVector> {
        let d = self.dim();
        let mut theta = DVector::zeros(d);
        for _ in 0..max_iters {
            let g = self.grad(&theta);
            if g.norm() < tol {
                return Ok(theta);
            }
            let mut h = DMatrix::zeros(d, d);
            let mut n = 0usize;
            for c in &self.clients {
                for i in 0..c.x.nrows() {
                    let row = c.x.row(i).transpose();
                    let s = sigmoid(c.y[i] * row.dot(&theta));
                    h += &row * row.transpose() * (s * (1.0 - s));
                }
                n += c.x.nrows();
            }
            h = h / n as f64 + DMatrix::identity(d, d) * self.reg;
            let step = h
                .cholesky()
                .ok_or_else(|| Error::NonConvergence("logistic Hessian not positive definite".into()))?
                .solve(&g);
            theta -= step;
        }
        Err(Error::NonConvergence(format!("Newton solver did not reach gradient norm {tol}")))
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn sample_loss(&self, c: &ClientData, i: usize, theta: &ModelVector) -> f64 {
        let z = c.x.row(i).transpose().dot(theta);
        let data = match self.kind {
            TaskKind::Quadratic => 0.5 * (z - c.y[i]).powi(2),
            TaskKind::LogisticL2 => softplus(-c.y[i] * z),
        };
        data + 0.5 * self.reg * theta.norm_squared()
    }

    /// ∇ of one sample's loss (regularizer included).
    pub fn sample_grad(&self, k: usize, i: usize, theta: &ModelVector) -> ModelVector {
        let c = &self.clients[k];
        let row = c.x.row(i).transpose();
        let z = row.dot(theta);
        let coef = match self.kind {
            TaskKind::Quadratic => z - c.y[i],
            TaskKind::LogisticL2 => -c.y[i] * sigmoid(-c.y[i] * z),
        };
        row * coef + theta * self.reg
    }

    pub fn client_loss(&self, k: usize, theta: &ModelVector) -> f64 {
        let c = &self.clients[k];
        (0..c.x.nrows()).map(|i| self.sample_loss(c, i, theta)).sum::<f64>() / c.x.nrows() as f64
    }

    pub fn client_grad(&self, k: usize, theta: &ModelVector) -> ModelVector {
        let n = self.clients[k].x.nrows();
        let mut g = DVector::zeros(self.dim());
        for i in 0..n {
            g += self.sample_grad(k, i, theta);
        }
        g / n as f64
    }

    /// Global loss f(θ) = mean of the client losses.
    pub fn loss(&self, theta: &ModelVector) -> f64 {
        (0..self.num_clients()).map(|k| self.client_loss(k, theta)).sum::<f64>() / self.num_clients() as f64
    }

    pub fn grad(&self, theta: &ModelVector) -> ModelVector {
        let mut g = DVector::zeros(self.dim());
        for k in 0..self.num_clients() {
            g += self.client_grad(k, theta);
        }
        g / self.num_clients() as f64
    }

    pub fn suboptimality(&self, theta: &ModelVector) -> f64 {
        self.loss(theta) - self.f_star
    }

    /// Gradient over `batch_size` samples drawn with replacement, or the
    /// full local batch when `batch_size >= n`.
    pub fn minibatch_grad<R: Rng + ?Sized>(&self, k: usize, theta: &ModelVector, rng: &mut R) -> ModelVector {
        let n = self.clients[k].x.nrows();
        if self.batch_size >= n {
            return self.client_grad(k, theta);
        }
        let mut g = DVector::zeros(self.dim());
        for _ in 0..self.batch_size {
            g += self.sample_grad(k, rng.random_range(0..n), theta);
        }
        g / self.batch_size as f64
    }

    /// Exact 𝔼‖minibatch gradient‖² = ‖∇f_k‖² + tr(Cov)/b.
    pub fn expected_minibatch_sq_norm(&self, k: usize, theta: &ModelVector) -> f64 {
        let n = self.clients[k].x.nrows();
        let grads: Vec<ModelVector> = (0..n).map(|i| self.sample_grad(k, i, theta)).collect();
        let mean = grads.iter().fold(DVector::zeros(self.dim()), |acc, g| acc + g) / n as f64;
        if self.batch_size >= n {
            return mean.norm_squared();
        }
        let var = grads.iter().map(|g| (g - &mean).norm_squared()).sum::<f64>() / n as f64;
        mean.norm_squared() + var / self.batch_size as f64
    }

    /// Certified A3 constant: `headroom` times the largest client-mean
    /// 𝔼‖minibatch gradient‖² seen on a noise-free, full-participation run
    /// of `rounds` rounds with L full-batch local steps per round and the
    /// step size 4/(μ(a+t)).
    pub fn certify_grad_bound(&self, rounds: usize, local_steps: usize, offset: f64, headroom: f64) -> f64 {
        let k = self.num_clients();
        let mut theta = DVector::zeros(self.dim());
        let mut worst: f64 = 0.0;
        for t in 0..rounds.max(1) {
            let eta = 4.0 / (self.mu * (offset + t as f64));
            let mut locals: Vec<ModelVector> = vec![theta.clone(); k];
            let mut sums: Vec<ModelVector> = vec![DVector::zeros(self.dim()); k];
            for _ in 0..local_steps.max(1) {
                let mut level = 0.0;
                for c in 0..k {
                    level += self.expected_minibatch_sq_norm(c, &locals[c]);
                    let g = self.client_grad(c, &locals[c]);
                    locals[c] -= &g * eta;
                    sums[c] += g;
                }
                worst = worst.max(level / k as f64);
            }
            let mean = sums.iter().fold(DVector::zeros(self.dim()), |acc, g| acc + g) / k as f64;
            theta -= mean * eta;
        }
        headroom * worst
    }
}
