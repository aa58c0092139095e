// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over filtered activations.
//!
//! `Z = ReLU(A W_eᵀ + b_e)`, `Â = Z D + b_dec`, with `D` stored as
//! `[latent, input]` so that each row is one dictionary direction. The
//! objective is
//!
//! ```text
//! L = ‖Â − A‖² / V  +  α · s · ‖Ê − E‖² / V  +  λ · Σ Z
//! ```
//!
//! where `V = ‖A − 1μᵀ‖²` is the batch variance, `E = Â − A` the residual and
//! `Ê` the reconstruction of `E` from the most stale dead latents. Gradients
//! are written out by hand.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::optim::{AdamWConfig, OptimizerState, ParamSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    /// Defaults to `latent_dim / 2`.
    #[serde(default)]
    pub k_aux: Option<usize>,
    #[serde(default = "default_dead")]
    pub dead_threshold: u64,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub steps: usize,
    /// Use `‖E‖² / B` instead of the variance-normalized reconstruction term.
    #[serde(default)]
    pub plain_mse: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f32 {
    1e-3
}
fn default_alpha() -> f32 {
    1.0 / 32.0
}
fn default_dead() -> u64 {
    200
}
fn default_lr() -> f32 {
    1e-5
}
fn default_batch() -> usize {
    8
}

impl SaeConfig {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            lambda: default_lambda(),
            alpha: default_alpha(),
            k_aux: None,
            dead_threshold: default_dead(),
            lr: default_lr(),
            batch_size: default_batch(),
            steps: 0,
            plain_mse: false,
            seed: 0,
        }
    }

    pub fn k_aux(&self) -> usize {
        self.k_aux.unwrap_or(self.latent_dim / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("SAE dimensions must be >= 1".into()));
        }
        if self.k_aux() > self.latent_dim {
            return Err(Error::Config(format!(
                "k_aux {} exceeds latent_dim {}",
                self.k_aux(),
                self.latent_dim
            )));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("lambda and alpha must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeLoss {
    pub fvu: f32,
    pub auxk: f32,
    pub l1: f32,
    pub total: f32,
}

#[derive(Clone, Debug)]
pub struct SaeState {
    pub config: SaeConfig,
    pub w_e: Tensor,
    pub b_e: Tensor,
    pub decoder: Tensor,
    pub b_dec: Tensor,
    /// Steps since each latent last fired.
    pub fire_counters: Vec<u64>,
    pub step: u64,
    optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaeManifest {
    config: SaeConfig,
    step: u64,
    fire_counters: Vec<u64>,
    tensors: Vec<String>,
}

struct Forward {
    pre: Tensor,
    codes: Tensor,
    recon: Tensor,
}

const NAMES: [&str; 4] = ["w_e", "b_e", "decoder", "b_dec"];

impl SaeState {
    /// Random unit-norm encoder rows, decoder rows equal to the encoder rows,
    /// zero biases.
    pub fn init(config: SaeConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (l, n) = (config.latent_dim, config.input_dim);
        let mut w_e = rng.normal(&[l, n], 1.0);
        normalize_rows(&mut w_e);
        Ok(Self {
            decoder: w_e.clone(),
            w_e,
            b_e: Tensor::zeros(&[l]),
            b_dec: Tensor::zeros(&[n]),
            fire_counters: vec![0; l],
            step: 0,
            optimizer: None,
            config,
        })
    }

    pub fn params(&self) -> ParamSet {
        NAMES
            .iter()
            .zip([&self.w_e, &self.b_e, &self.decoder, &self.b_dec])
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    fn set_params(&mut self, mut p: ParamSet) {
        self.w_e = p.remove("w_e").expect("w_e");
        self.b_e = p.remove("b_e").expect("b_e");
        self.decoder = p.remove("decoder").expect("decoder");
        self.b_dec = p.remove("b_dec").expect("b_dec");
    }

    /// Mutable access by parameter name (`w_e`, `b_e`, `decoder`, `b_dec`).
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "w_e" => Some(&mut self.w_e),
            "b_e" => Some(&mut self.b_e),
            "decoder" => Some(&mut self.decoder),
            "b_dec" => Some(&mut self.b_dec),
            _ => None,
        }
    }

    /// SHA-256 over the four parameter tensors.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for t in [&self.w_e, &self.b_e, &self.decoder, &self.b_dec] {
            bytes.extend(t.to_le_bytes());
        }
        io::sha256_hex(&bytes)
    }

    fn check_batch(&self, a: &Tensor) -> Result<()> {
        if a.ndim() != 2 || a.cols() != self.config.input_dim {
            return Err(Error::Input(format!(
                "SAE expects [B, {}], got {:?}",
                self.config.input_dim,
                a.shape()
            )));
        }
        a.ensure_finite("SAE input")
    }

    /// `ReLU(W_e a + b_e)` for one activation vector.
    pub fn encode(&self, a: &Tensor) -> Result<Tensor> {
        if a.len() != self.config.input_dim {
            return Err(Error::Input(format!(
                "SAE input width {}, expected {}",
                a.len(),
                self.config.input_dim
            )));
        }
        let b = a.clone().reshape(&[1, a.len()])?;
        let z = self.encode_batch(&b)?;
        z.reshape(&[self.config.latent_dim])
    }

    pub fn encode_batch(&self, a: &Tensor) -> Result<Tensor> {
        self.check_batch(a)?;
        Ok(self.pre_activations(a)?.map(|v| v.max(0.0)))
    }

    fn pre_activations(&self, a: &Tensor) -> Result<Tensor> {
        let mut p = a.matmul(&self.w_e.transpose())?;
        for i in 0..p.rows() {
            for (v, b) in p.row_mut(i).iter_mut().zip(self.b_e.data()) {
                *v += b;
            }
        }
        Ok(p)
    }

    /// `Decᵀ z + b_dec` for one code.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Input(format!(
                "SAE code width {}, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        z.ensure_finite("SAE code")?;
        let b = z.clone().reshape(&[1, z.len()])?;
        self.decode_batch(&b)?.reshape(&[self.config.input_dim])
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut r = z.matmul(&self.decoder)?;
        for i in 0..r.rows() {
            for (v, b) in r.row_mut(i).iter_mut().zip(self.b_dec.data()) {
                *v += b;
            }
        }
        Ok(r)
    }

    fn forward(&self, a: &Tensor) -> Result<Forward> {
        self.check_batch(a)?;
        let pre = self.pre_activations(a)?;
        let codes = pre.map(|v| v.max(0.0));
        let recon = self.decode_batch(&codes)?;
        Ok(Forward { pre, codes, recon })
    }

    /// Latents that have not fired for `dead_threshold` steps.
    pub fn dead_latents(&self) -> Vec<usize> {
        (0..self.config.latent_dim)
            .filter(|&j| self.fire_counters[j] >= self.config.dead_threshold)
            .collect()
    }

    /// Up to `k_aux` dead latents, most stale first, ties to the lower index.
    pub fn aux_latents(&self) -> Vec<usize> {
        let mut dead = self.dead_latents();
        dead.sort_by(|&a, &b| self.fire_counters[b].cmp(&self.fire_counters[a]).then(a.cmp(&b)));
        dead.truncate(self.config.k_aux());
        dead
    }

    fn aux_scale(&self) -> f32 {
        let n_dead = self.dead_latents().len();
        (n_dead as f32 / self.config.k_aux() as f32).min(1.0)
    }

    /// `Ê`: the selected dead latents' pre-activations decoded without bias.
    fn aux_reconstruction(&self, pre: &Tensor, aux: &[usize]) -> Result<Tensor> {
        let p_s = pre.select_cols(aux)?;
        let d_s = self.decoder.select_rows(aux)?;
        p_s.matmul(&d_s)
    }

    /// `s ‖Ê − E‖² / V`, zero when no latent is dead.
    pub fn loss_auxk(&self, a: &Tensor, residual: &Tensor) -> Result<f32> {
        let aux = self.aux_latents();
        if aux.is_empty() {
            return Ok(0.0);
        }
        self.check_batch(a)?;
        let v = batch_variance(a)?;
        let e_hat = self.aux_reconstruction(&self.pre_activations(a)?, &aux)?;
        Ok((self.aux_scale() as f64 * sq_dist(&e_hat, residual)? / v) as f32)
    }

    pub fn loss_total(&self, a: &Tensor) -> Result<SaeLoss> {
        Ok(self.evaluate(a, false)?.0)
    }

    /// Loss components and gradients for every parameter.
    pub fn gradients(&self, a: &Tensor) -> Result<(SaeLoss, ParamSet)> {
        let (loss, grads, _) = self.evaluate(a, true)?;
        Ok((loss, grads.expect("requested")))
    }

    fn evaluate(&self, a: &Tensor, want_grads: bool) -> Result<(SaeLoss, Option<ParamSet>, Tensor)> {
        let cfg = &self.config;
        let f = self.forward(a)?;
        let v = batch_variance(a)?;
        let (b, n, l) = (a.rows(), cfg.input_dim, cfg.latent_dim);
        let e = f.recon.sub(a)?;
        let rec_scale = if cfg.plain_mse { 1.0 / b as f64 } else { 1.0 / v };
        let fvu = (e.sum_sq_f64() * rec_scale) as f32;
        let l1 = f.codes.data().iter().map(|&z| z as f64).sum::<f64>() as f32;
        let aux = self.aux_latents();
        let s = self.aux_scale();
        let (auxk, delta) = if aux.is_empty() {
            (0.0, None)
        } else {
            let e_hat = self.aux_reconstruction(&f.pre, &aux)?;
            let delta = e_hat.sub(&e)?;
            ((s as f64 * delta.sum_sq_f64() / v) as f32, Some(delta))
        };
        let total = fvu + cfg.alpha * auxk + cfg.lambda * l1;
        let loss = SaeLoss { fvu, auxk, l1, total };
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite SAE loss {loss:?}")));
        }
        if !want_grads {
            return Ok((loss, None, f.codes));
        }

        let mut g_e = e.scale((2.0 * rec_scale) as f32);
        let mut g_ehat = None;
        if let Some(delta) = &delta {
            let c = (2.0 * cfg.alpha as f64 * s as f64 / v) as f32;
            g_e.axpy(-c, delta)?;
            g_ehat = Some(delta.scale(c));
        }

        let mut d_dec = f.codes.transpose().matmul(&g_e)?;
        let db_dec = g_e.mean_rows().scale(b as f32);
        let mut d_pre = g_e.matmul(&self.decoder.transpose())?;
        for (dp, (&p, _)) in d_pre.data_mut().iter_mut().zip(f.pre.data().iter().zip(f.codes.data())) {
            *dp = if p > 0.0 { *dp + cfg.lambda } else { 0.0 };
        }
        if let Some(gh) = &g_ehat {
            let d_s = self.decoder.select_rows(&aux)?;
            let dp_s = gh.matmul(&d_s.transpose())?;
            let p_s = f.pre.select_cols(&aux)?;
            let dd_s = p_s.transpose().matmul(gh)?;
            for (k, &j) in aux.iter().enumerate() {
                for i in 0..b {
                    d_pre.data_mut()[i * l + j] += dp_s.data()[i * aux.len() + k];
                }
                for c in 0..n {
                    d_dec.data_mut()[j * n + c] += dd_s.data()[k * n + c];
                }
            }
        }
        let dw_e = d_pre.transpose().matmul(a)?;
        let db_e = d_pre.mean_rows().scale(b as f32);
        let grads: ParamSet = NAMES
            .iter()
            .map(|s| s.to_string())
            .zip([dw_e, db_e, d_dec, db_dec])
            .collect();
        Ok((loss, Some(grads), f.codes))
    }

    /// One optimizer step on `batch`, then decoder renormalization and
    /// fire-counter bookkeeping.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<SaeLoss> {
        let (loss, grads, codes) = self.evaluate(batch, true)?;
        let grads = grads.expect("requested");
        let mut params = self.params();
        let opt = match &mut self.optimizer {
            Some(o) => o,
            None => self
                .optimizer
                .insert(OptimizerState::new(AdamWConfig::new(self.config.lr))?),
        };
        opt.step(&mut params, &grads)?;
        self.set_params(params);
        normalize_rows(&mut self.decoder);
        for j in 0..self.config.latent_dim {
            let fired = (0..codes.rows()).any(|i| codes.at(i, j) > 0.0);
            self.fire_counters[j] = if fired { 0 } else { self.fire_counters[j] + 1 };
        }
        self.step += 1;
        Ok(loss)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, t) in self.params() {
            io::write_fstn(&dir.join(format!("{name}.fstn")), &t)?;
        }
        io::write_json(
            &dir.join("sae.json"),
            &SaeManifest {
                config: self.config.clone(),
                step: self.step,
                fire_counters: self.fire_counters.clone(),
                tensors: NAMES.iter().map(|n| format!("{n}.fstn")).collect(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: SaeManifest = io::read_json(&dir.join("sae.json"))?;
        let read = |n: &str| io::read_fstn(&dir.join(format!("{n}.fstn")));
        let (l, n) = (m.config.latent_dim, m.config.input_dim);
        let s = Self {
            w_e: read("w_e")?,
            b_e: read("b_e")?,
            decoder: read("decoder")?,
            b_dec: read("b_dec")?,
            fire_counters: m.fire_counters,
            step: m.step,
            optimizer: None,
            config: m.config,
        };
        let ok = s.w_e.shape() == [l, n]
            && s.b_e.shape() == [l]
            && s.decoder.shape() == [l, n]
            && s.b_dec.shape() == [n]
            && s.fire_counters.len() == l;
        if !ok {
            return Err(Error::Format("SAE checkpoint shapes disagree with its config".into()));
        }
        Ok(s)
    }
}

/// `‖Â − A‖² / ‖A − 1μᵀ‖²`.
pub fn loss_fvu(a: &Tensor, recon: &Tensor) -> Result<f32> {
    if a.shape() != recon.shape() {
        return Err(Error::Dimension(format!(
            "fvu: {:?} vs {:?}",
            a.shape(),
            recon.shape()
        )));
    }
    Ok((sq_dist(recon, a)? / batch_variance(a)?) as f32)
}

/// Sum of the (non-negative) codes.
pub fn loss_l1(z: &Tensor) -> f32 {
    z.data().iter().map(|&v| v.abs() as f64).sum::<f64>() as f32
}

/// `‖A − 1μᵀ‖²`; needs `B >= 2` and a non-constant batch.
pub fn batch_variance(a: &Tensor) -> Result<f64> {
    if a.ndim() != 2 || a.rows() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "need at least 2 rows, got shape {:?}",
            a.shape()
        )));
    }
    let (b, n) = (a.rows(), a.cols());
    let mut mean = vec![0.0f64; n];
    for i in 0..b {
        for (m, &x) in mean.iter_mut().zip(a.row(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut v = 0.0f64;
    for i in 0..b {
        for (m, &x) in mean.iter().zip(a.row(i)) {
            v += (x as f64 - m).powi(2);
        }
    }
    if v <= 0.0 {
        return Err(Error::DegenerateBatch("batch has zero variance".into()));
    }
    Ok(v)
}

fn sq_dist(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum())
}

trait SumSqF64 {
    fn sum_sq_f64(&self) -> f64;
}

impl SumSqF64 for Tensor {
    fn sum_sq_f64(&self) -> f64 {
        self.data().iter().map(|&x| (x as f64).powi(2)).sum()
    }
}

fn normalize_rows(t: &mut Tensor) {
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn column_median(a: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(a.cols());
    for j in 0..a.cols() {
        let mut col: Vec<f32> = (0..a.rows()).map(|i| a.at(i, j)).collect();
        col.sort_by(f32::total_cmp);
        let m = col.len() / 2;
        out.push(if col.len() % 2 == 0 { 0.5 * (col[m - 1] + col[m]) } else { col[m] });
    }
    Tensor::from_vec(out)
}

/// Train on the rows of `data` (`[N, input_dim]`). Batches are drawn without
/// replacement within a step; `b_dec` starts at the median of the first batch.
pub fn train_sae(config: &SaeConfig, data: &Tensor) -> Result<(SaeState, Vec<SaeLoss>)> {
    config.validate()?;
    if data.ndim() != 2 || data.cols() != config.input_dim {
        return Err(Error::Input(format!(
            "training data {:?}, expected [N, {}]",
            data.shape(),
            config.input_dim
        )));
    }
    if data.rows() < config.batch_size {
        return Err(Error::Input(format!(
            "{} records, batch size {}",
            data.rows(),
            config.batch_size
        )));
    }
    let base = RngStream::new(config.seed);
    let mut state = SaeState::init(config.clone(), &mut base.fork(0))?;
    let mut rng = base.fork(1);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let rows = rng.sample_indices(data.rows(), config.batch_size);
        let batch = data.select_rows(&rows)?;
        if step == 0 {
            state.b_dec = column_median(&batch);
        }
        trace.push(state.train_step(&batch)?);
    }
    Ok((state, trace))
}

/// `step,fvu,auxk,l1,total` rows.
pub fn loss_trace_csv(trace: &[SaeLoss]) -> String {
    let mut s = String::from("step,fvu,auxk,l1,total\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", l.fvu, l.auxk, l.l1, l.total);
    }
    s
}

/// Mean number of entries above `1e-6` per code.
pub fn mean_l0(codes: &Tensor) -> f32 {
    let active = codes.data().iter().filter(|&&v| v > 1e-6).count();
    active as f32 / codes.rows().max(1) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, l: usize, seed: u64) -> SaeState {
        let mut rng = RngStream::new(seed);
        let mut s = SaeState::init(SaeConfig::new(n, l), &mut rng).unwrap();
        s.b_e = rng.normal(&[l], 0.1);
        s.b_dec = rng.normal(&[n], 0.1);
        s
    }

    #[test]
    fn zero_encoder_gives_zero_code() {
        let mut s = state(3, 4, 0);
        s.w_e = Tensor::zeros(&[4, 3]);
        s.b_e = Tensor::zeros(&[4]);
        let z = s.encode(&Tensor::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        s.w_e = RngStream::new(1).normal(&[4, 3], 1.0);
        s.b_e = Tensor::full(&[4], -1e6);
        let z = s.encode(&Tensor::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_matches_naive_oracle() {
        let s = state(5, 7, 2);
        let a = RngStream::new(9).normal(&[5], 1.0);
        let z = s.encode(&a).unwrap();
        for j in 0..7 {
            let mut acc = s.b_e.data()[j];
            for k in 0..5 {
                acc += s.w_e.at(j, k) * a.data()[k];
            }
            assert!((z.data()[j] - acc.max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_of_zero_and_one_hot() {
        let s = state(3, 4, 3);
        assert_eq!(s.decode(&Tensor::zeros(&[4])).unwrap(), s.b_dec);
        let mut z = Tensor::zeros(&[4]);
        z.data_mut()[2] = 1.0;
        let r = s.decode(&z).unwrap();
        for k in 0..3 {
            assert!((r.data()[k] - s.decoder.at(2, k) - s.b_dec.data()[k]).abs() < 1e-6);
        }
        assert!(s.encode(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn fvu_cases() {
        let a = RngStream::new(4).normal(&[6, 3], 1.0);
        assert_eq!(loss_fvu(&a, &a).unwrap(), 0.0);
        let mean = a.mean_rows();
        let mu = Tensor::stack(&vec![mean; 6]).unwrap();
        assert!((loss_fvu(&a, &mu).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(
            loss_fvu(&Tensor::ones(&[4, 2]), &Tensor::ones(&[4, 2])),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn auxk_scale_and_inactivity() {
        let mut s = state(4, 8, 5);
        let a = RngStream::new(6).normal(&[5, 4], 1.0);
        let e = RngStream::new(7).normal(&[5, 4], 1.0);
        assert_eq!(s.loss_auxk(&a, &e).unwrap(), 0.0);
        let l = s.loss_total(&a).unwrap();
        assert_eq!(l.auxk, 0.0);
        assert!((l.total - (l.fvu + s.config.lambda * l.l1)).abs() < 1e-6);

        // k_aux = 4; two dead latents give s = 1/2
        s.fire_counters = vec![300, 250, 0, 0, 0, 0, 0, 0];
        let half = s.loss_auxk(&a, &e).unwrap();
        s.fire_counters = vec![300, 250, 0, 0, 0, 0, 0, 0];
        s.config.k_aux = Some(2);
        let full = s.loss_auxk(&a, &e).unwrap();
        assert!((half * 2.0 - full).abs() < 1e-5 * full.abs());
    }

    #[test]
    fn aux_order_is_most_stale_first() {
        let mut s = state(2, 6, 0);
        s.config.k_aux = Some(2);
        s.fire_counters = vec![200, 500, 0, 500, 300, 10];
        assert_eq!(s.aux_latents(), vec![1, 3]);
    }

    #[test]
    fn l1_is_abs_sum() {
        assert_eq!(loss_l1(&Tensor::ones(&[2, 3])), 6.0);
        assert_eq!(loss_l1(&Tensor::zeros(&[2, 3])), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = state(3, 5, 1);
        s.fire_counters = vec![1, 2, 3, 4, 5];
        s.step = 17;
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = SaeState::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), s.checksum());
        assert_eq!(back.fire_counters, s.fire_counters);
        assert_eq!(back.step, 17);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let cfg = SaeConfig {
            steps: 0,
            batch_size: 2,
            ..SaeConfig::new(3, 4)
        };
        let data = RngStream::new(0).normal(&[4, 3], 1.0);
        let (s, trace) = train_sae(&cfg, &data).unwrap();
        let fresh = SaeState::init(cfg.clone(), &mut RngStream::new(0).fork(0)).unwrap();
        assert_eq!(s.checksum(), fresh.checksum());
        assert!(trace.is_empty());
    }

    #[test]
    fn decoder_rows_stay_unit_norm() {
        let cfg = SaeConfig {
            steps: 20,
            batch_size: 4,
            lr: 1e-2,
            ..SaeConfig::new(3, 6)
        };
        let data = RngStream::new(0).normal(&[16, 3], 1.0);
        let (s, _) = train_sae(&cfg, &data).unwrap();
        for i in 0..6 {
            let n: f32 = s.decoder.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
