//! Mixture conditional variational auto-encoder.
//!
//! The regression model: a conditional prior encoder maps the cause X to a
//! condition code and a Gaussian prior over the latent; K posterior heads
//! map (X, Y) to per-component Gaussians; a weight encoder maps (X, Y) to
//! component probabilities on the simplex; a shared decoder maps
//! (latent, condition code) to a Gaussian over the effect. The mixture
//! prediction is the weight-blended decoder mean, and the evidence lower
//! bound decomposes into reconstruction, Gaussian KL and categorical KL
//! terms.
//!
//! Conventions fixed here:
//! - the categorical prior p(c|X) is uniform 1/K; the posterior q(c|X,Y)
//!   comes from the weight encoder,
//! - the expectation over components is computed analytically (weighted sum
//!   over all K), with one reparameterization draw per sample per step,
//! - the reconstruction likelihood is Gaussian with a learned log-variance
//!   per component (one scalar each, so every component is an additive-noise
//!   regressor), clamped like every other log-variance to the configured
//!   interval,
//! - training anneals the KL weight from 0 to 1 over the first half of the
//!   epochs to keep the posterior from collapsing before the mixture can
//!   specialize; the reported loss trace is always the unannealed bound.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::shuffle;
use crate::error::{Error, Result};
use crate::nn::{
    mlp_forward, AdamState, Activation, Matrix, MlpSpec, OutputActivation, ParamStore, Tape, Var,
};
use crate::seed;

const LN_2PI: f64 = 1.8378770664093453;

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureCvaeConfig {
    /// Mixture component count K.
    pub k: usize,
    /// Latent dimension per component.
    pub latent_dim: usize,
    /// Width of the condition code.
    pub cond_dim: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Clamp interval for every emitted log-variance.
    pub logvar_clip: (f64, f64),
}

impl Default for MixtureCvaeConfig {
    fn default() -> Self {
        MixtureCvaeConfig {
            k: 2,
            latent_dim: 2,
            cond_dim: 2,
            hidden_width: 32,
            epochs: 600,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            logvar_clip: (-7.0, 7.0),
        }
    }
}

impl MixtureCvaeConfig {
    /// Checks invariants against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("component count K must be >= 1".into()));
        }
        if self.latent_dim < 1 || self.cond_dim < 1 || self.hidden_width < 1 {
            return Err(Error::Config("network widths must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} must lie in [1, {n}]",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.logvar_clip.0 > self.logvar_clip.1 {
            return Err(Error::Config("empty logvar clip interval".into()));
        }
        Ok(())
    }

    /// Copy with the batch size capped at the dataset size (resolution step
    /// for pipeline callers; `validate` itself stays strict).
    pub fn resolved_for(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.batch_size = c.batch_size.min(n).max(1);
        c
    }
}

/// Network shapes (parameter prefixes: `prior`, `post{k}`, `wenc`, `dec`).
#[derive(Debug, Clone)]
struct Nets {
    prior: MlpSpec,
    posterior: MlpSpec,
    weights: MlpSpec,
    decoder: MlpSpec,
}

impl Nets {
    fn build(c: &MixtureCvaeConfig) -> Result<Self> {
        let h = c.hidden_width;
        Ok(Nets {
            prior: MlpSpec::new(
                vec![1, h, c.cond_dim + 2 * c.latent_dim],
                Activation::Tanh,
                OutputActivation::Identity,
            )?,
            posterior: MlpSpec::new(
                vec![2, h, 2 * c.latent_dim],
                Activation::Tanh,
                OutputActivation::Identity,
            )?,
            weights: MlpSpec::new(vec![2, h, c.k], Activation::Tanh, OutputActivation::Identity)?,
            decoder: MlpSpec::new(
                vec![c.latent_dim + c.cond_dim, h, 1],
                Activation::Tanh,
                OutputActivation::Identity,
            )?,
        })
    }
}

fn decoder_logvar_name(k: usize) -> String {
    format!("dec.lv{k}")
}

/// Per-batch decomposition of the bound (all batch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// Expected reconstruction log-likelihood.
    pub recon: f64,
    /// Component-weighted Gaussian KL to the conditional prior.
    pub kl_gauss: f64,
    /// Categorical KL of the component posterior to the uniform prior.
    pub kl_cat: f64,
    /// `recon − kl_gauss − kl_cat`.
    pub elbo: f64,
    /// `−elbo`; the training objective.
    pub loss: f64,
}

/// Tape handles for the bound's pieces; `loss` is the backward root.
pub struct ElboVars {
    pub recon: Var,
    pub kl_gauss: Var,
    pub kl_cat: Var,
    pub elbo: Var,
    pub loss: Var,
}

/// `Z = μ + σ ⊙ noise`. Gradients flow to `μ` and `σ`, not the noise.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, noise: Var) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|&s| s < 0.0) {
        return Err(Error::Numeric(
            "reparameterize requires non-negative sigma".into(),
        ));
    }
    let scaled = tape.mul(sigma, noise);
    Ok(tape.add(mu, scaled))
}

/// The trained (or initialized) model: all parameters plus hyperparameters.
#[derive(Debug, Clone)]
pub struct MixtureCvaeModel {
    config: MixtureCvaeConfig,
    nets: Nets,
    store: ParamStore,
}

/// Serialized model container; parameter round-trips are bit-exact.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: MixtureCvaeConfig,
    params: ParamStore,
}

impl MixtureCvaeModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: MixtureCvaeConfig) -> Result<Self> {
        config.validate(usize::MAX)?;
        let nets = Nets::build(&config)?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed::derive(config.seed, 0x1217));
        nets.prior.init_params(&mut store, "prior", &mut rng);
        for k in 0..config.k {
            nets.posterior
                .init_params(&mut store, &format!("post{k}"), &mut rng);
        }
        nets.weights.init_params(&mut store, "wenc", &mut rng);
        nets.decoder.init_params(&mut store, "dec", &mut rng);
        for k in 0..config.k {
            store.insert(&decoder_logvar_name(k), Matrix::zeros(1, 1));
        }
        Ok(MixtureCvaeModel {
            config,
            nets,
            store,
        })
    }

    pub fn config(&self) -> &MixtureCvaeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Condition code and conditional prior `(Z_con, μ_prior, logvar_prior)`.
    pub fn encode_prior(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (z_con, mu, lv) = self.prior_on_tape(&mut tape, xv)?;
        Ok((
            tape.value(z_con).clone(),
            tape.value(mu).clone(),
            tape.value(lv).clone(),
        ))
    }

    /// K per-component `(μ_k, σ_k)` pairs; `σ_k = exp(½·clamped logvar)`.
    pub fn encode_posterior(&self, x: &Matrix, y: &Matrix) -> Result<Vec<(Matrix, Matrix)>> {
        let mut tape = Tape::new();
        let xy = self.xy_on_tape(&mut tape, x, y)?;
        let mut out = Vec::with_capacity(self.config.k);
        for k in 0..self.config.k {
            let (mu, lv) = self.posterior_on_tape(&mut tape, xy, k)?;
            let half = tape.scale(lv, 0.5);
            let sigma = tape.exp(half);
            out.push((tape.value(mu).clone(), tape.value(sigma).clone()));
        }
        Ok(out)
    }

    /// `q(c|X,Y)` rows on the K-simplex.
    pub fn component_weights(&self, x: &Matrix, y: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xy = self.xy_on_tape(&mut tape, x, y)?;
        let logits = mlp_forward(&mut tape, &self.nets.weights, &self.store, "wenc", xy)?;
        let w = tape.softmax_rows(logits);
        Ok(tape.value(w).clone())
    }

    /// Dataset-level mixture weight estimates: column means of `q(c|X,Y)`.
    pub fn mixture_weights(&self, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
        let q = self.component_weights(x, y)?;
        let n = q.rows() as f64;
        Ok((0..q.cols())
            .map(|k| (0..q.rows()).map(|r| q.get(r, k)).sum::<f64>() / n)
            .collect())
    }

    /// Component `k`'s reconstruction Gaussian `(mean, logvar)`; the mean
    /// comes from the shared decoder network, the log-variance is that
    /// component's learned scalar broadcast over the batch.
    pub fn decode(&self, k: usize, z: &Matrix, z_con: &Matrix) -> Result<(Matrix, Matrix)> {
        if z.rows() != z_con.rows() {
            return Err(Error::Dimension(format!(
                "decode: z has {} rows, z_con {}",
                z.rows(),
                z_con.rows()
            )));
        }
        if k >= self.config.k {
            return Err(Error::Config(format!(
                "component {k} out of range (K={})",
                self.config.k
            )));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let cv = tape.constant(z_con.clone());
        let joined = tape.concat_cols(zv, cv);
        let mean = mlp_forward(&mut tape, &self.nets.decoder, &self.store, "dec", joined)?;
        let lv_scalar = self
            .store
            .get(&decoder_logvar_name(k))?
            .get(0, 0)
            .clamp(self.config.logvar_clip.0, self.config.logvar_clip.1);
        let mut lv = Matrix::zeros(z.rows(), 1);
        lv.fill(lv_scalar);
        Ok((tape.value(mean).clone(), lv))
    }

    /// Mixture regression `Ỹ = Σ_k w_k Ỹ_k`.
    ///
    /// With `y` present the weights are `q(c|X,Y)` and each component
    /// decodes its posterior mean; without `y` the weights fall back to the
    /// uniform prior and the prior mean is decoded.
    pub fn mixture_predict(&self, x: &Matrix, y: Option<&Matrix>) -> Result<Matrix> {
        let (z_con, mu_prior, _) = self.encode_prior(x)?;
        match y {
            Some(y) => {
                let weights = self.component_weights(x, y)?;
                let posts = self.encode_posterior(x, y)?;
                let mut means = Vec::with_capacity(self.config.k);
                for (k, (mu_k, _)) in posts.iter().enumerate() {
                    let (mean, _) = self.decode(k, mu_k, &z_con)?;
                    means.push(mean);
                }
                Ok(mix_rows(&weights, &means))
            }
            None => {
                // all components share the prior mean and decoder network;
                // a uniform blend of K identical predictions is the
                // prediction itself
                let (mean, _) = self.decode(0, &mu_prior, &z_con)?;
                Ok(mean)
            }
        }
    }

    /// Draws K reparameterization noise matrices for a batch of `n`.
    pub fn sample_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        (0..self.config.k)
            .map(|_| {
                let mut m = Matrix::zeros(n, self.config.latent_dim);
                for v in m.data_mut() {
                    *v = StandardNormal.sample(rng);
                }
                m
            })
            .collect()
    }

    /// Evaluates the bound on a scratch tape (no gradients kept).
    pub fn elbo(&self, x: &Matrix, y: &Matrix, noise: &[Matrix]) -> Result<ElboTerms> {
        let mut tape = Tape::new();
        let (_, terms) = self.elbo_on_tape(&mut tape, x, y, noise)?;
        Ok(terms)
    }

    /// Mean bound over `draws` seeded noise draws (scoring helper).
    pub fn mean_elbo(&self, x: &Matrix, y: &Matrix, draws: usize, noise_seed: u64) -> Result<ElboTerms> {
        let mut rng = seed::rng(noise_seed);
        let mut acc = ElboTerms {
            recon: 0.0,
            kl_gauss: 0.0,
            kl_cat: 0.0,
            elbo: 0.0,
            loss: 0.0,
        };
        for _ in 0..draws.max(1) {
            let noise = self.sample_noise(x.rows(), &mut rng);
            let t = self.elbo(x, y, &noise)?;
            acc.recon += t.recon;
            acc.kl_gauss += t.kl_gauss;
            acc.kl_cat += t.kl_cat;
        }
        let d = draws.max(1) as f64;
        acc.recon /= d;
        acc.kl_gauss /= d;
        acc.kl_cat /= d;
        acc.elbo = acc.recon - acc.kl_gauss - acc.kl_cat;
        acc.loss = -acc.elbo;
        Ok(acc)
    }

    /// Records the full bound onto `tape`; `vars.loss` is the backward root.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        x: &Matrix,
        y: &Matrix,
        noise: &[Matrix],
    ) -> Result<(ElboVars, ElboTerms)> {
        build_elbo(
            tape,
            &self.nets,
            &self.config,
            &self.store,
            x,
            y,
            noise,
        )
    }

    /// Finite-difference check of the full loss gradient with frozen noise.
    pub fn gradient_check_elbo(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        noise: &[Matrix],
    ) -> Result<f64> {
        let nets = self.nets.clone();
        let config = self.config.clone();
        let (x, y) = (x.clone(), y.clone());
        let noise = noise.to_vec();
        crate::nn::gradient_check(&mut self.store, move |tape, store| {
            let (vars, _) = build_elbo(tape, &nets, &config, store, &x, &y, &noise)?;
            Ok(vars.loss)
        })
    }

    /// Serializes config + parameters; numeric round-trip is bit-exact.
    pub fn to_json(&self) -> Result<String> {
        let cp = Checkpoint {
            schema_version: 1,
            config: self.config.clone(),
            params: self.store.clone(),
        };
        Ok(serde_json::to_string(&cp)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cp: Checkpoint = serde_json::from_str(text)?;
        if cp.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema {}",
                cp.schema_version
            )));
        }
        cp.params.ensure_grad_buffers();
        let nets = Nets::build(&cp.config)?;
        Ok(MixtureCvaeModel {
            config: cp.config,
            nets,
            store: cp.params,
        })
    }

    fn xy_on_tape(&self, tape: &mut Tape, x: &Matrix, y: &Matrix) -> Result<Var> {
        check_columns(x, y)?;
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        Ok(tape.concat_cols(xv, yv))
    }

    fn prior_on_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        let out = mlp_forward(tape, &self.nets.prior, &self.store, "prior", x)?;
        let (c, d) = (self.config.cond_dim, self.config.latent_dim);
        let z_con = tape.slice_cols(out, 0, c);
        let mu = tape.slice_cols(out, c, d);
        let lv_raw = tape.slice_cols(out, c + d, d);
        let lv = tape.clamp(lv_raw, self.config.logvar_clip.0, self.config.logvar_clip.1);
        Ok((z_con, mu, lv))
    }

    fn posterior_on_tape(&self, tape: &mut Tape, xy: Var, k: usize) -> Result<(Var, Var)> {
        let out = mlp_forward(
            tape,
            &self.nets.posterior,
            &self.store,
            &format!("post{k}"),
            xy,
        )?;
        let d = self.config.latent_dim;
        let mu = tape.slice_cols(out, 0, d);
        let lv_raw = tape.slice_cols(out, d, d);
        let lv = tape.clamp(lv_raw, self.config.logvar_clip.0, self.config.logvar_clip.1);
        Ok((mu, lv))
    }
}

fn check_columns(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != 1 || y.cols() != 1 {
        return Err(Error::Dimension(format!(
            "expected column batches, got {}x{} and {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "batches misaligned: {} vs {} rows",
            x.rows(),
            y.rows()
        )));
    }
    Ok(())
}

/// `Σ_k w_k · m_k` row-wise over per-component column matrices.
pub fn mix_rows(weights: &Matrix, means: &[Matrix]) -> Matrix {
    let n = weights.rows();
    let mut out = Matrix::zeros(n, 1);
    for (k, m) in means.iter().enumerate() {
        for r in 0..n {
            out.set(r, 0, out.get(r, 0) + weights.get(r, k) * m.get(r, 0));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn build_elbo(
    tape: &mut Tape,
    nets: &Nets,
    config: &MixtureCvaeConfig,
    store: &ParamStore,
    x: &Matrix,
    y: &Matrix,
    noise: &[Matrix],
) -> Result<(ElboVars, ElboTerms)> {
    check_columns(x, y)?;
    if noise.len() != config.k {
        return Err(Error::Dimension(format!(
            "need {} noise matrices, got {}",
            config.k,
            noise.len()
        )));
    }
    for nz in noise {
        if nz.rows() != x.rows() || nz.cols() != config.latent_dim {
            return Err(Error::Dimension(format!(
                "noise shape {}x{}, want {}x{}",
                nz.rows(),
                nz.cols(),
                x.rows(),
                config.latent_dim
            )));
        }
    }
    let (lo, hi) = config.logvar_clip;

    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let xy = tape.concat_cols(xv, yv);

    // conditional prior
    let prior_out = mlp_forward(tape, &nets.prior, store, "prior", xv)?;
    let (c, d) = (config.cond_dim, config.latent_dim);
    let z_con = tape.slice_cols(prior_out, 0, c);
    let mu_p = tape.slice_cols(prior_out, c, d);
    let lv_p_raw = tape.slice_cols(prior_out, c + d, d);
    let lv_p = tape.clamp(lv_p_raw, lo, hi);

    // component posterior on the simplex
    let logits = mlp_forward(tape, &nets.weights, store, "wenc", xy)?;
    let logq = tape.log_softmax_rows(logits);
    let q = tape.exp(logq);

    let mut recon_rows: Option<Var> = None;
    let mut klg_rows: Option<Var> = None;
    for k in 0..config.k {
        let post_out = mlp_forward(tape, &nets.posterior, store, &format!("post{k}"), xy)?;
        let mu_k = tape.slice_cols(post_out, 0, d);
        let lv_k_raw = tape.slice_cols(post_out, d, d);
        let lv_k = tape.clamp(lv_k_raw, lo, hi);
        let half = tape.scale(lv_k, 0.5);
        let sigma_k = tape.exp(half);
        let eps = tape.constant(noise[k].clone());
        let z_k = reparameterize(tape, mu_k, sigma_k, eps)?;

        // decode to the per-component reconstruction Gaussian
        let dec_in = tape.concat_cols(z_k, z_con);
        let dec_out = mlp_forward(tape, &nets.decoder, store, "dec", dec_in)?;
        let mean_k = tape.slice_cols(dec_out, 0, 1);
        let dec_lv_raw = tape.slice_cols(dec_out, 1, 1);
        let dec_lv = tape.clamp(dec_lv_raw, lo, hi);

        // log N(y; mean, exp(dec_lv)) = −½(ln2π + ℓ + (y−m)²·e^{−ℓ})
        let diff = tape.sub(yv, mean_k);
        let sq = tape.square(diff);
        let neg_lv = tape.neg(dec_lv);
        let prec = tape.exp(neg_lv);
        let mahal = tape.mul(sq, prec);
        let inner = tape.add(dec_lv, mahal);
        let inner = tape.add_scalar(inner, LN_2PI);
        let ll_k = tape.scale(inner, -0.5);

        // KL(N(μ_k,σ_k²) ‖ N(μ_p,σ_p²)) per dim:
        // ½(e^{ℓk−ℓp} + (μk−μp)²e^{−ℓp} − 1 + ℓp − ℓk)
        let dlv = tape.sub(lv_k, lv_p);
        let ratio = tape.exp(dlv);
        let dmu = tape.sub(mu_k, mu_p);
        let dmu_sq = tape.square(dmu);
        let neg_lvp = tape.neg(lv_p);
        let prec_p = tape.exp(neg_lvp);
        let mahal_p = tape.mul(dmu_sq, prec_p);
        let s1 = tape.add(ratio, mahal_p);
        let s2 = tape.add_scalar(s1, -1.0);
        let s3 = tape.add(s2, lv_p);
        let s4 = tape.sub(s3, lv_k);
        let kld_dims = tape.scale(s4, 0.5);
        let kld_k = tape.sum_rows(kld_dims);

        let q_k = tape.slice_cols(q, k, 1);
        let recon_k = tape.mul(q_k, ll_k);
        let klg_k = tape.mul(q_k, kld_k);
        recon_rows = Some(match recon_rows {
            Some(acc) => tape.add(acc, recon_k),
            None => recon_k,
        });
        klg_rows = Some(match klg_rows {
            Some(acc) => tape.add(acc, klg_k),
            None => klg_k,
        });
    }
    let recon_rows = recon_rows.expect("K >= 1");
    let klg_rows = klg_rows.expect("K >= 1");

    // KL(q(c|X,Y) ‖ uniform) = Σ_k q_k ln q_k + ln K
    let q_logq = tape.mul(q, logq);
    let neg_entropy = tape.sum_rows(q_logq);
    let klc_rows = tape.add_scalar(neg_entropy, (config.k as f64).ln());

    let recon = tape.mean_all(recon_rows);
    let kl_gauss = tape.mean_all(klg_rows);
    let kl_cat = tape.mean_all(klc_rows);
    let partial = tape.sub(recon, kl_gauss);
    let elbo = tape.sub(partial, kl_cat);
    let loss = tape.neg(elbo);

    let terms = ElboTerms {
        recon: tape.scalar(recon)?,
        kl_gauss: tape.scalar(kl_gauss)?,
        kl_cat: tape.scalar(kl_cat)?,
        elbo: tape.scalar(elbo)?,
        loss: tape.scalar(loss)?,
    };
    for (name, v) in [
        ("recon", terms.recon),
        ("kl_gauss", terms.kl_gauss),
        ("kl_cat", terms.kl_cat),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} term")));
        }
    }
    Ok((
        ElboVars {
            recon,
            kl_gauss,
            kl_cat,
            elbo,
            loss,
        },
        terms,
    ))
}

/// Trains by minibatch Adam on the negative bound; returns the model and
/// the epoch-mean loss trace. Deterministic for a fixed config seed.
pub fn train(config: &MixtureCvaeConfig, x: &[f64], y: &[f64]) -> Result<(MixtureCvaeModel, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "x has {} samples, y has {}",
            x.len(),
            y.len()
        )));
    }
    config.validate(x.len())?;
    let mut model = MixtureCvaeModel::new(config.clone())?;
    let mut adam = AdamState::new(&model.store, config.learning_rate);
    let mut rng = seed::rng(seed::derive(config.seed, 0x7a1e));

    let x_all = Matrix::column(x)?;
    let y_all = Matrix::column(y)?;
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb = x_all.take_rows(chunk);
            let yb = y_all.take_rows(chunk);
            let noise = model.sample_noise(chunk.len(), &mut rng);
            let mut tape = Tape::new();
            let (vars, terms) =
                model
                    .elbo_on_tape(&mut tape, &xb, &yb, &noise)
                    .map_err(|e| match e {
                        Error::Numeric(msg) => Error::Training { epoch, term: msg },
                        other => other,
                    })?;
            if !terms.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    term: "loss".into(),
                });
            }
            tape.backward(vars.loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            model.store.zero_grads();
            epoch_loss += terms.loss * chunk.len() as f64;
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(k: usize) -> MixtureCvaeConfig {
        MixtureCvaeConfig {
            k,
            latent_dim: 1,
            cond_dim: 1,
            hidden_width: 4,
            epochs: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 7,
            logvar_clip: (-7.0, 7.0),
        }
    }

    fn zeroed(mut model: MixtureCvaeModel) -> MixtureCvaeModel {
        let names: Vec<String> = model.store().names().cloned().collect();
        for n in names {
            model.store_mut().get_mut(&n).unwrap().fill(0.0);
        }
        model
    }

    fn col(values: &[f64]) -> Matrix {
        Matrix::column(values).unwrap()
    }

    #[test]
    fn zero_prior_encoder_maps_to_zero() {
        let model = zeroed(MixtureCvaeModel::new(tiny_config(2)).unwrap());
        let (z_con, mu, lv) = model.encode_prior(&col(&[0.4, -1.0, 2.0])).unwrap();
        assert!(z_con.data().iter().all(|&v| v == 0.0));
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(lv.data().iter().all(|&v| v == 0.0));
        assert_eq!(z_con.rows(), 3);
        assert_eq!(z_con.cols(), 1);
        assert_eq!(mu.cols(), 1);
        assert_eq!(lv.cols(), 1);
    }

    #[test]
    fn prior_encoder_is_deterministic() {
        let model = MixtureCvaeModel::new(tiny_config(2)).unwrap();
        let x = col(&[0.3, 0.3]);
        let (a, _, _) = model.encode_prior(&x).unwrap();
        assert_eq!(a.get(0, 0), a.get(1, 0));
        let (b, _, _) = model.encode_prior(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_posterior_heads_give_unit_sigma() {
        let model = zeroed(MixtureCvaeModel::new(tiny_config(3)).unwrap());
        let posts = model
            .encode_posterior(&col(&[0.1, 0.2]), &col(&[1.0, -1.0]))
            .unwrap();
        assert_eq!(posts.len(), 3);
        for (mu, sigma) in posts {
            assert!(mu.data().iter().all(|&v| v == 0.0));
            assert!(sigma.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn posterior_sigma_strictly_positive() {
        let model = MixtureCvaeModel::new(tiny_config(2)).unwrap();
        let posts = model
            .encode_posterior(&col(&[0.5, -0.5, 1.5]), &col(&[0.2, 0.9, -2.0]))
            .unwrap();
        for (_, sigma) in posts {
            assert!(sigma.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn k1_weights_are_exactly_one() {
        let model = MixtureCvaeModel::new(tiny_config(1)).unwrap();
        let w = model
            .component_weights(&col(&[0.1, 0.9]), &col(&[0.0, 0.4]))
            .unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let model = zeroed(MixtureCvaeModel::new(tiny_config(4)).unwrap());
        let w = model.component_weights(&col(&[0.3]), &col(&[0.7])).unwrap();
        for k in 0..4 {
            assert!((w.get(0, k) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let model = MixtureCvaeModel::new(tiny_config(3)).unwrap();
        let w = model
            .component_weights(&col(&[0.5, -2.0, 0.1]), &col(&[1.0, 0.0, -0.4]))
            .unwrap();
        for r in 0..w.rows() {
            let sum: f64 = (0..w.cols()).map(|k| w.get(r, k)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterize_examples() {
        let mut tape = Tape::new();
        let mu = tape.constant(col(&[2.0]));
        let sigma = tape.constant(col(&[0.0]));
        let noise = tape.constant(col(&[123.0]));
        let z = reparameterize(&mut tape, mu, sigma, noise).unwrap();
        assert_eq!(tape.value(z).data(), &[2.0]);

        let mu = tape.constant(col(&[0.0]));
        let sigma = tape.constant(col(&[1.0]));
        let noise = tape.constant(col(&[0.5]));
        let z = reparameterize(&mut tape, mu, sigma, noise).unwrap();
        assert_eq!(tape.value(z).data(), &[0.5]);

        let mu = tape.constant(col(&[0.0]));
        let bad_sigma = tape.constant(col(&[-1.0]));
        let noise = tape.constant(col(&[0.5]));
        assert!(reparameterize(&mut tape, mu, bad_sigma, noise).is_err());
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let mut rng = seed::rng(99);
        let n = 100_000;
        let (mu, sigma) = (1.0, 2.0);
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            draws.push(mu + sigma * e);
        }
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        // se of the std estimate ≈ σ/√(2n)
        let se_std = sigma / (2.0 * n as f64).sqrt();
        assert!((var.sqrt() - sigma).abs() < 3.0 * se_std, "std {}", var.sqrt());
    }

    #[test]
    fn zero_decoder_gives_standard_gaussian_head() {
        let model = zeroed(MixtureCvaeModel::new(tiny_config(2)).unwrap());
        let z = col(&[0.5, -0.5]);
        let z_con = col(&[0.1, 0.1]);
        let (mean, lv) = model.decode(&z, &z_con).unwrap();
        assert!(mean.data().iter().all(|&v| v == 0.0));
        assert!(lv.data().iter().all(|&v| v == 0.0));
        assert_eq!(mean.rows(), 2);
        assert_eq!(mean.cols(), 1);
    }

    #[test]
    fn mix_rows_combination() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let m1 = col(&[3.0, 3.0]);
        let m2 = col(&[7.0, 7.0]);
        let mixed = mix_rows(&w, &[m1, m2]);
        assert_eq!(mixed.get(0, 0), 3.0);
        assert_eq!(mixed.get(1, 0), 5.0);
    }

    #[test]
    fn saturated_weights_pick_one_component() {
        // logits (800, 0): exp(−800) underflows to 0, so weights are exactly (1, 0)
        let mut model = zeroed(MixtureCvaeModel::new(tiny_config(2)).unwrap());
        model
            .store_mut()
            .get_mut("wenc.b1")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[800.0, 0.0]);
        // distinct posterior means so the components decode differently
        model.store_mut().get_mut("post0.b1").unwrap().data_mut()[0] = 0.9;
        model.store_mut().get_mut("post1.b1").unwrap().data_mut()[0] = -0.9;
        // decoder that actually depends on z
        let mut rng = seed::rng(31);
        for v in model.store_mut().get_mut("dec.w0").unwrap().data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        for v in model.store_mut().get_mut("dec.w1").unwrap().data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        let x = col(&[0.2, -0.1]);
        let y = col(&[0.4, 0.3]);
        let w = model.component_weights(&x, &y).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(0, 1), 0.0);

        let predicted = model.mixture_predict(&x, Some(&y)).unwrap();
        let (z_con, _, _) = model.encode_prior(&x).unwrap();
        let posts = model.encode_posterior(&x, &y).unwrap();
        let (mean0, _) = model.decode(&posts[0].0, &z_con).unwrap();
        let (mean1, _) = model.decode(&posts[1].0, &z_con).unwrap();
        assert!(mean0.data() != mean1.data(), "components should differ");
        assert_eq!(predicted.data(), mean0.data());
    }

    #[test]
    fn k1_prediction_equals_single_component() {
        let model = MixtureCvaeModel::new(tiny_config(1)).unwrap();
        let x = col(&[0.3, 0.6, -0.2]);
        let y = col(&[0.1, -0.5, 0.9]);
        let predicted = model.mixture_predict(&x, Some(&y)).unwrap();
        let (z_con, _, _) = model.encode_prior(&x).unwrap();
        let posts = model.encode_posterior(&x, &y).unwrap();
        let (mean, _) = model.decode(&posts[0].0, &z_con).unwrap();
        assert_eq!(predicted.data(), mean.data());
    }

    #[test]
    fn elbo_zero_model_has_zero_kl() {
        // posterior equals prior per component, categorical posterior uniform
        let model = zeroed(MixtureCvaeModel::new(tiny_config(2)).unwrap());
        let x = col(&[0.1, 0.5, -0.3]);
        let y = col(&[0.2, -0.2, 0.4]);
        let noise = vec![Matrix::zeros(3, 1), Matrix::zeros(3, 1)];
        let t = model.elbo(&x, &y, &noise).unwrap();
        assert!(t.kl_gauss.abs() < 1e-12, "kl_gauss {}", t.kl_gauss);
        assert!(t.kl_cat.abs() < 1e-12, "kl_cat {}", t.kl_cat);
        assert!((t.elbo - (t.recon - t.kl_gauss - t.kl_cat)).abs() < 1e-15);
        assert_eq!(t.loss, -t.elbo);
    }

    #[test]
    fn kl_standard_case_is_half() {
        // posterior N(1,1) vs prior N(0,1) per dimension → KL = μ²/2 = 0.5
        let mut model = zeroed(MixtureCvaeModel::new(tiny_config(1)).unwrap());
        model.store_mut().get_mut("post0.b1").unwrap().data_mut()[0] = 1.0;
        let x = col(&[0.0, 0.0]);
        let y = col(&[0.0, 0.0]);
        let noise = vec![Matrix::zeros(2, 1)];
        let t = model.elbo(&x, &y, &noise).unwrap();
        assert!((t.kl_gauss - 0.5).abs() < 1e-12, "kl_gauss {}", t.kl_gauss);
        assert!(t.kl_cat.abs() < 1e-12);
    }

    #[test]
    fn kl_terms_never_negative() {
        let mut rng = seed::rng(5);
        for trial in 0..50 {
            let mut config = tiny_config(1 + (trial % 4));
            config.seed = trial as u64;
            let model = MixtureCvaeModel::new(config).unwrap();
            let n = 6;
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let noise = model.sample_noise(n, &mut rng);
            let t = model.elbo(&col(&xs), &col(&ys), &noise).unwrap();
            assert!(t.kl_gauss >= -1e-9, "kl_gauss {}", t.kl_gauss);
            assert!(t.kl_cat >= -1e-9, "kl_cat {}", t.kl_cat);
        }
    }

    #[test]
    fn elbo_gradient_passes_fd_check_small() {
        let mut model = MixtureCvaeModel::new(MixtureCvaeConfig {
            k: 2,
            latent_dim: 1,
            cond_dim: 1,
            hidden_width: 4,
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
            logvar_clip: (-7.0, 7.0),
        })
        .unwrap();
        let mut rng = seed::rng(8);
        let n = 4;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = model.sample_noise(n, &mut rng);
        let err = model
            .gradient_check_elbo(&col(&xs), &col(&ys), &noise)
            .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let ds = crate::data::gen_mechanism_mixture(
            &crate::data::default_two_class_specs(crate::data::MechanismFamily::F1),
            11,
        )
        .unwrap();
        let (std_ds, _) = crate::data::standardize(&ds).unwrap();
        let config = MixtureCvaeConfig {
            epochs: 60,
            seed: 4,
            ..MixtureCvaeConfig::default()
        };
        let (_, trace_a) = train(&config, &std_ds.x, &std_ds.y).unwrap();
        let (_, trace_b) = train(&config, &std_ds.x, &std_ds.y).unwrap();
        assert_eq!(trace_a, trace_b);
        assert!(
            trace_a.last().unwrap() < trace_a.first().unwrap(),
            "loss did not improve: {:?} -> {:?}",
            trace_a.first(),
            trace_a.last()
        );
    }

    #[test]
    fn invalid_epochs_rejected() {
        let config = MixtureCvaeConfig {
            epochs: 0,
            ..MixtureCvaeConfig::default()
        };
        assert!(matches!(
            train(&config, &[0.0, 1.0], &[0.0, 1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_size_invariant_enforced() {
        let config = MixtureCvaeConfig {
            batch_size: 64,
            epochs: 1,
            ..MixtureCvaeConfig::default()
        };
        let xs: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        assert!(matches!(
            train(&config, &xs, &xs),
            Err(Error::Config(_))
        ));
        assert_eq!(config.resolved_for(10).batch_size, 10);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = MixtureCvaeModel::new(tiny_config(2)).unwrap();
        let json = model.to_json().unwrap();
        let back = MixtureCvaeModel::from_json(&json).unwrap();
        assert_eq!(model.config(), back.config());
        for name in model.store().names() {
            let a = model.store().get(name).unwrap();
            let b = back.store().get(name).unwrap();
            assert_eq!(a.data().len(), b.data().len(), "{name}");
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {name} not bit-exact");
            }
        }
        // round-tripped model computes identical numbers
        let x = col(&[0.25, -0.75]);
        let y = col(&[0.5, 0.5]);
        let noise = vec![Matrix::zeros(2, 1), Matrix::zeros(2, 1)];
        let a = model.elbo(&x, &y, &noise).unwrap();
        let b = back.elbo(&x, &y, &noise).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}
