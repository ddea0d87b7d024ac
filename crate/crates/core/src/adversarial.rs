//! Adversarial regularization: a recurrent Wasserstein critic over latent
//! sequences, the discrimination loss and the two alternating updates.
//!
//! With prior samples `z` and posterior samples `z̃` over a batch of `m`
//! sequences,
//!
//! ```text
//! L_dis = Σ_i [D_η(z⁽ⁱ⁾) − D_η(z̃⁽ⁱ⁾)]
//! ```
//!
//! The critic step descends `L_dis` in η and clips η into `[−c, c]`; the
//! adversarial step descends `−L_dis` in (ω, τ). `−L_dis / m` estimates the
//! Earth-Mover distance between the two sequence distributions (scaled by
//! the critic's Lipschitz bound).

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::nn::{
    clip_params, rmsprop_step, Activation, Binding, Checkpoint, CheckpointError, DenseLayer,
    LstmCell, NnError, ParameterStore, RmsProp, Tag, TagSet,
};
use crate::vrnn::{ModelBundle, UnrollNoise, VrnnError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdvError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] VrnnError),
    #[error("invalid adversarial configuration: {0}")]
    Config(String),
    #[error("empty latent sequence")]
    EmptySequence,
    #[error("latent width {got}, critic expects {expected}")]
    Dim { expected: usize, got: usize },
    #[error("batch mismatch: {prior} prior sequences, {posterior} posterior sequences")]
    Batch { prior: usize, posterior: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvConfig {
    /// Weight-clipping bound c.
    pub clip: f64,
    /// Critic steps per adversarial step.
    pub n_critic: usize,
    pub lr_critic: f64,
    pub lr_adv: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            clip: 0.01,
            n_critic: 1,
            lr_critic: 5e-5,
            lr_adv: 5e-5,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), AdvError> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(AdvError::Config(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        if self.n_critic == 0 {
            return Err(AdvError::Config("n_critic must be at least 1".into()));
        }
        for (name, lr) in [("lr_critic", self.lr_critic), ("lr_adv", self.lr_adv)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(AdvError::Config(format!(
                    "{name} must be non-negative, got {lr}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticConfig {
    pub z_dim: usize,
    /// LSTM state size.
    pub state_dim: usize,
    /// Width of both feedforward layers.
    pub width: usize,
}

impl CriticConfig {
    pub fn new(z_dim: usize) -> Self {
        CriticConfig {
            z_dim,
            state_dim: 128,
            width: 100,
        }
    }

    /// Clip bound at which a fully aligned critic has unit slope at the
    /// origin for a single-step, single-coordinate input: with all gates at
    /// ½ the slope is `¼·c · H·c · W·c · W·c`.
    pub fn unit_slope_clip(&self) -> f64 {
        let (h, w) = (self.state_dim as f64, self.width as f64);
        (4.0 / (h * w * w)).powf(0.25)
    }
}

/// LSTM over the latent sequence, then two tanh layers and a linear scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub config: CriticConfig,
    pub store: ParameterStore,
    pub lstm: LstmCell,
    pub ff1: DenseLayer,
    pub ff2: DenseLayer,
    pub head: DenseLayer,
    /// Number of critic updates applied so far.
    pub steps: u64,
}

impl Critic {
    /// Builds the critic with zero parameters.
    pub fn new(config: CriticConfig) -> Result<Self, AdvError> {
        if config.z_dim == 0 || config.state_dim == 0 || config.width == 0 {
            return Err(AdvError::Config(format!(
                "critic dims must be at least 1: {config:?}"
            )));
        }
        let mut store = ParameterStore::new();
        let lstm = LstmCell::new(
            &mut store,
            "critic.lstm",
            Tag::Eta,
            config.z_dim,
            config.state_dim,
        )?;
        let ff1 = DenseLayer::new(
            &mut store,
            "critic.ff1",
            Tag::Eta,
            config.state_dim,
            config.width,
            Activation::Tanh,
        )?;
        let ff2 = DenseLayer::new(
            &mut store,
            "critic.ff2",
            Tag::Eta,
            config.width,
            config.width,
            Activation::Tanh,
        )?;
        let head = DenseLayer::new(
            &mut store,
            "critic.head",
            Tag::Eta,
            config.width,
            1,
            Activation::None,
        )?;
        Ok(Critic {
            config,
            store,
            lstm,
            ff1,
            ff2,
            head,
            steps: 0,
        })
    }

    /// Random start, clipped into `[−clip, clip]`.
    pub fn with_seed(config: CriticConfig, seed: u64, clip: f64) -> Result<Self, AdvError> {
        let mut c = Self::new(config)?;
        c.store.init_params(seed);
        clip_params(&mut c.store, Tag::Eta, clip);
        Ok(c)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let tags = if trainable {
            TagSet::of(&[Tag::Eta])
        } else {
            TagSet::EMPTY
        };
        self.store.bind(tape, tags)
    }

    /// Scores a batch of latent sequences (each step `[m×z_dim]`), giving `[m]`.
    pub fn scores(
        &self,
        tape: &mut Tape,
        params: &Binding,
        z_seq: &[Var],
    ) -> Result<Var, AdvError> {
        let first = z_seq.first().ok_or(AdvError::EmptySequence)?;
        let m = match *tape.shape(*first) {
            [m, d] if d == self.config.z_dim => m,
            ref s => {
                return Err(AdvError::Dim {
                    expected: self.config.z_dim,
                    got: s.last().copied().unwrap_or(0),
                })
            }
        };
        let zero = Tensor::zeros(&[m, self.config.state_dim]);
        let mut h = tape.constant(zero.clone());
        let mut c = tape.constant(zero);
        for &z in z_seq {
            (h, c) = self.lstm.step(tape, params, z, h, c)?;
        }
        let f = self.ff1.forward(tape, params, h)?;
        let f = self.ff2.forward(tape, params, f)?;
        let s = self.head.forward(tape, params, f)?;
        Ok(tape.reshape(s, vec![m])?)
    }

    /// Score of a single latent sequence of `[z_dim]` vectors.
    pub fn critic_score(&self, z_seq: &[Tensor]) -> Result<f64, AdvError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let vars = z_seq
            .iter()
            .map(|z| {
                let row = z.clone().reshape(vec![1, z.len()])?;
                Ok(tape.constant(row))
            })
            .collect::<Result<Vec<_>, AutodiffError>>()?;
        let s = self.scores(&mut tape, &params, &vars)?;
        Ok(tape.value(s).data()[0])
    }

    /// `L_dis` for batched prior and posterior sequences. Both batches go
    /// through the critic in one stacked pass.
    pub fn critic_loss(
        &self,
        tape: &mut Tape,
        params: &Binding,
        prior: &[Var],
        posterior: &[Var],
    ) -> Result<Var, AdvError> {
        if prior.len() != posterior.len() {
            return Err(AdvError::Config(format!(
                "prior and posterior sequences differ in length: {} vs {}",
                prior.len(),
                posterior.len()
            )));
        }
        let (Some(&p0), Some(&q0)) = (prior.first(), posterior.first()) else {
            return Err(AdvError::EmptySequence);
        };
        let (mp, mq) = (tape.shape(p0)[0], tape.shape(q0)[0]);
        if mp != mq {
            return Err(AdvError::Batch {
                prior: mp,
                posterior: mq,
            });
        }
        let stacked = prior
            .iter()
            .zip(posterior)
            .map(|(&p, &q)| tape.concat(&[p, q], 0))
            .collect::<Result<Vec<_>, _>>()?;
        let s = self.scores(tape, params, &stacked)?;
        let sp = tape.slice(s, 0, 0..mp)?;
        let sq = tape.slice(s, 0, mp..2 * mp)?;
        discrimination_loss(tape, sp, sq)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
            .with_meta("kind", "critic")
            .with_meta("z_dim", self.config.z_dim)
            .with_meta("state_dim", self.config.state_dim)
            .with_meta("width", self.config.width)
            .with_meta("steps", self.steps)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        if ck.meta("kind") != Some("critic") {
            return Err(CheckpointError::Mismatch("not a critic checkpoint".into()));
        }
        let num = |k: &str| -> Result<u64, CheckpointError> {
            ck.meta(k)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing meta {k}")))?
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad meta {k}")))
        };
        let config = CriticConfig {
            z_dim: num("z_dim")? as usize,
            state_dim: num("state_dim")? as usize,
            width: num("width")? as usize,
        };
        let mut critic =
            Critic::new(config).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        ck.apply_to(&mut critic.store)?;
        critic.steps = num("steps").unwrap_or(0);
        Ok(critic)
    }
}

/// `Σ_i [d_prior_i − d_posterior_i]` from per-sequence scores.
pub fn discrimination_loss(
    tape: &mut Tape,
    d_prior: Var,
    d_posterior: Var,
) -> Result<Var, AdvError> {
    let diff = tape.sub(d_prior, d_posterior)?;
    Ok(tape.sum(diff)?)
}

/// Running Earth-Mover estimate `−L_dis / m`.
pub fn em_estimate(l_dis: f64, m: usize) -> f64 {
    assert!(m >= 1, "batch size must be positive");
    -l_dis / m as f64
}

fn batch_size(x_seq: &[Tensor]) -> Result<usize, AdvError> {
    x_seq
        .first()
        .map(|x| x.shape()[0])
        .ok_or(AdvError::EmptySequence)
}

/// `L_dis` on one batch with both networks held fixed.
pub fn discrimination_value(
    critic: &Critic,
    model: &ModelBundle,
    x_seq: &[Tensor],
    noise: &UnrollNoise,
) -> Result<f64, AdvError> {
    let mut tape = Tape::new();
    let mp = model.bind(&mut tape, TagSet::EMPTY);
    let rec = model.unroll(&mut tape, &mp, x_seq, noise, false)?;
    let prior = rec
        .prior_samples()
        .ok_or(AdvError::Config("prior noise required".into()))?;
    let cp = critic.bind(&mut tape, false);
    let loss = critic.critic_loss(&mut tape, &cp, &prior, &rec.posterior_samples())?;
    Ok(tape.value(loss).item())
}

/// One critic update: descend `L_dis` in η, then clip. The model is run
/// without gradients. Returns the pre-step `L_dis`.
pub fn critic_train_step<R: Rng>(
    critic: &mut Critic,
    model: &ModelBundle,
    x_seq: &[Tensor],
    rng: &mut R,
    cfg: &AdvConfig,
) -> Result<f64, AdvError> {
    cfg.validate()?;
    let m = batch_size(x_seq)?;
    let noise = UnrollNoise::draw(rng, x_seq.len(), m, model.config.z_dim, true);
    critic_train_step_with_noise(critic, model, x_seq, &noise, cfg)
}

pub fn critic_train_step_with_noise(
    critic: &mut Critic,
    model: &ModelBundle,
    x_seq: &[Tensor],
    noise: &UnrollNoise,
    cfg: &AdvConfig,
) -> Result<f64, AdvError> {
    let mut tape = Tape::new();
    let mp = model.bind(&mut tape, TagSet::EMPTY);
    let rec = model.unroll(&mut tape, &mp, x_seq, noise, false)?;
    let prior = rec
        .prior_samples()
        .ok_or(AdvError::Config("prior noise required".into()))?;
    let cp = critic.bind(&mut tape, true);
    let loss = critic.critic_loss(&mut tape, &cp, &prior, &rec.posterior_samples())?;
    let value = tape.value(loss).item();
    let grads = cp.collect(&critic.store, &tape.backward(loss)?);
    rmsprop_step(
        &mut critic.store,
        &grads,
        &RmsProp::new(cfg.lr_critic),
        TagSet::of(&[Tag::Eta]),
    )?;
    clip_params(&mut critic.store, Tag::Eta, cfg.clip);
    critic.steps += 1;
    Ok(value)
}

/// One adversarial update: descend `−L_dis` in (ω, τ) through the
/// reparameterized samples. Returns `−L_dis`.
pub fn adversarial_train_step<R: Rng>(
    critic: &Critic,
    model: &mut ModelBundle,
    x_seq: &[Tensor],
    rng: &mut R,
    cfg: &AdvConfig,
) -> Result<f64, AdvError> {
    cfg.validate()?;
    let m = batch_size(x_seq)?;
    let noise = UnrollNoise::draw(rng, x_seq.len(), m, model.config.z_dim, true);
    adversarial_train_step_with_noise(critic, model, x_seq, &noise, cfg)
}

pub fn adversarial_train_step_with_noise(
    critic: &Critic,
    model: &mut ModelBundle,
    x_seq: &[Tensor],
    noise: &UnrollNoise,
    cfg: &AdvConfig,
) -> Result<f64, AdvError> {
    let (value, grads) = adversarial_gradients(critic, model, x_seq, noise)?;
    rmsprop_step(
        &mut model.store,
        &grads,
        &RmsProp::new(cfg.lr_adv),
        adversarial_tags(),
    )?;
    Ok(value)
}

/// Tags updated by the adversarial step.
pub fn adversarial_tags() -> TagSet {
    TagSet::of(&[Tag::Omega, Tag::Tau])
}

/// `−L_dis` and its gradients with respect to (ω, τ).
pub fn adversarial_gradients(
    critic: &Critic,
    model: &ModelBundle,
    x_seq: &[Tensor],
    noise: &UnrollNoise,
) -> Result<(f64, crate::nn::ParamGrads), AdvError> {
    let mut tape = Tape::new();
    let mp = model.bind(&mut tape, adversarial_tags());
    let rec = model.unroll(&mut tape, &mp, x_seq, noise, false)?;
    let prior = rec
        .prior_samples()
        .ok_or(AdvError::Config("prior noise required".into()))?;
    let cp = critic.bind(&mut tape, false);
    let l_dis = critic.critic_loss(&mut tape, &cp, &prior, &rec.posterior_samples())?;
    let loss = tape.neg(l_dis)?;
    let value = tape.value(loss).item();
    let grads = mp.collect(&model.store, &tape.backward(loss)?);
    Ok((value, grads))
}

/// A model whose prior is `N(0, 1)` and whose posterior is `N(shift, 1)` in
/// every latent coordinate at every step, independent of data and state.
pub fn gaussian_shift_model(
    x_dim: usize,
    z_dim: usize,
    shift: f64,
) -> Result<ModelBundle, VrnnError> {
    let mut cfg = crate::vrnn::VrnnConfig::new(x_dim, z_dim, 1);
    cfg.hidden_dim = 1;
    cfg.x_enc_dim = 1;
    cfg.z_enc_dim = 1;
    let mut model = ModelBundle::new(cfg)?;
    let unit_sigma = (std::f64::consts::E - 1.0).ln();
    let ps = model.proposal.clone().expect("residual posterior");
    for (layer, v) in [
        (&model.transition.scale, unit_sigma),
        (&ps.scale, unit_sigma),
        (&ps.mean, shift),
    ] {
        model
            .store
            .value_mut(layer.bias)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = v);
    }
    Ok(model)
}
