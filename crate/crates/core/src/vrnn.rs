//! The sequential latent-variable model.
//!
//! At step `t`, with deterministic state `h_{t−1}` (`h_0 = 0`):
//!
//! * transition prior `P(z_t) = N(μ_p(h_{t−1}), σ_p(h_{t−1}))`
//! * proposal `Q(z_t) = N(μ_p + Δμ(φ_x(x_t), h_{t−1}), σ_q(φ_x(x_t), h_{t−1}))`
//! * emission `p(x_t | z_t, h_{t−1})` from `[φ_z(z_t), h_{t−1}]`
//! * state update `h_t = GRU([φ_x(x_t), φ_z(z_t)], h_{t−1})`
//!
//! The proposal reads the prior mean through a constant copy of the
//! transition parameters, so objectives built from `Q` never produce
//! gradients for ω; ω is reached only through `P`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::distributions::{BernoulliVec, DiagGaussian, DistError};
use crate::nn::{
    Activation, Binding, Checkpoint, CheckpointError, DenseLayer, GruCell, Mlp, NnError,
    ParameterStore, Tag, TagSet,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum VrnnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("sequence lengths differ: {0} observations, {1} noise draws")]
    Length(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmissionKind {
    Gaussian,
    Bernoulli,
}

impl EmissionKind {
    pub fn name(self) -> &'static str {
        match self {
            EmissionKind::Gaussian => "gaussian",
            EmissionKind::Bernoulli => "bernoulli",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(EmissionKind::Gaussian),
            "bernoulli" => Some(EmissionKind::Bernoulli),
            _ => None,
        }
    }
}

/// How the approximate posterior relates to the transition prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorMode {
    /// `μ_q = μ_p + Δμ`, own σ head.
    Residual,
    /// `Q ≡ P`: zero offset and the prior's σ. The model has no τ parameters.
    TiedToPrior,
}

impl PosteriorMode {
    pub fn name(self) -> &'static str {
        match self {
            PosteriorMode::Residual => "residual",
            PosteriorMode::TiedToPrior => "tied",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "residual" => Some(PosteriorMode::Residual),
            "tied" => Some(PosteriorMode::TiedToPrior),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VrnnConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub h_dim: usize,
    /// Width of the data encoder φ_x.
    pub x_enc_dim: usize,
    /// Width of the latent encoder φ_z.
    pub z_enc_dim: usize,
    /// Hidden width inside the transition, proposal and emission networks.
    pub hidden_dim: usize,
    pub emission: EmissionKind,
    pub posterior: PosteriorMode,
}

impl VrnnConfig {
    pub fn new(x_dim: usize, z_dim: usize, h_dim: usize) -> Self {
        VrnnConfig {
            x_dim,
            z_dim,
            h_dim,
            x_enc_dim: h_dim,
            z_enc_dim: h_dim,
            hidden_dim: h_dim,
            emission: EmissionKind::Gaussian,
            posterior: PosteriorMode::Residual,
        }
    }

    pub fn validate(&self) -> Result<(), VrnnError> {
        let dims = [
            ("x_dim", self.x_dim),
            ("z_dim", self.z_dim),
            ("h_dim", self.h_dim),
            ("x_enc_dim", self.x_enc_dim),
            ("z_enc_dim", self.z_enc_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        match dims.iter().find(|(_, d)| *d == 0) {
            Some((name, _)) => Err(VrnnError::Config(format!("{name} must be at least 1"))),
            None => Ok(()),
        }
    }

    fn meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("x_dim", self.x_dim.to_string()),
            ("z_dim", self.z_dim.to_string()),
            ("h_dim", self.h_dim.to_string()),
            ("x_enc_dim", self.x_enc_dim.to_string()),
            ("z_enc_dim", self.z_enc_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("emission", self.emission.name().to_string()),
            ("posterior", self.posterior.name().to_string()),
        ]
    }

    fn from_meta(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let get = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing meta {k}")))
        };
        let num = |k: &str| -> Result<usize, CheckpointError> {
            get(k)?
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad meta {k}")))
        };
        let emission = EmissionKind::from_name(get("emission")?)
            .ok_or_else(|| CheckpointError::Malformed("bad meta emission".into()))?;
        let posterior = PosteriorMode::from_name(get("posterior")?)
            .ok_or_else(|| CheckpointError::Malformed("bad meta posterior".into()))?;
        Ok(VrnnConfig {
            x_dim: num("x_dim")?,
            z_dim: num("z_dim")?,
            h_dim: num("h_dim")?,
            x_enc_dim: num("x_enc_dim")?,
            z_enc_dim: num("z_enc_dim")?,
            hidden_dim: num("hidden_dim")?,
            emission,
            posterior,
        })
    }
}

/// A tanh hidden layer feeding a linear mean head and a softplus scale head.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub hidden: DenseLayer,
    pub mean: DenseLayer,
    pub scale: DenseLayer,
}

impl GaussianHead {
    fn new(
        store: &mut ParameterStore,
        name: &str,
        tag: Tag,
        in_dim: usize,
        hidden: usize,
        out: usize,
    ) -> Result<Self, NnError> {
        Ok(GaussianHead {
            hidden: DenseLayer::new(
                store,
                &format!("{name}.hidden"),
                tag,
                in_dim,
                hidden,
                Activation::Tanh,
            )?,
            mean: DenseLayer::new(
                store,
                &format!("{name}.mean"),
                tag,
                hidden,
                out,
                Activation::None,
            )?,
            scale: DenseLayer::new(
                store,
                &format!("{name}.scale"),
                tag,
                hidden,
                out,
                Activation::Softplus,
            )?,
        })
    }

    fn features(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var, NnError> {
        self.hidden.forward(tape, params, x)
    }

    fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<(Var, Var), NnError> {
        let f = self.features(tape, params, x)?;
        Ok((
            self.mean.forward(tape, params, f)?,
            self.scale.forward(tape, params, f)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmissionHead {
    pub hidden: DenseLayer,
    /// Mean (gaussian) or logits (bernoulli).
    pub out: DenseLayer,
    pub scale: Option<DenseLayer>,
}

/// Output distribution over `x_t`.
#[derive(Clone, Copy, Debug)]
pub enum Emission {
    Gaussian(DiagGaussian),
    Bernoulli(BernoulliVec),
}

impl Emission {
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var, DistError> {
        match self {
            Emission::Gaussian(g) => g.log_prob(tape, x),
            Emission::Bernoulli(b) => b.log_prob(tape, x),
        }
    }
}

/// Per-step quantities of one unrolled pass over a batch of sequences.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub prior: DiagGaussian,
    pub posterior: DiagGaussian,
    /// Posterior sample z̃_t.
    pub z: Var,
    /// Prior sample z_t, when prior noise was supplied.
    pub prior_z: Option<Var>,
    /// State after this step, `h_t`.
    pub h: Var,
    /// `log p(x_t | z̃_t, h_{t−1})` per sequence, `[m]`; absent when the
    /// emission was skipped.
    pub loglik: Option<Var>,
    /// `KL(Q(z_t) ‖ P(z_t))` per sequence, `[m]`.
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct UnrollRecord {
    pub h0: Var,
    pub steps: Vec<StepRecord>,
    pub batch: usize,
}

impl UnrollRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `h_{t−1}` for zero-based step `t`.
    pub fn h_prev(&self, t: usize) -> Var {
        if t == 0 {
            self.h0
        } else {
            self.steps[t - 1].h
        }
    }

    fn stack_sum(
        &self,
        tape: &mut Tape,
        f: impl Fn(&StepRecord) -> Option<Var>,
    ) -> Result<Var, VrnnError> {
        let mut acc: Option<Var> = None;
        for s in &self.steps {
            let v = f(s).ok_or(VrnnError::Config(
                "record was unrolled without the emission".into(),
            ))?;
            acc = Some(match acc {
                None => v,
                Some(a) => tape.add(a, v)?,
            });
        }
        acc.ok_or(VrnnError::EmptySequence)
    }

    /// `Σ_t log p(x_t | ·)` per sequence, `[m]`.
    pub fn loglik_per_sequence(&self, tape: &mut Tape) -> Result<Var, VrnnError> {
        self.stack_sum(tape, |s| s.loglik)
    }

    /// `Σ_t KL_t` per sequence, `[m]`.
    pub fn kl_per_sequence(&self, tape: &mut Tape) -> Result<Var, VrnnError> {
        self.stack_sum(tape, |s| Some(s.kl))
    }

    /// Single-sample ELBO `Σ_t [loglik_t − KL_t]` per sequence, `[m]`.
    pub fn elbo_per_sequence(&self, tape: &mut Tape) -> Result<Var, VrnnError> {
        let ll = self.loglik_per_sequence(tape)?;
        let kl = self.kl_per_sequence(tape)?;
        Ok(tape.sub(ll, kl)?)
    }

    /// Sampled-ratio ELBO `Σ_t [loglik_t + log P(z̃_t) − log Q(z̃_t)]` per
    /// sequence, `[m]`: the log importance weight of the drawn latent path.
    pub fn log_weight_per_sequence(&self, tape: &mut Tape) -> Result<Var, VrnnError> {
        let mut acc = self.loglik_per_sequence(tape)?;
        for s in &self.steps {
            let lp = s.prior.log_prob(tape, s.z)?;
            let lq = s.posterior.log_prob(tape, s.z)?;
            let d = tape.sub(lp, lq)?;
            acc = tape.add(acc, d)?;
        }
        Ok(acc)
    }

    /// ELBO summed over the batch.
    pub fn elbo(&self, tape: &mut Tape) -> Result<Var, VrnnError> {
        let e = self.elbo_per_sequence(tape)?;
        Ok(tape.sum(e)?)
    }

    /// `L_rec = −Σ_t log p(x_t | ·)`, summed over the batch.
    pub fn reconstruction_loss(&self, tape: &mut Tape) -> Result<Var, VrnnError> {
        let ll = self.loglik_per_sequence(tape)?;
        let s = tape.sum(ll)?;
        Ok(tape.neg(s)?)
    }

    pub fn posterior_samples(&self) -> Vec<Var> {
        self.steps.iter().map(|s| s.z).collect()
    }

    pub fn prior_samples(&self) -> Option<Vec<Var>> {
        self.steps.iter().map(|s| s.prior_z).collect()
    }
}

/// Noise driving one unroll: standard normal draws shaped `[m×z_dim]` per step.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollNoise {
    pub posterior: Vec<Tensor>,
    pub prior: Option<Vec<Tensor>>,
}

impl UnrollNoise {
    pub fn draw<R: rand::Rng>(
        rng: &mut R,
        steps: usize,
        batch: usize,
        z_dim: usize,
        with_prior: bool,
    ) -> Self {
        let mut block = || {
            (0..steps)
                .map(|_| {
                    let data = (0..batch * z_dim)
                        .map(|_| StandardNormal.sample(rng))
                        .collect();
                    Tensor::new(vec![batch, z_dim], data).expect("noise shape")
                })
                .collect::<Vec<_>>()
        };
        let posterior = block();
        let prior = with_prior.then(block);
        UnrollNoise { posterior, prior }
    }

    pub fn zeros(steps: usize, batch: usize, z_dim: usize) -> Self {
        UnrollNoise {
            posterior: vec![Tensor::zeros(&[batch, z_dim]); steps],
            prior: None,
        }
    }
}

/// The four trainable components θ, ω, φ, τ with their parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: VrnnConfig,
    pub store: ParameterStore,
    pub enc_x: Mlp,
    pub enc_z: Mlp,
    pub cell: GruCell,
    pub transition: GaussianHead,
    pub proposal: Option<GaussianHead>,
    pub emission: EmissionHead,
}

impl ModelBundle {
    /// Builds the networks with zero parameters; call [`init`](Self::init)
    /// for a random start.
    pub fn new(config: VrnnConfig) -> Result<Self, VrnnError> {
        config.validate()?;
        let c = &config;
        let mut store = ParameterStore::new();
        let enc_x = Mlp::new(
            &mut store,
            "enc_x",
            Tag::Theta,
            &[c.x_dim, c.x_enc_dim],
            Activation::Tanh,
            Activation::Tanh,
        )?;
        let enc_z = Mlp::new(
            &mut store,
            "enc_z",
            Tag::Theta,
            &[c.z_dim, c.z_enc_dim],
            Activation::Tanh,
            Activation::Tanh,
        )?;
        let cell = GruCell::new(
            &mut store,
            "rnn",
            Tag::Theta,
            c.x_enc_dim + c.z_enc_dim,
            c.h_dim,
        )?;
        let transition =
            GaussianHead::new(&mut store, "tr", Tag::Omega, c.h_dim, c.hidden_dim, c.z_dim)?;
        let proposal = match c.posterior {
            PosteriorMode::Residual => Some(GaussianHead::new(
                &mut store,
                "ps",
                Tag::Tau,
                c.x_enc_dim + c.h_dim,
                c.hidden_dim,
                c.z_dim,
            )?),
            PosteriorMode::TiedToPrior => None,
        };
        let em_in = c.z_enc_dim + c.h_dim;
        let emission = EmissionHead {
            hidden: DenseLayer::new(
                &mut store,
                "em.hidden",
                Tag::Phi,
                em_in,
                c.hidden_dim,
                Activation::Tanh,
            )?,
            out: DenseLayer::new(
                &mut store,
                "em.out",
                Tag::Phi,
                c.hidden_dim,
                c.x_dim,
                Activation::None,
            )?,
            scale: match c.emission {
                EmissionKind::Gaussian => Some(DenseLayer::new(
                    &mut store,
                    "em.scale",
                    Tag::Phi,
                    c.hidden_dim,
                    c.x_dim,
                    Activation::Softplus,
                )?),
                EmissionKind::Bernoulli => None,
            },
        };
        Ok(ModelBundle {
            config,
            store,
            enc_x,
            enc_z,
            cell,
            transition,
            proposal,
            emission,
        })
    }

    pub fn init(&mut self, seed: u64) {
        self.store.init_params(seed);
    }

    pub fn with_seed(config: VrnnConfig, seed: u64) -> Result<Self, VrnnError> {
        let mut m = Self::new(config)?;
        m.init(seed);
        Ok(m)
    }

    /// Binds all parameters; tags in `grad_tags` become differentiable.
    pub fn bind(&self, tape: &mut Tape, grad_tags: TagSet) -> Binding {
        if self.proposal.is_some() && grad_tags.contains(Tag::Omega) {
            self.store
                .bind_with_frozen(tape, grad_tags, TagSet::of(&[Tag::Omega]), &self.store)
        } else {
            self.store.bind(tape, grad_tags)
        }
    }

    /// As [`bind`](Self::bind), with the constant transition copy read by
    /// the proposal taken from `frozen_source` instead of the model itself.
    pub fn bind_with_frozen_source(
        &self,
        tape: &mut Tape,
        grad_tags: TagSet,
        frozen_source: &ParameterStore,
    ) -> Binding {
        if self.proposal.is_some() {
            self.store
                .bind_with_frozen(tape, grad_tags, TagSet::of(&[Tag::Omega]), frozen_source)
        } else {
            self.store.bind(tape, grad_tags)
        }
    }

    fn check_width(
        &self,
        tape: &Tape,
        v: Var,
        width: usize,
        what: &'static str,
    ) -> Result<usize, VrnnError> {
        match *tape.shape(v) {
            [m, w] if w == width => Ok(m),
            _ => Err(VrnnError::Shape {
                what,
                expected: vec![0, width],
                got: tape.shape(v).to_vec(),
            }),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[batch, self.config.h_dim]))
    }

    /// `P(z_t | h_{t−1})`.
    pub fn transition_prior(
        &self,
        tape: &mut Tape,
        params: &Binding,
        h_prev: Var,
    ) -> Result<DiagGaussian, VrnnError> {
        self.check_width(tape, h_prev, self.config.h_dim, "h_prev")?;
        let (mu, sigma) = self.transition.forward(tape, params, h_prev)?;
        Ok(DiagGaussian::new(tape, mu, sigma)?)
    }

    /// `Q(z_t | x_t, h_{t−1})` given the encoded observation and the prior at
    /// this step.
    fn posterior_from(
        &self,
        tape: &mut Tape,
        params: &Binding,
        frozen: Option<&Binding>,
        x_enc: Var,
        h_prev: Var,
        prior: &DiagGaussian,
    ) -> Result<DiagGaussian, VrnnError> {
        let Some(ps) = &self.proposal else {
            return Ok(*prior);
        };
        let base = match frozen {
            Some(fb) => {
                let f = self.transition.features(tape, fb, h_prev)?;
                self.transition.mean.forward(tape, fb, f)?
            }
            None => tape.detach(prior.mu),
        };
        let inp = tape.concat(&[x_enc, h_prev], 1)?;
        let (offset, sigma) = ps.forward(tape, params, inp)?;
        let mu = tape.add(base, offset)?;
        Ok(DiagGaussian::new(tape, mu, sigma)?)
    }

    /// `Q(z_t | x_t, h_{t−1})` for raw observations `x_t: [m×x_dim]`.
    pub fn proposal_posterior(
        &self,
        tape: &mut Tape,
        params: &Binding,
        x_t: Var,
        h_prev: Var,
    ) -> Result<DiagGaussian, VrnnError> {
        self.check_width(tape, x_t, self.config.x_dim, "x_t")?;
        let prior = self.transition_prior(tape, params, h_prev)?;
        let x_enc = self.enc_x.forward(tape, params, x_t)?;
        let frozen = self.frozen_view(params);
        self.posterior_from(tape, params, frozen.as_ref(), x_enc, h_prev, &prior)
    }

    /// Frozen transition view, present when the binding carries constant
    /// transition copies (ω differentiable, or an explicit frozen source).
    fn frozen_view(&self, params: &Binding) -> Option<Binding> {
        params.has_frozen().then(|| params.frozen())
    }

    fn emission_from(
        &self,
        tape: &mut Tape,
        params: &Binding,
        z_enc: Var,
        h_prev: Var,
    ) -> Result<Emission, VrnnError> {
        let inp = tape.concat(&[z_enc, h_prev], 1)?;
        let f = self.emission.hidden.forward(tape, params, inp)?;
        let out = self.emission.out.forward(tape, params, f)?;
        Ok(match &self.emission.scale {
            Some(scale) => {
                let sigma = scale.forward(tape, params, f)?;
                Emission::Gaussian(DiagGaussian::new(tape, out, sigma)?)
            }
            None => Emission::Bernoulli(BernoulliVec::from_logits(tape, out)?),
        })
    }

    /// `p(x_t | z_t, h_{t−1})`.
    pub fn emission(
        &self,
        tape: &mut Tape,
        params: &Binding,
        z_t: Var,
        h_prev: Var,
    ) -> Result<Emission, VrnnError> {
        let m = self.check_width(tape, z_t, self.config.z_dim, "z_t")?;
        let mh = self.check_width(tape, h_prev, self.config.h_dim, "h_prev")?;
        if m != mh {
            return Err(VrnnError::Shape {
                what: "batch",
                expected: vec![m],
                got: vec![mh],
            });
        }
        let z_enc = self.enc_z.forward(tape, params, z_t)?;
        self.emission_from(tape, params, z_enc, h_prev)
    }

    fn update_from(
        &self,
        tape: &mut Tape,
        params: &Binding,
        h_prev: Var,
        x_enc: Var,
        z_enc: Var,
    ) -> Result<Var, VrnnError> {
        let inp = tape.concat(&[x_enc, z_enc], 1)?;
        Ok(self.cell.step(tape, params, inp, h_prev)?)
    }

    /// `h_t = GRU([φ_x(x_t), φ_z(z_t)], h_{t−1})`.
    pub fn state_update(
        &self,
        tape: &mut Tape,
        params: &Binding,
        h_prev: Var,
        x_t: Var,
        z_t: Var,
    ) -> Result<Var, VrnnError> {
        self.check_width(tape, h_prev, self.config.h_dim, "h_prev")?;
        self.check_width(tape, x_t, self.config.x_dim, "x_t")?;
        self.check_width(tape, z_t, self.config.z_dim, "z_t")?;
        let x_enc = self.enc_x.forward(tape, params, x_t)?;
        let z_enc = self.enc_z.forward(tape, params, z_t)?;
        self.update_from(tape, params, h_prev, x_enc, z_enc)
    }

    /// Unrolls the inference path over `x_seq` (each `[m×x_dim]`).
    ///
    /// The state is driven by the data and the posterior samples. When
    /// `noise.prior` is given, a prior sample is drawn at every step as well
    /// (it does not feed back into the state). With `with_emission = false`
    /// the log-likelihood terms are skipped.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        params: &Binding,
        x_seq: &[Tensor],
        noise: &UnrollNoise,
        with_emission: bool,
    ) -> Result<UnrollRecord, VrnnError> {
        let steps = x_seq.len();
        if steps == 0 {
            return Err(VrnnError::EmptySequence);
        }
        if noise.posterior.len() != steps {
            return Err(VrnnError::Length(steps, noise.posterior.len()));
        }
        if let Some(p) = &noise.prior {
            if p.len() != steps {
                return Err(VrnnError::Length(steps, p.len()));
            }
        }
        let m = match x_seq[0].shape() {
            [m, w] if *w == self.config.x_dim => *m,
            s => {
                return Err(VrnnError::Shape {
                    what: "x_t",
                    expected: vec![0, self.config.x_dim],
                    got: s.to_vec(),
                })
            }
        };
        let z_shape = [m, self.config.z_dim];
        let frozen = self.frozen_view(params);

        let h0 = self.zero_state(tape, m);
        let mut h = h0;
        let mut records = Vec::with_capacity(steps);
        for t in 0..steps {
            if x_seq[t].shape() != [m, self.config.x_dim] {
                return Err(VrnnError::Shape {
                    what: "x_t",
                    expected: vec![m, self.config.x_dim],
                    got: x_seq[t].shape().to_vec(),
                });
            }
            for n in std::iter::once(&noise.posterior[t]).chain(noise.prior.as_ref().map(|p| &p[t]))
            {
                if n.shape() != z_shape {
                    return Err(VrnnError::Shape {
                        what: "noise",
                        expected: z_shape.to_vec(),
                        got: n.shape().to_vec(),
                    });
                }
            }
            let x = tape.constant(x_seq[t].clone());
            let prior = self.transition_prior(tape, params, h)?;
            let x_enc = self.enc_x.forward(tape, params, x)?;
            let posterior = self.posterior_from(tape, params, frozen.as_ref(), x_enc, h, &prior)?;
            let eps = tape.constant(noise.posterior[t].clone());
            let z = posterior.sample(tape, eps)?;
            let prior_z = match &noise.prior {
                Some(p) => {
                    let e = tape.constant(p[t].clone());
                    Some(prior.sample(tape, e)?)
                }
                None => None,
            };
            let z_enc = self.enc_z.forward(tape, params, z)?;
            let loglik = if with_emission {
                let em = self.emission_from(tape, params, z_enc, h)?;
                Some(em.log_prob(tape, x)?)
            } else {
                None
            };
            let kl = posterior.kl(tape, &prior)?;
            let h_next = self.update_from(tape, params, h, x_enc, z_enc)?;
            records.push(StepRecord {
                prior,
                posterior,
                z,
                prior_z,
                h: h_next,
                loglik,
                kl,
            });
            h = h_next;
        }
        Ok(UnrollRecord {
            h0,
            steps: records,
            batch: m,
        })
    }

    /// Free-running ancestral sampling of `n` sequences of length `steps`:
    /// `z_t ~ P`, `x̂_t ~ p(x | z_t, h_{t−1})`, `h_t` updated with `(x̂_t, z_t)`.
    pub fn generate(&self, n: usize, steps: usize, seed: u64) -> Result<Vec<Tensor>, VrnnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unif = Uniform::new(0.0, 1.0).expect("unit interval");
        let mut h = Tensor::zeros(&[n, self.config.h_dim]);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, TagSet::EMPTY);
            let hv = tape.constant(h.clone());
            let prior = self.transition_prior(&mut tape, &params, hv)?;
            let eps: Vec<f64> = (0..n * self.config.z_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let eps = tape.constant(Tensor::new(vec![n, self.config.z_dim], eps)?);
            let z = prior.sample(&mut tape, eps)?;
            let x_hat = match self.emission(&mut tape, &params, z, hv)? {
                Emission::Gaussian(g) => {
                    let e: Vec<f64> = (0..n * self.config.x_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    let e = tape.constant(Tensor::new(vec![n, self.config.x_dim], e)?);
                    let s = g.sample(&mut tape, e)?;
                    tape.value(s).clone()
                }
                Emission::Bernoulli(b) => {
                    let u: Vec<f64> = (0..n * self.config.x_dim)
                        .map(|_| unif.sample(&mut rng))
                        .collect();
                    b.sample(&tape, &Tensor::new(vec![n, self.config.x_dim], u)?)?
                }
            };
            let xv = tape.constant(x_hat.clone());
            let h_next = self.state_update(&mut tape, &params, hv, xv, z)?;
            h = tape.value(h_next).clone();
            out.push(x_hat);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store).with_meta("kind", "model");
        for (k, v) in self.config.meta() {
            ck = ck.with_meta(k, v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        if ck.meta("kind") != Some("model") {
            return Err(CheckpointError::Mismatch("not a model checkpoint".into()));
        }
        let config = VrnnConfig::from_meta(ck)?;
        let mut model =
            ModelBundle::new(config).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }
}
