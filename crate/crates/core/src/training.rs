//! The alternating training loop, evaluation, an importance-weighted bound
//! and the full-model gradient-check suite.
//!
//! Each iteration runs the reconstruction phase (RMSProp on θ, φ, τ against
//! `L_rec`) and then the regularization phase (`n_critic` critic steps on η
//! followed by one adversarial step on ω, τ). Every phase draws a fresh
//! batch.

use std::io::{self, Write};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adversarial::{
    adversarial_train_step, critic_train_step, em_estimate, AdvConfig, AdvError, Critic,
    CriticConfig,
};
use crate::autodiff::{Tape, Tensor};
use crate::data::{batches, DataError, PrefetchBatches, SequenceBatch, SequenceDataset};
use crate::nn::{rmsprop_step, NnError, ParamGrads, ParameterStore, RmsProp, Tag, TagSet};
use crate::vrnn::{EmissionKind, ModelBundle, PosteriorMode, UnrollNoise, VrnnConfig, VrnnError};

pub const METRICS_HEADER: &str = "iter,l_rec,elbo,l_dis,em_estimate,wallclock_s";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] VrnnError),
    #[error(transparent)]
    Adversarial(#[from] AdvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics sink failed")]
    Io(#[from] io::Error),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("numerical divergence at iteration {iter}: {what}")]
    Diverged {
        iter: usize,
        what: String,
        last_good: Box<(ModelBundle, Critic)>,
    },
    #[error("{phase} phase modified {tag} parameters")]
    Isolation { phase: &'static str, tag: Tag },
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total iterations B.
    pub iterations: usize,
    /// Sequences per batch m.
    pub batch_size: usize,
    /// Reconstruction-phase learning rate.
    pub lr_rec: f64,
    pub adv: AdvConfig,
    /// Iterations between metric rows.
    pub eval_every: usize,
    /// Batches averaged per evaluation.
    pub eval_batches: usize,
    pub seed: u64,
    /// When false the wallclock column is written as 0 so metrics files are
    /// reproducible byte for byte.
    pub record_wallclock: bool,
    /// Check phase tag isolation at every evaluation point.
    pub audit: bool,
    /// When nonzero, training batches are assembled on background threads
    /// into queues of this depth. The batch sequence is unchanged.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 32,
            lr_rec: 1e-3,
            adv: AdvConfig::default(),
            eval_every: 100,
            eval_batches: 4,
            seed: 0,
            record_wallclock: false,
            audit: true,
            prefetch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0
            || self.batch_size == 0
            || self.eval_every == 0
            || self.eval_batches == 0
        {
            return Err(TrainError::Config(
                "iterations, batch size, eval_every and eval_batches must be at least 1".into(),
            ));
        }
        if !(self.lr_rec >= 0.0 && self.lr_rec.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr_rec must be non-negative, got {}",
                self.lr_rec
            )));
        }
        self.adv.validate()?;
        Ok(())
    }
}

/// Independent seeds for every random stream of a run, derived from one
/// master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub critic: u64,
    pub recon_batches: u64,
    pub reg_batches: u64,
    pub noise: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            model: r.next_u64(),
            critic: r.next_u64(),
            recon_batches: r.next_u64(),
            reg_batches: r.next_u64(),
            noise: r.next_u64(),
            eval: r.next_u64(),
        }
    }
}

/// Freshly initialized model and critic for a run.
pub fn init_models(
    cfg: &TrainConfig,
    model_cfg: VrnnConfig,
    critic_cfg: CriticConfig,
) -> Result<(ModelBundle, Critic), TrainError> {
    let seeds = Seeds::derive(cfg.seed);
    let model = ModelBundle::with_seed(model_cfg, seeds.model)?;
    let critic = Critic::with_seed(critic_cfg, seeds.critic, cfg.adv.clip)?;
    Ok((model, critic))
}

/// One evaluation row. Losses are per time step and per sequence except
/// `l_dis`, which is the batch-summed discrimination loss averaged over the
/// evaluation batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub l_rec: f64,
    pub elbo: f64,
    pub l_dis: f64,
    pub em_estimate: f64,
    pub wallclock_s: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.l_rec, self.elbo, self.l_dis, self.em_estimate, self.wallclock_s
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.elbo, self.l_dis, self.em_estimate]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub trait MetricsSink {
    fn record(&mut self, r: &MetricsRecord) -> io::Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, r: &MetricsRecord) -> io::Result<()> {
        self.push(*r);
        Ok(())
    }
}

/// Writes the CSV header on creation and flushes after every row.
pub struct CsvMetrics<W: Write> {
    out: W,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(CsvMetrics { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvMetrics<W> {
    fn record(&mut self, r: &MetricsRecord) -> io::Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()
    }
}

/// Per-iteration training-batch losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iter: usize,
    /// Per time step, batch mean.
    pub l_rec: f64,
    /// Batch-summed `L_dis` before the last critic update.
    pub l_dis: f64,
    /// `−L_dis` of the adversarial step.
    pub adv_loss: f64,
    /// `−L_dis / m` from the last critic step.
    pub em_estimate: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub critic: Critic,
    pub history: Vec<IterationStats>,
    pub metrics: Vec<MetricsRecord>,
}

/// Descends `L_rec` in (θ, φ, τ). Returns the batch-summed `L_rec` before
/// the update.
pub fn reconstruction_phase<R: RngCore>(
    model: &mut ModelBundle,
    x_seq: &[Tensor],
    rng: &mut R,
    lr: f64,
) -> Result<f64, TrainError> {
    let m = x_seq
        .first()
        .map(|x| x.shape()[0])
        .ok_or(VrnnError::EmptySequence)?;
    let noise = UnrollNoise::draw(rng, x_seq.len(), m, model.config.z_dim, false);
    let tags = reconstruction_tags();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, tags);
    let rec = model.unroll(&mut tape, &params, x_seq, &noise, true)?;
    let loss = rec.reconstruction_loss(&mut tape)?;
    let value = tape.value(loss).item();
    let grads = params.collect(&model.store, &tape.backward(loss)?);
    rmsprop_step(&mut model.store, &grads, &RmsProp::new(lr), tags)?;
    Ok(value)
}

pub fn reconstruction_tags() -> TagSet {
    TagSet::of(&[Tag::Theta, Tag::Phi, Tag::Tau])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizationOutcome {
    /// `L_dis` from the last critic step.
    pub l_dis: f64,
    /// `−L_dis` from the adversarial step.
    pub adv_loss: f64,
    pub critic_steps: usize,
}

/// `n_critic` critic steps then one adversarial step, each on a fresh batch.
pub fn regularization_phase<I, R>(
    critic: &mut Critic,
    model: &mut ModelBundle,
    batches: &mut I,
    rng: &mut R,
    cfg: &AdvConfig,
) -> Result<RegularizationOutcome, TrainError>
where
    I: Iterator<Item = SequenceBatch>,
    R: RngCore,
{
    cfg.validate()?;
    let mut next = || batches.next().ok_or(TrainError::Data(DataError::Empty));
    let mut l_dis = 0.0;
    for _ in 0..cfg.n_critic {
        let b = next()?;
        l_dis = critic_train_step(critic, model, &b.steps, rng, cfg)?;
    }
    let b = next()?;
    let adv_loss = adversarial_train_step(critic, model, &b.steps, rng, cfg)?;
    Ok(RegularizationOutcome {
        l_dis,
        adv_loss,
        critic_steps: cfg.n_critic,
    })
}

/// Metrics on `n_batches` batches of `m` sequences drawn with `seed`; fresh
/// noise from the same seed. Nothing is mutated.
pub fn evaluate(
    model: &ModelBundle,
    critic: &Critic,
    data: &SequenceDataset,
    n_batches: usize,
    m: usize,
    seed: u64,
) -> Result<MetricsRecord, TrainError> {
    if n_batches == 0 {
        return Err(TrainError::Config(
            "evaluation needs at least one batch".into(),
        ));
    }
    let mut stream = batches(data, m, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15);
    let (mut ll_sum, mut kl_sum, mut dis_sum) = (0.0, 0.0, 0.0);
    for _ in 0..n_batches {
        let b = stream.next().expect("endless stream");
        let noise = UnrollNoise::draw(&mut rng, data.steps(), m, model.config.z_dim, true);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, TagSet::EMPTY);
        let rec = model.unroll(&mut tape, &params, &b.steps, &noise, true)?;
        let ll = rec.loglik_per_sequence(&mut tape)?;
        let kl = rec.kl_per_sequence(&mut tape)?;
        ll_sum += tape.value(ll).data().iter().sum::<f64>();
        kl_sum += tape.value(kl).data().iter().sum::<f64>();
        let cp = critic.bind(&mut tape, false);
        let prior = rec.prior_samples().expect("prior noise drawn");
        let d = critic.critic_loss(&mut tape, &cp, &prior, &rec.posterior_samples())?;
        dis_sum += tape.value(d).item();
    }
    let denom = (n_batches * m * data.steps()) as f64;
    let l_dis = dis_sum / n_batches as f64;
    Ok(MetricsRecord {
        iter: 0,
        l_rec: -ll_sum / denom,
        elbo: (ll_sum - kl_sum) / denom,
        l_dis,
        em_estimate: em_estimate(l_dis, m),
        wallclock_s: 0.0,
    })
}

fn numerical_autodiff(e: &crate::autodiff::AutodiffError) -> bool {
    use crate::autodiff::AutodiffError as A;
    matches!(e, A::Domain { .. } | A::DivisionByZero | A::NonFinite(_))
}

fn numerical_model(e: &VrnnError) -> bool {
    use crate::distributions::DistError as D;
    match e {
        VrnnError::Dist(D::Sigma(_) | D::Mean(_)) => true,
        VrnnError::Dist(D::Autodiff(a))
        | VrnnError::Autodiff(a)
        | VrnnError::Nn(NnError::Autodiff(a)) => numerical_autodiff(a),
        _ => false,
    }
}

/// Whether an error is a symptom of numerical blow-up rather than misuse.
fn is_numerical(e: &TrainError) -> bool {
    match e {
        TrainError::Model(m) | TrainError::Adversarial(AdvError::Model(m)) => numerical_model(m),
        TrainError::Nn(NnError::Autodiff(a))
        | TrainError::Adversarial(AdvError::Nn(NnError::Autodiff(a)) | AdvError::Autodiff(a)) => {
            numerical_autodiff(a)
        }
        _ => false,
    }
}

fn tag_snapshot(store: &ParameterStore, tag: Tag) -> Vec<Tensor> {
    store
        .iter()
        .filter(|p| p.tag == tag)
        .map(|p| p.value.clone())
        .collect()
}

fn audit(
    phase: &'static str,
    before: &(ModelBundle, Critic),
    model: &ModelBundle,
    critic: &Critic,
    frozen: &[Tag],
) -> Result<(), TrainError> {
    for &tag in frozen {
        let same = if tag == Tag::Eta {
            tag_snapshot(&before.1.store, tag) == tag_snapshot(&critic.store, tag)
        } else {
            tag_snapshot(&before.0.store, tag) == tag_snapshot(&model.store, tag)
        };
        if !same {
            return Err(TrainError::Isolation { phase, tag });
        }
    }
    Ok(())
}

/// Alternates the two phases `cfg.iterations` times. A metrics row is
/// emitted every `eval_every` iterations and after the last one.
///
/// On a non-finite loss or parameter the run stops with
/// [`TrainError::Diverged`], carrying the state before the failing iteration.
pub fn run_training(
    cfg: &TrainConfig,
    mut model: ModelBundle,
    mut critic: Critic,
    data: &SequenceDataset,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if model.config.x_dim != data.x_dim() {
        return Err(TrainError::Config(format!(
            "model expects x_dim {}, data has {}",
            model.config.x_dim,
            data.x_dim()
        )));
    }
    if critic.config.z_dim != model.config.z_dim {
        return Err(TrainError::Config(
            "critic and model latent widths differ".into(),
        ));
    }
    let seeds = Seeds::derive(cfg.seed);
    let m = cfg.batch_size;
    let steps = data.steps() as f64;
    let stream = |seed: u64| -> Result<Box<dyn Iterator<Item = SequenceBatch> + '_>, TrainError> {
        Ok(if cfg.prefetch > 0 {
            Box::new(PrefetchBatches::spawn(data.clone(), m, seed, cfg.prefetch)?)
        } else {
            Box::new(batches(data, m, seed)?)
        })
    };
    let mut recon = stream(seeds.recon_batches)?;
    let mut reg = stream(seeds.reg_batches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut metrics = Vec::new();

    for iter in 1..=cfg.iterations {
        let last_good = (model.clone(), critic.clone());
        let eval_point = iter % cfg.eval_every == 0 || iter == cfg.iterations;
        let diverged = |what: &str, state: &(ModelBundle, Critic)| TrainError::Diverged {
            iter,
            what: what.to_string(),
            last_good: Box::new(state.clone()),
        };

        let numeric = |e: TrainError| {
            if is_numerical(&e) {
                diverged(&e.to_string(), &last_good)
            } else {
                e
            }
        };

        let b = recon.next().expect("endless stream");
        let l_rec =
            reconstruction_phase(&mut model, &b.steps, &mut rng, cfg.lr_rec).map_err(numeric)?;
        if cfg.audit && eval_point {
            audit(
                "reconstruction",
                &last_good,
                &model,
                &critic,
                &[Tag::Omega, Tag::Eta],
            )?;
        }
        let mid = (cfg.audit && eval_point).then(|| (model.clone(), critic.clone()));
        let reg_out = regularization_phase(&mut critic, &mut model, &mut reg, &mut rng, &cfg.adv)
            .map_err(numeric)?;
        if let Some(mid) = &mid {
            audit(
                "regularization",
                mid,
                &model,
                &critic,
                &[Tag::Theta, Tag::Phi],
            )?;
        }

        if !l_rec.is_finite() {
            return Err(diverged("reconstruction loss", &last_good));
        }
        if !(reg_out.l_dis.is_finite() && reg_out.adv_loss.is_finite()) {
            return Err(diverged("discrimination loss", &last_good));
        }
        if !(model.store.is_finite() && critic.store.is_finite()) {
            return Err(diverged("parameters", &last_good));
        }
        history.push(IterationStats {
            iter,
            l_rec: l_rec / (m as f64 * steps),
            l_dis: reg_out.l_dis,
            adv_loss: reg_out.adv_loss,
            em_estimate: em_estimate(reg_out.l_dis, m),
        });

        if eval_point {
            let mut rec = evaluate(&model, &critic, data, cfg.eval_batches, m, seeds.eval)
                .map_err(numeric)?;
            if !rec.is_finite() {
                return Err(diverged("evaluation metrics", &last_good));
            }
            rec.iter = iter;
            if cfg.record_wallclock {
                rec.wallclock_s = start.elapsed().as_secs_f64();
            }
            sink.record(&rec)?;
            metrics.push(rec);
        }
    }
    Ok(TrainOutcome {
        model,
        critic,
        history,
        metrics,
    })
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + (v.iter().map(|x| (x - max).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Importance-weighted bound `log (1/k) Σ_j w_j` per sequence, where
/// `w_j = p(x, z_j) / q(z_j | x)` for independent posterior paths `z_j`.
///
/// Samples are drawn in blocks; sample `j` of sequence `i` uses row
/// `j·m + i` of its block, so `k = 1` consumes noise exactly as
/// `UnrollNoise::draw(rng, T, m, z_dim, false)` with the same seed.
pub fn iwae_bound(
    model: &ModelBundle,
    x_seq: &[Tensor],
    k: usize,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    if k == 0 {
        return Err(TrainError::Config("k must be at least 1".into()));
    }
    let m = x_seq
        .first()
        .map(|x| x.shape()[0])
        .ok_or(VrnnError::EmptySequence)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = (4096 / m).clamp(1, k);
    let mut weights = vec![Vec::with_capacity(k); m];
    let mut done = 0;
    while done < k {
        let kb = block.min(k - done);
        let rows = kb * m;
        let xs: Vec<Tensor> = x_seq
            .iter()
            .map(|x| {
                Tensor::new(vec![rows, x.shape()[1]], x.data().repeat(kb))
                    .expect("replicated shape")
            })
            .collect();
        let noise = UnrollNoise::draw(&mut rng, x_seq.len(), rows, model.config.z_dim, false);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, TagSet::EMPTY);
        let rec = model.unroll(&mut tape, &params, &xs, &noise, true)?;
        let lw = rec.log_weight_per_sequence(&mut tape)?;
        for (r, &w) in tape.value(lw).data().iter().enumerate() {
            weights[r % m].push(w);
        }
        done += kb;
    }
    Ok(weights.iter().map(|w| log_mean_exp(w)).collect())
}

/// Maximum relative error `|ad − fd| / (1 + |fd|)` for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub objective: &'static str,
    pub name: String,
    pub tag: Tag,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    /// Worst error per tag, for every tag that was checked.
    pub fn per_tag(&self) -> Vec<(Tag, f64)> {
        [Tag::Theta, Tag::Omega, Tag::Phi, Tag::Tau, Tag::Eta]
            .into_iter()
            .filter_map(|tag| {
                self.entries
                    .iter()
                    .filter(|e| e.tag == tag)
                    .map(|e| e.max_rel_err)
                    .reduce(f64::max)
                    .map(|worst| (tag, worst))
            })
            .collect()
    }

    pub fn failures(&self) -> Vec<&GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_err < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.per_tag().len() == 5
    }
}

/// Problem sizes for [`gradcheck_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSetup {
    pub model: VrnnConfig,
    pub critic: CriticConfig,
    pub steps: usize,
    pub batch: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        GradcheckSetup {
            model: VrnnConfig {
                x_dim: 2,
                z_dim: 2,
                h_dim: 4,
                x_enc_dim: 3,
                z_enc_dim: 3,
                hidden_dim: 5,
                emission: EmissionKind::Gaussian,
                posterior: PosteriorMode::Residual,
            },
            critic: CriticConfig {
                z_dim: 2,
                state_dim: 8,
                width: 6,
            },
            steps: 3,
            batch: 2,
            eps: 1e-6,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

fn fd_check<F>(
    objective: &'static str,
    store: &ParameterStore,
    tags: TagSet,
    ad: &ParamGrads,
    eps: f64,
    mut f: F,
) -> Result<Vec<GradcheckEntry>, TrainError>
where
    F: FnMut(&ParameterStore) -> Result<f64, TrainError>,
{
    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let p = store.param(id);
        if !tags.contains(p.tag) {
            continue;
        }
        let g = ad
            .get(&p.name)
            .ok_or_else(|| NnError::MissingGradient(p.name.clone()))?;
        let mut worst: f64 = 0.0;
        for k in 0..p.value.len() {
            let orig = p.value.data()[k];
            probe.value_mut(id).data_mut()[k] = orig + eps;
            let up = f(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - eps;
            let down = f(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (g.data()[k] - fd).abs() / (1.0 + fd.abs());
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
        }
        out.push(GradcheckEntry {
            objective,
            name: p.name.clone(),
            tag: p.tag,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Central-difference audit of every trainable tensor against autodiff:
///
/// * `elbo` over θ, ω, φ, τ
/// * `l_rec` over θ, φ, τ
/// * `l_dis` over η
/// * `adversarial` (`−L_dis`) over ω, τ
///
/// The proposal's constant copy of the transition parameters stays at the
/// unperturbed values while ω is perturbed, matching what autodiff
/// differentiates.
pub fn gradcheck_suite(setup: &GradcheckSetup) -> Result<GradcheckReport, TrainError> {
    let mut seeds = ChaCha8Rng::seed_from_u64(setup.seed);
    let model = ModelBundle::with_seed(setup.model.clone(), seeds.next_u64())?;
    let mut critic = Critic::new(setup.critic)?;
    critic.store.init_params(seeds.next_u64());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.next_u64());
    let xs: Vec<Tensor> =
        UnrollNoise::draw(&mut rng, setup.steps, setup.batch, setup.model.x_dim, false).posterior;
    let noise = UnrollNoise::draw(&mut rng, setup.steps, setup.batch, setup.model.z_dim, true);
    let base = model.store.clone();

    #[derive(Clone, Copy)]
    enum Obj {
        Elbo,
        LRec,
        LDis,
        Adv,
    }
    let eval = |m: &ModelBundle,
                c: &Critic,
                obj: Obj,
                model_tags: TagSet,
                critic_grad: bool|
     -> Result<_, TrainError> {
        let mut tape = Tape::new();
        let mp = m.bind_with_frozen_source(&mut tape, model_tags, &base);
        let rec = m.unroll(&mut tape, &mp, &xs, &noise, true)?;
        let cp = c.bind(&mut tape, critic_grad);
        let loss = match obj {
            Obj::Elbo => rec.elbo(&mut tape)?,
            Obj::LRec => rec.reconstruction_loss(&mut tape)?,
            Obj::LDis | Obj::Adv => {
                let prior = rec.prior_samples().expect("prior noise drawn");
                let l = c.critic_loss(&mut tape, &cp, &prior, &rec.posterior_samples())?;
                if matches!(obj, Obj::Adv) {
                    tape.neg(l)?
                } else {
                    l
                }
            }
        };
        Ok((tape, mp, cp, loss))
    };
    let value = |m: &ModelBundle, c: &Critic, obj: Obj| -> Result<f64, TrainError> {
        let (tape, _, _, loss) = eval(m, c, obj, TagSet::EMPTY, false)?;
        Ok(tape.value(loss).item())
    };

    let mut entries = Vec::new();
    let model_objectives = [
        (
            "elbo",
            Obj::Elbo,
            TagSet::of(&[Tag::Theta, Tag::Omega, Tag::Phi, Tag::Tau]),
        ),
        ("l_rec", Obj::LRec, reconstruction_tags()),
        ("adversarial", Obj::Adv, TagSet::of(&[Tag::Omega, Tag::Tau])),
    ];
    for (name, obj, tags) in model_objectives {
        let (tape, mp, _, loss) = eval(&model, &critic, obj, tags, false)?;
        let ad = mp.collect(&model.store, &tape.backward(loss)?);
        let mut probe = model.clone();
        entries.extend(fd_check(name, &model.store, tags, &ad, setup.eps, |s| {
            probe.store = s.clone();
            value(&probe, &critic, obj)
        })?);
    }
    let (tape, _, cp, loss) = eval(&model, &critic, Obj::LDis, TagSet::EMPTY, true)?;
    let ad = cp.collect(&critic.store, &tape.backward(loss)?);
    let mut probe = critic.clone();
    entries.extend(fd_check(
        "l_dis",
        &critic.store,
        TagSet::of(&[Tag::Eta]),
        &ad,
        setup.eps,
        |s| {
            probe.store = s.clone();
            value(&model, &probe, Obj::LDis)
        },
    )?);
    Ok(GradcheckReport {
        entries,
        tolerance: setup.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::gaussian_shift_model;
    use crate::autodiff::{set_backward_fault, UnaryKind};
    use crate::data::{gen_lgssm, LgssmParams};

    fn tiny_model_cfg(posterior: PosteriorMode) -> VrnnConfig {
        VrnnConfig {
            posterior,
            ..GradcheckSetup::default().model
        }
    }

    fn small_critic_cfg() -> CriticConfig {
        CriticConfig {
            z_dim: 2,
            state_dim: 6,
            width: 5,
        }
    }

    fn lgssm(n: usize, steps: usize, x_dim: usize) -> SequenceDataset {
        gen_lgssm(&LgssmParams::default(), n, steps, x_dim, 1).unwrap()
    }

    #[test]
    fn reconstruction_phase_examples() {
        let model0 = ModelBundle::with_seed(tiny_model_cfg(PosteriorMode::Residual), 1).unwrap();
        let data = lgssm(8, 5, 2);
        let x = data.gather(&[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let mut m = model0.clone();
        let l = reconstruction_phase(&mut m, &x, &mut rng, 0.0).unwrap();
        assert!(l.is_finite());
        for (a, b) in m.store.iter().zip(model0.store.iter()) {
            assert_eq!(a.value, b.value);
        }

        let mut m = model0.clone();
        reconstruction_phase(&mut m, &x, &mut rng, 1e-2).unwrap();
        for (a, b) in m.store.iter().zip(model0.store.iter()) {
            if a.tag == Tag::Omega {
                assert_eq!(a.value, b.value);
            } else {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn reconstruction_loss_falls_on_constant_data() {
        let cfg = VrnnConfig {
            x_dim: 1,
            z_dim: 1,
            ..VrnnConfig::new(1, 1, 4)
        };
        let mut model = ModelBundle::with_seed(cfg, 2).unwrap();
        let x = vec![Tensor::full(&[8, 1], 0.5); 6];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let first = reconstruction_phase(&mut model, &x, &mut rng, 1e-3).unwrap();
        let mut last = first;
        for _ in 1..200 {
            last = reconstruction_phase(&mut model, &x, &mut rng, 1e-3).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn regularization_phase_counts_and_isolation() {
        let mut model = ModelBundle::with_seed(tiny_model_cfg(PosteriorMode::Residual), 3).unwrap();
        let mut critic = Critic::with_seed(small_critic_cfg(), 3, 0.01).unwrap();
        let data = lgssm(8, 4, 2);
        let mut stream = batches(&data, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let before = model.clone();
        let cfg = AdvConfig {
            n_critic: 3,
            ..AdvConfig::default()
        };
        let out =
            regularization_phase(&mut critic, &mut model, &mut stream, &mut rng, &cfg).unwrap();
        assert_eq!(out.critic_steps, 3);
        assert_eq!(critic.steps, 3);
        for tag in [Tag::Theta, Tag::Phi] {
            assert_eq!(
                tag_snapshot(&model.store, tag),
                tag_snapshot(&before.store, tag)
            );
        }
        // 3 critic batches + 1 adversarial batch were consumed.
        let mut fresh = batches(&data, 4, 3).unwrap();
        for _ in 0..4 {
            fresh.next();
        }
        assert_eq!(
            stream.next().unwrap().indices,
            fresh.next().unwrap().indices
        );
    }

    #[test]
    fn frozen_toy_estimate_is_nonnegative_after_training() {
        let mut model = gaussian_shift_model(1, 1, 1.0).unwrap();
        let ccfg = CriticConfig {
            z_dim: 1,
            state_dim: 8,
            width: 8,
        };
        let cfg = AdvConfig {
            clip: ccfg.unit_slope_clip(),
            lr_critic: 1e-3,
            lr_adv: 0.0,
            n_critic: 5,
        };
        let mut critic = Critic::with_seed(ccfg, 4, cfg.clip).unwrap();
        let data = SequenceDataset::new(1, 1, 1, vec![0.0]).unwrap();
        let mut stream = batches(&data, 64, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..60 {
            regularization_phase(&mut critic, &mut model, &mut stream, &mut rng, &cfg).unwrap();
        }
        let mut est = Vec::new();
        for _ in 0..100 {
            let out =
                regularization_phase(&mut critic, &mut model, &mut stream, &mut rng, &cfg).unwrap();
            est.push(em_estimate(out.l_dis, 64));
        }
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        let sd =
            (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt();
        assert!(
            mean >= -3.0 * sd / (est.len() as f64).sqrt(),
            "{mean} ± {sd}"
        );
    }

    #[test]
    fn run_training_rows_determinism_and_single_iteration() {
        let data = lgssm(16, 5, 2);
        let cfg = TrainConfig {
            iterations: 10,
            batch_size: 4,
            eval_every: 3,
            eval_batches: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let (m, c) = init_models(
                &cfg,
                tiny_model_cfg(PosteriorMode::Residual),
                small_critic_cfg(),
            )
            .unwrap();
            let mut sink = CsvMetrics::new(Vec::new()).unwrap();
            let out = run_training(&cfg, m, c, &data, &mut sink).unwrap();
            (out, String::from_utf8(sink.into_inner()).unwrap())
        };
        let (out, csv) = run();
        assert_eq!(
            out.metrics.iter().map(|r| r.iter).collect::<Vec<_>>(),
            vec![3, 6, 9, 10]
        );
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(out.history.len(), 10);
        assert_eq!(out.critic.steps, 10);
        let (again, csv2) = run();
        assert_eq!(csv, csv2);
        assert_eq!(again.model.store, out.model.store);

        let pre = TrainConfig {
            prefetch: 2,
            ..cfg.clone()
        };
        let (m, c) = init_models(
            &pre,
            tiny_model_cfg(PosteriorMode::Residual),
            small_critic_cfg(),
        )
        .unwrap();
        let prefetched = run_training(&pre, m, c, &data, &mut Vec::new()).unwrap();
        assert_eq!(prefetched.metrics, out.metrics);

        let one = TrainConfig {
            iterations: 1,
            ..cfg
        };
        let (m, c) = init_models(
            &one,
            tiny_model_cfg(PosteriorMode::Residual),
            small_critic_cfg(),
        )
        .unwrap();
        let mut rows = Vec::new();
        let out = run_training(&one, m, c, &data, &mut rows).unwrap();
        assert_eq!((out.history.len(), out.critic.steps, rows.len()), (1, 1, 1));
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let data = lgssm(4, 3, 2);
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 2,
            eval_every: 1,
            eval_batches: 1,
            lr_rec: 1e300,
            ..TrainConfig::default()
        };
        let (m, c) = init_models(
            &cfg,
            tiny_model_cfg(PosteriorMode::Residual),
            small_critic_cfg(),
        )
        .unwrap();
        match run_training(&cfg, m, c, &data, &mut Vec::new()) {
            Err(TrainError::Diverged { last_good, .. }) => {
                assert!(last_good.0.store.is_finite() && last_good.1.store.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let data = lgssm(8, 4, 2);
        let model = ModelBundle::with_seed(tiny_model_cfg(PosteriorMode::Residual), 6).unwrap();
        let critic = Critic::with_seed(small_critic_cfg(), 6, 0.01).unwrap();
        let (m0, c0) = (model.clone(), critic.clone());
        let a = evaluate(&model, &critic, &data, 3, 4, 9).unwrap();
        let b = evaluate(&model, &critic, &data, 3, 4, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!((model, critic), (m0, c0));

        let tied = ModelBundle::with_seed(tiny_model_cfg(PosteriorMode::TiedToPrior), 6).unwrap();
        let critic = Critic::with_seed(small_critic_cfg(), 6, 0.01).unwrap();
        let r = evaluate(&tied, &critic, &data, 3, 4, 9).unwrap();
        assert!((r.elbo + r.l_rec).abs() < 1e-8);
    }

    #[test]
    fn iwae_single_sample_equals_sampled_elbo() {
        let model = ModelBundle::with_seed(tiny_model_cfg(PosteriorMode::Residual), 7).unwrap();
        let data = lgssm(3, 4, 2);
        let x = data.gather(&[0, 1, 2]);
        let bound = iwae_bound(&model, &x, 1, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = UnrollNoise::draw(&mut rng, 4, 3, 2, false);
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, TagSet::EMPTY);
        let rec = model.unroll(&mut tape, &p, &x, &noise, true).unwrap();
        let lw = rec.log_weight_per_sequence(&mut tape).unwrap();
        for (a, b) in bound.iter().zip(tape.value(lw).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn iwae_is_monotone_in_k() {
        let model = ModelBundle::with_seed(tiny_model_cfg(PosteriorMode::Residual), 8).unwrap();
        let data = lgssm(1, 3, 2);
        let x = data.gather(&[0]);
        let trials = 100;
        let mut diffs = Vec::new();
        for s in 0..trials {
            let k100 = iwae_bound(&model, &x, 100, 1000 + s).unwrap()[0];
            let k1 = iwae_bound(&model, &x, 1, 5000 + s).unwrap()[0];
            diffs.push(k100 - k1);
        }
        let mean = diffs.iter().sum::<f64>() / trials as f64;
        let sd =
            (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
        assert!(mean >= -3.0 * sd / (trials as f64).sqrt(), "{mean}");
    }

    /// T = 1, one latent and one observed coordinate. The prior is N(0, 1)
    /// and the emission is N(g(z), σ) for a smooth g built from the network,
    /// so `log p(x) = log ∫ N(z; 0, 1)·N(x; g(z), σ) dz` by quadrature.
    #[test]
    fn iwae_approaches_exact_marginal() {
        let mut model = gaussian_shift_model(1, 1, 0.3).unwrap();
        let set = |m: &mut ModelBundle, name: &str, v: f64| {
            let id = m.store.id(name).unwrap();
            m.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = v);
        };
        set(&mut model, "enc_z.0.w", 0.8);
        set(&mut model, "em.hidden.w", 1.5);
        set(&mut model, "em.out.w", 1.2);
        set(&mut model, "em.out.b", 0.1);
        set(&mut model, "em.scale.b", -0.5);
        let x = 0.7;
        let g = |z: f64| 1.2 * (1.5 * (0.8 * z).tanh()).tanh() + 0.1;
        let sigma = crate::autodiff::softplus(-0.5);
        let dens = |z: f64| {
            let n = |v: f64, s: f64| {
                (-0.5 * (v / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            };
            n(z, 1.0) * n(x - g(z), sigma)
        };
        let (lo, hi, n) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut integral = dens(lo) + dens(hi);
        for i in 1..n {
            integral += dens(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let exact = (integral * h / 3.0).ln();

        let xs = vec![Tensor::matrix(1, 1, vec![x])];
        let bound = iwae_bound(&model, &xs, 10_000, 3).unwrap()[0];
        assert!((bound - exact).abs() < 0.01, "{bound} vs {exact}");
        assert!(bound <= exact + 0.01);
    }

    #[test]
    fn gradcheck_suite_passes_and_covers_all_tags() {
        let report = gradcheck_suite(&GradcheckSetup::default()).unwrap();
        let tags: Vec<_> = report.per_tag().iter().map(|(t, _)| *t).collect();
        assert_eq!(
            tags,
            vec![Tag::Theta, Tag::Omega, Tag::Phi, Tag::Tau, Tag::Eta]
        );
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn gradcheck_suite_detects_a_faulty_rule() {
        set_backward_fault(Some(UnaryKind::Tanh));
        let report = gradcheck_suite(&GradcheckSetup::default());
        set_backward_fault(None);
        let report = report.unwrap();
        assert!(!report.passed());
        assert!(!report.failures().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            eval_every: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(Seeds::derive(3), Seeds::derive(3));
        assert_ne!(Seeds::derive(3), Seeds::derive(4));
    }
}
