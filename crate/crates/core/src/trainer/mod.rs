//! The joint training loop: roll out the flow-network policy, store
//! transitions, alternate energy-model and sampler updates at a
//! configurable ratio, soft-update all target copies, checkpoint at epoch
//! boundaries, and stream one metrics row per environment timestep.

pub mod checkpoint;
pub mod replay;

pub use replay::ReplayBuffer;

use crate::action_space::{ActionSpaceSpec, StructuredAction};
use crate::autodiff::params::adamw_step;
use crate::encoder::EncoderConfig;
use crate::envs::{Env, EnvConfig, EnvObservation, Transition};
use crate::error::{Error, Result};
use crate::gflownet::{ConditionalGFlowNet, GFlowNetConfig};
use crate::softq::{ParamKind, SoftQConfig, SoftQFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);

/// How the soft value used for Bellman targets and Z regression is
/// estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SoftValueMode {
    /// Enumerate the whole action space; exact at desk scale.
    ExhaustiveUniform,
    /// Importance-weighted estimate from `m` draws of the current forward
    /// policy, with exact proposal probabilities from the DP.
    GflownetProposals { m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub seed: u64,
    pub epochs: u64,
    pub steps_per_epoch: u64,

    pub gamma: f64,
    pub alpha: f64,
    /// Per-epoch multiplier on alpha; 1 disables the schedule.
    pub alpha_decay: f64,

    pub lr_q: f64,
    pub lr_gfn: f64,
    pub lr_z: f64,
    pub weight_decay: f64,
    pub tau: f64,

    pub batch_size: usize,
    pub gfn_batch_size: usize,
    pub buffer_capacity: usize,
    pub replay_start: usize,
    pub gfn_update_ratio: u64,
    pub gfn_updates_per_round: u64,
    pub updates_per_env_step: u64,

    pub epsilon_uniform: f64,
    pub sampling_temperature: f64,
    pub max_grad_norm: f64,
    pub lambda_z: f64,
    pub enumeration_limit: u64,
    pub termination_enabled: bool,
    /// Skip energy-model updates (the sampler then chases a frozen target).
    pub freeze_ebm: bool,
    pub soft_value: SoftValueMode,

    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub gnn_layers: usize,
    pub gnn_gamma: f64,
    pub layer_norm: bool,
    pub dropout: f64,
    pub attn_dropout: f64,

    pub early_stop_enabled: bool,
    /// Stop at an epoch boundary once the 100-step moving average of the
    /// TB loss falls below this.
    pub early_stop_tb_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::GridSignals { n_signals: 3 },
            seed: 0,
            epochs: 3,
            steps_per_epoch: 64,
            gamma: 0.95,
            alpha: 1.0,
            alpha_decay: 1.0,
            lr_q: 3e-4,
            lr_gfn: 3e-4,
            lr_z: 1e-2,
            weight_decay: 0.0,
            tau: 0.05,
            batch_size: 32,
            gfn_batch_size: 8,
            buffer_capacity: 1_000_000,
            replay_start: 32,
            gfn_update_ratio: 4,
            gfn_updates_per_round: 1,
            updates_per_env_step: 1,
            epsilon_uniform: 0.05,
            sampling_temperature: 1.0,
            max_grad_norm: 20.0,
            lambda_z: 1.0,
            enumeration_limit: 1_000_000,
            termination_enabled: false,
            freeze_ebm: false,
            soft_value: SoftValueMode::ExhaustiveUniform,
            hidden_dim: 32,
            attn_dim: 32,
            gnn_layers: 2,
            gnn_gamma: 0.5,
            layer_norm: true,
            dropout: 0.0,
            attn_dropout: 0.0,
            early_stop_enabled: false,
            early_stop_tb_threshold: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be positive".into()));
        }
        if self.batch_size == 0 || self.gfn_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.gfn_update_ratio == 0 {
            return Err(Error::Config("gfn_update_ratio must be >= 1".into()));
        }
        if self.lr_q < 0.0 || self.lr_gfn < 0.0 || self.lr_z < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if !(0.0 < self.tau && self.tau <= 1.0) {
            return Err(Error::Config("tau must lie in (0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon_uniform) {
            return Err(Error::Config("epsilon_uniform must lie in [0,1)".into()));
        }
        if !(self.alpha > 0.0) || !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::Config("alpha must be > 0 and gamma in (0,1)".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: self.hidden_dim,
            gnn_layers: self.gnn_layers,
            gnn_gamma: self.gnn_gamma,
            layer_norm: self.layer_norm,
            dropout: self.dropout,
        }
    }

    pub fn softq_config(&self) -> SoftQConfig {
        SoftQConfig { alpha: self.alpha, gamma: self.gamma, encoder: self.encoder_config() }
    }

    pub fn gflownet_config(&self) -> GFlowNetConfig {
        GFlowNetConfig {
            encoder: self.encoder_config(),
            attn_dim: self.attn_dim,
            epsilon_uniform: self.epsilon_uniform,
            sampling_temperature: self.sampling_temperature,
            attn_dropout: self.attn_dropout,
        }
    }
}

/// One CSV row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub env_reward: f64,
    pub q_loss: f64,
    pub tb_loss: f64,
    pub z_loss: f64,
    pub logz_mean: f64,
    pub buffer_size: usize,
    pub eps: f64,
}

pub const METRICS_HEADER: &str =
    "step,epoch,env_reward,q_loss,tb_loss,z_loss,logz_mean,buffer_size,eps";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.env_reward,
            self.q_loss,
            self.tb_loss,
            self.z_loss,
            self.logz_mean,
            self.buffer_size,
            self.eps
        )
    }
}

/// Output of a finished (or early-stopped) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub total_env_steps: u64,
    pub ebm_updates: u64,
    pub gfn_updates: u64,
    pub early_stopped: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub env: Env,
    pub q: SoftQFunction,
    pub gfn: ConditionalGFlowNet,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha12Rng,
    pub epoch: u64,
    pub global_step: u64,
    pub episode_index: u64,
    pub last_action: Option<StructuredAction>,
    pub ebm_updates: u64,
    pub gfn_updates: u64,
    /// Trailing TB losses for the optional early stop.
    tb_window: VecDeque<f64>,
    /// Exhaustive soft values keyed by observation; cleared whenever the
    /// target energy model moves.
    value_cache: HashMap<Vec<u64>, f64>,
}

/// The log-reward fed to the trajectory-balance objective. Reads the target
/// copy of the energy model, never the online one; the training loop has no
/// other reward path.
pub fn tb_log_reward(
    q: &SoftQFunction,
    obs: &EnvObservation,
    action: &StructuredAction,
    spec: &ActionSpaceSpec,
) -> Result<f64> {
    q.boltzmann_log_reward(ParamKind::Target, obs, action, spec)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env.build(config.seed)?;
        let mut spec = env.action_spec().clone();
        spec.termination_enabled = config.termination_enabled;
        let obs_width = env.obs().width();
        let q = SoftQFunction::new(&spec, obs_width, config.softq_config(), config.seed ^ 0x51)?;
        let gfn =
            ConditionalGFlowNet::new(&spec, obs_width, config.gflownet_config(), config.seed ^ 0x6f)?;
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x7a);
        Ok(Self {
            config,
            env,
            q,
            gfn,
            buffer,
            rng,
            epoch: 0,
            global_step: 0,
            episode_index: 0,
            last_action: None,
            ebm_updates: 0,
            gfn_updates: 0,
            tb_window: VecDeque::new(),
            value_cache: HashMap::new(),
        })
    }

    /// The action-space spec used for sampling and scoring (the env's spec
    /// with the configured termination flag).
    pub fn spec(&self) -> ActionSpaceSpec {
        let mut spec = self.env.action_spec().clone();
        spec.termination_enabled = self.config.termination_enabled;
        spec
    }

    fn soft_value_target(&mut self, obs: &EnvObservation, spec: &ActionSpaceSpec) -> Result<f64> {
        match self.config.soft_value {
            SoftValueMode::ExhaustiveUniform => {
                let key = obs.cache_key();
                if let Some(&v) = self.value_cache.get(&key) {
                    return Ok(v);
                }
                let v = self.q.soft_value_exhaustive(
                    ParamKind::Target,
                    obs,
                    spec,
                    self.config.enumeration_limit,
                )?;
                self.value_cache.insert(key, v);
                Ok(v)
            }
            SoftValueMode::GflownetProposals { m } => {
                if m == 0 {
                    return Err(Error::Config("proposal sample count must be >= 1".into()));
                }
                let dp = self.gfn.exact_terminating_distribution(
                    ParamKind::Online,
                    obs,
                    spec,
                    self.config.enumeration_limit,
                    self.last_action.as_ref(),
                )?;
                let actions: Vec<(&StructuredAction, f64)> =
                    dp.iter().map(|(a, &p)| (a, p)).collect();
                let mut samples = Vec::with_capacity(m);
                for _ in 0..m {
                    let u: f64 = self.rng.random();
                    let mut acc = 0.0;
                    let mut chosen = actions.len() - 1;
                    for (i, (_, p)) in actions.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            chosen = i;
                            break;
                        }
                    }
                    let (a, p) = actions[chosen];
                    samples.push((a.clone(), p));
                }
                self.q.soft_value_estimate(ParamKind::Target, obs, &samples, spec)
            }
        }
    }

    fn bump_value_cache(&mut self) {
        self.value_cache.clear();
    }

    /// One environment timestep plus its updates. Returns the metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let spec = self.spec();

        if self.env.done() {
            self.episode_index += 1;
            self.env = self.config.env.build(self.config.seed.wrapping_add(self.episode_index))?;
            self.last_action = None;
        }
        let obs = self.env.obs();
        let tau = self.gfn.sample_trajectory(
            &obs,
            &spec,
            &mut self.rng,
            true,
            self.last_action.as_ref(),
        )?;
        let action = tau.terminal.clone();
        let (next_obs, reward, done) = self.env.step(&action)?;
        self.buffer.push(Transition {
            obs: obs.clone(),
            action: action.clone(),
            reward,
            next_obs,
            done,
        });
        self.last_action = Some(action);
        self.global_step += 1;

        let mut q_loss_sum = 0.0;
        let mut q_loss_n = 0u64;
        let mut tb_loss_sum = 0.0;
        let mut z_loss_sum = 0.0;
        let mut logz_sum = 0.0;
        let mut gfn_n = 0u64;

        if self.buffer.len() >= self.config.replay_start {
            for _ in 0..self.config.updates_per_env_step {
                // Energy-model update.
                if !self.config.freeze_ebm {
                    let batch: Vec<Transition> = self
                        .buffer
                        .sample(self.config.batch_size, &mut self.rng)?
                        .into_iter()
                        .cloned()
                        .collect();
                    let mut targets = Vec::with_capacity(batch.len());
                    for t in &batch {
                        let v_next = if t.done {
                            0.0
                        } else {
                            self.soft_value_target(&t.next_obs, &spec)?
                        };
                        targets.push(self.q.bellman_target(t.reward, v_next, t.done));
                    }
                    let items: Vec<(&EnvObservation, &StructuredAction, f64)> = batch
                        .iter()
                        .zip(&targets)
                        .map(|(t, &y)| (&t.obs, &t.action, y))
                        .collect();
                    q_loss_sum += self.q.q_loss(&items, &spec)?;
                    q_loss_n += 1;
                    adamw_step(
                        &mut self.q.params,
                        self.config.lr_q,
                        ADAM_BETAS,
                        self.config.weight_decay,
                        self.config.max_grad_norm,
                    )?;
                    self.ebm_updates += 1;
                }

                // Sampler updates, several per energy-model update.
                let rounds = self.config.gfn_update_ratio * self.config.gfn_updates_per_round;
                for _ in 0..rounds {
                    let batch: Vec<Transition> = self
                        .buffer
                        .sample(self.config.gfn_batch_size, &mut self.rng)?
                        .into_iter()
                        .cloned()
                        .collect();
                    let scale = 1.0 / batch.len() as f64;
                    for t in &batch {
                        let fill =
                            if spec.termination_enabled { Some(&t.action) } else { None };
                        let sampled = self.gfn.sample_trajectory(
                            &t.obs,
                            &spec,
                            &mut self.rng,
                            true,
                            fill,
                        )?;
                        let log_r = tb_log_reward(&self.q, &t.obs, &sampled.terminal, &spec)?;
                        let out = self.gfn.trajectory_balance_loss(
                            &sampled, &t.obs, &spec, log_r, scale,
                        )?;
                        tb_loss_sum += out.loss * scale;
                        logz_sum += out.log_z * scale;

                        let v = self.soft_value_target(&t.obs, &spec)?;
                        let (z_loss, _) = self.gfn.z_regression_loss(
                            &t.obs,
                            &spec,
                            v,
                            self.q.alpha(),
                            self.config.lambda_z * scale,
                        )?;
                        z_loss_sum += z_loss * scale;
                    }
                    adamw_step(
                        &mut self.gfn.forward_params,
                        self.config.lr_gfn,
                        ADAM_BETAS,
                        self.config.weight_decay,
                        self.config.max_grad_norm,
                    )?;
                    adamw_step(
                        &mut self.gfn.backward_params,
                        self.config.lr_gfn,
                        ADAM_BETAS,
                        self.config.weight_decay,
                        self.config.max_grad_norm,
                    )?;
                    adamw_step(
                        &mut self.gfn.logz_params,
                        self.config.lr_z,
                        ADAM_BETAS,
                        self.config.weight_decay,
                        self.config.max_grad_norm,
                    )?;
                    self.gfn_updates += 1;
                    gfn_n += 1;
                }
            }

            // Soft target updates for all four parameter groups. Under a
            // frozen energy model the Q target never moves, so cached soft
            // values stay valid.
            if !self.config.freeze_ebm {
                self.q.update_target(self.config.tau)?;
                self.bump_value_cache();
            }
            self.gfn.update_targets(self.config.tau)?;
        }

        let tb_mean = if gfn_n > 0 { tb_loss_sum / gfn_n as f64 } else { 0.0 };
        self.tb_window.push_back(tb_mean);
        if self.tb_window.len() > 100 {
            self.tb_window.pop_front();
        }

        Ok(MetricsRow {
            step: self.global_step,
            epoch: self.epoch,
            env_reward: reward,
            q_loss: if q_loss_n > 0 { q_loss_sum / q_loss_n as f64 } else { 0.0 },
            tb_loss: tb_mean,
            z_loss: if gfn_n > 0 { z_loss_sum / gfn_n as f64 } else { 0.0 },
            logz_mean: if gfn_n > 0 { logz_sum / gfn_n as f64 } else { 0.0 },
            buffer_size: self.buffer.len(),
            eps: self.config.epsilon_uniform,
        })
    }

    fn tb_moving_average(&self) -> f64 {
        if self.tb_window.is_empty() {
            f64::INFINITY
        } else {
            self.tb_window.iter().sum::<f64>() / self.tb_window.len() as f64
        }
    }

    /// Runs the remaining epochs, writing `metrics.csv`, per-epoch
    /// checkpoints and a `summary.json` under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunArtifacts> {
        fs::create_dir_all(out_dir)?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut metrics = fs::File::create(&metrics_path)?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        metrics.flush()?;

        let mut checkpoints = Vec::new();
        let mut early_stopped = false;
        while self.epoch < self.config.epochs {
            for _ in 0..self.config.steps_per_epoch {
                let row = self.step().map_err(|e| {
                    // Leave a diagnostic checkpoint behind before aborting.
                    let _ = checkpoint::save(self, &out_dir.join("ckpt_aborted"));
                    e
                })?;
                writeln!(metrics, "{}", row.to_csv())?;
                metrics.flush()?;
            }
            self.epoch += 1;
            if self.config.alpha_decay != 1.0 {
                let alpha = self.q.alpha() * self.config.alpha_decay;
                self.q.set_alpha(alpha)?;
            }
            let ckpt = out_dir.join(format!("ckpt_epoch{}", self.epoch));
            checkpoint::save(self, &ckpt)?;
            checkpoints.push(ckpt);
            if self.config.early_stop_enabled
                && self.tb_moving_average() < self.config.early_stop_tb_threshold
            {
                early_stopped = true;
                break;
            }
        }

        let final_checkpoint =
            checkpoints.last().cloned().unwrap_or_else(|| out_dir.join("ckpt_epoch0"));
        let artifacts = RunArtifacts {
            metrics_path,
            checkpoints,
            final_checkpoint,
            total_env_steps: self.global_step,
            ebm_updates: self.ebm_updates,
            gfn_updates: self.gfn_updates,
            early_stopped,
        };
        let summary = serde_json::to_string_pretty(&artifacts)
            .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
        fs::write(out_dir.join("summary.json"), summary)?;
        Ok(artifacts)
    }
}

/// Builds a trainer and runs it to completion.
pub fn run_training(config: TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    Trainer::new(config)?.run(out_dir)
}

/// Restores a trainer from a checkpoint and continues the remaining epochs.
pub fn resume_training(ckpt: &Path, out_dir: &Path) -> Result<RunArtifacts> {
    checkpoint::load(ckpt)?.run(out_dir)
}
