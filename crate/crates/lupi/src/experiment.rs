//! Full two-stage runs: pretraining, privileged-information training,
//! evaluation and the experiment directory.
//!
//! Progress is written to `progress/` every `log_every · 10` iterations and
//! at each phase boundary. A run started on a directory holding progress for
//! the same configuration continues from there and produces the same files
//! as an uninterrupted run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lupi_core::metrics::activation_maps;
use lupi_core::synth::Dataset;
use lupi_core::train::{
    background_activation, mean_inter_loss, mean_pose_loss, run_pi, run_pretrain, taps, Control,
    Hook, LossRecord, Role, TrainConfig,
};
use lupi_core::{Network, Sgd};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, metric_rows, modality_of, Evaluation, Grids, METRIC_HEADER};
use crate::formats::{self, num};

pub const TEACHER: &str = "teacher";
pub const STUDENT_BASELINE: &str = "student_baseline";
pub const STUDENT_PI: &str = "student_pi";
pub const MODELS: [&str; 3] = [TEACHER, STUDENT_BASELINE, STUDENT_PI];

const PROGRESS_DIR: &str = "progress";
const LOSS_HEADER: [&str; 5] = ["iteration", "stage", "split", "loss_name", "value"];

/// Weight-init seed of each network; independent of the data seed.
pub fn init_seed(cfg: &TrainConfig, role: Role) -> u64 {
    cfg.seed.wrapping_mul(2).wrapping_add(role as u64)
}

pub fn generate_data(cfg: &TrainConfig) -> Result<Dataset> {
    Ok(lupi_core::synth::make_dataset(cfg.n_samples, &cfg.skeleton, cfg.data_seed)?.0)
}

/// Final numbers of one model on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    #[serde(flatten)]
    pub evaluation: Evaluation,
    pub test_pose_loss: f64,
    /// Mean absolute tapped activation outside the hand.
    pub background_activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub teacher_digest_before_pi: String,
    pub teacher_digest_after_pi: String,
    /// Keyed by model name.
    pub models: BTreeMap<String, ModelReport>,
    pub test_inter_loss_baseline: f64,
    pub test_inter_loss_pi: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop without cleanup after this many iterations in this invocation,
    /// as a crash would. Only progress already on disk survives.
    pub interrupt_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Finished(Box<Summary>),
    Interrupted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Phase {
    Teacher,
    Student,
    Pi,
    Done,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "stage 1 (teacher)",
            Phase::Student => "stage 1 (student)",
            Phase::Pi => "stage 2",
            Phase::Done => "evaluation",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    config: TrainConfig,
    phase: Phase,
    /// Completed iterations of `phase`.
    done: usize,
    records: Vec<LossRecord>,
}

/// Runs (or resumes) a full experiment into `out`.
pub fn run_experiment(cfg: &TrainConfig, out: &Path) -> Result<Summary> {
    match run_experiment_with(cfg, out, None, &RunOptions::default())? {
        Outcome::Finished(s) => Ok(*s),
        Outcome::Interrupted => unreachable!("no interruption requested"),
    }
}

/// As [`run_experiment`], optionally on pre-generated data (which must match
/// the config) and with a simulated interruption.
pub fn run_experiment_with(
    cfg: &TrainConfig,
    out: &Path,
    data: Option<&Dataset>,
    opts: &RunOptions,
) -> Result<Outcome> {
    cfg.validate()?;
    cfg.specs()?;
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = generate_data(cfg)?;
            &owned
        }
    };
    let run = Run::new(cfg, data, out, opts.interrupt_after)?;
    run.execute()
}

/// One phase's core loop over an iteration range.
type Step<'a> = dyn FnMut(
        &mut Network,
        &mut Sgd,
        std::ops::Range<usize>,
        &mut Vec<LossRecord>,
        &mut Hook<'_>,
    ) -> lupi_core::Result<()>
    + 'a;

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    out: PathBuf,
    ckpt: PathBuf,
    progress: PathBuf,
    budget: Option<usize>,
}

enum PhaseEnd {
    Complete,
    Interrupted,
}

impl<'a> Run<'a> {
    fn new(
        cfg: &'a TrainConfig,
        data: &'a Dataset,
        out: &Path,
        budget: Option<usize>,
    ) -> Result<Self> {
        let ckpt = out.join(&cfg.checkpoint_dir);
        let progress = out.join(PROGRESS_DIR);
        for d in [out, &ckpt, &progress] {
            std::fs::create_dir_all(d).map_err(Error::io(d))?;
        }
        Ok(Run {
            cfg,
            data,
            out: out.to_path_buf(),
            ckpt,
            progress,
            budget,
        })
    }

    fn ckpt_path(&self, model: &str) -> PathBuf {
        self.ckpt.join(format!("{model}.plck"))
    }

    fn state_path(&self) -> PathBuf {
        self.progress.join("state.json")
    }

    fn load_progress(&self) -> Result<Progress> {
        let path = self.state_path();
        if path.exists() {
            let p: Progress = formats::read_json(&path)?;
            if p.config == *self.cfg {
                return Ok(p);
            }
        }
        Ok(Progress {
            config: self.cfg.clone(),
            phase: Phase::Teacher,
            done: 0,
            records: Vec::new(),
        })
    }

    fn save_progress(
        &self,
        phase: Phase,
        done: usize,
        records: &[LossRecord],
        live: Option<(&Network, &Sgd)>,
    ) -> Result<()> {
        if let Some((net, opt)) = live {
            checkpoint::write_atomic(&self.progress.join("net.plck"), &checkpoint::encode(net))?;
            checkpoint::write_atomic(
                &self.progress.join("momentum.plmo"),
                &checkpoint::encode_momentum(opt),
            )?;
        }
        let state = Progress {
            config: self.cfg.clone(),
            phase,
            done,
            records: records.to_vec(),
        };
        let bytes = serde_json::to_vec(&state).map_err(Error::json(self.state_path()))?;
        checkpoint::write_atomic(&self.state_path(), &bytes)
    }

    /// Network and optimizer for a phase, restored from progress if `done > 0`.
    fn live(&self, fresh: Network, lr: f64, done: usize) -> Result<(Network, Sgd)> {
        let net = if done > 0 {
            checkpoint::load(&self.progress.join("net.plck"))?
        } else {
            fresh
        };
        let mut opt = Sgd::new(lr, self.cfg.momentum, net.named_params())?;
        if done > 0 {
            let path = self.progress.join("momentum.plmo");
            let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
            checkpoint::decode_momentum(&bytes, &path, &mut opt)?;
        }
        Ok((net, opt))
    }

    fn execute(mut self) -> Result<Outcome> {
        formats::write_json(&self.out.join("config.json"), self.cfg)?;
        let mut p = self.load_progress()?;
        let (teacher_spec, student_spec) = self.cfg.specs()?;
        while p.phase != Phase::Done {
            let phase = p.phase;
            let end = match phase {
                Phase::Teacher => {
                    let fresh =
                        Network::build(teacher_spec.clone(), init_seed(self.cfg, Role::Teacher))?;
                    self.pretrain_phase(Role::Teacher, fresh, &mut p)
                }
                Phase::Student => {
                    let fresh =
                        Network::build(student_spec.clone(), init_seed(self.cfg, Role::Student))?;
                    self.pretrain_phase(Role::Student, fresh, &mut p)
                }
                Phase::Pi => self.pi_phase(&mut p),
                Phase::Done => unreachable!(),
            }
            .map_err(Error::in_stage(phase.name()))?;
            if let PhaseEnd::Interrupted = end {
                return Ok(Outcome::Interrupted);
            }
        }
        let summary = self
            .finish(&p.records)
            .map_err(Error::in_stage(Phase::Done.name()))?;
        std::fs::remove_dir_all(&self.progress).map_err(Error::io(&self.progress))?;
        Ok(Outcome::Finished(Box::new(summary)))
    }

    /// Drives one phase through `step`, saving progress on the cadence and
    /// honouring the interruption budget. `step` runs the core loop over a
    /// range with the given hook.
    fn drive(
        &mut self,
        phase: Phase,
        total: usize,
        p: &mut Progress,
        net: &mut Network,
        opt: &mut Sgd,
        step: &mut Step<'_>,
    ) -> Result<PhaseEnd> {
        let cadence = self.cfg.log_every * 10;
        let mut failure: Option<Error> = None;
        let mut interrupted = false;
        let mut budget = self.budget;
        {
            let mut hook = |done: usize, net: &Network, opt: &Sgd, recs: &[LossRecord]| {
                if done.is_multiple_of(cadence) && done < total {
                    if let Err(e) = self.save_progress(phase, done, recs, Some((net, opt))) {
                        failure = Some(e);
                        return Ok(Control::Stop);
                    }
                }
                if let Some(b) = budget.as_mut() {
                    *b = b.saturating_sub(1);
                    if *b == 0 {
                        interrupted = true;
                        return Ok(Control::Stop);
                    }
                }
                Ok(Control::Continue)
            };
            step(net, opt, p.done..total, &mut p.records, &mut hook)?;
        }
        self.budget = budget;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(if interrupted {
            PhaseEnd::Interrupted
        } else {
            PhaseEnd::Complete
        })
    }

    fn pretrain_phase(&mut self, role: Role, fresh: Network, p: &mut Progress) -> Result<PhaseEnd> {
        let (cfg, data) = (self.cfg, self.data);
        let (phase, next, name) = match role {
            Role::Teacher => (Phase::Teacher, Phase::Student, TEACHER),
            Role::Student => (Phase::Student, Phase::Pi, STUDENT_BASELINE),
        };
        let (mut net, mut opt) = self.live(fresh, cfg.lr, p.done)?;
        let mut step = |net: &mut Network,
                        opt: &mut Sgd,
                        range,
                        recs: &mut Vec<LossRecord>,
                        hook: &mut Hook<'_>| {
            run_pretrain(role, net, opt, data, cfg, range, recs, hook)
        };
        if let PhaseEnd::Interrupted =
            self.drive(phase, cfg.stage1_iters, p, &mut net, &mut opt, &mut step)?
        {
            return Ok(PhaseEnd::Interrupted);
        }
        if role == Role::Teacher {
            net.freeze();
        }
        checkpoint::save(&net, &self.ckpt_path(name))?;
        p.phase = next;
        p.done = 0;
        self.save_progress(next, 0, &p.records, None)?;
        Ok(PhaseEnd::Complete)
    }

    fn pi_phase(&mut self, p: &mut Progress) -> Result<PhaseEnd> {
        let (cfg, data) = (self.cfg, self.data);
        let teacher = checkpoint::load(&self.ckpt_path(TEACHER))?;
        let before = teacher.digest();
        let baseline = checkpoint::load(&self.ckpt_path(STUDENT_BASELINE))?;
        let (mut net, mut opt) = self.live(baseline, cfg.lr_pi, p.done)?;
        let mut step = |net: &mut Network,
                        opt: &mut Sgd,
                        range,
                        recs: &mut Vec<LossRecord>,
                        hook: &mut Hook<'_>| {
            run_pi(&teacher, net, opt, data, cfg, range, recs, hook)
        };
        if let PhaseEnd::Interrupted = self.drive(
            Phase::Pi,
            cfg.stage2_iters,
            p,
            &mut net,
            &mut opt,
            &mut step,
        )? {
            return Ok(PhaseEnd::Interrupted);
        }
        teacher.verify_frozen()?;
        if teacher.digest() != before {
            return Err(lupi_core::Error::Contract(
                "teacher parameters changed during stage 2".into(),
            )
            .into());
        }
        checkpoint::save(&net, &self.ckpt_path(STUDENT_PI))?;
        p.phase = Phase::Done;
        p.done = 0;
        self.save_progress(Phase::Done, 0, &p.records, None)?;
        Ok(PhaseEnd::Complete)
    }

    fn finish(&self, records: &[LossRecord]) -> Result<Summary> {
        let (cfg, data) = (self.cfg, self.data);
        write_losses(&self.out.join("losses.csv"), records)?;
        let grids = Grids::default();
        let act_dir = self.out.join("activations");
        std::fs::create_dir_all(&act_dir).map_err(Error::io(&act_dir))?;
        let shown = &data.test[..cfg.activation_samples.min(data.test.len())];
        let mut models = BTreeMap::new();
        let mut metric_table = Vec::new();
        let mut nets = BTreeMap::new();
        for name in MODELS {
            let net = checkpoint::load(&self.ckpt_path(name))?;
            let modality = modality_of(net.spec());
            let evaluation = evaluate(&net, &data.test, &cfg.skeleton, &grids)?;
            metric_table.extend(metric_rows(name, &evaluation));
            if !shown.is_empty() {
                for (i, img) in activation_maps(&taps(&net, shown, modality)?)?
                    .iter()
                    .enumerate()
                {
                    formats::write_pgm(&act_dir.join(format!("{name}_{i:03}.pgm")), img)?;
                }
            }
            let report = ModelReport {
                evaluation,
                test_pose_loss: mean_pose_loss(&net, &data.test, modality)?,
                background_activation: background_activation(&net, &data.test, modality)?,
            };
            models.insert(name.to_string(), report);
            nets.insert(name, net);
        }
        formats::write_csv(&self.out.join("metrics.csv"), &METRIC_HEADER, metric_table)?;
        let teacher = &nets[TEACHER];
        let summary = Summary {
            config: cfg.clone(),
            n_train: data.train.len(),
            n_test: data.test.len(),
            teacher_digest_before_pi: hex(&teacher
                .frozen_digest()
                .unwrap_or_else(|| teacher.digest())),
            teacher_digest_after_pi: hex(&teacher.digest()),
            models,
            test_inter_loss_baseline: mean_inter_loss(
                teacher,
                &nets[STUDENT_BASELINE],
                &data.test,
            )?,
            test_inter_loss_pi: mean_inter_loss(teacher, &nets[STUDENT_PI], &data.test)?,
        };
        formats::write_json(&self.out.join("summary.json"), &summary)?;
        Ok(summary)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Long-format loss log, one row per present loss.
pub fn write_losses(path: &Path, records: &[LossRecord]) -> Result<()> {
    let rows = records.iter().flat_map(|r| {
        r.entries().into_iter().map(move |(name, v)| {
            vec![
                r.iteration.to_string(),
                r.stage.as_str().into(),
                r.split.as_str().into(),
                name.into(),
                num(v),
            ]
        })
    });
    formats::write_csv(path, &LOSS_HEADER, rows)
}

/// Stage-1 training of one network from its seeded initialization, without
/// progress files.
pub fn pretrain(
    role: Role,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(Network, Vec<LossRecord>)> {
    let (t, s) = cfg.specs()?;
    let spec = if role == Role::Teacher { t } else { s };
    let mut net = Network::build(spec, init_seed(cfg, role))?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, net.named_params())?;
    let mut records = Vec::new();
    run_pretrain(
        role,
        &mut net,
        &mut opt,
        data,
        cfg,
        0..cfg.stage1_iters,
        &mut records,
        &mut |_, _, _, _| Ok(Control::Continue),
    )?;
    if role == Role::Teacher {
        net.freeze();
    }
    Ok((net, records))
}

/// Stage-2 training of a copy of `baseline` against the frozen `teacher`.
pub fn pi_train(
    cfg: &TrainConfig,
    data: &Dataset,
    teacher: &Network,
    baseline: &Network,
) -> Result<(Network, Vec<LossRecord>)> {
    let mut net = baseline.clone();
    let mut opt = Sgd::new(cfg.lr_pi, cfg.momentum, net.named_params())?;
    let mut records = Vec::new();
    run_pi(
        teacher,
        &mut net,
        &mut opt,
        data,
        cfg,
        0..cfg.stage2_iters,
        &mut records,
        &mut |_, _, _, _| Ok(Control::Continue),
    )?;
    Ok((net, records))
}
