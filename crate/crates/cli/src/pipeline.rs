//! Pipeline stages with provenance stamps.
//!
//! Every stage writes one or more artifact groups ("units"). A unit is keyed
//! by a stage hash over its config section and the sha256 of each upstream
//! file; a `.stamp.json` sidecar next to its first output records that hash,
//! the config hash and the output digests. Re-running a unit whose stamp
//! still matches is a no-op unless forced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use latshield_core::artifacts::{load_bundle, save_manifest, stamp_path, BundleManifest, RunLayout, Variant, CRITIC_COMPONENT};
use latshield_core::classifier::{train_classifier, FailureClassifier};
use latshield_core::dataset::{load_dataset, save_dataset};
use latshield_core::dubins::{generate_dataset, margin_gt, Renderer};
use latshield_core::eval::{
    ablation_run, confusion, emit_report, f1, rollout_eval, ConfusionCounts, GridPolicy, LatentMonitor, LatentPolicy,
    PrivMonitor, PrivPolicy, Report,
};
use latshield_core::filter::{FilterConfig, FilterMode};
use latshield_core::grid::{load_grid, sample_feasible, save_grid, solve_with_report, unsafe_volume};
use latshield_core::nn::{load_checkpoint, save_checkpoint};
use latshield_core::reach::{train_latent_critic, train_priv_critic, train_risk_critic, CriticConfig, SafetyCritic};
use latshield_core::rng::mix64;
use latshield_core::session::{aimed_start, run_scripted, Command, EpisodeStats, ModelBundle, Session};
use latshield_core::world_model::{diagnostics, holdout_split, train_wm, WorldModel};
use latshield_core::{sha256_hex, ActionIndex, ActionSet, Error, Result, State};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } | Error::ModeMismatch(_) => 3,
        Error::Divergence(_) | Error::NonConvergence { .. } => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticVariant {
    Latent,
    Priv,
    Risk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Confusion and F1 of both monitors against the grid.
    Table1,
    /// Shielded closed-loop rollouts from grid-feasible starts.
    Rollouts,
    /// Full- vs restricted-action latent unsafe volume plus slice rasters.
    Ablation,
    /// Override frequency of the risk filter at each threshold.
    Cmdp,
    /// Drive-at-the-obstacle script with the latent filter on and off.
    Teleop,
    /// Training summaries of the world models and classifiers.
    Models,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Table1, Suite::Rollouts, Suite::Ablation, Suite::Cmdp, Suite::Teleop, Suite::Models];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Rollouts => "rollouts",
            Suite::Ablation => "ablation",
            Suite::Cmdp => "cmdp",
            Suite::Teleop => "teleop",
            Suite::Models => "models",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    SolveGrid,
    TrainWm,
    TrainClassifier,
    TrainCritic(CriticVariant),
    Eval(Suite),
}

impl Stage {
    /// Everything `all` runs, in dependency order.
    pub fn all() -> Vec<Stage> {
        let mut v = vec![
            Stage::GenData,
            Stage::SolveGrid,
            Stage::TrainWm,
            Stage::TrainClassifier,
            Stage::TrainCritic(CriticVariant::Priv),
            Stage::TrainCritic(CriticVariant::Latent),
            Stage::TrainCritic(CriticVariant::Risk),
        ];
        v.extend(Suite::ALL.iter().map(|&s| Stage::Eval(s)));
        v
    }
}

const GEN_DATA: &str = "gen-data";
const SOLVE_GRID: &str = "solve-grid";
const TRAIN_WM: &str = "train-wm";
const TRAIN_CLASSIFIER: &str = "train-classifier";
const TRAIN_CRITIC: &str = "train-critic";
const EVAL: &str = "eval";

/// Sidecar written next to a unit's first output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub unit: String,
    pub stage_hash: String,
    pub config_hash: String,
    /// Upstream file name → sha256.
    pub upstream: BTreeMap<String, String>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
}

/// Provenance handed to a unit's builder for embedding in checkpoints.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub stage: &'static str,
    pub unit: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub upstream: BTreeMap<String, String>,
}

impl Provenance {
    pub fn metadata(&self) -> Value {
        json!({"provenance": {
            "stage": self.stage,
            "unit": self.unit,
            "stage_hash": self.stage_hash,
            "config_hash": self.config_hash,
            "upstream": self.upstream,
        }})
    }
}

struct Input {
    producer: &'static str,
    path: PathBuf,
}

fn input(producer: &'static str, path: PathBuf) -> Input {
    Input { producer, path }
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn file_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn section<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config sections serialize")
}

fn confusion_json(c: &ConfusionCounts) -> Value {
    json!({"confusion": c, "f1": f1(c)})
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: RunLayout,
    pub force: bool,
    config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        let layout = RunLayout::new(&cfg.output_dir);
        let config_hash = cfg.hash();
        Self {
            cfg,
            layout,
            force,
            config_hash,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn report_path(&self, suite: Suite) -> PathBuf {
        self.layout.reports().join(format!("{}.json", suite.as_str()))
    }

    pub fn solve_report_path(&self) -> PathBuf {
        self.layout.root.join("grid").join("solve.json")
    }

    /// Wall-clock seconds per executed unit; not part of any metric report.
    pub fn timings_path(&self) -> PathBuf {
        self.layout.root.join("timings.json")
    }

    /// Seed for one named random stream, derived from the config seed.
    pub fn seed(&self, stream: u64) -> u64 {
        mix64(self.cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::SolveGrid => self.solve_grid(),
            Stage::TrainWm => self.train_wm(),
            Stage::TrainClassifier => self.train_classifier(),
            Stage::TrainCritic(v) => self.train_critic(v),
            Stage::Eval(s) => self.eval(s),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::all() {
            self.run(stage)?;
        }
        Ok(())
    }

    fn unit(
        &self,
        stage: &'static str,
        unit: &str,
        section: Value,
        inputs: &[Input],
        outputs: &[PathBuf],
        build: impl FnOnce(&Provenance) -> Result<()>,
    ) -> Result<Outcome> {
        let mut upstream = BTreeMap::new();
        for i in inputs {
            if !i.path.exists() {
                return Err(Error::MissingArtifact {
                    stage: i.producer,
                    path: i.path.display().to_string(),
                });
            }
            upstream.insert(file_name(&i.path), file_sha(&i.path)?);
        }
        let key = json!({"stage": stage, "unit": unit, "section": section, "upstream": upstream});
        let stage_hash = sha256_hex(key.to_string().as_bytes());
        let stamp_file = stamp_path(&outputs[0]);
        if !self.force && self.stamp_matches(&stamp_file, &stage_hash, outputs)? {
            info!("{stage} [{unit}]: up to date");
            return Ok(Outcome::Skipped);
        }
        for o in outputs {
            ensure_parent(o)?;
        }
        let prov = Provenance {
            stage,
            unit: unit.to_string(),
            stage_hash: stage_hash.clone(),
            config_hash: self.config_hash.clone(),
            upstream: upstream.clone(),
        };
        info!("{stage} [{unit}]: running");
        let t0 = Instant::now();
        build(&prov)?;
        let secs = t0.elapsed().as_secs_f64();
        info!("{stage} [{unit}]: done in {secs:.1} s");
        let mut digests = BTreeMap::new();
        for o in outputs {
            digests.insert(file_name(o), file_sha(o)?);
        }
        let stamp = Stamp {
            stage: stage.to_string(),
            unit: unit.to_string(),
            stage_hash,
            config_hash: self.config_hash.clone(),
            upstream,
            outputs: digests,
        };
        fs::write(&stamp_file, serde_json::to_string_pretty(&stamp).expect("stamp serializes") + "\n")?;
        self.record_timing(&format!("{stage}/{unit}"), secs)?;
        Ok(Outcome::Ran)
    }

    fn stamp_matches(&self, stamp_file: &Path, stage_hash: &str, outputs: &[PathBuf]) -> Result<bool> {
        let Ok(text) = fs::read_to_string(stamp_file) else {
            return Ok(false);
        };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
            return Ok(false);
        };
        if stamp.stage_hash != stage_hash {
            return Ok(false);
        }
        for o in outputs {
            if !o.exists() || stamp.outputs.get(&file_name(o)) != Some(&file_sha(o)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn record_timing(&self, key: &str, secs: f64) -> Result<()> {
        let path = self.timings_path();
        let mut t: BTreeMap<String, f64> = fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        t.insert(key.to_string(), secs);
        ensure_parent(&path)?;
        fs::write(&path, serde_json::to_string_pretty(&t).expect("timings serialize") + "\n")?;
        Ok(())
    }

    fn report(&self, kind: Suite, metrics: Value, artifacts: Vec<String>) -> Result<()> {
        let r = Report {
            kind: kind.as_str().to_string(),
            config_hash: self.config_hash.clone(),
            metrics,
            artifacts,
        };
        emit_report(&r, &self.report_path(kind))
    }

    fn actions_of(&self, v: Variant) -> ActionSet {
        match v {
            Variant::Full => ActionSet::FULL,
            Variant::Restricted => self.cfg.ablation.actions,
        }
    }

    fn gen_data(&self) -> Result<Outcome> {
        let c = &self.cfg;
        let mut outcome = Outcome::Skipped;
        for v in [Variant::Full, Variant::Restricted] {
            let actions = self.actions_of(v);
            let mut outputs = vec![self.layout.dataset(v)];
            if v == Variant::Full {
                outputs.push(self.layout.manifest());
            }
            let sec = json!({"env": c.env, "render": c.render, "data": c.data, "actions": actions,
                             "margin_scale": c.critic_priv.margin_scale});
            let o = self.unit(GEN_DATA, v.as_str(), sec, &[], &outputs, |_| {
                let d = generate_dataset(c.data.n_traj, c.data.t_max, actions, c.data.seed, &c.env, &c.render)?;
                info!("{} dataset: {} trajectories, {} steps", v.as_str(), d.trajectories.len(), d.total_steps());
                save_dataset(&d, &self.layout.dataset(v))?;
                if v == Variant::Full {
                    let m = BundleManifest {
                        params: c.env,
                        render: c.render,
                        margin_scale: c.critic_priv.margin_scale,
                    };
                    save_manifest(&m, &self.layout.manifest())?;
                }
                Ok(())
            })?;
            if o == Outcome::Ran {
                outcome = Outcome::Ran;
            }
        }
        Ok(outcome)
    }

    fn solve_grid(&self) -> Result<Outcome> {
        let c = &self.cfg;
        let outputs = [self.layout.grid(), self.solve_report_path()];
        self.unit(SOLVE_GRID, "gt", json!({"env": c.env, "grid": c.grid}), &[], &outputs, |prov| {
            let spec = c.grid.spec(&c.env);
            let (g, rep) = solve_with_report(&c.env, spec, &c.grid.solver)?;
            save_grid(&g, &self.layout.grid())?;
            let mut max_excess = f64::NEG_INFINITY;
            let mut obstacle_nodes = 0usize;
            let mut obstacle_negative = 0usize;
            for i in 0..g.spec.len() {
                let l = margin_gt(&g.spec.node_state(i), &c.env);
                let v = g.values[i] as f64;
                max_excess = max_excess.max(v - (l as f32) as f64);
                if l < 0.0 {
                    obstacle_nodes += 1;
                    obstacle_negative += usize::from(v < 0.0);
                }
            }
            let metrics = json!({
                "iterations": rep.iterations,
                "final_delta": rep.final_delta,
                "max_increase": rep.max_increase,
                "unsafe_fraction": unsafe_volume(&g),
                "failure_area_fraction": c.env.failure_area_fraction(),
                "max_value_minus_margin": max_excess,
                "obstacle_nodes": obstacle_nodes,
                "obstacle_nodes_negative": obstacle_negative,
                "deltas": rep.deltas,
            });
            let mut text = serde_json::to_string_pretty(&json!({"metrics": metrics, "meta": prov.metadata()}))
                .expect("report serializes");
            text.push('\n');
            fs::write(self.solve_report_path(), text)?;
            Ok(())
        })
    }

    fn train_wm(&self) -> Result<Outcome> {
        let c = &self.cfg;
        let mut outcome = Outcome::Skipped;
        for v in [Variant::Full, Variant::Restricted] {
            let inputs = [input(GEN_DATA, self.layout.dataset(v)), input(GEN_DATA, self.layout.manifest())];
            let sec = json!({"world_model": c.world_model, "seed": self.seed(1)});
            let o = self.unit(TRAIN_WM, v.as_str(), sec, &inputs, &[self.layout.world_model(v)], |prov| {
                let d = load_dataset(&self.layout.dataset(v))?;
                let wm = train_wm(&d, &c.world_model, self.seed(1))?;
                let renderer = Renderer::new(c.render, c.env)?;
                let (_, held) = holdout_split(d.trajectories.len(), c.world_model.holdout_fraction);
                let diag = diagnostics(&wm, &d, &held, &renderer)?;
                info!("{} world model: {diag:?}", v.as_str());
                let mut meta = prov.metadata();
                meta["diagnostics"] = section(&diag);
                save_checkpoint(&wm.to_checkpoint(meta), &self.layout.world_model(v))
            })?;
            if o == Outcome::Ran {
                outcome = Outcome::Ran;
            }
        }
        Ok(outcome)
    }

    fn train_classifier(&self) -> Result<Outcome> {
        let c = &self.cfg;
        let mut outcome = Outcome::Skipped;
        for v in [Variant::Full, Variant::Restricted] {
            let inputs = [input(GEN_DATA, self.layout.dataset(v)), input(TRAIN_WM, self.layout.world_model(v))];
            let sec = json!({"classifier": c.classifier, "seed": self.seed(2)});
            let o = self.unit(TRAIN_CLASSIFIER, v.as_str(), sec, &inputs, &[self.layout.classifier(v)], |prov| {
                let d = load_dataset(&self.layout.dataset(v))?;
                let wm = WorldModel::from_checkpoint(&load_checkpoint(&self.layout.world_model(v))?)?;
                let clf = train_classifier(&wm, &d, &c.classifier, self.seed(2))?;
                save_checkpoint(&clf.to_checkpoint(prov.metadata()), &self.layout.classifier(v))
            })?;
            if o == Outcome::Ran {
                outcome = Outcome::Ran;
            }
        }
        Ok(outcome)
    }

    fn latent_inputs(&self, v: Variant) -> [Input; 3] {
        [
            input(GEN_DATA, self.layout.dataset(v)),
            input(TRAIN_WM, self.layout.world_model(v)),
            input(TRAIN_CLASSIFIER, self.layout.classifier(v)),
        ]
    }

    fn load_latent_stack(&self, v: Variant) -> Result<(latshield_core::Dataset, WorldModel, FailureClassifier)> {
        Ok((
            load_dataset(&self.layout.dataset(v))?,
            WorldModel::from_checkpoint(&load_checkpoint(&self.layout.world_model(v))?)?,
            FailureClassifier::from_checkpoint(&load_checkpoint(&self.layout.classifier(v))?)?,
        ))
    }

    fn train_critic(&self, which: CriticVariant) -> Result<Outcome> {
        let c = &self.cfg;
        match which {
            CriticVariant::Priv => {
                let sec = json!({"env": c.env, "critic": c.critic_priv, "seed": self.seed(3)});
                self.unit(TRAIN_CRITIC, "priv", sec, &[], &[self.layout.priv_critic()], |prov| {
                    let critic = train_priv_critic(&c.env, &c.critic_priv, self.seed(3))?;
                    save_checkpoint(&critic.to_checkpoint(CRITIC_COMPONENT, prov.metadata()), &self.layout.priv_critic())
                })
            }
            CriticVariant::Latent => {
                let mut outcome = Outcome::Skipped;
                for v in [Variant::Full, Variant::Restricted] {
                    let cfg = CriticConfig {
                        actions: self.actions_of(v),
                        ..c.critic_latent.clone()
                    };
                    let sec = json!({"critic": cfg, "seed": self.seed(4)});
                    let unit = format!("latent_{}", v.as_str());
                    let out = self.layout.latent_critic(v);
                    let o = self.unit(TRAIN_CRITIC, &unit, sec, &self.latent_inputs(v), &[out.clone()], |prov| {
                        let (d, wm, clf) = self.load_latent_stack(v)?;
                        let critic = train_latent_critic(&wm, &clf, &d, &cfg, self.seed(4))?;
                        save_checkpoint(&critic.to_checkpoint(CRITIC_COMPONENT, prov.metadata()), &out)
                    })?;
                    if o == Outcome::Ran {
                        outcome = Outcome::Ran;
                    }
                }
                Ok(outcome)
            }
            CriticVariant::Risk => {
                let sec = json!({"risk": c.risk, "seed": self.seed(5)});
                let out = self.layout.risk_critic();
                self.unit(TRAIN_CRITIC, "risk", sec, &self.latent_inputs(Variant::Full), &[out.clone()], |prov| {
                    let (d, wm, clf) = self.load_latent_stack(Variant::Full)?;
                    let critic = train_risk_critic(&wm, &clf, &d, &c.risk, self.seed(5))?;
                    save_checkpoint(&critic.to_checkpoint(prov.metadata()), &out)
                })
            }
        }
    }

    fn load_critic(&self, path: &Path) -> Result<SafetyCritic> {
        SafetyCritic::from_checkpoint(&load_checkpoint(path)?, CRITIC_COMPONENT)
    }

    fn load_wm(&self, v: Variant) -> Result<WorldModel> {
        WorldModel::from_checkpoint(&load_checkpoint(&self.layout.world_model(v))?)
    }

    fn eval(&self, suite: Suite) -> Result<Outcome> {
        let c = &self.cfg;
        let l = &self.layout;
        let grid = || input(SOLVE_GRID, l.grid());
        let manifest = || input(GEN_DATA, l.manifest());
        let wm = |v| input(TRAIN_WM, l.world_model(v));
        let latent = |v| input(TRAIN_CRITIC, l.latent_critic(v));
        let out = self.report_path(suite);
        let sec = json!({"eval": c.eval, "ablation": c.ablation, "filter": c.serve.service.filter});
        match suite {
            Suite::Table1 => {
                let inputs = [manifest(), grid(), wm(Variant::Full), latent(Variant::Full), input(TRAIN_CRITIC, l.priv_critic())];
                self.unit(EVAL, suite.as_str(), sec, &inputs, &[out], |_| {
                    let gt = load_grid(&l.grid())?;
                    let renderer = Renderer::new(c.render, c.env)?;
                    let priv_critic = self.load_critic(&l.priv_critic())?;
                    let wm = self.load_wm(Variant::Full)?;
                    let lat = self.load_critic(&l.latent_critic(Variant::Full))?;
                    let cp = confusion(&PrivMonitor(&priv_critic), &gt)?;
                    let cl = confusion(
                        &LatentMonitor {
                            wm: &wm,
                            critic: &lat,
                            renderer: &renderer,
                        },
                        &gt,
                    )?;
                    info!("table1: privileged F1 {:.4}, latent F1 {:.4}", f1(&cp), f1(&cl));
                    let metrics = json!({
                        "privileged": confusion_json(&cp),
                        "latent": confusion_json(&cl),
                        "ground_truth_unsafe_fraction": unsafe_volume(&gt),
                        "probes": gt.spec.len(),
                    });
                    self.report(suite, metrics, vec![])
                })
            }
            Suite::Rollouts => {
                let inputs = [manifest(), grid(), wm(Variant::Full), latent(Variant::Full), input(TRAIN_CRITIC, l.priv_critic())];
                self.unit(EVAL, suite.as_str(), sec, &inputs, &[out], |_| {
                    let gt = load_grid(&l.grid())?;
                    let renderer = Renderer::new(c.render, c.env)?;
                    let starts = sample_feasible(&gt, &c.env, c.eval.n_starts, c.eval.start_margin, c.eval.start_seed)?;
                    let priv_critic = self.load_critic(&l.priv_critic())?;
                    let wm = self.load_wm(Variant::Full)?;
                    let lat = self.load_critic(&l.latent_critic(Variant::Full))?;
                    let oracle = GridPolicy {
                        grid: &gt,
                        params: &c.env,
                        actions: ActionSet::FULL,
                    };
                    let lp = LatentPolicy {
                        wm: &wm,
                        critic: &lat,
                        renderer: &renderer,
                    };
                    let mut metrics = json!({"n_initial": starts.len(), "horizon": c.eval.horizon});
                    for (name, policy) in [
                        ("grid", &oracle as &dyn latshield_core::eval::ShieldPolicy),
                        ("privileged", &PrivPolicy(&priv_critic)),
                        ("latent", &lp),
                    ] {
                        let r = rollout_eval(policy, &starts, c.eval.horizon, &c.env)?;
                        info!("rollouts {name}: {}/{}", r.n_safe_maintained, r.n_initial);
                        let first_failures: Vec<Option<usize>> = r.traces.iter().map(|t| t.failure_step).collect();
                        metrics[name] = json!({
                            "safe": r.n_safe_maintained,
                            "fraction": r.safe_fraction(),
                            "failure_steps": first_failures,
                        });
                    }
                    self.report(suite, metrics, vec![])
                })
            }
            Suite::Ablation => {
                let inputs = [
                    manifest(),
                    grid(),
                    wm(Variant::Full),
                    wm(Variant::Restricted),
                    latent(Variant::Full),
                    latent(Variant::Restricted),
                ];
                self.unit(EVAL, suite.as_str(), sec, &inputs, &[out], |_| {
                    let gt = load_grid(&l.grid())?;
                    let renderer = Renderer::new(c.render, c.env)?;
                    let (wf, wr) = (self.load_wm(Variant::Full)?, self.load_wm(Variant::Restricted)?);
                    let cf = self.load_critic(&l.latent_critic(Variant::Full))?;
                    let cr = self.load_critic(&l.latent_critic(Variant::Restricted))?;
                    let full = LatentMonitor {
                        wm: &wf,
                        critic: &cf,
                        renderer: &renderer,
                    };
                    let restricted = LatentMonitor {
                        wm: &wr,
                        critic: &cr,
                        renderer: &renderer,
                    };
                    let (rep, rasters) = ablation_run(&full, &restricted, &gt.spec, &c.env, &c.eval.slice_thetas)?;
                    let mut files = Vec::new();
                    for (f, r) in &rasters {
                        let deg = (f.theta.to_degrees().round()) as i64;
                        for (name, raster) in [("full", f), ("restricted", r)] {
                            let file = format!("ablation_{name}_theta{deg}.pgm");
                            raster.save(&l.reports().join(&file))?;
                            files.push(file);
                        }
                    }
                    let gap = 100.0 * (rep.unsafe_fraction_restricted - rep.unsafe_fraction_full);
                    info!("ablation: full {:.4}, restricted {:.4} ({gap:+.2} pp)", rep.unsafe_fraction_full, rep.unsafe_fraction_restricted);
                    let mut metrics = section(&rep);
                    metrics["gap_pp"] = json!(gap);
                    metrics["ground_truth_unsafe_fraction"] = json!(unsafe_volume(&gt));
                    self.report(suite, metrics, files)
                })
            }
            Suite::Cmdp => {
                let inputs = [
                    manifest(),
                    grid(),
                    wm(Variant::Full),
                    input(TRAIN_CLASSIFIER, l.classifier(Variant::Full)),
                    input(TRAIN_CRITIC, l.risk_critic()),
                ];
                self.unit(EVAL, suite.as_str(), sec, &inputs, &[out], |_| {
                    let bundle = Arc::new(load_bundle(l)?);
                    let gt = load_grid(&l.grid())?;
                    let starts = sample_feasible(&gt, &c.env, c.eval.cmdp_episodes, c.eval.start_margin, c.eval.start_seed ^ 0xC3D)?;
                    let mut settings = Vec::new();
                    for &eps in &c.eval.cmdp_epsilon_risk {
                        let filter = FilterConfig {
                            mode: FilterMode::Cmdp,
                            epsilon_risk: eps,
                            ..c.serve.service.filter
                        };
                        let total = drive_straight(&bundle, filter, &starts, c.eval.cmdp_ticks, self.seed(6))?;
                        let rate = total.overridden as f64 / total.ticks.max(1) as f64;
                        info!("cmdp ε_risk {eps}: override rate {rate:.4}, {} failure ticks", total.failures);
                        settings.push(json!({"epsilon_risk": eps, "stats": total, "override_rate": rate}));
                    }
                    let metrics = json!({"episodes": starts.len(), "ticks_per_episode": c.eval.cmdp_ticks, "settings": settings});
                    self.report(suite, metrics, vec![])
                })
            }
            Suite::Teleop => {
                let inputs = [
                    manifest(),
                    wm(Variant::Full),
                    input(TRAIN_CLASSIFIER, l.classifier(Variant::Full)),
                    latent(Variant::Full),
                ];
                self.unit(EVAL, suite.as_str(), sec, &inputs, &[out], |_| {
                    let bundle = Arc::new(load_bundle(l)?);
                    let start = aimed_start(&c.env, c.eval.teleop_distance, c.eval.teleop_bearing)?;
                    let mut metrics = json!({"start": start.to_array(), "ticks": c.eval.teleop_ticks});
                    for (name, mode) in [("filtered", FilterMode::LatentHj), ("unfiltered", FilterMode::Off)] {
                        let filter = FilterConfig {
                            mode,
                            ..c.serve.service.filter
                        };
                        let stats = drive_straight(&bundle, filter, &[start], c.eval.teleop_ticks, self.seed(7))?;
                        info!("teleop {name}: {stats:?}");
                        metrics[name] = section(&stats);
                    }
                    self.report(suite, metrics, vec![])
                })
            }
            Suite::Models => {
                let mut inputs = Vec::new();
                for v in [Variant::Full, Variant::Restricted] {
                    inputs.push(wm(v));
                    inputs.push(input(TRAIN_CLASSIFIER, l.classifier(v)));
                }
                self.unit(EVAL, suite.as_str(), sec, &inputs, &[out], |_| {
                    let mut metrics = json!({});
                    for v in [Variant::Full, Variant::Restricted] {
                        let w = load_checkpoint(&l.world_model(v))?;
                        let clf = FailureClassifier::from_checkpoint(&load_checkpoint(&l.classifier(v))?)?;
                        metrics[v.as_str()] = json!({
                            "world_model": {"report": w.metadata["world_model"]["report"], "diagnostics": w.metadata["diagnostics"]},
                            "classifier": clf.report,
                        });
                    }
                    self.report(suite, metrics, vec![])
                })
            }
        }
    }
}

/// Resets a session to each start and holds "straight" for `ticks` ticks;
/// returns the summed statistics.
pub fn drive_straight(bundle: &Arc<ModelBundle>, filter: FilterConfig, starts: &[State], ticks: usize, seed: u64) -> Result<EpisodeStats> {
    let mut total = EpisodeStats::default();
    for (i, s) in starts.iter().enumerate() {
        let mut session = Session::new(bundle.clone(), filter, mix64(seed ^ i as u64))?;
        session
            .handle(Command::Reset(Some(*s)))
            .map_err(|e| Error::InvalidArgument(format!("scripted start rejected: {e}")))?;
        let (_, stats) = run_scripted(&mut session, |_| ActionIndex::STRAIGHT, ticks)?;
        total.ticks += stats.ticks;
        total.overridden += stats.overridden;
        total.failures += stats.failures;
    }
    Ok(total)
}
