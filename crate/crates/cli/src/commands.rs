//! Subcommand implementations. Every command writes under one run directory
//! named by the config hash and never touches its inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use promptsearch_core::backend::http::HttpBackend;
use promptsearch_core::backend::mock::MockBackend;
use promptsearch_core::backend::server::MockServer;
use promptsearch_core::backend::{BackendEndpoint, EmbedBackend, EmbedRequest, Role};
use promptsearch_core::dataset::{self, build_ngram_index, contamination_filter, split_dev_and_pool};
use promptsearch_core::gps::mock::{AppendMutator, LengthScorer};
use promptsearch_core::gps::{run_gps, Genome, GpsConfig, GpsResult, Mutator};
use promptsearch_core::mutation::{
    BackTranslateMutator, MaskInfillMutator, MockMutator, MutatorKind, ParaphraseMutator, DEFAULT_META_PROMPT,
};
use promptsearch_core::prompt::{load_templates, PromptTemplate, TemplateRecord};
use promptsearch_core::registry::{
    example_to_line, load_examples, load_registry, LabeledExample, Registry, Split, TaskSpec,
};
use promptsearch_core::scoring::{LmClient, ScoringContext};
use promptsearch_core::self_training::{
    embedding_text, retrieve_similar, self_train, BackendLabeler, PseudoLabel, SelfTrainResult, UnlabeledExample,
};

use crate::config::{role_name, GenomeMode, LoadedConfig};
use crate::failure::DataFileError;
use crate::report::{render_table, to_report_json, Row, Spread};

/// Everything a command needs: config, registry and, in mock mode, the
/// loopback backend.
pub struct Session {
    pub cfg: LoadedConfig,
    pub registry: Registry,
    pub mock: bool,
    server: Option<MockServer>,
}

impl Session {
    pub fn open(cfg: LoadedConfig, mock: bool) -> Result<Self> {
        let registry = load_registry(cfg.resolve(&cfg.config.registry))?;
        let server = if mock {
            let backend = Arc::new(MockBackend::new(cfg.config.mock.backend.clone()));
            Some(MockServer::start(backend, cfg.config.mock.faults.clone()).context("starting mock backend")?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            registry,
            mock,
            server,
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.cfg.run_dir()
    }

    fn endpoint(&self, role: Role) -> Result<BackendEndpoint> {
        match &self.server {
            Some(server) => {
                let mut ep = server.endpoint(role);
                if let Some(declared) = self.cfg.config.endpoints.get(role_name(role)) {
                    ep.timeout_ms = declared.timeout_ms;
                    ep.max_in_flight = declared.max_in_flight;
                }
                Ok(ep)
            }
            None => Ok(self.cfg.endpoint(role)?),
        }
    }

    fn http(&self, role: Role) -> Result<Arc<HttpBackend>> {
        Ok(Arc::new(HttpBackend::new(self.endpoint(role)?, self.cfg.config.retry)?))
    }

    fn task(&self, id: &str) -> Result<&TaskSpec> {
        Ok(self.registry.require(id)?)
    }

    fn examples(&self, task: &TaskSpec) -> Result<Vec<LabeledExample>> {
        Ok(load_examples(task)?)
    }

    fn templates_for(&self, task_id: &str) -> Result<Vec<TemplateRecord>> {
        let path = self
            .cfg
            .config
            .templates
            .as_ref()
            .ok_or_else(|| anyhow!("config: `templates` is required for template-based commands"))?;
        let all = load_templates(self.cfg.resolve(path))?;
        Ok(all.into_iter().filter(|t| t.task_id == task_id).collect())
    }

    fn scoring_context(&self, task: &TaskSpec) -> Result<ScoringContext> {
        let client = if task.format.is_generation() {
            LmClient::Generate(self.http(Role::Generate)?)
        } else {
            LmClient::Score(self.http(Role::Score)?)
        };
        let mut ctx = ScoringContext::new(task.clone(), client)?;
        ctx.style = self.cfg.config.render.clone();
        ctx.max_new_tokens = self.cfg.config.max_new_tokens;
        Ok(ctx)
    }

    fn mutator(&self) -> Result<Box<dyn Mutator<PromptTemplate>>> {
        let settings = self.cfg.config.mutation.clone();
        Ok(match self.cfg.config.gps.mutator {
            MutatorKind::Mock => Box::new(MockMutator::default()),
            MutatorKind::MaskInfill => Box::new(MaskInfillMutator {
                client: self.http(Role::Generate)?,
                settings,
            }),
            MutatorKind::BackTranslate => Box::new(BackTranslateMutator {
                client: self.http(Role::Translate)?,
                settings,
            }),
            MutatorKind::Paraphrase => {
                let meta_prompt = match &self.cfg.config.meta_prompt {
                    Some(p) => {
                        let p = self.cfg.resolve(p);
                        std::fs::read_to_string(&p).with_context(|| format!("reading meta prompt {}", p.display()))?
                    }
                    None => DEFAULT_META_PROMPT.to_string(),
                };
                Box::new(ParaphraseMutator {
                    client: self.http(Role::Generate)?,
                    meta_prompt,
                    settings,
                })
            }
        })
    }

    /// Writes `contents` under the run directory and returns the path.
    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.run_dir().join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn header(&self, command: &str) -> serde_json::Map<String, Value> {
        let mut m = serde_json::Map::new();
        m.insert("command".into(), json!(command));
        m.insert("config_hash".into(), json!(self.cfg.hash()));
        m.insert("config".into(), self.cfg.canonical_json());
        m
    }
}

fn lines(examples: &[LabeledExample]) -> String {
    examples.iter().map(|e| example_to_line(e) + "\n").collect()
}

fn counts_by_gold(examples: &[LabeledExample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for e in examples {
        *m.entry(e.gold_label().unwrap_or("<text>").to_string()).or_insert(0) += 1;
    }
    m
}

/// Removes training-split examples sharing an n-gram with any test-split example.
pub fn filter(s: &Session) -> Result<String> {
    let c = &s.cfg.config;
    let mut protected = Vec::new();
    for t in s.registry.by_split(Split::Test) {
        protected.extend(s.examples(t)?);
    }
    let index = build_ngram_index(&protected, c.contamination_n, c.token_unit)?;
    let mut tasks = Vec::new();
    let mut removed_total = 0;
    for t in s.registry.by_split(Split::Train) {
        let train = s.examples(t)?;
        let out = contamination_filter(&train, &index);
        removed_total += out.removed.len();
        s.write(&format!("filtered/{}.jsonl", t.task_id), &lines(&out.kept))?;
        tasks.push(json!({
            "task_id": t.task_id,
            "total": train.len(),
            "kept": out.kept.len(),
            "removed": out.removed.len(),
            "removals": out.report,
        }));
    }
    let mut report = s.header("filter");
    report.insert("n".into(), json!(c.contamination_n));
    report.insert("token_unit".into(), json!(c.token_unit));
    report.insert("protected_examples".into(), json!(protected.len()));
    report.insert("removed".into(), json!(removed_total));
    report.insert("tasks".into(), Value::Array(tasks));
    let path = s.write("filter-report.json", &to_report_json(&report))?;
    Ok(format!("removed: {removed_total}\nreport: {}\n", path.display()))
}

/// Seeded training pools (disjoint from the dev set of the same seed).
pub fn sample(s: &Session, task_id: &str) -> Result<String> {
    let task = s.task(task_id)?;
    let examples = s.examples(task)?;
    let mut runs = Vec::new();
    for &seed in &s.cfg.config.seeds {
        let (dev, pool) = split_dev_and_pool(task, &examples, &s.cfg.config.sampling, seed)?;
        let file = format!("pool-{task_id}-seed{seed}.jsonl");
        s.write(&file, &lines(&pool))?;
        runs.push(json!({
            "seed": seed,
            "file": file,
            "size": pool.len(),
            "per_gold": counts_by_gold(&pool),
            "excluded_dev": dev.examples.len(),
        }));
    }
    let mut report = s.header("sample");
    report.insert("task_id".into(), json!(task_id));
    report.insert("runs".into(), Value::Array(runs));
    let path = s.write(&format!("sample-{task_id}.json"), &to_report_json(&report))?;
    Ok(format!("report: {}\n", path.display()))
}

pub fn dev_set(s: &Session, task_id: &str) -> Result<String> {
    let task = s.task(task_id)?;
    let examples = s.examples(task)?;
    let mut runs = Vec::new();
    let mut out = String::new();
    for &seed in &s.cfg.config.seeds {
        let dev = dataset::build_dev_set(task, &examples, seed)?;
        for w in &dev.warnings {
            tracing::warn!("{w}");
        }
        let file = format!("dev-{task_id}-seed{seed}.jsonl");
        s.write(&file, &lines(&dev.examples))?;
        out.push_str(&format!("seed {seed}: {} dev examples\n", dev.examples.len()));
        runs.push(json!({
            "seed": seed,
            "file": file,
            "size": dev.examples.len(),
            "per_gold": counts_by_gold(&dev.examples),
            "warnings": dev.warnings,
        }));
    }
    let mut report = s.header("dev-set");
    report.insert("task_id".into(), json!(task_id));
    report.insert("runs".into(), Value::Array(runs));
    let path = s.write(&format!("dev-set-{task_id}.json"), &to_report_json(&report))?;
    out.push_str(&format!("report: {}\n", path.display()));
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GpsRun {
    seed: u64,
    dev_size: usize,
    dev_warnings: Vec<String>,
    initial_best: f64,
    final_best: f64,
    /// Texts of the final top-K, best first.
    final_texts: Vec<String>,
    result: Value,
}

fn gps_run<G: Genome + Serialize>(seed: u64, dev: &dataset::DevSet, result: GpsResult<G>) -> GpsRun {
    GpsRun {
        seed,
        dev_size: dev.examples.len(),
        dev_warnings: dev.warnings.clone(),
        initial_best: result.initial_best_score().unwrap_or(f64::NAN),
        final_best: result.best_score().unwrap_or(f64::NAN),
        final_texts: result.final_top_k.iter().map(|c| c.genome.text()).collect(),
        result: serde_json::to_value(&result).expect("result serializes"),
    }
}

/// Genetic prompt search for one task, once per seed.
pub fn run_gps_cmd(s: &Session, task_id: &str) -> Result<String> {
    let task = s.task(task_id)?;
    let examples = s.examples(task)?;
    let c = &s.cfg.config;
    let mut runs = Vec::new();
    for &seed in &c.seeds {
        let dev = dataset::build_dev_set(task, &examples, seed)?;
        for w in &dev.warnings {
            tracing::warn!("{w}");
        }
        let gc = GpsConfig {
            iterations: c.gps.iterations,
            top_k: c.gps.top_k,
            offspring_per_parent: c.gps.offspring_per_parent,
            rng_seed: seed,
            dedup: c.gps.dedup,
        };
        let run = match c.gps.genome {
            GenomeMode::Text => {
                if !s.mock {
                    bail!("gps.genome = \"text\" uses the built-in length scorer and needs --mock");
                }
                if c.gps.initial_prompts.is_empty() {
                    bail!("config: gps.initial_prompts is empty");
                }
                let mutator = AppendMutator::new(c.gps.suffixes.iter().cloned());
                let result = run_gps(&c.gps.initial_prompts, &dev.examples, &LengthScorer, &mutator, &gc)?;
                gps_run(seed, &dev, result)
            }
            GenomeMode::Template => {
                let mut records = s.templates_for(task_id)?;
                if !c.gps.template_ids.is_empty() {
                    records.retain(|r| c.gps.template_ids.contains(&r.template_id));
                }
                if records.is_empty() {
                    bail!("no templates for task {task_id}");
                }
                let initial: Vec<PromptTemplate> = records.into_iter().map(|r| r.template).collect();
                let ctx = s.scoring_context(task)?;
                let mutator = s.mutator()?;
                let result = run_gps(&initial, &dev.examples, &ctx, mutator.as_ref(), &gc)?;
                gps_run(seed, &dev, result)
            }
        };
        tracing::info!(
            seed,
            initial = run.initial_best,
            best = run.final_best,
            "gps run finished"
        );
        runs.push(run);
    }
    let metric = match c.gps.genome {
        GenomeMode::Text => "length",
        GenomeMode::Template => task.metric.name(),
    };
    let manual: Vec<f64> = runs.iter().map(|r| r.initial_best).collect();
    let gps: Vec<f64> = runs.iter().map(|r| r.final_best).collect();
    let mut report = s.header("run-gps");
    report.insert("task_id".into(), json!(task_id));
    report.insert("metric".into(), json!(metric));
    report.insert(
        "summary".into(),
        json!({"manual": Spread::of(&manual), "gps": Spread::of(&gps)}),
    );
    report.insert("runs".into(), serde_json::to_value(&runs)?);
    let json_path = s.write(&format!("run-gps-{task_id}.json"), &to_report_json(&report))?;
    let table = render_table(&gps_rows(task_id, metric, &manual, &gps));
    s.write(&format!("run-gps-{task_id}.txt"), &table)?;
    Ok(format!("{table}report: {}\n", json_path.display()))
}

fn gps_rows(task_id: &str, metric: &str, manual: &[f64], gps: &[f64]) -> Vec<Row> {
    [("manual", manual), ("gps", gps)]
        .into_iter()
        .filter_map(|(method, v)| {
            Some(Row {
                task_id: task_id.to_string(),
                metric: metric.to_string(),
                method: method.to_string(),
                seeds: v.len(),
                spread: Spread::of(v)?,
            })
        })
        .collect()
}

/// Scores one template on the dev set of every seed.
pub fn eval(s: &Session, task_id: &str, template_id: &str) -> Result<String> {
    let task = s.task(task_id)?;
    let examples = s.examples(task)?;
    let record = s
        .templates_for(task_id)?
        .into_iter()
        .find(|r| r.template_id == template_id)
        .ok_or_else(|| anyhow!("unknown template {template_id} for task {task_id}"))?;
    let ctx = s.scoring_context(task)?;
    let mut runs = Vec::new();
    let mut out = String::new();
    for &seed in &s.cfg.config.seeds {
        let dev = dataset::build_dev_set(task, &examples, seed)?;
        let ev = ctx.evaluate(&record.template, &dev.examples)?;
        out.push_str(&format!(
            "seed {seed}: {} = {:.6} on {} dev examples\n",
            task.metric.name(),
            ev.score,
            dev.examples.len()
        ));
        runs.push(json!({
            "seed": seed,
            "dev_size": dev.examples.len(),
            "value": ev.score,
            "predictions": ev.predictions,
        }));
    }
    let mut report = s.header("eval");
    report.insert("task_id".into(), json!(task_id));
    report.insert("template_id".into(), json!(template_id));
    report.insert("template".into(), serde_json::to_value(&record.template)?);
    report.insert("metric".into(), json!(task.metric.name()));
    report.insert("runs".into(), Value::Array(runs));
    let path = s.write(&format!("eval-{task_id}-{template_id}.json"), &to_report_json(&report))?;
    out.push_str(&format!("report: {}\n", path.display()));
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnlabeledRecord {
    task_id: String,
    source_id: String,
    segments: Vec<String>,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

fn read_unlabeled(path: &Path) -> Result<BTreeMap<String, Vec<UnlabeledExample>>> {
    let bad = |message: String| DataFileError {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut out: BTreeMap<String, Vec<UnlabeledExample>> = BTreeMap::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: UnlabeledRecord = serde_json::from_str(l).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        out.entry(r.task_id).or_default().push(UnlabeledExample {
            source_id: r.source_id,
            segments: r.segments,
            embedding: r.embedding,
        });
    }
    Ok(out)
}

fn pseudo_line(p: &PseudoLabel) -> String {
    let mut v: Value = serde_json::from_str(&example_to_line(&p.to_example())).expect("valid line");
    let obj = v.as_object_mut().expect("object");
    obj.insert("confidence".into(), json!(p.confidence));
    obj.insert("epoch".into(), json!(p.epoch));
    obj.insert("model_version".into(), json!(p.model_version));
    let mut s = serde_json::to_string(&v).expect("serializes");
    s.push('\n');
    s
}

/// Pseudo-label confident unlabeled examples into the training pools.
pub fn self_train_cmd(s: &Session, only: Option<&str>) -> Result<String> {
    let c = &s.cfg.config;
    let path = c
        .self_train
        .unlabeled
        .as_ref()
        .ok_or_else(|| anyhow!("config: self_train.unlabeled is required"))?;
    let mut pools = read_unlabeled(&s.cfg.resolve(path))?;
    if let Some(t) = only {
        s.task(t)?;
        pools.retain(|k, _| k == t);
    }
    let tasks: Vec<TaskSpec> = pools.keys().map(|k| s.task(k).cloned()).collect::<Result<_>>()?;
    if tasks.is_empty() {
        bail!("no unlabeled examples for the selected tasks");
    }

    let mut contexts = BTreeMap::new();
    for t in &tasks {
        let records = s.templates_for(&t.task_id)?;
        let wanted = c.self_train.template_ids.get(&t.task_id);
        let rec = records
            .into_iter()
            .find(|r| wanted.is_none_or(|w| *w == r.template_id))
            .ok_or_else(|| anyhow!("no pseudo-labeling template for task {}", t.task_id))?;
        contexts.insert(t.task_id.clone(), (s.scoring_context(t)?, rec.template));
    }
    let labeler = BackendLabeler { contexts };
    let refresher = s.http(Role::Score)?;

    let mut runs = Vec::new();
    let mut out = String::new();
    for &seed in &c.seeds {
        let mut train = BTreeMap::new();
        let mut seed_pools = pools.clone();
        for t in &tasks {
            let examples = s.examples(t)?;
            let (_, pool) = split_dev_and_pool(t, &examples, &c.sampling, seed)?;
            if let Some(k) = c.self_train.retrieve_k {
                let embedder = s.http(Role::Embed)?;
                let req = EmbedRequest {
                    texts: pool.iter().map(|e| embedding_text(&e.segments)).collect(),
                };
                let queries = embedder.embed(&req)?.vectors;
                let kept = retrieve_similar(&seed_pools[&t.task_id], &queries, k, Some(embedder.as_ref()))?;
                seed_pools.insert(t.task_id.clone(), kept.into_iter().map(|(u, _)| u).collect());
            }
            train.insert(t.task_id.clone(), pool);
        }
        let result: SelfTrainResult = self_train(
            refresher.as_ref(),
            &labeler,
            &tasks,
            train,
            seed_pools,
            &c.self_train.core(),
        )
        .map_err(|f| anyhow::Error::new(f.source).context(format!("self-training failed in epoch {}", f.epoch)))?;
        for (task_id, set) in &result.train {
            let mut body = lines(&set.original);
            body.extend(set.pseudo.iter().map(pseudo_line));
            s.write(&format!("augmented-{task_id}-seed{seed}.jsonl"), &body)?;
            out.push_str(&format!(
                "seed {seed}: {task_id}: {} original + {} pseudo-labeled\n",
                set.original.len(),
                set.pseudo.len()
            ));
        }
        runs.push(json!({
            "seed": seed,
            "epochs": result.epochs,
            "policy": result.policy,
            "remaining": result.remaining.iter().map(|(k, v)| (k.clone(), v.len())).collect::<BTreeMap<_, _>>(),
        }));
    }
    let mut report = s.header("self-train");
    report.insert("runs".into(), Value::Array(runs));
    let path = s.write("self-train.json", &to_report_json(&report))?;
    out.push_str(&format!("report: {}\n", path.display()));
    Ok(out)
}

/// Collects every GPS report in the run directory into one table.
pub fn report(s: &Session) -> Result<String> {
    let dir = s.run_dir();
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| DataFileError {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("run-gps-") && name.ends_with(".json")
        })
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        let bad = |message: String| DataFileError {
            path: f.display().to_string(),
            message,
        };
        let v: Value = serde_json::from_str(&std::fs::read_to_string(f).map_err(|e| bad(e.to_string()))?)
            .map_err(|e| bad(e.to_string()))?;
        let task_id = v["task_id"].as_str().ok_or_else(|| bad("missing task_id".into()))?;
        let metric = v["metric"].as_str().unwrap_or("");
        let runs = v["runs"].as_array().ok_or_else(|| bad("missing runs".into()))?;
        let pick = |key: &str| runs.iter().filter_map(|r| r[key].as_f64()).collect::<Vec<_>>();
        rows.extend(gps_rows(task_id, metric, &pick("initial_best"), &pick("final_best")));
    }
    if rows.is_empty() {
        return Err(DataFileError {
            path: dir.display().to_string(),
            message: "no run-gps reports found".into(),
        }
        .into());
    }
    let table = render_table(&rows);
    s.write("report.txt", &table)?;
    Ok(table)
}
