//! The parking-permit example: stub external services, the handlers that
//! use them, and a script runner for end-to-end flows.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::binding::{apply_startup_exclusions, register_from_bundle, BindingError, PluginRegistry};
use crate::composer::{compose_product, ComposeError, ProductBundle};
use crate::data::{self, FieldPath, Schema, TypeRef};
use crate::engine::{
    ChildExecution, Engine, EngineConfig, EngineError, HandlerContext, HandlerError, Handlers, InstanceState,
    Sleeper, TaskState, VirtualSleeper,
};
use crate::feature_model::{Configuration, FeatureModel, ModelError};

pub const PROCESS_ID: &str = "ParkingPermit";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("script expects a `{form}` task that never opened")]
    TaskNeverOpened { form: String },
    #[error("invalid output path `{0}` in script")]
    BadPath(String),
}

/// In-memory commercial register.
#[derive(Debug, Default)]
pub struct CommercialRegisterStub {
    table: BTreeMap<String, String>,
    latency: Duration,
    unavailable: AtomicBool,
    fail_next: AtomicU32,
    calls: AtomicU32,
}

impl CommercialRegisterStub {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Self {
            table,
            ..Self::default()
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Every lookup fails while set.
    pub fn set_unavailable(&self, on: bool) {
        self.unavailable.store(on, Ordering::SeqCst);
    }

    /// The next `n` lookups fail.
    pub fn fail_next(&self, n: u32) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn lookup(&self, register_no: &str) -> Result<Option<&str>, HandlerError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let injected = self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if injected || self.unavailable.load(Ordering::SeqCst) {
            return Err(HandlerError("commercial register unavailable".into()));
        }
        Ok(self.table.get(register_no).map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub channel: String,
    pub recipient: String,
    pub message: String,
}

/// Mail and SMS gateway that only records what it was asked to send.
#[derive(Debug, Default)]
pub struct NotificationGatewayStub {
    outbox: Mutex<Vec<OutboxEntry>>,
    failing: AtomicBool,
}

impl NotificationGatewayStub {
    pub fn set_failing(&self, on: bool) {
        self.failing.store(on, Ordering::SeqCst);
    }

    pub fn send(&self, channel: &str, recipient: &str, message: &str) -> Result<(), HandlerError> {
        if self.failing.load(Ordering::SeqCst) {
            return Err(HandlerError(format!("{channel} gateway unavailable")));
        }
        self.outbox.lock().push(OutboxEntry {
            channel: channel.into(),
            recipient: recipient.into(),
            message: message.into(),
        });
        Ok(())
    }

    pub fn outbox(&self) -> Vec<OutboxEntry> {
        self.outbox.lock().clone()
    }
}

fn text_at<'a>(doc: &'a Value, path: &str) -> Option<&'a str> {
    data::get(doc, &FieldPath::parse(path).ok()?).and_then(Value::as_str)
}

/// True iff the register knows the number and the company name matches exactly.
pub fn automatic_check(doc: &Value, register: &CommercialRegisterStub) -> Result<bool, HandlerError> {
    let number = text_at(doc, "company.commercialRegisterNo")
        .ok_or_else(|| HandlerError("application has no commercial register number".into()))?;
    let name = text_at(doc, "company.name").unwrap_or_default();
    Ok(register.lookup(number)? == Some(name))
}

fn notification_text(doc: &Value) -> &'static str {
    match text_at(doc, "permit.number") {
        Some(_) => "Your parking permit has been issued.",
        None => "Your parking permit application was rejected.",
    }
}

/// `commercial_register_check`, `notify_mail` and `notify_sms`.
pub fn handlers(register: Arc<CommercialRegisterStub>, gateway: Arc<NotificationGatewayStub>) -> Handlers {
    let mut h = Handlers::new();
    h.register("commercial_register_check", move |ctx: &HandlerContext<'_>| {
        let ok = automatic_check(ctx.document, &register)?;
        Ok(BTreeMap::from([(FieldPath::parse("decision.justified").unwrap(), Value::Bool(ok))]))
    });
    for (name, channel, field) in [("notify_mail", "mail", "applicant.email"), ("notify_sms", "sms", "applicant.phone")] {
        let gateway = Arc::clone(&gateway);
        h.register(name, move |ctx: &HandlerContext<'_>| {
            let to = text_at(ctx.document, field).ok_or_else(|| HandlerError(format!("no `{field}` to notify")))?;
            gateway.send(channel, to, notification_text(ctx.document))?;
            Ok(BTreeMap::new())
        });
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptTask {
    pub form: String,
    #[serde(default)]
    pub outputs: BTreeMap<String, Value>,
}

/// An end-to-end run: product, applicant payload, stub setup and the user
/// task completions in the order they are expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub config: String,
    pub data: Value,
    #[serde(default)]
    pub exclusions: Vec<(String, String)>,
    #[serde(default)]
    pub register: BTreeMap<String, String>,
    #[serde(default)]
    pub selections: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    pub tasks: Vec<ScriptTask>,
    #[serde(default)]
    pub register_failures: u32,
}

/// The `fixtures/parking-permit` directory.
#[derive(Debug, Clone)]
pub struct Pack {
    root: PathBuf,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Pack {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn model(&self) -> Result<FeatureModel, ScenarioError> {
        Ok(FeatureModel::parse(&read(&self.root.join("model.json"))?)?)
    }

    pub fn configuration(&self, name: &str) -> Result<Configuration, ScenarioError> {
        Ok(Configuration::parse(&read(&self.root.join(format!("configs/{name}.json")))?)?)
    }

    pub fn configuration_names(&self) -> Result<Vec<String>, ScenarioError> {
        let dir = self.root.join("configs");
        let entries = fs::read_dir(&dir).map_err(|source| ScenarioError::Io { path: dir, source })?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn script(&self, name: &str) -> Result<Script, ScenarioError> {
        let path = self.root.join(format!("scripts/{name}.json"));
        serde_json::from_str(&read(&path)?).map_err(|e| ScenarioError::Parse {
            path,
            message: e.to_string(),
        })
    }

    pub fn compose(&self, cfg: &Configuration) -> Result<ProductBundle, ScenarioError> {
        Ok(compose_product(&self.model()?, cfg, &self.features_dir())?)
    }
}

/// Outcome of a scripted run.
#[derive(Debug)]
pub struct GoldenRun {
    pub engine: Engine,
    pub instance_id: String,
    pub state: InstanceState,
    pub document: Value,
    pub outbox: Vec<OutboxEntry>,
    pub register: Arc<CommercialRegisterStub>,
    pub gateway: Arc<NotificationGatewayStub>,
    /// Backoff sleeps requested by the engine; none are actually taken.
    pub sleeper: Arc<VirtualSleeper>,
}

/// Build an engine over `bundle` with stub-backed handlers and startup
/// exclusions applied.
pub fn scenario_engine(
    bundle: ProductBundle,
    exclusions: &[(String, String)],
    register: Arc<CommercialRegisterStub>,
    gateway: Arc<NotificationGatewayStub>,
    sleeper: Arc<dyn Sleeper>,
    children: ChildExecution,
) -> Result<(Engine, Vec<String>), ScenarioError> {
    let registry: PluginRegistry = register_from_bundle(&bundle)?;
    let excluded = apply_startup_exclusions(registry, exclusions);
    let mut config = EngineConfig::from_product(&bundle.config)?;
    config.children = children;
    let engine = Engine::new(bundle, excluded.registry, handlers(register, gateway), config)?
        .with_sleeper(sleeper);
    Ok((engine, excluded.warnings))
}

/// Open tasks of the instance tree rooted at `root`, oldest first.
fn open_task(engine: &Engine, root: &str, form: &str) -> Option<String> {
    let mut tasks: Vec<_> = engine
        .tasks()
        .into_iter()
        .filter(|t| t.state == TaskState::Open && t.root_instance_id == root && t.form_ref == form)
        .collect();
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    tasks.into_iter().next().map(|t| t.task_id)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub children: ChildExecution,
    /// Journal the run into this directory.
    pub journal_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            children: ChildExecution::Sequential { seed: 0 },
            journal_dir: None,
        }
    }
}

pub fn run_golden_flow(pack: &Pack, script: &Script, opts: &RunOptions) -> Result<GoldenRun, ScenarioError> {
    let cfg = pack.configuration(&script.config)?;
    let bundle = pack.compose(&cfg)?;
    run_script_on(bundle, script, opts)
}

/// Run `script` against an already composed product; `script.config` is
/// ignored.
pub fn run_script_on(bundle: ProductBundle, script: &Script, opts: &RunOptions) -> Result<GoldenRun, ScenarioError> {
    let register = Arc::new(CommercialRegisterStub::new(script.register.clone()));
    register.fail_next(script.register_failures);
    let gateway = Arc::new(NotificationGatewayStub::default());
    let sleeper = Arc::new(VirtualSleeper::default());
    let (mut engine, _warnings) = scenario_engine(
        bundle,
        &script.exclusions,
        Arc::clone(&register),
        Arc::clone(&gateway),
        sleeper.clone(),
        opts.children,
    )?;
    if let Some(dir) = &opts.journal_dir {
        engine = engine.with_journal(dir)?;
    }
    let id = engine.start_instance(PROCESS_ID, script.data.clone(), &script.selections)?;
    engine.run_to_quiescence(&id)?;
    for task in &script.tasks {
        let task_id = open_task(&engine, &id, &task.form).ok_or_else(|| ScenarioError::TaskNeverOpened {
            form: task.form.clone(),
        })?;
        let mut outputs = BTreeMap::new();
        for (k, v) in &task.outputs {
            outputs.insert(FieldPath::parse(k).map_err(|_| ScenarioError::BadPath(k.clone()))?, v.clone());
        }
        engine.complete_user_task(&task_id, &outputs)?;
    }
    let inst = engine.instance(&id).expect("started instance exists");
    Ok(GoldenRun {
        state: inst.state,
        document: inst.variables,
        outbox: gateway.outbox(),
        gateway,
        sleeper,
        instance_id: id,
        engine,
        register,
    })
}

/// A complete application for whatever the product's schema contains.
pub fn sample_application(schema: &Schema) -> Value {
    let mut doc = json!({
        "applicant": {"name": "Erika Mustermann", "email": "erika@example.org", "phone": "+49 170 5550101"},
        "company": {"name": "Muster Bau GmbH", "address": "Hauptstrasse 1, Ulm"},
    });
    let has = |p: &str| schema.field_type("Application", &FieldPath::parse(p).unwrap()).is_ok();
    if has("company.commercialRegisterNo") {
        doc["company"]["commercialRegisterNo"] = json!("HRB 12345");
    }
    if has("carInformation") {
        doc["carInformation"] = json!({"numberPlate": "UL-AB 123"});
    }
    doc
}

/// Register matching [`sample_application`].
pub fn sample_register() -> BTreeMap<String, String> {
    BTreeMap::from([("HRB 12345".to_string(), "Muster Bau GmbH".to_string())])
}

/// Value a clerk would enter for an output of type `ty`.
pub fn default_output(path: &FieldPath, ty: &TypeRef) -> Value {
    match ty {
        TypeRef::Boolean => Value::Bool(true),
        TypeRef::Integer | TypeRef::Number => json!(1),
        _ => Value::String(format!("auto-{path}")),
    }
}

/// Complete every open user task with [`default_output`] values until the
/// instance stops waiting for users. Returns the number of tasks completed.
pub fn drive_with_defaults(engine: &Engine, root: &str) -> Result<usize, ScenarioError> {
    let schema = engine.product().schema()?;
    let mut done = 0;
    loop {
        let mut open: Vec<_> = engine
            .tasks()
            .into_iter()
            .filter(|t| t.state == TaskState::Open && t.root_instance_id == root)
            .collect();
        open.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let Some(task) = open.into_iter().next() else {
            return Ok(done);
        };
        let root_def = engine.instance(&task.instance_id).expect("task instance exists").definition_id;
        let data_root = engine.product().process(&root_def).expect("deployed").data_root.clone();
        let outputs = task
            .outputs
            .iter()
            .map(|p| {
                let ty = schema.field_type(&data_root, p).unwrap_or(TypeRef::String);
                (p.clone(), default_output(p, &ty))
            })
            .collect();
        engine.complete_user_task(&task.task_id, &outputs)?;
        done += 1;
    }
}
