//! Process engine: runs composed process definitions, fans variation points
//! out to their plugin implementations and joins them through aggregation.
//!
//! All state changes are journaled [`state::Event`]s. Variable writes are
//! optimistic: a write names the version it was computed against and is
//! rejected when the instance moved on in between.

pub mod aggregate;
mod handler;
mod journal;
pub mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::binding::{resolve_invocation, BindingError, PluginRegistry};
use crate::composer::ProductBundle;
use crate::data::{self, FieldPath, Schema};
use crate::process::{guard, Mapper, Node, ProcessDefinition};

pub use aggregate::{aggregate, verdict, AggregateError, AggregationPolicyId, Verdict};
pub use handler::{HandlerContext, HandlerError, Handlers, Sleeper, TaskHandler, ThreadSleeper, VirtualSleeper};
pub use journal::{replay_journal, JournalError, JOURNAL_FILE};
pub use state::{
    ChildRef, EngineSnapshot, Event, Incident, IncidentAction, InstanceState, JournalRecord, ParentLink,
    ProcessInstance, Resolution, TaskEntry, TaskState,
};

use journal::JournalWriter;
use state::State;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown process definition `{0}`")]
    UnknownDefinition(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is already completed")]
    TaskClosed(String),
    #[error("task `{task}` does not declare output `{path}`")]
    UndeclaredOutput { task: String, path: String },
    #[error("unknown incident `{0}`")]
    UnknownIncident(String),
    #[error("incident `{0}` is already resolved")]
    IncidentResolved(String),
    #[error("incident `{0}` is not on a child instance")]
    NotAChild(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("process `{definition}` has no variation point `{variation_point}` with a selection variable")]
    SelectionNotAccepted {
        definition: String,
        variation_point: String,
    },
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error("version conflict: expected {expected}, instance is at {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("write to `{path}` on `{instance}` still conflicting after {budget} attempts")]
    RetryBudgetExhausted {
        instance: String,
        path: String,
        budget: u32,
    },
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("inconsistent engine state: {0}")]
    Internal(String),
}

/// How the children of one variation point are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildExecution {
    /// One thread per child.
    Threads,
    /// In the calling thread, in an order shuffled with `seed`.
    Sequential { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub retry_attempts: u32,
    pub retry_backoff: Duration,
    pub write_retry_budget: u32,
    pub children: ChildExecution,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            retry_attempts: 3,
            retry_backoff: Duration::from_millis(100),
            write_retry_budget: 10,
            children: ChildExecution::Threads,
        }
    }
}

impl EngineConfig {
    /// Read `retry.attempts`, `retry.backoff_ms` and `optimistic.retry_budget`
    /// from a product's merged configuration, defaulting what is absent.
    pub fn from_product(config: &BTreeMap<String, Value>) -> Result<Self, EngineError> {
        let mut out = Self::default();
        let num = |key: &str| -> Result<Option<u64>, EngineError> {
            match config.get(key) {
                None => Ok(None),
                Some(v) => v
                    .as_u64()
                    .map(Some)
                    .ok_or_else(|| EngineError::Config(format!("`{key}` must be a non-negative integer"))),
            }
        };
        if let Some(n) = num("retry.attempts")? {
            if n == 0 {
                return Err(EngineError::Config("`retry.attempts` must be at least 1".into()));
            }
            out.retry_attempts = n as u32;
        }
        if let Some(ms) = num("retry.backoff_ms")? {
            out.retry_backoff = Duration::from_millis(ms);
        }
        if let Some(n) = num("optimistic.retry_budget")? {
            out.write_retry_budget = n.max(1) as u32;
        }
        Ok(out)
    }
}

struct Inner {
    st: State,
    journal: Option<JournalWriter>,
}

pub struct Engine {
    product: ProductBundle,
    schema: Schema,
    registry: PluginRegistry,
    handlers: Handlers,
    config: EngineConfig,
    sleeper: Arc<dyn Sleeper>,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish_non_exhaustive()
    }
}

struct AutomatedJob {
    node_id: String,
    handler: String,
    outputs: Vec<FieldPath>,
    document: Value,
    plugin_id: Option<String>,
}

enum Step {
    Continue,
    Stop(InstanceState),
    Automated(AutomatedJob),
    Spawned(Vec<String>),
    End(Option<ParentLink>),
}

fn next_target(def: &ProcessDefinition, node: &str) -> Option<String> {
    def.outgoing(node).next().map(|e| e.to.clone())
}

fn as_selection(v: &Value) -> Option<BTreeSet<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(str::to_string))
        .collect()
}

impl Engine {
    pub fn new(
        product: ProductBundle,
        registry: PluginRegistry,
        handlers: Handlers,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        let schema = product.schema().map_err(|e| EngineError::Schema(e.to_string()))?;
        for def in &product.process_models {
            if !schema.has_record(&def.data_root) {
                return Err(EngineError::Schema(format!(
                    "process `{}` has unknown data root `{}`",
                    def.id, def.data_root
                )));
            }
        }
        for p in registry.registered.values().flatten() {
            match product.process(&p.implementation_process_id) {
                Some(d) if d.implementation_activity().is_some() => {}
                _ => {
                    return Err(BindingError::MissingImplementation {
                        plugin: p.plugin_id.clone(),
                        process: p.implementation_process_id.clone(),
                    }
                    .into())
                }
            }
        }
        Ok(Self {
            product,
            schema,
            registry,
            handlers,
            config,
            sleeper: Arc::new(ThreadSleeper),
            inner: Mutex::new(Inner {
                st: State::default(),
                journal: None,
            }),
        })
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Persist to `dir/journal.jsonl`, first replaying whatever it holds.
    pub fn with_journal(self, dir: &Path) -> Result<Self, EngineError> {
        let st = journal::replay_state(dir)?;
        let writer = JournalWriter::open(dir)?;
        {
            let mut inner = self.inner.lock();
            inner.st = st;
            inner.journal = Some(writer);
        }
        Ok(self)
    }

    pub fn product(&self) -> &ProductBundle {
        &self.product
    }

    pub fn registry(&self) -> &PluginRegistry {
        &self.registry
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        self.inner.lock().st.snap.clone()
    }

    pub fn instance(&self, id: &str) -> Option<ProcessInstance> {
        self.inner.lock().st.instance(id).cloned()
    }

    pub fn tasks(&self) -> Vec<TaskEntry> {
        self.inner.lock().st.snap.tasks.values().cloned().collect()
    }

    pub fn incidents(&self) -> Vec<Incident> {
        self.inner.lock().st.snap.incidents.values().cloned().collect()
    }

    pub fn version_of(&self, id: &str) -> Result<u64, EngineError> {
        self.inner
            .lock()
            .st
            .instance(id)
            .map(|i| i.version)
            .ok_or_else(|| EngineError::UnknownInstance(id.to_string()))
    }

    fn def(&self, id: &str) -> Result<&ProcessDefinition, EngineError> {
        self.product
            .process(id)
            .ok_or_else(|| EngineError::UnknownDefinition(id.to_string()))
    }

    fn emit(&self, inner: &mut Inner, instance: &str, event: Event) -> Result<(), EngineError> {
        let record = inner.st.apply(instance, event).map_err(EngineError::Internal)?;
        if let Some(j) = inner.journal.as_mut() {
            j.append(&record)?;
        }
        Ok(())
    }

    fn schema_err(e: crate::data::DataError) -> EngineError {
        EngineError::Schema(e.to_string())
    }

    /// Create an instance positioned at its start event. Selection variables
    /// are filled from `selection`, then from `initial_data`, then with every
    /// available plugin.
    pub fn start_instance(
        &self,
        definition_id: &str,
        initial_data: Value,
        selection: &BTreeMap<String, BTreeSet<String>>,
    ) -> Result<String, EngineError> {
        let def = self.def(definition_id)?;
        let mut doc = initial_data;
        self.schema
            .validate_document(&def.data_root, &doc)
            .map_err(Self::schema_err)?;
        for vp in selection.keys() {
            let accepts = def.variation_points().any(|n| {
                matches!(n, Node::VariationPoint { registry_ref, selection_variable_ref: Some(_), .. } if registry_ref == vp)
            });
            if !accepts {
                return Err(EngineError::SelectionNotAccepted {
                    definition: def.id.clone(),
                    variation_point: vp.clone(),
                });
            }
        }
        for n in def.variation_points() {
            let Node::VariationPoint {
                registry_ref,
                selection_variable_ref: Some(var),
                ..
            } = n
            else {
                continue;
            };
            let given = match selection.get(registry_ref) {
                Some(s) => Some(s.clone()),
                None => match data::get(&doc, var) {
                    Some(v) => Some(as_selection(v).ok_or_else(|| {
                        EngineError::Schema(format!("`{var}` must be a list of plugin ids"))
                    })?),
                    None => None,
                },
            };
            let resolved = resolve_invocation(&self.registry, registry_ref, given.as_ref())?;
            let ids: Vec<Value> = resolved.into_iter().map(|p| Value::String(p.plugin_id)).collect();
            let value = Value::Array(ids);
            self.schema
                .validate_write(&def.data_root, var, &value)
                .map_err(Self::schema_err)?;
            data::set(&mut doc, var, value);
        }
        let mut inner = self.inner.lock();
        let id = inner.st.fresh_instance_id();
        self.emit(
            &mut inner,
            &id,
            Event::InstanceCreated {
                definition_id: def.id.clone(),
                parent: None,
                token: def.start().id().to_string(),
                variables: doc,
            },
        )?;
        Ok(id)
    }

    /// Advance `id` until it completes, waits for a user or for children, or
    /// raises an incident.
    pub fn run_to_quiescence(&self, id: &str) -> Result<InstanceState, EngineError> {
        loop {
            match self.step(id)? {
                Step::Continue => {}
                Step::Stop(s) => return Ok(s),
                Step::Automated(job) => self.run_automated(id, job)?,
                Step::Spawned(children) => {
                    self.run_children(id, &children)?;
                    return self.state_of(id);
                }
                Step::End(parent) => {
                    if let Some(link) = &parent {
                        self.commit_child_result(id, link)?;
                    }
                    {
                        let mut inner = self.inner.lock();
                        self.emit(&mut inner, id, Event::InstanceCompleted)?;
                    }
                    if let Some(link) = parent {
                        self.try_join(&link.instance_id, &link.node_id)?;
                    }
                    return Ok(InstanceState::Completed);
                }
            }
        }
    }

    fn state_of(&self, id: &str) -> Result<InstanceState, EngineError> {
        self.inner
            .lock()
            .st
            .instance(id)
            .map(|i| i.state)
            .ok_or_else(|| EngineError::UnknownInstance(id.to_string()))
    }

    fn raise(&self, inner: &mut Inner, id: &str, node: &str, attempts: u32, error: String) -> Result<Step, EngineError> {
        let incident_id = inner.st.fresh_incident_id();
        self.emit(
            inner,
            id,
            Event::IncidentRaised {
                incident_id,
                node_id: node.to_string(),
                attempt_count: attempts,
                last_error: error,
            },
        )?;
        Ok(Step::Stop(InstanceState::Incident))
    }

    fn advance(&self, inner: &mut Inner, id: &str, def: &ProcessDefinition, node: &str) -> Result<Step, EngineError> {
        match next_target(def, node) {
            Some(to) => {
                self.emit(
                    inner,
                    id,
                    Event::TokenMoved {
                        from: node.to_string(),
                        to,
                    },
                )?;
                Ok(Step::Continue)
            }
            None => self.raise(inner, id, node, 0, format!("no outgoing flow from `{node}`")),
        }
    }

    fn root_of(st: &State, id: &str) -> String {
        let mut cur = id.to_string();
        while let Some(p) = st.instance(&cur).and_then(|i| i.parent.as_ref()) {
            cur = p.instance_id.clone();
        }
        cur
    }

    fn step(&self, id: &str) -> Result<Step, EngineError> {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let inst = inner
            .st
            .instance(id)
            .ok_or_else(|| EngineError::UnknownInstance(id.to_string()))?
            .clone();
        if inst.state != InstanceState::Running {
            return Ok(Step::Stop(inst.state));
        }
        let def = self.def(&inst.definition_id)?;
        let token = inst
            .tokens
            .first()
            .ok_or_else(|| EngineError::Internal(format!("running instance `{id}` has no token")))?;
        let node = def
            .node(token)
            .ok_or_else(|| EngineError::Internal(format!("token on unknown node `{token}`")))?;
        match node {
            Node::StartEvent { id: n } => self.advance(inner, id, def, n),
            Node::EndEvent { .. } => Ok(Step::End(inst.parent.clone())),
            Node::ExclusiveGateway { id: n } => {
                let doc = &inst.variables;
                let lookup = |p: &FieldPath| data::get(doc, p).cloned();
                let mut matched = Vec::new();
                let mut default = None;
                for e in def.outgoing(n) {
                    match &e.guard {
                        None => default = Some(e.to.clone()),
                        Some(g) => {
                            let expr = guard::parse(g).map_err(|e| EngineError::Internal(e.to_string()))?;
                            if expr.eval(&lookup) {
                                matched.push(e.to.clone());
                            }
                        }
                    }
                }
                let target = match (matched.len(), default) {
                    (1, _) => matched.pop(),
                    (0, d) => d,
                    _ => None,
                };
                match target {
                    Some(to) => {
                        self.emit(inner, id, Event::TokenMoved { from: n.clone(), to })?;
                        Ok(Step::Continue)
                    }
                    None => self.raise(
                        inner,
                        id,
                        n,
                        0,
                        format!("{} guards of `{n}` hold and there is no single default", matched.len()),
                    ),
                }
            }
            Node::UserTask { id: n, form, outputs } => {
                let task_id = inner.st.fresh_task_id();
                let root_instance_id = Self::root_of(&inner.st, id);
                self.emit(
                    inner,
                    id,
                    Event::TaskOpened {
                        task_id,
                        root_instance_id,
                        node_id: n.clone(),
                        form_ref: form.clone(),
                        outputs: outputs.clone(),
                        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                    },
                )?;
                Ok(Step::Stop(InstanceState::WaitingUser))
            }
            Node::AutomatedTask { id: n, handler, outputs } => Ok(Step::Automated(AutomatedJob {
                node_id: n.clone(),
                handler: handler.clone(),
                outputs: outputs.clone(),
                document: inst.variables.clone(),
                plugin_id: inst.parent.as_ref().map(|p| p.plugin_id.clone()),
            })),
            Node::VariationPoint {
                id: n,
                registry_ref,
                selection_variable_ref,
                ..
            } => {
                let selection = selection_variable_ref
                    .as_ref()
                    .and_then(|p| data::get(&inst.variables, p))
                    .and_then(as_selection);
                let plugins = match resolve_invocation(&self.registry, registry_ref, selection.as_ref()) {
                    Ok(p) => p,
                    Err(e) => return self.raise(inner, id, n, 0, e.to_string()),
                };
                if plugins.is_empty() {
                    // untyped activity
                    return self.advance(inner, id, def, n);
                }
                let children: Vec<ChildRef> = plugins
                    .iter()
                    .map(|p| ChildRef {
                        plugin_id: p.plugin_id.clone(),
                        instance_id: inner.st.fresh_instance_id(),
                    })
                    .collect();
                self.emit(
                    inner,
                    id,
                    Event::ChildrenSpawned {
                        node_id: n.clone(),
                        children: children.clone(),
                    },
                )?;
                for (child, plugin) in children.iter().zip(&plugins) {
                    let child_def = self.def(&plugin.implementation_process_id)?;
                    self.emit(
                        inner,
                        &child.instance_id,
                        Event::InstanceCreated {
                            definition_id: child_def.id.clone(),
                            parent: Some(ParentLink {
                                instance_id: id.to_string(),
                                node_id: n.clone(),
                                plugin_id: plugin.plugin_id.clone(),
                            }),
                            token: child_def.start().id().to_string(),
                            variables: inst.variables.clone(),
                        },
                    )?;
                }
                Ok(Step::Spawned(children.into_iter().map(|c| c.instance_id).collect()))
            }
        }
    }

    fn run_automated(&self, id: &str, job: AutomatedJob) -> Result<(), EngineError> {
        let def_root = {
            let inner = self.inner.lock();
            let inst = inner
                .st
                .instance(id)
                .ok_or_else(|| EngineError::UnknownInstance(id.to_string()))?;
            self.def(&inst.definition_id)?.data_root.clone()
        };
        let handler = self.handlers.get(&job.handler);
        let attempts = self.config.retry_attempts;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            let outcome = match &handler {
                None => Err(HandlerError(format!("no handler named `{}`", job.handler))),
                Some(h) => h.execute(&HandlerContext {
                    instance_id: id,
                    node_id: &job.node_id,
                    plugin_id: job.plugin_id.as_deref(),
                    document: &job.document,
                    outputs: &job.outputs,
                }),
            };
            let checked = outcome.and_then(|outs| {
                for (path, value) in &outs {
                    if !job.outputs.contains(path) {
                        return Err(HandlerError(format!("handler wrote undeclared output `{path}`")));
                    }
                    self.schema
                        .validate_write(&def_root, path, value)
                        .map_err(|e| HandlerError(e.to_string()))?;
                }
                Ok(outs)
            });
            match checked {
                Ok(outs) => {
                    let writes: Vec<(FieldPath, Value)> = outs.into_iter().collect();
                    return self.commit_and_advance(id, &job.node_id, &writes);
                }
                Err(e) => {
                    last_error = e.0;
                    let mut inner = self.inner.lock();
                    self.emit(
                        &mut inner,
                        id,
                        Event::AttemptFailed {
                            node_id: job.node_id.clone(),
                            attempt,
                            error: last_error.clone(),
                        },
                    )?;
                }
            }
            if attempt < attempts {
                self.sleeper.sleep(self.config.retry_backoff);
            }
        }
        let mut inner = self.inner.lock();
        self.raise(&mut inner, id, &job.node_id, attempts, last_error)?;
        Ok(())
    }

    /// Commit handler outputs and move past `node`, re-reading the version on
    /// conflict.
    fn commit_and_advance(&self, id: &str, node: &str, writes: &[(FieldPath, Value)]) -> Result<(), EngineError> {
        for _ in 0..self.config.write_retry_budget {
            let expected = self.version_of(id)?;
            let mut guard = self.inner.lock();
            let inner = &mut *guard;
            let inst = inner
                .st
                .instance(id)
                .ok_or_else(|| EngineError::UnknownInstance(id.to_string()))?;
            if inst.version != expected {
                continue;
            }
            let def = self.def(&inst.definition_id)?;
            for (path, value) in writes {
                self.emit(
                    inner,
                    id,
                    Event::VariableWritten {
                        path: path.clone(),
                        value: value.clone(),
                    },
                )?;
            }
            self.advance(inner, id, def, node)?;
            return Ok(());
        }
        Err(EngineError::RetryBudgetExhausted {
            instance: id.to_string(),
            path: writes.first().map(|(p, _)| p.to_string()).unwrap_or_default(),
            budget: self.config.write_retry_budget,
        })
    }

    fn run_children(&self, parent: &str, children: &[String]) -> Result<(), EngineError> {
        match self.config.children {
            ChildExecution::Threads => std::thread::scope(|s| {
                let handles: Vec<_> = children
                    .iter()
                    .map(|c| s.spawn(move || self.run_to_quiescence(c)))
                    .collect();
                let mut first_err = None;
                for h in handles {
                    match h.join() {
                        Ok(Ok(_)) => {}
                        Ok(Err(e)) => {
                            first_err.get_or_insert(e);
                        }
                        Err(panic) => std::panic::resume_unwind(panic),
                    }
                }
                first_err.map_or(Ok(()), Err)
            }),
            ChildExecution::Sequential { seed } => {
                let salt = parent.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
                let mut order = children.to_vec();
                order.shuffle(&mut rng);
                for c in &order {
                    self.run_to_quiescence(c)?;
                }
                Ok(())
            }
        }
    }

    fn vp_mapper(&self, parent: &ProcessInstance, node: &str) -> Result<(Option<Mapper>, String), EngineError> {
        match self.def(&parent.definition_id)?.node(node) {
            Some(Node::VariationPoint {
                mapper,
                registry_ref,
                aggregation_policy_ref,
                ..
            }) => Ok((
                mapper.clone(),
                aggregation_policy_ref.clone().unwrap_or_else(|| registry_ref.clone()),
            )),
            _ => Err(EngineError::Internal(format!("`{node}` is not a variation point"))),
        }
    }

    /// Record a finished child's result in the parent's results map.
    fn commit_child_result(&self, child: &str, link: &ParentLink) -> Result<(), EngineError> {
        let (parent, child_doc) = {
            let inner = self.inner.lock();
            let parent = inner
                .st
                .instance(&link.instance_id)
                .ok_or_else(|| EngineError::UnknownInstance(link.instance_id.clone()))?
                .clone();
            let doc = inner
                .st
                .instance(child)
                .ok_or_else(|| EngineError::UnknownInstance(child.to_string()))?
                .variables
                .clone();
            (parent, doc)
        };
        let (Some(Mapper {
            input,
            results: Some(results),
            ..
        }), _) = self.vp_mapper(&parent, &link.node_id)?
        else {
            return Ok(());
        };
        let Some(value) = data::get(&child_doc, &input).cloned() else {
            return Ok(());
        };
        self.write_with_retry(&link.instance_id, &results.child(link.plugin_id.clone()), value)?;
        Ok(())
    }

    /// Join the children of `node` once all of them are completed or
    /// cancelled, then continue the parent.
    fn try_join(&self, parent_id: &str, node: &str) -> Result<(), EngineError> {
        {
            let mut guard = self.inner.lock();
            let inner = &mut *guard;
            let parent = inner
                .st
                .instance(parent_id)
                .ok_or_else(|| EngineError::UnknownInstance(parent_id.to_string()))?
                .clone();
            if parent.state != InstanceState::WaitingChildren || parent.tokens.first().map(String::as_str) != Some(node)
            {
                return Ok(());
            }
            let refs = parent.children.get(node).cloned().unwrap_or_default();
            let mut survivors: Vec<(String, Value)> = Vec::new();
            for r in &refs {
                let child = inner
                    .st
                    .instance(&r.instance_id)
                    .ok_or_else(|| EngineError::UnknownInstance(r.instance_id.clone()))?;
                match child.state {
                    InstanceState::Completed => survivors.push((r.plugin_id.clone(), child.variables.clone())),
                    InstanceState::Cancelled => {}
                    _ => return Ok(()),
                }
            }
            survivors.sort_by(|a, b| a.0.cmp(&b.0));
            let (mapper, policy_key) = self.vp_mapper(&parent, node)?;
            let mut writes = Vec::new();
            if let Some(m) = mapper {
                let policy = self.product.aggregation_selection.get(&policy_key).copied();
                match self.aggregate_children(&m, policy, &survivors) {
                    Ok(Some(v)) => writes.push((m.output.clone(), v)),
                    Ok(None) => {}
                    Err(msg) => {
                        self.raise(inner, parent_id, node, 0, msg)?;
                        return Ok(());
                    }
                }
            }
            let def = self.def(&parent.definition_id)?;
            self.emit(
                inner,
                parent_id,
                Event::Joined {
                    node_id: node.to_string(),
                    survivors: survivors.iter().map(|(p, _)| p.clone()).collect(),
                },
            )?;
            for (path, value) in writes {
                self.emit(inner, parent_id, Event::VariableWritten { path, value })?;
            }
            self.advance(inner, parent_id, def, node)?;
        }
        self.run_to_quiescence(parent_id).map(|_| ())
    }

    fn aggregate_children(
        &self,
        m: &Mapper,
        policy: Option<AggregationPolicyId>,
        survivors: &[(String, Value)],
    ) -> Result<Option<Value>, String> {
        if survivors.is_empty() {
            return Err("all children were cancelled; no result to map".into());
        }
        let values: Vec<Option<&Value>> = survivors.iter().map(|(_, doc)| data::get(doc, &m.input)).collect();
        match policy {
            None | Some(AggregationPolicyId::Single) => {
                if values.len() != 1 {
                    return Err(format!("{} results but no aggregation code", values.len()));
                }
                Ok(values[0].cloned())
            }
            Some(p) => {
                let mut bools = Vec::new();
                for ((plugin, _), v) in survivors.iter().zip(values) {
                    match v.and_then(Value::as_bool) {
                        Some(b) => bools.push(b),
                        None => return Err(format!("child `{plugin}` produced no boolean `{}`", m.input)),
                    }
                }
                aggregate(p, &bools).map(|b| Some(Value::Bool(b))).map_err(|e| e.to_string())
            }
        }
    }

    /// Single optimistic write. Fails with [`EngineError::VersionConflict`]
    /// when `expected_version` is stale.
    pub fn commit_variable_write(
        &self,
        instance_id: &str,
        expected_version: u64,
        path: &FieldPath,
        value: Value,
    ) -> Result<u64, EngineError> {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let inst = inner
            .st
            .instance(instance_id)
            .ok_or_else(|| EngineError::UnknownInstance(instance_id.to_string()))?;
        let root = &self.def(&inst.definition_id)?.data_root;
        self.schema
            .validate_write(root, path, &value)
            .map_err(Self::schema_err)?;
        if inst.version != expected_version {
            return Err(EngineError::VersionConflict {
                expected: expected_version,
                actual: inst.version,
            });
        }
        self.emit(
            inner,
            instance_id,
            Event::VariableWritten {
                path: path.clone(),
                value,
            },
        )?;
        Ok(expected_version + 1)
    }

    /// Re-read and retry on conflict, up to the configured budget.
    pub fn write_with_retry(&self, instance_id: &str, path: &FieldPath, value: Value) -> Result<u64, EngineError> {
        for _ in 0..self.config.write_retry_budget {
            let v = self.version_of(instance_id)?;
            std::thread::yield_now();
            match self.commit_variable_write(instance_id, v, path, value.clone()) {
                Err(EngineError::VersionConflict { .. }) => continue,
                other => return other,
            }
        }
        Err(EngineError::RetryBudgetExhausted {
            instance: instance_id.to_string(),
            path: path.to_string(),
            budget: self.config.write_retry_budget,
        })
    }

    pub fn complete_user_task(&self, task_id: &str, outputs: &BTreeMap<FieldPath, Value>) -> Result<(), EngineError> {
        let instance_id = {
            let mut guard = self.inner.lock();
            let inner = &mut *guard;
            let task = inner
                .st
                .snap
                .tasks
                .get(task_id)
                .ok_or_else(|| EngineError::UnknownTask(task_id.to_string()))?
                .clone();
            if task.state == TaskState::Completed {
                return Err(EngineError::TaskClosed(task_id.to_string()));
            }
            let inst = inner
                .st
                .instance(&task.instance_id)
                .ok_or_else(|| EngineError::UnknownInstance(task.instance_id.clone()))?;
            let def = self.def(&inst.definition_id)?;
            for (path, value) in outputs {
                if !task.outputs.contains(path) {
                    return Err(EngineError::UndeclaredOutput {
                        task: task_id.to_string(),
                        path: path.to_string(),
                    });
                }
                self.schema
                    .validate_write(&def.data_root, path, value)
                    .map_err(Self::schema_err)?;
            }
            for (path, value) in outputs {
                self.emit(
                    inner,
                    &task.instance_id,
                    Event::VariableWritten {
                        path: path.clone(),
                        value: value.clone(),
                    },
                )?;
            }
            self.emit(
                inner,
                &task.instance_id,
                Event::TaskCompleted {
                    task_id: task_id.to_string(),
                },
            )?;
            self.advance(inner, &task.instance_id, def, &task.node_id)?;
            task.instance_id
        };
        self.run_to_quiescence(&instance_id).map(|_| ())
    }

    pub fn resolve_incident(&self, incident_id: &str, action: IncidentAction) -> Result<(), EngineError> {
        let (instance_id, parent) = {
            let mut guard = self.inner.lock();
            let inner = &mut *guard;
            let inc = inner
                .st
                .snap
                .incidents
                .get(incident_id)
                .ok_or_else(|| EngineError::UnknownIncident(incident_id.to_string()))?
                .clone();
            if inc.resolution != Resolution::Pending {
                return Err(EngineError::IncidentResolved(incident_id.to_string()));
            }
            let parent = inner.st.instance(&inc.instance_id).and_then(|i| i.parent.clone());
            if action == IncidentAction::CancelChild && parent.is_none() {
                return Err(EngineError::NotAChild(incident_id.to_string()));
            }
            self.emit(
                inner,
                &inc.instance_id,
                Event::IncidentResolved {
                    incident_id: incident_id.to_string(),
                    action,
                },
            )?;
            (inc.instance_id, parent)
        };
        match action {
            IncidentAction::Resume => self.run_to_quiescence(&instance_id).map(|_| ()),
            IncidentAction::CancelChild => {
                let link = parent.expect("checked above");
                self.try_join(&link.instance_id, &link.node_id)
            }
        }
    }

    /// After recovery from a journal: continue running instances and perform
    /// joins whose children all finished.
    pub fn resume_pending(&self) -> Result<(), EngineError> {
        let snap = self.snapshot();
        for (id, inst) in &snap.instances {
            if inst.state == InstanceState::Running {
                self.run_to_quiescence(id)?;
            }
        }
        for (id, inst) in &self.snapshot().instances {
            if inst.state == InstanceState::WaitingChildren {
                if let Some(node) = inst.tokens.first() {
                    self.try_join(id, node)?;
                }
            }
        }
        Ok(())
    }
}
