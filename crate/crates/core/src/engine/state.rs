//! Engine state and the events that change it.
//!
//! Every mutation is an [`Event`] applied through [`State::apply`]; the live
//! engine and journal replay share that function, so a replayed journal
//! rebuilds exactly the live state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, FieldPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Running,
    WaitingUser,
    /// Parked at a variation point until every child has finished.
    WaitingChildren,
    Incident,
    Completed,
    /// Child instance cancelled by an administrator.
    Cancelled,
}

impl InstanceState {
    pub fn is_terminal(self) -> bool {
        matches!(self, InstanceState::Completed | InstanceState::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentLink {
    pub instance_id: String,
    pub node_id: String,
    pub plugin_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildRef {
    pub plugin_id: String,
    pub instance_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessInstance {
    pub instance_id: String,
    pub definition_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ParentLink>,
    pub state: InstanceState,
    pub tokens: Vec<String>,
    pub variables: Value,
    pub version: u64,
    pub children: BTreeMap<String, Vec<ChildRef>>,
    pub journal_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: String,
    pub instance_id: String,
    /// Top-level instance the task ultimately belongs to.
    pub root_instance_id: String,
    pub node_id: String,
    pub form_ref: String,
    pub outputs: Vec<FieldPath>,
    pub created_at: String,
    pub state: TaskState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Pending,
    Resumed,
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentAction {
    Resume,
    CancelChild,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub incident_id: String,
    pub instance_id: String,
    pub node_id: String,
    pub attempt_count: u32,
    pub last_error: String,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum Event {
    InstanceCreated {
        definition_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parent: Option<ParentLink>,
        token: String,
        variables: Value,
    },
    TokenMoved {
        from: String,
        to: String,
    },
    VariableWritten {
        path: FieldPath,
        value: Value,
    },
    TaskOpened {
        task_id: String,
        root_instance_id: String,
        node_id: String,
        form_ref: String,
        outputs: Vec<FieldPath>,
        created_at: String,
    },
    TaskCompleted {
        task_id: String,
    },
    AttemptFailed {
        node_id: String,
        attempt: u32,
        error: String,
    },
    IncidentRaised {
        incident_id: String,
        node_id: String,
        attempt_count: u32,
        last_error: String,
    },
    IncidentResolved {
        incident_id: String,
        action: IncidentAction,
    },
    ChildrenSpawned {
        node_id: String,
        children: Vec<ChildRef>,
    },
    Joined {
        node_id: String,
        survivors: Vec<String>,
    },
    InstanceCompleted,
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::InstanceCreated { .. } => "instance_created",
            Event::TokenMoved { .. } => "token_moved",
            Event::VariableWritten { .. } => "variable_written",
            Event::TaskOpened { .. } => "task_opened",
            Event::TaskCompleted { .. } => "task_completed",
            Event::AttemptFailed { .. } => "attempt_failed",
            Event::IncidentRaised { .. } => "incident_raised",
            Event::IncidentResolved { .. } => "incident_resolved",
            Event::ChildrenSpawned { .. } => "children_spawned",
            Event::Joined { .. } => "joined",
            Event::InstanceCompleted => "instance_completed",
        }
    }
}

/// One line of the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub instance_id: String,
    #[serde(flatten)]
    pub event: Event,
    /// Instance version after the event.
    pub version: u64,
}

/// Serializable view of everything the engine knows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub instances: BTreeMap<String, ProcessInstance>,
    pub tasks: BTreeMap<String, TaskEntry>,
    pub incidents: BTreeMap<String, Incident>,
}

#[derive(Debug, Default)]
pub(crate) struct State {
    pub snap: EngineSnapshot,
    pub seq: u64,
    next: [u64; 3],
}

const INSTANCE: usize = 0;
const TASK: usize = 1;
const INCIDENT: usize = 2;

fn counter_of(id: &str) -> u64 {
    id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(0)
}

impl State {
    fn fresh(&mut self, slot: usize, prefix: &str) -> String {
        self.next[slot] += 1;
        format!("{prefix}-{:06}", self.next[slot])
    }

    pub fn fresh_instance_id(&mut self) -> String {
        self.fresh(INSTANCE, "i")
    }

    pub fn fresh_task_id(&mut self) -> String {
        self.fresh(TASK, "t")
    }

    pub fn fresh_incident_id(&mut self) -> String {
        self.fresh(INCIDENT, "x")
    }

    pub fn instance(&self, id: &str) -> Option<&ProcessInstance> {
        self.snap.instances.get(id)
    }

    /// Apply one event and return the journal record describing it.
    pub fn apply(&mut self, instance_id: &str, event: Event) -> Result<JournalRecord, String> {
        self.seq += 1;
        let seq = self.seq;
        let missing = || format!("event for unknown instance `{instance_id}`");
        match &event {
            Event::InstanceCreated {
                definition_id,
                parent,
                token,
                variables,
            } => {
                if self.snap.instances.contains_key(instance_id) {
                    return Err(format!("instance `{instance_id}` created twice"));
                }
                self.next[INSTANCE] = self.next[INSTANCE].max(counter_of(instance_id));
                self.snap.instances.insert(
                    instance_id.to_string(),
                    ProcessInstance {
                        instance_id: instance_id.to_string(),
                        definition_id: definition_id.clone(),
                        parent: parent.clone(),
                        state: InstanceState::Running,
                        tokens: vec![token.clone()],
                        variables: variables.clone(),
                        version: 0,
                        children: BTreeMap::new(),
                        journal_seq: seq,
                    },
                );
            }
            Event::TaskOpened {
                task_id,
                root_instance_id,
                node_id,
                form_ref,
                outputs,
                created_at,
            } => {
                self.next[TASK] = self.next[TASK].max(counter_of(task_id));
                self.snap.tasks.insert(
                    task_id.clone(),
                    TaskEntry {
                        task_id: task_id.clone(),
                        instance_id: instance_id.to_string(),
                        root_instance_id: root_instance_id.clone(),
                        node_id: node_id.clone(),
                        form_ref: form_ref.clone(),
                        outputs: outputs.clone(),
                        created_at: created_at.clone(),
                        state: TaskState::Open,
                    },
                );
                self.set_state(instance_id, InstanceState::WaitingUser).ok_or_else(missing)?;
            }
            Event::TaskCompleted { task_id } => {
                let task = self
                    .snap
                    .tasks
                    .get_mut(task_id)
                    .ok_or_else(|| format!("unknown task `{task_id}`"))?;
                task.state = TaskState::Completed;
                self.set_state(instance_id, InstanceState::Running).ok_or_else(missing)?;
            }
            Event::IncidentRaised {
                incident_id,
                node_id,
                attempt_count,
                last_error,
            } => {
                self.next[INCIDENT] = self.next[INCIDENT].max(counter_of(incident_id));
                self.snap.incidents.insert(
                    incident_id.clone(),
                    Incident {
                        incident_id: incident_id.clone(),
                        instance_id: instance_id.to_string(),
                        node_id: node_id.clone(),
                        attempt_count: *attempt_count,
                        last_error: last_error.clone(),
                        resolution: Resolution::Pending,
                    },
                );
                self.set_state(instance_id, InstanceState::Incident).ok_or_else(missing)?;
            }
            Event::IncidentResolved { incident_id, action } => {
                let inc = self
                    .snap
                    .incidents
                    .get_mut(incident_id)
                    .ok_or_else(|| format!("unknown incident `{incident_id}`"))?;
                let (resolution, state) = match action {
                    IncidentAction::Resume => (Resolution::Resumed, InstanceState::Running),
                    IncidentAction::CancelChild => (Resolution::Cancelled, InstanceState::Cancelled),
                };
                inc.resolution = resolution;
                self.set_state(instance_id, state).ok_or_else(missing)?;
            }
            _ => {
                let inst = self.snap.instances.get_mut(instance_id).ok_or_else(missing)?;
                match &event {
                    Event::TokenMoved { to, .. } => inst.tokens = vec![to.clone()],
                    Event::VariableWritten { path, value } => {
                        data::set(&mut inst.variables, path, value.clone());
                        inst.version += 1;
                    }
                    Event::AttemptFailed { .. } => {}
                    Event::ChildrenSpawned { node_id, children } => {
                        inst.children.insert(node_id.clone(), children.clone());
                        inst.state = InstanceState::WaitingChildren;
                    }
                    Event::Joined { .. } => inst.state = InstanceState::Running,
                    Event::InstanceCompleted => {
                        inst.state = InstanceState::Completed;
                        inst.tokens.clear();
                    }
                    _ => unreachable!("handled above"),
                }
            }
        }
        let inst = self.snap.instances.get_mut(instance_id).ok_or_else(missing)?;
        inst.journal_seq = seq;
        Ok(JournalRecord {
            seq,
            instance_id: instance_id.to_string(),
            version: inst.version,
            event,
        })
    }

    fn set_state(&mut self, instance_id: &str, state: InstanceState) -> Option<()> {
        self.snap.instances.get_mut(instance_id)?.state = state;
        Some(())
    }
}
