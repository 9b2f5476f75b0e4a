use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::Value;

use crate::data::FieldPath;

/// What an automated task sees when it runs.
pub struct HandlerContext<'a> {
    pub instance_id: &'a str,
    pub node_id: &'a str,
    /// Plugin the instance implements, when it is a variation point child.
    pub plugin_id: Option<&'a str>,
    pub document: &'a Value,
    pub outputs: &'a [FieldPath],
}

/// Failures are retried by the engine and become an incident once the retry
/// budget is spent.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct HandlerError(pub String);

pub trait TaskHandler: Send + Sync {
    /// Values for (a subset of) the task's declared outputs.
    fn execute(&self, ctx: &HandlerContext<'_>) -> Result<BTreeMap<FieldPath, Value>, HandlerError>;
}

impl<F> TaskHandler for F
where
    F: Fn(&HandlerContext<'_>) -> Result<BTreeMap<FieldPath, Value>, HandlerError> + Send + Sync,
{
    fn execute(&self, ctx: &HandlerContext<'_>) -> Result<BTreeMap<FieldPath, Value>, HandlerError> {
        self(ctx)
    }
}

/// Named handlers referenced by automated tasks.
#[derive(Clone, Default)]
pub struct Handlers {
    map: BTreeMap<String, Arc<dyn TaskHandler>>,
}

impl Handlers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, handler: impl TaskHandler + 'static) -> &mut Self {
        self.map.insert(name.into(), Arc::new(handler));
        self
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TaskHandler>> {
        self.map.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Records requested sleeps without waiting.
#[derive(Debug, Default)]
pub struct VirtualSleeper {
    slept: Mutex<Vec<Duration>>,
}

impl VirtualSleeper {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().clone()
    }
}

impl Sleeper for VirtualSleeper {
    fn sleep(&self, d: Duration) {
        self.slept.lock().push(d);
    }
}
