//! BPMN 2.0 XML subset importer.
//!
//! Supported flow elements: `startEvent`, `endEvent`, `exclusiveGateway`,
//! `userTask`, `serviceTask`, `callActivity` with a
//! `multiInstanceLoopCharacteristics` marker, and `sequenceFlow` with
//! optional `conditionExpression`. Engine attributes use the
//! `urn:pailine:bpmn` namespace:
//!
//! | element        | attributes                                                     |
//! |----------------|----------------------------------------------------------------|
//! | `process`      | `dataRoot`                                                     |
//! | `userTask`     | `form`, `outputs` (comma separated)                            |
//! | `serviceTask`  | `handler`, `outputs`                                           |
//! | `callActivity` | `registry`, `aggregation`, `selection`, `mapperInput`, `mapperResults`, `mapperOutput` |

use roxmltree::{Document, Node as XmlNode};

use super::{Edge, Mapper, Node, ProcessDefinition, ProcessError};
use crate::data::FieldPath;

pub const ENGINE_NS: &str = "urn:pailine:bpmn";

const IGNORED_CHILDREN: &[&str] = &["incoming", "outgoing", "documentation", "extensionElements"];

fn attr<'a>(node: XmlNode<'a, '_>, name: &str) -> Option<&'a str> {
    node.attribute((ENGINE_NS, name))
}

fn required<'a>(node: XmlNode<'a, '_>, name: &str) -> Result<&'a str, ProcessError> {
    attr(node, name).ok_or_else(|| ProcessError::Structure {
        process: node.attribute("id").unwrap_or("?").to_string(),
        message: format!("`{}` lacks the `{name}` attribute", node.tag_name().name()),
    })
}

fn path(text: &str, owner: &str) -> Result<FieldPath, ProcessError> {
    FieldPath::parse(text.trim()).map_err(|e| ProcessError::Structure {
        process: owner.to_string(),
        message: e.to_string(),
    })
}

fn paths(text: Option<&str>, owner: &str) -> Result<Vec<FieldPath>, ProcessError> {
    text.unwrap_or("")
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| path(s, owner))
        .collect()
}

fn check_children(node: XmlNode, allowed: &[&str]) -> Result<(), ProcessError> {
    for child in node.children().filter(XmlNode::is_element) {
        let name = child.tag_name().name();
        if !IGNORED_CHILDREN.contains(&name) && !allowed.contains(&name) {
            return Err(ProcessError::UnsupportedElement(name.to_string()));
        }
    }
    Ok(())
}

/// Convert a BPMN document into a native definition and validate it.
pub fn import_bpmn_subset(xml: &str) -> Result<ProcessDefinition, ProcessError> {
    let doc = Document::parse(xml).map_err(|e| ProcessError::MalformedXml(e.to_string()))?;
    let process = doc
        .descendants()
        .find(|n| n.is_element() && n.tag_name().name() == "process")
        .ok_or_else(|| ProcessError::MalformedXml("no <process> element".into()))?;
    let pid = process
        .attribute("id")
        .ok_or_else(|| ProcessError::MalformedXml("<process> without id".into()))?
        .to_string();
    let data_root = required(process, "dataRoot")?.to_string();

    let mut nodes = Vec::new();
    let mut flows = Vec::new();
    let mut defaults = Vec::new();
    for el in process.children().filter(XmlNode::is_element) {
        let name = el.tag_name().name();
        if IGNORED_CHILDREN.contains(&name) {
            continue;
        }
        let id = || {
            el.attribute("id")
                .map(str::to_string)
                .ok_or_else(|| ProcessError::MalformedXml(format!("<{name}> without id")))
        };
        match name {
            "startEvent" => {
                check_children(el, &[])?;
                nodes.push(Node::StartEvent { id: id()? });
            }
            "endEvent" => {
                check_children(el, &[])?;
                nodes.push(Node::EndEvent { id: id()? });
            }
            "exclusiveGateway" => {
                check_children(el, &[])?;
                if let Some(d) = el.attribute("default") {
                    defaults.push(d.to_string());
                }
                nodes.push(Node::ExclusiveGateway { id: id()? });
            }
            "userTask" => {
                check_children(el, &[])?;
                nodes.push(Node::UserTask {
                    id: id()?,
                    form: required(el, "form")?.to_string(),
                    outputs: paths(attr(el, "outputs"), &pid)?,
                });
            }
            "serviceTask" => {
                check_children(el, &[])?;
                nodes.push(Node::AutomatedTask {
                    id: id()?,
                    handler: required(el, "handler")?.to_string(),
                    outputs: paths(attr(el, "outputs"), &pid)?,
                });
            }
            "callActivity" => {
                check_children(el, &["multiInstanceLoopCharacteristics"])?;
                if !el
                    .children()
                    .any(|c| c.tag_name().name() == "multiInstanceLoopCharacteristics")
                {
                    return Err(ProcessError::UnsupportedElement(
                        "callActivity without multiInstanceLoopCharacteristics".into(),
                    ));
                }
                let mapper = match (attr(el, "mapperInput"), attr(el, "mapperOutput")) {
                    (Some(i), Some(o)) => Some(Mapper {
                        input: path(i, &pid)?,
                        results: attr(el, "mapperResults").map(|r| path(r, &pid)).transpose()?,
                        output: path(o, &pid)?,
                    }),
                    (None, None) => None,
                    _ => {
                        return Err(ProcessError::Structure {
                            process: pid.clone(),
                            message: "mapperInput and mapperOutput must be given together".into(),
                        })
                    }
                };
                nodes.push(Node::VariationPoint {
                    id: id()?,
                    registry_ref: required(el, "registry")?.to_string(),
                    aggregation_policy_ref: attr(el, "aggregation").map(str::to_string),
                    selection_variable_ref: attr(el, "selection").map(|s| path(s, &pid)).transpose()?,
                    mapper,
                });
            }
            "sequenceFlow" => {
                check_children(el, &["conditionExpression"])?;
                let get = |a: &str| {
                    el.attribute(a).map(str::to_string).ok_or_else(|| {
                        ProcessError::MalformedXml(format!("<sequenceFlow> without {a}"))
                    })
                };
                let guard = el
                    .children()
                    .find(|c| c.tag_name().name() == "conditionExpression")
                    .and_then(|c| c.text())
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty());
                flows.push((id()?, Edge {
                    from: get("sourceRef")?,
                    to: get("targetRef")?,
                    guard,
                }));
            }
            other => return Err(ProcessError::UnsupportedElement(other.to_string())),
        }
    }
    for (fid, e) in &flows {
        if defaults.contains(fid) && e.guard.is_some() {
            return Err(ProcessError::Structure {
                process: pid.clone(),
                message: format!("default flow `{fid}` carries a condition"),
            });
        }
    }
    let def = ProcessDefinition {
        id: pid,
        data_root,
        nodes,
        edges: flows.into_iter().map(|(_, e)| e).collect(),
    };
    def.validate()?;
    Ok(def)
}
