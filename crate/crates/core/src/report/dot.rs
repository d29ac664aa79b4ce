//! Graphviz rendering of circuits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::Circuit;
use crate::error::Result;
use crate::io_util::atomic_write;
use crate::model::HeadId;

/// Directed graph from `input` through the circuit's heads, grouped by
/// layer, to `logits`. Every head in one populated layer feeds every head
/// in the next populated layer.
pub fn circuit_dot(circuit: &Circuit) -> String {
    let mut layers: BTreeMap<usize, Vec<HeadId>> = BTreeMap::new();
    for h in &circuit.heads {
        layers.entry(h.layer).or_default().push(*h);
    }
    for heads in layers.values_mut() {
        heads.sort();
        heads.dedup();
    }
    let node = |h: &HeadId| format!("\"a{}.{}\"", h.layer, h.head);
    let mut s = String::new();
    writeln!(s, "digraph \"circuit_m{}_n{}\" {{", circuit.class.m, circuit.class.n).unwrap();
    s.push_str("  rankdir=BT;\n");
    s.push_str("  input [shape=box];\n");
    for heads in layers.values() {
        let names: Vec<String> = heads.iter().map(node).collect();
        writeln!(s, "  {{ rank=same; {}; }}", names.join("; ")).unwrap();
    }
    s.push_str("  logits [shape=box];\n");
    let mut prev = vec!["input".to_string()];
    for heads in layers.values() {
        let cur: Vec<String> = heads.iter().map(node).collect();
        for a in &prev {
            for b in &cur {
                writeln!(s, "  {a} -> {b};").unwrap();
            }
        }
        prev = cur;
    }
    for a in &prev {
        writeln!(s, "  {a} -> logits;").unwrap();
    }
    s.push_str("}\n");
    s
}

pub fn emit_circuit_dot(circuit: &Circuit, out: &Path) -> Result<()> {
    atomic_write(out, circuit_dot(circuit).as_bytes())
}
