//! Result tables: one section per task stream,
//! Joint first, CADE last, EER in percent with three decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};
use cade_core::continual::MethodSpec;
use cade_core::train::{aggregate, RunReport, SummaryRow};

/// One printed row: a method with all of its memory sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub setting: String,
    pub name: String,
    /// `(memory, cell)` per memory size, cells formatted as in the table.
    pub cells: Vec<(usize, String)>,
    pub joint: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub stream: String,
    pub setting: String,
    pub rows: Vec<TableRow>,
}

/// `32.171` for one seed, `32.171±1.204` for several.
pub fn format_eer(row: &SummaryRow) -> String {
    if row.seeds.len() < 2 {
        format!("{:.3}", 100.0 * row.mean)
    } else {
        format!("{:.3}±{:.3}", 100.0 * row.mean, 100.0 * row.std)
    }
}

/// `CADE(alpha=0.5, gamma=1)`-style label listing a spec's parameters.
fn spec_label(spec: &MethodSpec) -> String {
    let v = serde_json::to_value(spec).expect("serializable");
    let params: Vec<String> = v
        .as_object()
        .map(|o| {
            o.iter()
                .filter(|(k, _)| k.as_str() != "name")
                .map(|(k, v)| format!("{k}={v}"))
                .collect()
        })
        .unwrap_or_default();
    if params.is_empty() {
        spec.display_name().to_string()
    } else {
        format!("{}({})", spec.display_name(), params.join(", "))
    }
}

/// Groups reports by stream and aggregates each group over seeds.
pub fn build_sections(reports: &[RunReport]) -> Result<Vec<Section>> {
    if reports.is_empty() {
        bail!("no result records found");
    }
    let mut by_stream: BTreeMap<&str, Vec<RunReport>> = BTreeMap::new();
    for r in reports {
        by_stream.entry(r.stream.as_str()).or_default().push(r.clone());
    }
    let mut sections = Vec::new();
    for (stream, rs) in by_stream {
        let setting = rs[0].setting.clone();
        let summary = aggregate(&rs)?;
        // a display name shared by differently configured specs gets its parameters spelled out
        let mut specs_per_name: BTreeMap<&str, Vec<&MethodSpec>> = BTreeMap::new();
        for s in &summary {
            let v = specs_per_name.entry(s.method.as_str()).or_default();
            if !v.contains(&&s.spec) {
                v.push(&s.spec);
            }
        }
        let mut rows: Vec<TableRow> = Vec::new();
        let mut last_spec: Option<&MethodSpec> = None;
        for s in &summary {
            let cell = (s.memory, format_eer(s));
            if last_spec == Some(&s.spec) {
                rows.last_mut().expect("row exists").cells.push(cell);
                continue;
            }
            let name = if specs_per_name[s.method.as_str()].len() > 1 {
                spec_label(&s.spec)
            } else {
                s.method.clone()
            };
            let joint = s.spec == MethodSpec::Joint;
            rows.push(TableRow {
                setting: if joint { "Joint".into() } else { setting.clone() },
                name,
                cells: vec![cell],
                joint,
            });
            last_spec = Some(&s.spec);
        }
        sections.push(Section {
            stream: stream.to_string(),
            setting,
            rows,
        });
    }
    Ok(sections)
}

fn bracketed<T: AsRef<str>>(items: &[T]) -> String {
    if items.len() == 1 {
        items[0].as_ref().to_string()
    } else {
        let parts: Vec<&str> = items.iter().map(AsRef::as_ref).collect();
        format!("[{}]", parts.join(", "))
    }
}

fn memory_text(row: &TableRow) -> String {
    if row.joint {
        return "/".into();
    }
    let m: Vec<String> = row.cells.iter().map(|(m, _)| m.to_string()).collect();
    bracketed(&m)
}

/// Aligned text tables, one per stream.
pub fn render_text(sections: &[Section]) -> String {
    let header = ["Experiment Setting", "Name", "Memory", "Test EER(%)"];
    let mut out = String::new();
    for (i, sec) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "stream {}", sec.stream);
        let mut lines: Vec<[String; 4]> = vec![header.map(String::from)];
        let mut setting_shown = false;
        for r in &sec.rows {
            let setting = if r.joint {
                r.setting.clone()
            } else if !setting_shown {
                setting_shown = true;
                r.setting.clone()
            } else {
                String::new()
            };
            let eers: Vec<&str> = r.cells.iter().map(|(_, c)| c.as_str()).collect();
            lines.push([setting, r.name.clone(), memory_text(r), bracketed(&eers)]);
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let rule = "-".repeat(widths.iter().sum::<usize>() + 3 * 3);
        for (k, l) in lines.iter().enumerate() {
            let cols: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cols.join("   ").trim_end());
            if k == 0 {
                let _ = writeln!(out, "{rule}");
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One CSV line per (method, memory) with the same numbers as the text table.
pub fn render_csv(sections: &[Section]) -> String {
    let mut out = String::from("stream,setting,name,memory,test_eer_pct\n");
    for sec in sections {
        for r in &sec.rows {
            for (m, cell) in &r.cells {
                let memory = if r.joint { "/".to_string() } else { m.to_string() };
                let fields = [
                    sec.stream.as_str(),
                    sec.setting.as_str(),
                    r.name.as_str(),
                    &memory,
                    cell,
                ];
                let line: Vec<String> = fields.iter().map(|f| csv_field(f)).collect();
                let _ = writeln!(out, "{}", line.join(","));
            }
        }
    }
    out
}
