use std::fs;
use std::path::{Path, PathBuf};

use super::config::TableFormat;
use super::pipeline::ReportBundle;
use crate::error::PipelineError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Output {
        path: path.to_path_buf(),
        source,
    }
}

fn put(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Full markdown report: every table followed by the omissions.
pub fn render_report(bundle: &ReportBundle) -> String {
    let mut out = String::from("# Jury evaluation report\n\n");
    for t in &bundle.tables {
        out.push_str(&t.to_markdown());
        out.push('\n');
    }
    if !bundle.metadata.omitted.is_empty() {
        out.push_str("### Omitted\n\n");
        for o in &bundle.metadata.omitted {
            out.push_str(&format!("- {o}\n"));
        }
    }
    out
}

/// Writes the bundle under `out_dir`. Files are staged in a sibling
/// directory and swapped in, so a failed run leaves the previous output.
pub fn write_bundle(bundle: &ReportBundle, out_dir: &Path, formats: &[TableFormat]) -> Result<Vec<PathBuf>, PipelineError> {
    let name = out_dir
        .file_name()
        .ok_or_else(|| PipelineError::Config(format!("output directory {} has no name", out_dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }

    let mut written = Vec::new();
    let mut emit = |rel: String, contents: &str| -> Result<(), PipelineError> {
        put(&staging.join(&rel), contents)?;
        written.push(out_dir.join(rel));
        Ok(())
    };
    for t in &bundle.tables {
        for f in formats {
            let ext = match f {
                TableFormat::Csv => "csv",
                TableFormat::Markdown => "md",
            };
            emit(format!("tables/{}.{ext}", t.name), &t.render(*f))?;
        }
    }
    for (name, plot) in &bundle.plots {
        let text = serde_json::to_string_pretty(plot).expect("plot data serialises");
        emit(format!("plots/{name}.json"), &(text + "\n"))?;
    }
    for (rel, contents) in &bundle.files {
        emit(rel.clone(), contents)?;
    }
    let meta = serde_json::to_string_pretty(&bundle.metadata).expect("metadata serialises");
    emit("metadata.json".into(), &(meta + "\n"))?;
    emit("report.md".into(), &render_report(bundle))?;

    let backup = parent.join(format!(".{name}.old-{}", std::process::id()));
    let had_old = out_dir.exists();
    if had_old {
        fs::rename(out_dir, &backup).map_err(io_err(out_dir))?;
    }
    if let Err(e) = fs::rename(&staging, out_dir) {
        if had_old {
            let _ = fs::rename(&backup, out_dir);
        }
        return Err(io_err(out_dir)(e));
    }
    if had_old {
        fs::remove_dir_all(&backup).map_err(io_err(&backup))?;
    }
    written.sort();
    Ok(written)
}
