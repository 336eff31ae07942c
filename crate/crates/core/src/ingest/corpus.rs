use std::fs;
use std::path::Path;

use super::{parse_standoff, write_standoff, AnnotatedDocument, IngestError};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads every `<id>.txt` in `dir` with its `<id>.ann`, sorted by id. A
/// missing `.ann` yields a document without spans.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<AnnotatedDocument>, IngestError> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let path = e.path();
            (path.extension()? == "txt").then(|| path.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let txt_path = dir.join(format!("{id}.txt"));
            let ann_path = dir.join(format!("{id}.ann"));
            let text = fs::read_to_string(&txt_path).map_err(io_err(&txt_path))?;
            let ann = if ann_path.exists() {
                fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?
            } else {
                String::new()
            };
            parse_standoff(&id, &text, &ann).map_err(|e| IngestError::InFile {
                path: ann_path.display().to_string(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// Writes `<id>.txt` and `<id>.ann` for each document, creating `dir`.
pub fn write_corpus_dir(dir: &Path, docs: &[AnnotatedDocument]) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for doc in docs {
        let txt_path = dir.join(format!("{}.txt", doc.doc_id));
        let ann_path = dir.join(format!("{}.ann", doc.doc_id));
        fs::write(&txt_path, &doc.text).map_err(io_err(&txt_path))?;
        let mut ann = write_standoff(doc);
        if !ann.is_empty() {
            ann.push('\n');
        }
        fs::write(&ann_path, ann).map_err(io_err(&ann_path))?;
    }
    Ok(())
}
