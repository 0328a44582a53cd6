use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, TaskDef};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    task_id: String,
    seed: u64,
    config_hash: String,
    def: TaskDef,
}

#[derive(Serialize, Deserialize)]
struct Record {
    split: Split,
    #[serde(flatten)]
    example: Example,
}

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Val,
}

/// Header line followed by one JSON record per example.
pub fn dataset_to_string(ds: &Dataset) -> String {
    let header = Header {
        task_id: ds.def.task_id.clone(),
        seed: ds.def.seed,
        config_hash: ds.def.config_hash(),
        def: ds.def.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serialises");
    out.push('\n');
    for (split, examples) in [(Split::Train, &ds.train), (Split::Val, &ds.val)] {
        for e in examples {
            let r = Record {
                split,
                example: e.clone(),
            };
            out.push_str(&serde_json::to_string(&r).expect("record serialises"));
            out.push('\n');
        }
    }
    out
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(dataset_to_string(ds).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let parse = |line: usize, msg: String| Error::Parse {
        what: format!("{what}:{line}"),
        msg,
    };
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    if header.def.config_hash() != header.config_hash {
        return Err(parse(
            1,
            "config hash does not match task definition".into(),
        ));
    }
    let mut ds = Dataset {
        def: header.def,
        train: Vec::new(),
        val: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| parse(i + 2, e.to_string()))?;
        match r.split {
            Split::Train => ds.train.push(r.example),
            Split::Val => ds.val.push(r.example),
        }
    }
    Ok(ds)
}
