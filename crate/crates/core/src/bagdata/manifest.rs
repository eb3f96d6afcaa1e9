//! Line-oriented dataset manifests.
//!
//! Each non-empty line is `id,path,label` for classification or
//! `id,path,time,event01` for survival, optionally followed by a split
//! column `train|val|test`. Lines starting with `#` are ignored. Relative bag
//! paths resolve against the manifest's directory. When no line names a
//! split, slides are assigned 80/10/10 by a seeded shuffle.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::bagdata::synth::Target;
use crate::error::{Error, Result};
use crate::metrics::SurvivalRecord;
use crate::model::HeadKind;
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Seeded 80/10/10 assignment of `n` items.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "split", &[]));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            out[i] = Split::Train;
        } else if rank < n_train + n_val {
            out[i] = Split::Val;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub target: Target,
    pub split: Split,
}

pub fn load_manifest(path: &Path, task: HeadKind, seed: u64) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, path, base, task, seed)
}

pub fn parse_manifest(
    text: &str,
    origin: &Path,
    base: &Path,
    task: HeadKind,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let target_fields = match task {
        HeadKind::Classification => 1,
        HeadKind::Survival => 2,
    };
    let mut entries = Vec::new();
    let mut splits: Vec<Option<Split>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            detail,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = 2 + target_fields;
        if fields.len() != expected && fields.len() != expected + 1 {
            return Err(err(format!(
                "expected {expected} or {} fields for {}, found {}",
                expected + 1,
                task.name(),
                fields.len()
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty id or path".into()));
        }
        let target = match task {
            HeadKind::Classification => Target::Class(
                fields[2]
                    .parse()
                    .map_err(|_| err(format!("bad class label {:?}", fields[2])))?,
            ),
            HeadKind::Survival => {
                let time: f64 = fields[2]
                    .parse()
                    .map_err(|_| err(format!("bad time {:?}", fields[2])))?;
                let event = match fields[3] {
                    "0" => false,
                    "1" => true,
                    other => return Err(err(format!("event must be 0 or 1, got {other:?}"))),
                };
                Target::Survival(SurvivalRecord::new(time, event).map_err(|e| err(e.to_string()))?)
            }
        };
        let split = match fields.get(expected) {
            Some(s) => Some(s.parse::<Split>().map_err(|e| err(e.to_string()))?),
            None => None,
        };
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Duplicate(fields[0].to_string()));
        }
        if let Some(prev) = splits.first() {
            if prev.is_some() != split.is_some() {
                return Err(err("split column must be given on every line or none".into()));
            }
        }
        splits.push(split);
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            path: base.join(fields[1]),
            target,
            split: Split::Train,
        });
    }
    let assigned = if splits.iter().all(Option::is_none) {
        assign_splits(entries.len(), seed)
    } else {
        splits.into_iter().map(|s| s.expect("checked above")).collect()
    };
    for (e, s) in entries.iter_mut().zip(assigned) {
        e.split = s;
    }
    Ok(entries)
}

/// Renders a manifest; `path` entries are written as given. Splits are
/// written only when `with_splits` is set.
pub fn format_manifest(entries: &[ManifestEntry], with_splits: bool) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = write!(s, "{},{}", e.id, e.path.display());
        match e.target {
            Target::Class(c) => {
                let _ = write!(s, ",{c}");
            }
            Target::Survival(r) => {
                let _ = write!(s, ",{},{}", r.time, u8::from(r.event));
            }
        }
        if with_splits {
            let _ = write!(s, ",{}", e.split.name());
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, task: HeadKind) -> Result<Vec<ManifestEntry>> {
        parse_manifest(text, Path::new("m.csv"), Path::new("/data"), task, 5)
    }

    #[test]
    fn ten_slides_split_eight_one_one() {
        let text: String = (0..10).map(|i| format!("s{i},s{i}.bag,{}\n", i % 2)).collect();
        let a = parse(&text, HeadKind::Classification).unwrap();
        let count = |s| a.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
        assert_eq!(a, parse(&text, HeadKind::Classification).unwrap());
    }

    #[test]
    fn classification_line() {
        let e = parse("s1,foo.bag,1", HeadKind::Classification).unwrap();
        assert_eq!(e[0].id, "s1");
        assert_eq!(e[0].path, Path::new("/data/foo.bag"));
        assert_eq!(e[0].target, Target::Class(1));
    }

    #[test]
    fn survival_line_with_split() {
        let e = parse("# header\n\na,a.bag,12.5,0,val\n", HeadKind::Survival).unwrap();
        assert_eq!(e[0].split, Split::Val);
        assert_eq!(e[0].target, Target::Survival(SurvivalRecord::new(12.5, false).unwrap()));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse("s1,a.bag,0\ns2,b.bag", HeadKind::Classification) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse("s1,a.bag,0\ns1,b.bag,1", HeadKind::Classification),
            Err(Error::Duplicate(id)) if id == "s1"
        ));
        assert!(matches!(parse("a,a.bag,-1,1", HeadKind::Survival), Err(Error::Parse { .. })));
        assert!(matches!(parse("a,a.bag,1,2", HeadKind::Survival), Err(Error::Parse { .. })));
        assert!(matches!(
            parse("a,a.bag,1,train\nb,b.bag,0", HeadKind::Classification),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn format_round_trip() {
        let text = "a,a.bag,3.25,1,train\nb,b.bag,0.5,0,test\n";
        let e = parse_manifest(text, Path::new("m"), Path::new(""), HeadKind::Survival, 0).unwrap();
        assert_eq!(format_manifest(&e, true), text);
    }
}
