use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::RelevanceGrade;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?} (expected train, validation or test)")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub author: String,
    pub body: String,
}

impl Document {
    pub fn fields(&self) -> [&str; 3] {
        [&self.title, &self.author, &self.body]
    }

    pub fn is_empty(&self) -> bool {
        self.fields().iter().all(|f| f.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub query: String,
    pub document: Document,
    pub grade: RelevanceGrade,
}

/// Train, validation and test triplets with pairwise disjoint query strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<TripletRecord>,
    pub validation: Vec<TripletRecord>,
    pub test: Vec<TripletRecord>,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[TripletRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<TripletRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Errors with the first query string found in two partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: HashMap<&str, Split> = HashMap::new();
        for split in Split::ALL {
            for r in self.get(split) {
                match owner.get(r.query.as_str()) {
                    Some(&first) if first != split => {
                        return Err(Error::QueryOverlap {
                            query: r.query.clone(),
                            first: first.name().into(),
                            second: split.name().into(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        owner.insert(&r.query, split);
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of distinct queries in a partition.
    pub fn query_count(&self, split: Split) -> usize {
        let set: std::collections::HashSet<&str> = self.get(split).iter().map(|r| r.query.as_str()).collect();
        set.len()
    }

    /// SHA-256 of the canonical TSV serialisation.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for split in Split::ALL {
            for r in self.get(split) {
                h.update(format_line(split, r).as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())
    }
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

fn format_line(split: Split, r: &TripletRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        split.name(),
        clean(&r.query),
        r.grade.name(),
        clean(&r.document.title),
        clean(&r.document.author),
        clean(&r.document.body)
    )
}

/// Parses tab-separated `split query grade title author body` lines. Blank
/// lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R, source: &str) -> Result<DatasetSplit> {
    let mut data = DatasetSplit::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::parse(source, line_no, format!("expected 6 tab-separated columns, found {}", cols.len())));
        }
        let split: Split = cols[0].parse().map_err(|e: Error| Error::parse(source, line_no, e.to_string()))?;
        let grade: RelevanceGrade = cols[2].parse().map_err(|e: Error| Error::parse(source, line_no, e.to_string()))?;
        if cols[1].trim().is_empty() {
            return Err(Error::parse(source, line_no, "empty query"));
        }
        let document = Document { title: cols[3].into(), author: cols[4].into(), body: cols[5].into() };
        if document.is_empty() {
            return Err(Error::parse(source, line_no, "document has no text"));
        }
        data.get_mut(split).push(TripletRecord { query: cols[1].into(), document, grade });
    }
    data.check_disjoint()?;
    Ok(data)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    parse_dataset(BufReader::new(File::open(path)?), &path.display().to_string())
}

pub fn write_dataset(path: impl AsRef<Path>, data: &DatasetSplit) -> Result<()> {
    let mut out = Vec::new();
    for split in Split::ALL {
        for r in data.get(split) {
            writeln!(out, "{}", format_line(split, r))?;
        }
    }
    crate::io::write_atomic(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetSplit> {
        parse_dataset(text.as_bytes(), "d.tsv")
    }

    #[test]
    fn one_triplet_per_split() {
        let d = parse("train\tq1\tVITAL\tt\ta\tb\nvalidation\tq2\tRELEVANT\t\t\tbody\ntest\tq3\tNONRELEVANT\tt\t\t\n").unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (1, 1, 1));
        assert_eq!(d.validation[0].grade, RelevanceGrade::Relevant);
        assert_eq!(d.test[0].document.title, "t");
    }

    #[test]
    fn shared_query_is_rejected_by_name() {
        let err = parse("train\tlow fat\tVITAL\tt\t\t\ntest\tlow fat\tVITAL\tt\t\t\n").unwrap_err();
        match &err {
            Error::QueryOverlap { query, first, second } => {
                assert_eq!((query.as_str(), first.as_str(), second.as_str()), ("low fat", "train", "test"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("low fat"));
    }

    #[test]
    fn unknown_grade_reports_line() {
        let err = parse("train\tq\tVITAL\tt\t\t\ntrain\tq\tGREAT\tt\t\t\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        assert!(matches!(parse("train\tq\tVITAL\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("train\t\tVITAL\tt\t\t\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("train\tq\tVITAL\t\t \t\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn seventeen_results_form_one_group() {
        let text: String = (0..17).map(|i| format!("train\tq\tNONRELEVANT\tdoc {i}\t\t\n")).collect();
        let d = parse(&text).unwrap();
        assert_eq!(d.query_count(Split::Train), 1);
        assert_eq!(d.train.len(), 17);
    }

    #[test]
    fn write_then_load() {
        let d = parse("train\tq1\tVITAL\tt\ta\tb\ntest\tq3\tNONRELEVANT\tt\t\tx y\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        write_dataset(&p, &d).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.fingerprint(), d.fingerprint());
    }
}
