//! Dataset manifests: one subject per line, `id image mask split`,
//! whitespace-separated. Relative paths resolve against the manifest's
//! directory; blank lines and `#` comments are skipped.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub subjects: Vec<Subject>,
}

impl Manifest {
    /// Rejects duplicate subject ids, which also keeps splits disjoint.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if s.id.is_empty() || s.id.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid subject id {:?}", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("subject {:?} listed more than once", s.id)));
            }
        }
        Ok(Manifest { subjects })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut subjects = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected `id image mask split`, found {} fields",
                    n + 1,
                    f.len()
                )));
            }
            subjects.push(Subject {
                id: f[0].to_string(),
                image: base.join(f[1]),
                mask: base.join(f[2]),
                split: f[3].parse()?,
            });
        }
        Manifest::new(subjects)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Manifest::parse(&text, path.parent().unwrap_or(Path::new("")))?;
        for s in &m.subjects {
            for p in [&s.image, &s.mask] {
                if !p.is_file() {
                    return Err(Error::Data(format!("subject {}: missing file {}", s.id, p.display())));
                }
            }
        }
        Ok(m)
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.subjects
            .iter()
            .map(|s| format!("{} {} {} {}\n", s.id, rel(&s.image), rel(&s.mask), s.split))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let base = Path::new("/data");
        let text = "# comment\ns1 a.sgv a_m.sgv train\n\ns2 b.sgv b_m.sgv test\n";
        let m = Manifest::parse(text, base).unwrap();
        assert_eq!(m.subjects.len(), 2);
        assert_eq!(m.subjects[0].image, Path::new("/data/a.sgv"));
        assert_eq!(m.split(Split::Test).count(), 1);
        assert_eq!(m.to_text(base), "s1 a.sgv a_m.sgv train\ns2 b.sgv b_m.sgv test\n");
    }

    #[test]
    fn rejects_bad_records() {
        let base = Path::new(".");
        assert!(Manifest::parse("s1 a b", base).is_err());
        assert!(Manifest::parse("s1 a b holdout", base).is_err());
        assert!(Manifest::parse("s1 a b train\ns1 c d test", base).is_err());
    }

    #[test]
    fn load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "s1 a.sgv a_m.sgv train\n").unwrap();
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("a.sgv"));
        assert!(Manifest::load(&dir.path().join("nope.txt")).is_err());
    }
}
