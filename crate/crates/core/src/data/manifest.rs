use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Plain-text list of volume paths: a `# split=<tag> seed=<n>` header line,
/// then one path per line. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub paths: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))?;
        let fields = header
            .strip_prefix('#')
            .ok_or_else(|| Error::Format(format!("manifest header must start with `#`: {header:?}")))?;
        let (mut split, mut seed) = (None, None);
        for field in fields.split_whitespace() {
            match field.split_once('=') {
                Some(("split", v)) => split = Some(v.parse::<Split>()?),
                Some(("seed", v)) => {
                    seed = Some(v.parse::<u64>().map_err(|_| Error::Format(format!("bad seed `{v}`")))?)
                }
                _ => return Err(Error::Format(format!("unknown manifest header field `{field}`"))),
            }
        }
        let paths = lines
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let p = PathBuf::from(l);
                if p.is_relative() {
                    base.join(p)
                } else {
                    p
                }
            })
            .collect();
        Ok(DatasetManifest {
            split: split.ok_or_else(|| Error::Format("manifest header lacks split=".into()))?,
            seed: seed.ok_or_else(|| Error::Format("manifest header lacks seed=".into()))?,
            paths,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> String {
        let mut out = format!("# split={} seed={}\n", self.split, self.seed);
        for p in &self.paths {
            out.push_str(&p.display().to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Fails when any path appears in more than one manifest.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut dup = Vec::new();
    for m in manifests {
        for p in &m.paths {
            if !seen.insert(p.clone()) {
                dup.push(format!("{} ({})", p.display(), m.split));
            }
        }
    }
    if dup.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("splits overlap: {}", dup.join(", "))))
    }
}
