//! Line-oriented dataset snapshots.
//!
//! One file per domain:
//!
//! ```text
//! # D=24 C=5 k=3 domain=1
//! 0,1,0.4172,-1.03,...
//! ```
//!
//! Every data line is `y,d,x_0,...,x_{D-1}`. Reals use Rust's shortest
//! round-trip formatting, so write → parse is lossless. A JSON manifest
//! next to the files echoes the generating [`DatasetSpec`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{DatasetSpec, DomainDataset, Sample};
use crate::{DfaError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "dfa-snapshot/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Number of source domains `k` in the generating spec.
    pub num_sources: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub spec: DatasetSpec,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(DfaError::parse(1, format!("unknown manifest format {:?}", m.format)));
        }
        m.spec.validate()?;
        if m.files.len() != m.spec.total_domains() {
            return Err(DfaError::parse(
                1,
                format!("{} files listed for {} domains", m.files.len(), m.spec.total_domains()),
            ));
        }
        if let Some(bad) = m.files.iter().find(|f| !is_plain_file_name(f)) {
            return Err(DfaError::parse(1, format!("file entry {bad:?} is not a plain name")));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn is_plain_file_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
}

pub fn domain_file_name(domain: usize) -> String {
    format!("domain_{domain}.csv")
}

pub fn write_domain(header: SnapshotHeader, dataset: &DomainDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# D={} C={} k={} domain={}",
        header.input_dim, header.num_classes, header.num_sources, header.domain
    );
    for s in &dataset.samples {
        let _ = write!(out, "{},{}", s.y, s.d);
        for v in &s.x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> Result<SnapshotHeader> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| DfaError::parse(1, "missing '#' header line"))?;
    let (mut d, mut c, mut k, mut domain) = (None, None, None, None);
    for token in body.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| DfaError::parse(1, format!("header token {token:?} is not key=value")))?;
        let value: usize = value
            .parse()
            .map_err(|_| DfaError::parse(1, format!("header value {value:?} is not a count")))?;
        let slot = match key {
            "D" => &mut d,
            "C" => &mut c,
            "k" => &mut k,
            "domain" => &mut domain,
            _ => return Err(DfaError::parse(1, format!("unknown header key {key:?}"))),
        };
        if slot.replace(value).is_some() {
            return Err(DfaError::parse(1, format!("duplicate header key {key:?}")));
        }
    }
    let need = |v: Option<usize>, name: &str| {
        v.ok_or_else(|| DfaError::parse(1, format!("header is missing {name}")))
    };
    let header = SnapshotHeader {
        input_dim: need(d, "D")?,
        num_classes: need(c, "C")?,
        num_sources: need(k, "k")?,
        domain: need(domain, "domain")?,
    };
    if header.num_classes < 2 || header.num_sources < 2 || header.input_dim == 0 {
        return Err(DfaError::parse(1, "header needs D >= 1, C >= 2, k >= 2"));
    }
    if header.domain > header.num_sources {
        return Err(DfaError::parse(1, "domain index exceeds k"));
    }
    Ok(header)
}

/// Parses one domain file. Rejects malformed headers, wrong field counts,
/// out-of-range labels and non-finite values.
pub fn parse_domain(text: &str) -> Result<(SnapshotHeader, DomainDataset)> {
    let mut lines = text.lines();
    let header = parse_header(lines.next().unwrap_or(""))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut index = |name: &str| -> Result<usize> {
            let f = fields
                .next()
                .ok_or_else(|| DfaError::parse(lineno, format!("missing {name}")))?;
            f.parse()
                .map_err(|_| DfaError::parse(lineno, format!("{name} {f:?} is not an index")))
        };
        let y = index("label")?;
        let d = index("domain")?;
        if y >= header.num_classes {
            return Err(DfaError::parse(lineno, format!("label {y} >= C")));
        }
        if d != header.domain {
            return Err(DfaError::parse(lineno, format!("domain {d} in a file for domain {}", header.domain)));
        }
        let mut x = Vec::new();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| DfaError::parse(lineno, format!("{f:?} is not a real number")))?;
            if !v.is_finite() {
                return Err(DfaError::parse(lineno, "non-finite feature value"));
            }
            x.push(v);
            if x.len() > header.input_dim {
                break;
            }
        }
        if x.len() != header.input_dim {
            return Err(DfaError::parse(
                lineno,
                format!("expected {} features", header.input_dim),
            ));
        }
        samples.push(Sample { x, y, d });
    }
    Ok((
        header,
        DomainDataset {
            origin: header.domain,
            samples,
        },
    ))
}

/// Writes all domains plus the manifest into `dir`.
pub fn save_dir(dir: &Path, spec: &DatasetSpec, domains: &[DomainDataset]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(domains.len());
    for dom in domains {
        let name = domain_file_name(dom.origin);
        let header = SnapshotHeader {
            input_dim: spec.input_dim(),
            num_classes: spec.num_classes,
            num_sources: spec.num_domains,
            domain: dom.origin,
        };
        fs::write(dir.join(&name), write_domain(header, dom))?;
        files.push(name);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        spec: spec.clone(),
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(manifest)
}

/// Reads a directory written by [`save_dir`] and checks it against its
/// manifest.
pub fn load_dir(dir: &Path) -> Result<(Manifest, Vec<DomainDataset>)> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let spec = &manifest.spec;
    let mut domains = Vec::with_capacity(manifest.files.len());
    for (i, name) in manifest.files.iter().enumerate() {
        let (header, dom) = parse_domain(&fs::read_to_string(dir.join(name))?)?;
        let expect = SnapshotHeader {
            input_dim: spec.input_dim(),
            num_classes: spec.num_classes,
            num_sources: spec.num_domains,
            domain: i,
        };
        if header != expect {
            return Err(DfaError::InvalidSpec(format!(
                "{name}: header {header:?} disagrees with manifest"
            )));
        }
        domains.push(dom);
    }
    Ok((manifest, domains))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::generate;
    use proptest::prelude::*;

    fn header() -> SnapshotHeader {
        SnapshotHeader {
            input_dim: 2,
            num_classes: 3,
            num_sources: 2,
            domain: 1,
        }
    }

    #[test]
    fn generated_domain_round_trips() {
        let spec = DatasetSpec {
            samples_per_domain: 15,
            ..DatasetSpec::default()
        };
        let domains = generate(&spec).unwrap();
        for dom in &domains {
            let h = SnapshotHeader {
                input_dim: 24,
                num_classes: 5,
                num_sources: 3,
                domain: dom.origin,
            };
            let text = write_domain(h, dom);
            assert_eq!(text.lines().count(), 16);
            let (back_h, back) = parse_domain(&text).unwrap();
            assert_eq!(back_h, h);
            assert_eq!(&back, dom);
        }
    }

    #[test]
    fn rejects_malformed_input() {
        let cases = [
            "",
            "D=2 C=3 k=2 domain=1\n",
            "# D=2 C=3 k=2\n",
            "# D=2 C=3 k=2 domain=1 D=2\n",
            "# D=2 C=3 k=2 domain=5\n",
            "# D=2 C=3 k=2 domain=1\n0,1,0.5\n",
            "# D=2 C=3 k=2 domain=1\n0,1,0.5,1,2\n",
            "# D=2 C=3 k=2 domain=1\n3,1,0.5,1\n",
            "# D=2 C=3 k=2 domain=1\n0,0,0.5,1\n",
            "# D=2 C=3 k=2 domain=1\n0,1,NaN,1\n",
            "# D=2 C=3 k=2 domain=1\n0,1,inf,1\n",
            "# D=2 C=3 k=2 domain=1\n-1,1,0.5,1\n",
        ];
        for text in cases {
            assert!(parse_domain(text).is_err(), "{text:?}");
        }
        assert!(parse_domain("# D=2 C=3 k=2 domain=1\n2,1,0.5,-1e300\n").is_ok());
    }

    #[test]
    fn manifest_rejects_path_entries() {
        let spec = DatasetSpec::default();
        let mut m = Manifest {
            format: MANIFEST_FORMAT.into(),
            spec,
            files: (0..4).map(domain_file_name).collect(),
        };
        assert_eq!(Manifest::parse(&m.to_json()).unwrap(), m);
        m.files[0] = "../etc/passwd".into();
        assert!(Manifest::parse(&m.to_json()).is_err());
    }

    proptest! {
        #[test]
        fn any_finite_rows_round_trip(
            rows in prop::collection::vec((0usize..3, prop::collection::vec(-1e12f64..1e12, 2)), 0..20)
        ) {
            let dom = DomainDataset {
                origin: 1,
                samples: rows.into_iter().map(|(y, x)| Sample { x, y, d: 1 }).collect(),
            };
            let (_, back) = parse_domain(&write_domain(header(), &dom)).unwrap();
            prop_assert_eq!(back, dom);
        }

        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = parse_domain(&text);
        }
    }
}
