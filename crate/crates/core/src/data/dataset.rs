use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Name of the per-dataset manifest at the dataset root.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// One image tagged with its domain and (hidden during training) class.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub image: Image,
    pub domain_id: usize,
    pub class_id: Option<usize>,
    pub sample_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCatalog {
    pub domains: Vec<String>,
    pub per_domain_counts: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

impl DomainCatalog {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn total(&self) -> usize {
        self.per_domain_counts.iter().sum()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.as_ref().map_or(0, Vec::len)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() != self.per_domain_counts.len() {
            return Err(Error::Invariant("catalog domain and count lists differ in length".into()));
        }
        if let Some(i) = self.per_domain_counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyDomain(self.domains[i].clone()));
        }
        Ok(())
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub domain: String,
    pub class: String,
    pub path: String,
}

/// An immutable, fully decoded multi-domain corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    catalog: DomainCatalog,
    samples: Vec<DomainSample>,
    image_size: usize,
}

impl Dataset {
    pub fn new(catalog: DomainCatalog, samples: Vec<DomainSample>, image_size: usize) -> Result<Self> {
        catalog.validate()?;
        let mut counts = vec![0; catalog.n_domains()];
        let mut ids = BTreeSet::new();
        for s in &samples {
            if s.domain_id >= catalog.n_domains() {
                return Err(Error::DomainOutOfRange {
                    domain: s.domain_id,
                    n_domains: catalog.n_domains(),
                });
            }
            if !s.image.in_unit_range() {
                return Err(Error::Invariant(format!("sample {} has pixels outside [0,1]", s.sample_id)));
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::Invariant(format!("duplicate sample_id {}", s.sample_id)));
            }
            counts[s.domain_id] += 1;
        }
        if counts != catalog.per_domain_counts {
            return Err(Error::Invariant(format!(
                "catalog counts {:?} do not match samples {counts:?}",
                catalog.per_domain_counts
            )));
        }
        Ok(Self {
            catalog,
            samples,
            image_size,
        })
    }

    pub fn catalog(&self) -> &DomainCatalog {
        &self.catalog
    }

    pub fn samples(&self) -> &[DomainSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &DomainSample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Indices of every sample from domain `d`, in dataset order.
    pub fn domain_indices(&self, d: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].domain_id == d).collect()
    }

    /// Restricts to the named domains, renumbering them in the given order.
    /// Class ids and names are kept so labels stay comparable across subsets.
    pub fn subset(&self, domains: &[String]) -> Result<Self> {
        let mut remap = vec![None; self.catalog.n_domains()];
        for (new, name) in domains.iter().enumerate() {
            let old = self
                .catalog
                .domain_index(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown domain `{name}`; have {:?}", self.catalog.domains)))?;
            remap[old] = Some(new);
        }
        let samples: Vec<DomainSample> = self
            .samples
            .iter()
            .filter_map(|s| {
                remap[s.domain_id].map(|d| DomainSample {
                    domain_id: d,
                    ..s.clone()
                })
            })
            .collect();
        let catalog = DomainCatalog {
            domains: domains.to_vec(),
            per_domain_counts: domains
                .iter()
                .map(|n| self.catalog.per_domain_counts[self.catalog.domain_index(n).expect("checked")])
                .collect(),
            class_names: self.catalog.class_names.clone(),
        };
        Self::new(catalog, samples, self.image_size)
    }

    /// One manifest line per sample, with paths relative to the dataset root.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let classes = self.catalog.class_names.clone().unwrap_or_default();
        self.samples
            .iter()
            .map(|s| {
                let class = s
                    .class_id
                    .and_then(|c| classes.get(c).cloned())
                    .unwrap_or_default();
                let stem = s.sample_id.rsplit('/').next().unwrap_or(&s.sample_id);
                ManifestEntry {
                    sample_id: s.sample_id.clone(),
                    domain: self.catalog.domains[s.domain_id].clone(),
                    path: format!("{}/{class}/{stem}.png", self.catalog.domains[s.domain_id]),
                    class,
                }
            })
            .collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads `root/<domain>/<class>/<image>` into memory, resizing to `image_size`.
///
/// Domains, classes and files are visited in lexicographic order, so repeated
/// ingestion of the same tree yields the same sample order. Files that fail to
/// decode are skipped with a warning.
pub fn ingest_directory(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be positive".into()));
    }
    let domain_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if domain_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} contains no domain directories", root.display())));
    }
    let mut class_names = BTreeSet::new();
    for d in &domain_dirs {
        for c in sorted_entries(d)? {
            if c.is_dir() {
                class_names.insert(file_name(&c));
            }
        }
    }
    let class_names: Vec<String> = class_names.into_iter().collect();
    let mut samples = Vec::new();
    let mut counts = Vec::new();
    let mut domains = Vec::new();
    for (domain_id, d) in domain_dirs.iter().enumerate() {
        let domain = file_name(d);
        let mut count = 0;
        for c in sorted_entries(d)?.into_iter().filter(|p| p.is_dir()) {
            let class = file_name(&c);
            let class_id = class_names.iter().position(|n| *n == class);
            for f in sorted_entries(&c)? {
                let ext = f
                    .extension()
                    .map(|e| e.to_string_lossy().to_ascii_lowercase())
                    .unwrap_or_default();
                if !f.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                    continue;
                }
                match Image::load(&f, image_size) {
                    Ok(image) => {
                        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        samples.push(DomainSample {
                            image,
                            domain_id,
                            class_id,
                            sample_id: format!("{domain}/{class}/{stem}"),
                        });
                        count += 1;
                    }
                    Err(e) => warn!("skipping undecodable file {}: {e}", f.display()),
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyDomain(domain));
        }
        counts.push(count);
        domains.push(domain);
    }
    let catalog = DomainCatalog {
        domains,
        per_domain_counts: counts,
        class_names: Some(class_names),
    };
    Dataset::new(catalog, samples, image_size)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
