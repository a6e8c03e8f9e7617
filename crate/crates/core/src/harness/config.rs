//! Experiment config files: `[section]` headers followed by `key = value`
//! lines. `#` starts a comment. Unknown sections and keys are rejected with
//! their line number, and the preset is loaded and checked before anything
//! runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::nic::{Preset, PresetError};
use crate::workloads::{KeyDistribution, MessageSizeDistribution, OpMix, TableShape, WorkloadKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Syntax {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: unknown section [{section}]")]
    UnknownSection {
        path: String,
        line: usize,
        section: String,
    },
    #[error("{path}:{line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        path: String,
        line: usize,
        section: String,
        key: String,
    },
    #[error("{path}: missing required key `{key}` in [{section}]")]
    Missing {
        path: String,
        section: String,
        key: String,
    },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error(transparent)]
    Preset(#[from] PresetError),
}

const SCHEMA: &[(&str, &[&str])] = &[
    ("experiment", &["id", "preset", "seed", "out"]),
    (
        "topology",
        &[
            "nodes",
            "threads_per_node",
            "coroutines_per_thread",
            "virtual_nodes",
            "recv_slots",
        ],
    ),
    (
        "table",
        &["keys", "bucket_width", "occupancy", "one_sided_reads"],
    ),
    (
        "workload",
        &[
            "kind",
            "key_distribution",
            "op_count",
            "read_frac",
            "write_frac",
            "insert_frac",
            "delete_frac",
            "message_cachelines",
            "warmup_us",
            "measure_us",
            "connections",
            "depth",
            "region_bytes",
        ],
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: usize,
    pub threads_per_node: usize,
    pub coroutines_per_thread: usize,
    pub virtual_nodes: Option<usize>,
    pub recv_slots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadBlock {
    pub kind: WorkloadKind,
    pub key_distribution: KeyDistribution,
    pub op_count: usize,
    pub mix: OpMix,
    pub sizes: MessageSizeDistribution,
    pub warmup_ns: u64,
    /// `None` runs TatpLite op-count bounded instead of time bounded.
    pub measure_ns: Option<u64>,
    pub connections: usize,
    pub depth: usize,
    pub region_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    pub preset_path: PathBuf,
    pub preset: Preset,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub topology: Topology,
    pub table: TableShape,
    pub workload: WorkloadBlock,
}

struct Entry {
    line: usize,
    value: String,
}

struct Parsed<'a> {
    path: &'a str,
    entries: BTreeMap<(String, String), Entry>,
}

impl Parsed<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    fn get<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|err| ConfigError::Syntax {
                path: self.path.into(),
                line: e.line,
                msg: format!("bad value `{}` for {key}: {err}", e.value),
            }),
        }
    }

    fn required(&self, section: &str, key: &str) -> Result<&Entry, ConfigError> {
        self.raw(section, key).ok_or_else(|| ConfigError::Missing {
            path: self.path.into(),
            section: section.into(),
            key: key.into(),
        })
    }

    fn bad(&self, e: &Entry, msg: String) -> ConfigError {
        ConfigError::Syntax {
            path: self.path.into(),
            line: e.line,
            msg,
        }
    }
}

fn tokenize<'a>(text: &str, path: &'a str) -> Result<Parsed<'a>, ConfigError> {
    let mut entries = BTreeMap::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    path: path.into(),
                    line,
                    msg: format!("unterminated section header `{s}`"),
                })?
                .trim();
            if !SCHEMA.iter().any(|(sec, _)| *sec == name) {
                return Err(ConfigError::UnknownSection {
                    path: path.into(),
                    line,
                    section: name.into(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            return Err(ConfigError::Syntax {
                path: path.into(),
                line,
                msg: format!("expected `key = value`, got `{s}`"),
            });
        };
        let Some(sec) = section.clone() else {
            return Err(ConfigError::Syntax {
                path: path.into(),
                line,
                msg: "key before any [section]".into(),
            });
        };
        let key = k.trim().to_string();
        let known = SCHEMA
            .iter()
            .find(|(s, _)| *s == sec)
            .map(|(_, k)| *k)
            .unwrap_or(&[]);
        if !known.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                path: path.into(),
                line,
                section: sec,
                key,
            });
        }
        let value = v.trim().to_string();
        if let Some(prev) = entries.insert((sec.clone(), key.clone()), Entry { line, value }) {
            return Err(ConfigError::Syntax {
                path: path.into(),
                line,
                msg: format!("`{key}` already set on line {}", prev.line),
            });
        }
    }
    Ok(Parsed { path, entries })
}

/// Parses `1`, `default`, or a histogram such as `1:0.75, 4:0.25`.
fn parse_sizes(s: &str) -> Result<MessageSizeDistribution, String> {
    if s.eq_ignore_ascii_case("default") {
        return Ok(MessageSizeDistribution::sync_mirroring());
    }
    if let Ok(c) = s.parse::<u64>() {
        return Ok(MessageSizeDistribution::fixed(c));
    }
    let mut bins = Vec::new();
    for part in s.split(',') {
        let (c, w) = part
            .split_once(':')
            .ok_or_else(|| format!("histogram bin `{part}` is not `cachelines:weight`"))?;
        let c = c
            .trim()
            .parse::<u64>()
            .map_err(|e| format!("bin `{part}`: {e}"))?;
        let w = w
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bin `{part}`: {e}"))?;
        bins.push((c, w));
    }
    Ok(MessageSizeDistribution { bins })
}

impl ExperimentConfig {
    /// Parses config text; `base` resolves a relative preset path.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, ConfigError> {
        Self::parse_with_preset(text, origin, base, None)
    }

    /// Like [`ExperimentConfig::parse`], but `preset` replaces the file the
    /// config names.
    pub fn parse_with_preset(
        text: &str,
        origin: &str,
        base: &Path,
        preset: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let p = tokenize(text, origin)?;
        let preset_entry = p.required("experiment", "preset")?;
        let preset_path = match preset {
            Some(path) => path.to_path_buf(),
            None => base.join(&preset_entry.value),
        };
        let preset = Preset::load(&preset_path)?;

        let kind_entry = p.required("workload", "kind")?;
        let kind = WorkloadKind::parse(&kind_entry.value).ok_or_else(|| {
            p.bad(
                kind_entry,
                format!("unknown workload kind `{}`", kind_entry.value),
            )
        })?;
        let key_distribution = match p.raw("workload", "key_distribution") {
            None => KeyDistribution::Uniform,
            Some(e) => KeyDistribution::parse(&e.value)
                .ok_or_else(|| p.bad(e, format!("unknown key distribution `{}`", e.value)))?,
        };
        let default_mix = if kind == WorkloadKind::TatpLite {
            OpMix::tatp()
        } else {
            OpMix::reads_only()
        };
        let mix = OpMix {
            read_frac: p.get("workload", "read_frac", default_mix.read_frac)?,
            write_frac: p.get("workload", "write_frac", default_mix.write_frac)?,
            insert_frac: p.get("workload", "insert_frac", default_mix.insert_frac)?,
            delete_frac: p.get("workload", "delete_frac", default_mix.delete_frac)?,
        };
        let sizes = match p.raw("workload", "message_cachelines") {
            None => MessageSizeDistribution::sync_mirroring(),
            Some(e) => parse_sizes(&e.value).map_err(|m| p.bad(e, m))?,
        };
        let measure_us: Option<u64> = match p.raw("workload", "measure_us") {
            None => None,
            Some(_) => Some(p.get("workload", "measure_us", 0)?),
        };
        let virtual_nodes = match p.raw("topology", "virtual_nodes") {
            None => None,
            Some(_) => Some(p.get("topology", "virtual_nodes", 0)?),
        };
        let out = p.raw("experiment", "out").map(|e| PathBuf::from(&e.value));

        let cfg = ExperimentConfig {
            id: p.get("experiment", "id", "experiment".to_string())?,
            preset_path,
            preset,
            seed: p.get("experiment", "seed", 1)?,
            out,
            topology: Topology {
                nodes: p.get("topology", "nodes", 2)?,
                threads_per_node: p.get("topology", "threads_per_node", 1)?,
                coroutines_per_thread: p.get("topology", "coroutines_per_thread", 8)?,
                virtual_nodes,
                recv_slots: p.get("topology", "recv_slots", 32)?,
            },
            table: TableShape {
                key_count: p.get("table", "keys", 4096)?,
                bucket_width: p.get("table", "bucket_width", 1)?,
                occupancy: p.get("table", "occupancy", 0.6)?,
                one_sided_reads: p.get("table", "one_sided_reads", true)?,
            },
            workload: WorkloadBlock {
                kind,
                key_distribution,
                op_count: p.get("workload", "op_count", 1000)?,
                mix,
                sizes,
                warmup_ns: p.get::<u64>("workload", "warmup_us", 50)? * 1000,
                measure_ns: measure_us.map(|u| u * 1000),
                connections: p.get("workload", "connections", 8)?,
                depth: p.get("workload", "depth", 1024)?,
                region_bytes: p.get("workload", "region_bytes", 20u64 << 30)?,
            },
        };
        cfg.validate().map_err(|msg| ConfigError::Invalid {
            path: origin.into(),
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_preset(path, None)
    }

    pub fn load_with_preset(path: &Path, preset: Option<&Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with_preset(&text, &path.display().to_string(), base, preset)
    }

    /// Cross-field checks; every rule here runs before any simulation.
    pub fn validate(&self) -> Result<(), String> {
        let t = &self.topology;
        let w = &self.workload;
        let needs_cluster = matches!(w.kind, WorkloadKind::KvLookups | WorkloadKind::TatpLite);
        if needs_cluster && t.nodes < 2 {
            return Err("topology.nodes must be at least 2".into());
        }
        if t.threads_per_node == 0 || t.coroutines_per_thread == 0 || t.recv_slots == 0 {
            return Err("threads, coroutines and recv slots must be positive".into());
        }
        if let Some(v) = t.virtual_nodes {
            if w.kind != WorkloadKind::KvLookups {
                return Err("virtual_nodes only applies to kv_lookups".into());
            }
            if v < t.nodes {
                return Err(format!("virtual_nodes {v} below nodes {}", t.nodes));
            }
        }
        if needs_cluster {
            crate::kvstore::buckets_for(
                self.table.key_count,
                self.table.bucket_width,
                self.table.occupancy,
            )
            .map_err(|e| e.to_string())?;
        }
        w.mix.validate().map_err(|e| e.to_string())?;
        if w.kind == WorkloadKind::SyncMirroring {
            w.sizes.validate().map_err(|e| e.to_string())?;
        }
        if w.kind == WorkloadKind::KvLookups && w.measure_ns.is_none() {
            return Err("kv_lookups needs workload.measure_us".into());
        }
        if w.measure_ns == Some(0) {
            return Err("measure_us must be positive".into());
        }
        if w.op_count == 0 {
            return Err("op_count must be positive".into());
        }
        if w.kind == WorkloadKind::RandomReads
            && (w.connections == 0 || w.depth == 0 || w.region_bytes < 64)
        {
            return Err("random_reads needs positive connections, depth and region".into());
        }
        Ok(())
    }
}
