//! Polyvore-Outfits directory format.
//!
//! Layout under the dataset root:
//! - `polyvore_item_metadata.json`: item id -> `{description, title, url_name,
//!   category_id, semantic_category}`, plus optional `features`, `pixels`,
//!   `image_path` and `style` (written for synthetic data).
//! - `categories.csv`: `fine_id,fine_name,high_name` rows, no header.
//! - `{nondisjoint|disjoint}/{split}.json`: `[{set_id, items: [{item_id, index}]}]`.
//! - `{variant}/fill_in_blank_{split}.json`: `[{question: [ref], answers: [ref; 4],
//!   blank_position}]`, where a ref is `{set_id}_{index}` or a bare item id.
//!   The answer is the candidate whose ref names the question's set.
//! - `{variant}/compatibility_{split}.txt`: `label ref ref ...` per line.
//!
//! Without a variant directory the split files are read from the root.
//! Images without inline features resolve to `images/{item_id}.jpg`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::compat_id;
use super::{Catalog, DatasetSplit, FitbQuestion, ImagePayload, Item, Outfit, SplitName};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Longer outfits are shuffled (seeded) and truncated.
    pub max_outfit_len: Option<usize>,
    pub seed: u64,
}

const METADATA: &str = "polyvore_item_metadata.json";
const CATEGORIES: &str = "categories.csv";

#[derive(Debug, Default, Serialize, Deserialize)]
struct MetadataEntry {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    description: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    title: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    url_name: String,
    #[serde(default)]
    category_id: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    semantic_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SetEntry {
    set_id: String,
    items: Vec<SetItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SetItem {
    item_id: String,
    index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FitbEntry {
    question: Vec<String>,
    answers: Vec<String>,
    blank_position: usize,
}

fn variant(disjoint: bool) -> &'static str {
    if disjoint {
        "disjoint"
    } else {
        "nondisjoint"
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_bytes(path, &bytes)
}

fn category_key(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn read_categories(path: &Path) -> Result<BTreeMap<String, (String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(id, rest)| rest.rsplit_once(',').map(|(fine, high)| (id, fine, high)));
        let Some((id, fine, high)) = parsed else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: expected fine_id,fine_name,high_name", n + 1),
            });
        };
        out.insert(
            id.trim().to_string(),
            (fine.trim().to_string(), high.trim().to_string()),
        );
    }
    Ok(out)
}

fn load_catalog(root: &Path) -> Result<Catalog> {
    let meta_path = root.join(METADATA);
    let meta: BTreeMap<String, MetadataEntry> = read_json(&meta_path)?;
    let cats_path = root.join(CATEGORIES);
    let categories = if cats_path.exists() {
        read_categories(&cats_path)?
    } else {
        BTreeMap::new()
    };
    let mut items = Vec::with_capacity(meta.len());
    for (id, entry) in meta {
        let key = category_key(&entry.category_id);
        let (fine, high) = match key.as_ref().and_then(|k| categories.get(k)) {
            Some((fine, high)) => (fine.clone(), high.clone()),
            None => {
                let high = entry.semantic_category.clone().ok_or_else(|| Error::Parse {
                    path: meta_path.clone(),
                    message: format!("item {id}: category {key:?} not in hierarchy and no semantic_category"),
                })?;
                (key.unwrap_or_else(|| high.clone()), high)
            }
        };
        let image = if let Some(f) = entry.features {
            ImagePayload::Features(f)
        } else if let Some(p) = entry.pixels {
            ImagePayload::Pixels(p)
        } else if let Some(p) = entry.image_path {
            ImagePayload::File(if p.is_absolute() { p } else { root.join(p) })
        } else {
            ImagePayload::File(root.join("images").join(format!("{id}.jpg")))
        };
        let description = [entry.description, entry.title, entry.url_name]
            .into_iter()
            .find(|s| !s.trim().is_empty())
            .unwrap_or_default();
        items.push(Item {
            item_id: id,
            image,
            description,
            fine_category: fine,
            high_category: high,
            style: entry.style,
        });
    }
    Catalog::new(items)
}

type RefMap = HashMap<(String, usize), String>;

struct Resolver<'a> {
    refs: RefMap,
    catalog: &'a Catalog,
}

impl Resolver<'_> {
    /// Returns the item id and, for a set reference, the set id.
    fn resolve(&self, r: &str) -> Option<(String, Option<String>)> {
        if let Some((set, idx)) = r.rsplit_once('_') {
            if let Ok(idx) = idx.parse::<usize>() {
                if let Some(id) = self.refs.get(&(set.to_string(), idx)) {
                    return Some((id.clone(), Some(set.to_string())));
                }
            }
        }
        self.catalog.get(r).map(|it| (it.item_id.clone(), None))
    }
}

fn split_dir(root: &Path, disjoint: bool) -> PathBuf {
    let dir = root.join(variant(disjoint));
    if dir.is_dir() {
        dir
    } else {
        root.to_path_buf()
    }
}

/// Loads all three splits, their FITB questions and labelled compatibility
/// sets (when present), and enforces the split invariants.
pub fn load_polyvore(root: &Path, disjoint: bool, options: &LoadOptions) -> Result<DatasetSplit> {
    let catalog = load_catalog(root)?;
    let dir = split_dir(root, disjoint);
    let mut outfits: BTreeMap<SplitName, Vec<Outfit>> = BTreeMap::new();
    let mut missing = BTreeSet::new();
    let mut resolvers = BTreeMap::new();
    for split in SplitName::ALL {
        let path = dir.join(format!("{split}.json"));
        let sets: Vec<SetEntry> = read_json(&path)?;
        let mut refs = RefMap::new();
        let mut list = Vec::with_capacity(sets.len());
        for set in sets {
            for it in &set.items {
                if catalog.get(&it.item_id).is_none() {
                    missing.insert(it.item_id.clone());
                }
                refs.insert((set.set_id.clone(), it.index), it.item_id.clone());
            }
            let ids = set.items.into_iter().map(|it| it.item_id).collect();
            list.push(Outfit::new(set.set_id, ids, Some(1)).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?);
        }
        outfits.insert(split, list);
        resolvers.insert(split, refs);
    }
    if !missing.is_empty() {
        return Err(Error::MissingItems(missing.into_iter().collect()));
    }

    let mut fitb = BTreeMap::new();
    let mut compatibility = BTreeMap::new();
    for split in SplitName::ALL {
        let resolver = Resolver {
            refs: resolvers.remove(&split).unwrap_or_default(),
            catalog: &catalog,
        };
        let fitb_path = dir.join(format!("fill_in_blank_{split}.json"));
        if fitb_path.exists() {
            let entries: Vec<FitbEntry> = read_json(&fitb_path)?;
            let questions = entries
                .iter()
                .map(|e| parse_fitb(e, &resolver))
                .collect::<std::result::Result<Vec<_>, String>>()
                .map_err(|message| Error::Parse {
                    path: fitb_path.clone(),
                    message,
                })?;
            fitb.insert(split, questions);
        }
        let compat_path = dir.join(format!("compatibility_{split}.txt"));
        if compat_path.exists() {
            let text = fs::read_to_string(&compat_path).map_err(|e| Error::io(&compat_path, e))?;
            let mut list = Vec::new();
            for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let parsed = parse_compat(line, &resolver, compat_id(split, n));
                list.push(parsed.map_err(|message| Error::Parse {
                    path: compat_path.clone(),
                    message: format!("line {}: {message}", n + 1),
                })?);
            }
            compatibility.insert(split, list);
        }
    }

    let mut train = outfits.remove(&SplitName::Train).unwrap_or_default();
    let mut valid = outfits.remove(&SplitName::Valid).unwrap_or_default();
    let mut test = outfits.remove(&SplitName::Test).unwrap_or_default();
    if let Some(max) = options.max_outfit_len {
        for (k, list) in [&mut train, &mut valid, &mut test].into_iter().enumerate() {
            super::truncate_outfits(list, max, options.seed.wrapping_add(k as u64));
        }
    }
    let split = DatasetSplit {
        catalog,
        train,
        valid,
        test,
        disjoint,
        compatibility,
        fitb,
    };
    split.validate()?;
    Ok(split)
}

fn parse_fitb(entry: &FitbEntry, resolver: &Resolver) -> std::result::Result<FitbQuestion, String> {
    let mut set_id = None;
    let mut partial = Vec::with_capacity(entry.question.len());
    for r in &entry.question {
        let (id, set) = resolver
            .resolve(r)
            .ok_or_else(|| format!("unresolved question ref {r}"))?;
        if set_id.is_none() {
            set_id = set;
        }
        partial.push(id);
    }
    partial.sort();
    let set_id = set_id.ok_or("question refs name no outfit")?;
    if entry.answers.len() != super::FITB_CANDIDATES {
        return Err(format!("question for {set_id} has {} answers", entry.answers.len()));
    }
    let mut candidates = Vec::with_capacity(entry.answers.len());
    let mut answer_index = None;
    for (i, r) in entry.answers.iter().enumerate() {
        let (id, set) = resolver
            .resolve(r)
            .ok_or_else(|| format!("unresolved answer ref {r}"))?;
        if set.as_deref() == Some(set_id.as_str()) && answer_index.is_none() {
            answer_index = Some(i);
        }
        candidates.push(id);
    }
    Ok(FitbQuestion {
        answer_index: answer_index.ok_or_else(|| format!("no answer from set {set_id}"))?,
        outfit_id: set_id,
        partial,
        candidates,
        blank_position: entry.blank_position,
    })
}

fn parse_compat(line: &str, resolver: &Resolver, outfit_id: String) -> std::result::Result<Outfit, String> {
    let mut fields = line.split_whitespace();
    let label: u8 = match fields.next() {
        Some("1") => 1,
        Some("0") => 0,
        other => return Err(format!("bad label {other:?}")),
    };
    let ids = fields
        .map(|r| {
            resolver
                .resolve(r)
                .map(|(id, _)| id)
                .ok_or_else(|| format!("unresolved ref {r}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Outfit::new(outfit_id, ids, Some(label)).map_err(|e| e.to_string())
}

/// Writes a split in the layout read by [`load_polyvore`]. Outfit items are
/// listed in sorted order with 1-based indices.
pub fn write_polyvore(split: &DatasetSplit, root: &Path) -> Result<()> {
    let mut fine_ids: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for item in split.catalog.items() {
        let next = fine_ids.len() + 1;
        fine_ids
            .entry(&item.fine_category)
            .or_insert((next, &item.high_category));
    }
    let mut csv = String::new();
    let mut rows: Vec<(usize, &str, &str)> = fine_ids.iter().map(|(f, (id, h))| (*id, *f, *h)).collect();
    rows.sort();
    for (id, fine, high) in rows {
        csv.push_str(&format!("{id},{fine},{high}\n"));
    }
    write_bytes(&root.join(CATEGORIES), csv.as_bytes())?;

    let mut meta = BTreeMap::new();
    for item in split.catalog.items() {
        let mut entry = MetadataEntry {
            description: item.description.clone(),
            category_id: serde_json::Value::String(fine_ids[item.fine_category.as_str()].0.to_string()),
            semantic_category: Some(item.high_category.clone()),
            style: item.style,
            ..MetadataEntry::default()
        };
        match &item.image {
            ImagePayload::Features(f) => entry.features = Some(f.clone()),
            ImagePayload::Pixels(p) => entry.pixels = Some(p.clone()),
            ImagePayload::File(p) => entry.image_path = Some(p.strip_prefix(root).unwrap_or(p).to_path_buf()),
        }
        meta.insert(item.item_id.as_str(), entry);
    }
    write_json(&root.join(METADATA), &meta)?;

    let dir = root.join(variant(split.disjoint));
    for name in SplitName::ALL {
        let sets: Vec<SetEntry> = split
            .outfits(name)
            .iter()
            .map(|o| SetEntry {
                set_id: o.outfit_id.clone(),
                items: o
                    .items
                    .iter()
                    .enumerate()
                    .map(|(i, id)| SetItem {
                        item_id: id.clone(),
                        index: i + 1,
                    })
                    .collect(),
            })
            .collect();
        write_json(&dir.join(format!("{name}.json")), &sets)?;
    }
    for (name, questions) in &split.fitb {
        let entries: Vec<FitbEntry> = questions
            .iter()
            .map(|q| {
                let mut full = q.partial.clone();
                let answer = &q.candidates[q.answer_index];
                full.push(answer.clone());
                full.sort();
                let set_ref = |id: &String| {
                    let pos = full.iter().position(|x| x == id).expect("member of outfit");
                    format!("{}_{}", q.outfit_id, pos + 1)
                };
                FitbEntry {
                    question: q.partial.iter().map(set_ref).collect(),
                    answers: q
                        .candidates
                        .iter()
                        .map(|c| if c == answer { set_ref(c) } else { c.clone() })
                        .collect(),
                    blank_position: q.blank_position,
                }
            })
            .collect();
        write_json(&dir.join(format!("fill_in_blank_{name}.json")), &entries)?;
    }
    for (name, outfits) in &split.compatibility {
        let mut text = String::new();
        for o in outfits {
            text.push_str(&o.label.unwrap_or(0).to_string());
            for id in &o.items {
                text.push(' ');
                text.push_str(id);
            }
            text.push('\n');
        }
        write_bytes(&dir.join(format!("compatibility_{name}.txt")), text.as_bytes())?;
    }
    Ok(())
}
