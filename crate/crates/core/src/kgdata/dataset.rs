use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{KnowledgeGraph, Triple, Vocab};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numkit::{uniform, Tensor};

pub const PATH_GRAPH: &str = "path_graph";
pub const TRAIN_TASKS: &str = "train_tasks.json";
pub const DEV_TASKS: &str = "dev_tasks.json";
pub const TEST_TASKS: &str = "test_tasks.json";
pub const CANDIDATES: &str = "rel2candidates.json";
pub const ENT_IDS: &str = "ent2ids.json";
pub const REL_IDS: &str = "relation2ids.json";
pub const ENT_VEC: &str = "entity2vec.TransE";
pub const REL_VEC: &str = "relation2vec.TransE";
pub const GROUPS: &str = "groups.json";

pub const REQUIRED_FILES: [&str; 7] = [PATH_GRAPH, TRAIN_TASKS, DEV_TASKS, TEST_TASKS, CANDIDATES, ENT_IDS, REL_IDS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_TASKS,
            Split::Valid => DEV_TASKS,
            Split::Test => TEST_TASKS,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}, expected train, valid or test"))),
        }
    }
}

/// Counts in the layout of the usual dataset statistics table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub relations: usize,
    pub entities: usize,
    pub triples: usize,
    pub tasks: usize,
    pub train_tasks: usize,
    pub valid_tasks: usize,
    pub test_tasks: usize,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "relations={} entities={} triples={} tasks={}",
            self.relations, self.entities, self.triples, self.tasks
        )
    }
}

/// Background graph, few-shot tasks and their candidate lists.
///
/// Immutable once built. Task triples are kept sorted, so "the first K
/// triples" of a relation is well defined.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub graph: KnowledgeGraph,
    pub tasks: BTreeMap<usize, Vec<Triple>>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub candidates: BTreeMap<usize, Vec<usize>>,
    /// Pretrained rows, one per entity / relation id.
    pub entity_init: Option<Tensor>,
    pub relation_init: Option<Tensor>,
    /// Ground-truth correlation group of each task relation, synthetic data only.
    pub groups: Option<BTreeMap<usize, usize>>,
    known: HashSet<Triple>,
}

impl DatasetBundle {
    /// Checks split disjointness and candidate coverage, then indexes every
    /// known triple. True tails missing from a candidate list are appended to it.
    pub fn new(
        graph: KnowledgeGraph,
        mut tasks: BTreeMap<usize, Vec<Triple>>,
        splits: [Vec<usize>; 3],
        mut candidates: BTreeMap<usize, Vec<usize>>,
    ) -> Result<Self> {
        let [train, valid, test] = splits;
        let mut seen = HashSet::new();
        for &r in train.iter().chain(&valid).chain(&test) {
            if !seen.insert(r) {
                return Err(Error::Validation(format!(
                    "relation {} appears in more than one split",
                    graph.relations.name(r)
                )));
            }
            if !tasks.contains_key(&r) {
                return Err(Error::Validation(format!("split relation {} has no task triples", graph.relations.name(r))));
            }
        }
        let mut known: HashSet<Triple> = graph.triples().iter().copied().collect();
        for (&r, triples) in tasks.iter_mut() {
            triples.sort_unstable();
            triples.dedup();
            if let Some(bad) = triples.iter().find(|t| t.relation != r) {
                return Err(Error::Validation(format!(
                    "task {} contains a triple of relation {}",
                    graph.relations.name(r),
                    graph.relations.name(bad.relation)
                )));
            }
            let cands = candidates.get_mut(&r).ok_or_else(|| Error::Format {
                file: CANDIDATES.into(),
                detail: format!("no candidate list for task {}", graph.relations.name(r)),
            })?;
            let mut present: HashSet<usize> = cands.iter().copied().collect();
            for t in triples.iter() {
                if present.insert(t.tail) {
                    cands.push(t.tail);
                }
            }
            known.extend(triples.iter().copied());
        }
        Ok(DatasetBundle {
            graph,
            tasks,
            train,
            valid,
            test,
            candidates,
            entity_init: None,
            relation_init: None,
            groups: None,
            known,
        })
    }

    pub fn is_known(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.known.contains(&Triple::new(head, relation, tail))
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn task(&self, relation: usize) -> &[Triple] {
        self.tasks.get(&relation).map_or(&[], Vec::as_slice)
    }

    pub fn candidates(&self, relation: usize) -> &[usize] {
        self.candidates.get(&relation).map_or(&[], Vec::as_slice)
    }

    pub fn num_entities(&self) -> usize {
        self.graph.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.graph.num_relations()
    }

    pub fn stats(&self) -> DatasetStats {
        let task_triples: usize = self.tasks.values().map(Vec::len).sum();
        DatasetStats {
            relations: self.num_relations(),
            entities: self.num_entities(),
            triples: self.graph.triples().len() + task_triples,
            tasks: self.train.len() + self.valid.len() + self.test.len(),
            train_tasks: self.train.len(),
            valid_tasks: self.valid.len(),
            test_tasks: self.test.len(),
        }
    }
}

fn read(root: &Path, name: &str) -> Result<String> {
    let path = root.join(name);
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

fn json<T: serde::de::DeserializeOwned>(root: &Path, name: &str) -> Result<T> {
    serde_json::from_str(&read(root, name)?).map_err(|e| Error::Format { file: name.into(), detail: e.to_string() })
}

fn id_vocab(map: BTreeMap<String, i64>, file: &str) -> Result<Vocab> {
    let n = map.len();
    let mut by_id: Vec<Option<String>> = vec![None; n];
    for (name, id) in map {
        let slot = usize::try_from(id).ok().and_then(|i| by_id.get_mut(i)).ok_or_else(|| Error::Format {
            file: file.into(),
            detail: format!("id {id} of {name:?} is outside 0..{n}"),
        })?;
        if slot.is_some() {
            return Err(Error::Format { file: file.into(), detail: format!("id {id} assigned twice") });
        }
        *slot = Some(name);
    }
    Ok(by_id.into_iter().map(|n| n.expect("ids are a permutation")).collect())
}

fn read_matrix(root: &Path, name: &str, rows: usize, dim: usize) -> Result<Option<Tensor>> {
    let path = root.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = read(root, name)?;
    let mut data = Vec::with_capacity(rows * dim);
    let mut n = 0;
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format { file: name.into(), detail: format!("line {}: {e}", lineno + 1) })?;
        if row.len() != dim {
            return Err(Error::Format {
                file: name.into(),
                detail: format!("line {} has width {}, expected dim {dim}", lineno + 1, row.len()),
            });
        }
        data.extend(row);
        n += 1;
    }
    if n != rows {
        return Err(Error::Format { file: name.into(), detail: format!("{n} rows for {rows} ids") });
    }
    Ok(Some(Tensor::new(vec![rows, dim], data)?))
}

/// Appends rows for ids added after the pretrained file was written.
fn extend_rows(t: Tensor, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let have = t.rows();
    if have == rows {
        return t;
    }
    let mut data = t.into_data();
    data.extend(uniform(rng, &[rows - have, dim], 6.0 / (dim as f64).sqrt()).into_data());
    Tensor::new(vec![rows, dim], data).expect("row count matches")
}

/// Reads a dataset directory in the GMatching layout.
pub fn load_dataset(root: &Path, config: &TrainConfig) -> Result<DatasetBundle> {
    let missing: Vec<&str> = REQUIRED_FILES.iter().copied().filter(|f| !root.join(f).is_file()).collect();
    if let Some(first) = missing.first() {
        return Err(Error::Ingest { path: root.join(first), expected: REQUIRED_FILES.to_vec() });
    }
    let mut entities = id_vocab(json(root, ENT_IDS)?, ENT_IDS)?;
    let mut relations = id_vocab(json(root, REL_IDS)?, REL_IDS)?;
    let (pre_ents, pre_rels) = (entities.len(), relations.len());

    let mut background = Vec::new();
    for (lineno, line) in read(root, PATH_GRAPH)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [h, r, t] = parts[..] else {
            return Err(Error::Format {
                file: PATH_GRAPH.into(),
                detail: format!("line {} has {} fields, expected 3", lineno + 1, parts.len()),
            });
        };
        background.push(Triple::new(entities.insert(h), relations.insert(r), entities.insert(t)));
    }

    let mut tasks = BTreeMap::new();
    let mut splits: [Vec<usize>; 3] = Default::default();
    for (slot, split) in [Split::Train, Split::Valid, Split::Test].into_iter().enumerate() {
        let file = split.file_name();
        let raw: BTreeMap<String, Vec<[String; 3]>> = json(root, file)?;
        for (rel, triples) in raw {
            let r = relations.insert(&rel);
            let mut list = Vec::with_capacity(triples.len());
            for [h, tr, t] in triples {
                if tr != rel {
                    return Err(Error::Format { file: file.into(), detail: format!("triple of {tr:?} listed under {rel:?}") });
                }
                list.push(Triple::new(entities.insert(&h), r, entities.insert(&t)));
            }
            if tasks.insert(r, list).is_some() {
                return Err(Error::Validation(format!("relation {rel} appears in more than one split")));
            }
            splits[slot].push(r);
        }
    }

    let raw_cands: BTreeMap<String, Vec<String>> = json(root, CANDIDATES)?;
    let mut candidates = BTreeMap::new();
    for (rel, names) in raw_cands {
        let Some(r) = relations.id(&rel) else { continue };
        let mut seen = HashSet::new();
        let ids: Vec<usize> = names.iter().map(|n| entities.insert(n)).filter(|&e| seen.insert(e)).collect();
        candidates.insert(r, ids);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let entity_init = read_matrix(root, ENT_VEC, pre_ents, dim)?.map(|t| extend_rows(t, entities.len(), dim, &mut rng));
    let relation_init = read_matrix(root, REL_VEC, pre_rels, dim)?.map(|t| extend_rows(t, relations.len(), dim, &mut rng));

    let groups = if root.join(GROUPS).is_file() {
        let raw: BTreeMap<String, usize> = json(root, GROUPS)?;
        let mut g = BTreeMap::new();
        for (rel, group) in raw {
            let r = relations.id(&rel).ok_or_else(|| Error::Format {
                file: GROUPS.into(),
                detail: format!("unknown relation {rel:?}"),
            })?;
            g.insert(r, group);
        }
        Some(g)
    } else {
        None
    };

    let graph = KnowledgeGraph::new(entities, relations, background);
    let mut bundle = DatasetBundle::new(graph, tasks, splits, candidates)?;
    bundle.entity_init = entity_init;
    bundle.relation_init = relation_init;
    bundle.groups = groups;
    log::info!("loaded {}: {}", root.display(), bundle.stats());
    Ok(bundle)
}

fn write(root: &Path, name: &str, contents: &str) -> Result<()> {
    let path = root.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(root: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain maps serialize");
    write(root, name, &text)
}

fn write_matrix(root: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    write(root, name, &out)
}

/// Writes `bundle` in the same layout [`load_dataset`] reads.
pub fn write_bundle(bundle: &DatasetBundle, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let g = &bundle.graph;
    let (ents, rels) = (&g.entities, &g.relations);

    let mut path_graph = String::new();
    for t in g.triples() {
        writeln!(path_graph, "{}\t{}\t{}", ents.name(t.head), rels.name(t.relation), ents.name(t.tail)).unwrap();
    }
    write(root, PATH_GRAPH, &path_graph)?;

    for split in [Split::Train, Split::Valid, Split::Test] {
        let map: BTreeMap<&str, Vec<[&str; 3]>> = bundle
            .split(split)
            .iter()
            .map(|&r| {
                let triples = bundle
                    .task(r)
                    .iter()
                    .map(|t| [ents.name(t.head), rels.name(r), ents.name(t.tail)])
                    .collect();
                (rels.name(r), triples)
            })
            .collect();
        write_json(root, split.file_name(), &map)?;
    }

    let cands: BTreeMap<&str, Vec<&str>> = bundle
        .candidates
        .iter()
        .map(|(&r, c)| (rels.name(r), c.iter().map(|&e| ents.name(e)).collect()))
        .collect();
    write_json(root, CANDIDATES, &cands)?;
    let ent_ids: BTreeMap<&str, usize> = ents.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    write_json(root, ENT_IDS, &ent_ids)?;
    let rel_ids: BTreeMap<&str, usize> = rels.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    write_json(root, REL_IDS, &rel_ids)?;

    if let Some(t) = &bundle.entity_init {
        write_matrix(root, ENT_VEC, t)?;
    }
    if let Some(t) = &bundle.relation_init {
        write_matrix(root, REL_VEC, t)?;
    }
    if let Some(groups) = &bundle.groups {
        let map: BTreeMap<&str, usize> = groups.iter().map(|(&r, &gid)| (rels.name(r), gid)).collect();
        write_json(root, GROUPS, &map)?;
    }
    Ok(())
}
