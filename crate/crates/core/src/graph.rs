//! Triplet datasets, vocabularies and train-edge adjacency.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;
/// Index into the train triplet list.
pub type EdgeId = usize;

/// Degrees strictly below this fall in the limited-information bucket.
pub const DEFAULT_LIS_THRESHOLD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triplet {
            head,
            relation,
            tail,
        }
    }
}

/// A triplet to score, plus the train edge hidden from its context.
///
/// Train queries hide their own edge; evaluation queries hide the matching
/// train fact if one exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Query {
    pub triplet: Triplet,
    pub exclude: Option<EdgeId>,
}

impl Query {
    pub fn train(g: &KnowledgeGraph, e: EdgeId) -> Self {
        Query {
            triplet: g.edge(e),
            exclude: Some(e),
        }
    }

    pub fn eval(g: &KnowledgeGraph, triplet: Triplet) -> Self {
        Query {
            triplet,
            exclude: g.train_edge_of(&triplet),
        }
    }
}

/// Orientation of an edge as seen from one of its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// The endpoint is the edge's head.
    Forward,
    /// The endpoint is the edge's tail.
    Backward,
}

/// Bijective name <-> id map with ids in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Bucket {
    Lis,
    Ris,
}

impl Bucket {
    pub fn for_degree(degree: usize, lis_threshold: usize) -> Self {
        if degree < lis_threshold {
            Bucket::Lis
        } else {
            Bucket::Ris
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Lis => "LIS",
            Bucket::Ris => "RIS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeRecord {
    pub entity: EntityId,
    pub in_degree: usize,
    pub out_degree: usize,
    pub degree: usize,
    pub bucket: Bucket,
}

/// Immutable triplet store. Adjacency is built over train edges only.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    train: Vec<Triplet>,
    valid: Vec<Triplet>,
    test: Vec<Triplet>,
    incident: Vec<Vec<(EdgeId, Direction)>>,
    train_index: HashMap<Triplet, EdgeId>,
}

impl KnowledgeGraph {
    /// Builds a graph from already-interned vocabularies and id triplets.
    pub fn new(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triplet>,
        valid: Vec<Triplet>,
        test: Vec<Triplet>,
    ) -> Result<Self> {
        for t in train.iter().chain(&valid).chain(&test) {
            for v in [t.head, t.tail] {
                if v >= entities.len() {
                    return Err(Error::UnknownEntityId(v));
                }
            }
            if t.relation >= relations.len() {
                return Err(Error::UnknownRelationId(t.relation));
            }
        }
        let mut incident = vec![Vec::new(); entities.len()];
        let mut train_index = HashMap::with_capacity(train.len());
        for (e, t) in train.iter().enumerate() {
            incident[t.head].push((e, Direction::Forward));
            incident[t.tail].push((e, Direction::Backward));
            train_index.entry(*t).or_insert(e);
        }
        Ok(KnowledgeGraph {
            entities,
            relations,
            train,
            valid,
            test,
            incident,
            train_index,
        })
    }

    /// Graph over `num_entities` entities named `e0, e1, ...` and relations
    /// named `r0, r1, ...`. Convenient for generated graphs.
    pub fn from_ids(
        num_entities: usize,
        num_relations: usize,
        train: Vec<Triplet>,
        valid: Vec<Triplet>,
        test: Vec<Triplet>,
    ) -> Result<Self> {
        let mut entities = Vocab::new();
        for i in 0..num_entities {
            entities.intern(&format!("e{i}"));
        }
        let mut relations = Vocab::new();
        for i in 0..num_relations {
            relations.intern(&format!("r{i}"));
        }
        Self::new(entities, relations, train, valid, test)
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn train(&self) -> &[Triplet] {
        &self.train
    }

    pub fn valid(&self) -> &[Triplet] {
        &self.valid
    }

    pub fn test(&self) -> &[Triplet] {
        &self.test
    }

    pub fn edge(&self, e: EdgeId) -> Triplet {
        self.train[e]
    }

    /// Edge id of the first train copy of `t`, if `t` is a train fact.
    pub fn train_edge_of(&self, t: &Triplet) -> Option<EdgeId> {
        self.train_index.get(t).copied()
    }

    /// Unchecked adjacency for hot loops; `v` must be a valid id.
    pub fn incident(&self, v: EntityId) -> &[(EdgeId, Direction)] {
        &self.incident[v]
    }

    fn check_entity(&self, v: EntityId) -> Result<()> {
        if v < self.num_entities() {
            Ok(())
        } else {
            Err(Error::UnknownEntityId(v))
        }
    }

    /// Train edges touching `v` in ascending edge-id order, minus `exclude`.
    /// A self-loop shows up twice, once per direction.
    pub fn incident_edges(
        &self,
        v: EntityId,
        exclude: Option<EdgeId>,
    ) -> Result<Vec<(EdgeId, Direction)>> {
        self.check_entity(v)?;
        Ok(self.incident[v]
            .iter()
            .copied()
            .filter(|(e, _)| Some(*e) != exclude)
            .collect())
    }

    pub fn entity_degree(&self, v: EntityId) -> Result<DegreeRecord> {
        self.entity_degree_with(v, DEFAULT_LIS_THRESHOLD)
    }

    pub fn entity_degree_with(&self, v: EntityId, lis_threshold: usize) -> Result<DegreeRecord> {
        self.check_entity(v)?;
        let (mut in_degree, mut out_degree) = (0, 0);
        for (_, dir) in &self.incident[v] {
            match dir {
                Direction::Forward => out_degree += 1,
                Direction::Backward => in_degree += 1,
            }
        }
        let degree = in_degree + out_degree;
        Ok(DegreeRecord {
            entity: v,
            in_degree,
            out_degree,
            degree,
            bucket: Bucket::for_degree(degree, lis_threshold),
        })
    }

    /// Train degree of every entity, indexed by entity id.
    pub fn degrees(&self) -> Vec<usize> {
        self.incident.iter().map(Vec::len).collect()
    }

    pub fn degree_stats(&self, lis_threshold: usize) -> DegreeStats {
        DegreeStats::from_degrees(&self.degrees(), lis_threshold)
    }
}

/// Summary of the train-degree distribution over all vocabulary entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub entities: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub lis_threshold: usize,
    pub lis_count: usize,
    pub lis_fraction: f64,
}

impl DegreeStats {
    pub fn from_degrees(degrees: &[usize], lis_threshold: usize) -> Self {
        let n = degrees.len();
        let nf = n.max(1) as f64;
        let mean = degrees.iter().sum::<usize>() as f64 / nf;
        let variance = degrees
            .iter()
            .map(|&d| (d as f64 - mean).powi(2))
            .sum::<f64>()
            / nf;
        let lis_count = degrees.iter().filter(|&&d| d < lis_threshold).count();
        DegreeStats {
            entities: n,
            mean,
            variance,
            lis_threshold,
            lis_count,
            lis_fraction: lis_count as f64 / nf,
        }
    }
}

type RawTriplet = (String, String, String);

fn read_triplets(path: &Path) -> Result<Vec<RawTriplet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push((
            fields[0].to_owned(),
            fields[1].to_owned(),
            fields[2].to_owned(),
        ));
    }
    Ok(out)
}

/// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`.
///
/// Vocabularies cover the union of all three splits, interned in file order
/// (train, valid, test; head, relation, tail within a line).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let dir = dir.as_ref();
    let train_path = dir.join("train.txt");
    let raw_train = read_triplets(&train_path)?;
    if raw_train.is_empty() {
        return Err(Error::EmptyTrain(train_path));
    }
    let raw_valid = read_triplets(&dir.join("valid.txt"))?;
    let raw_test = read_triplets(&dir.join("test.txt"))?;

    let mut entities = Vocab::new();
    let mut relations = Vocab::new();
    let mut intern = |raw: Vec<RawTriplet>| -> Vec<Triplet> {
        raw.into_iter()
            .map(|(h, r, t)| {
                let head = entities.intern(&h);
                let relation = relations.intern(&r);
                let tail = entities.intern(&t);
                Triplet::new(head, relation, tail)
            })
            .collect()
    };
    let train = intern(raw_train);
    let valid = intern(raw_valid);
    let test = intern(raw_test);
    KnowledgeGraph::new(entities, relations, train, valid, test)
}

/// Writes one split in the tab-separated triplet format.
pub fn write_triplets(
    path: impl AsRef<Path>,
    g: &KnowledgeGraph,
    triplets: &[Triplet],
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for t in triplets {
        text.push_str(g.entities.name(t.head).unwrap_or_default());
        text.push('\t');
        text.push_str(g.relations.name(t.relation).unwrap_or_default());
        text.push('\t');
        text.push_str(g.entities.name(t.tail).unwrap_or_default());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `train.txt`, `valid.txt` and `test.txt` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, g: &KnowledgeGraph) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_triplets(dir.join("train.txt"), g, g.train())?;
    write_triplets(dir.join("valid.txt"), g, g.valid())?;
    write_triplets(dir.join("test.txt"), g, g.test())
}
