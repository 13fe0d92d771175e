//! Domain records and their line-delimited JSON files.
//!
//! A dataset directory holds one file per record kind. Each line is one JSON
//! object; unknown fields are ignored on load.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::{DeserializeOwned, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const PRODUCTS_FILE: &str = "products.jsonl";
pub const ENGAGEMENT_FILE: &str = "engagement.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const PT_PREDICTIONS_FILE: &str = "pt_predictions.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub traffic_weight: f64,
}

/// Ordered attribute map. Order drives sentinel-token concatenation, and
/// duplicate names are rejected on load.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Attributes(IndexMap<String, String>);

impl Attributes {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an attribute; returns false if the name already exists.
    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) -> bool {
        let name = name.into();
        if self.0.contains_key(&name) {
            return false;
        }
        self.0.insert(name, value.into());
        true
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Attributes {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut attrs = Attributes::new();
        for (k, v) in iter {
            attrs.insert(k, v);
        }
        attrs
    }
}

impl<'de> Deserialize<'de> for Attributes {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct AttrVisitor;

        impl<'de> Visitor<'de> for AttrVisitor {
            type Value = Attributes;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of attribute name to string value")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Attributes, A::Error> {
                let mut attrs = Attributes::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    if attrs.0.contains_key(&k) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate attribute name `{k}`"
                        )));
                    }
                    attrs.0.insert(k, v);
                }
                Ok(attrs)
            }
        }

        deserializer.deserialize_map(AttrVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub attributes: Attributes,
    pub product_type: String,
}

/// Raw per-(query, product) engagement counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub query_id: String,
    pub product_id: String,
    pub impressions: u64,
    pub clicks: u64,
    pub atcs: u64,
    pub orders: u64,
}

/// Three-point human relevance scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelevanceClass {
    Exact,
    Substitute,
    Irrelevant,
}

impl RelevanceClass {
    pub const ALL: [RelevanceClass; 3] = [
        RelevanceClass::Exact,
        RelevanceClass::Substitute,
        RelevanceClass::Irrelevant,
    ];

    pub fn index(self) -> usize {
        match self {
            RelevanceClass::Exact => 0,
            RelevanceClass::Substitute => 1,
            RelevanceClass::Irrelevant => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl fmt::Display for RelevanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RelevanceClass::Exact => "Exact",
            RelevanceClass::Substitute => "Substitute",
            RelevanceClass::Irrelevant => "Irrelevant",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub query_id: String,
    pub product_id: String,
    pub klass: RelevanceClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtScore {
    pub product_type: String,
    pub score: f64,
}

/// Product-type classifier output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtPrediction {
    pub query_id: String,
    pub entries: Vec<PtScore>,
}

impl PtPrediction {
    pub fn score_of(&self, product_type: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.product_type == product_type)
            .map(|e| e.score)
    }

    /// Highest-scoring product type; ties go to the earlier entry.
    pub fn top(&self) -> Option<&str> {
        let mut best: Option<&PtScore> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.score > b.score) {
                best = Some(e);
            }
        }
        best.map(|e| e.product_type.as_str())
    }
}

/// Per-record invariant check applied on load.
pub trait Record {
    fn validate(&self) -> Result<(), String>;

    /// Identifier that must be unique within a file, if any.
    fn unique_key(&self) -> Option<String> {
        None
    }
}

impl Record for Query {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty query id".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("query `{}` has empty text", self.id));
        }
        if !(self.traffic_weight.is_finite() && self.traffic_weight >= 0.0) {
            return Err(format!("query `{}` has invalid traffic_weight", self.id));
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<String> {
        Some(self.id.clone())
    }
}

impl Record for Product {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty product id".into());
        }
        if self.title.trim().is_empty() {
            return Err(format!("product `{}` has empty title", self.id));
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<String> {
        Some(self.id.clone())
    }
}

impl Record for EngagementRecord {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Record for JudgmentRecord {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Record for PtPrediction {
    fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.score) {
                return Err(format!(
                    "PT score {} for `{}` outside [0, 1]",
                    e.score, e.product_type
                ));
            }
            if !seen.insert(e.product_type.as_str()) {
                return Err(format!("duplicate product type `{}`", e.product_type));
            }
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<String> {
        Some(self.query_id.clone())
    }
}

/// Reads a JSON-lines file. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn load_jsonl<T: DeserializeOwned + Record>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut keys = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        if let Some(key) = rec.unique_key() {
            if !keys.insert(key.clone()) {
                return Err(Error::Validation(format!(
                    "{}:{}: duplicate id `{key}`",
                    path.display(),
                    i + 1
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes records as JSON lines, replacing any existing file.
pub fn save_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Queries and products with id lookups.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub queries: Vec<Query>,
    pub products: Vec<Product>,
    query_index: HashMap<String, usize>,
    product_index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(queries: Vec<Query>, products: Vec<Product>) -> Result<Self> {
        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if query_index.insert(q.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate query id `{}`", q.id)));
            }
        }
        let mut product_index = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            if product_index.insert(p.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate product id `{}`", p.id)));
            }
        }
        Ok(Self {
            queries,
            products,
            query_index,
            product_index,
        })
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    pub fn product(&self, id: &str) -> Option<&Product> {
        self.product_index.get(id).map(|&i| &self.products[i])
    }

    pub fn product_position(&self, id: &str) -> Option<usize> {
        self.product_index.get(id).copied()
    }

    /// Replaces query texts by id (for evaluating corrupted copies).
    pub fn with_query_texts(&self, replacements: &[Query]) -> Result<Catalog> {
        let mut queries = self.queries.clone();
        for r in replacements {
            let i = *self
                .query_index
                .get(&r.id)
                .ok_or_else(|| Error::Reference(format!("query `{}`", r.id)))?;
            queries[i].text = r.text.clone();
        }
        Catalog::new(queries, self.products.clone())
    }
}

/// Loads `queries.jsonl` and `products.jsonl` from a dataset directory.
pub fn load_catalog(dir: impl AsRef<Path>) -> Result<(Vec<Query>, Vec<Product>)> {
    let dir = dir.as_ref();
    let queries = load_jsonl(dir.join(QUERIES_FILE))?;
    let products = load_jsonl(dir.join(PRODUCTS_FILE))?;
    Ok((queries, products))
}

/// The five record files of one dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: Catalog,
    pub engagement: Vec<EngagementRecord>,
    pub judgments: Vec<JudgmentRecord>,
    pub pt_predictions: Vec<PtPrediction>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (queries, products) = load_catalog(dir)?;
        let ds = Dataset {
            catalog: Catalog::new(queries, products)?,
            engagement: load_jsonl(dir.join(ENGAGEMENT_FILE))?,
            judgments: load_jsonl(dir.join(JUDGMENTS_FILE))?,
            pt_predictions: load_jsonl(dir.join(PT_PREDICTIONS_FILE))?,
        };
        ds.check_references()?;
        Ok(ds)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_jsonl(&self.catalog.queries, dir.join(QUERIES_FILE))?;
        save_jsonl(&self.catalog.products, dir.join(PRODUCTS_FILE))?;
        save_jsonl(&self.engagement, dir.join(ENGAGEMENT_FILE))?;
        save_jsonl(&self.judgments, dir.join(JUDGMENTS_FILE))?;
        save_jsonl(&self.pt_predictions, dir.join(PT_PREDICTIONS_FILE))
    }

    /// Every engagement, judgment and PT record must point at known ids.
    pub fn check_references(&self) -> Result<()> {
        let check = |q: &str, p: Option<&str>, what: &str| -> Result<()> {
            if self.catalog.query(q).is_none() {
                return Err(Error::Reference(format!("{what}: query `{q}`")));
            }
            if let Some(p) = p {
                if self.catalog.product(p).is_none() {
                    return Err(Error::Reference(format!("{what}: product `{p}`")));
                }
            }
            Ok(())
        };
        for r in &self.engagement {
            check(&r.query_id, Some(&r.product_id), "engagement")?;
        }
        for r in &self.judgments {
            check(&r.query_id, Some(&r.product_id), "judgment")?;
        }
        for r in &self.pt_predictions {
            check(&r.query_id, None, "pt prediction")?;
        }
        Ok(())
    }

    pub fn pt_prediction_map(&self) -> HashMap<String, PtPrediction> {
        self.pt_predictions
            .iter()
            .map(|p| (p.query_id.clone(), p.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn loads_small_catalog() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            QUERIES_FILE,
            "{\"id\":\"q1\",\"text\":\"red shoes\",\"traffic_weight\":1.5}\n\
             {\"id\":\"q2\",\"text\":\"sofa\",\"traffic_weight\":0.0,\"extra\":1}\n",
        );
        write(
            dir.path(),
            PRODUCTS_FILE,
            "{\"id\":\"p1\",\"title\":\"Red Shoes\",\"attributes\":{\"brand\":\"acme\"},\"product_type\":\"footwear\"}\n\
             {\"id\":\"p2\",\"title\":\"Sofa\",\"product_type\":\"furniture\"}\n\
             \n\
             {\"id\":\"p3\",\"title\":\"Lamp\",\"attributes\":{},\"product_type\":\"lighting\"}\n",
        );
        let (q, p) = load_catalog(dir.path()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].attributes.get("brand"), Some("acme"));
    }

    #[test]
    fn empty_files_give_empty_collections() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), QUERIES_FILE, "");
        write(dir.path(), PRODUCTS_FILE, "");
        let (q, p) = load_catalog(dir.path()).unwrap();
        assert!(q.is_empty() && p.is_empty());
    }

    #[test]
    fn missing_title_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), QUERIES_FILE, "");
        write(
            dir.path(),
            PRODUCTS_FILE,
            "{\"id\":\"p1\",\"title\":\"a\",\"product_type\":\"x\"}\n{\"id\":\"p2\",\"product_type\":\"x\"}\n",
        );
        let err = load_catalog(dir.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn blank_title_and_duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        fs::write(&path, "{\"id\":\"p1\",\"title\":\"  \",\"product_type\":\"x\"}\n").unwrap();
        assert!(matches!(load_jsonl::<Product>(&path), Err(Error::Parse { line: 1, .. })));

        fs::write(
            &path,
            "{\"id\":\"p1\",\"title\":\"a\",\"product_type\":\"x\"}\n{\"id\":\"p1\",\"title\":\"b\",\"product_type\":\"x\"}\n",
        )
        .unwrap();
        assert!(matches!(load_jsonl::<Product>(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_attribute_names_rejected() {
        let line = "{\"id\":\"p1\",\"title\":\"a\",\"attributes\":{\"brand\":\"x\",\"brand\":\"y\"},\"product_type\":\"t\"}";
        assert!(serde_json::from_str::<Product>(line).is_err());
    }

    #[test]
    fn attribute_order_preserved() {
        let line = "{\"id\":\"p1\",\"title\":\"a\",\"attributes\":{\"z\":\"1\",\"a\":\"2\",\"m\":\"3\"},\"product_type\":\"t\"}";
        let p: Product = serde_json::from_str(line).unwrap();
        let names: Vec<_> = p.attributes.iter().map(|(k, _)| k).collect();
        assert_eq!(names, vec!["z", "a", "m"]);
        let back = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Product>(&back).unwrap(), p);
    }

    #[test]
    fn pt_prediction_validation() {
        let bad = PtPrediction {
            query_id: "q".into(),
            entries: vec![PtScore { product_type: "a".into(), score: 1.2 }],
        };
        assert!(bad.validate().is_err());
        let dup = PtPrediction {
            query_id: "q".into(),
            entries: vec![
                PtScore { product_type: "a".into(), score: 0.2 },
                PtScore { product_type: "a".into(), score: 0.3 },
            ],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn save_empty_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        save_jsonl::<EngagementRecord>(&[], &path).unwrap();
        assert!(load_jsonl::<EngagementRecord>(&path).unwrap().is_empty());
    }

    #[test]
    fn save_to_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/e.jsonl");
        let err = save_jsonl::<EngagementRecord>(&[], &path).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("e.jsonl"));
    }

    #[test]
    fn reference_check_flags_unknown_ids() {
        let catalog = Catalog::new(
            vec![Query { id: "q1".into(), text: "x".into(), traffic_weight: 1.0 }],
            vec![Product {
                id: "p1".into(),
                title: "x".into(),
                attributes: Attributes::new(),
                product_type: "t".into(),
            }],
        )
        .unwrap();
        let ds = Dataset {
            catalog,
            engagement: vec![EngagementRecord {
                query_id: "q1".into(),
                product_id: "p9".into(),
                impressions: 1,
                clicks: 0,
                atcs: 0,
                orders: 0,
            }],
            judgments: vec![],
            pt_predictions: vec![],
        };
        assert!(matches!(ds.check_references(), Err(Error::Reference(_))));
    }
}
