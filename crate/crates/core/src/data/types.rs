use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Meta = BTreeMap<String, serde_json::Value>;

/// One (image, query, response) triplet with precomputed embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub id: String,
    pub image_emb: Vec<f64>,
    pub text_q: String,
    pub text_r: String,
    pub q_emb: Vec<f64>,
    pub r_emb: Vec<f64>,
    pub qr_emb: Vec<f64>,
    #[serde(default)]
    pub meta: Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySample {
    pub id: String,
    pub image_emb: Vec<f64>,
    pub text_q: String,
    pub q_emb: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_r: Option<String>,
    #[serde(default)]
    pub meta: Meta,
}

impl QuerySample {
    pub fn has_ground_truth(&self) -> bool {
        self.ground_truth_r.is_some()
    }
}

impl Demonstration {
    /// The demonstration seen as a query with its response as ground truth.
    pub fn as_query(&self) -> QuerySample {
        QuerySample {
            id: self.id.clone(),
            image_emb: self.image_emb.clone(),
            text_q: self.text_q.clone(),
            q_emb: self.q_emb.clone(),
            ground_truth_r: Some(self.text_r.clone()),
            meta: self.meta.clone(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        let all = [&self.image_emb, &self.q_emb, &self.r_emb, &self.qr_emb];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Validation(format!("demonstration `{}` has a non-finite embedding", self.id)));
        }
        Ok(())
    }
}

/// Demonstrations in file order with an id index. Vocabulary position of a
/// demo in the decoder head is its position here.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoLibrary {
    demos: Vec<Demonstration>,
    index: HashMap<String, usize>,
    d_img: usize,
    d_txt: usize,
    /// Library-level metadata from the file header (instruction text,
    /// simplified-instruction embedding).
    pub meta: Meta,
}

impl DemoLibrary {
    pub fn new(demos: Vec<Demonstration>, meta: Meta) -> Result<Self> {
        let mut lib = Self { demos: Vec::new(), index: HashMap::new(), d_img: 0, d_txt: 0, meta };
        for d in demos {
            lib.push(d)?;
        }
        Ok(lib)
    }

    pub fn push(&mut self, d: Demonstration) -> Result<()> {
        d.check_finite()?;
        if self.index.contains_key(&d.id) {
            return Err(Error::Validation(format!("duplicate id `{}`", d.id)));
        }
        if self.demos.is_empty() {
            self.d_img = d.image_emb.len();
            self.d_txt = d.q_emb.len();
            if self.d_img == 0 || self.d_txt == 0 {
                return Err(Error::Validation(format!("demonstration `{}` has an empty embedding", d.id)));
            }
        }
        if d.image_emb.len() != self.d_img {
            return Err(Error::Dimension(format!(
                "`{}`: image_emb has {} dims, library uses {}",
                d.id,
                d.image_emb.len(),
                self.d_img
            )));
        }
        for (name, v) in [("q_emb", &d.q_emb), ("r_emb", &d.r_emb), ("qr_emb", &d.qr_emb)] {
            if v.len() != self.d_txt {
                return Err(Error::Dimension(format!(
                    "`{}`: {name} has {} dims, library uses {}",
                    d.id,
                    v.len(),
                    self.d_txt
                )));
            }
        }
        self.index.insert(d.id.clone(), self.demos.len());
        self.demos.push(d);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_img, self.d_txt)
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.index.get(id).map(|&i| &self.demos[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn resolve(&self, id: &str) -> Result<&Demonstration> {
        self.get(id).ok_or_else(|| Error::Reference(id.to_string()))
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.demos.is_empty() {
            Err(Error::EmptyLibrary)
        } else {
            Ok(())
        }
    }

    /// Subset library keeping `keep` positions, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        Self::new(keep.iter().map(|&i| self.demos[i].clone()).collect(), self.meta.clone())
    }

    /// Copy with every demonstration passed through `f`.
    pub fn map_demos(&self, mut f: impl FnMut(&Demonstration) -> Demonstration) -> Result<Self> {
        Self::new(self.demos.iter().map(&mut f).collect(), self.meta.clone())
    }

    pub fn instruction(&self) -> &str {
        self.meta.get("instruction").and_then(|v| v.as_str()).unwrap_or("")
    }

    /// Simplified-instruction embedding carried in the header metadata.
    pub fn inst_emb(&self) -> Option<Vec<f64>> {
        let arr = self.meta.get("inst_emb")?.as_array()?;
        arr.iter().map(|v| v.as_f64()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IclSequence {
    pub instruction: String,
    pub icd_ids: Vec<String>,
    pub query: QuerySample,
}

impl IclSequence {
    pub fn shot(&self) -> usize {
        self.icd_ids.len()
    }

    pub fn validate(&self, library: &DemoLibrary) -> Result<()> {
        let mut seen = HashSet::new();
        for id in &self.icd_ids {
            library.resolve(id)?;
            if !seen.insert(id) {
                return Err(Error::Validation(format!("ICD `{id}` repeats in the sequence")));
            }
        }
        Ok(())
    }

    pub fn icds<'a>(&self, library: &'a DemoLibrary) -> Result<Vec<&'a Demonstration>> {
        self.icd_ids.iter().map(|id| library.resolve(id)).collect()
    }
}

/// Reorder the ICDs: position k of the result holds ICD `perm[k]`.
pub fn permute_sequence(seq: &IclSequence, perm: &[usize]) -> Result<IclSequence> {
    let n = seq.icd_ids.len();
    if perm.len() != n {
        return Err(Error::Validation(format!("permutation of length {} for {n} ICDs", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Validation(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(IclSequence {
        instruction: seq.instruction.clone(),
        icd_ids: perm.iter().map(|&p| seq.icd_ids[p].clone()).collect(),
        query: seq.query.clone(),
    })
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SequenceDataset {
    pub shot: usize,
    pub sequences: Vec<IclSequence>,
}

impl SequenceDataset {
    pub fn new(shot: usize, sequences: Vec<IclSequence>) -> Result<Self> {
        let ds = Self { shot, sequences };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.shot() != self.shot {
                return Err(Error::Validation(format!(
                    "sequence {i} has {} ICDs, dataset shot is {}",
                    s.shot(),
                    self.shot
                )));
            }
            let distinct: HashSet<_> = s.icd_ids.iter().collect();
            if distinct.len() != s.icd_ids.len() {
                return Err(Error::Validation(format!("sequence {i} repeats an ICD")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}
