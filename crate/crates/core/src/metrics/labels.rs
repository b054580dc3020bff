use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Label table shipped with the crate.
pub const BUILTIN_LABEL_MAPS: &str = include_str!("../../data/label_maps.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vocab {
    Icd10,
    Physionet,
    Edms,
    /// PTB-XL statements, used to collapse predictions onto coarser targets.
    Ptbxl,
}

impl Vocab {
    pub const ALL: [Vocab; 4] = [Vocab::Icd10, Vocab::Physionet, Vocab::Edms, Vocab::Ptbxl];

    pub fn name(self) -> &'static str {
        match self {
            Vocab::Icd10 => "icd10",
            Vocab::Physionet => "physionet",
            Vocab::Edms => "edms",
            Vocab::Ptbxl => "ptbxl",
        }
    }

    fn key(self, code: &str) -> String {
        let upper = code.trim().to_uppercase();
        match self {
            Vocab::Icd10 => upper.chars().filter(|c| *c != '.' && !c.is_whitespace()).collect(),
            _ => upper,
        }
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Vocab {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Vocab::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MetricsError::BadLabelMap(format!("unknown vocabulary `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub code: String,
    pub class: String,
}

/// One named mapping from a source vocabulary to target classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub vocab: Vocab,
    pub name: String,
    pub rules: Vec<LabelRule>,
}

impl LabelMap {
    pub fn new(vocab: Vocab, name: impl Into<String>, rules: Vec<LabelRule>) -> Result<Self, MetricsError> {
        let map = LabelMap { vocab, name: name.into(), rules };
        map.check()?;
        Ok(map)
    }

    /// `vocab.name`, as written in the table header.
    pub fn section(&self) -> String {
        format!("{}.{}", self.vocab, self.name)
    }

    fn check(&self) -> Result<(), MetricsError> {
        let mut seen: BTreeMap<String, &str> = BTreeMap::new();
        for r in &self.rules {
            let key = self.vocab.key(&r.code);
            if key.is_empty() || r.class.trim().is_empty() {
                return Err(MetricsError::BadLabelMap(format!("{}: empty code or class", self.section())));
            }
            if let Some(prev) = seen.insert(key, &r.class) {
                if prev != r.class {
                    return Err(MetricsError::BadLabelMap(format!(
                        "{}: `{}` maps to both {prev} and {}",
                        self.section(),
                        r.code,
                        r.class
                    )));
                }
            }
        }
        // an output class that is also a source code must map to itself
        for class in self.classes() {
            if let Some(other) = self.rule_for(class) {
                if other != class {
                    return Err(MetricsError::BadLabelMap(format!(
                        "{}: class {class} is also a code mapping to {other}",
                        self.section()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.rules.iter().map(|r| r.class.as_str()).collect()
    }

    fn rule_for(&self, code: &str) -> Option<&str> {
        let key = self.vocab.key(code);
        let hit = |r: &&LabelRule| {
            let rk = self.vocab.key(&r.code);
            match self.vocab {
                Vocab::Icd10 => key.starts_with(&rk),
                _ => key == rk,
            }
        };
        self.rules
            .iter()
            .filter(hit)
            .max_by_key(|r| self.vocab.key(&r.code).len())
            .map(|r| r.class.as_str())
    }

    /// Class of one code: itself when it already is a target class, else the most
    /// specific matching rule.
    pub fn map_code(&self, code: &str) -> Option<&str> {
        if let Some(c) = self.classes().into_iter().find(|c| *c == code.trim()) {
            return Some(c);
        }
        self.rule_for(code)
    }

    pub fn map_labels<S: AsRef<str>>(&self, codes: &[S]) -> BTreeSet<String> {
        map_with(&[self], codes)
    }
}

fn map_with<S: AsRef<str>>(maps: &[&LabelMap], codes: &[S]) -> BTreeSet<String> {
    let outputs: BTreeSet<&str> = maps.iter().flat_map(|m| m.classes()).collect();
    let mut out = BTreeSet::new();
    for code in codes {
        let code = code.as_ref().trim();
        if outputs.contains(code) {
            out.insert(code.to_string());
            continue;
        }
        out.extend(maps.iter().filter_map(|m| m.rule_for(code)).map(str::to_string));
    }
    out
}

/// All maps of a label table.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMapSet {
    pub maps: Vec<LabelMap>,
}

impl LabelMapSet {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LABEL_MAPS).expect("shipped label table parses")
    }

    /// Reads `[vocab.name]` sections of `vocab,code,class` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut maps: Vec<LabelMap> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| MetricsError::BadLabelMap(format!("line {}: {msg}", i + 1));
            if let Some(header) = line.strip_prefix('[') {
                let header = header.strip_suffix(']').ok_or_else(|| at("unterminated section".into()))?;
                let (vocab, name) = header.split_once('.').ok_or_else(|| at(format!("section `{header}` lacks a name")))?;
                let vocab: Vocab = vocab.parse().map_err(|e: MetricsError| at(e.to_string()))?;
                if maps.iter().any(|m| m.vocab == vocab && m.name == name) {
                    return Err(at(format!("duplicate section `{header}`")));
                }
                maps.push(LabelMap { vocab, name: name.trim().to_string(), rules: Vec::new() });
                continue;
            }
            let map = maps.last_mut().ok_or_else(|| at("rule before any section".into()))?;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [vocab, code, class] = fields[..] else {
                return Err(at(format!("expected vocab,code,class, got `{line}`")));
            };
            if vocab.parse::<Vocab>().map_err(|e| at(e.to_string()))? != map.vocab {
                return Err(at(format!("rule vocabulary {vocab} inside section {}", map.section())));
            }
            map.rules.push(LabelRule { code: code.to_string(), class: class.to_string() });
        }
        for m in &maps {
            m.check()?;
        }
        Ok(LabelMapSet { maps })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MetricsError::BadLabelMap(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str) -> Option<&LabelMap> {
        self.maps.iter().find(|m| m.section().eq_ignore_ascii_case(section.trim()))
    }

    /// Maps chosen by a vocabulary name (all of its sections) or a `vocab.name` section.
    pub fn select(&self, selector: &str) -> Result<Vec<&LabelMap>, MetricsError> {
        if let Some(m) = self.get(selector) {
            return Ok(vec![m]);
        }
        let vocab: Vocab = selector.parse()?;
        let maps: Vec<&LabelMap> = self.maps.iter().filter(|m| m.vocab == vocab).collect();
        if maps.is_empty() {
            return Err(MetricsError::BadLabelMap(format!("no maps for `{selector}`")));
        }
        Ok(maps)
    }

    /// Union of the classes every selected map assigns to `codes`.
    pub fn map_labels<S: AsRef<str>>(&self, selector: &str, codes: &[S]) -> Result<BTreeSet<String>, MetricsError> {
        Ok(map_with(&self.select(selector)?, codes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn builtin_loads() {
        let maps = LabelMapSet::builtin();
        assert_eq!(maps.select("icd10").unwrap().len(), 3);
        assert!(maps.get("edms.bbb").is_some());
    }

    #[test]
    fn icd_prefixes() {
        let maps = LabelMapSet::builtin();
        let dual = [maps.get("icd10.superclasses").unwrap(), maps.get("icd10.mi_subtypes").unwrap()];
        assert_eq!(map_with(&dual, &["I21.0"]), set(&["AMI", "MI"]));
        assert_eq!(maps.get("icd10.mi_subtypes").unwrap().map_labels(&["I21.0"]), set(&["AMI"]));
        assert_eq!(maps.map_labels("icd10.bbb_variation", &["I44.7"]).unwrap(), set(&["LBBB"]));
        assert_eq!(maps.map_labels("icd10.superclasses", &["i517"]).unwrap(), set(&["HYP"]));
        assert!(maps.map_labels("icd10", &["Z99"]).unwrap().is_empty());
    }

    #[test]
    fn most_specific_rule_wins() {
        let m = LabelMap::new(
            Vocab::Icd10,
            "t",
            vec![
                LabelRule { code: "I21".into(), class: "MI".into() },
                LabelRule { code: "I21.0".into(), class: "AMI".into() },
            ],
        )
        .unwrap();
        assert_eq!(m.map_code("I21.09"), Some("AMI"));
        assert_eq!(m.map_code("I21.4"), Some("MI"));
    }

    #[test]
    fn non_icd_matches_whole_labels() {
        let maps = LabelMapSet::builtin();
        assert_eq!(maps.map_labels("physionet.superclasses", &["ab"]).unwrap(), set(&["STTC"]));
        assert!(maps.map_labels("physionet.superclasses", &["abQRS"]).unwrap().is_empty());
        assert_eq!(maps.map_labels("ptbxl", &["IRBBB", "CRBBB"]).unwrap(), set(&["RBBB"]));
    }

    #[test]
    fn idempotent_on_outputs() {
        let maps = LabelMapSet::builtin();
        for sel in ["icd10", "physionet", "edms", "ptbxl"] {
            for m in maps.select(sel).unwrap() {
                let codes: Vec<&str> = m.rules.iter().map(|r| r.code.as_str()).collect();
                let once = maps.map_labels(sel, &codes).unwrap();
                let once_v: Vec<String> = once.iter().cloned().collect();
                assert_eq!(maps.map_labels(sel, &once_v).unwrap(), once, "{sel}");
            }
        }
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(LabelMapSet::parse("icd10,I21,MI").is_err());
        assert!(LabelMapSet::parse("[icd10.a]\nicd10,I21,MI\nicd10,I21,HYP").is_err());
        assert!(LabelMapSet::parse("[icd10.a]\nedms,LBBB,CLBBB").is_err());
        assert!(LabelMapSet::parse("[foo.a]").is_err());
        assert!(LabelMapSet::parse("[edms.a]\nedms,A,B\nedms,B,C").is_err());
        assert!(LabelMapSet::parse("[edms.a]\nedms,A").is_err());
    }
}
