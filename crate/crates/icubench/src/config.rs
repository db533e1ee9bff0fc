//! Editable configuration tables: the clinical variable set and the
//! diagnosis-group mapping.
//!
//! Both files use the same line-oriented format: records separated by blank
//! lines, one `key: value` pair per line, `#` starting a comment line.
//! Parse errors carry the 1-based line number.

use crate::types::{N_PHENOTYPES, N_VARIABLES};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

const BUILTIN_VARIABLES: &str = include_str!("../assets/variables.cfg");
const BUILTIN_GROUPS: &str = include_str!("../assets/diagnosis_groups.cfg");

/// Continuous variables carry an imputation default and outlier bounds;
/// categorical ones an ordered category-code list and a default category.
#[derive(Debug, Clone, PartialEq)]
pub enum VarKind {
    Continuous {
        normal: f64,
        valid_lo: f64,
        valid_hi: f64,
    },
    Categorical {
        categories: Vec<String>,
        normal_index: usize,
    },
}

/// One clinical variable: identity, parsing rules, imputation default.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    /// Position in the variable table, 0-based; fixes the input layout.
    pub id: u8,
    pub name: String,
    pub kind: VarKind,
    pub unit: String,
}

impl VariableSpec {
    /// Width of this variable's value block: 1 for continuous, the category
    /// count (one-hot) for categorical.
    pub fn value_dims(&self) -> usize {
        match &self.kind {
            VarKind::Continuous { .. } => 1,
            VarKind::Categorical { categories, .. } => categories.len(),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, VarKind::Continuous { .. })
    }

    pub fn categories(&self) -> &[String] {
        match &self.kind {
            VarKind::Continuous { .. } => &[],
            VarKind::Categorical { categories, .. } => categories,
        }
    }

    /// The imputation default as written in the config.
    pub fn normal_text(&self) -> String {
        match &self.kind {
            VarKind::Continuous { normal, .. } => format_float(*normal),
            VarKind::Categorical {
                categories,
                normal_index,
            } => categories[*normal_index].clone(),
        }
    }
}

/// The loaded variable table plus the derived input layout (value-block
/// offsets and mask positions).
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSet {
    specs: Vec<VariableSpec>,
    value_offsets: Vec<usize>,
    value_dims: usize,
    by_name: BTreeMap<String, u8>,
}

impl VariableSet {
    pub fn from_text(text: &str) -> Result<Self> {
        let records = split_records(text)?;
        if records.len() != N_VARIABLES {
            return Err(Error::Config {
                line: records.last().map_or(1, |r| r.first_line),
                message: format!(
                    "expected exactly {N_VARIABLES} variables, found {}",
                    records.len()
                ),
            });
        }
        let mut specs = Vec::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            specs.push(parse_variable(i as u8, rec)?);
        }
        let mut by_name = BTreeMap::new();
        for s in &specs {
            if by_name.insert(s.name.clone(), s.id).is_some() {
                return Err(Error::Config {
                    line: 1,
                    message: format!("duplicate variable name {:?}", s.name),
                });
            }
        }
        let mut value_offsets = Vec::with_capacity(specs.len());
        let mut off = 0;
        for s in &specs {
            value_offsets.push(off);
            off += s.value_dims();
        }
        Ok(VariableSet {
            specs,
            value_offsets,
            value_dims: off,
            by_name,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// The variable table shipped with the crate: 17 variables, 59 value
    /// dims, 76 input dims.
    pub fn builtin() -> &'static VariableSet {
        static SET: OnceLock<VariableSet> = OnceLock::new();
        SET.get_or_init(|| {
            VariableSet::from_text(BUILTIN_VARIABLES).expect("shipped variable config is valid")
        })
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, id: u8) -> &VariableSpec {
        &self.specs[id as usize]
    }

    pub fn id_by_name(&self, name: &str) -> Option<u8> {
        self.by_name.get(name).copied()
    }

    /// Total width of the concatenated value blocks.
    pub fn value_dims(&self) -> usize {
        self.value_dims
    }

    /// Value plus mask width: the model input dimensionality.
    pub fn input_dims(&self) -> usize {
        self.value_dims + self.specs.len()
    }

    /// First column of a variable's value block.
    pub fn value_offset(&self, id: u8) -> usize {
        self.value_offsets[id as usize]
    }

    /// Column of a variable's observation mask.
    pub fn mask_offset(&self, id: u8) -> usize {
        self.value_dims + id as usize
    }

    /// Index of a raw category string in a categorical variable's list.
    pub fn category_index(&self, id: u8, raw: &str) -> Option<usize> {
        self.get(id)
            .categories()
            .iter()
            .position(|c| c == raw.trim())
    }

    /// Renders the set back to config text; reloading yields an equal set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.specs {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("name: {}\n", s.name));
            match &s.kind {
                VarKind::Continuous {
                    normal,
                    valid_lo,
                    valid_hi,
                } => {
                    out.push_str("kind: continuous\n");
                    out.push_str(&format!("normal_value: {}\n", format_float(*normal)));
                    out.push_str(&format!("valid_lo: {}\n", format_float(*valid_lo)));
                    out.push_str(&format!("valid_hi: {}\n", format_float(*valid_hi)));
                }
                VarKind::Categorical {
                    categories,
                    normal_index,
                } => {
                    out.push_str("kind: categorical\n");
                    out.push_str(&format!("categories: {}\n", categories.join(", ")));
                    out.push_str(&format!("normal_value: {}\n", categories[*normal_index]));
                }
            }
            out.push_str(&format!("unit: {}\n", s.unit));
        }
        out
    }
}

fn format_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// One record: key -> (line, value), plus the record's first line.
struct Record {
    first_line: usize,
    fields: BTreeMap<String, (usize, String)>,
}

fn split_records(text: &str) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut current: Option<Record> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            if let Some(rec) = current.take() {
                records.push(rec);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::Config {
                line: line_no,
                message: format!("expected `key: value`, got {line:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let rec = current.get_or_insert_with(|| Record {
            first_line: line_no,
            fields: BTreeMap::new(),
        });
        if rec.fields.insert(key.clone(), (line_no, value)).is_some() {
            return Err(Error::Config {
                line: line_no,
                message: format!("duplicate key {key:?} in record"),
            });
        }
    }
    if let Some(rec) = current.take() {
        records.push(rec);
    }
    Ok(records)
}

fn take_field(rec: &mut Record, key: &str) -> Result<(usize, String)> {
    rec.fields.remove(key).ok_or_else(|| Error::Config {
        line: rec.first_line,
        message: format!("missing required key {key:?}"),
    })
}

fn parse_number(line: usize, key: &str, value: &str) -> Result<f64> {
    let v: f64 = value.parse().map_err(|_| Error::Config {
        line,
        message: format!("{key} must be a number, got {value:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Config {
            line,
            message: format!("{key} must be finite"),
        });
    }
    Ok(v)
}

fn parse_variable(id: u8, mut rec: Record) -> Result<VariableSpec> {
    let (_, name) = take_field(&mut rec, "name")?;
    let (kind_line, kind) = take_field(&mut rec, "kind")?;
    let (normal_line, normal) = take_field(&mut rec, "normal_value")?;
    let unit = rec
        .fields
        .remove("unit")
        .map(|(_, v)| v)
        .unwrap_or_default();

    let kind = match kind.as_str() {
        "continuous" => {
            let (lo_line, lo) = take_field(&mut rec, "valid_lo")?;
            let (hi_line, hi) = take_field(&mut rec, "valid_hi")?;
            let valid_lo = parse_number(lo_line, "valid_lo", &lo)?;
            let valid_hi = parse_number(hi_line, "valid_hi", &hi)?;
            if valid_lo >= valid_hi {
                return Err(Error::Config {
                    line: lo_line,
                    message: format!("empty valid range [{valid_lo}, {valid_hi}]"),
                });
            }
            let normal = parse_number(normal_line, "normal_value", &normal)?;
            if normal < valid_lo || normal > valid_hi {
                return Err(Error::Config {
                    line: normal_line,
                    message: format!(
                        "normal_value {normal} outside valid range [{valid_lo}, {valid_hi}]"
                    ),
                });
            }
            VarKind::Continuous {
                normal,
                valid_lo,
                valid_hi,
            }
        }
        "categorical" => {
            let (cat_line, cats) = take_field(&mut rec, "categories")?;
            let categories: Vec<String> = cats
                .split(',')
                .map(|c| c.trim().to_string())
                .filter(|c| !c.is_empty())
                .collect();
            if categories.len() < 2 {
                return Err(Error::Config {
                    line: cat_line,
                    message: "categorical variable needs at least 2 categories".to_string(),
                });
            }
            let mut seen = std::collections::BTreeSet::new();
            for c in &categories {
                if !seen.insert(c) {
                    return Err(Error::Config {
                        line: cat_line,
                        message: format!("duplicate category {c:?}"),
                    });
                }
            }
            let normal_index =
                categories
                    .iter()
                    .position(|c| *c == normal)
                    .ok_or_else(|| Error::Config {
                        line: normal_line,
                        message: format!("normal_value {normal:?} not in categories"),
                    })?;
            VarKind::Categorical {
                categories,
                normal_index,
            }
        }
        other => {
            return Err(Error::Config {
                line: kind_line,
                message: format!("unknown kind {other:?}; expected continuous or categorical"),
            });
        }
    };

    if let Some((line, _)) = rec.fields.values().next() {
        let key = rec.fields.keys().next().unwrap().clone();
        return Err(Error::Config {
            line: *line,
            message: format!("unknown key {key:?}"),
        });
    }

    Ok(VariableSpec {
        id,
        name,
        kind,
        unit,
    })
}

/// The 25 phenotype groups with their ICD-9 code prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisGroups {
    names: Vec<String>,
    /// (prefix, group) in file order; lookup picks the longest match.
    prefixes: Vec<(String, u8)>,
}

impl DiagnosisGroups {
    pub fn from_text(text: &str) -> Result<Self> {
        let records = split_records(text)?;
        if records.len() != N_PHENOTYPES {
            return Err(Error::Config {
                line: records.last().map_or(1, |r| r.first_line),
                message: format!(
                    "expected exactly {N_PHENOTYPES} groups, found {}",
                    records.len()
                ),
            });
        }
        let mut names = Vec::new();
        let mut prefixes: Vec<(String, u8)> = Vec::new();
        for (idx, mut rec) in records.into_iter().enumerate() {
            let (_, name) = take_field(&mut rec, "group")?;
            let (codes_line, codes) = take_field(&mut rec, "codes")?;
            if let Some(key) = rec.fields.keys().next() {
                return Err(Error::Config {
                    line: rec.fields[key].0,
                    message: format!("unknown key {key:?}"),
                });
            }
            if names.contains(&name) {
                return Err(Error::Config {
                    line: codes_line,
                    message: format!("duplicate group name {name:?}"),
                });
            }
            for code in codes.split(',') {
                let code = code.trim().to_string();
                if code.is_empty() {
                    continue;
                }
                if prefixes.iter().any(|(p, _)| *p == code) {
                    return Err(Error::Config {
                        line: codes_line,
                        message: format!("code prefix {code:?} appears in two groups"),
                    });
                }
                prefixes.push((code, idx as u8));
            }
            names.push(name);
        }
        Ok(DiagnosisGroups { names, prefixes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn builtin() -> &'static DiagnosisGroups {
        static GROUPS: OnceLock<DiagnosisGroups> = OnceLock::new();
        GROUPS.get_or_init(|| {
            DiagnosisGroups::from_text(BUILTIN_GROUPS).expect("shipped group config is valid")
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Group index for an ICD-9 code, by longest matching prefix.
    pub fn map_code(&self, code: &str) -> Option<u8> {
        let code = code.trim();
        self.prefixes
            .iter()
            .filter(|(p, _)| code.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|&(_, g)| g)
    }

    /// All prefixes of one group, longest first (used by the generator to
    /// sample mappable codes).
    pub fn prefixes_of(&self, group: u8) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .prefixes
            .iter()
            .filter(|(_, g)| *g == group)
            .map(|(p, _)| p.as_str())
            .collect();
        v.sort_by_key(|p| std::cmp::Reverse(p.len()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_variables_account_to_59_value_dims() {
        let set = VariableSet::builtin();
        assert_eq!(set.len(), 17);
        let continuous = set.specs().iter().filter(|s| s.is_continuous()).count();
        assert_eq!(continuous, 12);
        // 2 + 8 + 12 + 13 + 12 category dims + 12 continuous dims.
        assert_eq!(set.value_dims(), 59);
        assert_eq!(set.input_dims(), 76);
    }

    #[test]
    fn offsets_are_prefix_sums() {
        let set = VariableSet::builtin();
        let mut expect = 0;
        for s in set.specs() {
            assert_eq!(set.value_offset(s.id), expect);
            expect += s.value_dims();
        }
        assert_eq!(set.mask_offset(0), 59);
        assert_eq!(set.mask_offset(16), 75);
    }

    #[test]
    fn normal_values_lie_in_domain() {
        for s in VariableSet::builtin().specs() {
            match &s.kind {
                VarKind::Continuous {
                    normal,
                    valid_lo,
                    valid_hi,
                } => assert!(valid_lo <= normal && normal <= valid_hi, "{}", s.name),
                VarKind::Categorical {
                    categories,
                    normal_index,
                } => assert!(*normal_index < categories.len(), "{}", s.name),
            }
        }
    }

    #[test]
    fn wrong_variable_count_rejected() {
        let set = VariableSet::builtin();
        let mut text = set.to_text();
        let cut = text.rfind("\nname: weight").unwrap();
        text.truncate(cut + 1);
        let err = VariableSet::from_text(&text).unwrap_err();
        assert!(err.to_string().contains("expected exactly 17"));
    }

    #[test]
    fn normal_outside_range_rejected() {
        let text = VariableSet::builtin()
            .to_text()
            .replace("normal_value: 86.0", "normal_value: 400.0");
        let err = VariableSet::from_text(&text).unwrap_err();
        assert!(err.to_string().contains("outside valid range"));
    }

    #[test]
    fn unknown_kind_rejected_with_line() {
        let text = VariableSet::builtin()
            .to_text()
            .replace("kind: continuous\nnormal_value: 59.0", "kind: ordinal\nnormal_value: 59.0");
        match VariableSet::from_text(&text) {
            Err(Error::Config { line, message }) => {
                assert!(line > 0);
                assert!(message.contains("ordinal"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let set = VariableSet::builtin();
        let reloaded = VariableSet::from_text(&set.to_text()).unwrap();
        assert_eq!(*set, reloaded);
    }

    #[test]
    fn category_lookup() {
        let set = VariableSet::builtin();
        let gcs_total = set.id_by_name("glascow_coma_scale_total").unwrap();
        assert_eq!(set.category_index(gcs_total, "3"), Some(0));
        assert_eq!(set.category_index(gcs_total, "15"), Some(12));
        assert_eq!(set.category_index(gcs_total, "16"), None);
        let hr = set.id_by_name("heart_rate").unwrap();
        assert_eq!(set.category_index(hr, "80"), None);
    }

    #[test]
    fn builtin_groups_map_codes_by_longest_prefix() {
        let g = DiagnosisGroups::builtin();
        assert_eq!(g.len(), 25);
        // 5180 belongs to the pleurisy group, not lower respiratory.
        let pleurisy = g.map_code("51801").unwrap();
        assert_eq!(g.names()[pleurisy as usize], "Pleurisy; pneumothorax; pulmonary collapse");
        let resp_fail = g.map_code("51881").unwrap();
        assert_eq!(
            g.names()[resp_fail as usize],
            "Respiratory failure; insufficiency; arrest (adult)"
        );
        assert_eq!(g.map_code("V3000"), None);
        let sepsis = g.map_code("0389").unwrap();
        assert_eq!(g.names()[sepsis as usize], "Septicemia (except in labor)");
    }
}
