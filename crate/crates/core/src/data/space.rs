use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use sha2::{Digest, Sha256};

use super::Group;
use crate::error::{Error, Result};

/// One raw observation: attribute name to categorical value.
pub type RawRecord = BTreeMap<String, String>;

const SPACE_HEADER: &str = "xferfm-space v1";

/// Ordered assignment of attributes to feature groups.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schema {
    attrs: Vec<(String, Group)>,
}

impl Schema {
    pub fn new<I, S>(attrs: I) -> Self
    where
        I: IntoIterator<Item = (S, Group)>,
        S: Into<String>,
    {
        let mut schema = Schema::default();
        for (name, group) in attrs {
            schema.push(name, group);
        }
        schema
    }

    /// The thirteen attributes of the display-ad log layout: six user, five
    /// publisher and two ad attributes.
    pub fn display_ads() -> Self {
        Schema::new([
            ("user_cookie", Group::User),
            ("hour", Group::User),
            ("browser", Group::User),
            ("os", Group::User),
            ("user_agent", Group::User),
            ("screen_size", Group::User),
            ("domain", Group::Publisher),
            ("url", Group::Publisher),
            ("exchange", Group::Publisher),
            ("ad_slot", Group::Publisher),
            ("slot_size", Group::Publisher),
            ("advertiser", Group::Ad),
            ("campaign", Group::Ad),
        ])
    }

    /// Adds or regroups an attribute.
    pub fn push(&mut self, name: impl Into<String>, group: Group) {
        let name = name.into();
        match self.attrs.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = group,
            None => self.attrs.push((name, group)),
        }
    }

    pub fn group_of(&self, attr: &str) -> Option<Group> {
        self.attrs.iter().find(|(n, _)| n == attr).map(|(_, g)| *g)
    }

    pub fn attributes(&self) -> impl Iterator<Item = (&str, Group)> {
        self.attrs.iter().map(|(n, g)| (n.as_str(), *g))
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn count(&self, group: Group) -> usize {
        self.attrs.iter().filter(|(_, g)| *g == group).count()
    }

    /// Keeps only the named attributes, preserving order.
    pub fn subset(&self, keep: &[&str]) -> Result<Schema> {
        for name in keep {
            if self.group_of(name).is_none() {
                return Err(Error::Schema(format!("unknown attribute `{name}`")));
            }
        }
        Ok(Schema {
            attrs: self
                .attrs
                .iter()
                .filter(|(n, _)| keep.contains(&n.as_str()))
                .cloned()
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Attribute {
    name: String,
    group: Group,
    /// Observed values in index order; the OOV slot follows them.
    values: Vec<String>,
    lookup: HashMap<String, usize>,
    offset: usize,
}

impl Attribute {
    fn oov(&self) -> usize {
        self.offset + self.values.len()
    }

    fn span(&self) -> Range<usize> {
        self.offset..self.oov() + 1
    }
}

/// Global one-hot vocabulary, immutable once built.
///
/// Indices are contiguous per group: users occupy `[0, I)`, publishers
/// `[I, I+J)` and ads `[I+J, I+J+L)`. Each attribute owns a contiguous run
/// of its observed values (sorted) followed by its OOV slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpace {
    attrs: Vec<Attribute>,
    by_name: HashMap<String, usize>,
    dims: [usize; 3],
}

/// Builds the vocabulary from observed records. Every attribute in `schema`
/// gets an OOV slot even when it never occurs.
pub fn build_feature_space(records: &[RawRecord], schema: &Schema) -> Result<FeatureSpace> {
    let mut observed: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for record in records {
        for (attr, value) in record {
            if schema.group_of(attr).is_none() {
                return Err(Error::Schema(format!(
                    "attribute `{attr}` appears in records but not in the schema"
                )));
            }
            observed
                .entry(attr.as_str())
                .or_default()
                .insert(value.as_str());
        }
    }
    let mut staged = Vec::with_capacity(schema.len());
    for group in Group::ALL {
        for (name, g) in schema.attributes() {
            if g != group {
                continue;
            }
            let values = observed
                .get(name)
                .map(|set| set.iter().map(|v| v.to_string()).collect())
                .unwrap_or_default();
            staged.push((name.to_string(), group, values));
        }
    }
    FeatureSpace::from_parts(staged)
}

impl FeatureSpace {
    /// Lays out attributes in the given order, which must already be grouped
    /// user, publisher, ad.
    fn from_parts(parts: Vec<(String, Group, Vec<String>)>) -> Result<FeatureSpace> {
        let mut attrs = Vec::with_capacity(parts.len());
        let mut by_name = HashMap::new();
        let mut dims = [0usize; 3];
        let mut offset = 0;
        let mut last_group = Group::User;
        for (name, group, values) in parts {
            if group < last_group {
                return Err(Error::Schema(format!(
                    "attribute `{name}` ({group}) is out of group order"
                )));
            }
            last_group = group;
            if by_name.insert(name.clone(), attrs.len()).is_some() {
                return Err(Error::Schema(format!("attribute `{name}` listed twice")));
            }
            let mut lookup = HashMap::with_capacity(values.len());
            for (k, v) in values.iter().enumerate() {
                if v.is_empty() || lookup.insert(v.clone(), offset + k).is_some() {
                    return Err(Error::Schema(format!(
                        "attribute `{name}` has an empty or repeated value `{v}`"
                    )));
                }
            }
            let attr = Attribute {
                name,
                group,
                values,
                lookup,
                offset,
            };
            offset = attr.oov() + 1;
            dims[group_slot(group)] += attr.values.len() + 1;
            attrs.push(attr);
        }
        Ok(FeatureSpace {
            attrs,
            by_name,
            dims,
        })
    }

    pub fn user_dims(&self) -> usize {
        self.dims[0]
    }

    pub fn pub_dims(&self) -> usize {
        self.dims[1]
    }

    pub fn ad_dims(&self) -> usize {
        self.dims[2]
    }

    pub fn dims(&self, group: Group) -> usize {
        self.dims[group_slot(group)]
    }

    /// Total feature count `I + J + L`.
    pub fn len(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, group: Group) -> Range<usize> {
        let (i, j, l) = (self.dims[0], self.dims[1], self.dims[2]);
        match group {
            Group::User => 0..i,
            Group::Publisher => i..i + j,
            Group::Ad => i + j..i + j + l,
        }
    }

    pub fn group_of(&self, index: usize) -> Option<Group> {
        Group::ALL
            .into_iter()
            .find(|g| self.range(*g).contains(&index))
    }

    pub fn group_of_attribute(&self, attr: &str) -> Option<Group> {
        self.attr(attr).map(|a| a.group)
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attrs.iter().map(|a| a.name.as_str())
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.attrs.iter().map(|a| (a.name.clone(), a.group)))
    }

    pub fn index_of(&self, attr: &str, value: &str) -> Option<usize> {
        self.attr(attr)?.lookup.get(value).copied()
    }

    pub fn oov_index(&self, attr: &str) -> Option<usize> {
        self.attr(attr).map(Attribute::oov)
    }

    /// Index of `value`, or the attribute's OOV slot; `None` only when the
    /// attribute itself is unknown.
    pub fn index_or_oov(&self, attr: &str, value: &str) -> Option<usize> {
        let a = self.attr(attr)?;
        Some(a.lookup.get(value).copied().unwrap_or_else(|| a.oov()))
    }

    /// Index range owned by one attribute, OOV slot included.
    pub fn attribute_span(&self, attr: &str) -> Option<Range<usize>> {
        self.attr(attr).map(Attribute::span)
    }

    /// `(attribute, value)` for an index; the value is `None` for OOV slots.
    pub fn describe(&self, index: usize) -> Option<(&str, Option<&str>)> {
        let a = self.attrs.iter().find(|a| a.span().contains(&index))?;
        let value = a.values.get(index - a.offset).map(String::as_str);
        Some((a.name.as_str(), value))
    }

    /// Text form: a header line, then `attribute\tvalue\tindex\tgroup` per
    /// index in index order. OOV slots carry an empty value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(SPACE_HEADER);
        out.push('\n');
        for a in &self.attrs {
            for (k, v) in a.values.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}\t{}", a.name, v, a.offset + k, a.group);
            }
            let _ = writeln!(out, "{}\t\t{}\t{}", a.name, a.oov(), a.group);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<FeatureSpace> {
        const CTX: &str = "feature space";
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == SPACE_HEADER => {}
            _ => {
                return Err(Error::parse(
                    CTX,
                    1,
                    format!("expected header `{SPACE_HEADER}`"),
                ))
            }
        }
        // (name, group, values, closed by its OOV line)
        let mut parts: Vec<(String, Group, Vec<String>, bool)> = Vec::new();
        let mut expected = 0usize;
        for (n, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, value, index, group] = fields[..] else {
                return Err(Error::parse(CTX, n + 1, "expected 4 tab-separated fields"));
            };
            let index: usize = index
                .parse()
                .map_err(|_| Error::parse(CTX, n + 1, "bad index"))?;
            let group = Group::parse(group).ok_or_else(|| Error::parse(CTX, n + 1, "bad group"))?;
            if index != expected {
                return Err(Error::parse(
                    CTX,
                    n + 1,
                    format!("index {index}, expected {expected}"),
                ));
            }
            expected += 1;
            match parts.last_mut() {
                Some(last) if !last.3 => {
                    if last.0 != name || last.1 != group {
                        return Err(Error::parse(
                            CTX,
                            n + 1,
                            format!("attribute `{}` lacks an OOV slot", last.0),
                        ));
                    }
                }
                _ => parts.push((name.to_string(), group, Vec::new(), false)),
            }
            let last = parts.last_mut().expect("pushed above");
            if value.is_empty() {
                last.3 = true;
            } else {
                last.2.push(value.to_string());
            }
        }
        if let Some(open) = parts.iter().find(|p| !p.3) {
            return Err(Error::parse(
                CTX,
                expected + 1,
                format!("attribute `{}` lacks an OOV slot", open.0),
            ));
        }
        let parts = parts.into_iter().map(|(n, g, v, _)| (n, g, v)).collect();
        FeatureSpace::from_parts(parts)
    }

    /// Short content hash of the text form, used to tie models to spaces.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn attr(&self, name: &str) -> Option<&Attribute> {
        self.by_name.get(name).map(|&i| &self.attrs[i])
    }
}

fn group_slot(group: Group) -> usize {
    match group {
        Group::User => 0,
        Group::Publisher => 1,
        Group::Ad => 2,
    }
}
