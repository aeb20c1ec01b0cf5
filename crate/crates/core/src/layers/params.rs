use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named model tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.map.get_mut(name) {
            Some(p) => {
                p.trainable = trainable;
                Ok(())
            }
            None => Err(Error::contract(format!("unknown parameter `{name}`"))),
        }
    }

    /// Number of scalar entries across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Writes `<stem>.bin` (little-endian f32 payloads, concatenated in name
    /// order) and `<stem>.manifest` (one `name shape offset trainable` line
    /// per tensor, offsets in bytes).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin_path = dir.join(format!("{stem}.bin"));
        let man_path = dir.join(format!("{stem}.manifest"));
        let mut bin = Vec::new();
        let mut manifest = String::new();
        for (name, p) in &self.map {
            let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "{name} {} {} {}\n",
                if shape.is_empty() {
                    "-".to_string()
                } else {
                    shape.join(",")
                },
                bin.len(),
                u8::from(p.trainable)
            ));
            for v in p.value.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(&bin_path)
            .and_then(|mut f| f.write_all(&bin))
            .map_err(|e| Error::io(&bin_path, e))?;
        fs::write(&man_path, manifest).map_err(|e| Error::io(&man_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bin_path = dir.join(format!("{stem}.bin"));
        let man_path = dir.join(format!("{stem}.manifest"));
        let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let manifest = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let bad = |line: usize, detail: &str| Error::Format {
            path: man_path.clone(),
            offset: line as u64,
            detail: format!("line {}: {detail}", line + 1),
        };
        let mut store = Self::new();
        for (ln, line) in manifest.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, offset, trainable] = fields[..] else {
                return Err(bad(ln, "expected four fields"));
            };
            let shape: Vec<usize> = if shape == "-" {
                Vec::new()
            } else {
                shape
                    .split(',')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(ln, "bad shape"))?
            };
            let offset: usize = offset.parse().map_err(|_| bad(ln, "bad offset"))?;
            let n: usize = shape.iter().product();
            let bytes = bin
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(ln, "payload out of range"))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, Tensor::new(&shape, data)?, trainable == "1");
        }
        Ok(store)
    }
}

/// Lazily lifts store entries into a graph, once per name. Trainable
/// entries become gradient-tracking leaves, frozen ones constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
    track: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            track: true,
        }
    }

    /// Binds every entry as a constant, trainable or not.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = g.leaf(p.value.clone(), p.trainable && self.track);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn into_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("b", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0), true);
        s.insert("a", Tensor::scalar(7.25), false);
        s.save(dir.path(), "model").unwrap();
        let manifest = fs::read_to_string(dir.path().join("model.manifest")).unwrap();
        assert_eq!(manifest, "a - 0 0\nb 2,3 4 1\n");
        assert_eq!(ParamStore::load(dir.path(), "model").unwrap(), s);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("w", Tensor::ones(&[4]), true);
        s.save(dir.path(), "m").unwrap();
        fs::write(dir.path().join("m.bin"), [0u8; 8]).unwrap();
        assert!(matches!(ParamStore::load(dir.path(), "m"), Err(Error::Format { .. })));
    }

    #[test]
    fn binder_respects_trainable_flag() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::ones(&[2]), true);
        s.insert("f", Tensor::ones(&[2]), false);
        let mut g = Graph::new();
        let mut b = Binder::new(&s);
        let w = b.var(&mut g, "w").unwrap();
        let f = b.var(&mut g, "f").unwrap();
        assert!(g.requires_grad(w));
        assert!(!g.requires_grad(f));
        assert_eq!(b.var(&mut g, "w").unwrap(), w);
        assert!(b.var(&mut g, "missing").is_err());
        assert_eq!(s.trainable_count(), 2);
    }
}
