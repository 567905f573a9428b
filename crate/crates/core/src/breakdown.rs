//! Per-tag cost tables shared by the model zoo, cost model and instruments.

use std::collections::BTreeMap;

use crate::taxonomy::{LayerTag, Mode, TagKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostEntry {
    /// `2·macs + 5·elementwise`.
    pub flops: u64,
    pub macs: u64,
    pub elementwise: u64,
    /// Bytes allocated for activations and scores while this tag is active.
    pub bytes: u64,
    pub params: u64,
}

impl CostEntry {
    fn absorb(&mut self, o: &CostEntry) {
        self.flops += o.flops;
        self.macs += o.macs;
        self.elementwise += o.elementwise;
        self.bytes += o.bytes;
        self.params += o.params;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostBreakdown {
    pub mode: Mode,
    pub entries: BTreeMap<LayerTag, CostEntry>,
    /// Peak bytes of one step, parameters included.
    pub peak_bytes: u64,
    /// Parameter (and, in training, gradient) bytes within `peak_bytes`.
    pub resident_bytes: u64,
}

impl Default for CostBreakdown {
    fn default() -> Self {
        CostBreakdown::new(Mode::Inference)
    }
}

impl CostBreakdown {
    pub fn new(mode: Mode) -> Self {
        CostBreakdown {
            mode,
            entries: BTreeMap::new(),
            peak_bytes: 0,
            resident_bytes: 0,
        }
    }

    pub fn entry(&mut self, tag: LayerTag) -> &mut CostEntry {
        self.entries.entry(tag).or_default()
    }

    pub fn get(&self, tag: LayerTag) -> CostEntry {
        self.entries.get(&tag).copied().unwrap_or_default()
    }

    pub fn add_params(&mut self, tag: LayerTag, n: u64) {
        self.entry(tag).params += n;
    }

    pub fn add_macs(&mut self, tag: LayerTag, n: u64) {
        let e = self.entry(tag);
        e.macs += n;
        e.flops += 2 * n;
    }

    /// Elementwise outputs land on `Other` at the tag's layer index.
    pub fn add_elementwise(&mut self, tag: LayerTag, n: u64) {
        let e = self.entry(LayerTag::new(TagKind::Other, tag.layer_index));
        e.elementwise += n;
        e.flops += 5 * n;
    }

    pub fn add_bytes(&mut self, tag: LayerTag, n: u64) {
        self.entry(tag).bytes += n;
    }

    pub fn merge(&mut self, other: &CostBreakdown) {
        for (tag, e) in &other.entries {
            self.entry(*tag).absorb(e);
        }
        self.peak_bytes = self.peak_bytes.max(other.peak_bytes);
        self.resident_bytes = self.resident_bytes.max(other.resident_bytes);
    }

    /// Peak bytes beyond the resident parameters.
    pub fn activation_peak_bytes(&self) -> u64 {
        self.peak_bytes.saturating_sub(self.resident_bytes)
    }

    pub fn total(&self) -> CostEntry {
        let mut t = CostEntry::default();
        for e in self.entries.values() {
            t.absorb(e);
        }
        t
    }

    pub fn total_params(&self) -> u64 {
        self.total().params
    }

    pub fn total_flops(&self) -> u64 {
        self.total().flops
    }

    /// Sums a field over layer indices for each tag kind; every kind is present.
    pub fn by_kind(&self, field: impl Fn(&CostEntry) -> u64) -> BTreeMap<TagKind, u64> {
        let mut out: BTreeMap<TagKind, u64> = TagKind::ALL.iter().map(|k| (*k, 0)).collect();
        for (tag, e) in &self.entries {
            *out.entry(tag.kind).or_default() += field(e);
        }
        out
    }

    pub fn params_by_kind(&self) -> BTreeMap<TagKind, u64> {
        self.by_kind(|e| e.params)
    }

    /// Keeps only the entries with a nonzero value in any field.
    pub fn prune(mut self) -> Self {
        self.entries.retain(|_, e| *e != CostEntry::default());
        self
    }
}
