//! PIM backend descriptors.
//!
//! A backend is described at three levels: the system (host plus PIM
//! channels), PIM groups (one per channel, sharing a command bus and
//! optionally hosting specialized units) and PIM cores (a compute unit with
//! its local banks). Everything downstream queries a [`BackendDescriptor`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Specialized units attached to a PIM group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupUnit {
    Softmax,
    Accumulator,
    Gemv,
}

impl GroupUnit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(GroupUnit::Softmax),
            "accumulator" => Some(GroupUnit::Accumulator),
            "gemv" => Some(GroupUnit::Gemv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub num_channels: usize,
    pub groups: usize,
    pub cores_per_group: usize,
    pub banks_per_core: usize,
    /// Bytes per bank available for PIM tiles.
    pub bank_capacity: u64,
    /// Multi-data instruction width in elements; 0 means scalar only.
    pub simd_width_d: usize,
    pub supports_group_broadcast: bool,
    pub group_units: BTreeSet<GroupUnit>,
    pub element_bytes: usize,
    /// Bytes/cycle for contiguous host reads.
    pub host_channel_bw: f64,
    /// Bytes/cycle per PIM channel.
    pub pim_channel_bw: f64,
    pub onchip_buffer_bytes: u64,
    pub cmd_issue_cycles: f64,
    pub core_op_cycles: f64,
    pub bank_access_cycles_per_elem: f64,
    /// Host cache line size used by the interleaved host layout.
    pub cache_line_bytes: u64,
    /// Optional local allocation alignment in elements. When set, a
    /// reorganization pass aligns every tensor's local base address.
    pub layout_alignment: Option<u64>,
}

/// Presets shipped with the repository.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendPreset {
    HbmPimLike,
    AttAccLike,
    Custom(PathBuf),
}

const HBM_PIM_LIKE: &str = include_str!("../../../backends/hbm-pim-like.json");
const ATTACC_LIKE: &str = include_str!("../../../backends/attacc-like.json");

/// Environment variable naming an extra directory searched for `<name>.json`.
pub const BACKEND_DIR_ENV: &str = "PIMDCC_BACKEND_DIR";

impl BackendPreset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "hbm-pim-like" => Some(BackendPreset::HbmPimLike),
            "attacc-like" => Some(BackendPreset::AttAccLike),
            _ => None,
        }
    }

    pub fn load(&self) -> Result<BackendDescriptor> {
        match self {
            BackendPreset::HbmPimLike => load_backend(HBM_PIM_LIKE),
            BackendPreset::AttAccLike => load_backend(ATTACC_LIKE),
            BackendPreset::Custom(path) => load_backend(&std::fs::read_to_string(path)?),
        }
    }
}

pub fn hbm_pim_like() -> BackendDescriptor {
    BackendPreset::HbmPimLike
        .load()
        .expect("shipped preset is valid")
}

pub fn attacc_like() -> BackendDescriptor {
    BackendPreset::AttAccLike
        .load()
        .expect("shipped preset is valid")
}

/// Resolve a user-facing backend spec: a preset name, a name found in
/// `$PIMDCC_BACKEND_DIR`, or a path to a JSON file.
pub fn resolve_backend(spec: &str) -> Result<BackendDescriptor> {
    if let Ok(dir) = std::env::var(BACKEND_DIR_ENV) {
        let candidate = Path::new(&dir).join(format!("{spec}.json"));
        if candidate.is_file() {
            return BackendPreset::Custom(candidate).load();
        }
    }
    if let Some(p) = BackendPreset::from_name(spec) {
        return p.load();
    }
    let path = Path::new(spec);
    if path.is_file() {
        return BackendPreset::Custom(path.to_path_buf()).load();
    }
    Err(Error::config(
        "backend",
        format!("`{spec}` is neither a preset name nor a readable file"),
    ))
}

const FIELDS: &[&str] = &[
    "name",
    "num_channels",
    "groups",
    "cores_per_group",
    "banks_per_core",
    "bank_capacity",
    "simd_width_d",
    "supports_group_broadcast",
    "group_units",
    "element_bytes",
    "host_channel_bw",
    "pim_channel_bw",
    "onchip_buffer_bytes",
    "cmd_issue_cycles",
    "core_op_cycles",
    "bank_access_cycles_per_elem",
    "cache_line_bytes",
    "layout_alignment",
];

/// Parse and validate a backend config (JSON).
///
/// A config may name a `"preset"`; the preset is expanded first and the
/// remaining keys override its fields.
pub fn load_backend(config: &str) -> Result<BackendDescriptor> {
    let value: Value =
        serde_json::from_str(config).map_err(|e| Error::config("<document>", e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(Error::config("<document>", "expected a JSON object"));
    };
    if let Some(preset) = obj.remove("preset") {
        let name = preset
            .as_str()
            .ok_or_else(|| Error::config("preset", "expected a string"))?;
        let base = match BackendPreset::from_name(name) {
            Some(BackendPreset::HbmPimLike) => HBM_PIM_LIKE,
            Some(BackendPreset::AttAccLike) => ATTACC_LIKE,
            _ => return Err(Error::config("preset", format!("unknown preset `{name}`"))),
        };
        let Value::Object(mut merged) = serde_json::from_str::<Value>(base)? else {
            unreachable!("preset files are objects");
        };
        merged.extend(obj);
        obj = merged;
    }
    let d = from_object(&obj)?;
    d.validate()?;
    Ok(d)
}

fn from_object(obj: &Map<String, Value>) -> Result<BackendDescriptor> {
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(Error::config(k.clone(), "unknown field"));
    }
    let get = |f: &str| obj.get(f).ok_or_else(|| Error::config(f, "missing"));
    let uint = |f: &str| -> Result<u64> {
        get(f)?
            .as_u64()
            .ok_or_else(|| Error::config(f, "expected a non-negative integer"))
    };
    let float = |f: &str| -> Result<f64> {
        get(f)?
            .as_f64()
            .ok_or_else(|| Error::config(f, "expected a number"))
    };
    let name = get("name")?
        .as_str()
        .ok_or_else(|| Error::config("name", "expected a string"))?
        .to_string();
    let supports_group_broadcast = get("supports_group_broadcast")?
        .as_bool()
        .ok_or_else(|| Error::config("supports_group_broadcast", "expected a boolean"))?;
    let units = get("group_units")?
        .as_array()
        .ok_or_else(|| Error::config("group_units", "expected an array"))?;
    let mut group_units = BTreeSet::new();
    for u in units {
        let s = u
            .as_str()
            .ok_or_else(|| Error::config("group_units", "expected strings"))?;
        let unit = GroupUnit::parse(s)
            .ok_or_else(|| Error::config("group_units", format!("unknown unit `{s}`")))?;
        group_units.insert(unit);
    }
    let layout_alignment = match obj.get("layout_alignment") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| Error::config("layout_alignment", "expected an integer or null"))?,
        ),
    };
    let cache_line_bytes = match obj.get("cache_line_bytes") {
        None => 64,
        Some(_) => uint("cache_line_bytes")?,
    };
    Ok(BackendDescriptor {
        name,
        num_channels: uint("num_channels")? as usize,
        groups: uint("groups")? as usize,
        cores_per_group: uint("cores_per_group")? as usize,
        banks_per_core: uint("banks_per_core")? as usize,
        bank_capacity: uint("bank_capacity")?,
        simd_width_d: uint("simd_width_d")? as usize,
        supports_group_broadcast,
        group_units,
        element_bytes: uint("element_bytes")? as usize,
        host_channel_bw: float("host_channel_bw")?,
        pim_channel_bw: float("pim_channel_bw")?,
        onchip_buffer_bytes: uint("onchip_buffer_bytes")?,
        cmd_issue_cycles: float("cmd_issue_cycles")?,
        core_op_cycles: float("core_op_cycles")?,
        bank_access_cycles_per_elem: float("bank_access_cycles_per_elem")?,
        cache_line_bytes,
        layout_alignment,
    })
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Validation {
                backend: self.name.clone(),
                msg,
            })
        };
        let counts = [
            ("num_channels", self.num_channels),
            ("groups", self.groups),
            ("cores_per_group", self.cores_per_group),
            ("banks_per_core", self.banks_per_core),
            ("element_bytes", self.element_bytes),
        ];
        for (field, v) in counts {
            if v == 0 {
                return fail(format!("{field} must be at least 1"));
            }
        }
        if self.bank_capacity == 0 {
            return fail("bank_capacity must be at least 1".into());
        }
        if self.cache_line_bytes == 0 {
            return fail("cache_line_bytes must be at least 1".into());
        }
        if self.groups > self.num_channels {
            return fail(format!(
                "groups ({}) exceeds num_channels ({}); each group needs its own bus",
                self.groups, self.num_channels
            ));
        }
        for (field, v) in [
            ("host_channel_bw", self.host_channel_bw),
            ("pim_channel_bw", self.pim_channel_bw),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{field} must be positive"));
            }
        }
        for (field, v) in [
            ("cmd_issue_cycles", self.cmd_issue_cycles),
            ("core_op_cycles", self.core_op_cycles),
            (
                "bank_access_cycles_per_elem",
                self.bank_access_cycles_per_elem,
            ),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{field} must be non-negative"));
            }
        }
        if matches!(self.layout_alignment, Some(0)) {
            return fail("layout_alignment must be at least 1 when set".into());
        }
        // Unit opcodes travel as group-level commands.
        if !self.group_units.is_empty() && !self.supports_group_broadcast {
            return fail("group units require group-level command support".into());
        }
        Ok(())
    }

    pub fn total_cores(&self) -> usize {
        self.groups * self.cores_per_group
    }

    pub fn has_unit(&self, unit: GroupUnit) -> bool {
        self.group_units.contains(&unit)
    }

    /// Bytes of local memory one core can address.
    pub fn core_capacity_bytes(&self) -> u64 {
        self.bank_capacity * self.banks_per_core as u64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attacc_preset_has_softmax_and_16_groups() {
        let d = attacc_like();
        assert_eq!(d.groups, 16);
        assert!(d.has_unit(GroupUnit::Softmax));
        assert_eq!(d.total_cores(), 1024);
    }

    #[test]
    fn hbm_preset_is_16_wide() {
        let d = hbm_pim_like();
        assert_eq!(d.simd_width_d, 16);
        assert!(d.supports_group_broadcast);
        assert!(d.group_units.is_empty());
    }

    #[test]
    fn zero_cores_is_a_validation_error() {
        let err = load_backend(r#"{"preset": "hbm-pim-like", "cores_per_group": 0}"#).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = load_backend(r#"{"preset": "hbm-pim-like", "groups": "many"}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "groups"),
            other => panic!("unexpected {other}"),
        }
        let err = load_backend(r#"{"preset": "hbm-pim-like", "bogus": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "bogus"));
    }

    #[test]
    fn groups_cannot_exceed_channels() {
        let err = load_backend(r#"{"preset": "hbm-pim-like", "num_channels": 4, "groups": 8}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn total_cores_is_the_product() {
        let mut d = hbm_pim_like();
        d.groups = 2;
        d.cores_per_group = 4;
        assert_eq!(d.total_cores(), 8);
        d.groups = 1;
        d.cores_per_group = 1;
        assert_eq!(d.total_cores(), 1);
    }

    #[test]
    fn presets_are_deterministic_and_round_trip() {
        for d in [hbm_pim_like(), attacc_like()] {
            assert_eq!(load_backend(&d.to_json()).unwrap(), d);
        }
        assert_eq!(attacc_like(), attacc_like());
    }
}
