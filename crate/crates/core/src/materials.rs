//! Expected linear attenuation coefficients of pipe materials at a fixed
//! (monochromatic) beam energy.
//!
//! Thin or light materials follow `alpha = kappa * rho`. For thick dense
//! layers the detector also records scattered photons, which a Lambert-Beer
//! forward model cannot explain; equating the buildup-corrected attenuation
//! `B exp(-w kappa rho)` with `exp(-alpha w)` gives
//! `alpha = kappa * rho - ln(B) / w`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Material constants at the working energy (2 MeV by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub name: String,
    /// Mass attenuation coefficient, cm^2/g.
    #[serde(rename = "kappa_cm2_per_g")]
    pub kappa: f64,
    /// Density, g/cm^3.
    #[serde(rename = "rho_g_per_cm3")]
    pub rho: f64,
    /// Buildup factor `B(E, w kappa rho)`; dimensionless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buildup: Option<f64>,
    /// Layer width `w` in cm the buildup factor refers to.
    #[serde(rename = "width_cm", default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

impl Material {
    pub fn new(name: &str, kappa: f64, rho: f64) -> Self {
        Self {
            name: name.to_string(),
            kappa,
            rho,
            buildup: None,
            width: None,
        }
    }

    pub fn with_buildup(mut self, buildup: f64, width: f64) -> Self {
        self.buildup = Some(buildup);
        self.width = Some(width);
        self
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidMaterial {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    fn check_base(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(self.invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(self.invalid(format!("rho must be non-negative, got {}", self.rho)));
        }
        if self.buildup.is_some() != self.width.is_some() {
            return Err(self.invalid("buildup and width_cm must be given together"));
        }
        Ok(())
    }
}

/// `kappa * rho` for a material without buildup.
pub fn attenuation(material: &Material) -> Result<f64> {
    material.check_base()?;
    if material.buildup.is_some() {
        return Err(material.invalid("material has a buildup factor; use attenuation_with_buildup"));
    }
    Ok(material.kappa * material.rho)
}

/// `kappa * rho - ln(B) / w`.
///
/// A negative result is returned as is (with a logged warning): it means the
/// buildup factor is inconsistent with the layer width.
pub fn attenuation_with_buildup(material: &Material) -> Result<f64> {
    material.check_base()?;
    let (b, w) = match (material.buildup, material.width) {
        (Some(b), Some(w)) => (b, w),
        _ => return Err(material.invalid("buildup factor and width required")),
    };
    if !(b >= 1.0) || !b.is_finite() {
        return Err(material.invalid(format!("buildup factor must be >= 1, got {b}")));
    }
    if !(w > 0.0) || !w.is_finite() {
        return Err(material.invalid(format!("width must be positive, got {w}")));
    }
    let alpha = material.kappa * material.rho - b.ln() / w;
    if alpha < 0.0 {
        log::warn!(
            "material {} has negative buildup-corrected attenuation {alpha}",
            material.name
        );
    }
    Ok(alpha)
}

/// Dispatches on whether the material carries a buildup factor.
pub fn expected_attenuation(material: &Material) -> Result<f64> {
    if material.buildup.is_some() {
        attenuation_with_buildup(material)
    } else {
        attenuation(material)
    }
}

/// The shipped material constants.
pub const DEFAULT_MATERIALS_JSON: &str = include_str!("../data/materials.json");

pub fn default_materials() -> Vec<Material> {
    parse_materials(DEFAULT_MATERIALS_JSON).expect("shipped materials file is valid")
}

pub fn parse_materials(json: &str) -> Result<Vec<Material>> {
    let list: Vec<Material> = serde_json::from_str(json)?;
    for m in &list {
        m.check_base()?;
    }
    Ok(list)
}

pub fn load_materials(path: &Path) -> Result<Vec<Material>> {
    parse_materials(&std::fs::read_to_string(path)?)
}

pub fn find_material<'a>(materials: &'a [Material], name: &str) -> Result<&'a Material> {
    materials
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown material {name:?}")))
}

/// Region index (1-based) to material and its expected attenuation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttenuationTable {
    entries: BTreeMap<usize, (Material, f64)>,
}

impl AttenuationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds region `index` with the expected attenuation of `material`.
    /// Negative values are rejected here since they cannot serve as prior means.
    pub fn insert(&mut self, index: usize, material: Material) -> Result<f64> {
        if index == 0 {
            return Err(Error::InvalidConfig("region indices start at 1".into()));
        }
        let alpha = expected_attenuation(&material)?;
        if alpha < 0.0 {
            return Err(Error::InvalidMaterial {
                name: material.name.clone(),
                reason: format!("negative attenuation {alpha}"),
            });
        }
        self.entries.insert(index, (material, alpha));
        Ok(alpha)
    }

    pub fn alpha(&self, index: usize) -> Option<f64> {
        self.entries.get(&index).map(|e| e.1)
    }

    pub fn material(&self, index: usize) -> Option<&Material> {
        self.entries.get(&index).map(|e| &e.0)
    }

    pub fn regions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// `value` agrees with `printed` to the precision it is printed at,
    /// i.e. within half a unit in its last digit.
    fn agrees_to_printed(value: f64, printed: f64, last_digit: f64) -> bool {
        (value - printed).abs() <= 0.5 * last_digit + 1e-15
    }

    #[test]
    fn table_values() {
        let m = default_materials();
        let alpha = |name: &str| expected_attenuation(find_material(&m, name).unwrap()).unwrap();
        assert!(agrees_to_printed(alpha("PE rubber"), 0.048, 1e-3));
        assert!(agrees_to_printed(alpha("Concrete"), 0.11, 1e-2));
        assert!(agrees_to_printed(alpha("PU foam"), 0.0077, 1e-4));
        assert_relative_eq!(alpha("Air"), 5.28e-5, max_relative = 1e-12);
        let steel = alpha("Steel");
        assert!((steel - 0.15690).abs() < 5e-5, "{steel}");
        assert!(agrees_to_printed(steel, 0.16, 1e-2));
    }

    #[test]
    fn vacuum_has_no_attenuation() {
        assert_eq!(attenuation(&Material::new("vac", 0.05, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn unit_buildup_reduces_to_plain() {
        let m = Material::new("x", 0.042, 7.9).with_buildup(1.0, 4.0);
        assert_eq!(attenuation_with_buildup(&m).unwrap(), 0.042 * 7.9);
    }

    #[test]
    fn inconsistent_buildup_goes_negative() {
        let m = Material::new("x", 0.5, 1.0).with_buildup(std::f64::consts::E, 1.0);
        assert_relative_eq!(attenuation_with_buildup(&m).unwrap(), -0.5, epsilon = 1e-15);
        let mut table = AttenuationTable::new();
        assert!(table.insert(1, m).is_err());
    }

    #[test]
    fn contract_errors() {
        let steel = Material::new("s", 0.042, 7.9).with_buildup(2.013, 4.0);
        assert!(attenuation(&steel).is_err());
        let low = Material::new("s", 0.042, 7.9).with_buildup(0.9, 4.0);
        assert!(matches!(
            attenuation_with_buildup(&low),
            Err(Error::InvalidMaterial { .. })
        ));
        assert!(attenuation_with_buildup(&Material::new("p", 0.05, 1.0)).is_err());
        assert!(attenuation(&Material::new("k", 0.0, 1.0)).is_err());
    }

    #[test]
    fn pu_foam_borrows_pe_kappa() {
        let m = default_materials();
        assert_eq!(
            find_material(&m, "PU foam").unwrap().kappa,
            find_material(&m, "PE rubber").unwrap().kappa
        );
    }

    proptest! {
        #[test]
        fn buildup_never_raises_attenuation(
            kappa in 0.001f64..1.0, rho in 0.0f64..20.0, b in 1.0f64..10.0, w in 0.1f64..20.0
        ) {
            let plain = attenuation(&Material::new("m", kappa, rho)).unwrap();
            let with = attenuation_with_buildup(&Material::new("m", kappa, rho).with_buildup(b, w)).unwrap();
            prop_assert!(with <= plain);
        }

        #[test]
        fn monotone_in_density(
            kappa in 0.001f64..1.0, rho in 0.0f64..10.0, extra in 0.001f64..10.0, b in 1.0f64..5.0
        ) {
            let f = |r: f64| attenuation_with_buildup(&Material::new("m", kappa, r).with_buildup(b, 4.0)).unwrap();
            let g = |r: f64| attenuation(&Material::new("m", kappa, r)).unwrap();
            prop_assert!(f(rho + extra) > f(rho));
            prop_assert!(g(rho + extra) > g(rho));
        }
    }
}
