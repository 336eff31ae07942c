use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TaggerError;
use crate::ingest::Bio;

/// The 29 PHI classes of the MEDDOCAN annotation guidelines.
pub const MEDDOCAN_CLASSES: [&str; 29] = [
    "NOMBRE_SUJETO_ASISTENCIA",
    "NOMBRE_PERSONAL_SANITARIO",
    "FAMILIARES_SUJETO_ASISTENCIA",
    "EDAD_SUJETO_ASISTENCIA",
    "SEXO_SUJETO_ASISTENCIA",
    "OTROS_SUJETO_ASISTENCIA",
    "PROFESION",
    "FECHAS",
    "CALLE",
    "TERRITORIO",
    "PAIS",
    "HOSPITAL",
    "INSTITUCION",
    "CENTRO_SALUD",
    "CORREO_ELECTRONICO",
    "NUMERO_TELEFONO",
    "NUMERO_FAX",
    "URL_WEB",
    "DIREC_PROT_INTERNET",
    "ID_SUJETO_ASISTENCIA",
    "ID_CONTACTO_ASISTENCIAL",
    "ID_ASEGURAMIENTO",
    "ID_TITULACION_PERSONAL_SANITARIO",
    "ID_EMPLEO_PERSONAL_SANITARIO",
    "IDENTIF_VEHICULOS_NRSERIE_PLACAS",
    "IDENTIF_DISPOSITIVOS_NRSERIE",
    "IDENTIF_BIOMETRICOS",
    "NUMERO_BENEF_PLAN_SALUD",
    "OTRO_NUMERO_IDENTIF",
];

/// Ordered BIO labels: `O` at index 0, then `B-X`, `I-X` for each class in
/// the given order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Bio>", into = "Vec<Bio>")]
pub struct LabelInventory {
    labels: Vec<Bio>,
    index: HashMap<Bio, usize>,
}

impl LabelInventory {
    pub fn from_classes<S: AsRef<str>>(classes: &[S]) -> Result<Self, TaggerError> {
        let mut labels = vec![Bio::O];
        for c in classes {
            let c = c.as_ref();
            if c.is_empty() || c == "O" || c.chars().any(char::is_whitespace) {
                return Err(TaggerError::Inventory(format!("invalid class name {c:?}")));
            }
            labels.push(Bio::B(c.to_string()));
            labels.push(Bio::I(c.to_string()));
        }
        Self::try_from(labels)
    }

    pub fn meddocan() -> Self {
        Self::from_classes(&MEDDOCAN_CLASSES).expect("static class list is valid")
    }

    /// Inventory over the distinct `classes`: MEDDOCAN classes in their
    /// canonical order, then any others sorted by name.
    pub fn observed<'a, I: IntoIterator<Item = &'a str>>(classes: I) -> Result<Self, TaggerError> {
        let mut seen: Vec<&str> = classes.into_iter().collect();
        seen.sort_unstable();
        seen.dedup();
        let rank = |c: &str| {
            MEDDOCAN_CLASSES
                .iter()
                .position(|m| *m == c)
                .unwrap_or(MEDDOCAN_CLASSES.len())
        };
        seen.sort_by_key(|c| rank(c));
        Self::from_classes(&seen)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &Bio) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &Bio {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[Bio] {
        &self.labels
    }

    /// Class names in inventory order.
    pub fn classes(&self) -> Vec<&str> {
        self.labels
            .iter()
            .filter_map(|l| match l {
                Bio::B(c) => Some(c.as_str()),
                _ => None,
            })
            .collect()
    }
}

impl TryFrom<Vec<Bio>> for LabelInventory {
    type Error = TaggerError;

    fn try_from(labels: Vec<Bio>) -> Result<Self, TaggerError> {
        if labels.first() != Some(&Bio::O) {
            return Err(TaggerError::Inventory("label 0 must be O".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(TaggerError::Inventory(format!("duplicate label {l}")));
            }
        }
        for l in &labels {
            let partner = match l {
                Bio::O => continue,
                Bio::B(c) => Bio::I(c.clone()),
                Bio::I(c) => Bio::B(c.clone()),
            };
            if !index.contains_key(&partner) {
                return Err(TaggerError::Inventory(format!("{l} without {partner}")));
            }
        }
        Ok(Self { labels, index })
    }
}

impl From<LabelInventory> for Vec<Bio> {
    fn from(inv: LabelInventory) -> Self {
        inv.labels
    }
}
