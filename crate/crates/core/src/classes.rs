//! The nine annotated arterial segments and their laterality.

pub const NUM_CLASSES: usize = 9;

/// Segment names, indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "ACA_A2",
    "Contralateral_ACA_A1",
    "Contralateral_MCA_M1",
    "Contralateral_PCA_P1",
    "Contralateral_PCA_P2",
    "Ipsilateral_ACA_A1",
    "Ipsilateral_MCA_M1",
    "Ipsilateral_PCA_P1",
    "Ipsilateral_PCA_P2",
];

/// Annotated instance counts per class (3,419 in total).
pub const INSTANCE_COUNTS: [u32; NUM_CLASSES] = [94, 327, 323, 502, 167, 397, 704, 406, 499];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Laterality {
    Ipsilateral,
    Contralateral,
    /// Laterality not distinguished (ACA_A2).
    Midline,
}

pub fn laterality(class_id: usize) -> Laterality {
    match class_id {
        0 => Laterality::Midline,
        1..=4 => Laterality::Contralateral,
        _ => Laterality::Ipsilateral,
    }
}

/// Same anatomical segment on the other side; `None` for ACA_A2.
pub fn counterpart(class_id: usize) -> Option<usize> {
    match class_id {
        1..=4 => Some(class_id + 4),
        5..=8 => Some(class_id - 4),
        _ => None,
    }
}

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}
