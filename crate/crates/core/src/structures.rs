//! Fixed structure-slot ordering: fourteen organs at risk followed by the PTV.

pub const NUM_OARS: usize = 14;
pub const NUM_SLOTS: usize = NUM_OARS + 1;
pub const PTV: usize = 14;

pub const BODY: usize = 0;
pub const LEFT_BRACHIAL_PLEXUS: usize = 1;
pub const RIGHT_BRACHIAL_PLEXUS: usize = 2;
pub const ESOPHAGUS: usize = 3;
pub const SKIN_RIND: usize = 4;
pub const BRONCHIAL_TREE: usize = 5;
pub const CHEST_WALL: usize = 6;
pub const LEFT_LUNG: usize = 7;
pub const RIGHT_LUNG: usize = 8;
pub const HEART: usize = 9;
pub const TRACHEA: usize = 10;
pub const CARINA: usize = 11;
pub const SPINAL_CORD: usize = 12;
pub const LIVER: usize = 13;

pub const SLOT_NAMES: [&str; NUM_SLOTS] = [
    "body",
    "left_brachial_plexus",
    "right_brachial_plexus",
    "esophagus",
    "skin_rind",
    "bronchial_tree",
    "chest_wall",
    "left_lung",
    "right_lung",
    "heart",
    "trachea",
    "carina",
    "spinal_cord",
    "liver",
    "ptv",
];

/// PTV plus the four lung-cancer OARs reported in evaluation tables.
pub const STRUCTURES_OF_INTEREST: [usize; 5] = [PTV, LEFT_LUNG, RIGHT_LUNG, CHEST_WALL, SPINAL_CORD];

pub fn slot_name(slot: usize) -> &'static str {
    SLOT_NAMES[slot]
}

pub fn slot_by_name(name: &str) -> Option<usize> {
    SLOT_NAMES.iter().position(|n| *n == name)
}
