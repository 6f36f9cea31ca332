//! Worlds and plans bundled with the crate.

pub const KITCHEN_SDF: &str = include_str!("../fixtures/kitchen.sdf");
pub const KITCHEN_SEMANTICS: &str = include_str!("../fixtures/kitchen.semantics.json");
/// Opens the kitchen fridge, fetches the milk and delivers it to the counter.
pub const FETCH_MILK_PLAN: &str = include_str!("../fixtures/fetch_milk.plan.json");

/// Fridge with a hinged door: two links, one revolute joint.
pub const FRIDGE_SDF: &str = include_str!("../fixtures/fridge.sdf");

/// Fridge, a cabinet whose drawer carries a bin, a table and milk on it.
pub const APARTMENT_SDF: &str = include_str!("../fixtures/apartment.sdf");
pub const APARTMENT_SEMANTICS: &str = include_str!("../fixtures/apartment.semantics.json");
