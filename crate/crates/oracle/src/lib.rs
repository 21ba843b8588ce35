pub mod exact;
pub mod reference;
