pub mod attention;
pub mod derived;
pub mod foundational;
