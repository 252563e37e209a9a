pub mod backends;
pub mod cards;
pub mod cas;
pub mod client;
pub mod flow;
pub mod home;
pub mod metadata;
pub mod protocol;
pub mod runtime;
