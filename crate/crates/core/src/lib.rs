pub mod broker;
pub mod clock;
pub mod datagen;
pub mod engine;
pub mod harness;
pub mod model;
pub mod sender;
pub mod store;
pub mod validator;
