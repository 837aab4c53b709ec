pub mod action;
pub mod developer;
pub mod executor;
pub mod harness;
pub mod llm_gateway;
pub mod metrics;
pub mod observer;
pub mod refiner;
pub mod sandbox;
pub mod target;
pub mod tester;
pub mod trajectory;
pub mod virtual_target;
