//! Empirical likelihood ratio tests for comparing nonparametric regression
//! models by leave-one-out prediction error.

pub mod chi2;
pub mod data;
pub mod distributed;
pub mod elr;
pub mod linalg;
pub mod loocv;
pub mod model;
pub mod num;
pub mod quantile;
pub mod root;
pub mod sim;
pub mod spline;

pub use num::Scalar;

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type ScoreVector64 = elr::ScoreVector<f64>;
pub type ScoreVector32 = elr::ScoreVector<f32>;
pub type ElrReport64 = elr::ElrReport<f64>;
pub type ElrReport32 = elr::ElrReport<f32>;
pub type PipelineConfig64 = model::PipelineConfig<f64>;
pub type PipelineConfig32 = model::PipelineConfig<f32>;
