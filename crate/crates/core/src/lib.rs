//! Data model, synthetic corpus, evaluation metrics and gravity baselines
//! for origin-destination flow generation.

pub mod corpus;
pub mod error;
pub mod gravity;
pub mod io;
pub mod metrics;
pub mod od;
pub mod robustness;
pub mod seed;

pub use corpus::{generate_city, generate_corpus, CityBundle, Corpus, CorpusConfig, Split, SplitName};
pub use error::{Error, Result};
pub use gravity::{gravity_fit, gravity_fit_cities, gravity_predict, DecayForm, GravityParams};
pub use metrics::{cpc, evaluate, jsd_histogram, nrmse, rmse, EvalOptions, MetricsReport};
pub use od::{log_inverse, log_transform, permutation_apply, FeatureMatrix, ODMatrix, Permutation, RegionSet, Scale};
pub use robustness::{perm_robustness, FlowGenerator, RobustnessTable};
