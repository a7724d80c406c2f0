//! Diagnostics: gradient checks, activation histograms, feature-map dumps
//! and parameter tables.

pub mod features;
pub mod gradcheck;
pub mod histogram;
pub mod params;

pub use features::{decode_pgm, dump_feature_maps, encode_pgm};
pub use gradcheck::{check_all, check_op, finite_difference_check, op_names, GradCheckReport, Instance};
pub use histogram::{activation_histogram, histogram, HistogramReport};
pub use params::{param_table, param_table_csv, ParamRow};
