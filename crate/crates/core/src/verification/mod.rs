//! Property checkers and independent boundary-distance oracles.

mod controls;
mod gradcheck;
mod jacobian;
mod model_audit;
mod oracle;
mod report;

pub use controls::{RingClassifier, UnconstrainedMlp};
pub use gradcheck::{
    check_unitary_gradient, GradCheckReport, Histogram, InputDistribution, PairStats,
};
pub use jacobian::{
    check_gnp, explicit_jacobian, field_unitarity_deviation, gram_deviation, output_len, vjp_rows,
    GnpMethod, GnpReport, TapeFn, JACOBIAN_ROW_LIMIT,
};
pub use model_audit::{audit_layers, verify_model, LayerAudit, VerifyOptions, VerifyReport};
pub use oracle::{
    map_oracle_grid2d, map_oracle_penalty, GridOptions, MapEstimate, OracleMethod, PenaltySchedule,
};
pub use report::{
    curve_csv, lb_map_report, margins, mean_std, perturbation_probe, recall, robustness_curve,
    CurvePoint, LbMapReport, LbMapRow,
};
