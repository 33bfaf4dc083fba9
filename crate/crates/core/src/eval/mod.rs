//! Verification, identification, disentanglement probes, PSNR and
//! inference-time normalization.

mod infer;
mod metrics;
mod probe;
mod protocol;

pub use infer::{extract_feature, extract_features, feature_transfer, normalize_face, reconstruct, to_input};
pub use metrics::{
    cosine_distance, l2_normalize, psnr, rank1_identification, tar_far_auc, verification,
    verification_from_distances, BucketRate, Rank1, Roc, TarFar, Verification, PSNR_CAP_DB,
    PSNR_PEAK, RESOLUTION_BUCKETS,
};
pub use probe::{disentanglement_probe, LinearProbe, ProbeReport, ProbeSample};
pub use protocol::{make_pairs, EncoderChoice, EvalConfig, EvalReport, Evaluator, Pair, Protocol};
