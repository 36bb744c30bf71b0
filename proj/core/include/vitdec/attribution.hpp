#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace vitdec {

/// An abstract image feature described by example instantiation embeddings
/// (rows of B, in the reference space).
struct FeatureSpec {
    std::string name;
    std::vector<std::string> instantiations;
    Eigen::MatrixXd embeddings; // k x d_ref

    void validate() const;
};

/// Component x feature importance scores. Degenerate entries (zero
/// variance in a projection) are recorded as 0 with a flag.
struct ScoreMatrix {
    std::vector<std::string> component_labels;
    std::vector<std::string> feature_names;
    Eigen::MatrixXd scores;           // components x features
    std::vector<uint8_t> degenerate;  // row-major flags, same shape
    std::string aligner_id;
    std::string dataset_id;
    int n_images = 0;

    int components() const { return static_cast<int>(scores.rows()); }
    int features() const { return static_cast<int>(scores.cols()); }
    int feature_index(const std::string& name) const;
    bool flagged(int component, int feature) const {
        return degenerate[static_cast<size_t>(component) * feature_names.size() +
                          static_cast<size_t>(feature)] != 0;
    }
};

/// Gram-Schmidt over the rows, in the given order; rows whose residual
/// norm falls under `tol` are dropped as rank-deficient.
Eigen::MatrixXd orthogonalize(const Eigen::MatrixXd& b, double tol = 1e-6);

/// Importance of one component for one feature: project the per-image
/// component contributions C and the summed representations Z onto the
/// orthonormalized feature subspace and average the per-column Pearson
/// correlations across images. Zero-variance columns contribute 0 and set
/// the flag.
double comp_attribute(const Eigen::MatrixXd& c, const Eigen::MatrixXd& z, const Eigen::MatrixXd& b,
                      bool* flagged_out = nullptr);

/// Fills the full matrix; z is recomputed as the sum of the per-component
/// aligned contributions.
ScoreMatrix score_matrix(const std::vector<Eigen::MatrixXd>& aligned_contribs,
                         const std::vector<std::string>& component_labels,
                         const std::vector<FeatureSpec>& features);

/// The reference-similarity proxy ordering: per instantiation, correlate
/// cos(aligned contribution, y) with cos(z_ref, y) across images, then
/// average over the feature's instantiations.
Eigen::MatrixXd cosine_proxy_scores(const std::vector<Eigen::MatrixXd>& aligned_contribs,
                                    const Eigen::MatrixXd& z_ref,
                                    const std::vector<FeatureSpec>& features);

/// Descending by score; ties broken by ascending index.
std::vector<int> component_ordering(const ScoreMatrix& s, int feature);
std::vector<int> feature_ordering(const ScoreMatrix& s, int component);

/// Components ranked by min over other features of (s_ip - s_ip'),
/// descending; `contrast` >= 0 restricts the gap to one feature.
std::vector<int> select_by_gap(const ScoreMatrix& s, int feature, int k, int contrast = -1);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

} // namespace vitdec
