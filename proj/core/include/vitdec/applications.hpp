#pragma once

#include "vitdec/align.hpp"
#include "vitdec/attribution.hpp"
#include "vitdec/decompose.hpp"
#include "vitdec/model.hpp"

#include <functional>
#include <optional>

namespace vitdec {

/// Records one forward per image and decomposes it; deterministic and
/// parallel over images.
DecompositionSet decompose_dataset(const ToyModel& model, const SyntheticDataset& ds,
                                   const std::vector<int>& indices, const DecomposeOptions& opts);

std::vector<std::string> component_labels(const DecompositionSet& set);

/// (images x d) matrix of one component's contributions (tokens summed).
Eigen::MatrixXd component_matrix(const DecompositionSet& set, int component);

/// Applies the aligner: one (images x d_ref) matrix per component.
std::vector<Eigen::MatrixXd> aligned_component_matrices(const DecompositionSet& set,
                                                        const Aligner& aligner);

/// Training views for the alignment stage.
AlignData align_data_from(const DecompositionSet& set, const Eigen::MatrixXd& targets);

struct RetrievalResult {
    std::string query;
    std::vector<std::string> components_used;
    std::vector<int> image_ids;        // ranked, best first
    std::vector<double> similarities;  // descending
    std::vector<int> excluded;         // zero-norm summed contributions
    bool uninformative = false;        // all similarities ~ 0
};

/// Text-style retrieval: rank images by the cosine between the summed
/// aligned contributions of the feature's top components and the probe
/// vector u (reference space).
RetrievalResult retrieve_text(const DecompositionSet& set, const Aligner& aligner,
                              const ScoreMatrix& scores, const std::string& feature,
                              const Eigen::VectorXd& u, int k_components, int k_images);

/// Image-based retrieval: gap-selected components form a feature-specific
/// representation in *model* space; the aligner is only used upstream for
/// the scores.
RetrievalResult retrieve_image(const DecompositionSet& set, const ScoreMatrix& scores,
                               const std::string& feature, int k_components, int reference_pos,
                               int k_images);

struct HeatmapImage {
    int grid = 0;
    bool has_cls = false;
    std::vector<double> cell;  // grid*grid signed scores, raster order
    double cls_score = 0.0;    // CLS token reported separately
    double unmapped = 0.0;     // contributions without a token split
    double bound = 0.0;        // symmetric color scale limit max|cell|
    std::vector<std::string> components_used;

    double total() const; // sum of cells + cls + unmapped
};

/// Per-token scores u^T f_i(c_{i,t}) summed over the selected components.
/// Needs component-token granularity.
HeatmapImage token_heatmap(const DecompositionSet& set, const Aligner& aligner,
                           const Eigen::VectorXd& u, const std::vector<int>& components,
                           int image_pos);

/// Diverging blue-white-red rendering, symmetric about zero.
void write_heatmap_ppm(const HeatmapImage& map, const std::string& path, int cell_pixels = 16);

/// z' = z - sum_{i in set} (c_i - mean c_i); means are taken over this set.
std::vector<Tensor> mean_ablate(const DecompositionSet& set, const std::vector<int>& components);

using Predictor = std::function<int(const Tensor&)>;

struct AblationCurve {
    std::vector<std::string> group_order; // ablation order, last layer first
    std::vector<double> accuracy;         // accuracy[s] = after s groups ablated
    std::vector<int> block_endpoints;     // steps completing a block
    double auc_normalized = 0.0;          // mean over steps of (acc-chance)/(acc0-chance)
};

/// Cumulative mean-ablation, last layer first (MLP before its attention
/// group, conv last within a layer, init at the very end).
AblationCurve ablation_curve(const DecompositionSet& set, const Predictor& predictor,
                             const std::vector<int>& labels, int n_classes);

struct GroupAccuracy {
    int n_fg = 0, n_bg = 0;
    std::vector<double> cell; // fg x bg accuracies, row-major (-1: empty cell)
    std::vector<int> counts;
    double worst = 0.0, average = 0.0, best = 0.0;
};

GroupAccuracy group_accuracy(const std::vector<int>& predictions, const std::vector<int>& fg,
                             const std::vector<int>& bg, int n_fg, int n_bg);

struct MitigationReport {
    GroupAccuracy before, after;
    std::vector<std::string> ablated;
    int k = 0;
};

/// Gap-selects k components tied to the spurious feature (optionally
/// contrasted against one core feature only), mean-ablates them and
/// re-evaluates per-group accuracy with the same frozen predictor.
MitigationReport mitigate_spurious(const DecompositionSet& set, const ScoreMatrix& scores,
                                   const std::string& spurious_feature,
                                   const std::optional<std::string>& core_feature, int k,
                                   const Predictor& predictor, const std::vector<int>& fg,
                                   const std::vector<int>& bg, int n_fg, int n_bg);

void write_curve_svg(const AblationCurve& curve, const std::string& path);

} // namespace vitdec
