#pragma once

#include "vitdec/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace vitdec {

/// Training corpus for the alignment maps: one (n_images x d) matrix of
/// contributions per component, plus the (n_images x d_ref) reference
/// representations they should reassemble into.
struct AlignData {
    std::vector<Eigen::MatrixXd> contribs;
    Eigen::MatrixXd targets;

    int images() const { return static_cast<int>(targets.rows()); }
    int components() const { return static_cast<int>(contribs.size()); }
    void validate() const;
};

struct AlignTrainConfig {
    double learning_rate = 3e-4;
    double lr_decay = 1.0; // per-epoch multiplier; 1.0 keeps the rate constant
    double lambda = -1.0;  // negative: use the default 1/d_ref
    bool use_penalty = true;
    bool single_map = false;
    int epochs = 80;
    int batch = 64;
    uint64_t seed = 11;

    double resolved_lambda(int d_ref) const {
        if (!use_penalty) return 0.0;
        return lambda < 0.0 ? 1.0 / static_cast<double>(d_ref) : lambda;
    }
};

/// One linear map per component into the reference space, plus the
/// training log.
struct Aligner {
    std::vector<std::string> component_labels;
    int d = 0;
    int d_ref = 0;
    double lambda = 0.0;
    bool single_map = false;
    uint64_t seed = 0;
    std::vector<Eigen::MatrixXd> maps; // each d_ref x d

    struct Log {
        std::vector<double> loss_curve;       // per epoch, full objective
        std::vector<double> cos_curve;        // per epoch, mean cosine distance (train)
        double final_train_cos = 0.0;
        double final_val_cos = -1.0;          // -1: no validation set
        int skipped_samples = 0;              // zero-norm aligned sums
    } log;

    /// Sum of mapped contributions for one image (row of each C_k).
    Eigen::VectorXd apply_sum(const AlignData& data, int row) const;
};

/// Full objective: mean over the selected rows of 1 - cos(sum_i f_i(c_i), z)
/// plus lambda * sum_i ||f_i^T f_i - I||_F. Rows whose mapped sum has norm
/// < 1e-8 are skipped and counted. When grads is non-null the analytic
/// gradient (same batch, same skipping) is written there.
double align_loss(const std::vector<Eigen::MatrixXd>& maps, const AlignData& data,
                  const std::vector<int>& rows, double lambda,
                  std::vector<Eigen::MatrixXd>* grads = nullptr, int* skipped = nullptr,
                  bool tie_maps = false);

/// Mean cosine distance only (no penalty), over all rows of `data`.
double mean_cosine_distance(const std::vector<Eigen::MatrixXd>& maps, const AlignData& data,
                            int* skipped = nullptr);

/// Adam over the maps with the loss above; deterministic given the seed.
/// `val` only adds reporting. Aborts via NumericError if the loss goes
/// non-finite.
Aligner train_compalign(const AlignData& train, const AlignData* val, const AlignTrainConfig& cfg,
                        const std::vector<std::string>& component_labels);

/// Same objective with all maps tied to one shared matrix.
Aligner single_map_baseline(const AlignData& train, const AlignData* val, const AlignTrainConfig& cfg,
                            const std::vector<std::string>& component_labels);

struct OrthogonalityRow {
    std::string component;
    double deviation_identity; // ||F^T F - I||_F
    double best_k;             // trace(F^T F) / d
    double deviation_scaled;   // ||F^T F - kI||_F at best k
    double relative_scaled;    // deviation_scaled / ||kI||_F
};

std::vector<OrthogonalityRow> orthogonality_report(const Aligner& aligner);

/// Counts pairs (u, v) with ||u|| <= ||v|| but ||f(u)|| > ||f(v)|| + tol.
int rank_ordering_violations(const Eigen::MatrixXd& f, int trials, double tol, Rng& rng);

/// Inter-component variant: u goes through f_i, v through f_j.
int rank_ordering_violations(const Eigen::MatrixXd& fi, const Eigen::MatrixXd& fj, int trials,
                             double tol, Rng& rng);

/// Thin Q factor of a Gaussian matrix, sign-fixed for determinism.
Eigen::MatrixXd random_orthogonal(int rows, int cols, Rng& rng);

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

} // namespace vitdec
