#pragma once

#include "vitdec/dataset.hpp"
#include "vitdec/graph.hpp"
#include "vitdec/rng.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vitdec {

enum class Variant { VanillaCls, VanillaMeanpool, Windowed, GridBlock };

Variant variant_from_string(const std::string& s);
const char* to_string(Variant v);

struct ModelConfig {
    Variant variant = Variant::VanillaCls;
    int depth = 4;
    int heads = 4;
    int dim = 32;
    int patch_grid = 4; // tokens per side
    int window = 2;     // windowed/gridblock partition side
    bool shift_windows = true;
    int image_size = 32;
    int channels = 3;
    int n_classes = 4;
    uint64_t seed = 1;

    void validate() const;
    int patch_size() const { return image_size / patch_grid; }
    int patch_dim() const { return channels * patch_size() * patch_size(); }
    bool has_cls() const { return variant == Variant::VanillaCls; }
    int tokens() const { return patch_grid * patch_grid + (has_cls() ? 1 : 0); }
    /// Windowed models merge patches between stages while the grid is
    /// larger than the window, doubling the channel width once.
    bool merges() const { return variant == Variant::Windowed && patch_grid / 2 >= window; }
    int final_dim() const { return merges() ? 2 * dim : dim; }
    std::string id() const;
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
    // gridblock conv sublayer
    Tensor conv_w1, conv_b1, conv_w2, conv_b2;
};

struct MergeParams {
    Tensor ln_g, ln_b; // width 4d
    Tensor w;          // (4d, 2d), no bias
};

struct ToyModel {
    ModelConfig cfg;
    Tensor patch_w, patch_b; // (patch_dim, d), (d)
    Tensor cls;              // (1, d), CLS variant only
    Tensor pos;              // (tokens, d)
    std::vector<BlockParams> blocks;
    MergeParams merge;
    Tensor lnf_g, lnf_b; // final norm, width final_dim
    Tensor head_w, head_b; // (final_dim, n_classes)
};

/// Deterministic weights from cfg.seed. Blocks draw their parameters in a
/// fixed order so variants with the same (depth, heads, dim) share weights.
ToyModel build_model(const ModelConfig& cfg);

/// Visits every parameter tensor in the fixed serialization order.
void visit_params(ToyModel& m, const std::function<void(Tensor&)>& fn);
void visit_params(const ToyModel& m, const std::function<void(const Tensor&)>& fn);

/// Token embedding (patchify + linear + positions [+ CLS]), off-tape.
Tensor embed_image(const ToyModel& model, const Tensor& image);

struct RecordedForward {
    std::shared_ptr<Tape> tape;
    NodeId z_node = kNoNode;
    Tensor z;      // final representation
    Tensor logits; // classifier head applied off-tape
};

/// Forward pass that records every primitive op on a fresh tape with the
/// annotations the decomposition pass consumes.
RecordedForward forward_record(const ToyModel& model, const Tensor& image);

/// Plain forward (no tape); same kernels and op order as the recorded path.
Tensor represent(const ToyModel& model, const Tensor& image);
Tensor logits_from(const ToyModel& model, const Tensor& z);
int predict_from(const ToyModel& model, const Tensor& z);

std::vector<Tensor> represent_batch(const ToyModel& model, const SyntheticDataset& ds,
                                    const std::vector<int>& indices);

enum class TrainTarget { Foreground, Background, Group };
TrainTarget train_target_from_string(const std::string& s);
const char* to_string(TrainTarget t);
int target_label(const SyntheticDataset& ds, int image, TrainTarget t);
int target_classes(const SyntheticDataset& ds, TrainTarget t);

struct TrainConfig {
    int epochs = 30;
    int batch = 32;
    float lr = 3e-3f;
    uint64_t seed = 7;
    TrainTarget target = TrainTarget::Foreground;
    bool verbose = false;
};

struct TrainResult {
    float train_accuracy = 0.0f;
    float val_accuracy = 0.0f;
    std::vector<float> loss_curve; // mean loss per epoch
};

/// End-to-end training with hand-derived analytic gradients (Adam). Only
/// the vanilla variants are trainable; the windowed/gridblock ones are
/// analysis-only. Aborts with diagnostics when the loss goes non-finite.
TrainResult train_toy(ToyModel& model, const SyntheticDataset& ds, const TrainConfig& cfg);

float evaluate(const ToyModel& model, const SyntheticDataset& ds, const std::vector<int>& indices,
               TrainTarget target);

/// Softmax-regression probe on frozen representations.
struct LinearProbe {
    Tensor w, b; // (d, classes), (classes)
    int predict(const Tensor& z) const;
};
LinearProbe train_linear_probe(const std::vector<Tensor>& reps, const std::vector<int>& labels,
                               int classes, int epochs, float lr, uint64_t seed);
float probe_accuracy(const LinearProbe& probe, const std::vector<Tensor>& reps,
                     const std::vector<int>& labels);

/// Frozen reference encoder: a trained toy model plus unit-normalized
/// per-instantiation prototype embeddings (class means in its own space).
struct PrototypeTable {
    std::vector<std::string> names;    // e.g. "fg0", "bg1"
    std::vector<std::string> features; // "foreground" / "background"
    std::vector<Tensor> rows;          // unit-norm, width = teacher final_dim
};

PrototypeTable compute_prototypes(const ToyModel& model, const SyntheticDataset& ds,
                                  const std::vector<int>& indices);

} // namespace vitdec
