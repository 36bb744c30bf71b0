#pragma once

#include "vitdec/rng.hpp"
#include "vitdec/tensor.hpp"

#include <string>
#include <vector>

namespace vitdec {

/// Generation recipe for the synthetic foreground/background world.
/// Every image composes one foreground shape with one background texture;
/// rho is the probability that a class's preferred background is used.
struct DatasetSpec {
    int n_fg = 4;
    int n_bg = 2;
    int n_train = 2000;
    int n_val = 500;
    int n_test = 500;
    double rho_train = 0.5;
    double rho_val = 0.5;
    double rho_test = 0.5;
    int image_size = 32;
    float fg_alpha = 0.75f; // foreground opacity over the background texture
    float fg_half = 0.20f;  // shape half-extent as a fraction of the image side
    float noise = 0.06f;    // per-pixel gaussian noise
    // "distinct": own colour and shape per class. "mono": one shared
    // colour, shape-only classes. "paired": colour encodes class/2, shape
    // encodes class%2, so half the label bits are easy and half are hard.
    std::string fg_style = "distinct";
    uint64_t seed = 1;

    void validate() const;
};

enum class Split { Train, Val, Test };

struct SyntheticDataset {
    DatasetSpec spec;
    std::vector<Tensor> images; // each (3, S, S), values in [0, 1]
    std::vector<int> labels;    // foreground class
    std::vector<int> groups;    // background class
    std::vector<int> train_idx, val_idx, test_idx;

    const std::vector<int>& split(Split s) const {
        switch (s) {
            case Split::Train: return train_idx;
            case Split::Val: return val_idx;
            case Split::Test: return test_idx;
        }
        return train_idx;
    }
    int size() const { return static_cast<int>(images.size()); }
    int group_cell(int i) const { return labels[i] * spec.n_bg + groups[i]; }
};

Split split_from_string(const std::string& s);
const char* to_string(Split s);

/// Deterministic: the same spec (including seed) regenerates the dataset
/// bit for bit, regardless of thread count.
SyntheticDataset gen_synthetic(const DatasetSpec& spec);

/// Directory layout: manifest.json + images.f32 (row-major float32).
void save_dataset(const SyntheticDataset& ds, const std::string& dir);
SyntheticDataset load_dataset(const std::string& dir);

/// Flattens one image into patch rows for the toy encoders:
/// (grid*grid, channels*patch*patch), raster order.
Tensor patchify(const Tensor& image, int grid);

} // namespace vitdec
