#pragma once

#include <cstdint>
#include <string>

namespace vitdec::cmd {

// Exit codes: 0 success, 2 validation failure, 3 numeric-invariant failure.
constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kNumeric = 3;

struct GlobalOpts {
    std::string artifact_root = "."; // VITDEC_ARTIFACT_ROOT
    bool error_json = false;         // machine-readable errors on stderr
};

std::string resolve(const GlobalOpts& g, const std::string& path);

struct DatasetArgs {
    std::string out;
    uint64_t seed = 1;
    int n_fg = 4, n_bg = 2;
    int n_train = 2000, n_val = 500, n_test = 500;
    double rho_train = 0.5, rho_val = 0.5, rho_test = 0.5;
    double fg_alpha = 0.75, fg_half = 0.20, noise = 0.06;
    std::string fg_style = "distinct";
    int image_size = 32;
};
int cmd_dataset(const GlobalOpts& g, const DatasetArgs& a);

struct TrainArgs {
    std::string dataset, out;
    std::string variant = "vanilla-cls";
    int depth = 4, heads = 4, dim = 32, patch_grid = 4, window = 2;
    uint64_t model_seed = 1, train_seed = 7;
    int epochs = 30, batch = 32;
    double lr = 3e-3;
    std::string target = "foreground";
};
int cmd_train(const GlobalOpts& g, const TrainArgs& a);

struct DecomposeArgs {
    std::string model, dataset, out;
    std::string split = "val";
    std::string granularity = "component";
    int layers = -1; // all
    double tol = 1e-5;
};
int cmd_decompose(const GlobalOpts& g, const DecomposeArgs& a);
int cmd_decompose_verify(const GlobalOpts& g, const std::string& path);

struct AlignArgs {
    std::string decomp, teacher, dataset, out;
    std::string val_decomp; // optional: report validation cosine distance
    double lambda = -1.0;   // default 1/d_ref
    bool no_penalty = false;
    bool single_map = false;
    double lr = 3e-4;
    int epochs = 80, batch = 64;
    uint64_t seed = 11;
};
int cmd_align(const GlobalOpts& g, const AlignArgs& a);
int cmd_align_report(const GlobalOpts& g, const std::string& path);

struct ScoreArgs {
    std::string decomp, aligner, teacher, dataset, out;
    int top_k = 5; // rows printed per feature
};
int cmd_score(const GlobalOpts& g, const ScoreArgs& a);

struct RetrieveArgs {
    std::string mode = "text"; // text | image
    std::string decomp, scores, out;
    std::string aligner; // text mode
    std::string teacher; // text mode: probe vectors come from prototypes
    std::string feature = "background";
    std::string instantiation; // prototype name, e.g. "bg0"
    int k_comp = 3, k_img = 10;
    int ref_image = -1; // image mode: dataset id of the reference
};
int cmd_retrieve(const GlobalOpts& g, const RetrieveArgs& a);

struct HeatmapArgs {
    std::string decomp, aligner, scores, teacher, out;
    std::string feature = "background";
    std::string instantiation;
    int k_comp = 3;
    int image = 0; // dataset id
    int cell_pixels = 16;
};
int cmd_heatmap(const GlobalOpts& g, const HeatmapArgs& a);

struct AblateArgs {
    std::string model, decomp, dataset, out;
    std::string svg; // optional rendering
    std::string target = "foreground";
};
int cmd_ablate(const GlobalOpts& g, const AblateArgs& a);

struct MitigateArgs {
    std::string model, decomp, scores, dataset, out;
    std::string spurious = "background";
    std::string core;    // empty: gap against all other features
    int k = -1;          // default max(2, N/6)
};
int cmd_mitigate(const GlobalOpts& g, const MitigateArgs& a);

/// Maps exceptions to exit codes (and optional machine-readable JSON).
int run_guarded(const GlobalOpts& g, const char* command, int (*fn)(const GlobalOpts&, const void*),
                const void* args);

template <typename Args, int (*Fn)(const GlobalOpts&, const Args&)>
int guarded(const GlobalOpts& g, const char* command, const Args& args) {
    return run_guarded(
        g, command,
        [](const GlobalOpts& gg, const void* a) { return Fn(gg, *static_cast<const Args*>(a)); }, &args);
}

} // namespace vitdec::cmd
